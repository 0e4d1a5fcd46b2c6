//! `lqer`: command-line front end for the reconstruction toolkit.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lqer_core::io::{
    load_bundle, load_matrix, load_profile, profile_hash, save_bundle, save_matrix, save_profile,
    write_atomic, Bundle, BundleLayer,
};
use lqer_core::layer::default_rank;
use lqer_core::reconstruct::ErrorReport;
use lqer_core::synth::split_tokens;
use lqer_core::{
    approximation_error, avg_bitwidth, build_layer, calibrate, matmul, normalized_spectra,
    output_error, overhead_fraction, quant_error, run_harness, synth_activations, synth_weights,
    BlockOrientation, CalibrationProfile, DeadChannelPolicy, DenseMatrix, HarnessConfig,
    HarnessLayer, LayerConfig, LayerMethod, LqerError, Nonlinearity, QuantConfig,
    SynthActivationConfig,
};

const EXIT_ARGUMENT: u8 = 2;
const EXIT_FORMAT: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;
const EXIT_CALIBRATION: u8 = 5;

#[derive(Parser)]
#[command(
    name = "lqer",
    version,
    about = "Low-rank quantization error reconstruction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Profile activation samples and write a calibration profile.
    Calibrate(CalibrateArgs),
    /// Quantize weights, build corrections and write a layer bundle.
    Quantize(QuantizeArgs),
    /// Normalized singular value spectra of the plain and scaled error.
    Spectrum(SpectrumArgs),
    /// Per-layer and end-to-end error over a grid of methods and ranks.
    RankSweep(RankSweepArgs),
    /// Run a bundle forward on an input matrix.
    Eval(EvalArgs),
    /// Average bit width and low-rank overhead for layer shapes.
    Report(ReportArgs),
    /// Write seeded synthetic weights or activations.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatKind {
    Mxint,
    Int,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Plain,
    Lqer,
    L2qer,
}

impl From<MethodArg> for LayerMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Plain => LayerMethod::Plain,
            MethodArg::Lqer => LayerMethod::Lqer,
            MethodArg::L2qer => LayerMethod::L2qer,
        }
    }
}

/// Weight number format.
#[derive(Args, Clone)]
struct FormatArgs {
    #[arg(long, value_enum, default_value = "mxint")]
    format: FormatKind,
    /// Mantissa bits including sign.
    #[arg(long, default_value_t = 4)]
    bits: u32,
    /// Shared exponent bits (mxint).
    #[arg(long, default_value_t = 4)]
    exp_bits: u32,
    /// Block size along the input dimension (mxint).
    #[arg(long, default_value_t = 16)]
    block: usize,
    /// Group size along the input dimension (int).
    #[arg(long, default_value_t = 128)]
    group: usize,
}

impl FormatArgs {
    fn config(&self) -> lqer_core::Result<QuantConfig> {
        match self.format {
            FormatKind::Mxint => QuantConfig::mxint(
                self.bits,
                self.exp_bits,
                self.block,
                BlockOrientation::AlongCol,
            ),
            FormatKind::Int => {
                QuantConfig::int_grouped(self.bits, self.group, BlockOrientation::AlongCol)
            }
        }
    }
}

/// Activation and factor formats of the layer forward pass.
#[derive(Args, Clone)]
struct PathArgs {
    /// Activation mantissa bits (mxint, 8-bit exponents, blocks of 16 along a row).
    #[arg(long, default_value_t = 8)]
    act_bits: u32,
    /// Keep activations in full precision.
    #[arg(long)]
    no_act_quant: bool,
    /// Low-rank factor mantissa bits (mxint, 4-bit exponents, blocks of 16).
    #[arg(long, default_value_t = 8)]
    factor_bits: u32,
    /// Keep low-rank factors in full precision.
    #[arg(long)]
    no_factor_quant: bool,
}

impl PathArgs {
    fn act_quant(&self) -> lqer_core::Result<Option<QuantConfig>> {
        if self.no_act_quant {
            return Ok(None);
        }
        QuantConfig::mxint(self.act_bits, 8, 16, BlockOrientation::AlongRow).map(Some)
    }

    fn factor_quant(&self) -> lqer_core::Result<Option<QuantConfig>> {
        if self.no_factor_quant {
            return Ok(None);
        }
        QuantConfig::mxint(self.factor_bits, 4, 16, BlockOrientation::AlongCol).map(Some)
    }
}

#[derive(Args)]
struct CalibrateArgs {
    /// Activation sample files, one (tokens x channels) matrix each.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Raise all-zero channels to a small floor instead of failing.
    #[arg(long)]
    floor_dead_channels: bool,
    /// Use at most this many samples.
    #[arg(long, default_value_t = 32)]
    max_samples: usize,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Weight files (in_features x out_features), applied in order.
    #[arg(long, required = true, num_args = 1..)]
    weights: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "l2qer")]
    method: MethodArg,
    #[command(flatten)]
    format: FormatArgs,
    #[command(flatten)]
    path: PathArgs,
    /// Correction rank; defaults to 32, or 256 below 4 weight bits.
    #[arg(long)]
    k: Option<usize>,
    /// Calibration profile (required for l2qer).
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Apply ReLU between consecutive layers.
    #[arg(long)]
    relu: bool,
    /// Recorded in the bundle.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SpectrumArgs {
    weight: PathBuf,
    #[command(flatten)]
    format: FormatArgs,
    /// Calibration profile; the identity profile when omitted.
    #[arg(long)]
    profile: Option<PathBuf>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RankSweepArgs {
    /// Weight files forming the chain.
    #[arg(long, required = true, num_args = 1..)]
    weights: Vec<PathBuf>,
    /// Calibration activation samples for the first layer.
    #[arg(long, num_args = 1..)]
    calib: Vec<PathBuf>,
    /// Evaluation input for the first layer.
    #[arg(long)]
    input: PathBuf,
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "plain,lqer,l2qer"
    )]
    methods: Vec<MethodArg>,
    #[arg(long, value_delimiter = ',', required = true)]
    ks: Vec<usize>,
    #[command(flatten)]
    format: FormatArgs,
    #[command(flatten)]
    path: PathArgs,
    #[arg(long)]
    floor_dead_channels: bool,
    /// Apply ReLU between consecutive layers.
    #[arg(long)]
    relu: bool,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Original weights, one per bundle layer, to report output error against.
    #[arg(long, num_args = 1..)]
    reference: Vec<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    format: FormatArgs,
    /// Layer shapes as MxN, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "4096x4096")]
    dims: Vec<String>,
    #[arg(long, default_value_t = 0)]
    k: usize,
    /// Low-rank factor mantissa bits (mxint, 4-bit exponents, blocks of 16).
    #[arg(long, default_value_t = 8)]
    factor_bits: u32,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Weights,
    Activations,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKind,
    /// Weight rows (in_features).
    #[arg(long, default_value_t = 64)]
    rows: usize,
    /// Weight columns (out_features).
    #[arg(long, default_value_t = 64)]
    cols: usize,
    /// Activation channels.
    #[arg(long, default_value_t = 64)]
    channels: usize,
    /// Activation tokens.
    #[arg(long, default_value_t = 64)]
    tokens: usize,
    #[arg(long, default_value_t = 2)]
    outliers: usize,
    #[arg(long, default_value_t = 100.0)]
    gain: f64,
    /// Standard deviation of the log channel scale.
    #[arg(long, default_value_t = 0.5)]
    spread: f64,
    /// Split one activation draw into this many files of `--tokens` rows
    /// each, named `<stem>-<i>.<ext>`; they share channel gains and outliers.
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ARGUMENT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Spectrum(a) => cmd_spectrum(a),
        Command::RankSweep(a) => cmd_rank_sweep(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &LqerError) -> u8 {
    match e {
        LqerError::Shape(_) | LqerError::Argument(_) | LqerError::Io(_) => EXIT_ARGUMENT,
        LqerError::Format { .. } => EXIT_FORMAT,
        LqerError::NoConvergence { .. } | LqerError::Degenerate(_) => EXIT_NUMERICAL,
        LqerError::DeadChannel { .. } => EXIT_CALIBRATION,
    }
}

fn load_all(paths: &[PathBuf]) -> lqer_core::Result<Vec<DenseMatrix>> {
    paths.iter().map(load_matrix).collect()
}

fn dead_channel_policy(floor: bool) -> DeadChannelPolicy {
    if floor {
        DeadChannelPolicy::Floor
    } else {
        DeadChannelPolicy::Reject
    }
}

fn write_text(out: Option<&Path>, text: &str) -> lqer_core::Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn layer_name(path: &Path, index: usize) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("layer{index}"))
}

fn cmd_calibrate(a: CalibrateArgs) -> lqer_core::Result<()> {
    if a.max_samples == 0 {
        return Err(LqerError::Argument(
            "--max-samples must be at least 1".into(),
        ));
    }
    if a.inputs.len() > a.max_samples {
        eprintln!(
            "note: using the first {} of {} samples",
            a.max_samples,
            a.inputs.len()
        );
    }
    let used = &a.inputs[..a.inputs.len().min(a.max_samples)];
    let samples = load_all(used)?;
    let profile = calibrate(&samples, dead_channel_policy(a.floor_dead_channels))?;
    save_profile(&a.out, &profile)?;
    let lo = profile.a_bar.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = profile.a_bar.iter().cloned().fold(0.0, f64::max);
    println!("channels: {}", profile.channels);
    println!("samples: {}", profile.sample_count);
    println!("a_bar min: {lo:?}");
    println!("a_bar max: {hi:?}");
    println!("condition ratio: {:?}", profile.condition_ratio());
    Ok(())
}

/// `(e_a, rel_frobenius)` of the layer's correction, or of the bare
/// quantization error when there is none.
fn layer_error(w: &DenseMatrix, layer: &lqer_core::LqerLayer) -> lqer_core::Result<ErrorReport> {
    let e_q = quant_error(w, layer.w_q())?;
    match layer.correction() {
        Some(c) => approximation_error(&e_q, c),
        None => {
            let zero = lqer_core::LowRankCorrection::new(
                DenseMatrix::zeros(e_q.rows(), 1),
                DenseMatrix::zeros(1, e_q.cols()),
                lqer_core::CorrectionMethod::Lqer,
                None,
            )?;
            let r = approximation_error(&e_q, &zero)?;
            Ok(ErrorReport { rank: 0, ..r })
        }
    }
}

fn cmd_quantize(a: QuantizeArgs) -> lqer_core::Result<()> {
    let weight_quant = a.format.config()?;
    let method = LayerMethod::from(a.method);
    let cfg = LayerConfig {
        weight_quant,
        method,
        rank: a.k.unwrap_or_else(|| default_rank(&weight_quant)),
        act_quant: a.path.act_quant()?,
        factor_quant: a.path.factor_quant()?,
    };
    let profile = match &a.profile {
        Some(p) => Some(load_profile(p)?),
        None if method == LayerMethod::L2qer => {
            return Err(LqerError::Argument(
                "--method l2qer requires --profile".into(),
            ))
        }
        None => None,
    };
    let weights = load_all(&a.weights)?;
    let mut layers = Vec::with_capacity(weights.len());
    println!("layer\tmethod\tk\te_a\trel_frobenius");
    for (i, (w, path)) in weights.iter().zip(&a.weights).enumerate() {
        let layer = build_layer(w, &cfg, profile.as_ref())?;
        let report = layer_error(w, &layer)?;
        let name = layer_name(path, i);
        println!(
            "{name}\t{method}\t{}\t{:?}\t{:?}",
            report.rank, report.e_a, report.rel_frobenius
        );
        let nonlinearity = if a.relu && i + 1 < weights.len() {
            Nonlinearity::Relu
        } else {
            Nonlinearity::None
        };
        layers.push(BundleLayer {
            name,
            method,
            nonlinearity,
            layer,
        });
    }
    let bundle = Bundle {
        seed: a.seed,
        profile_hash: profile.as_ref().map(profile_hash),
        layers,
    };
    save_bundle(&a.out, &bundle)?;
    Ok(())
}

fn cmd_spectrum(a: SpectrumArgs) -> lqer_core::Result<()> {
    let w = load_matrix(&a.weight)?;
    let profile = match &a.profile {
        Some(p) => load_profile(p)?,
        None => CalibrationProfile::identity(w.rows()),
    };
    if profile.channels != w.rows() {
        return Err(LqerError::Argument(format!(
            "profile covers {} channels but the weight has {} input rows",
            profile.channels,
            w.rows()
        )));
    }
    let w_q = lqer_core::quantize_matrix(&w, &a.format.config()?)?;
    let e_q = quant_error(&w, &w_q)?;
    let (plain, scaled) = normalized_spectra(&e_q, &profile)?;
    let mut csv = String::from("index,sigma_plain,sigma_scaled\n");
    for (i, (p, s)) in plain.iter().zip(&scaled).enumerate() {
        writeln!(csv, "{i},{p:?},{s:?}").expect("writing to a string");
    }
    write_text(a.out.as_deref(), &csv)
}

fn chain_layers(weights: Vec<DenseMatrix>, relu: bool) -> Vec<HarnessLayer> {
    let n = weights.len();
    weights
        .into_iter()
        .enumerate()
        .map(|(i, weight)| HarnessLayer {
            weight,
            nonlinearity: if relu && i + 1 < n {
                Nonlinearity::Relu
            } else {
                Nonlinearity::None
            },
        })
        .collect()
}

fn cmd_rank_sweep(a: RankSweepArgs) -> lqer_core::Result<()> {
    let cfg = HarnessConfig {
        weight_quant: a.format.config()?,
        act_quant: a.path.act_quant()?,
        factor_quant: a.path.factor_quant()?,
        dead_channel_policy: dead_channel_policy(a.floor_dead_channels),
    };
    let layers = chain_layers(load_all(&a.weights)?, a.relu);
    let calib = load_all(&a.calib)?;
    let input = load_matrix(&a.input)?;
    let methods: Vec<LayerMethod> = a.methods.iter().map(|&m| m.into()).collect();
    let report = run_harness(&layers, &methods, &a.ks, &calib, &input, &cfg)?;

    let mut csv = String::from("method,k");
    for i in 0..layers.len() {
        write!(csv, ",layer{i}").expect("writing to a string");
    }
    csv.push_str(",end_to_end\n");
    for row in &report.rows {
        write!(csv, "{},{}", row.method, row.rank).expect("writing to a string");
        for e in &row.per_layer {
            write!(csv, ",{e:?}").expect("writing to a string");
        }
        writeln!(csv, ",{:?}", row.end_to_end.rel_frobenius).expect("writing to a string");
    }
    write_text(a.out.as_deref(), &csv)
}

fn cmd_eval(a: EvalArgs) -> lqer_core::Result<()> {
    let bundle = load_bundle(&a.bundle)?;
    let x = load_matrix(&a.input)?;
    let y = bundle.forward(&x)?;
    save_matrix(&a.out, &y)?;
    println!("layers: {}", bundle.layers.len());
    println!("output: {}x{}", y.rows(), y.cols());
    if !a.reference.is_empty() {
        if a.reference.len() != bundle.layers.len() {
            return Err(LqerError::Argument(format!(
                "{} reference weights given for {} bundle layers",
                a.reference.len(),
                bundle.layers.len()
            )));
        }
        let mut h = x;
        for (path, l) in a.reference.iter().zip(&bundle.layers) {
            h = l.nonlinearity.apply(matmul(&h, &load_matrix(path)?)?);
        }
        let err = output_error(&h, &y)?;
        println!("rel_frobenius: {:?}", err.rel_frobenius);
        println!("max_abs: {:?}", err.max_abs);
    }
    Ok(())
}

fn parse_dims(s: &str) -> lqer_core::Result<(usize, usize)> {
    let bad = || LqerError::Argument(format!("dims `{s}` must look like 4096x4096"));
    let (m, n) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let m: usize = m.trim().parse().map_err(|_| bad())?;
    let n: usize = n.trim().parse().map_err(|_| bad())?;
    if m == 0 || n == 0 {
        return Err(bad());
    }
    Ok((m, n))
}

fn cmd_report(a: ReportArgs) -> lqer_core::Result<()> {
    let low = a.format.config()?;
    let high = QuantConfig::mxint(a.factor_bits, 4, 16, BlockOrientation::AlongCol)?;
    let dims = a
        .dims
        .iter()
        .map(|d| parse_dims(d))
        .collect::<lqer_core::Result<Vec<_>>>()?;
    println!("dims\tavg_bitwidth\toverhead_fraction");
    let (mut bits, mut overhead, mut total) = (0.0, 0.0, 0.0);
    for &(m, n) in &dims {
        let b = avg_bitwidth(&low, (m, n), a.k, &high);
        let o = overhead_fraction((m, n), a.k);
        println!("{m}x{n}\t{b:?}\t{o:?}");
        let size = (m * n) as f64;
        bits += b * size;
        overhead += o * size;
        total += size;
    }
    println!("mean\t{:?}\t{:?}", bits / total, overhead / total);
    Ok(())
}

fn numbered_path(path: &Path, index: usize) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy())
        .unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}-{index}.{}", ext.to_string_lossy()),
        None => format!("{stem}-{index}"),
    };
    path.with_file_name(name)
}

fn cmd_synth(a: SynthArgs) -> lqer_core::Result<()> {
    if a.samples == 0 {
        return Err(LqerError::Argument("--samples must be at least 1".into()));
    }
    let m = match a.kind {
        SynthKind::Weights if a.samples > 1 => {
            return Err(LqerError::Argument(
                "--samples applies to activations only".into(),
            ))
        }
        SynthKind::Weights => synth_weights(a.rows, a.cols, a.seed)?,
        SynthKind::Activations => synth_activations(&SynthActivationConfig {
            channels: a.channels,
            tokens: a.tokens * a.samples,
            outlier_channels: a.outliers,
            outlier_gain: a.gain,
            base_scale_spread: a.spread,
            seed: a.seed,
        })?,
    };
    if a.samples == 1 {
        save_matrix(&a.out, &m)?;
        println!("wrote {}x{} to {}", m.rows(), m.cols(), a.out.display());
        return Ok(());
    }
    for (i, part) in split_tokens(&m, a.tokens)?.iter().enumerate() {
        let path = numbered_path(&a.out, i);
        save_matrix(&path, part)?;
        println!(
            "wrote {}x{} to {}",
            part.rows(),
            part.cols(),
            path.display()
        );
    }
    Ok(())
}
