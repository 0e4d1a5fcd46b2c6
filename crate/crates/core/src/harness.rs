//! Multi-layer evaluation harness.
//!
//! A chain of dense layers is run twice: once in double precision with the
//! original weights (the reference) and once with reconstructed layers for
//! every requested method and rank. For `l2qer`, each layer is calibrated on
//! the activations the approximate chain actually feeds it.

use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate, DeadChannelPolicy};
use crate::error::{LqerError, Result};
use crate::layer::{output_error, LayerConfig, LayerMethod, LqerLayer, OutputError};
use crate::linalg::{matmul, DenseMatrix};
use crate::quant::{quantize_matrix, QuantConfig, QuantizedMatrix};
use crate::reconstruct::{approximation_error, quant_error, ErrorDecomposition, ErrorReport};
use crate::synth::{split_tokens, synth_activations, synth_weights, SynthActivationConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    None,
    Relu,
}

impl Nonlinearity {
    pub fn apply(&self, x: DenseMatrix) -> DenseMatrix {
        match self {
            Nonlinearity::None => x,
            Nonlinearity::Relu => x.map(|v| v.max(0.0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessLayer {
    pub weight: DenseMatrix,
    pub nonlinearity: Nonlinearity,
}

/// Number formats shared by every layer of a harness run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarnessConfig {
    pub weight_quant: QuantConfig,
    pub act_quant: Option<QuantConfig>,
    pub factor_quant: Option<QuantConfig>,
    pub dead_channel_policy: DeadChannelPolicy,
}

impl Default for HarnessConfig {
    /// W4A8 with 8-bit factors.
    fn default() -> Self {
        Self {
            weight_quant: QuantConfig::weight_default(),
            act_quant: Some(QuantConfig::activation_default()),
            factor_quant: Some(QuantConfig::factor_default()),
            dead_channel_policy: DeadChannelPolicy::Reject,
        }
    }
}

impl HarnessConfig {
    /// The per-layer configuration this harness uses for one (method, rank).
    pub fn layer_config(&self, method: LayerMethod, rank: usize) -> LayerConfig {
        LayerConfig {
            weight_quant: self.weight_quant,
            method,
            rank,
            act_quant: self.act_quant,
            factor_quant: self.factor_quant,
        }
    }
}

/// Result for one (method, rank) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessRow {
    pub method: LayerMethod,
    /// 0 for [`LayerMethod::Plain`].
    pub rank: usize,
    /// Each layer's relative output error when fed the reference chain's
    /// input to that layer.
    pub per_layer: Vec<f64>,
    /// Reconstruction quality of each layer's correction, if it has one.
    pub reconstruction: Vec<Option<ErrorReport>>,
    pub end_to_end: OutputError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessReport {
    pub rows: Vec<HarnessRow>,
}

impl HarnessReport {
    pub fn find(&self, method: LayerMethod, rank: usize) -> Option<&HarnessRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.rank == rank)
    }

    /// Rows of one method, in the order they were requested.
    pub fn method_rows(&self, method: LayerMethod) -> impl Iterator<Item = &HarnessRow> {
        self.rows.iter().filter(move |r| r.method == method)
    }
}

fn check_chain(layers: &[HarnessLayer], input: &DenseMatrix, calib: &[DenseMatrix]) -> Result<()> {
    let first = layers
        .first()
        .ok_or_else(|| LqerError::argument("harness needs at least one layer"))?;
    let mut width = first.weight.rows();
    if input.cols() != width {
        return Err(LqerError::shape(format!(
            "input has {} features but the first layer expects {width}",
            input.cols()
        )));
    }
    if let Some(c) = calib.iter().find(|c| c.cols() != width) {
        return Err(LqerError::shape(format!(
            "calibration sample has {} features but the first layer expects {width}",
            c.cols()
        )));
    }
    for (i, l) in layers.iter().enumerate() {
        if l.weight.rows() != width {
            return Err(LqerError::shape(format!(
                "layer {i} expects {} features but receives {width}",
                l.weight.rows()
            )));
        }
        width = l.weight.cols();
    }
    Ok(())
}

/// Per-layer state that does not depend on the method or rank.
struct LayerCache {
    w_q: QuantizedMatrix,
    e_q: DenseMatrix,
    lqer: Option<ErrorDecomposition>,
    /// Last scaled decomposition; reused while the layer's profile is unchanged.
    l2qer: Option<ErrorDecomposition>,
}

/// Builds the approximate chain for one (method, rank) and propagates the
/// calibration samples through it.
fn build_chain(
    layers: &[HarnessLayer],
    cache: &mut [LayerCache],
    cfg: &HarnessConfig,
    method: LayerMethod,
    rank: usize,
    calib: &[DenseMatrix],
) -> Result<Vec<LqerLayer>> {
    let fq = cfg.factor_quant.as_ref();
    let mut current: Vec<DenseMatrix> = calib.to_vec();
    let mut built = Vec::with_capacity(layers.len());
    for (i, (l, c)) in layers.iter().zip(cache.iter_mut()).enumerate() {
        let correction = match method {
            LayerMethod::Plain => None,
            LayerMethod::Lqer => {
                if c.lqer.is_none() {
                    c.lqer = Some(ErrorDecomposition::lqer(&c.e_q)?);
                }
                Some(c.lqer.as_ref().expect("filled above").factors(rank, fq)?)
            }
            LayerMethod::L2qer => {
                let profile = calibrate(&current, cfg.dead_channel_policy)?;
                let stale = c.l2qer.as_ref().and_then(|d| d.profile()) != Some(&profile);
                if stale {
                    c.l2qer = Some(ErrorDecomposition::l2qer(&c.e_q, &profile)?);
                }
                Some(c.l2qer.as_ref().expect("filled above").factors(rank, fq)?)
            }
        };
        let layer = LqerLayer::from_parts(
            c.w_q.clone(),
            correction,
            cfg.act_quant,
            Some(l.weight.clone()),
        )?;
        if method == LayerMethod::L2qer && i + 1 < layers.len() {
            current = current
                .iter()
                .map(|x| Ok(l.nonlinearity.apply(layer.forward(x)?)))
                .collect::<Result<_>>()?;
        }
        built.push(layer);
    }
    Ok(built)
}

/// Runs every requested (method, rank) pair over the chain.
///
/// `Plain` is evaluated once regardless of `ranks`. Every rank must fit every
/// layer. Calibration samples are required when `L2qer` is requested.
pub fn run_harness(
    layers: &[HarnessLayer],
    methods: &[LayerMethod],
    ranks: &[usize],
    calib: &[DenseMatrix],
    input: &DenseMatrix,
    cfg: &HarnessConfig,
) -> Result<HarnessReport> {
    check_chain(layers, input, calib)?;
    if methods.contains(&LayerMethod::L2qer) && calib.is_empty() {
        return Err(LqerError::argument("l2qer needs calibration samples"));
    }
    let max_rank = layers
        .iter()
        .map(|l| l.weight.rows().min(l.weight.cols()))
        .min()
        .expect("non-empty chain");
    if let Some(&k) = ranks.iter().find(|&&k| k == 0 || k > max_rank) {
        return Err(LqerError::argument(format!(
            "rank {k} outside 1..={max_rank} for this chain"
        )));
    }

    // Reference chain: inputs to each layer, pre-activation outputs, final output.
    let mut ref_inputs = Vec::with_capacity(layers.len());
    let mut ref_pre = Vec::with_capacity(layers.len());
    let mut h = input.clone();
    for l in layers {
        let pre = matmul(&h, &l.weight)?;
        ref_inputs.push(h);
        h = l.nonlinearity.apply(pre.clone());
        ref_pre.push(pre);
    }
    let y_ref = h;

    let mut cache = layers
        .iter()
        .map(|l| {
            let w_q = quantize_matrix(&l.weight, &cfg.weight_quant)?;
            let e_q = quant_error(&l.weight, &w_q)?;
            Ok(LayerCache {
                w_q,
                e_q,
                lqer: None,
                l2qer: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for &method in methods {
        let method_ranks: Vec<usize> = if method == LayerMethod::Plain {
            vec![0]
        } else {
            ranks.to_vec()
        };
        for rank in method_ranks {
            let chain = build_chain(layers, &mut cache, cfg, method, rank, calib)?;
            let mut per_layer = Vec::with_capacity(layers.len());
            let mut reconstruction = Vec::with_capacity(layers.len());
            let mut h = input.clone();
            for (i, (l, layer)) in layers.iter().zip(&chain).enumerate() {
                let isolated = layer.forward(&ref_inputs[i])?;
                per_layer.push(output_error(&ref_pre[i], &isolated)?.rel_frobenius);
                reconstruction.push(match layer.correction() {
                    Some(c) => Some(approximation_error(&cache[i].e_q, c)?),
                    None => None,
                });
                h = l.nonlinearity.apply(layer.forward(&h)?);
            }
            rows.push(HarnessRow {
                method,
                rank,
                per_layer,
                reconstruction,
                end_to_end: output_error(&y_ref, &h)?,
            });
        }
    }
    Ok(HarnessReport { rows })
}

/// The outlier-heavy single-layer setting used to compare methods: a 64×64
/// Gaussian layer, two of 64 input channels boosted 100×, W4A8 with 8-bit
/// factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StandardScenario {
    pub width: usize,
    pub outlier_channels: usize,
    pub outlier_gain: f64,
    pub scale_spread: f64,
    pub calib_samples: usize,
    pub calib_tokens: usize,
    pub eval_tokens: usize,
    pub config: HarnessConfig,
}

impl Default for StandardScenario {
    fn default() -> Self {
        Self {
            width: 64,
            outlier_channels: 2,
            outlier_gain: 100.0,
            scale_spread: 0.5,
            calib_samples: 8,
            calib_tokens: 64,
            eval_tokens: 128,
            config: HarnessConfig::default(),
        }
    }
}

/// Weight, calibration samples and evaluation input for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioData {
    pub layers: Vec<HarnessLayer>,
    pub calib: Vec<DenseMatrix>,
    pub input: DenseMatrix,
}

impl StandardScenario {
    /// Calibration and evaluation tokens come from one draw, so they share
    /// the same channel gains and outlier positions.
    pub fn data(&self, seed: u64) -> Result<ScenarioData> {
        let act = SynthActivationConfig {
            channels: self.width,
            tokens: self.calib_samples * self.calib_tokens + self.eval_tokens,
            outlier_channels: self.outlier_channels,
            outlier_gain: self.outlier_gain,
            base_scale_spread: self.scale_spread,
            seed: seed.wrapping_mul(2).wrapping_add(1),
        };
        let x = synth_activations(&act)?;
        let split = self.calib_samples * self.calib_tokens;
        let calib = split_tokens(&x.row_slice(0, split)?, self.calib_tokens)?;
        let input = x.row_slice(split, x.rows())?;
        let weight = synth_weights(self.width, self.width, seed.wrapping_mul(2))?;
        Ok(ScenarioData {
            layers: vec![HarnessLayer {
                weight,
                nonlinearity: Nonlinearity::None,
            }],
            calib,
            input,
        })
    }

    pub fn run(
        &self,
        seed: u64,
        methods: &[LayerMethod],
        ranks: &[usize],
    ) -> Result<HarnessReport> {
        let d = self.data(seed)?;
        run_harness(&d.layers, methods, ranks, &d.calib, &d.input, &self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::snap;

    fn chain(seed: u64) -> Vec<HarnessLayer> {
        vec![
            HarnessLayer {
                weight: synth_weights(16, 24, seed).unwrap(),
                nonlinearity: Nonlinearity::Relu,
            },
            HarnessLayer {
                weight: synth_weights(24, 16, seed + 1).unwrap(),
                nonlinearity: Nonlinearity::None,
            },
        ]
    }

    fn acts(seed: u64, tokens: usize) -> DenseMatrix {
        synth_activations(&SynthActivationConfig {
            channels: 16,
            tokens,
            outlier_channels: 1,
            outlier_gain: 10.0,
            base_scale_spread: 0.3,
            seed,
        })
        .unwrap()
    }

    fn exact() -> HarnessConfig {
        HarnessConfig {
            act_quant: None,
            factor_quant: None,
            ..HarnessConfig::default()
        }
    }

    #[test]
    fn chain_mismatch_is_a_shape_error() {
        let mut layers = chain(1);
        layers[1].weight = synth_weights(20, 16, 3).unwrap();
        let r = run_harness(
            &layers,
            &[LayerMethod::Plain],
            &[],
            &[],
            &acts(1, 8),
            &exact(),
        );
        assert!(matches!(r, Err(LqerError::Shape(_))));
    }

    #[test]
    fn l2qer_without_calibration_fails() {
        let r = run_harness(
            &chain(1),
            &[LayerMethod::L2qer],
            &[2],
            &[],
            &acts(1, 8),
            &exact(),
        );
        assert!(matches!(r, Err(LqerError::Argument(_))));
    }

    #[test]
    fn rank_must_fit_every_layer() {
        let r = run_harness(
            &chain(1),
            &[LayerMethod::Lqer],
            &[17],
            &[],
            &acts(1, 8),
            &exact(),
        );
        assert!(matches!(r, Err(LqerError::Argument(_))));
    }

    #[test]
    fn full_rank_chain_is_exact() {
        let x = acts(2, 32);
        let calib = split_tokens(&acts(3, 64), 16).unwrap();
        let report = run_harness(
            &chain(4),
            &[LayerMethod::Lqer, LayerMethod::L2qer],
            &[16],
            &calib,
            &x,
            &exact(),
        )
        .unwrap();
        for row in &report.rows {
            assert!(row.end_to_end.rel_frobenius <= 1e-9, "{row:?}");
        }
    }

    #[test]
    fn per_layer_error_non_increasing_in_rank() {
        let x = acts(5, 32);
        let ranks: Vec<usize> = (1..=16).collect();
        let report =
            run_harness(&chain(6), &[LayerMethod::Lqer], &ranks, &[], &x, &exact()).unwrap();
        for layer in 0..2 {
            let errs: Vec<f64> = report
                .method_rows(LayerMethod::Lqer)
                .map(|r| r.per_layer[layer])
                .collect();
            for w in errs.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-15, "{errs:?}");
            }
        }
    }

    #[test]
    fn representable_weights_only_see_activation_error() {
        let cfg = HarnessConfig::default();
        let mut layers = chain(7);
        for l in &mut layers {
            l.weight = snap(&l.weight, &cfg.weight_quant).unwrap();
        }
        let x = acts(8, 16);
        let calib = split_tokens(&acts(9, 32), 16).unwrap();
        let report = run_harness(
            &layers,
            &[LayerMethod::Plain, LayerMethod::Lqer, LayerMethod::L2qer],
            &[4],
            &calib,
            &x,
            &cfg,
        )
        .unwrap();
        let plain = report.find(LayerMethod::Plain, 0).unwrap().end_to_end;
        for row in &report.rows {
            assert_eq!(row.end_to_end, plain);
            for rec in row.reconstruction.iter().flatten() {
                assert_eq!(rec.e_a, 0.0);
            }
        }
    }

    #[test]
    fn harness_is_reproducible() {
        let s = StandardScenario::default();
        let a = s
            .run(3, &[LayerMethod::Plain, LayerMethod::L2qer], &[8])
            .unwrap();
        let b = s
            .run(3, &[LayerMethod::Plain, LayerMethod::L2qer], &[8])
            .unwrap();
        assert_eq!(a, b);
    }
}
