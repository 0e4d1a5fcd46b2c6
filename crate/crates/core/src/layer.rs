//! Reconstructed linear layers and their approximate forward pass
//! `Ỹ = X_q dq(W_q) + (X_q A_k) B_k`.

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationProfile;
use crate::error::{LqerError, Result};
use crate::linalg::{frobenius_norm, matmul, DenseMatrix};
use crate::quant::{dequantize_matrix, quantize_matrix, snap, QuantConfig, QuantizedMatrix};
use crate::reconstruct::{l2qer_factors, lqer_factors, quant_error, LowRankCorrection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMethod {
    /// Quantized weight only.
    Plain,
    Lqer,
    L2qer,
}

impl LayerMethod {
    pub fn name(&self) -> &'static str {
        match self {
            LayerMethod::Plain => "plain",
            LayerMethod::Lqer => "lqer",
            LayerMethod::L2qer => "l2qer",
        }
    }
}

impl std::str::FromStr for LayerMethod {
    type Err = LqerError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(LayerMethod::Plain),
            "lqer" => Ok(LayerMethod::Lqer),
            "l2qer" => Ok(LayerMethod::L2qer),
            other => Err(LqerError::argument(format!("unknown method `{other}`"))),
        }
    }
}

impl std::fmt::Display for LayerMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Default correction rank for a weight format: 256 below 4 bits, else 32.
pub fn default_rank(weight_cfg: &QuantConfig) -> usize {
    if weight_cfg.mantissa_bits < 4 {
        256
    } else {
        32
    }
}

/// Everything needed to turn a dense weight into an [`LqerLayer`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerConfig {
    pub weight_quant: QuantConfig,
    pub method: LayerMethod,
    /// Ignored for [`LayerMethod::Plain`].
    pub rank: usize,
    pub act_quant: Option<QuantConfig>,
    pub factor_quant: Option<QuantConfig>,
}

impl LayerConfig {
    /// W4A8 with 8-bit factors at rank 32.
    pub fn w4a8(method: LayerMethod) -> Self {
        Self {
            weight_quant: QuantConfig::weight_default(),
            method,
            rank: 32,
            act_quant: Some(QuantConfig::activation_default()),
            factor_quant: Some(QuantConfig::factor_default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqerLayer {
    w_q: QuantizedMatrix,
    w_dq: DenseMatrix,
    correction: Option<LowRankCorrection>,
    act_quant: Option<QuantConfig>,
    reference_w: Option<DenseMatrix>,
}

impl LqerLayer {
    pub fn from_parts(
        w_q: QuantizedMatrix,
        correction: Option<LowRankCorrection>,
        act_quant: Option<QuantConfig>,
        reference_w: Option<DenseMatrix>,
    ) -> Result<Self> {
        if let Some(c) = &correction {
            if c.shape() != w_q.shape() {
                return Err(LqerError::shape(format!(
                    "correction is {:?} but weight is {:?}",
                    c.shape(),
                    w_q.shape()
                )));
            }
        }
        if let Some(w) = &reference_w {
            if w.shape() != w_q.shape() {
                return Err(LqerError::shape("reference weight shape differs"));
            }
        }
        if let Some(cfg) = &act_quant {
            cfg.validate()?;
        }
        let w_dq = dequantize_matrix(&w_q);
        Ok(Self {
            w_q,
            w_dq,
            correction,
            act_quant,
            reference_w,
        })
    }

    pub fn w_q(&self) -> &QuantizedMatrix {
        &self.w_q
    }

    pub fn correction(&self) -> Option<&LowRankCorrection> {
        self.correction.as_ref()
    }

    pub fn act_quant(&self) -> Option<&QuantConfig> {
        self.act_quant.as_ref()
    }

    pub fn reference_w(&self) -> Option<&DenseMatrix> {
        self.reference_w.as_ref()
    }

    /// `(in_features, out_features)`.
    pub fn shape(&self) -> (usize, usize) {
        self.w_q.shape()
    }

    /// The same layer without its low-rank path.
    pub fn without_correction(&self) -> LqerLayer {
        LqerLayer {
            correction: None,
            ..self.clone()
        }
    }

    /// Activations as seen by both matmuls.
    pub fn snap_input(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols() != self.w_q.rows() {
            return Err(LqerError::shape(format!(
                "input has {} features, layer expects {}",
                x.cols(),
                self.w_q.rows()
            )));
        }
        match &self.act_quant {
            Some(cfg) => snap(x, cfg),
            None => Ok(x.clone()),
        }
    }

    /// Main path `X_q dq(W_q)` and, when present, the low-rank path
    /// `(X_q A_k) B_k`, both fed the same snapped activations.
    pub fn forward_parts(&self, x: &DenseMatrix) -> Result<(DenseMatrix, Option<DenseMatrix>)> {
        let xq = self.snap_input(x)?;
        let main = matmul(&xq, &self.w_dq)?;
        let low_rank = match &self.correction {
            Some(c) => Some(matmul(&matmul(&xq, &c.a_k)?, &c.b_k)?),
            None => None,
        };
        Ok((main, low_rank))
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        match self.forward_parts(x)? {
            (main, Some(lr)) => main.add(&lr),
            (main, None) => Ok(main),
        }
    }
}

pub fn build_layer(
    w: &DenseMatrix,
    cfg: &LayerConfig,
    profile: Option<&CalibrationProfile>,
) -> Result<LqerLayer> {
    let w_q = quantize_matrix(w, &cfg.weight_quant)?;
    let correction = match cfg.method {
        LayerMethod::Plain => None,
        LayerMethod::Lqer => {
            let e_q = quant_error(w, &w_q)?;
            Some(lqer_factors(&e_q, cfg.rank, cfg.factor_quant.as_ref())?)
        }
        LayerMethod::L2qer => {
            let profile = profile.ok_or_else(|| {
                LqerError::argument("the l2qer method needs a calibration profile")
            })?;
            if profile.channels != w.rows() {
                return Err(LqerError::argument(format!(
                    "profile covers {} channels but the weight has {} input rows",
                    profile.channels,
                    w.rows()
                )));
            }
            let e_q = quant_error(w, &w_q)?;
            Some(l2qer_factors(
                &e_q,
                profile,
                cfg.rank,
                cfg.factor_quant.as_ref(),
            )?)
        }
    };
    LqerLayer::from_parts(w_q, correction, cfg.act_quant, Some(w.clone()))
}

/// Output discrepancy between a reference and an approximate result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputError {
    /// `‖Y - Ỹ‖_F / max(‖Y‖_F, 1e-30)`.
    pub rel_frobenius: f64,
    pub max_abs: f64,
}

pub fn output_error(y_ref: &DenseMatrix, y_approx: &DenseMatrix) -> Result<OutputError> {
    let diff = y_ref.sub(y_approx)?;
    Ok(OutputError {
        rel_frobenius: frobenius_norm(&diff) / frobenius_norm(y_ref).max(1e-30),
        max_abs: diff.max_abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::scale_matrix;
    use crate::quant::BlockOrientation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn exact_cfg(method: LayerMethod, rank: usize) -> LayerConfig {
        LayerConfig {
            weight_quant: QuantConfig::weight_default(),
            method,
            rank,
            act_quant: None,
            factor_quant: None,
        }
    }

    #[test]
    fn plain_layer_is_dequantized_matmul() {
        let w = random(32, 16, 1);
        let x = random(5, 32, 2);
        let layer = build_layer(&w, &exact_cfg(LayerMethod::Plain, 0), None).unwrap();
        assert!(layer.correction().is_none());
        let expected = matmul(&x, &layer.w_q().dequantize()).unwrap();
        assert_eq!(layer.forward(&x).unwrap(), expected);
    }

    #[test]
    fn basis_probe_reads_a_row() {
        let w = random(8, 4, 3);
        let layer = build_layer(&w, &exact_cfg(LayerMethod::Plain, 0), None).unwrap();
        let x = DenseMatrix::from_fn(1, 8, |_, j| if j == 5 { 1.0 } else { 0.0 });
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.row(0), layer.w_q().dequantize().row(5));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let w = random(16, 16, 4);
        let layer = build_layer(
            &w,
            &LayerConfig {
                rank: 4,
                ..LayerConfig::w4a8(LayerMethod::Lqer)
            },
            None,
        )
        .unwrap();
        assert!(layer.forward(&DenseMatrix::zeros(3, 16)).unwrap().is_zero());
    }

    #[test]
    fn full_rank_correction_recovers_exact_output() {
        let w = random(16, 16, 5);
        let x = random(6, 16, 6);
        let layer = build_layer(&w, &exact_cfg(LayerMethod::Lqer, 16), None).unwrap();
        let y = matmul(&x, &w).unwrap();
        let err = output_error(&y, &layer.forward(&x).unwrap()).unwrap();
        assert!(err.rel_frobenius <= 1e-9);
    }

    #[test]
    fn l2qer_needs_matching_profile() {
        let w = random(16, 8, 7);
        let cfg = exact_cfg(LayerMethod::L2qer, 2);
        assert!(matches!(
            build_layer(&w, &cfg, None),
            Err(LqerError::Argument(_))
        ));
        let p = scale_matrix(&[1.0; 8]).unwrap();
        assert!(matches!(
            build_layer(&w, &cfg, Some(&p)),
            Err(LqerError::Argument(_))
        ));
    }

    #[test]
    fn correction_path_is_additive() {
        let w = random(32, 32, 8);
        let x = random(7, 32, 9);
        let p = scale_matrix(&(1..=32).map(|i| i as f64).collect::<Vec<_>>()).unwrap();
        let layer = build_layer(&w, &LayerConfig::w4a8(LayerMethod::L2qer), Some(&p)).unwrap();
        let plain = layer.without_correction().forward(&x).unwrap();
        let xq = layer.snap_input(&x).unwrap();
        let c = layer.correction().unwrap();
        let lr = matmul(&matmul(&xq, &c.a_k).unwrap(), &c.b_k).unwrap();
        assert_eq!(layer.forward(&x).unwrap(), plain.add(&lr).unwrap());
    }

    #[test]
    fn forward_shape_error() {
        let w = random(8, 4, 3);
        let layer = build_layer(&w, &exact_cfg(LayerMethod::Plain, 0), None).unwrap();
        assert!(matches!(
            layer.forward(&random(2, 7, 1)),
            Err(LqerError::Shape(_))
        ));
    }

    #[test]
    fn representable_weight_only_suffers_activation_snapping() {
        let cfg = QuantConfig::mxint(4, 4, 4, BlockOrientation::AlongCol).unwrap();
        let w = snap(&random(8, 8, 10), &cfg).unwrap();
        let x = random(4, 8, 11);
        let act = QuantConfig::activation_default();
        for method in [LayerMethod::Plain, LayerMethod::Lqer, LayerMethod::L2qer] {
            let lc = LayerConfig {
                weight_quant: cfg,
                method,
                rank: 2,
                act_quant: Some(act),
                factor_quant: None,
            };
            let layer = build_layer(&w, &lc, Some(&CalibrationProfile::identity(8))).unwrap();
            let expected = matmul(&snap(&x, &act).unwrap(), &w).unwrap();
            assert_eq!(layer.forward(&x).unwrap(), expected);
        }
    }

    #[test]
    fn output_error_cases() {
        let y = DenseMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let e = output_error(&y, &y).unwrap();
        assert_eq!((e.rel_frobenius, e.max_abs), (0.0, 0.0));
        let e = output_error(&y, &DenseMatrix::zeros(1, 2)).unwrap();
        assert_eq!((e.rel_frobenius, e.max_abs), (1.0, 1.0));
        assert!(matches!(
            output_error(&y, &DenseMatrix::zeros(2, 1)),
            Err(LqerError::Shape(_))
        ));
    }

    #[test]
    fn method_parsing() {
        assert_eq!("l2qer".parse::<LayerMethod>().unwrap(), LayerMethod::L2qer);
        assert!("awq".parse::<LayerMethod>().is_err());
        assert_eq!(default_rank(&QuantConfig::weight_default()), 32);
        let w2 = QuantConfig::mxint(2, 4, 16, BlockOrientation::AlongCol).unwrap();
        assert_eq!(default_rank(&w2), 256);
    }
}
