//! Quantization error, its low-rank reconstruction and the associated error
//! metrics.

use serde::{Deserialize, Serialize};

use crate::calibration::{apply_scale, CalibrationProfile, ScaleDirection};
use crate::error::{LqerError, Result};
use crate::linalg::{frobenius_norm, matmul, scale_columns, svd, truncate, DenseMatrix, SvdResult};
use crate::quant::{dequantize_matrix, snap, QuantConfig, QuantizedMatrix};

/// How the correction factors were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMethod {
    /// Truncated SVD of `E_q`.
    Lqer,
    /// Truncated SVD of `S E_q`, with `S^-1` folded into the left factor.
    L2qer,
}

/// Rank-k factors `A_k` (m×k) and `B_k` (k×n) with `A_k B_k ≈ E_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankCorrection {
    pub a_k: DenseMatrix,
    pub b_k: DenseMatrix,
    pub rank: usize,
    pub method: CorrectionMethod,
    pub factor_quant: Option<QuantConfig>,
}

impl LowRankCorrection {
    pub fn new(
        a_k: DenseMatrix,
        b_k: DenseMatrix,
        method: CorrectionMethod,
        factor_quant: Option<QuantConfig>,
    ) -> Result<Self> {
        if a_k.cols() != b_k.rows() {
            return Err(LqerError::shape(format!(
                "left factor has {} columns but right factor has {} rows",
                a_k.cols(),
                b_k.rows()
            )));
        }
        Ok(Self {
            rank: a_k.cols(),
            a_k,
            b_k,
            method,
            factor_quant,
        })
    }

    /// `A_k B_k`, the reconstructed error `Ẽ_q`.
    pub fn product(&self) -> DenseMatrix {
        matmul(&self.a_k, &self.b_k).expect("factors are conformable")
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.a_k.rows(), self.b_k.cols())
    }
}

/// `E_q = W - dq(W_q)`.
pub fn quant_error(w: &DenseMatrix, w_q: &QuantizedMatrix) -> Result<DenseMatrix> {
    if w.shape() != w_q.shape() {
        return Err(LqerError::shape(format!(
            "weight is {:?} but quantized weight is {:?}",
            w.shape(),
            w_q.shape()
        )));
    }
    w.sub(&dequantize_matrix(w_q))
}

/// SVD of `E_q` (or `S E_q`) that can be truncated at any rank.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorDecomposition {
    method: CorrectionMethod,
    shape: (usize, usize),
    profile: Option<CalibrationProfile>,
    /// `None` when `E_q` is identically zero.
    svd: Option<SvdResult>,
}

impl ErrorDecomposition {
    pub fn lqer(e_q: &DenseMatrix) -> Result<Self> {
        let svd = if e_q.is_zero() { None } else { Some(svd(e_q)?) };
        Ok(Self {
            method: CorrectionMethod::Lqer,
            shape: e_q.shape(),
            profile: None,
            svd,
        })
    }

    pub fn l2qer(e_q: &DenseMatrix, profile: &CalibrationProfile) -> Result<Self> {
        let scaled = apply_scale(e_q, profile, ScaleDirection::Forward)?;
        let svd = if e_q.is_zero() {
            None
        } else {
            Some(svd(&scaled)?)
        };
        Ok(Self {
            method: CorrectionMethod::L2qer,
            shape: e_q.shape(),
            profile: Some(profile.clone()),
            svd,
        })
    }

    pub fn method(&self) -> CorrectionMethod {
        self.method
    }

    pub fn profile(&self) -> Option<&CalibrationProfile> {
        self.profile.as_ref()
    }

    /// Rank-k factors, optionally snapped to `factor_quant` after `Σ_k` is
    /// folded into the right factor.
    pub fn factors(
        &self,
        k: usize,
        factor_quant: Option<&QuantConfig>,
    ) -> Result<LowRankCorrection> {
        let (m, n) = self.shape;
        let max_k = m.min(n);
        if k == 0 || k > max_k {
            return Err(LqerError::argument(format!("rank {k} outside 1..={max_k}")));
        }
        let Some(svd) = &self.svd else {
            return LowRankCorrection::new(
                DenseMatrix::zeros(m, k),
                DenseMatrix::zeros(k, n),
                self.method,
                factor_quant.copied(),
            );
        };
        let t = truncate(svd, k)?;
        let a_k = match &self.profile {
            Some(p) => apply_scale(&t.u_k, p, ScaleDirection::Inverse)?,
            None => t.u_k,
        };
        let b_k = scale_columns(&t.v_k, &t.sigma_k).transpose();
        let (a_k, b_k) = match factor_quant {
            Some(cfg) => (snap(&a_k, cfg)?, snap(&b_k, cfg)?),
            None => (a_k, b_k),
        };
        LowRankCorrection::new(a_k, b_k, self.method, factor_quant.copied())
    }
}

fn check_rank(e_q: &DenseMatrix, k: usize) -> Result<()> {
    let max_k = e_q.rows().min(e_q.cols());
    if k == 0 || k > max_k {
        return Err(LqerError::argument(format!("rank {k} outside 1..={max_k}")));
    }
    Ok(())
}

/// `A_k = U_k`, `B_k = Σ_k V_kᵀ` from the truncated SVD of `E_q`.
pub fn lqer_factors(
    e_q: &DenseMatrix,
    k: usize,
    factor_quant: Option<&QuantConfig>,
) -> Result<LowRankCorrection> {
    check_rank(e_q, k)?;
    ErrorDecomposition::lqer(e_q)?.factors(k, factor_quant)
}

/// `A'_k = S^-1 U'_k`, `B'_k = Σ'_k V'_kᵀ` from the truncated SVD of `S E_q`.
pub fn l2qer_factors(
    e_q: &DenseMatrix,
    profile: &CalibrationProfile,
    k: usize,
    factor_quant: Option<&QuantConfig>,
) -> Result<LowRankCorrection> {
    if e_q.rows() != profile.channels {
        return Err(LqerError::shape(format!(
            "error has {} rows but the profile covers {} channels",
            e_q.rows(),
            profile.channels
        )));
    }
    check_rank(e_q, k)?;
    ErrorDecomposition::l2qer(e_q, profile)?.factors(k, factor_quant)
}

/// Reconstruction quality of a correction against the error it targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Mean absolute entry of `E_q - Ẽ_q`.
    pub e_a: f64,
    /// `‖E_q - Ẽ_q‖_F / ‖E_q‖_F` (denominator floored at 1e-30).
    pub rel_frobenius: f64,
    pub rank: usize,
}

pub fn approximation_error(e_q: &DenseMatrix, corr: &LowRankCorrection) -> Result<ErrorReport> {
    if corr.shape() != e_q.shape() {
        return Err(LqerError::shape(format!(
            "correction is {:?} but error matrix is {:?}",
            corr.shape(),
            e_q.shape()
        )));
    }
    let residual = e_q.sub(&corr.product())?;
    let count = residual.data().len() as f64;
    let e_a = residual.data().iter().map(|v| v.abs()).sum::<f64>() / count;
    let rel_frobenius = frobenius_norm(&residual) / frobenius_norm(e_q).max(1e-30);
    Ok(ErrorReport {
        e_a,
        rel_frobenius,
        rank: corr.rank,
    })
}

/// Singular values of `α E_q` and of `S E_q`, where `α` matches the two
/// Frobenius norms so the spectra are directly comparable.
pub fn normalized_spectra(
    e_q: &DenseMatrix,
    profile: &CalibrationProfile,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let scaled = apply_scale(e_q, profile, ScaleDirection::Forward)?;
    let plain_norm = frobenius_norm(e_q);
    if plain_norm == 0.0 {
        return Err(LqerError::Degenerate(
            "quantization error is identically zero; spectra are undefined".into(),
        ));
    }
    let alpha = frobenius_norm(&scaled) / plain_norm;
    let sigma_plain = svd(&e_q.scaled(alpha))?.sigma;
    let sigma_scaled = svd(&scaled)?.sigma;
    Ok((sigma_plain, sigma_scaled))
}

/// Fraction of total squared spectrum held by the leading `k` values.
pub fn top_energy_fraction(sigma: &[f64], k: usize) -> f64 {
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return 0.0;
    }
    sigma.iter().take(k).map(|s| s * s).sum::<f64>() / total
}
