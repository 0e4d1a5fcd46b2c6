//! Seeded synthetic weights and outlier-heavy activations.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LqerError, Result};
use crate::linalg::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthActivationConfig {
    pub channels: usize,
    pub tokens: usize,
    pub outlier_channels: usize,
    /// Multiplier applied to the outlier channels, at least 1.
    pub outlier_gain: f64,
    /// Standard deviation of the log of the per-channel scale.
    pub base_scale_spread: f64,
    pub seed: u64,
}

impl SynthActivationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.tokens == 0 {
            return Err(LqerError::argument("channels and tokens must be positive"));
        }
        if self.outlier_channels > self.channels {
            return Err(LqerError::argument(format!(
                "{} outlier channels requested out of {}",
                self.outlier_channels, self.channels
            )));
        }
        if !(self.outlier_gain >= 1.0 && self.outlier_gain.is_finite()) {
            return Err(LqerError::argument(
                "outlier gain must be a finite value >= 1",
            ));
        }
        if !(self.base_scale_spread >= 0.0 && self.base_scale_spread.is_finite()) {
            return Err(LqerError::argument(
                "scale spread must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// Per-channel gains and the sorted outlier channel indices for a config.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelLayout {
    pub gains: Vec<f64>,
    pub outliers: Vec<usize>,
}

fn layout_with(rng: &mut ChaCha8Rng, cfg: &SynthActivationConfig) -> ChannelLayout {
    let spread = Normal::new(0.0, cfg.base_scale_spread).expect("validated spread");
    let mut gains: Vec<f64> = (0..cfg.channels)
        .map(|_| spread.sample(rng).exp())
        .collect();
    let mut outliers = sample(rng, cfg.channels, cfg.outlier_channels).into_vec();
    outliers.sort_unstable();
    for &j in &outliers {
        gains[j] *= cfg.outlier_gain;
    }
    ChannelLayout { gains, outliers }
}

pub fn channel_layout(cfg: &SynthActivationConfig) -> Result<ChannelLayout> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(layout_with(&mut rng, cfg))
}

/// `X[i, j] = g_j z_ij` with `z` standard normal, `g_j` log-normal and the
/// outlier channels multiplied by the configured gain.
pub fn synth_activations(cfg: &SynthActivationConfig) -> Result<DenseMatrix> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layout = layout_with(&mut rng, cfg);
    let mut data = Vec::with_capacity(cfg.tokens * cfg.channels);
    for _ in 0..cfg.tokens {
        for g in &layout.gains {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(g * z);
        }
    }
    DenseMatrix::new(cfg.tokens, cfg.channels, data)
}

/// Gaussian weights with variance `1 / rows`.
pub fn synth_weights(rows: usize, cols: usize, seed: u64) -> Result<DenseMatrix> {
    if rows == 0 || cols == 0 {
        return Err(LqerError::argument("weight dimensions must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            std * z
        })
        .collect::<Vec<f64>>();
    DenseMatrix::new(rows, cols, data)
}

/// Splits the rows of `x` into consecutive chunks of `tokens` rows; a short
/// final chunk is kept.
pub fn split_tokens(x: &DenseMatrix, tokens: usize) -> Result<Vec<DenseMatrix>> {
    if tokens == 0 {
        return Err(LqerError::argument("chunk size must be positive"));
    }
    (0..x.rows())
        .step_by(tokens)
        .map(|start| x.row_slice(start, (start + tokens).min(x.rows())))
        .collect()
}
