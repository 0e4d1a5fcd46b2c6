//! Activation calibration: per-channel magnitude profiling and the diagonal
//! scale matrix derived from it.

use serde::{Deserialize, Serialize};

use crate::error::{LqerError, Result};
use crate::linalg::DenseMatrix;

/// What to do with channels whose profiled magnitude is zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeadChannelPolicy {
    /// Fail with [`LqerError::DeadChannel`].
    #[default]
    Reject,
    /// Raise dead channels to `DEAD_CHANNEL_FLOOR * max(a_bar)`.
    Floor,
}

/// Relative floor applied under [`DeadChannelPolicy::Floor`].
pub const DEAD_CHANNEL_FLOOR: f64 = 1e-8;

/// Streaming form of [`profile_channels`].
///
/// Each sample contributes the mean absolute value of every channel over its
/// own tokens; the running result is the channel-wise maximum of those means.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAccumulator {
    a_bar: Vec<f64>,
    sample_count: usize,
}

impl ChannelAccumulator {
    pub fn new(channels: usize) -> Self {
        Self {
            a_bar: vec![0.0; channels],
            sample_count: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.a_bar.len()
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn update(&mut self, sample: &DenseMatrix) -> Result<()> {
        if sample.cols() != self.channels() {
            return Err(LqerError::argument(format!(
                "sample has {} channels, expected {}",
                sample.cols(),
                self.channels()
            )));
        }
        let mut sums = vec![0.0; self.channels()];
        for t in 0..sample.rows() {
            for (acc, x) in sums.iter_mut().zip(sample.row(t)) {
                *acc += x.abs();
            }
        }
        let tokens = sample.rows() as f64;
        for (best, s) in self.a_bar.iter_mut().zip(sums) {
            *best = best.max(s / tokens);
        }
        self.sample_count += 1;
        Ok(())
    }

    /// Combines two partial profiles; equal to feeding both sample streams
    /// into one accumulator.
    pub fn merge(&mut self, other: &ChannelAccumulator) -> Result<()> {
        if other.channels() != self.channels() {
            return Err(LqerError::argument(format!(
                "cannot merge profiles over {} and {} channels",
                self.channels(),
                other.channels()
            )));
        }
        for (a, &b) in self.a_bar.iter_mut().zip(&other.a_bar) {
            *a = a.max(b);
        }
        self.sample_count += other.sample_count;
        Ok(())
    }

    pub fn finalize(self) -> Result<(Vec<f64>, usize)> {
        if self.sample_count == 0 {
            return Err(LqerError::argument(
                "no calibration samples were accumulated",
            ));
        }
        Ok((self.a_bar, self.sample_count))
    }
}

/// `a_bar[j] = max over samples of mean over tokens of |X[t, j]|`.
pub fn profile_channels(samples: &[DenseMatrix]) -> Result<Vec<f64>> {
    let first = samples
        .first()
        .ok_or_else(|| LqerError::argument("calibration needs at least one sample"))?;
    let mut acc = ChannelAccumulator::new(first.cols());
    for s in samples {
        acc.update(s)?;
    }
    Ok(acc.finalize()?.0)
}

/// Profiled channel magnitudes and the diagonal of the scale matrix `S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub channels: usize,
    pub a_bar: Vec<f64>,
    pub sample_count: usize,
    pub s_diag: Vec<f64>,
    pub dead_channel_policy: DeadChannelPolicy,
}

impl CalibrationProfile {
    /// The all-ones profile (`S = I`).
    pub fn identity(channels: usize) -> Self {
        Self {
            channels,
            a_bar: vec![1.0; channels],
            sample_count: 0,
            s_diag: vec![1.0; channels],
            dead_channel_policy: DeadChannelPolicy::Reject,
        }
    }

    pub fn from_a_bar(
        a_bar: &[f64],
        sample_count: usize,
        policy: DeadChannelPolicy,
    ) -> Result<Self> {
        if a_bar.is_empty() {
            return Err(LqerError::argument("profile needs at least one channel"));
        }
        if let Some(j) = a_bar.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(LqerError::argument(format!(
                "channel {j} magnitude {} is not a finite non-negative number",
                a_bar[j]
            )));
        }
        let peak = a_bar.iter().cloned().fold(0.0, f64::max);
        let a_bar: Vec<f64> = match policy {
            DeadChannelPolicy::Floor if peak > 0.0 => {
                let floor = DEAD_CHANNEL_FLOOR * peak;
                a_bar.iter().map(|&a| a.max(floor)).collect()
            }
            _ => a_bar.to_vec(),
        };
        if let Some(j) = a_bar.iter().position(|&v| v <= 0.0) {
            return Err(LqerError::DeadChannel {
                channel: j,
                value: a_bar[j],
            });
        }
        let lo = a_bar.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = a_bar.iter().cloned().fold(0.0, f64::max);
        let norm = match (lo * hi).sqrt() {
            n if n.is_finite() && n > 0.0 => n,
            _ => lo.sqrt() * hi.sqrt(),
        };
        let s_diag = a_bar.iter().map(|a| a / norm).collect();
        Ok(Self {
            channels: a_bar.len(),
            a_bar,
            sample_count,
            s_diag,
            dead_channel_policy: policy,
        })
    }

    /// Ratio of the largest to the smallest channel scale.
    pub fn condition_ratio(&self) -> f64 {
        let lo = self.s_diag.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.s_diag.iter().cloned().fold(0.0, f64::max);
        hi / lo
    }
}

/// `s_i = a_i / sqrt(min(a_bar) * max(a_bar))`; zero channels are rejected.
pub fn scale_matrix(a_bar: &[f64]) -> Result<CalibrationProfile> {
    CalibrationProfile::from_a_bar(a_bar, 0, DeadChannelPolicy::Reject)
}

/// Profiles `samples` and derives the scale matrix in one step.
pub fn calibrate(samples: &[DenseMatrix], policy: DeadChannelPolicy) -> Result<CalibrationProfile> {
    let a_bar = profile_channels(samples)?;
    CalibrationProfile::from_a_bar(&a_bar, samples.len(), policy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleDirection {
    /// Row i times `s_i` (`S E`).
    Forward,
    /// Row i divided by `s_i` (`S^-1 E`).
    Inverse,
}

pub fn apply_scale(
    e: &DenseMatrix,
    profile: &CalibrationProfile,
    direction: ScaleDirection,
) -> Result<DenseMatrix> {
    if e.rows() != profile.channels {
        return Err(LqerError::shape(format!(
            "matrix has {} rows but the profile covers {} channels",
            e.rows(),
            profile.channels
        )));
    }
    let s = &profile.s_diag;
    Ok(match direction {
        ScaleDirection::Forward => {
            DenseMatrix::from_fn(e.rows(), e.cols(), |i, j| e.get(i, j) * s[i])
        }
        ScaleDirection::Inverse => {
            DenseMatrix::from_fn(e.rows(), e.cols(), |i, j| e.get(i, j) / s[i])
        }
    })
}
