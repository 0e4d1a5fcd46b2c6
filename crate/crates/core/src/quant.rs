//! Number-format simulation: MXINT block floating point and grouped
//! symmetric integer quantization.
//!
//! Quantization is simulated by snapping values onto the format's grid; all
//! arithmetic stays in `f64`. Blocks tile the matrix along the configured
//! orientation and are enumerated in row-major order of the block grid. A
//! dimension that is not a multiple of the block size ends with a shorter
//! block quantized at its true length.

use serde::{Deserialize, Serialize};

use crate::error::{LqerError, Result};
use crate::linalg::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantKind {
    /// Shared power-of-two exponent per block, fixed-point mantissas.
    Mxint,
    /// One real scale per group, symmetric integer values.
    IntGrouped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockOrientation {
    /// `[1, B]`: B consecutive entries of one row.
    AlongRow,
    /// `[B, 1]`: B consecutive entries of one column.
    AlongCol,
}

/// Bits charged for one group scale of the integer format.
pub const GROUP_SCALE_BITS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantConfig {
    pub kind: QuantKind,
    /// Total mantissa width including sign, 2..=8.
    pub mantissa_bits: u32,
    /// Shared exponent width, 2..=8. Ignored by [`QuantKind::IntGrouped`].
    pub exponent_bits: u32,
    /// Block (MXINT) or group (integer) length.
    pub block_size: usize,
    pub orientation: BlockOrientation,
}

impl QuantConfig {
    pub fn mxint(
        mantissa_bits: u32,
        exponent_bits: u32,
        block_size: usize,
        orientation: BlockOrientation,
    ) -> Result<Self> {
        let cfg = Self {
            kind: QuantKind::Mxint,
            mantissa_bits,
            exponent_bits,
            block_size,
            orientation,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn int_grouped(
        mantissa_bits: u32,
        group_size: usize,
        orientation: BlockOrientation,
    ) -> Result<Self> {
        let cfg = Self {
            kind: QuantKind::IntGrouped,
            mantissa_bits,
            exponent_bits: 0,
            block_size: group_size,
            orientation,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 4-bit MXINT weights with 4-bit exponents in `[16, 1]` blocks.
    pub fn weight_default() -> Self {
        Self::mxint(4, 4, 16, BlockOrientation::AlongCol).expect("valid preset")
    }

    /// 8-bit MXINT low-rank factors with 4-bit exponents in `[16, 1]` blocks.
    pub fn factor_default() -> Self {
        Self::mxint(8, 4, 16, BlockOrientation::AlongCol).expect("valid preset")
    }

    /// 8-bit MXINT activations with 8-bit exponents in `[1, 16]` blocks.
    pub fn activation_default() -> Self {
        Self::mxint(8, 8, 16, BlockOrientation::AlongRow).expect("valid preset")
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.mantissa_bits) {
            return Err(LqerError::argument(format!(
                "mantissa bits must be in 2..=8, got {}",
                self.mantissa_bits
            )));
        }
        if self.kind == QuantKind::Mxint && !(2..=8).contains(&self.exponent_bits) {
            return Err(LqerError::argument(format!(
                "exponent bits must be in 2..=8, got {}",
                self.exponent_bits
            )));
        }
        if self.block_size == 0 {
            return Err(LqerError::argument("block size must be at least 1"));
        }
        Ok(())
    }

    /// Largest mantissa magnitude, `2^(b-1) - 1`.
    pub fn max_mantissa(&self) -> i32 {
        max_mantissa(self.mantissa_bits)
    }

    /// Inclusive shared exponent range of the MXINT format.
    pub fn exponent_range(&self) -> (i32, i32) {
        exponent_range(self.exponent_bits)
    }

    /// Storage bits per element as an exact fraction `(numerator, denominator)`.
    pub fn bits_per_element_ratio(&self) -> (u64, u64) {
        let side_bits = match self.kind {
            QuantKind::Mxint => self.exponent_bits,
            QuantKind::IntGrouped => GROUP_SCALE_BITS,
        } as u64;
        let b = self.block_size as u64;
        (self.mantissa_bits as u64 * b + side_bits, b)
    }

    /// Storage bits per element: `b + e/B` for MXINT, `b + 16/g` for integers.
    pub fn bits_per_element(&self) -> f64 {
        let (num, den) = self.bits_per_element_ratio();
        num as f64 / den as f64
    }
}

fn max_mantissa(bits: u32) -> i32 {
    (1 << (bits - 1)) - 1
}

fn exponent_range(bits: u32) -> (i32, i32) {
    (-(1 << (bits - 1)), (1 << (bits - 1)) - 1)
}

/// Exact `2^k` for exponents in the normal range.
fn pow2(k: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&k));
    f64::from_bits(((k + 1023) as u64) << 52)
}

/// `floor(log2(x))` for finite `x > 0`, read from the IEEE exponent field.
fn floor_log2(x: f64) -> i32 {
    debug_assert!(x > 0.0 && x.is_finite());
    let biased = ((x.to_bits() >> 52) & 0x7ff) as i32;
    if biased == 0 {
        // Subnormal: value = mantissa * 2^-1074.
        let mant = x.to_bits() & ((1u64 << 52) - 1);
        63 - mant.leading_zeros() as i32 - 1074
    } else {
        biased - 1023
    }
}

fn round_to_mantissa(v: f64, limit: i32) -> i8 {
    let r = v.round_ties_even().clamp(-(limit as f64), limit as f64);
    r as i8
}

/// Quantizes one MXINT block to a shared exponent and per-element mantissas.
///
/// The exponent is `floor(log2(max|x|))` clamped to the exponent range, so
/// the largest element maps into `[2^(b-2), 2^(b-1))` before rounding.
/// Mantissas round half-to-even and saturate at `±(2^(b-1) - 1)`. An all-zero
/// block takes the minimum exponent.
pub fn mxint_quantize_block(x: &[f64], mantissa_bits: u32, exponent_bits: u32) -> (i32, Vec<i8>) {
    let (emin, emax) = exponent_range(exponent_bits);
    let peak = x.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if peak == 0.0 {
        return (emin, vec![0; x.len()]);
    }
    let exponent = floor_log2(peak).clamp(emin, emax);
    let scale = pow2(exponent - (mantissa_bits as i32 - 2));
    let limit = max_mantissa(mantissa_bits);
    let mantissas = x
        .iter()
        .map(|&v| round_to_mantissa(v / scale, limit))
        .collect();
    (exponent, mantissas)
}

/// `x_i = m_i * 2^(exponent - (b - 2))`.
pub fn mxint_dequantize_block(exponent: i32, mantissas: &[i8], mantissa_bits: u32) -> Vec<f64> {
    let scale = pow2(exponent - (mantissa_bits as i32 - 2));
    mantissas.iter().map(|&m| m as f64 * scale).collect()
}

/// Grid spacing of an MXINT block with the given exponent.
pub fn mxint_step(exponent: i32, mantissa_bits: u32) -> f64 {
    pow2(exponent - (mantissa_bits as i32 - 2))
}

/// Symmetric integer quantization of one group with a shared real scale.
///
/// The scale is `max|x| / (2^(b-1) - 1)` (1 for an all-zero group), nudged
/// by at most a couple of ulps to a value that survives the
/// dequantize-requantize round trip unchanged.
pub fn int_group_quantize(x: &[f64], mantissa_bits: u32) -> (f64, Vec<i8>) {
    let limit = max_mantissa(mantissa_bits);
    let peak = x.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if peak == 0.0 {
        return (1.0, vec![0; x.len()]);
    }
    let q = limit as f64;
    let mut scale = (peak / q).max(f64::MIN_POSITIVE);
    for _ in 0..8 {
        let next = ((scale * q) / q).max(f64::MIN_POSITIVE);
        if next == scale {
            break;
        }
        scale = next;
    }
    let values = x
        .iter()
        .map(|&v| round_to_mantissa(v / scale, limit))
        .collect();
    (scale, values)
}

pub fn int_group_dequantize(scale: f64, q: &[i8]) -> Vec<f64> {
    q.iter().map(|&v| v as f64 * scale).collect()
}

/// Per-block side information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BlockScales {
    /// MXINT shared exponents.
    Exponents(Vec<i32>),
    /// Integer-format group scales.
    Factors(Vec<f64>),
}

impl BlockScales {
    pub fn len(&self) -> usize {
        match self {
            BlockScales::Exponents(v) => v.len(),
            BlockScales::Factors(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Quantized representation of a matrix: one mantissa per element, row-major,
/// and one scale entry per block.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    config: QuantConfig,
    rows: usize,
    cols: usize,
    mantissas: Vec<i8>,
    scales: BlockScales,
}

/// Block tiling of a `rows x cols` matrix for a given configuration.
#[derive(Debug, Clone, Copy)]
struct BlockGrid {
    rows: usize,
    cols: usize,
    block: usize,
    orientation: BlockOrientation,
}

impl BlockGrid {
    fn new(rows: usize, cols: usize, cfg: &QuantConfig) -> Self {
        Self {
            rows,
            cols,
            block: cfg.block_size,
            orientation: cfg.orientation,
        }
    }

    fn grid_shape(&self) -> (usize, usize) {
        match self.orientation {
            BlockOrientation::AlongRow => (self.rows, self.cols.div_ceil(self.block)),
            BlockOrientation::AlongCol => (self.rows.div_ceil(self.block), self.cols),
        }
    }

    fn count(&self) -> usize {
        let (r, c) = self.grid_shape();
        r * c
    }

    /// Calls `f(block_index, element_indices)` for every block in order.
    fn for_each(&self, mut f: impl FnMut(usize, &[usize])) {
        let (grid_rows, grid_cols) = self.grid_shape();
        let mut idx = Vec::with_capacity(self.block);
        for br in 0..grid_rows {
            for bc in 0..grid_cols {
                idx.clear();
                match self.orientation {
                    BlockOrientation::AlongRow => {
                        let start = bc * self.block;
                        let end = (start + self.block).min(self.cols);
                        idx.extend((start..end).map(|j| br * self.cols + j));
                    }
                    BlockOrientation::AlongCol => {
                        let start = br * self.block;
                        let end = (start + self.block).min(self.rows);
                        idx.extend((start..end).map(|i| i * self.cols + bc));
                    }
                }
                f(br * grid_cols + bc, &idx);
            }
        }
    }
}

impl QuantizedMatrix {
    /// Reassembles a quantized matrix from stored parts, checking every range.
    pub fn from_parts(
        config: QuantConfig,
        rows: usize,
        cols: usize,
        mantissas: Vec<i8>,
        scales: BlockScales,
    ) -> Result<Self> {
        config.validate()?;
        if rows == 0 || cols == 0 {
            return Err(LqerError::argument("quantized matrix must be non-empty"));
        }
        if mantissas.len() != rows * cols {
            return Err(LqerError::shape(format!(
                "expected {} mantissas, got {}",
                rows * cols,
                mantissas.len()
            )));
        }
        let limit = config.max_mantissa();
        if let Some(m) = mantissas.iter().find(|&&m| (m as i32).abs() > limit) {
            return Err(LqerError::argument(format!(
                "mantissa {m} outside ±{limit}"
            )));
        }
        let grid = BlockGrid::new(rows, cols, &config);
        if scales.len() != grid.count() {
            return Err(LqerError::shape(format!(
                "expected {} block scales, got {}",
                grid.count(),
                scales.len()
            )));
        }
        match (&scales, config.kind) {
            (BlockScales::Exponents(e), QuantKind::Mxint) => {
                let (lo, hi) = config.exponent_range();
                if let Some(x) = e.iter().find(|&&x| x < lo || x > hi) {
                    return Err(LqerError::argument(format!(
                        "shared exponent {x} outside {lo}..={hi}"
                    )));
                }
            }
            (BlockScales::Factors(s), QuantKind::IntGrouped) => {
                if s.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
                    return Err(LqerError::argument(
                        "group scales must be finite and positive",
                    ));
                }
            }
            _ => {
                return Err(LqerError::argument(
                    "scale kind does not match the quantization format",
                ))
            }
        }
        Ok(Self {
            config,
            rows,
            cols,
            mantissas,
            scales,
        })
    }

    pub fn config(&self) -> &QuantConfig {
        &self.config
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn mantissas(&self) -> &[i8] {
        &self.mantissas
    }

    pub fn scales(&self) -> &BlockScales {
        &self.scales
    }

    pub fn dequantize(&self) -> DenseMatrix {
        dequantize_matrix(self)
    }
}

pub fn quantize_matrix(w: &DenseMatrix, cfg: &QuantConfig) -> Result<QuantizedMatrix> {
    cfg.validate()?;
    let (rows, cols) = w.shape();
    let grid = BlockGrid::new(rows, cols, cfg);
    let data = w.data();
    let mut mantissas = vec![0i8; rows * cols];
    let mut buf = Vec::with_capacity(cfg.block_size);
    let scales = match cfg.kind {
        QuantKind::Mxint => {
            let mut exps = vec![0i32; grid.count()];
            grid.for_each(|b, idx| {
                buf.clear();
                buf.extend(idx.iter().map(|&i| data[i]));
                let (e, m) = mxint_quantize_block(&buf, cfg.mantissa_bits, cfg.exponent_bits);
                exps[b] = e;
                for (&i, v) in idx.iter().zip(m) {
                    mantissas[i] = v;
                }
            });
            BlockScales::Exponents(exps)
        }
        QuantKind::IntGrouped => {
            let mut factors = vec![0f64; grid.count()];
            grid.for_each(|b, idx| {
                buf.clear();
                buf.extend(idx.iter().map(|&i| data[i]));
                let (s, q) = int_group_quantize(&buf, cfg.mantissa_bits);
                factors[b] = s;
                for (&i, v) in idx.iter().zip(q) {
                    mantissas[i] = v;
                }
            });
            BlockScales::Factors(factors)
        }
    };
    Ok(QuantizedMatrix {
        config: *cfg,
        rows,
        cols,
        mantissas,
        scales,
    })
}

pub fn dequantize_matrix(q: &QuantizedMatrix) -> DenseMatrix {
    let grid = BlockGrid::new(q.rows, q.cols, &q.config);
    let mut out = vec![0f64; q.rows * q.cols];
    let b = q.config.mantissa_bits;
    grid.for_each(|blk, idx| {
        let step = match &q.scales {
            BlockScales::Exponents(e) => mxint_step(e[blk], b),
            BlockScales::Factors(s) => s[blk],
        };
        for &i in idx {
            out[i] = q.mantissas[i] as f64 * step;
        }
    });
    DenseMatrix::from_raw(q.rows, q.cols, out)
}

/// `dequantize(quantize(x))`: the nearest representable matrix.
pub fn snap(x: &DenseMatrix, cfg: &QuantConfig) -> Result<DenseMatrix> {
    Ok(dequantize_matrix(&quantize_matrix(x, cfg)?))
}

/// Average stored bits per weight of a layer that keeps an `m x n` matrix in
/// `cfg_low` plus rank-`k` factors (`m x k` and `k x n`) in `cfg_high`.
pub fn avg_bitwidth(
    cfg_low: &QuantConfig,
    dims: (usize, usize),
    k: usize,
    cfg_high: &QuantConfig,
) -> f64 {
    let (m, n) = (dims.0 as f64, dims.1 as f64);
    let low = m * n * cfg_low.bits_per_element();
    let high = (m + n) * k as f64 * cfg_high.bits_per_element();
    (low + high) / (m * n)
}

/// [`avg_bitwidth`] as an exact reduced fraction `(numerator, denominator)`.
pub fn avg_bitwidth_ratio(
    cfg_low: &QuantConfig,
    dims: (usize, usize),
    k: usize,
    cfg_high: &QuantConfig,
) -> (u128, u128) {
    let (m, n, k) = (dims.0 as u128, dims.1 as u128, k as u128);
    let (ln, ld) = cfg_low.bits_per_element_ratio();
    let (hn, hd) = cfg_high.bits_per_element_ratio();
    let (ln, ld, hn, hd) = (ln as u128, ld as u128, hn as u128, hd as u128);
    // (m n ln/ld + (m+n) k hn/hd) / (m n)
    let num = m * n * ln * hd + (m + n) * k * hn * ld;
    let den = m * n * ld * hd;
    let g = gcd(num, den);
    (num / g, den / g)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// Extra high-precision multiplies of the low-rank path relative to a dense
/// `m x n` product: `(m + n) k / (m n)`.
pub fn overhead_fraction(dims: (usize, usize), k: usize) -> f64 {
    let (m, n) = (dims.0 as f64, dims.1 as f64);
    (m + n) * k as f64 / (m * n)
}
