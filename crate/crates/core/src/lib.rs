//! Low-rank reconstruction of weight quantization error.
//!
//! A dense weight `W` is snapped to a low-precision block format (`W_q`), and
//! the residual `E_q = W - W_q` is approximated by rank-k factors `A_k B_k`
//! from a truncated SVD. The activation-scaled variant factors `S E_q`
//! instead, with `S` a diagonal matrix calibrated from per-channel activation
//! magnitudes, and folds `S^-1` back into `A_k`. A layer then computes
//! `Ỹ = X W_q + (X A_k) B_k`.
//!
//! - [`linalg`]: matrix container, one-sided Jacobi SVD, truncation
//! - [`quant`]: MXINT and grouped integer formats, storage accounting
//! - [`calibration`]: channel profiling and the scale matrix
//! - [`reconstruct`]: error factors, approximation error, spectra
//! - [`layer`], [`harness`], [`synth`]: forward passes and evaluation
//! - [`io`]: matrix containers, bundles, profiles

pub mod calibration;
pub mod error;
pub mod harness;
pub mod io;
pub mod layer;
pub mod linalg;
pub mod quant;
pub mod reconstruct;
pub mod synth;

pub use calibration::{
    apply_scale, calibrate, profile_channels, scale_matrix, CalibrationProfile, ChannelAccumulator,
    DeadChannelPolicy, ScaleDirection,
};
pub use error::{LqerError, Result};
pub use harness::{
    run_harness, HarnessConfig, HarnessLayer, HarnessReport, HarnessRow, Nonlinearity,
    StandardScenario,
};
pub use layer::{build_layer, output_error, LayerConfig, LayerMethod, LqerLayer, OutputError};
pub use linalg::{frobenius_norm, matmul, svd, truncate, DenseMatrix, SvdResult, TruncatedSvd};
pub use quant::{
    avg_bitwidth, avg_bitwidth_ratio, dequantize_matrix, overhead_fraction, quantize_matrix,
    BlockOrientation, QuantConfig, QuantKind, QuantizedMatrix,
};
pub use reconstruct::{
    approximation_error, l2qer_factors, lqer_factors, normalized_spectra, quant_error,
    CorrectionMethod, ErrorDecomposition, ErrorReport, LowRankCorrection,
};
pub use synth::{synth_activations, synth_weights, SynthActivationConfig};
