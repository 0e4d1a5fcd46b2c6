//! Layer bundles: a versioned little-endian archive of reconstructed layers.
//!
//! ```text
//! magic "LQBN" | version u16 | seed u64 | has_profile_hash u8 [| sha256 32B]
//! layer_count u32 | layer records...
//!
//! layer record:
//!   name_len u32 | name utf-8
//!   method u8 (0 plain, 1 lqer, 2 l2qer) | nonlinearity u8 (0 none, 1 relu)
//!   rank u32
//!   weight config | rows u64 | cols u64 | mantissas i8 x rows*cols
//!   scale_count u64 | exponents i8 (mxint) or scales f64 (int) x scale_count
//!   has_act_quant u8 [| act config]
//!   has_correction u8 [| correction method u8 | has_factor_quant u8 [| config]
//!                       | a_len u64 | A container | b_len u64 | B container]
//!
//! config: kind u8 (0 mxint, 1 int) | mantissa_bits u8 | exponent_bits u8
//!         | orientation u8 (0 along_row, 1 along_col) | block_size u32
//! ```
//!
//! Reference weights are not stored.

use std::path::Path;

use crate::error::{LqerError, Result};
use crate::harness::Nonlinearity;
use crate::io::container::{encode_matrix, read_matrix, DType};
use crate::io::{write_atomic, ByteReader, ByteWriter};
use crate::layer::{LayerMethod, LqerLayer};
use crate::linalg::DenseMatrix;
use crate::quant::{BlockOrientation, BlockScales, QuantConfig, QuantKind, QuantizedMatrix};
use crate::reconstruct::{CorrectionMethod, LowRankCorrection};

pub const BUNDLE_MAGIC: [u8; 4] = *b"LQBN";
pub const BUNDLE_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BundleLayer {
    pub name: String,
    pub method: LayerMethod,
    pub nonlinearity: Nonlinearity,
    pub layer: LqerLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub seed: u64,
    pub profile_hash: Option<[u8; 32]>,
    pub layers: Vec<BundleLayer>,
}

impl Bundle {
    /// Runs the layers in order, applying each layer's nonlinearity.
    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.nonlinearity.apply(l.layer.forward(&h)?);
        }
        Ok(h)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(&BUNDLE_MAGIC);
        w.u16(BUNDLE_VERSION);
        w.u64(self.seed);
        match &self.profile_hash {
            Some(h) => {
                w.u8(1);
                w.bytes(h);
            }
            None => w.u8(0),
        }
        w.u32(self.layers.len() as u32);
        for l in &self.layers {
            write_layer(&mut w, l);
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let at = r.offset();
        let magic = r.take(4, "magic")?;
        if magic != BUNDLE_MAGIC {
            return Err(LqerError::format(at, "bad magic, expected \"LQBN\""));
        }
        let at = r.offset();
        let version = r.u16("version")?;
        if version != BUNDLE_VERSION {
            return Err(LqerError::format(
                at,
                format!("unsupported bundle version {version}"),
            ));
        }
        let seed = r.u64("seed")?;
        let profile_hash = match flag(&mut r, "profile hash flag")? {
            true => Some(r.take(32, "profile hash")?.try_into().unwrap()),
            false => None,
        };
        let count = r.u32("layer count")? as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            layers.push(read_layer(&mut r)?);
        }
        if r.remaining() != 0 {
            return Err(LqerError::format(
                r.offset(),
                "trailing bytes after last layer",
            ));
        }
        Ok(Self {
            seed,
            profile_hash,
            layers,
        })
    }
}

fn flag(r: &mut ByteReader<'_>, what: &str) -> Result<bool> {
    let at = r.offset();
    match r.u8(what)? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(LqerError::format(
            at,
            format!("{what} must be 0 or 1, got {v}"),
        )),
    }
}

fn write_config(w: &mut ByteWriter, c: &QuantConfig) {
    w.u8(match c.kind {
        QuantKind::Mxint => 0,
        QuantKind::IntGrouped => 1,
    });
    w.u8(c.mantissa_bits as u8);
    w.u8(c.exponent_bits as u8);
    w.u8(match c.orientation {
        BlockOrientation::AlongRow => 0,
        BlockOrientation::AlongCol => 1,
    });
    w.u32(c.block_size as u32);
}

fn read_config(r: &mut ByteReader<'_>) -> Result<QuantConfig> {
    let at = r.offset();
    let kind = match r.u8("format kind")? {
        0 => QuantKind::Mxint,
        1 => QuantKind::IntGrouped,
        v => return Err(LqerError::format(at, format!("unknown format kind {v}"))),
    };
    let mantissa_bits = r.u8("mantissa bits")? as u32;
    let exponent_bits = r.u8("exponent bits")? as u32;
    let at_orient = r.offset();
    let orientation = match r.u8("orientation")? {
        0 => BlockOrientation::AlongRow,
        1 => BlockOrientation::AlongCol,
        v => {
            return Err(LqerError::format(
                at_orient,
                format!("unknown orientation {v}"),
            ))
        }
    };
    let block_size = r.u32("block size")? as usize;
    let cfg = QuantConfig {
        kind,
        mantissa_bits,
        exponent_bits,
        block_size,
        orientation,
    };
    cfg.validate()
        .map_err(|e| LqerError::format(at, format!("invalid format config: {e}")))?;
    Ok(cfg)
}

fn write_optional_config(w: &mut ByteWriter, c: Option<&QuantConfig>) {
    match c {
        Some(c) => {
            w.u8(1);
            write_config(w, c);
        }
        None => w.u8(0),
    }
}

fn read_optional_config(r: &mut ByteReader<'_>, what: &str) -> Result<Option<QuantConfig>> {
    if flag(r, what)? {
        Ok(Some(read_config(r)?))
    } else {
        Ok(None)
    }
}

fn write_embedded_matrix(w: &mut ByteWriter, m: &DenseMatrix) {
    let bytes = encode_matrix(m, DType::F64);
    w.u64(bytes.len() as u64);
    w.bytes(&bytes);
}

fn read_embedded_matrix(r: &mut ByteReader<'_>, what: &str) -> Result<DenseMatrix> {
    let len = r.len(what)?;
    let start = r.offset();
    let bytes = r.take(len, what)?;
    let mut inner = ByteReader::new(bytes);
    let (m, _) = read_matrix(&mut inner).map_err(|e| match e {
        LqerError::Format { offset, reason } => LqerError::Format {
            offset: start + offset,
            reason: format!("{what}: {reason}"),
        },
        other => other,
    })?;
    if inner.remaining() != 0 {
        return Err(LqerError::format(
            start + inner.offset(),
            format!("{what}: trailing bytes"),
        ));
    }
    Ok(m)
}

fn method_code(m: LayerMethod) -> u8 {
    match m {
        LayerMethod::Plain => 0,
        LayerMethod::Lqer => 1,
        LayerMethod::L2qer => 2,
    }
}

fn write_layer(w: &mut ByteWriter, l: &BundleLayer) {
    w.u32(l.name.len() as u32);
    w.bytes(l.name.as_bytes());
    w.u8(method_code(l.method));
    w.u8(match l.nonlinearity {
        Nonlinearity::None => 0,
        Nonlinearity::Relu => 1,
    });
    let layer = &l.layer;
    w.u32(layer.correction().map_or(0, |c| c.rank) as u32);

    let q = layer.w_q();
    write_config(w, q.config());
    w.u64(q.rows() as u64);
    w.u64(q.cols() as u64);
    for &m in q.mantissas() {
        w.i8(m);
    }
    match q.scales() {
        BlockScales::Exponents(e) => {
            w.u64(e.len() as u64);
            for &x in e {
                // Exponent widths are at most 8 bits, so they fit an i8.
                w.i8(x as i8);
            }
        }
        BlockScales::Factors(s) => {
            w.u64(s.len() as u64);
            for &x in s {
                w.f64(x);
            }
        }
    }
    write_optional_config(w, layer.act_quant());
    match layer.correction() {
        Some(c) => {
            w.u8(1);
            w.u8(match c.method {
                CorrectionMethod::Lqer => 1,
                CorrectionMethod::L2qer => 2,
            });
            write_optional_config(w, c.factor_quant.as_ref());
            write_embedded_matrix(w, &c.a_k);
            write_embedded_matrix(w, &c.b_k);
        }
        None => w.u8(0),
    }
}

fn read_layer(r: &mut ByteReader<'_>) -> Result<BundleLayer> {
    let name_len = r.u32("name length")? as usize;
    let at = r.offset();
    let name = String::from_utf8(r.take(name_len, "layer name")?.to_vec())
        .map_err(|_| LqerError::format(at, "layer name is not UTF-8"))?;
    let at = r.offset();
    let method = match r.u8("method")? {
        0 => LayerMethod::Plain,
        1 => LayerMethod::Lqer,
        2 => LayerMethod::L2qer,
        v => return Err(LqerError::format(at, format!("unknown method code {v}"))),
    };
    let at = r.offset();
    let nonlinearity = match r.u8("nonlinearity")? {
        0 => Nonlinearity::None,
        1 => Nonlinearity::Relu,
        v => {
            return Err(LqerError::format(
                at,
                format!("unknown nonlinearity code {v}"),
            ))
        }
    };
    let rank_at = r.offset();
    let rank = r.u32("rank")? as usize;

    let at = r.offset();
    let config = read_config(r)?;
    let rows = r.len("rows")?;
    let cols = r.len("cols")?;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| LqerError::format(at, "weight dimensions overflow"))?;
    let mantissas: Vec<i8> = r
        .take(count, "mantissas")?
        .iter()
        .map(|&b| b as i8)
        .collect();
    let scale_count = r.len("scale count")?;
    let scales = match config.kind {
        QuantKind::Mxint => BlockScales::Exponents(
            r.take(scale_count, "exponents")?
                .iter()
                .map(|&b| b as i8 as i32)
                .collect(),
        ),
        QuantKind::IntGrouped => {
            let mut s = Vec::with_capacity(scale_count.min(1 << 24));
            for _ in 0..scale_count {
                s.push(r.f64("group scale")?);
            }
            BlockScales::Factors(s)
        }
    };
    let w_q = QuantizedMatrix::from_parts(config, rows, cols, mantissas, scales)
        .map_err(|e| LqerError::format(at, format!("invalid quantized weight: {e}")))?;
    let act_quant = read_optional_config(r, "activation format flag")?;

    let correction = if flag(r, "correction flag")? {
        let at = r.offset();
        let cmethod = match r.u8("correction method")? {
            1 => CorrectionMethod::Lqer,
            2 => CorrectionMethod::L2qer,
            v => {
                return Err(LqerError::format(
                    at,
                    format!("unknown correction method {v}"),
                ))
            }
        };
        let factor_quant = read_optional_config(r, "factor format flag")?;
        let a_k = read_embedded_matrix(r, "left factor")?;
        let b_k = read_embedded_matrix(r, "right factor")?;
        let c = LowRankCorrection::new(a_k, b_k, cmethod, factor_quant)
            .map_err(|e| LqerError::format(at, e.to_string()))?;
        if c.rank != rank {
            return Err(LqerError::format(
                rank_at,
                "stored rank disagrees with factors",
            ));
        }
        Some(c)
    } else {
        None
    };
    let layer = LqerLayer::from_parts(w_q, correction, act_quant, None)
        .map_err(|e| LqerError::format(at, e.to_string()))?;
    Ok(BundleLayer {
        name,
        method,
        nonlinearity,
        layer,
    })
}

pub fn save_bundle(path: impl AsRef<Path>, bundle: &Bundle) -> Result<()> {
    write_atomic(path.as_ref(), &bundle.to_bytes())
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<Bundle> {
    Bundle::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::scale_matrix;
    use crate::layer::{build_layer, LayerConfig};
    use crate::synth::synth_weights;

    fn bundle() -> Bundle {
        let w1 = synth_weights(32, 16, 1).unwrap();
        let w2 = synth_weights(16, 16, 2).unwrap();
        let p = scale_matrix(&(1..=32).map(|i| i as f64).collect::<Vec<_>>()).unwrap();
        let l1 = build_layer(
            &w1,
            &LayerConfig {
                rank: 4,
                ..LayerConfig::w4a8(LayerMethod::L2qer)
            },
            Some(&p),
        )
        .unwrap();
        let int_cfg = LayerConfig {
            weight_quant: QuantConfig::int_grouped(4, 8, BlockOrientation::AlongRow).unwrap(),
            act_quant: None,
            ..LayerConfig::w4a8(LayerMethod::Plain)
        };
        let l2 = build_layer(&w2, &int_cfg, None).unwrap();
        let strip = |l: LqerLayer| {
            LqerLayer::from_parts(
                l.w_q().clone(),
                l.correction().cloned(),
                l.act_quant().copied(),
                None,
            )
            .unwrap()
        };
        Bundle {
            seed: 42,
            profile_hash: Some([7; 32]),
            layers: vec![
                BundleLayer {
                    name: "fc1".into(),
                    method: LayerMethod::L2qer,
                    nonlinearity: Nonlinearity::Relu,
                    layer: strip(l1),
                },
                BundleLayer {
                    name: "fc2".into(),
                    method: LayerMethod::Plain,
                    nonlinearity: Nonlinearity::None,
                    layer: strip(l2),
                },
            ],
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let b = bundle();
        let back = Bundle::from_bytes(&b.to_bytes()).unwrap();
        assert_eq!(back, b);
        let x = synth_weights(5, 32, 9).unwrap();
        assert_eq!(back.forward(&x).unwrap(), b.forward(&x).unwrap());
    }

    #[test]
    fn corrupt_bundles_are_rejected() {
        let bytes = bundle().to_bytes();
        let mut bad = bytes.clone();
        bad[1] = 0;
        assert!(matches!(
            Bundle::from_bytes(&bad),
            Err(LqerError::Format { offset: 0, .. })
        ));
        for cut in [3, 20, 60, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                Bundle::from_bytes(&bytes[..cut]),
                Err(LqerError::Format { .. })
            ));
        }
        let mut long = bytes;
        long.push(1);
        assert!(matches!(
            Bundle::from_bytes(&long),
            Err(LqerError::Format { .. })
        ));
    }
}
