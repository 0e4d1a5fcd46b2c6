//! Calibration profiles as pretty-printed JSON. Floats are written in their
//! shortest round-trip form, so a load reproduces the saved values exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{CalibrationProfile, DeadChannelPolicy};
use crate::error::{LqerError, Result};
use crate::io::write_atomic;

const PROFILE_FORMAT: &str = "lqer-profile";
const PROFILE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ProfileDoc {
    format: String,
    version: u32,
    channels: usize,
    sample_count: usize,
    dead_channel_policy: DeadChannelPolicy,
    a_bar: Vec<f64>,
    s_diag: Vec<f64>,
}

pub fn profile_to_string(p: &CalibrationProfile) -> String {
    let doc = ProfileDoc {
        format: PROFILE_FORMAT.into(),
        version: PROFILE_VERSION,
        channels: p.channels,
        sample_count: p.sample_count,
        dead_channel_policy: p.dead_channel_policy,
        a_bar: p.a_bar.clone(),
        s_diag: p.s_diag.clone(),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("profile serializes");
    s.push('\n');
    s
}

fn parse_profile(text: &str) -> Result<CalibrationProfile> {
    let doc: ProfileDoc = serde_json::from_str(text).map_err(|e| {
        // serde_json reports line/column; convert to a byte offset.
        let offset = text
            .split_inclusive('\n')
            .take(e.line().saturating_sub(1))
            .map(str::len)
            .sum::<usize>()
            + e.column().saturating_sub(1);
        LqerError::format(offset as u64, e.to_string())
    })?;
    if doc.format != PROFILE_FORMAT {
        return Err(LqerError::format(
            0,
            format!("not a profile file: format `{}`", doc.format),
        ));
    }
    if doc.version != PROFILE_VERSION {
        return Err(LqerError::format(
            0,
            format!("unsupported profile version {}", doc.version),
        ));
    }
    if doc.a_bar.len() != doc.channels || doc.s_diag.len() != doc.channels || doc.channels == 0 {
        return Err(LqerError::format(
            0,
            format!(
                "channel count {} disagrees with a_bar ({}) / s_diag ({})",
                doc.channels,
                doc.a_bar.len(),
                doc.s_diag.len()
            ),
        ));
    }
    if doc
        .a_bar
        .iter()
        .chain(&doc.s_diag)
        .any(|v| !(v.is_finite() && *v > 0.0))
    {
        return Err(LqerError::format(
            0,
            "profile magnitudes and scales must be positive",
        ));
    }
    Ok(CalibrationProfile {
        channels: doc.channels,
        a_bar: doc.a_bar,
        sample_count: doc.sample_count,
        s_diag: doc.s_diag,
        dead_channel_policy: doc.dead_channel_policy,
    })
}

pub fn save_profile(path: impl AsRef<Path>, p: &CalibrationProfile) -> Result<()> {
    write_atomic(path.as_ref(), profile_to_string(p).as_bytes())
}

pub fn load_profile(path: impl AsRef<Path>) -> Result<CalibrationProfile> {
    let text = std::fs::read_to_string(path)?;
    parse_profile(&text)
}

/// SHA-256 of the profile's serialized form.
pub fn profile_hash(p: &CalibrationProfile) -> [u8; 32] {
    Sha256::digest(profile_to_string(p).as_bytes()).into()
}
