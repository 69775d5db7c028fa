//! Binary parameter format: `"DSTW"`, a version byte, `D, H, C` as
//! little-endian `u32`, then `w1, b1, w2, b2` as little-endian `f32`.

use std::path::Path;

use super::{ModelConfig, Params};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"DSTW";
pub const MODEL_VERSION: u8 = 1;

const HEADER_LEN: usize = 4 + 1 + 12;

pub fn write_params(p: &Params) -> Vec<u8> {
    let cfg = p.config();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * cfg.param_count());
    out.extend_from_slice(MODEL_MAGIC);
    out.push(MODEL_VERSION);
    for dim in [cfg.input_dim, cfg.hidden_dim, cfg.num_classes] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in p.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn read_params(bytes: &[u8], path: &Path) -> Result<Params> {
    let bad = |reason: String| Error::BadModelFile {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN || &bytes[..4] != MODEL_MAGIC {
        return Err(bad("missing DSTW magic".into()));
    }
    if bytes[4] != MODEL_VERSION {
        return Err(bad(format!("unsupported version {}", bytes[4])));
    }
    let dim = |i: usize| {
        let o = 5 + 4 * i;
        u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
    };
    let cfg = ModelConfig::new(dim(0), dim(1), dim(2));
    cfg.validate().map_err(|e| bad(e.to_string()))?;
    let expected = HEADER_LEN + 4 * cfg.param_count();
    if bytes.len() != expected {
        return Err(bad(format!(
            "expected {expected} bytes for {cfg:?}, found {}",
            bytes.len()
        )));
    }
    let mut values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let (d, h, c) = (cfg.input_dim, cfg.hidden_dim, cfg.num_classes);
    let mut take = |n: usize| values.by_ref().take(n).collect::<Vec<_>>();
    let w1 = take(h * d);
    let b1 = take(h);
    let w2 = take(c * h);
    let b2 = take(c);
    let params = Params::from_parts(cfg, w1, b1, w2, b2)?;
    if !params.is_finite() {
        return Err(bad("non-finite parameter".into()));
    }
    Ok(params)
}
