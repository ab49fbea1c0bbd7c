//! Binary checkpoint: magic `D2PSEG1`, then `C, D, L, W, S` as little-endian
//! u32, then every tensor in declaration order as little-endian f64.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

use super::model::{DenoiserConfig, DenoiserParams};

pub const MAGIC: &[u8; 7] = b"D2PSEG1";

pub fn encode(params: &DenoiserParams, total_steps: usize) -> Vec<u8> {
    let cfg = params.config;
    let mut out = Vec::with_capacity(MAGIC.len() + 20 + 8 * params.parameter_count());
    out.extend_from_slice(MAGIC);
    for v in [cfg.num_classes, cfg.feature_dim, cfg.layers, cfg.width, total_steps] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    params.for_each_tensor(|t| {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    out
}

/// Returns the parameters and the schedule length they were trained with.
pub fn decode(bytes: &[u8]) -> Result<(DenoiserParams, usize)> {
    let header_len = MAGIC.len() + 20;
    if bytes.len() < header_len || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("missing D2PSEG1 header".into()));
    }
    let field = |i: usize| {
        let off = MAGIC.len() + 4 * i;
        u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize
    };
    let config = DenoiserConfig {
        num_classes: field(0),
        feature_dim: field(1),
        layers: field(2),
        width: field(3),
    };
    let total_steps = field(4);
    let (c, d, l, w) = (config.num_classes, config.feature_dim, config.layers, config.width);
    if c < 2 || w == 0 || l == 0 {
        return Err(Error::Checkpoint(format!("implausible header {config:?}")));
    }
    let expected = (c + d) * w + w + w * w + w + l * (3 * w * w + w + w * w + w) + w * c + c;
    let body = &bytes[header_len..];
    if body.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            expected * 8,
            body.len()
        )));
    }
    let mut values = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));
    let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
    let mat = |v: Vec<f64>, r: usize, cols: usize| Array2::from_shape_vec((r, cols), v).expect("length checked above");

    // Same order as DenoiserParams::for_each_tensor.
    let mut params = DenoiserParams::init(config, crate::rng::RngSeed(0))?;
    params.in_w = mat(take((c + d) * w), c + d, w);
    params.in_b = Array1::from(take(w));
    params.emb_w = mat(take(w * w), w, w);
    params.emb_b = Array1::from(take(w));
    for layer in &mut params.layers {
        for k in &mut layer.conv_w {
            *k = mat(take(w * w), w, w);
        }
        layer.conv_b = Array1::from(take(w));
        layer.mix_w = mat(take(w * w), w, w);
        layer.mix_b = Array1::from(take(w));
    }
    params.out_w = mat(take(w * c), w, c);
    params.out_b = Array1::from(take(c));
    if !params.is_finite() {
        return Err(Error::Checkpoint("non-finite parameter".into()));
    }
    Ok((params, total_steps))
}

pub fn save(params: &DenoiserParams, total_steps: usize, path: &Path) -> Result<()> {
    fs::write(path, encode(params, total_steps)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(DenoiserParams, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
