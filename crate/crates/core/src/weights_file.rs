//! Flat binary weight files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic      b"CGVW"
//! version    u32 (= 1)
//! config     10 x u32: n_layers, n_heads, d_model, vocab_size,
//!            n_visual_slots, max_seq, band_start, band_end, pad_token, end_token
//! payload    f64 values, row-major, in this order:
//!            token_embedding, visual_proj,
//!            per layer: attn_norm, wq, wk, wv, wo, ffn_norm, w_up, w_down, drift_rate
//!            final_norm, unembed
//! digest     SHA-256 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::decoder::{DecoderConfig, DecoderWeights, LayerWeights};
use crate::error::{Error, Result};
use crate::intervention::LayerBand;
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"CGVW";
pub const VERSION: u32 = 1;
const CONFIG_FIELDS: usize = 10;
const DIGEST_LEN: usize = 32;

pub fn to_bytes(weights: &DecoderWeights) -> Result<Vec<u8>> {
    weights.validate()?;
    let c = &weights.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let fields = [
        c.n_layers,
        c.n_heads,
        c.d_model,
        c.vocab_size,
        c.n_visual_slots,
        c.max_seq,
        c.layer_band.start,
        c.layer_band.end,
        c.pad_token,
        c.end_token,
    ];
    for f in fields {
        let v = u32::try_from(f).map_err(|_| Error::Format(format!("config value {f} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut put = |values: &[f64]| values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    put(weights.token_embedding.data());
    put(weights.visual_proj.data());
    for l in &weights.layers {
        put(&l.attn_norm);
        put(l.wq.data());
        put(l.wk.data());
        put(l.wv.data());
        put(l.wo.data());
        put(&l.ffn_norm);
        put(l.w_up.data());
        put(l.w_down.data());
        put(&[l.drift_rate]);
    }
    put(&weights.final_norm);
    put(weights.unembed.data());
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<DecoderWeights> {
    let header = MAGIC.len() + 4 + 4 * CONFIG_FIELDS;
    if bytes.len() < header + DIGEST_LEN {
        return Err(Error::Format(format!(
            "file is {} bytes, too short for a header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format("checksum mismatch".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(body[i..i + 4].try_into().expect("4 bytes")) as usize;
    let version = u32_at(4) as u32;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let f: Vec<usize> = (0..CONFIG_FIELDS).map(|i| u32_at(8 + 4 * i)).collect();
    let config = DecoderConfig {
        n_layers: f[0],
        n_heads: f[1],
        d_model: f[2],
        vocab_size: f[3],
        n_visual_slots: f[4],
        max_seq: f[5],
        layer_band: LayerBand::new(f[6], f[7]).map_err(|e| Error::Format(format!("layer band: {e}")))?,
        pad_token: f[8],
        end_token: f[9],
    };
    config.validate().map_err(|e| Error::Format(format!("config: {e}")))?;

    let d = config.d_model;
    let ffn = config.ffn_dim();
    let per_layer = 2 * d + 4 * d * d + 2 * ffn * d + 1;
    let expected = 2 * config.vocab_size * d + d * d + config.n_layers * per_layer + d;
    let payload = &body[header..];
    if payload.len() != 8 * expected {
        return Err(Error::Format(format!(
            "payload holds {} bytes, expected {} for this config",
            payload.len(),
            8 * expected
        )));
    }
    let mut r = Values::new(payload);
    let token_embedding = r.matrix(config.vocab_size, d)?;
    let visual_proj = r.matrix(d, d)?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let attn_norm = r.take(d);
        let wq = r.matrix(d, d)?;
        let wk = r.matrix(d, d)?;
        let wv = r.matrix(d, d)?;
        let wo = r.matrix(d, d)?;
        let ffn_norm = r.take(d);
        let w_up = r.matrix(ffn, d)?;
        let w_down = r.matrix(d, ffn)?;
        let drift_rate = r.take(1)[0];
        layers.push(LayerWeights {
            attn_norm,
            wq,
            wk,
            wv,
            wo,
            ffn_norm,
            w_up,
            w_down,
            drift_rate,
        });
    }
    let final_norm = r.take(d);
    let unembed = r.matrix(config.vocab_size, d)?;
    let weights = DecoderWeights {
        config,
        token_embedding,
        visual_proj,
        layers,
        final_norm,
        unembed,
    };
    weights.validate()?;
    Ok(weights)
}

/// Sequential reader over the f64 payload.
struct Values<'a> {
    chunks: std::slice::ChunksExact<'a, u8>,
}

impl<'a> Values<'a> {
    fn new(payload: &'a [u8]) -> Self {
        Self {
            chunks: payload.chunks_exact(8),
        }
    }

    fn take(&mut self, n: usize) -> Vec<f64> {
        self.chunks
            .by_ref()
            .take(n)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::from_vec(rows, cols, self.take(rows * cols))
    }
}

pub fn save(weights: &DecoderWeights, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(weights)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<DecoderWeights> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DecoderWeights {
        let config = DecoderConfig {
            n_layers: 3,
            n_heads: 2,
            d_model: 8,
            vocab_size: 10,
            n_visual_slots: 4,
            max_seq: 16,
            layer_band: LayerBand::new(1, 1).unwrap(),
            pad_token: 0,
            end_token: 2,
        };
        let mut w = DecoderWeights::random(config, 7).unwrap();
        w.layers[1].drift_rate = 0.25;
        w
    }

    #[test]
    fn round_trip_is_exact() {
        let w = small();
        let bytes = to_bytes(&w).unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(from_bytes(&bytes).unwrap(), w);
    }

    #[test]
    fn header_layout() {
        let bytes = to_bytes(&small()).unwrap();
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        // n_layers then n_heads.
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        // First payload value is token_embedding[0][0].
        let first = f64::from_le_bytes(bytes[48..56].try_into().unwrap());
        assert_eq!(first, small().token_embedding.get(0, 0));
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = to_bytes(&small()).unwrap();
        let mut flipped = bytes.clone();
        flipped[100] ^= 0x01;
        assert!(matches!(from_bytes(&flipped), Err(Error::Format(m)) if m.contains("checksum")));
        assert!(from_bytes(&bytes[..bytes.len() - 9]).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(from_bytes(&magic), Err(Error::Format(m)) if m.contains("magic")));
        assert!(from_bytes(&[]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.cgvw");
        save(&small(), &path).unwrap();
        assert_eq!(load(&path).unwrap(), small());
    }
}
