//! Reference computations shared by the integration tests. Nothing here
//! calls into the decoder's forward pass.

#![allow(dead_code)]

use gazeguard::decoder::DecoderWeights;

const NORM_EPS: f64 = 1e-6;

fn matvec(w: &gazeguard::numerics::Matrix, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|r| (0..w.cols()).map(|c| w.get(r, c) * x[c]).sum())
        .collect()
}

fn rms_norm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| g * v * inv).collect()
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Logits of the last position from a full causal recompute of every row.
/// Row `i` sees the visual drift `-rate * (i - origin)` once past `origin`.
pub fn brute_force_logits(w: &DecoderWeights, inputs: &[Vec<f64>], origin: usize) -> Vec<f64> {
    let cfg = &w.config;
    let (d, h_count) = (cfg.d_model, cfg.n_heads);
    let dh = d / h_count;
    let n = inputs.len();
    let mut x: Vec<Vec<f64>> = inputs.to_vec();
    for layer in &w.layers {
        let normed: Vec<Vec<f64>> = x.iter().map(|r| rms_norm(r, &layer.attn_norm)).collect();
        let q: Vec<Vec<f64>> = normed.iter().map(|r| matvec(&layer.wq, r)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|r| matvec(&layer.wk, r)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|r| matvec(&layer.wv, r)).collect();
        let mut next = x.clone();
        for i in 0..n {
            let t = i.saturating_sub(origin) as f64;
            let mut heads = vec![0.0; d];
            for h in 0..h_count {
                let span = h * dh..(h + 1) * dh;
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let dot: f64 = span.clone().map(|c| q[i][c] * k[j][c]).sum();
                        let drift = if j < cfg.n_visual_slots {
                            layer.drift_rate * t
                        } else {
                            0.0
                        };
                        dot / (dh as f64).sqrt() - drift
                    })
                    .collect();
                let p = softmax(&scores);
                for c in span {
                    heads[c] = (0..=i).map(|j| p[j] * v[j][c]).sum();
                }
            }
            let proj = matvec(&layer.wo, &heads);
            for c in 0..d {
                next[i][c] += proj[c];
            }
            let mid: Vec<f64> = matvec(&layer.w_up, &rms_norm(&next[i], &layer.ffn_norm))
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            let down = matvec(&layer.w_down, &mid);
            for c in 0..d {
                next[i][c] += down[c];
            }
        }
        x = next;
    }
    matvec(&w.unembed, &rms_norm(&x[n - 1], &w.final_norm))
}

/// Image slots projected, then token embeddings.
pub fn sequence_inputs(w: &DecoderWeights, image: Option<&[Vec<f64>]>, tokens: &[usize]) -> Vec<Vec<f64>> {
    let d = w.config.d_model;
    let mut rows: Vec<Vec<f64>> = match image {
        Some(img) => img.iter().map(|f| matvec(&w.visual_proj, f)).collect(),
        None => vec![vec![0.0; d]; w.config.n_visual_slots],
    };
    rows.extend(tokens.iter().map(|&t| w.token_embedding.row(t).to_vec()));
    rows
}

pub fn distinct2(tokens: &[usize]) -> f64 {
    let bigrams: Vec<(usize, usize)> = tokens.windows(2).map(|w| (w[0], w[1])).collect();
    let unique: std::collections::BTreeSet<_> = bigrams.iter().collect();
    unique.len() as f64 / bigrams.len() as f64
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
