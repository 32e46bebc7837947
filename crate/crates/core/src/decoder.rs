//! Decoder-only multi-head attention transformer with a partitioned cache.
//!
//! Positions `0..n_visual_slots` hold projected image features, every later
//! position is a text token. Blocks are pre-norm (RMS norm with a learned
//! gain), attention then a ReLU feed-forward of width `4 * d_model`.
//!
//! Two hooks act on the pre-softmax scores of the newest query row, after the
//! `1/sqrt(d_head)` scaling:
//!
//! * a per-layer drift bias `-drift_rate * t` on visual columns, where `t` is
//!   the number of decode steps since the cache origin;
//! * the consensus boost of an armed [`InterventionPlan`].
//!
//! Only the newest row is ever computed: older rows live in the cache as keys
//! and values and are never revisited.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervention::{boost_rows_in_place, InterventionPlan, LayerBand};
use crate::numerics::{dot, softmax_in_place, Matrix, Rng};

pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub n_visual_slots: usize,
    pub max_seq: usize,
    pub layer_band: LayerBand,
    pub pad_token: usize,
    pub end_token: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 12,
            n_heads: 4,
            d_model: 32,
            vocab_size: 32,
            n_visual_slots: 32,
            max_seq: 128,
            layer_band: LayerBand::MIDDLE,
            pad_token: 0,
            end_token: 2,
        }
    }
}

impl DecoderConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 {
            return Err(Error::Config("layers, heads and d_model must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.n_visual_slots == 0 {
            return Err(Error::Config("need at least one visual slot".into()));
        }
        if self.pad_token >= self.vocab_size || self.end_token >= self.vocab_size {
            return Err(Error::Config("pad/end token outside vocabulary".into()));
        }
        if self.max_seq <= self.n_visual_slots {
            return Err(Error::Config("max_seq leaves no room for text".into()));
        }
        self.layer_band.check_depth(self.n_layers)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f64>,
    pub w_up: Matrix,
    pub w_down: Matrix,
    /// Slope of the visual-column drift bias.
    pub drift_rate: f64,
}

impl LayerWeights {
    fn zeros(cfg: &DecoderConfig) -> Self {
        let d = cfg.d_model;
        Self {
            attn_norm: vec![1.0; d],
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ffn_norm: vec![1.0; d],
            w_up: Matrix::zeros(cfg.ffn_dim(), d),
            w_down: Matrix::zeros(d, cfg.ffn_dim()),
            drift_rate: 0.0,
        }
    }

    fn ffn_is_zero(&self) -> bool {
        self.w_up.data().iter().all(|&v| v == 0.0) || self.w_down.data().iter().all(|&v| v == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    pub config: DecoderConfig,
    pub token_embedding: Matrix,
    /// Linear, bias-free map from image features to visual embeddings.
    pub visual_proj: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    pub unembed: Matrix,
}

impl DecoderWeights {
    /// All-zero projections with unit norm gains.
    pub fn zeros(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let layers = (0..config.n_layers).map(|_| LayerWeights::zeros(&config)).collect();
        Ok(Self {
            token_embedding: Matrix::zeros(config.vocab_size, d),
            visual_proj: Matrix::zeros(d, d),
            layers,
            final_norm: vec![1.0; d],
            unembed: Matrix::zeros(config.vocab_size, d),
            config,
        })
    }

    /// Seeded uniform weights in `[-0.1, 0.1]`, unit norm gains, no drift.
    pub fn random(config: DecoderConfig, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let mut rng = Rng::new(seed);
        let mut fill = |m: &mut Matrix| {
            for v in m.data_mut() {
                *v = rng.uniform_range(-0.1, 0.1);
            }
        };
        fill(&mut w.token_embedding);
        fill(&mut w.visual_proj);
        for layer in &mut w.layers {
            fill(&mut layer.wq);
            fill(&mut layer.wk);
            fill(&mut layer.wv);
            fill(&mut layer.wo);
            fill(&mut layer.w_up);
            fill(&mut layer.w_down);
        }
        fill(&mut w.unembed);
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.d_model;
        let shape = |m: &Matrix, r: usize, k: usize, what: &str| {
            if m.rows() != r || m.cols() != k {
                return Err(Error::Shape(format!(
                    "{what} is {}x{}, expected {r}x{k}",
                    m.rows(),
                    m.cols()
                )));
            }
            if !m.is_finite() {
                return Err(Error::NumericDomain(format!("{what} has non-finite entries")));
            }
            Ok(())
        };
        let vector = |v: &[f64], what: &str| {
            if v.len() != d {
                return Err(Error::Shape(format!("{what} has length {}, expected {d}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericDomain(format!("{what} has non-finite entries")));
            }
            Ok(())
        };
        shape(&self.token_embedding, c.vocab_size, d, "token_embedding")?;
        shape(&self.visual_proj, d, d, "visual_proj")?;
        shape(&self.unembed, c.vocab_size, d, "unembed")?;
        vector(&self.final_norm, "final_norm")?;
        if self.layers.len() != c.n_layers {
            return Err(Error::Shape(format!(
                "{} layers stored, config says {}",
                self.layers.len(),
                c.n_layers
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            vector(&l.attn_norm, &format!("layer {i} attn_norm"))?;
            vector(&l.ffn_norm, &format!("layer {i} ffn_norm"))?;
            for (m, name) in [(&l.wq, "wq"), (&l.wk, "wk"), (&l.wv, "wv"), (&l.wo, "wo")] {
                shape(m, d, d, &format!("layer {i} {name}"))?;
            }
            shape(&l.w_up, c.ffn_dim(), d, &format!("layer {i} w_up"))?;
            shape(&l.w_down, d, c.ffn_dim(), &format!("layer {i} w_down"))?;
            if !l.drift_rate.is_finite() {
                return Err(Error::NumericDomain(format!("layer {i} drift rate")));
            }
        }
        Ok(())
    }

    pub fn embed_token(&self, token: usize) -> Result<Vec<f64>> {
        if token >= self.config.vocab_size {
            return Err(Error::Index {
                index: token,
                len: self.config.vocab_size,
            });
        }
        Ok(self.token_embedding.row(token).to_vec())
    }

    /// Logits read straight off a final hidden state.
    pub fn readout(&self, hidden: &[f64]) -> Vec<f64> {
        let mut normed = vec![0.0; hidden.len()];
        rms_norm_into(hidden, &self.final_norm, &mut normed);
        self.unembed.matvec(&normed)
    }
}

pub(crate) fn rms_norm_into(x: &[f64], gain: &[f64], out: &mut [f64]) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = g * v * inv;
    }
}

/// Which cache positions are image slots and which are text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalityPartition {
    pub visual: Range<usize>,
    pub text: Range<usize>,
}

impl ModalityPartition {
    pub fn new(n_visual: usize, len: usize) -> Self {
        Self {
            visual: 0..n_visual.min(len),
            text: n_visual.min(len)..len,
        }
    }
}

/// Append-only per-layer key/value store.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    d_model: usize,
    n_visual: usize,
    max_seq: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    origin: Option<usize>,
}

impl KvCache {
    pub fn new(config: &DecoderConfig) -> Self {
        Self {
            d_model: config.d_model,
            n_visual: config.n_visual_slots,
            max_seq: config.max_seq,
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
            len: 0,
            origin: None,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn partition(&self) -> ModalityPartition {
        ModalityPartition::new(self.n_visual, self.len)
    }

    /// Position of the first decode query; drift counts steps from here.
    pub fn set_origin(&mut self, position: usize) {
        self.origin = Some(position);
    }

    pub fn origin(&self) -> Option<usize> {
        self.origin
    }

    /// Decode step index of a query at `position`.
    pub fn step_at(&self, position: usize) -> usize {
        self.origin.map_or(0, |o| position.saturating_sub(o))
    }

    pub fn key(&self, layer: usize, pos: usize) -> &[f64] {
        &self.keys[layer][pos * self.d_model..(pos + 1) * self.d_model]
    }

    pub fn value(&self, layer: usize, pos: usize) -> &[f64] {
        &self.values[layer][pos * self.d_model..(pos + 1) * self.d_model]
    }

    pub fn check_room(&self) -> Result<()> {
        if self.len >= self.max_seq {
            return Err(Error::Capacity {
                len: self.len,
                max: self.max_seq,
            });
        }
        Ok(())
    }

    /// Append the keys and values produced by a forward pass.
    pub fn push(&mut self, kv: &StepKv) -> Result<()> {
        self.check_room()?;
        if kv.keys.len() != self.keys.len() {
            return Err(Error::Shape(format!(
                "kv for {} layers, cache has {}",
                kv.keys.len(),
                self.keys.len()
            )));
        }
        for (layer, (k, v)) in kv.keys.iter().zip(&kv.values).enumerate() {
            self.keys[layer].extend_from_slice(k);
            self.values[layer].extend_from_slice(v);
        }
        self.len += 1;
        Ok(())
    }
}

/// Keys and values of one position, per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StepKv {
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

/// Everything captured from one newest-row forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub logits: Vec<f64>,
    /// Per layer, `n_heads × width` post-softmax rows of the newest query.
    pub attention: Vec<Vec<f64>>,
    /// Same layout, the scores that entered softmax (drift and boost applied).
    pub pre_softmax: Vec<Vec<f64>>,
    /// Residual stream of the newest position after each layer.
    pub hidden: Vec<Vec<f64>>,
    pub kv: StepKv,
    pub n_heads: usize,
    /// Number of attended positions (cache length + 1).
    pub width: usize,
    /// Decode step used for the drift bias.
    pub step: usize,
}

impl ForwardResult {
    pub fn attention_row(&self, layer: usize, head: usize) -> &[f64] {
        &self.attention[layer][head * self.width..(head + 1) * self.width]
    }

    pub fn score_row(&self, layer: usize, head: usize) -> &[f64] {
        &self.pre_softmax[layer][head * self.width..(head + 1) * self.width]
    }

    pub fn head_rows(&self, layer: usize) -> Vec<&[f64]> {
        (0..self.n_heads).map(|h| self.attention_row(layer, h)).collect()
    }
}

/// One forward request: a cache to read, the new position's embedding and an
/// optional intervention.
pub struct ForwardItem<'a> {
    pub cache: &'a KvCache,
    pub embedding: &'a [f64],
    pub plan: Option<&'a InterventionPlan>,
}

/// Projected image features, computed once and shared by the conditions that
/// see the image.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionCache {
    pub embeddings: Vec<Vec<f64>>,
}

/// Per-episode handle on shared weights. Counts vision encodes.
#[derive(Debug, Clone)]
pub struct Decoder<'w> {
    weights: &'w DecoderWeights,
    vision_encodes: usize,
    // Layers whose feed-forward is identically zero contribute nothing.
    ffn_skip: Vec<bool>,
}

impl<'w> Decoder<'w> {
    pub fn new(weights: &'w DecoderWeights) -> Self {
        Self {
            weights,
            vision_encodes: 0,
            ffn_skip: weights.layers.iter().map(LayerWeights::ffn_is_zero).collect(),
        }
    }

    pub fn weights(&self) -> &'w DecoderWeights {
        self.weights
    }

    pub fn config(&self) -> &'w DecoderConfig {
        &self.weights.config
    }

    pub fn vision_encodes(&self) -> usize {
        self.vision_encodes
    }

    /// Project image features into the embedding space.
    pub fn encode_vision(&mut self, image_features: &[Vec<f64>]) -> Result<VisionCache> {
        let cfg = self.config();
        if image_features.len() != cfg.n_visual_slots {
            return Err(Error::Shape(format!(
                "expected {} visual slots, got {}",
                cfg.n_visual_slots,
                image_features.len()
            )));
        }
        if let Some(bad) = image_features.iter().find(|f| f.len() != cfg.d_model) {
            return Err(Error::Shape(format!(
                "feature width {} != d_model {}",
                bad.len(),
                cfg.d_model
            )));
        }
        self.vision_encodes += 1;
        Ok(VisionCache {
            embeddings: image_features
                .iter()
                .map(|f| self.weights.visual_proj.matvec(f))
                .collect(),
        })
    }

    /// Run the newest position through every layer. With `commit`, its keys
    /// and values are appended to `cache`.
    pub fn forward_step(
        &self,
        cache: &mut KvCache,
        embedding: &[f64],
        plan: Option<&InterventionPlan>,
        commit: bool,
    ) -> Result<ForwardResult> {
        let result = self
            .forward_batch(&[ForwardItem { cache, embedding, plan }])?
            .pop()
            .expect("one item in, one result out");
        if commit {
            cache.push(&result.kv)?;
        }
        Ok(result)
    }

    /// Evaluate several independent newest-row forwards in one sweep over the
    /// layers, so each layer's weights are visited once for the whole batch.
    /// Results are bitwise identical to separate [`Decoder::forward_step`]
    /// calls.
    pub fn forward_batch(&self, items: &[ForwardItem<'_>]) -> Result<Vec<ForwardResult>> {
        let w = self.weights;
        let cfg = &w.config;
        let d = cfg.d_model;
        for item in items {
            item.cache.check_room()?;
            if item.embedding.len() != d {
                return Err(Error::Shape(format!(
                    "embedding width {} != d_model {d}",
                    item.embedding.len()
                )));
            }
            if let Some(plan) = item.plan {
                plan.validate(cfg.n_layers)?;
            }
        }

        let mut states: Vec<RowState> = items
            .iter()
            .map(|item| RowState::new(cfg, item.cache, item.embedding))
            .collect();
        let mut scratch = Scratch::new(cfg);

        for (l, layer) in w.layers.iter().enumerate() {
            for (item, st) in items.iter().zip(states.iter_mut()) {
                st.attention_block(cfg, l, layer, item, &mut scratch)?;
                if !self.ffn_skip[l] {
                    st.ffn_block(layer, &mut scratch);
                }
                st.hidden.push(st.x.clone());
            }
        }

        Ok(states
            .into_iter()
            .map(|st| {
                let logits = w.readout(&st.x);
                ForwardResult {
                    logits,
                    attention: st.attention,
                    pre_softmax: st.pre_softmax,
                    hidden: st.hidden,
                    kv: StepKv {
                        keys: st.keys,
                        values: st.values,
                    },
                    n_heads: cfg.n_heads,
                    width: st.width,
                    step: st.step,
                }
            })
            .collect())
    }
}

struct Scratch {
    normed: Vec<f64>,
    q: Vec<f64>,
    heads_out: Vec<f64>,
    proj: Vec<f64>,
    ffn_mid: Vec<f64>,
}

impl Scratch {
    fn new(cfg: &DecoderConfig) -> Self {
        Self {
            normed: vec![0.0; cfg.d_model],
            q: vec![0.0; cfg.d_model],
            heads_out: vec![0.0; cfg.d_model],
            proj: vec![0.0; cfg.d_model],
            ffn_mid: vec![0.0; cfg.ffn_dim()],
        }
    }
}

struct RowState {
    x: Vec<f64>,
    width: usize,
    step: usize,
    attention: Vec<Vec<f64>>,
    pre_softmax: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl RowState {
    fn new(cfg: &DecoderConfig, cache: &KvCache, embedding: &[f64]) -> Self {
        let n = cfg.n_layers;
        Self {
            x: embedding.to_vec(),
            width: cache.len() + 1,
            step: cache.step_at(cache.len()),
            attention: Vec::with_capacity(n),
            pre_softmax: Vec::with_capacity(n),
            hidden: Vec::with_capacity(n),
            keys: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
        }
    }

    fn attention_block(
        &mut self,
        cfg: &DecoderConfig,
        l: usize,
        layer: &LayerWeights,
        item: &ForwardItem<'_>,
        s: &mut Scratch,
    ) -> Result<()> {
        let cache = item.cache;
        let (h_count, dh) = (cfg.n_heads, cfg.d_head());
        let scale = 1.0 / (dh as f64).sqrt();
        let width = self.width;
        let newest = width - 1;

        rms_norm_into(&self.x, &layer.attn_norm, &mut s.normed);
        layer.wq.matvec_into(&s.normed, &mut s.q);
        let k_new = layer.wk.matvec(&s.normed);
        let v_new = layer.wv.matvec(&s.normed);

        let visual_end = cfg.n_visual_slots.min(width);
        let drift = layer.drift_rate * self.step as f64;

        let mut scores = vec![0.0; h_count * width];
        for h in 0..h_count {
            let span = h * dh..(h + 1) * dh;
            let q_h = &s.q[span.clone()];
            let row = &mut scores[h * width..(h + 1) * width];
            for (j, r) in row.iter_mut().enumerate().take(newest) {
                *r = dot(q_h, &cache.key(l, j)[span.clone()]) * scale;
            }
            row[newest] = dot(q_h, &k_new[span]) * scale;
            if drift != 0.0 {
                for r in &mut row[..visual_end] {
                    *r -= drift;
                }
            }
        }

        if let Some(plan) = item.plan.filter(|p| p.is_armed(l)) {
            boost_rows_in_place(&mut scores, h_count, plan)?;
        }

        let mut probs = scores.clone();
        s.heads_out.iter_mut().for_each(|v| *v = 0.0);
        for h in 0..h_count {
            let span = h * dh..(h + 1) * dh;
            let row = &mut probs[h * width..(h + 1) * width];
            softmax_in_place(row);
            let out = &mut s.heads_out[span.clone()];
            for (j, &p) in row.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let v = if j == newest {
                    &v_new[span.clone()]
                } else {
                    &cache.value(l, j)[span.clone()]
                };
                for (o, &vv) in out.iter_mut().zip(v) {
                    *o += p * vv;
                }
            }
        }
        layer.wo.matvec_into(&s.heads_out, &mut s.proj);
        for (x, p) in self.x.iter_mut().zip(&s.proj) {
            *x += p;
        }

        self.pre_softmax.push(scores);
        self.attention.push(probs);
        self.keys.push(k_new);
        self.values.push(v_new);
        Ok(())
    }

    fn ffn_block(&mut self, layer: &LayerWeights, s: &mut Scratch) {
        rms_norm_into(&self.x, &layer.ffn_norm, &mut s.normed);
        layer.w_up.matvec_into(&s.normed, &mut s.ffn_mid);
        for v in s.ffn_mid.iter_mut() {
            *v = v.max(0.0);
        }
        layer.w_down.matvec_into(&s.ffn_mid, &mut s.proj);
        for (x, p) in self.x.iter_mut().zip(&s.proj) {
            *x += p;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intervention::BoostStatistic;

    fn small_config() -> DecoderConfig {
        DecoderConfig {
            n_layers: 4,
            n_heads: 2,
            d_model: 8,
            vocab_size: 10,
            n_visual_slots: 3,
            max_seq: 12,
            layer_band: LayerBand::new(1, 2).unwrap(),
            pad_token: 0,
            end_token: 1,
        }
    }

    fn prefilled(weights: &DecoderWeights, n: usize) -> KvCache {
        let dec = Decoder::new(weights);
        let mut cache = KvCache::new(&weights.config);
        for t in 0..n {
            let e = weights.embed_token(2 + t % 5).unwrap();
            dec.forward_step(&mut cache, &e, None, true).unwrap();
        }
        cache
    }

    #[test]
    fn config_validation() {
        assert!(DecoderConfig::default().validate().is_ok());
        let mut c = small_config();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.layer_band = LayerBand::new(2, 4).unwrap();
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.pad_token = 10;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_features_project_to_zero() {
        let w = DecoderWeights::random(small_config(), 1).unwrap();
        let mut dec = Decoder::new(&w);
        let vc = dec.encode_vision(&vec![vec![0.0; 8]; 3]).unwrap();
        assert!(vc.embeddings.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(dec.vision_encodes(), 1);
        dec.encode_vision(&vec![vec![0.0; 8]; 3]).unwrap();
        assert_eq!(dec.vision_encodes(), 2);
    }

    #[test]
    fn one_hot_feature_maps_to_projection_column() {
        let w = DecoderWeights::random(small_config(), 2).unwrap();
        let mut dec = Decoder::new(&w);
        let mut feats = vec![vec![0.0; 8]; 3];
        feats[0][5] = 1.0;
        let vc = dec.encode_vision(&feats).unwrap();
        let column: Vec<f64> = (0..8).map(|r| w.visual_proj.get(r, 5)).collect();
        assert_eq!(vc.embeddings[0], column);
    }

    #[test]
    fn vision_shape_errors() {
        let w = DecoderWeights::random(small_config(), 2).unwrap();
        let mut dec = Decoder::new(&w);
        assert!(matches!(
            dec.encode_vision(&vec![vec![0.0; 8]; 2]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            dec.encode_vision(&vec![vec![0.0; 7]; 3]),
            Err(Error::Shape(_))
        ));
        assert_eq!(dec.vision_encodes(), 0);
    }

    #[test]
    fn attention_rows_are_normalized() {
        let w = DecoderWeights::random(small_config(), 3).unwrap();
        let mut cache = prefilled(&w, 6);
        cache.set_origin(4);
        let dec = Decoder::new(&w);
        let plan = InterventionPlan::new(0.7, 0..3, LayerBand::new(1, 2).unwrap());
        for p in [None, Some(&plan)] {
            let r = dec
                .forward_step(&mut cache.clone(), &w.embed_token(4).unwrap(), p, false)
                .unwrap();
            for l in 0..4 {
                for h in 0..2 {
                    let s: f64 = r.attention_row(l, h).iter().sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn zero_gain_and_closed_gate_are_identity() {
        let w = DecoderWeights::random(small_config(), 4).unwrap();
        let cache = prefilled(&w, 5);
        let dec = Decoder::new(&w);
        let e = w.embed_token(7).unwrap();
        let base = dec.forward_step(&mut cache.clone(), &e, None, false).unwrap();
        let zero = InterventionPlan::new(0.0, 0..3, LayerBand::new(1, 2).unwrap());
        let mut closed = InterventionPlan::new(0.5, 0..3, LayerBand::new(1, 2).unwrap());
        closed.beta = false;
        for p in [&zero, &closed] {
            let r = dec.forward_step(&mut cache.clone(), &e, Some(p), false).unwrap();
            assert_eq!(r, base);
        }
    }

    #[test]
    fn commit_appends_without_touching_history() {
        let w = DecoderWeights::random(small_config(), 5).unwrap();
        let mut cache = prefilled(&w, 4);
        let before = cache.clone();
        let dec = Decoder::new(&w);
        let mut plan = InterventionPlan::new(0.9, 0..3, LayerBand::new(0, 3).unwrap());
        plan.statistic = BoostStatistic::MaxAbs;
        dec.forward_step(&mut cache, &w.embed_token(3).unwrap(), Some(&plan), true)
            .unwrap();
        assert_eq!(cache.len(), 5);
        for l in 0..4 {
            for p in 0..4 {
                assert_eq!(cache.key(l, p), before.key(l, p));
                assert_eq!(cache.value(l, p), before.value(l, p));
            }
        }
    }

    #[test]
    fn capacity_error() {
        let w = DecoderWeights::random(small_config(), 6).unwrap();
        let mut cache = prefilled(&w, 12);
        let dec = Decoder::new(&w);
        let err = dec.forward_step(&mut cache, &w.embed_token(3).unwrap(), None, true);
        assert!(matches!(err, Err(Error::Capacity { len: 12, max: 12 })));
    }

    #[test]
    fn drift_lowers_visual_scores() {
        let mut w = DecoderWeights::random(small_config(), 7).unwrap();
        let mut cache = prefilled(&w, 6);
        cache.set_origin(4);
        let dec = Decoder::new(&w);
        let e = w.embed_token(3).unwrap();
        let flat = dec.forward_step(&mut cache.clone(), &e, None, false).unwrap();
        for l in &mut w.layers {
            l.drift_rate = 0.25;
        }
        let dec = Decoder::new(&w);
        let drifted = dec.forward_step(&mut cache, &e, None, false).unwrap();
        assert_eq!(drifted.step, 2);
        for j in 0..3 {
            let delta = drifted.score_row(0, 0)[j] - flat.score_row(0, 0)[j];
            assert!((delta + 0.5).abs() < 1e-12);
        }
        assert_eq!(drifted.score_row(0, 0)[4], flat.score_row(0, 0)[4]);
    }

    #[test]
    fn batch_matches_single_calls() {
        let w = DecoderWeights::random(small_config(), 8).unwrap();
        let c1 = prefilled(&w, 4);
        let c2 = prefilled(&w, 6);
        let e1 = w.embed_token(5).unwrap();
        let e2 = w.embed_token(6).unwrap();
        let plan = InterventionPlan::new(0.5, 0..3, LayerBand::new(1, 2).unwrap());
        let dec = Decoder::new(&w);
        let batch = dec
            .forward_batch(&[
                ForwardItem {
                    cache: &c1,
                    embedding: &e1,
                    plan: None,
                },
                ForwardItem {
                    cache: &c2,
                    embedding: &e2,
                    plan: Some(&plan),
                },
            ])
            .unwrap();
        assert_eq!(batch[0], dec.forward_step(&mut c1.clone(), &e1, None, false).unwrap());
        assert_eq!(
            batch[1],
            dec.forward_step(&mut c2.clone(), &e2, Some(&plan), false).unwrap()
        );
    }
}
