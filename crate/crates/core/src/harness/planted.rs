//! Hand-built decoder whose correct answer is known.
//!
//! Residual layout (`d_model = 32`):
//!
//! | dims   | meaning                                        |
//! |--------|------------------------------------------------|
//! | 0..8   | object evidence, one dim per class             |
//! | 8..15  | flags: visual, function, content, filler, pad, bos, scene |
//! | 15     | constant anchor that keeps RMS norms near 1    |
//! | 16..24 | identity of each function word                 |
//! | 24..32 | identity of each filler word                   |
//!
//! A fixed grammar on the direct path cycles filler → function → content.
//! At a function-word query the *reader* head of every layer looks at the
//! image slots (which carry the true class) and at the scene word (which
//! carries the prior class). A per-step drift on visual scores moves the
//! reader onto the scene word as generation proceeds, so late content words
//! drift to the prior class. Middle layers hold strong readers; the rest hold
//! weak ones.
//!
//! Middle layers also hold two anti-repetition heads that penalise function
//! and filler words already used, and a *lookout* head that attends to the
//! image without writing anything. The lookout's large scores size the boost,
//! so a boost applied at every step floods the anti-repetition heads with
//! image positions and the decoder starts repeating itself.

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, DecoderWeights};
use crate::error::{Error, Result};
use crate::intervention::LayerBand;
use crate::numerics::{Matrix, Rng};
use crate::telemetry::TokenClass;

pub const N_CLASSES: usize = 8;
pub const N_SCENES: usize = 5;
pub const D_MODEL: usize = 32;
pub const VOCAB: usize = 32;
pub const N_LAYERS: usize = 12;
pub const N_HEADS: usize = 4;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const END: usize = 2;
pub const FIRST_CONTENT: usize = 3;
pub const FIRST_FUNCTION: usize = FIRST_CONTENT + N_CLASSES;
pub const FIRST_FILLER: usize = FIRST_FUNCTION + 8;
pub const DESCRIBE: usize = FIRST_FILLER;
pub const FIRST_SCENE: usize = FIRST_FILLER + 8;

const OBJ: usize = 0;
const VIS: usize = 8;
const FUNC: usize = 9;
const CONTENT: usize = 10;
const FILLER: usize = 11;
const PAD_FLAG: usize = 12;
const BOS_FLAG: usize = 13;
const SCENE: usize = 14;
const ANCHOR: usize = 15;
const FUNC_ID: usize = 16;
const FILLER_ID: usize = 24;

/// Attention and readout gains of the planted construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedGains {
    /// Reader score on image slots at a function-word query.
    pub visual_score: f64,
    /// Reader score on the scene word at a function-word query.
    pub scene_score: f64,
    /// Reader score on image slots at a pad query.
    pub pad_score: f64,
    /// Reader score on BOS at every other text query.
    pub sink_score: f64,
    /// Lookout score on image slots.
    pub lookout_score: f64,
    /// Anchor value relative to a unit RMS. Norm gains undo it, so larger
    /// values make RMS norms less sensitive to what layers write.
    pub anchor_scale: f64,
    /// Anti-repetition score on earlier words of the same class.
    pub repeat_score: f64,
    /// Value gain of middle-band readers.
    pub strong_reader: f64,
    /// Value gain of readers outside the middle band.
    pub weak_reader: f64,
    /// Logit per unit of object evidence.
    pub object_logit: f64,
    /// Grammar logit for the expected next word class.
    pub grammar_logit: f64,
    /// Logit penalty per unit of copied identity.
    pub repeat_penalty: f64,
    /// Logit step that orders words within a class.
    pub order_bias: f64,
}

impl Default for PlantedGains {
    fn default() -> Self {
        Self {
            visual_score: 6.0,
            scene_score: 6.0,
            pad_score: 20.0,
            sink_score: 10.0,
            lookout_score: 100.0,
            anchor_scale: 4.0,
            repeat_score: 3.0,
            strong_reader: 0.2,
            weak_reader: 0.02,
            object_logit: 10.0,
            grammar_logit: 30.0,
            repeat_penalty: 8.0,
            order_bias: 0.3,
        }
    }
}

/// Everything that defines a planted experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    /// Object classes in play, at most 8.
    pub n_classes: usize,
    /// Drift rate on visual scores per decode step.
    pub drift: f64,
    /// Object evidence carried by a scene word.
    pub prior: f64,
    /// Range of per-episode image clarity.
    pub clarity_min: f64,
    pub clarity_max: f64,
    /// Per-slot uniform noise on object evidence.
    pub slot_noise: f64,
    pub n_visual_slots: usize,
    pub max_new_tokens: usize,
    pub episodes: usize,
    pub seed: u64,
    pub gains: PlantedGains,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            n_classes: N_CLASSES,
            drift: 0.4,
            prior: 1.0,
            clarity_min: 0.5,
            clarity_max: 1.8,
            slot_noise: 0.05,
            n_visual_slots: 32,
            max_new_tokens: 24,
            episodes: 500,
            seed: 2024,
            gains: PlantedGains::default(),
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=N_CLASSES).contains(&self.n_classes) {
            return Err(Error::Config(format!(
                "n_classes must be in [2, {N_CLASSES}], got {}",
                self.n_classes
            )));
        }
        for (name, v) in [
            ("drift", self.drift),
            ("prior", self.prior),
            ("slot_noise", self.slot_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.clarity_min.is_finite() && self.clarity_min > 0.0 && self.clarity_min <= self.clarity_max) {
            return Err(Error::Config(format!(
                "clarity range [{}, {}] is invalid",
                self.clarity_min, self.clarity_max
            )));
        }
        if self.n_visual_slots == 0 {
            return Err(Error::Config("n_visual_slots must be positive".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be positive".into()));
        }
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be positive".into()));
        }
        Ok(())
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            n_layers: N_LAYERS,
            n_heads: N_HEADS,
            d_model: D_MODEL,
            vocab_size: VOCAB,
            n_visual_slots: self.n_visual_slots,
            max_seq: self.n_visual_slots + 3 + self.max_new_tokens + 1,
            layer_band: LayerBand::MIDDLE,
            pad_token: PAD,
            end_token: END,
        }
    }
}

pub fn content_token(class: usize) -> usize {
    FIRST_CONTENT + class
}

pub fn scene_token(class: usize) -> usize {
    FIRST_SCENE + class
}

/// Class label of every token id.
pub fn token_classes() -> Vec<TokenClass> {
    (0..VOCAB)
        .map(|t| match t {
            t if (FIRST_CONTENT..FIRST_FUNCTION).contains(&t) => TokenClass::Content,
            t if (FIRST_FUNCTION..FIRST_FILLER).contains(&t) => TokenClass::Function,
            _ => TokenClass::Other,
        })
        .collect()
}

pub fn is_function_word(token: usize) -> bool {
    (FIRST_FUNCTION..FIRST_FILLER).contains(&token)
}

/// Correct and prior-favoured answers of one episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub true_class: usize,
    pub biased_class: usize,
}

impl GroundTruth {
    pub fn content_token(&self) -> usize {
        content_token(self.true_class)
    }

    pub fn biased_token(&self) -> usize {
        content_token(self.biased_class)
    }
}

/// One planted episode: image, prompt and answers.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedEpisode {
    pub index: usize,
    pub truth: GroundTruth,
    pub clarity: f64,
    pub image: Vec<Vec<f64>>,
    pub prompt: Vec<usize>,
    /// Seed for token sampling, shared across arms.
    pub sample_seed: u64,
}

pub fn build_episode(spec: &ScenarioSpec, index: usize) -> PlantedEpisode {
    let mut rng = Rng::for_stream(spec.seed, index as u64);
    let true_class = rng.below(spec.n_classes);
    let scenes = spec.n_classes.min(N_SCENES);
    let biased_class = loop {
        let b = rng.below(scenes);
        if b != true_class {
            break b;
        }
    };
    let clarity = rng.uniform_range(spec.clarity_min, spec.clarity_max);
    let image = (0..spec.n_visual_slots)
        .map(|slot| {
            let mut f = vec![0.0; D_MODEL];
            f[VIS] = 1.0;
            f[ANCHOR] = anchor(&spec.gains);
            if slot == 0 {
                // Register slot: the attention sink for other image slots.
                f[BOS_FLAG] = 1.0;
                return f;
            }
            for c in 0..N_CLASSES {
                f[OBJ + c] = rng.uniform_range(-spec.slot_noise, spec.slot_noise);
            }
            f[OBJ + true_class] += clarity;
            f
        })
        .collect();
    PlantedEpisode {
        index,
        truth: GroundTruth {
            true_class,
            biased_class,
        },
        clarity,
        image,
        prompt: vec![BOS, scene_token(biased_class), DESCRIBE],
        sample_seed: rng.next_u64(),
    }
}

fn anchor(g: &PlantedGains) -> f64 {
    g.anchor_scale * (D_MODEL as f64).sqrt()
}

pub fn build_planted_decoder(spec: &ScenarioSpec) -> Result<DecoderWeights> {
    spec.validate()?;
    let g = &spec.gains;
    let cfg = spec.decoder_config();
    let mut w = DecoderWeights::zeros(cfg)?;
    let dh = D_MODEL / N_HEADS;
    // Scores are q·k / sqrt(d_head); unit keys need queries scaled by sqrt(d_head).
    let qs = (dh as f64).sqrt();

    // With the anchor dominating, every RMS is close to `anchor_scale`;
    // norm gains of the same size bring flags back to unit scale.
    let norm_gain = vec![g.anchor_scale; D_MODEL];
    w.final_norm = norm_gain.clone();
    let emb = &mut w.token_embedding;
    for t in 0..VOCAB {
        emb.set(t, ANCHOR, anchor(g));
    }
    emb.set(PAD, PAD_FLAG, 1.0);
    emb.set(BOS, BOS_FLAG, 1.0);
    for c in 0..N_CLASSES {
        emb.set(content_token(c), CONTENT, 1.0);
    }
    for i in 0..8 {
        emb.set(FIRST_FUNCTION + i, FUNC, 1.0);
        emb.set(FIRST_FUNCTION + i, FUNC_ID + i, 1.0);
        emb.set(FIRST_FILLER + i, FILLER, 1.0);
        emb.set(FIRST_FILLER + i, FILLER_ID + i, 1.0);
    }
    for s in 0..N_SCENES {
        emb.set(scene_token(s), SCENE, 1.0);
        emb.set(scene_token(s), OBJ + s, spec.prior);
    }
    w.visual_proj = identity(D_MODEL);

    for (l, layer) in w.layers.iter_mut().enumerate() {
        layer.drift_rate = spec.drift;
        layer.attn_norm = norm_gain.clone();
        let middle = LayerBand::MIDDLE.contains(l);

        // Head 0: reader.
        layer.wq.set(0, FUNC, g.visual_score * qs);
        layer.wq.set(0, PAD_FLAG, g.pad_score * qs);
        layer.wq.set(1, FUNC, g.scene_score * qs);
        for flag in [VIS, SCENE, BOS_FLAG, CONTENT, FILLER] {
            layer.wq.set(2, flag, g.sink_score * qs);
        }
        layer.wk.set(0, VIS, 1.0);
        layer.wk.set(1, SCENE, 1.0);
        layer.wk.set(2, BOS_FLAG, 1.0);
        let gain = if middle { g.strong_reader } else { g.weak_reader };
        for c in 0..N_CLASSES {
            layer.wv.set(c, OBJ + c, 1.0);
            layer.wo.set(OBJ + c, c, gain);
        }

        if !middle {
            continue;
        }
        // Heads 1 and 3 park on BOS-flagged positions when inactive, so they
        // never copy identities into positions that are read later.
        for (head, active) in [(1, FILLER), (3, CONTENT)] {
            for flag in [VIS, FUNC, CONTENT, FILLER, PAD_FLAG, BOS_FLAG, SCENE] {
                if flag != active {
                    layer.wq.set(head * dh + 1, flag, g.sink_score * qs);
                }
            }
            layer.wk.set(head * dh + 1, BOS_FLAG, 1.0);
        }
        // Head 1: earlier function words, queried from a filler.
        layer.wq.set(dh, FILLER, g.repeat_score * qs);
        layer.wk.set(dh, FUNC, 1.0);
        // Head 2: lookout on the image, writes nothing.
        for flag in [FUNC, FILLER, CONTENT] {
            layer.wq.set(2 * dh, flag, g.lookout_score * qs);
        }
        layer.wk.set(2 * dh, VIS, 1.0);
        // Head 3: earlier fillers, queried from a content word.
        layer.wq.set(3 * dh, CONTENT, g.repeat_score * qs);
        layer.wk.set(3 * dh, FILLER, 1.0);
        for i in 0..8 {
            layer.wv.set(dh + i, FUNC_ID + i, 1.0);
            layer.wo.set(FUNC_ID + i, dh + i, 1.0);
            layer.wv.set(3 * dh + i, FILLER_ID + i, 1.0);
            layer.wo.set(FILLER_ID + i, 3 * dh + i, 1.0);
        }
    }

    let un = &mut w.unembed;
    // After the final norm the anchor keeps roughly its raw value.
    let order = g.order_bias / anchor(g);
    for c in 0..N_CLASSES {
        un.set(content_token(c), OBJ + c, g.object_logit);
        un.set(content_token(c), FUNC, g.grammar_logit);
    }
    for i in 0..8 {
        let f = FIRST_FUNCTION + i;
        un.set(f, FILLER, g.grammar_logit);
        un.set(f, FUNC_ID + i, -g.repeat_penalty);
        un.set(f, ANCHOR, -order * i as f64);
        let r = FIRST_FILLER + i;
        un.set(r, CONTENT, g.grammar_logit);
        un.set(r, FILLER_ID + i, -g.repeat_penalty);
        un.set(r, ANCHOR, -order * i as f64);
    }
    w.validate()?;
    Ok(w)
}

fn identity(n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        m.set(i, i, 1.0);
    }
    m
}
