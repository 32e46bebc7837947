//! The per-step control loop.
//!
//! Each step runs, in order:
//!
//! 1. the full condition without intervention,
//! 2. top-k candidate extraction,
//! 3. the three masked conditions in one batched pass,
//! 4. the gate,
//! 5. when the gate fires, a second full forward with the boost armed, whose
//!    logits and attention replace the first,
//! 6. token selection,
//! 7. commit to all four caches (the boosted keys/values when persistence is
//!    on),
//! 8. the step trace.
//!
//! A step therefore costs four forwards, plus one when the gate fires.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::coalitions::{AuxForwards, CoalitionCaches, CoalitionId, MaskingOptions};
use crate::decoder::{Decoder, DecoderWeights, ForwardResult};
use crate::error::{Error, Result};
use crate::intervention::{BoostStatistic, InterventionPlan, LayerBand};
use crate::numerics::{argmax, descending_order, entropy, log_softmax, sample_categorical, softmax_row, Rng};
use crate::sensor::{sense, CandidateSet, InteractionRecord, DEFAULT_KAPPA};
use crate::telemetry::{band_hdi, band_visual_ratio, EpisodeReport, HdiScope, StepTrace, TokenClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Greedy,
    Nucleus,
    Beam,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Greedy => "greedy",
            Strategy::Nucleus => "nucleus",
            Strategy::Beam => "beam",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "greedy" => Ok(Self::Greedy),
            "nucleus" | "sample" => Ok(Self::Nucleus),
            "beam" => Ok(Self::Beam),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodePolicy {
    pub strategy: Strategy,
    pub temperature: f64,
    pub top_p: f64,
    pub beam_width: usize,
    pub max_new_tokens: usize,
    /// Candidates fed to the sensor.
    pub k: usize,
    pub kappa: f64,
    pub alpha: f64,
    pub band: LayerBand,
    pub statistic: BoostStatistic,
    /// Commit the boosted keys/values of a triggered step.
    pub persist_intervention: bool,
    pub hdi_scope: HdiScope,
    pub masking: MaskingOptions,
    pub seed: u64,
}

impl Default for DecodePolicy {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            temperature: 1.0,
            top_p: 1.0,
            beam_width: 1,
            max_new_tokens: 24,
            k: 8,
            kappa: DEFAULT_KAPPA,
            alpha: 0.5,
            band: LayerBand::MIDDLE,
            statistic: BoostStatistic::MeanAbs,
            persist_intervention: true,
            hdi_scope: HdiScope::Center,
            masking: MaskingOptions::default(),
            seed: 0,
        }
    }
}

impl DecodePolicy {
    /// Beam search with the usual width of four.
    pub fn beam() -> Self {
        Self {
            strategy: Strategy::Beam,
            beam_width: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self, weights: &DecoderWeights) -> Result<()> {
        let cfg = &weights.config;
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if self.beam_width == 0 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        if self.k < 2 || self.k > cfg.vocab_size {
            return Err(Error::Config(format!(
                "k must be in [2, {}], got {}",
                cfg.vocab_size, self.k
            )));
        }
        if self.kappa.is_nan() {
            return Err(Error::Config("kappa is NaN".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if self.masking.keep_system_prefix > cfg.max_seq {
            return Err(Error::Config("keep_system_prefix exceeds the sequence limit".into()));
        }
        self.plan(cfg.n_visual_slots).validate(cfg.n_layers)
    }

    fn plan(&self, n_visual: usize) -> InterventionPlan {
        InterventionPlan {
            beta: true,
            alpha: self.alpha,
            visual: 0..n_visual,
            band: Some(self.band),
            statistic: self.statistic,
        }
    }
}

/// What a gate sees before deciding whether to intervene.
#[derive(Debug, Clone, Copy)]
pub struct GateInput<'a> {
    pub step: usize,
    pub full_logits: &'a [f64],
    pub record: &'a InteractionRecord,
    pub entropy: f64,
    pub margin: f64,
}

/// Decides β for one step.
pub trait Gate: Sync {
    fn fire(&self, input: &GateInput<'_>) -> bool;
}

impl<F: Fn(&GateInput<'_>) -> bool + Sync> Gate for F {
    fn fire(&self, input: &GateInput<'_>) -> bool {
        self(input)
    }
}

/// The interaction-variance gate at the policy's threshold.
#[derive(Debug, Clone, Copy, Default)]
pub struct DemandGate;

impl Gate for DemandGate {
    fn fire(&self, input: &GateInput<'_>) -> bool {
        input.record.beta
    }
}

/// Fires on every step (`true`) or never (`false`).
#[derive(Debug, Clone, Copy)]
pub struct FixedGate(pub bool);

impl Gate for FixedGate {
    fn fire(&self, _: &GateInput<'_>) -> bool {
        self.0
    }
}

/// One episode's image, prompt and vocabulary labels.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeInput<'a> {
    pub image: &'a [Vec<f64>],
    pub prompt: &'a [usize],
    /// Class of each token id. Missing entries count as `Other`.
    pub classes: &'a [TokenClass],
}

impl EpisodeInput<'_> {
    pub fn class_of(&self, token: usize) -> TokenClass {
        self.classes.get(token).copied().unwrap_or(TokenClass::Other)
    }
}

/// Everything computed for one step before a token is chosen.
#[derive(Debug, Clone)]
pub struct StepEvaluation {
    pub record: InteractionRecord,
    pub beta: bool,
    pub pre: ForwardResult,
    /// The boosted re-run, when the gate fired.
    pub post: Option<ForwardResult>,
    pub aux: AuxForwards,
    pub entropy: f64,
    pub margin: f64,
}

impl StepEvaluation {
    /// The distribution the step actually decodes from.
    pub fn effective(&self) -> &ForwardResult {
        self.post.as_ref().unwrap_or(&self.pre)
    }
}

fn top_two_margin(logits: &[f64]) -> f64 {
    let order = descending_order(logits);
    match order.as_slice() {
        [a, b, ..] => logits[*a] - logits[*b],
        _ => 0.0,
    }
}

/// Steps 1 to 5 for one set of caches.
pub fn evaluate_step(
    decoder: &Decoder<'_>,
    caches: &mut CoalitionCaches,
    step: usize,
    policy: &DecodePolicy,
    gate: &dyn Gate,
) -> Result<StepEvaluation> {
    let pre = caches.forward(decoder, CoalitionId::Full, None)?;
    let candidates = CandidateSet::top_k(&pre.logits, policy.k)?;
    let aux = caches.auxiliary_logits(decoder)?;
    let record = sense(step, &candidates, &aux, policy.kappa)?;
    let probs = softmax_row(&pre.logits)?;
    let entropy = entropy(&probs);
    let margin = top_two_margin(&pre.logits);
    let beta = gate.fire(&GateInput {
        step,
        full_logits: &pre.logits,
        record: &record,
        entropy,
        margin,
    });
    let post = if beta {
        let plan = policy.plan(decoder.config().n_visual_slots);
        Some(caches.forward(decoder, CoalitionId::Full, Some(&plan))?)
    } else {
        None
    };
    Ok(StepEvaluation {
        record: InteractionRecord { beta, ..record },
        beta,
        pre,
        post,
        aux,
        entropy,
        margin,
    })
}

fn trace_step(
    eval: &StepEvaluation,
    step: usize,
    token: usize,
    query: usize,
    input: &EpisodeInput<'_>,
    policy: &DecodePolicy,
    n_visual: usize,
) -> Result<StepTrace> {
    let hdi_pre = band_hdi(&eval.pre, policy.band, policy.hdi_scope)?;
    let ratio_pre = band_visual_ratio(&eval.pre, policy.band, 0..n_visual)?;
    let (hdi_post, ratio_post) = match &eval.post {
        Some(post) => (
            band_hdi(post, policy.band, policy.hdi_scope)?,
            band_visual_ratio(post, policy.band, 0..n_visual)?,
        ),
        None => (hdi_pre, ratio_pre),
    };
    Ok(StepTrace {
        step,
        token,
        class: input.class_of(token),
        query_class: input.class_of(query),
        beta: eval.beta,
        d: eval.record.variance,
        hdi_pre,
        hdi_post,
        ratio_pre,
        ratio_post,
        fwd_count: 4 + usize::from(eval.beta),
        entropy: eval.entropy,
        margin: eval.margin,
    })
}

/// A running single-hypothesis episode.
pub struct Episode<'w, 'i> {
    decoder: Decoder<'w>,
    caches: CoalitionCaches,
    input: EpisodeInput<'i>,
    policy: DecodePolicy,
    rng: Rng,
    tokens: Vec<usize>,
    traces: Vec<StepTrace>,
    finished: bool,
}

impl<'w, 'i> Episode<'w, 'i> {
    pub fn new(weights: &'w DecoderWeights, input: EpisodeInput<'i>, policy: &DecodePolicy) -> Result<Self> {
        policy.validate(weights)?;
        let mut decoder = Decoder::new(weights);
        let caches = CoalitionCaches::init_episode(&mut decoder, input.image, input.prompt, policy.masking)?;
        Ok(Self {
            decoder,
            caches,
            input,
            policy: policy.clone(),
            rng: Rng::new(policy.seed),
            tokens: Vec::new(),
            traces: Vec::new(),
            finished: false,
        })
    }

    pub fn caches(&self) -> &CoalitionCaches {
        &self.caches
    }

    pub fn decoder(&self) -> &Decoder<'w> {
        &self.decoder
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Run one step and return the chosen token with its trace.
    pub fn decode_step(&mut self, gate: &dyn Gate) -> Result<(usize, StepTrace)> {
        if self.finished {
            return Err(Error::Argument("episode already finished".into()));
        }
        let step = self.tokens.len();
        let query = self.caches.pending_token(CoalitionId::Full);
        let eval = evaluate_step(&self.decoder, &mut self.caches, step, &self.policy, gate)?;
        let logits = &eval.effective().logits;
        let token = match self.policy.strategy {
            Strategy::Greedy | Strategy::Beam => argmax(logits),
            Strategy::Nucleus => {
                let probs = softmax_row(logits)?;
                sample_categorical(&probs, &mut self.rng, self.policy.top_p, self.policy.temperature)?
            }
        };
        let n_visual = self.decoder.config().n_visual_slots;
        let trace = trace_step(&eval, step, token, query, &self.input, &self.policy, n_visual)?;
        self.tokens.push(token);
        self.traces.push(trace.clone());

        let done = token == self.decoder.config().end_token || self.tokens.len() >= self.policy.max_new_tokens;
        if done {
            self.finished = true;
        } else {
            let kv = match (&eval.post, self.policy.persist_intervention) {
                (Some(post), true) => &post.kv,
                _ => &eval.pre.kv,
            };
            self.caches.append_committed_token(kv, &eval.aux, token)?;
        }
        Ok((token, trace))
    }

    pub fn finish(self) -> EpisodeReport {
        EpisodeReport::new(
            self.tokens,
            self.traces,
            self.caches.total_forwards(),
            self.caches.prefill_forwards(),
            self.decoder.vision_encodes(),
        )
    }
}

/// Decode until the end token or `max_new_tokens`, whichever comes first.
/// Beam policies are routed to [`beam_generate`].
pub fn generate(
    weights: &DecoderWeights,
    input: EpisodeInput<'_>,
    policy: &DecodePolicy,
    gate: &dyn Gate,
) -> Result<EpisodeReport> {
    if policy.strategy == Strategy::Beam {
        return beam_generate(weights, input, policy, gate);
    }
    let mut episode = Episode::new(weights, input, policy)?;
    while !episode.is_finished() {
        episode.decode_step(gate)?;
    }
    Ok(episode.finish())
}

#[derive(Clone)]
struct Hypothesis {
    caches: CoalitionCaches,
    tokens: Vec<usize>,
    traces: Vec<StepTrace>,
    log_prob: f64,
    finished: bool,
}

impl Hypothesis {
    fn score(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }
}

struct Expansion {
    parent: usize,
    token: usize,
    log_prob: f64,
    length: usize,
}

impl Expansion {
    fn score(&self) -> f64 {
        self.log_prob / self.length.max(1) as f64
    }
}

/// Length-normalised beam search. Every hypothesis owns its four caches and
/// runs the gate on its own step; scores use the log-probabilities the step
/// actually decoded from. The report's forward counts follow the winning
/// hypothesis' lineage.
pub fn beam_generate(
    weights: &DecoderWeights,
    input: EpisodeInput<'_>,
    policy: &DecodePolicy,
    gate: &dyn Gate,
) -> Result<EpisodeReport> {
    policy.validate(weights)?;
    let mut decoder = Decoder::new(weights);
    let cfg = decoder.config();
    let caches = CoalitionCaches::init_episode(&mut decoder, input.image, input.prompt, policy.masking)?;
    let width = policy.beam_width;
    let mut beams = vec![Hypothesis {
        caches,
        tokens: Vec::new(),
        traces: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];

    for step in 0..policy.max_new_tokens {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let mut evals: Vec<Option<(StepEvaluation, Vec<f64>)>> = Vec::with_capacity(beams.len());
        let mut expansions = Vec::new();
        for (i, hyp) in beams.iter_mut().enumerate() {
            if hyp.finished {
                evals.push(None);
                expansions.push(Expansion {
                    parent: i,
                    token: usize::MAX,
                    log_prob: hyp.log_prob,
                    length: hyp.tokens.len(),
                });
                continue;
            }
            let eval = evaluate_step(&decoder, &mut hyp.caches, step, policy, gate)?;
            let logp = log_softmax(&eval.effective().logits);
            for &tok in descending_order(&logp).iter().take(width) {
                expansions.push(Expansion {
                    parent: i,
                    token: tok,
                    log_prob: hyp.log_prob + logp[tok],
                    length: hyp.tokens.len() + 1,
                });
            }
            evals.push(Some((eval, logp)));
        }

        // Stable sort keeps parent order, then token order, among equal scores.
        expansions.sort_by(|a, b| b.score().total_cmp(&a.score()));
        expansions.truncate(width);

        let mut next = Vec::with_capacity(width);
        for ex in expansions {
            let parent = &beams[ex.parent];
            let Some((eval, _)) = &evals[ex.parent] else {
                next.push(parent.clone());
                continue;
            };
            let mut hyp = parent.clone();
            let query = hyp.caches.pending_token(CoalitionId::Full);
            let trace = trace_step(eval, step, ex.token, query, &input, policy, cfg.n_visual_slots)?;
            hyp.tokens.push(ex.token);
            hyp.traces.push(trace);
            hyp.log_prob = ex.log_prob;
            hyp.finished = ex.token == cfg.end_token || hyp.tokens.len() >= policy.max_new_tokens;
            if !hyp.finished {
                let kv = match (&eval.post, policy.persist_intervention) {
                    (Some(post), true) => &post.kv,
                    _ => &eval.pre.kv,
                };
                hyp.caches.append_committed_token(kv, &eval.aux, ex.token)?;
            }
            next.push(hyp);
        }
        beams = next;
    }

    let best = beams
        .into_iter()
        .reduce(|best, h| if h.score() > best.score() { h } else { best })
        .expect("beam is never empty");
    Ok(EpisodeReport::new(
        best.tokens,
        best.traces,
        best.caches.total_forwards(),
        best.caches.prefill_forwards(),
        decoder.vision_encodes(),
    ))
}
