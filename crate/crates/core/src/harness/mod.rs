//! Paired experiments on the planted scenario.
//!
//! Every arm decodes the same episodes (image, prompt and sampling seed), so
//! differences between arms come from the gate alone.

mod planted;

pub use planted::*;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::{generate, DecodePolicy, DemandGate, EpisodeInput, FixedGate, GateInput};
use crate::decoder::DecoderWeights;
use crate::error::{Error, Result};
use crate::intervention::{BoostStatistic, LayerBand};
use crate::telemetry::{trigger_stats, ClassTriggers, EpisodeReport, GroundedStep, TokenClass};

/// Which gate decides when to boost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "threshold")]
pub enum Arm {
    /// Never boosts.
    Baseline,
    /// Interaction-variance gate.
    Guided,
    /// Boosts every step.
    Static,
    /// Boosts when the full-distribution entropy exceeds the threshold.
    Entropy(f64),
    /// Boosts when the top-two logit margin is below the threshold.
    Margin(f64),
}

impl Arm {
    pub fn name(&self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Guided => "guided",
            Arm::Static => "static",
            Arm::Entropy(_) => "entropy_gate",
            Arm::Margin(_) => "margin_gate",
        }
    }

    fn run(&self, weights: &DecoderWeights, input: EpisodeInput<'_>, policy: &DecodePolicy) -> Result<EpisodeReport> {
        match *self {
            Arm::Baseline => generate(weights, input, policy, &FixedGate(false)),
            Arm::Guided => generate(weights, input, policy, &DemandGate),
            Arm::Static => generate(weights, input, policy, &FixedGate(true)),
            Arm::Entropy(t) => generate(weights, input, policy, &move |g: &GateInput<'_>| g.entropy > t),
            Arm::Margin(t) => generate(weights, input, policy, &move |g: &GateInput<'_>| g.margin < t),
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses the threshold-free arms.
impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "baseline" => Ok(Arm::Baseline),
            "guided" => Ok(Arm::Guided),
            "static" => Ok(Arm::Static),
            other => Err(Error::Config(format!("unknown arm {other:?}"))),
        }
    }
}

/// Aggregates of one arm over all episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub episodes: usize,
    pub content_steps: usize,
    pub hallucinations: usize,
    pub hallucination_rate: f64,
    pub trigger_rate: f64,
    /// Mean of per-episode Distinct-2.
    pub distinct2: f64,
    pub total_forwards: usize,
    pub class_triggers: Vec<ClassTriggers>,
    /// Medians over triggered steps; `None` when nothing fired.
    pub triggered_hdi_pre: Option<f64>,
    pub triggered_hdi_post: Option<f64>,
    pub triggered_ratio_pre: Option<f64>,
    pub triggered_ratio_post: Option<f64>,
    pub mean_hdi_delta: Option<f64>,
    #[serde(skip)]
    pub reports: Vec<EpisodeReport>,
}

impl ArmSummary {
    fn new(arm: Arm, reports: Vec<EpisodeReport>) -> Self {
        let content_steps: usize = reports.iter().map(|r| r.grounded.len()).sum();
        let hallucinations: usize = reports.iter().map(EpisodeReport::hallucinations).sum();
        let steps: usize = reports.iter().map(|r| r.steps.len()).sum();
        let triggers: usize = reports.iter().map(EpisodeReport::triggers).sum();
        let d2: Vec<f64> = reports.iter().filter_map(|r| r.distinct2).collect();
        let fired: Vec<_> = reports.iter().flat_map(|r| &r.steps).filter(|s| s.beta).collect();
        let collect = |f: fn(&crate::telemetry::StepTrace) -> f64| fired.iter().map(|s| f(s)).collect::<Vec<_>>();
        let hdi_delta = collect(|s| s.hdi_post - s.hdi_pre);
        Self {
            arm,
            episodes: reports.len(),
            content_steps,
            hallucinations,
            hallucination_rate: ratio(hallucinations, content_steps),
            trigger_rate: ratio(triggers, steps),
            distinct2: mean(&d2).unwrap_or(0.0),
            total_forwards: reports.iter().map(|r| r.total_forwards).sum(),
            class_triggers: trigger_stats(reports.iter().flat_map(|r| &r.steps)),
            triggered_hdi_pre: median(collect(|s| s.hdi_pre)),
            triggered_hdi_post: median(collect(|s| s.hdi_post)),
            triggered_ratio_pre: median(collect(|s| s.ratio_pre)),
            triggered_ratio_post: median(collect(|s| s.ratio_post)),
            mean_hdi_delta: mean(&hdi_delta),
            reports,
        }
    }

    pub fn class_rate(&self, class: TokenClass) -> f64 {
        self.class_triggers
            .iter()
            .find(|c| c.class == class)
            .map_or(0.0, |c| c.rate)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

pub fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// A planted scenario ready to run: weights plus the shared episode set.
pub struct Experiment {
    pub spec: ScenarioSpec,
    pub weights: DecoderWeights,
    pub episodes: Vec<PlantedEpisode>,
    classes: Vec<TokenClass>,
    jobs: usize,
}

impl Experiment {
    pub fn new(spec: &ScenarioSpec, jobs: usize) -> Result<Self> {
        let weights = build_planted_decoder(spec)?;
        let episodes = (0..spec.episodes).map(|i| build_episode(spec, i)).collect();
        Ok(Self {
            spec: spec.clone(),
            weights,
            episodes,
            classes: token_classes(),
            jobs: jobs.max(1),
        })
    }

    /// Same episodes, different weights (for example loaded from a file).
    pub fn with_weights(mut self, weights: DecoderWeights) -> Result<Self> {
        weights.validate()?;
        if weights.config != self.spec.decoder_config() {
            return Err(Error::Config(
                "weights do not match the scenario's decoder shape".into(),
            ));
        }
        self.weights = weights;
        Ok(self)
    }

    /// Policy with the scenario's length and each episode's sampling seed.
    fn episode_policy(&self, policy: &DecodePolicy, ep: &PlantedEpisode) -> DecodePolicy {
        DecodePolicy {
            max_new_tokens: self.spec.max_new_tokens,
            seed: ep.sample_seed,
            ..policy.clone()
        }
    }

    pub fn run_episode(&self, ep: &PlantedEpisode, policy: &DecodePolicy, arm: Arm) -> Result<EpisodeReport> {
        let input = EpisodeInput {
            image: &ep.image,
            prompt: &ep.prompt,
            classes: &self.classes,
        };
        let mut report = arm.run(&self.weights, input, &self.episode_policy(policy, ep))?;
        report.grounded = grounded_steps(&report, &ep.prompt, ep.truth);
        Ok(report)
    }

    pub fn run_arm(&self, policy: &DecodePolicy, arm: Arm) -> Result<ArmSummary> {
        self.run_arm_on(&self.episodes, policy, arm)
    }

    fn run_arm_on(&self, episodes: &[PlantedEpisode], policy: &DecodePolicy, arm: Arm) -> Result<ArmSummary> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
        let reports = pool.install(|| {
            episodes
                .par_iter()
                .map(|ep| self.run_episode(ep, policy, arm))
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(ArmSummary::new(arm, reports))
    }

    /// Threshold among `candidates` whose own gated run fires closest to
    /// `target`. Candidates must be ordered so the firing rate falls along
    /// the list. The search runs on the first `CALIBRATION_EPISODES`.
    pub fn calibrate_gate(
        &self,
        policy: &DecodePolicy,
        candidates: &[f64],
        target: f64,
        arm: fn(f64) -> Arm,
    ) -> Result<f64> {
        if candidates.is_empty() {
            return Err(Error::Argument("no candidate thresholds".into()));
        }
        let episodes = &self.episodes[..self.episodes.len().min(CALIBRATION_EPISODES)];
        let mut rates = BTreeMap::new();
        let mut rate_at = |i: usize| -> Result<f64> {
            if let Some(&r) = rates.get(&i) {
                return Ok(r);
            }
            let r = self.run_arm_on(episodes, policy, arm(candidates[i]))?.trigger_rate;
            rates.insert(i, r);
            Ok(r)
        };
        let (mut lo, mut hi) = (0, candidates.len() - 1);
        rate_at(lo)?;
        rate_at(hi)?;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if rate_at(mid)? >= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let best = rates
            .iter()
            .min_by(|a, b| (a.1 - target).abs().total_cmp(&(b.1 - target).abs()))
            .map(|(&i, _)| i)
            .unwrap_or(lo);
        Ok(candidates[best])
    }

    /// Baseline, guided and static arms, plus entropy and margin gates whose
    /// thresholds are calibrated so that they fire as often as the guided
    /// gate on their own trajectories.
    pub fn run_comparison(&self, policy: &DecodePolicy) -> Result<RunComparison> {
        let baseline = self.run_arm(policy, Arm::Baseline)?;
        let guided = self.run_arm(policy, Arm::Guided)?;
        let static_arm = self.run_arm(policy, Arm::Static)?;
        let steps: Vec<_> = baseline.reports.iter().flat_map(|r| &r.steps).collect();
        let target = guided.trigger_rate;
        let entropies = threshold_candidates(steps.iter().map(|s| s.entropy).collect());
        let mut margins = threshold_candidates(steps.iter().map(|s| s.margin).collect());
        margins.reverse();
        let entropy_threshold = self.calibrate_gate(policy, &entropies, target, Arm::Entropy)?;
        let margin_threshold = self.calibrate_gate(policy, &margins, target, Arm::Margin)?;
        let entropy = self.run_arm(policy, Arm::Entropy(entropy_threshold))?;
        let margin = self.run_arm(policy, Arm::Margin(margin_threshold))?;
        Ok(RunComparison {
            spec: self.spec.clone(),
            policy: policy.clone(),
            arms: vec![baseline, guided, static_arm, entropy, margin],
        })
    }

    pub fn sweep(&self, policy: &DecodePolicy, param: SweepParam, grid: &[String]) -> Result<SweepTable> {
        if grid.is_empty() {
            return Err(Error::Argument("empty sweep grid".into()));
        }
        let baseline = self.run_arm(policy, Arm::Baseline)?;
        let mut rows = Vec::with_capacity(grid.len());
        for value in grid {
            let p = param.apply(policy, value)?;
            let arm = self.run_arm(&p, Arm::Guided)?;
            rows.push(SweepRow {
                value: value.clone(),
                hallucination_rate: arm.hallucination_rate,
                reduction: relative_reduction(baseline.hallucination_rate, arm.hallucination_rate),
                trigger_rate: arm.trigger_rate,
                distinct2: arm.distinct2,
            });
        }
        Ok(SweepTable {
            param,
            baseline_hallucination_rate: baseline.hallucination_rate,
            baseline_distinct2: baseline.distinct2,
            rows,
        })
    }
}

/// Content steps are those whose query is a function word; each is scored
/// against the true class.
fn grounded_steps(report: &EpisodeReport, prompt: &[usize], truth: GroundTruth) -> Vec<GroundedStep> {
    let last_prompt = *prompt.last().expect("prompt is non-empty");
    report
        .tokens
        .iter()
        .enumerate()
        .filter(|&(t, _)| {
            let query = if t == 0 { last_prompt } else { report.tokens[t - 1] };
            is_function_word(query)
        })
        .map(|(t, &emitted)| GroundedStep {
            step: t,
            expected: truth.content_token(),
            emitted,
        })
        .collect()
}

/// Episodes used when calibrating entropy and margin gate thresholds.
pub const CALIBRATION_EPISODES: usize = 100;

/// Ascending, deduplicated percentiles of `values`, bracketed by infinities
/// so that both "always fire" and "never fire" are reachable.
pub fn threshold_candidates(mut values: Vec<f64>) -> Vec<f64> {
    values.retain(|v| v.is_finite());
    values.sort_by(f64::total_cmp);
    let mut out = vec![f64::NEG_INFINITY];
    if !values.is_empty() {
        let last = values.len() - 1;
        out.extend((0..=100).map(|p| values[p * last / 100]));
    }
    out.push(f64::INFINITY);
    out.dedup();
    out
}

pub fn relative_reduction(baseline: f64, treated: f64) -> f64 {
    if baseline == 0.0 {
        0.0
    } else {
        (baseline - treated) / baseline
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    pub spec: ScenarioSpec,
    pub policy: DecodePolicy,
    pub arms: Vec<ArmSummary>,
}

impl RunComparison {
    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Kappa,
    Alpha,
    Band,
    Statistic,
}

impl SweepParam {
    fn apply(self, policy: &DecodePolicy, value: &str) -> Result<DecodePolicy> {
        let mut p = policy.clone();
        let number = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad {self} value {v:?}")))
        };
        match self {
            SweepParam::Kappa => p.kappa = number(value)?,
            SweepParam::Alpha => p.alpha = number(value)?,
            SweepParam::Band => p.band = value.parse::<LayerBand>()?,
            SweepParam::Statistic => p.statistic = value.parse::<BoostStatistic>()?,
        }
        Ok(p)
    }

    pub fn default_grid(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepParam::Kappa => &["0.2", "0.6", "1.0", "1.4", "1.8", "2.2", "2.6", "4", "8", "16", "32"],
            SweepParam::Alpha => &["0", "0.1", "0.25", "0.5", "0.75", "1"],
            SweepParam::Band => &["shallow", "middle", "deep"],
            SweepParam::Statistic => &["mean_abs", "median_abs", "max_abs"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::Kappa => "kappa",
            SweepParam::Alpha => "alpha",
            SweepParam::Band => "band",
            SweepParam::Statistic => "statistic",
        })
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "kappa" => Ok(Self::Kappa),
            "alpha" => Ok(Self::Alpha),
            "band" | "layer_band" => Ok(Self::Band),
            "statistic" | "stat" => Ok(Self::Statistic),
            other => Err(Error::Config(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub hallucination_rate: f64,
    pub reduction: f64,
    pub trigger_rate: f64,
    pub distinct2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub baseline_hallucination_rate: f64,
    pub baseline_distinct2: f64,
    pub rows: Vec<SweepRow>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_even_and_empty() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }

    #[test]
    fn threshold_candidates_are_sorted_and_bracketed() {
        let c = threshold_candidates(vec![3.0, 1.0, 1.0, f64::NAN, 2.0]);
        assert_eq!(c, vec![f64::NEG_INFINITY, 1.0, 2.0, 3.0, f64::INFINITY]);
        assert_eq!(threshold_candidates(vec![]), vec![f64::NEG_INFINITY, f64::INFINITY]);
    }

    #[test]
    fn calibrated_gates_match_the_guided_trigger_rate() {
        let spec = ScenarioSpec {
            episodes: 40,
            ..ScenarioSpec::default()
        };
        let exp = Experiment::new(&spec, 1).unwrap();
        let cmp = exp.run_comparison(&DecodePolicy::default()).unwrap();
        let guided = cmp.arm("guided").unwrap().trigger_rate;
        for name in ["entropy_gate", "margin_gate"] {
            let rate = cmp.arm(name).unwrap().trigger_rate;
            assert!((rate - guided).abs() < 0.1, "{name} fires at {rate}, guided at {guided}");
        }
    }

    #[test]
    fn sweep_values_parse() {
        let p = DecodePolicy::default();
        assert_eq!(SweepParam::Band.apply(&p, "deep").unwrap().band, LayerBand::DEEP);
        assert_eq!(SweepParam::Kappa.apply(&p, "inf").unwrap().kappa, f64::INFINITY);
        assert!(SweepParam::Alpha.apply(&p, "x").is_err());
    }
}
