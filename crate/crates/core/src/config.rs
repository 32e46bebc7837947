//! Flat `key = value` run configuration.
//!
//! Values are resolved in four layers, later layers winning: built-in
//! defaults, a config file, the `CG_SEED` environment variable, then
//! command-line overrides. Unknown keys are rejected at every layer.
//!
//! File syntax: one `key = value` per line; blank lines and lines starting
//! with `#` are ignored.

use std::path::PathBuf;

use crate::decode::DecodePolicy;
use crate::error::{Error, Result};
use crate::harness::{Arm, ScenarioSpec};

/// Environment variable that overrides `seed`.
pub const SEED_ENV: &str = "CG_SEED";

/// Every accepted key with its default and meaning.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("n_classes", "8", "object classes in play"),
    ("drift", "0.4", "drift rate on visual scores per decode step"),
    ("prior", "1.0", "object evidence carried by the scene word"),
    ("clarity_min", "0.5", "lowest per-episode image clarity"),
    ("clarity_max", "1.8", "highest per-episode image clarity"),
    ("slot_noise", "0.05", "per-slot uniform noise on object evidence"),
    ("n_visual_slots", "32", "image slots per episode"),
    ("max_new_tokens", "24", "tokens generated per episode"),
    ("episodes", "500", "episodes per arm"),
    ("seed", "2024", "scenario seed"),
    (
        "gain.visual_score",
        "6",
        "reader score on image slots at a function-word query",
    ),
    (
        "gain.scene_score",
        "6",
        "reader score on the scene word at a function-word query",
    ),
    ("gain.pad_score", "20", "reader score on image slots at a pad query"),
    ("gain.sink_score", "10", "reader score on BOS at other queries"),
    ("gain.lookout_score", "100", "lookout score on image slots"),
    ("gain.anchor_scale", "4", "anchor value relative to a unit RMS"),
    (
        "gain.repeat_score",
        "3",
        "anti-repetition score on earlier same-class words",
    ),
    ("gain.strong_reader", "0.2", "value gain of middle-band readers"),
    ("gain.weak_reader", "0.02", "value gain of other readers"),
    ("gain.object_logit", "10", "logit per unit of object evidence"),
    ("gain.grammar_logit", "30", "logit for the expected next word class"),
    ("gain.repeat_penalty", "8", "logit penalty per unit of copied identity"),
    ("gain.order_bias", "0.3", "logit step ordering words within a class"),
    ("strategy", "greedy", "greedy, nucleus or beam"),
    ("temperature", "1", "sampling temperature"),
    ("top_p", "1", "nucleus mass"),
    ("beam_width", "1", "beam width"),
    ("k", "8", "candidates fed to the sensor"),
    ("kappa", "1.8", "gate threshold on interaction variance (inf disables)"),
    ("alpha", "0.5", "boost strength"),
    ("band", "middle", "boosted layers: shallow, middle, deep or START-END"),
    (
        "statistic",
        "mean_abs",
        "boost statistic: mean_abs, median_abs or max_abs",
    ),
    ("persist_intervention", "true", "commit boosted keys/values"),
    ("hdi_scope", "center", "head divergence layer: center or band_mean"),
    (
        "keep_system_prefix",
        "0",
        "prompt tokens visible in every masked condition",
    ),
    ("arm", "guided", "arm for `run`: baseline, guided or static"),
    ("out_dir", "out", "output directory"),
    ("emit_traces", "true", "write steps.csv"),
    ("emit_report", "true", "write report.json"),
    ("emit_weights", "false", "write weights.cgvw"),
    (
        "weights",
        "",
        "load decoder weights from this file instead of building them",
    ),
    ("jobs", "1", "worker threads"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub spec: ScenarioSpec,
    pub policy: DecodePolicy,
    pub arm: Arm,
    pub out_dir: PathBuf,
    pub emit_traces: bool,
    pub emit_report: bool,
    pub emit_weights: bool,
    pub weights: Option<PathBuf>,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            spec: ScenarioSpec::default(),
            policy: DecodePolicy::default(),
            arm: Arm::Guided,
            out_dir: PathBuf::from("out"),
            emit_traces: true,
            emit_report: true,
            emit_weights: false,
            weights: None,
            jobs: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

impl RunConfig {
    /// Defaults, then `file`, then `env_seed`, then `overrides` in order.
    pub fn resolve(file: Option<&str>, env_seed: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(text) = file {
            cfg.apply_text(text)?;
        }
        if let Some(seed) = env_seed {
            cfg.set("seed", seed)
                .map_err(|e| Error::Config(format!("{SEED_ENV}: {e}")))?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let s = &mut self.spec;
        let g = &mut s.gains;
        let p = &mut self.policy;
        match key {
            "n_classes" => s.n_classes = parse(key, value)?,
            "drift" => s.drift = parse(key, value)?,
            "prior" => s.prior = parse(key, value)?,
            "clarity_min" => s.clarity_min = parse(key, value)?,
            "clarity_max" => s.clarity_max = parse(key, value)?,
            "slot_noise" => s.slot_noise = parse(key, value)?,
            "n_visual_slots" => s.n_visual_slots = parse(key, value)?,
            "max_new_tokens" => s.max_new_tokens = parse(key, value)?,
            "episodes" => s.episodes = parse(key, value)?,
            "seed" => s.seed = parse(key, value)?,
            "gain.visual_score" => g.visual_score = parse(key, value)?,
            "gain.scene_score" => g.scene_score = parse(key, value)?,
            "gain.pad_score" => g.pad_score = parse(key, value)?,
            "gain.sink_score" => g.sink_score = parse(key, value)?,
            "gain.lookout_score" => g.lookout_score = parse(key, value)?,
            "gain.anchor_scale" => g.anchor_scale = parse(key, value)?,
            "gain.repeat_score" => g.repeat_score = parse(key, value)?,
            "gain.strong_reader" => g.strong_reader = parse(key, value)?,
            "gain.weak_reader" => g.weak_reader = parse(key, value)?,
            "gain.object_logit" => g.object_logit = parse(key, value)?,
            "gain.grammar_logit" => g.grammar_logit = parse(key, value)?,
            "gain.repeat_penalty" => g.repeat_penalty = parse(key, value)?,
            "gain.order_bias" => g.order_bias = parse(key, value)?,
            "strategy" => p.strategy = value.parse()?,
            "temperature" => p.temperature = parse(key, value)?,
            "top_p" => p.top_p = parse(key, value)?,
            "beam_width" => p.beam_width = parse(key, value)?,
            "k" => p.k = parse(key, value)?,
            "kappa" => p.kappa = parse(key, value)?,
            "alpha" => p.alpha = parse(key, value)?,
            "band" => p.band = value.parse()?,
            "statistic" => p.statistic = value.parse()?,
            "persist_intervention" => p.persist_intervention = parse_bool(key, value)?,
            "hdi_scope" => p.hdi_scope = value.parse()?,
            "keep_system_prefix" => p.masking.keep_system_prefix = parse(key, value)?,
            "arm" => self.arm = value.parse()?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "emit_traces" => self.emit_traces = parse_bool(key, value)?,
            "emit_report" => self.emit_report = parse_bool(key, value)?,
            "emit_weights" => self.emit_weights = parse_bool(key, value)?,
            "weights" => self.weights = (!value.is_empty()).then(|| PathBuf::from(value)),
            "jobs" => self.jobs = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if !matches!(self.arm, Arm::Baseline | Arm::Guided | Arm::Static) {
            return Err(Error::Config("arm must be baseline, guided or static".into()));
        }
        let weights_shape = crate::decoder::DecoderWeights::zeros(self.spec.decoder_config())?;
        DecodePolicy {
            max_new_tokens: self.spec.max_new_tokens,
            ..self.policy.clone()
        }
        .validate(&weights_shape)
    }

    /// Every key with its current value, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.spec;
        let g = &s.gains;
        let p = &self.policy;
        let values = [
            s.n_classes.to_string(),
            s.drift.to_string(),
            s.prior.to_string(),
            s.clarity_min.to_string(),
            s.clarity_max.to_string(),
            s.slot_noise.to_string(),
            s.n_visual_slots.to_string(),
            s.max_new_tokens.to_string(),
            s.episodes.to_string(),
            s.seed.to_string(),
            g.visual_score.to_string(),
            g.scene_score.to_string(),
            g.pad_score.to_string(),
            g.sink_score.to_string(),
            g.lookout_score.to_string(),
            g.anchor_scale.to_string(),
            g.repeat_score.to_string(),
            g.strong_reader.to_string(),
            g.weak_reader.to_string(),
            g.object_logit.to_string(),
            g.grammar_logit.to_string(),
            g.repeat_penalty.to_string(),
            g.order_bias.to_string(),
            p.strategy.to_string(),
            p.temperature.to_string(),
            p.top_p.to_string(),
            p.beam_width.to_string(),
            p.k.to_string(),
            p.kappa.to_string(),
            p.alpha.to_string(),
            p.band.to_string(),
            p.statistic.to_string(),
            p.persist_intervention.to_string(),
            p.hdi_scope.to_string(),
            p.masking.keep_system_prefix.to_string(),
            self.arm.name().to_string(),
            self.out_dir.display().to_string(),
            self.emit_traces.to_string(),
            self.emit_report.to_string(),
            self.emit_weights.to_string(),
            self.weights
                .as_ref()
                .map(|w| w.display().to_string())
                .unwrap_or_default(),
            self.jobs.to_string(),
        ];
        KEYS.iter().map(|(k, _, _)| *k).zip(values).collect()
    }

    /// The resolved configuration in file syntax; parsing it back gives the
    /// same configuration.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
