//! End-to-end checks behind the `verify` subcommand.
//!
//! Each check either passes with a short detail line or fails with the reason.
//! Checks can be filtered by name or group.

use std::path::PathBuf;
use std::time::Instant;

use crate::coalitions::CoalitionId;
use crate::config::RunConfig;
use crate::decode::{generate, DecodePolicy, DemandGate, Episode, EpisodeInput, FixedGate, Strategy};
use crate::decoder::{Decoder, DecoderConfig, DecoderWeights, KvCache};
use crate::error::{Error, Result};
use crate::harness::{relative_reduction, token_classes, Experiment, RunComparison, ScenarioSpec, SweepParam};
use crate::intervention::{fci_boost, InterventionPlan, LayerBand};
use crate::numerics::{variance, Rng};
use crate::runner;
use crate::sensor::{gate, harsanyi_interaction, sense, sweep_kappa, AuxLogits, CandidateSet};
use crate::telemetry::{hdi, TokenClass};
use crate::weights_file;

/// `(name, group, description)` of every check, in run order.
pub const CHECKS: &[(&str, &str, &str)] = &[
    (
        "weights_file",
        "weights",
        "weights load and round-trip through the binary format",
    ),
    (
        "harsanyi_exact",
        "harsanyi",
        "interaction arithmetic and additive-head cancellation",
    ),
    (
        "variance_gate",
        "harsanyi",
        "interaction variance, strict gate and gate nesting",
    ),
    (
        "boost_locality",
        "boost",
        "boost arithmetic, changed-entry set and row normalization",
    ),
    (
        "head_divergence",
        "hdi",
        "head divergence values and permutation invariance",
    ),
    (
        "coalition_accounting",
        "accounting",
        "one vision encode, forward counts, batched aux pass",
    ),
    (
        "non_interference",
        "non_interference",
        "closed gate or zero boost leave tokens unchanged",
    ),
    (
        "planted_effect",
        "planted",
        "calibration, hallucination reduction and diversity",
    ),
    (
        "mechanism_direction",
        "planted",
        "head divergence, visual ratio and trigger classes",
    ),
    ("sweep_shapes", "sweeps", "kappa curve shape and layer-band ranking"),
    (
        "determinism",
        "determinism",
        "repeated runs give byte-identical artifacts",
    ),
];

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Check names or groups to run; empty runs everything.
    pub only: Vec<String>,
    /// Weights file to check and use instead of the planted construction.
    pub weights: Option<PathBuf>,
    /// Episodes for the planted checks.
    pub episodes: usize,
    pub jobs: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            only: Vec::new(),
            weights: None,
            episodes: ScenarioSpec::default().episodes,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub group: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Outcome = std::result::Result<String, String>;

struct Context {
    spec: ScenarioSpec,
    weights: std::result::Result<DecoderWeights, String>,
    weights_path: Option<PathBuf>,
    jobs: usize,
    comparison: Option<RunComparison>,
}

impl Context {
    fn experiment(&self) -> std::result::Result<Experiment, String> {
        let weights = self.weights.clone().map_err(|e| format!("weights unavailable: {e}"))?;
        Experiment::new(&self.spec, self.jobs)
            .and_then(|e| e.with_weights(weights))
            .map_err(|e| e.to_string())
    }

    fn comparison(&mut self) -> std::result::Result<&RunComparison, String> {
        if self.comparison.is_none() {
            let exp = self.experiment()?;
            self.comparison = Some(
                exp.run_comparison(&DecodePolicy::default())
                    .map_err(|e| e.to_string())?,
            );
        }
        Ok(self.comparison.as_ref().expect("set above"))
    }
}

fn err(e: Error) -> String {
    e.to_string()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Run the selected checks in order. Errors only on an unknown filter.
pub fn run(opts: &VerifyOptions) -> Result<Vec<CheckOutcome>> {
    for f in &opts.only {
        if !CHECKS.iter().any(|(n, g, _)| n == f || g == f) {
            return Err(Error::Config(format!("unknown check or group {f:?}")));
        }
    }
    let spec = ScenarioSpec {
        episodes: opts.episodes,
        ..ScenarioSpec::default()
    };
    spec.validate()?;
    let weights = match &opts.weights {
        Some(path) => weights_file::load(path).map_err(err),
        None => crate::harness::build_planted_decoder(&spec).map_err(err),
    };
    let mut ctx = Context {
        spec,
        weights,
        weights_path: opts.weights.clone(),
        jobs: opts.jobs.max(1),
        comparison: None,
    };
    let fns: [fn(&mut Context) -> Outcome; 11] = [
        check_weights_file,
        check_harsanyi_exact,
        check_variance_gate,
        check_boost_locality,
        check_head_divergence,
        check_coalition_accounting,
        check_non_interference,
        check_planted_effect,
        check_mechanism_direction,
        check_sweep_shapes,
        check_determinism,
    ];
    let selected = |name: &str, group: &str| opts.only.is_empty() || opts.only.iter().any(|f| f == name || f == group);
    Ok(CHECKS
        .iter()
        .zip(fns)
        .filter(|((name, group, _), _)| selected(name, group))
        .map(|(&(name, group, _), f)| {
            let t0 = Instant::now();
            let outcome = f(&mut ctx);
            let seconds = t0.elapsed().as_secs_f64();
            let (passed, detail) = match outcome {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckOutcome {
                name,
                group,
                passed,
                detail,
                seconds,
            }
        })
        .collect())
}

/// One row per check: status, name, seconds, detail.
pub fn format_table(outcomes: &[CheckOutcome]) -> String {
    let mut out = format!("{:<6} {:<22} {:>8}  {}\n", "status", "check", "seconds", "detail");
    for o in outcomes {
        out.push_str(&format!(
            "{:<6} {:<22} {:>8.2}  {}\n",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.seconds,
            o.detail
        ));
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    out.push_str(&format!("{} checks, {} failed\n", outcomes.len(), failed));
    out
}

fn check_weights_file(ctx: &mut Context) -> Outcome {
    let w = ctx.weights.as_ref().map_err(|e| match &ctx.weights_path {
        Some(p) => format!("{}: {e}", p.display()),
        None => e.clone(),
    })?;
    let back = weights_file::from_bytes(&weights_file::to_bytes(w).map_err(err)?).map_err(err)?;
    ensure(&back == w, || "round trip changed the weights".into())?;
    Ok(match &ctx.weights_path {
        Some(p) => format!("{} loads and round-trips", p.display()),
        None => "planted weights round-trip exactly".into(),
    })
}

fn check_harsanyi_exact(_: &mut Context) -> Outcome {
    let i = harsanyi_interaction(5.0, 2.0, 1.5, 0.5).map_err(err)?;
    ensure(i == 2.0, || format!("(5, 2, 1.5, 0.5) gave {i}"))?;
    let mut rng = Rng::new(11);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = 8;
        let mut draw = || (0..n).map(|_| rng.uniform_range(-5.0, 5.0)).collect::<Vec<_>>();
        let (image, text, bias) = (draw(), draw(), draw());
        let full: Vec<f64> = (0..n).map(|y| image[y] + text[y] + bias[y]).collect();
        let aux = AuxLogits {
            v_only: (0..n).map(|y| image[y] + bias[y]).collect(),
            t_only: (0..n).map(|y| text[y] + bias[y]).collect(),
            none: bias.clone(),
        };
        let c = CandidateSet::top_k(&full, n).map_err(err)?;
        let r = sense(0, &c, &aux, 0.0).map_err(err)?;
        worst = r.interactions.iter().fold(worst, |m, v| m.max(v.abs()));
    }
    ensure(worst < 1e-9, || format!("additive construction left |I| = {worst:e}"))?;
    Ok(format!("I(5, 2, 1.5, 0.5) = 2; additive max |I| = {worst:.1e}"))
}

fn check_variance_gate(_: &mut Context) -> Outcome {
    let d = variance(&[0.0, 3.0]).map_err(err)?;
    ensure(d == 2.25, || format!("D([0, 3]) = {d}"))?;
    ensure(gate(d, 1.8) && !gate(d, 2.25), || "threshold is not strict".into())?;
    let mut rng = Rng::new(12);
    for trial in 0..1000 {
        let trace: Vec<f64> = (0..20).map(|_| rng.uniform_range(0.0, 5.0)).collect();
        for _ in 0..10 {
            let mut grid: Vec<f64> = (0..8).map(|_| rng.uniform_range(0.0, 5.0)).collect();
            grid.sort_by(f64::total_cmp);
            let curve = sweep_kappa(&trace, &grid).map_err(err)?;
            ensure(curve.windows(2).all(|w| w[1].1 <= w[0].1), || {
                format!("trigger curve rises in trial {trial}")
            })?;
            for w in grid.windows(2) {
                ensure(trace.iter().all(|&x| !gate(x, w[1]) || gate(x, w[0])), || {
                    format!("gate sets do not nest in trial {trial}")
                })?;
            }
        }
    }
    Ok("D([0, 3]) = 2.25; nesting holds on 1000 traces x 10 grids".into())
}

fn random_config(rng: &mut Rng) -> DecoderConfig {
    let n_layers = 3 + rng.below(4);
    let start = rng.below(n_layers);
    let end = start + rng.below(n_layers - start);
    DecoderConfig {
        n_layers,
        n_heads: 2,
        d_model: 8,
        vocab_size: 12,
        n_visual_slots: 2 + rng.below(3),
        max_seq: 16,
        layer_band: LayerBand::new(start, end).expect("ordered band"),
        pad_token: 0,
        end_token: 1,
    }
}

fn check_boost_locality(_: &mut Context) -> Outcome {
    let rows = fci_boost(
        &[vec![0.4], vec![-0.2]],
        &InterventionPlan::new(0.5, 0..1, LayerBand::new(0, 0).map_err(err)?),
    )
    .map_err(err)?;
    ensure(
        (rows[0][0] - 0.55).abs() < 1e-12 && (rows[1][0] + 0.05).abs() < 1e-12,
        || format!("worked example gave ({}, {})", rows[0][0], rows[1][0]),
    )?;

    let mut rng = Rng::new(13);
    for trial in 0..100 {
        let cfg = random_config(&mut rng);
        let weights = DecoderWeights::random(cfg.clone(), rng.next_u64()).map_err(err)?;
        let dec = Decoder::new(&weights);
        let mut cache = KvCache::new(&cfg);
        let len = cfg.n_visual_slots + 1 + rng.below(5);
        for _ in 0..len {
            let e = weights.embed_token(rng.below(cfg.vocab_size)).map_err(err)?;
            dec.forward_step(&mut cache, &e, None, true).map_err(err)?;
        }
        let band = cfg.layer_band;
        let plan = InterventionPlan::new(rng.uniform_range(0.1, 2.0), 0..cfg.n_visual_slots, band);
        let e = weights.embed_token(rng.below(cfg.vocab_size)).map_err(err)?;
        let before = cache.clone();
        let base = dec.forward_step(&mut cache, &e, None, false).map_err(err)?;
        let boosted = dec.forward_step(&mut cache, &e, Some(&plan), false).map_err(err)?;
        ensure(cache == before, || format!("trial {trial}: cache history changed"))?;

        let width = base.width;
        for l in 0..cfg.n_layers {
            for h in 0..cfg.n_heads {
                for r in [&base, &boosted] {
                    let s: f64 = r.attention_row(l, h).iter().sum();
                    ensure((s - 1.0).abs() < 1e-9, || format!("trial {trial}: row sum {s}"))?;
                }
                if l > band.start {
                    continue;
                }
                let changed: Vec<usize> = (0..width)
                    .filter(|&j| base.score_row(l, h)[j].to_bits() != boosted.score_row(l, h)[j].to_bits())
                    .collect();
                let expected: Vec<usize> = if l == band.start {
                    (0..cfg.n_visual_slots).collect()
                } else {
                    Vec::new()
                };
                ensure(changed == expected, || {
                    format!("trial {trial}: layer {l} head {h} changed {changed:?}, expected {expected:?}")
                })?;
            }
        }
    }
    Ok("worked example exact; 100 random decoders change only boosted visual scores".into())
}

fn check_head_divergence(_: &mut Context) -> Outcome {
    let same = hdi(&[vec![0.2, 0.3, 0.5], vec![0.2, 0.3, 0.5]]).map_err(err)?;
    ensure(same.abs() < 1e-12, || format!("identical heads gave {same}"))?;
    let pair = hdi(&[vec![0.5, 0.5], vec![0.9, 0.1]]).map_err(err)?;
    // Mean of the two directed divergences, written out by hand.
    let kl = |p: [f64; 2], q: [f64; 2]| p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln();
    let oracle = 0.5 * (kl([0.5, 0.5], [0.9, 0.1]) + kl([0.9, 0.1], [0.5, 0.5]));
    ensure((pair - 0.43945).abs() < 1e-4 && (pair - oracle).abs() < 1e-12, || {
        format!("pair gave {pair}, oracle {oracle}")
    })?;
    let mut rng = Rng::new(14);
    for trial in 0..100 {
        let heads: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let raw: Vec<f64> = (0..6).map(|_| rng.uniform_range(0.01, 1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let mut shuffled = heads.clone();
        shuffled.rotate_left(1 + rng.below(3));
        shuffled.swap(0, 2);
        let (a, b) = (hdi(&heads).map_err(err)?, hdi(&shuffled).map_err(err)?);
        ensure((a - b).abs() < 1e-12, || format!("trial {trial}: {a} vs {b}"))?;
    }
    Ok(format!("identical heads 0; pair {pair:.5}; permutation invariant"))
}

fn check_coalition_accounting(ctx: &mut Context) -> Outcome {
    let exp = ctx.experiment()?;
    let classes = token_classes();
    let policy = DecodePolicy {
        max_new_tokens: exp.spec.max_new_tokens,
        ..DecodePolicy::default()
    };
    let n = exp.episodes.len().min(20);
    for ep in &exp.episodes[..n] {
        let input = EpisodeInput {
            image: &ep.image,
            prompt: &ep.prompt,
            classes: &classes,
        };
        let mut episode = Episode::new(&exp.weights, input, &policy).map_err(err)?;
        let mut fired = 0;
        while !episode.is_finished() {
            if ep.index < 3 {
                let mut a = episode.caches().clone();
                let mut b = a.clone();
                let batched = a.auxiliary_logits(episode.decoder()).map_err(err)?;
                let sequential = b.auxiliary_logits_sequential(episode.decoder()).map_err(err)?;
                for id in CoalitionId::AUXILIARY {
                    let bits = |l: &[f64]| l.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                    ensure(bits(batched.logits(id)) == bits(sequential.logits(id)), || {
                        format!("episode {}: batched {id:?} logits differ", ep.index)
                    })?;
                }
            }
            let (_, trace) = episode.decode_step(&DemandGate).map_err(err)?;
            fired += usize::from(trace.beta);
        }
        let report = episode.finish();
        ensure(report.vision_encodes == 1, || {
            format!("episode {}: {} vision encodes", ep.index, report.vision_encodes)
        })?;
        let expected = 4 * report.steps.len() + fired;
        ensure(report.total_forwards == expected, || {
            format!(
                "episode {}: {} forwards, expected {expected}",
                ep.index, report.total_forwards
            )
        })?;
    }
    Ok(format!(
        "{n} episodes: 1 encode, 4 per step plus 1 per trigger; batched equals sequential"
    ))
}

fn check_non_interference(ctx: &mut Context) -> Outcome {
    let exp = ctx.experiment()?;
    let classes = token_classes();
    let n = exp.episodes.len().min(20);
    for ep in &exp.episodes[..n] {
        let input = EpisodeInput {
            image: &ep.image,
            prompt: &ep.prompt,
            classes: &classes,
        };
        let policy = DecodePolicy {
            strategy: Strategy::Nucleus,
            top_p: 0.9,
            max_new_tokens: exp.spec.max_new_tokens,
            seed: ep.sample_seed,
            ..DecodePolicy::default()
        };
        let base = generate(&exp.weights, input, &policy, &FixedGate(false)).map_err(err)?;
        let closed = DecodePolicy {
            kappa: f64::INFINITY,
            ..policy.clone()
        };
        let zero = DecodePolicy { alpha: 0.0, ..policy };
        for (label, p) in [("kappa = inf", closed), ("alpha = 0", zero)] {
            let r = generate(&exp.weights, input, &p, &DemandGate).map_err(err)?;
            ensure(r.tokens == base.tokens, || {
                format!("episode {}: {label} changed tokens", ep.index)
            })?;
        }
    }
    Ok(format!("{n} paired seeds identical under kappa = inf and alpha = 0"))
}

fn check_planted_effect(ctx: &mut Context) -> Outcome {
    let cmp = ctx.comparison()?;
    let arm = |n: &str| cmp.arm(n).ok_or_else(|| format!("missing arm {n}"));
    let (base, guided, stat) = (arm("baseline")?, arm("guided")?, arm("static")?);
    let reduction = relative_reduction(base.hallucination_rate, guided.hallucination_rate);
    let detail = format!(
        "baseline {:.3}, guided {:.3} (reduction {:.1}%), distinct2 baseline {:.3} guided {:.3} static {:.3}",
        base.hallucination_rate,
        guided.hallucination_rate,
        100.0 * reduction,
        base.distinct2,
        guided.distinct2,
        stat.distinct2
    );
    ensure((0.4..=0.8).contains(&base.hallucination_rate), || {
        format!("calibration off: {detail}")
    })?;
    ensure(reduction >= 0.5, || format!("reduction below 50%: {detail}"))?;
    ensure(stat.distinct2 < guided.distinct2, || {
        format!("static not below guided: {detail}")
    })?;
    ensure(
        (guided.distinct2 - base.distinct2).abs() <= 0.1 * base.distinct2,
        || format!("guided diversity off baseline: {detail}"),
    )?;
    Ok(detail)
}

fn check_mechanism_direction(ctx: &mut Context) -> Outcome {
    let cmp = ctx.comparison()?;
    let g = cmp.arm("guided").ok_or("missing guided arm")?;
    let need = |v: Option<f64>, what: &str| v.ok_or_else(|| format!("no triggered steps for {what}"));
    let (hdi_pre, hdi_post) = (need(g.triggered_hdi_pre, "hdi")?, need(g.triggered_hdi_post, "hdi")?);
    let (r_pre, r_post) = (
        need(g.triggered_ratio_pre, "ratio")?,
        need(g.triggered_ratio_post, "ratio")?,
    );
    let (content, function) = (g.class_rate(TokenClass::Content), g.class_rate(TokenClass::Function));
    let detail = format!(
        "hdi {hdi_pre:.3} -> {hdi_post:.3}, ratio {r_pre:.3} -> {r_post:.3}, trigger content {content:.3} function {function:.3}"
    );
    ensure(hdi_post < hdi_pre, || format!("hdi did not fall: {detail}"))?;
    ensure(r_post > r_pre, || format!("ratio did not rise: {detail}"))?;
    ensure(content > function, || format!("content not above function: {detail}"))?;
    Ok(detail)
}

fn check_sweep_shapes(ctx: &mut Context) -> Outcome {
    let exp = ctx.experiment()?;
    let policy = DecodePolicy::default();
    let kappa = exp
        .sweep(&policy, SweepParam::Kappa, &SweepParam::Kappa.default_grid())
        .map_err(err)?;
    ensure(
        kappa.rows.windows(2).all(|w| w[1].trigger_rate <= w[0].trigger_rate),
        || "trigger rate rises along the kappa grid".into(),
    )?;
    let plateau = kappa
        .rows
        .windows(2)
        .filter(|w| (w[1].trigger_rate - w[0].trigger_rate).abs() < 0.05 && w.iter().all(|r| r.reduction >= 0.5))
        .map(|w| (w[0].value.clone(), w[1].value.clone()))
        .collect::<Vec<_>>();
    let (lo, hi) = match (plateau.first(), plateau.last()) {
        (Some(a), Some(b)) => (a.0.clone(), b.1.clone()),
        _ => return Err("no kappa interval with flat trigger rate and persistent reduction".into()),
    };
    let band = exp
        .sweep(
            &policy,
            SweepParam::Band,
            &["shallow".into(), "middle".into(), "deep".into()],
        )
        .map_err(err)?;
    let rate = |name: &str| band.rows.iter().find(|r| r.value == name).map(|r| r.hallucination_rate);
    let (s, m, d) = (rate("shallow"), rate("middle"), rate("deep"));
    let (Some(s), Some(m), Some(d)) = (s, m, d) else {
        return Err("band sweep incomplete".into());
    };
    let detail =
        format!("plateau touches kappa in [{lo}, {hi}]; hallucination shallow {s:.3} middle {m:.3} deep {d:.3}");
    ensure(m < s && m < d, || format!("middle band not best: {detail}"))?;
    Ok(detail)
}

fn check_determinism(ctx: &mut Context) -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.spec.episodes = ctx.spec.episodes.min(20);
    cfg.emit_weights = true;
    cfg.weights = ctx.weights_path.clone();
    cfg.jobs = ctx.jobs;
    let a = runner::run(&cfg).map_err(err)?;
    let b = runner::run(&cfg).map_err(err)?;
    for ((name, x), (_, y)) in a.files.iter().zip(&b.files) {
        ensure(x == y, || format!("{name} differs between runs"))?;
    }
    ensure(a.files.len() == b.files.len(), || "file sets differ".into())?;
    let bytes: usize = a.files.iter().map(|(_, f)| f.len()).sum();
    Ok(format!("{} files, {bytes} bytes, identical across runs", a.files.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn only(names: &[&str]) -> VerifyOptions {
        VerifyOptions {
            only: names.iter().map(|s| s.to_string()).collect(),
            episodes: 4,
            ..VerifyOptions::default()
        }
    }

    #[test]
    fn group_filter_selects_both_interaction_checks() {
        let out = run(&only(&["harsanyi"])).unwrap();
        let names: Vec<_> = out.iter().map(|o| o.name).collect();
        assert_eq!(names, ["harsanyi_exact", "variance_gate"]);
        assert!(out.iter().all(|o| o.passed), "{}", format_table(&out));
    }

    #[test]
    fn fast_checks_pass() {
        let out = run(&only(&[
            "weights",
            "boost",
            "hdi",
            "accounting",
            "non_interference",
            "determinism",
        ]))
        .unwrap();
        assert_eq!(out.len(), 6);
        assert!(out.iter().all(|o| o.passed), "{}", format_table(&out));
    }

    #[test]
    fn unknown_filter_is_an_error() {
        assert!(run(&only(&["nonsense"])).is_err());
    }

    #[test]
    fn corrupted_weights_fail_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.cgvw");
        let w = crate::harness::build_planted_decoder(&ScenarioSpec::default()).unwrap();
        let mut bytes = weights_file::to_bytes(&w).unwrap();
        bytes[200] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        let opts = VerifyOptions {
            weights: Some(path),
            ..only(&["weights", "accounting"])
        };
        let out = run(&opts).unwrap();
        assert!(out.iter().all(|o| !o.passed));
        assert_eq!(out[0].name, "weights_file");
        assert!(out[0].detail.contains("checksum"));
    }
}
