mod common;

use common::{brute_force_logits, sequence_inputs};
use gazeguard::coalitions::{CoalitionCaches, CoalitionId, MaskingOptions};
use gazeguard::decode::{DecodePolicy, Episode, EpisodeInput, FixedGate};
use gazeguard::decoder::Decoder;
use gazeguard::harness::*;
use gazeguard::numerics::argmax;
use gazeguard::sensor::harsanyi_interaction;
use gazeguard::telemetry::visual_attention_ratio;

const READER_HEAD: usize = 0;

fn spec_with(episodes: usize) -> ScenarioSpec {
    ScenarioSpec {
        episodes,
        ..ScenarioSpec::default()
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Baseline episode advanced by `steps` committed tokens.
fn advanced<'w, 'i>(
    exp: &'w Experiment,
    ep: &'i PlantedEpisode,
    classes: &'i [gazeguard::telemetry::TokenClass],
    steps: usize,
) -> Episode<'w, 'i> {
    let policy = DecodePolicy {
        max_new_tokens: exp.spec.max_new_tokens,
        ..DecodePolicy::default()
    };
    let input = EpisodeInput {
        image: &ep.image,
        prompt: &ep.prompt,
        classes,
    };
    let mut episode = Episode::new(&exp.weights, input, &policy).unwrap();
    for _ in 0..steps {
        episode.decode_step(&FixedGate(false)).unwrap();
    }
    episode
}

fn condition_logits(episode: &Episode<'_, '_>, id: CoalitionId) -> Vec<f64> {
    let mut caches = episode.caches().clone();
    caches.logits(episode.decoder(), id).unwrap()
}

#[test]
fn step_zero_logits_match_brute_force_for_every_episode() {
    let exp = Experiment::new(&ScenarioSpec::default(), 1).unwrap();
    let w = &exp.weights;
    let pads = [PAD; 3];
    let origin = w.config.n_visual_slots + 2;
    let mut worst = 0.0f64;
    for ep in &exp.episodes {
        let mut decoder = Decoder::new(w);
        let mut caches =
            CoalitionCaches::init_episode(&mut decoder, &ep.image, &ep.prompt, MaskingOptions::default()).unwrap();
        let full = caches.logits(&decoder, CoalitionId::Full).unwrap();
        let oracle = brute_force_logits(w, &sequence_inputs(w, Some(&ep.image), &ep.prompt), origin);
        worst = worst.max(max_abs_diff(&full, &oracle));
        if ep.index < 20 {
            let cases = [
                (CoalitionId::VOnly, Some(ep.image.as_slice()), &pads[..]),
                (CoalitionId::TOnly, None, &ep.prompt[..]),
                (CoalitionId::None, None, &pads[..]),
            ];
            for (id, image, tokens) in cases {
                let got = caches.logits(&decoder, id).unwrap();
                let oracle = brute_force_logits(w, &sequence_inputs(w, image, tokens), origin);
                worst = worst.max(max_abs_diff(&got, &oracle));
            }
        }
    }
    assert!(worst < 1e-9, "max deviation {worst:e}");
}

#[test]
fn late_step_logits_match_brute_force_with_drift() {
    let exp = Experiment::new(&spec_with(3), 1).unwrap();
    let classes = token_classes();
    let w = &exp.weights;
    for ep in &exp.episodes {
        let episode = advanced(&exp, ep, &classes, 15);
        let mut tokens = ep.prompt.clone();
        tokens.extend(episode.tokens());
        let origin = w.config.n_visual_slots + ep.prompt.len() - 1;
        let oracle = brute_force_logits(w, &sequence_inputs(w, Some(&ep.image), &tokens), origin);
        let got = condition_logits(&episode, CoalitionId::Full);
        assert!(max_abs_diff(&got, &oracle) < 1e-9);
    }
}

#[test]
fn reader_looks_at_the_image_early_and_drifts_off_late() {
    let exp = Experiment::new(&spec_with(20), 1).unwrap();
    let classes = token_classes();
    let center = exp.weights.config.layer_band.center();
    let n_vis = exp.weights.config.n_visual_slots;
    for ep in &exp.episodes {
        for (step, check) in [(1usize, true), (22, false)] {
            let episode = advanced(&exp, ep, &classes, step);
            assert!(
                is_function_word(*episode.tokens().last().unwrap()),
                "step {step} is a content step"
            );
            let mut caches = episode.caches().clone();
            let fr = caches.forward(episode.decoder(), CoalitionId::Full, None).unwrap();
            let ratio = visual_attention_ratio(fr.attention_row(center, READER_HEAD), 0..n_vis).unwrap();
            if check {
                assert!(ratio > 0.5, "episode {} early ratio {ratio}", ep.index);
            } else {
                assert!(ratio < 0.2, "episode {} late ratio {ratio}", ep.index);
            }
        }
    }
}

#[test]
fn content_candidate_interaction_dominates_function_candidate() {
    let exp = Experiment::new(&spec_with(20), 1).unwrap();
    let classes = token_classes();
    for ep in &exp.episodes {
        let episode = advanced(&exp, ep, &classes, 1);
        let l = CoalitionId::ALL.map(|id| condition_logits(&episode, id));
        let interaction = |y: usize| harsanyi_interaction(l[0][y], l[1][y], l[2][y], l[3][y]).unwrap();
        let content = interaction(ep.truth.content_token());
        let function = interaction(FIRST_FUNCTION);
        assert!(
            content.abs() >= 2.0 * function.abs(),
            "episode {}: {content} vs {function}",
            ep.index
        );
    }
}

#[test]
fn text_only_condition_ranks_biased_class_first() {
    let exp = Experiment::new(&spec_with(20), 1).unwrap();
    let classes = token_classes();
    for ep in &exp.episodes {
        for step in [1, 10, 22] {
            let episode = advanced(&exp, ep, &classes, step);
            let t_only = condition_logits(&episode, CoalitionId::TOnly);
            assert_eq!(
                argmax(&t_only),
                ep.truth.biased_token(),
                "episode {} step {step}",
                ep.index
            );
        }
    }
}

#[test]
fn without_drift_or_prior_every_content_step_is_correct() {
    let spec = ScenarioSpec {
        drift: 0.0,
        prior: 0.0,
        episodes: 60,
        ..ScenarioSpec::default()
    };
    let base = Experiment::new(&spec, 1)
        .unwrap()
        .run_arm(&DecodePolicy::default(), Arm::Baseline)
        .unwrap();
    assert!(base.content_steps > 0);
    assert_eq!(base.hallucinations, 0);
}

#[test]
fn strong_drift_and_prior_emit_the_biased_class_late() {
    let spec = ScenarioSpec {
        drift: 1.5,
        prior: 3.0,
        episodes: 60,
        ..ScenarioSpec::default()
    };
    let exp = Experiment::new(&spec, 1).unwrap();
    let base = exp.run_arm(&DecodePolicy::default(), Arm::Baseline).unwrap();
    for (ep, report) in exp.episodes.iter().zip(&base.reports) {
        let late = report.grounded.iter().filter(|g| g.step >= 12);
        for g in late {
            assert_eq!(
                g.emitted,
                ep.truth.biased_token(),
                "episode {} step {}",
                ep.index,
                g.step
            );
        }
    }
}

#[test]
fn pad_prompt_makes_full_and_image_only_identical() {
    let exp = Experiment::new(&spec_with(5), 1).unwrap();
    for ep in &exp.episodes {
        let mut decoder = Decoder::new(&exp.weights);
        let mut caches =
            CoalitionCaches::init_episode(&mut decoder, &ep.image, &[PAD, PAD, PAD], MaskingOptions::default())
                .unwrap();
        let full = caches.logits(&decoder, CoalitionId::Full).unwrap();
        let v_only = caches.logits(&decoder, CoalitionId::VOnly).unwrap();
        assert!(full.iter().zip(&v_only).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn image_only_logits_ignore_the_prompt() {
    let exp = Experiment::new(&spec_with(5), 1).unwrap();
    for ep in &exp.episodes {
        let other_prompt = [BOS, scene_token((ep.truth.biased_class + 1) % N_SCENES), DESCRIBE + 3];
        let v = [&ep.prompt[..], &other_prompt[..]].map(|prompt| {
            let mut decoder = Decoder::new(&exp.weights);
            let mut caches =
                CoalitionCaches::init_episode(&mut decoder, &ep.image, prompt, MaskingOptions::default()).unwrap();
            caches.logits(&decoder, CoalitionId::VOnly).unwrap()
        });
        assert_eq!(v[0], v[1]);
    }
}

#[test]
fn triggers_concentrate_on_content_steps() {
    let exp = Experiment::new(&spec_with(60), 1).unwrap();
    let guided = exp.run_arm(&DecodePolicy::default(), Arm::Guided).unwrap();
    let mut fired = 0;
    let mut fired_on_content = 0;
    for (ep, report) in exp.episodes.iter().zip(&guided.reports) {
        for s in report.steps.iter().filter(|s| s.beta) {
            fired += 1;
            let query = if s.step == 0 {
                *ep.prompt.last().unwrap()
            } else {
                report.tokens[s.step - 1]
            };
            fired_on_content += usize::from(is_function_word(query));
        }
    }
    assert!(fired > 0);
    assert!(
        fired_on_content as f64 >= 0.9 * fired as f64,
        "{fired_on_content} of {fired}"
    );
}

#[test]
fn beam_with_gate_does_not_hallucinate_more_than_beam_alone() {
    let exp = Experiment::new(&spec_with(80), 1).unwrap();
    let beam = DecodePolicy::beam();
    let base = exp.run_arm(&beam, Arm::Baseline).unwrap();
    let guided = exp.run_arm(&beam, Arm::Guided).unwrap();
    assert!(base.hallucination_rate > 0.0);
    assert!(
        guided.hallucination_rate <= base.hallucination_rate,
        "{} > {}",
        guided.hallucination_rate,
        base.hallucination_rate
    );
}

#[test]
fn repeated_comparisons_are_identical() {
    let exp = Experiment::new(&spec_with(15), 1).unwrap();
    let a = exp.run_comparison(&DecodePolicy::default()).unwrap();
    let b = Experiment::new(&spec_with(15), 2)
        .unwrap()
        .run_comparison(&DecodePolicy::default())
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_boost_sweep_point_equals_baseline() {
    let exp = Experiment::new(&spec_with(30), 1).unwrap();
    let table = exp
        .sweep(&DecodePolicy::default(), SweepParam::Alpha, &["0".into()])
        .unwrap();
    assert_eq!(table.rows[0].hallucination_rate, table.baseline_hallucination_rate);
    assert_eq!(table.rows[0].distinct2, table.baseline_distinct2);
}
