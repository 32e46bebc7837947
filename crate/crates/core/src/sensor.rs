//! Cognitive-demand gate.
//!
//! For each top-k candidate `y` of the full-condition logits the sensor forms
//! the two-player Harsanyi interaction
//!
//! ```text
//! I_y = l_y(image, text) - l_y(image) - l_y(text) + l_y(empty)
//! ```
//!
//! from raw logits, takes the population variance `D` of the interactions
//! across candidates and fires when `D > kappa`.

use serde::{Deserialize, Serialize};

use crate::coalitions::{AuxForwards, CoalitionId};
use crate::error::{Error, Result};
use crate::numerics::{descending_order, variance};

pub const DEFAULT_KAPPA: f64 = 1.8;

/// Top-k tokens of the full-condition logits, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    tokens: Vec<usize>,
    logits: Vec<f64>,
}

impl CandidateSet {
    /// Highest `k` logits; ties go to the lower token index.
    pub fn top_k(full_logits: &[f64], k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InsufficientCandidates(k));
        }
        if k > full_logits.len() {
            return Err(Error::Argument(format!(
                "k = {k} exceeds vocabulary of {}",
                full_logits.len()
            )));
        }
        let tokens: Vec<usize> = descending_order(full_logits).into_iter().take(k).collect();
        let logits = tokens.iter().map(|&t| full_logits[t]).collect();
        Ok(Self { tokens, logits })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn k(&self) -> usize {
        self.tokens.len()
    }
}

/// Raw logits of one candidate under the three masked conditions.
pub trait MaskedLogits {
    fn logit(&self, id: CoalitionId, token: usize) -> f64;
}

impl MaskedLogits for AuxForwards {
    fn logit(&self, id: CoalitionId, token: usize) -> f64 {
        self.logits(id)[token]
    }
}

/// Plain logit vectors for the three masked conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxLogits {
    pub v_only: Vec<f64>,
    pub t_only: Vec<f64>,
    pub none: Vec<f64>,
}

impl MaskedLogits for AuxLogits {
    fn logit(&self, id: CoalitionId, token: usize) -> f64 {
        match id {
            CoalitionId::VOnly => self.v_only[token],
            CoalitionId::TOnly => self.t_only[token],
            CoalitionId::None => self.none[token],
            CoalitionId::Full => panic!("FULL logits come from the candidate set"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub step: usize,
    pub candidates: Vec<usize>,
    pub interactions: Vec<f64>,
    pub variance: f64,
    pub kappa: f64,
    pub beta: bool,
}

pub fn harsanyi_interaction(full: f64, v_only: f64, t_only: f64, none: f64) -> Result<f64> {
    if ![full, v_only, t_only, none].iter().all(|v| v.is_finite()) {
        return Err(Error::NumericDomain(format!(
            "non-finite coalition logit in ({full}, {v_only}, {t_only}, {none})"
        )));
    }
    Ok(full - v_only - t_only + none)
}

/// Strict threshold: fires only when `variance > kappa`.
pub fn gate(variance: f64, kappa: f64) -> bool {
    variance > kappa
}

pub fn sense(step: usize, candidates: &CandidateSet, aux: &impl MaskedLogits, kappa: f64) -> Result<InteractionRecord> {
    if candidates.k() < 2 {
        return Err(Error::InsufficientCandidates(candidates.k()));
    }
    let interactions = candidates
        .tokens()
        .iter()
        .zip(candidates.logits())
        .map(|(&y, &full)| {
            harsanyi_interaction(
                full,
                aux.logit(CoalitionId::VOnly, y),
                aux.logit(CoalitionId::TOnly, y),
                aux.logit(CoalitionId::None, y),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let d = variance(&interactions)?;
    Ok(InteractionRecord {
        step,
        candidates: candidates.tokens().to_vec(),
        interactions,
        variance: d,
        kappa,
        beta: gate(d, kappa),
    })
}

/// Fraction of steps whose variance exceeds each threshold in `grid`.
pub fn sweep_kappa(variances: &[f64], grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if grid.is_empty() {
        return Err(Error::Argument("empty kappa grid".into()));
    }
    if variances.is_empty() {
        return Err(Error::Argument("empty variance trace".into()));
    }
    let n = variances.len() as f64;
    Ok(grid
        .iter()
        .map(|&kappa| {
            let fired = variances.iter().filter(|&&d| gate(d, kappa)).count();
            (kappa, fired as f64 / n)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn aux(v: Vec<f64>, t: Vec<f64>, n: Vec<f64>) -> AuxLogits {
        AuxLogits {
            v_only: v,
            t_only: t,
            none: n,
        }
    }

    #[test]
    fn interaction_arithmetic() {
        assert_eq!(harsanyi_interaction(5.0, 2.0, 1.5, 0.5).unwrap(), 2.0);
        assert!(harsanyi_interaction(f64::NAN, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn candidates_sorted_with_index_ties() {
        let c = CandidateSet::top_k(&[1.0, 3.0, 3.0, 0.5, 2.0], 3).unwrap();
        assert_eq!(c.tokens(), &[1, 2, 4]);
        assert_eq!(c.logits(), &[3.0, 3.0, 2.0]);
        assert!(matches!(
            CandidateSet::top_k(&[1.0, 2.0], 1),
            Err(Error::InsufficientCandidates(1))
        ));
        assert!(CandidateSet::top_k(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn per_condition_constants_give_zero_variance() {
        // Each condition differs from the others by a constant across tokens.
        let full = [4.0, 3.0, 1.0, 0.0];
        let c = CandidateSet::top_k(&full, 4).unwrap();
        let a = aux(
            full.iter().map(|x| x - 1.0).collect(),
            full.iter().map(|x| x + 2.5).collect(),
            full.iter().map(|x| x + 0.75).collect(),
        );
        let r = sense(0, &c, &a, DEFAULT_KAPPA).unwrap();
        assert!(r.variance.abs() < 1e-24);
        assert!(!r.beta);
    }

    #[test]
    fn strict_threshold() {
        // Interactions [0, 3] by construction.
        let c = CandidateSet::top_k(&[3.0, 0.0], 2).unwrap();
        let a = aux(vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]);
        let r = sense(7, &c, &a, 1.8).unwrap();
        assert_eq!(r.interactions, vec![3.0, 0.0]);
        assert_eq!(r.variance, 2.25);
        assert!(r.beta);
        assert!(!sense(7, &c, &a, 2.25).unwrap().beta);
        assert_eq!(r.step, 7);
    }

    #[test]
    fn sweep_edges() {
        let trace = [0.5, 1.0, 2.0, 4.0];
        let curve = sweep_kappa(&trace, &[0.0, 10.0]).unwrap();
        assert_eq!(curve, vec![(0.0, 1.0), (10.0, 0.0)]);
        assert!(sweep_kappa(&trace, &[]).is_err());
        assert!(sweep_kappa(&[], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn shift_cancels_and_scale_covaries(
            l in prop::collection::vec(-5.0f64..5.0, 4),
            shift in -10.0f64..10.0,
            scale in -3.0f64..3.0,
        ) {
            let base = harsanyi_interaction(l[0], l[1], l[2], l[3]).unwrap();
            let shifted = harsanyi_interaction(l[0] + shift, l[1] + shift, l[2] + shift, l[3] + shift).unwrap();
            prop_assert!((base - shifted).abs() < 1e-9);
            let scaled = harsanyi_interaction(scale * l[0], scale * l[1], scale * l[2], scale * l[3]).unwrap();
            prop_assert!((scaled - scale * base).abs() < 1e-9);
        }

        #[test]
        fn additive_heads_have_no_interaction(
            image in prop::collection::vec(-3.0f64..3.0, 6),
            text in prop::collection::vec(-3.0f64..3.0, 6),
            bias in prop::collection::vec(-3.0f64..3.0, 6),
        ) {
            let full: Vec<f64> = (0..6).map(|i| image[i] + text[i] + bias[i]).collect();
            let a = aux(
                (0..6).map(|i| image[i] + bias[i]).collect(),
                (0..6).map(|i| text[i] + bias[i]).collect(),
                bias.clone(),
            );
            let r = sense(0, &CandidateSet::top_k(&full, 6).unwrap(), &a, 0.0).unwrap();
            prop_assert!(r.interactions.iter().all(|i| i.abs() < 1e-9));
        }

        #[test]
        fn variance_scales_quadratically(
            full in prop::collection::vec(-4.0f64..4.0, 5),
            v in prop::collection::vec(-4.0f64..4.0, 5),
            t in prop::collection::vec(-4.0f64..4.0, 5),
            n in prop::collection::vec(-4.0f64..4.0, 5),
            c in 0.1f64..3.0,
        ) {
            // Positive scale keeps the candidate order unchanged.
            let base = sense(0, &CandidateSet::top_k(&full, 5).unwrap(), &aux(v.clone(), t.clone(), n.clone()), 0.0).unwrap();
            let sc = |x: &Vec<f64>| x.iter().map(|y| c * y).collect::<Vec<_>>();
            let scaled = sense(0, &CandidateSet::top_k(&sc(&full), 5).unwrap(), &aux(sc(&v), sc(&t), sc(&n)), 0.0).unwrap();
            prop_assert!((scaled.variance - c * c * base.variance).abs() < 1e-9 * (1.0 + scaled.variance));
        }

        #[test]
        fn gate_sets_nest(trace in prop::collection::vec(0.0f64..5.0, 1..50), a in 0.0f64..5.0, b in 0.0f64..5.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for &d in &trace {
                prop_assert!(!gate(d, hi) || gate(d, lo));
            }
            let curve = sweep_kappa(&trace, &[lo, hi]).unwrap();
            prop_assert!(curve[1].1 <= curve[0].1);
        }
    }
}
