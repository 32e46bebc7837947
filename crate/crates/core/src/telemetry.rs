//! Per-step measurements and episode summaries.
//!
//! The head divergence index is the mean KL divergence over ordered pairs of
//! heads, `(1 / (H (H - 1))) * sum_{h != h'} KL(P_h || P_h')`. Lower means the
//! heads agree more.

use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoder::ForwardResult;
use crate::error::{Error, Result};
use crate::intervention::LayerBand;
use crate::numerics::kl_divergence;

pub const STEPS_SCHEMA: &str = "steps/v1";
pub const STEPS_HEADER: &str = "step,token,class,beta,D,hdi_pre,hdi_post,var_ratio_pre,var_ratio_post,fwd_count";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenClass {
    Content,
    Function,
    Other,
}

impl TokenClass {
    pub const ALL: [TokenClass; 3] = [Self::Content, Self::Function, Self::Other];
}

impl fmt::Display for TokenClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenClass::Content => "content",
            TokenClass::Function => "function",
            TokenClass::Other => "other",
        })
    }
}

impl FromStr for TokenClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "content" => Ok(Self::Content),
            "function" => Ok(Self::Function),
            "other" => Ok(Self::Other),
            _ => Err(Error::Format(format!("unknown token class {s:?}"))),
        }
    }
}

/// Which layers feed the head divergence index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HdiScope {
    /// The layer at the centre of the band.
    #[default]
    Center,
    /// Mean over every layer of the band.
    BandMean,
}

impl FromStr for HdiScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "center" => Ok(Self::Center),
            "band_mean" | "band" => Ok(Self::BandMean),
            other => Err(Error::Config(format!("unknown hdi scope {other:?}"))),
        }
    }
}

impl fmt::Display for HdiScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HdiScope::Center => "center",
            HdiScope::BandMean => "band_mean",
        })
    }
}

pub fn hdi<R: AsRef<[f64]>>(heads: &[R]) -> Result<f64> {
    let h = heads.len();
    if h < 2 {
        return Err(Error::InsufficientHeads(h));
    }
    let mut total = 0.0;
    for (i, p) in heads.iter().enumerate() {
        for (j, q) in heads.iter().enumerate() {
            if i != j {
                total += kl_divergence(p.as_ref(), q.as_ref())?;
            }
        }
    }
    Ok(total / (h * (h - 1)) as f64)
}

/// Probability mass that one attention row puts on `visual` positions.
pub fn visual_attention_ratio(row: &[f64], visual: Range<usize>) -> Result<f64> {
    if visual.end > row.len() || visual.start > visual.end {
        return Err(Error::Index {
            index: visual.end.saturating_sub(1),
            len: row.len(),
        });
    }
    Ok(row[visual].iter().sum::<f64>().clamp(0.0, 1.0))
}

pub fn distinct2(tokens: &[usize]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "distinct-2 needs at least 2 tokens, got {}",
            tokens.len()
        )));
    }
    let mut bigrams: Vec<(usize, usize)> = tokens.windows(2).map(|w| (w[0], w[1])).collect();
    let total = bigrams.len();
    bigrams.sort_unstable();
    bigrams.dedup();
    Ok(bigrams.len() as f64 / total as f64)
}

// Weight of the uniform mixture that keeps underflowed attention entries
// above the KL floor.
const ATTENTION_SMOOTHING: f64 = 1e-9;

fn smoothed_heads(fr: &ForwardResult, layer: usize) -> Vec<Vec<f64>> {
    let floor = ATTENTION_SMOOTHING / fr.width as f64;
    fr.head_rows(layer)
        .into_iter()
        .map(|row| row.iter().map(|p| (1.0 - ATTENTION_SMOOTHING) * p + floor).collect())
        .collect()
}

/// Head divergence of one forward pass over the configured band. Attention
/// rows are mixed with a 1e-9 share of the uniform row so that entries which
/// underflowed to zero stay valid KL references.
pub fn band_hdi(fr: &ForwardResult, band: LayerBand, scope: HdiScope) -> Result<f64> {
    match scope {
        HdiScope::Center => hdi(&smoothed_heads(fr, band.center())),
        HdiScope::BandMean => {
            let sum = band
                .layers()
                .map(|l| hdi(&smoothed_heads(fr, l)))
                .sum::<Result<f64>>()?;
            Ok(sum / band.width() as f64)
        }
    }
}

/// Visual ratio averaged over every head of every band layer.
pub fn band_visual_ratio(fr: &ForwardResult, band: LayerBand, visual: Range<usize>) -> Result<f64> {
    let mut sum = 0.0;
    for l in band.layers() {
        for row in fr.head_rows(l) {
            sum += visual_attention_ratio(row, visual.clone())?;
        }
    }
    Ok(sum / (band.width() * fr.n_heads) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub token: usize,
    pub class: TokenClass,
    /// Class of the query token that produced this step.
    pub query_class: TokenClass,
    pub beta: bool,
    pub d: f64,
    pub hdi_pre: f64,
    pub hdi_post: f64,
    pub ratio_pre: f64,
    pub ratio_post: f64,
    pub fwd_count: usize,
    /// Entropy of the un-intervened full distribution.
    pub entropy: f64,
    /// Top-1 minus top-2 un-intervened full logit.
    pub margin: f64,
}

/// Outcome of one step whose correct token is known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedStep {
    pub step: usize,
    pub expected: usize,
    pub emitted: usize,
}

impl GroundedStep {
    pub fn hallucinated(&self) -> bool {
        self.expected != self.emitted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub tokens: Vec<usize>,
    pub steps: Vec<StepTrace>,
    pub grounded: Vec<GroundedStep>,
    pub trigger_rate: f64,
    pub distinct2: Option<f64>,
    pub total_forwards: usize,
    pub prefill_forwards: usize,
    pub vision_encodes: usize,
}

impl EpisodeReport {
    pub fn new(
        tokens: Vec<usize>,
        steps: Vec<StepTrace>,
        total_forwards: usize,
        prefill_forwards: usize,
        vision_encodes: usize,
    ) -> Self {
        let fired = steps.iter().filter(|s| s.beta).count();
        let trigger_rate = if steps.is_empty() {
            0.0
        } else {
            fired as f64 / steps.len() as f64
        };
        Self {
            distinct2: distinct2(&tokens).ok(),
            tokens,
            steps,
            grounded: Vec::new(),
            trigger_rate,
            total_forwards,
            prefill_forwards,
            vision_encodes,
        }
    }

    pub fn triggers(&self) -> usize {
        self.steps.iter().filter(|s| s.beta).count()
    }

    pub fn hallucinations(&self) -> usize {
        self.grounded.iter().filter(|g| g.hallucinated()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTriggers {
    pub class: TokenClass,
    pub steps: usize,
    pub triggers: usize,
    pub rate: f64,
    pub mean_d: f64,
}

/// Trigger rate and mean interaction variance per class of the emitted
/// token. Classes that never occur are left out.
pub fn trigger_stats<'a>(traces: impl IntoIterator<Item = &'a StepTrace>) -> Vec<ClassTriggers> {
    trigger_stats_by(traces, |t| t.class)
}

/// Same as [`trigger_stats`] with a caller-chosen class key.
pub fn trigger_stats_by<'a>(
    traces: impl IntoIterator<Item = &'a StepTrace>,
    key: impl Fn(&StepTrace) -> TokenClass,
) -> Vec<ClassTriggers> {
    let mut acc = [(0usize, 0usize, 0.0f64); 3];
    for t in traces {
        let a = &mut acc[key(t) as usize];
        a.0 += 1;
        a.1 += usize::from(t.beta);
        a.2 += t.d;
    }
    TokenClass::ALL
        .iter()
        .zip(acc)
        .filter(|(_, (n, _, _))| *n > 0)
        .map(|(&class, (n, fired, d))| ClassTriggers {
            class,
            steps: n,
            triggers: fired,
            rate: fired as f64 / n as f64,
            mean_d: d / n as f64,
        })
        .collect()
}

/// Round-trip float format: 17 significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_steps_csv<'a, W: Write>(mut out: W, traces: impl IntoIterator<Item = &'a StepTrace>) -> Result<()> {
    writeln!(out, "#schema={STEPS_SCHEMA}")?;
    writeln!(out, "{STEPS_HEADER}")?;
    for t in traces {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            t.step,
            t.token,
            t.class,
            u8::from(t.beta),
            format_float(t.d),
            format_float(t.hdi_pre),
            format_float(t.hdi_post),
            format_float(t.ratio_pre),
            format_float(t.ratio_post),
            t.fwd_count
        )?;
    }
    Ok(())
}
