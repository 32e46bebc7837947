//! Consensus boost on the newest query row.
//!
//! For every visual column `j` the boost added to head `h` is
//! `beta * alpha * stat_h'(|A[h'][j]|)`, where the statistic runs over all
//! heads of the layer and reads the scores as they were before any boost.
//! The added term is therefore the same for every head at a given column.
//! Text columns and older query rows are never touched.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive range of decoder layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBand {
    pub start: usize,
    pub end: usize,
}

impl LayerBand {
    pub const SHALLOW: LayerBand = LayerBand { start: 0, end: 3 };
    pub const MIDDLE: LayerBand = LayerBand { start: 4, end: 8 };
    pub const DEEP: LayerBand = LayerBand { start: 9, end: 11 };

    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(Error::Config(format!("layer band {start}-{end} is reversed")));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, layer: usize) -> bool {
        (self.start..=self.end).contains(&layer)
    }

    pub fn width(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn center(&self) -> usize {
        (self.start + self.end) / 2
    }

    pub fn check_depth(&self, n_layers: usize) -> Result<()> {
        if self.end >= n_layers {
            return Err(Error::Config(format!(
                "layer band {self} exceeds decoder depth {n_layers}"
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> {
        self.start..=self.end
    }
}

impl fmt::Display for LayerBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.start, self.end)
    }
}

impl FromStr for LayerBand {
    type Err = Error;

    /// Accepts `4-8`, `4:8`, or the names `shallow`, `middle`, `deep`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "shallow" => return Ok(Self::SHALLOW),
            "middle" => return Ok(Self::MIDDLE),
            "deep" => return Ok(Self::DEEP),
            _ => {}
        }
        let (a, b) = s
            .split_once(['-', ':'])
            .ok_or_else(|| Error::Config(format!("bad layer band {s:?}, expected START-END")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad layer index {v:?} in band {s:?}")))
        };
        Self::new(parse(a)?, parse(b)?)
    }
}

/// Cross-head statistic of absolute scores used to size the boost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoostStatistic {
    #[default]
    MeanAbs,
    MedianAbs,
    MaxAbs,
}

impl BoostStatistic {
    fn reduce(self, abs_values: &mut [f64]) -> f64 {
        match self {
            BoostStatistic::MeanAbs => abs_values.iter().sum::<f64>() / abs_values.len() as f64,
            BoostStatistic::MaxAbs => abs_values.iter().copied().fold(0.0, f64::max),
            BoostStatistic::MedianAbs => {
                abs_values.sort_by(f64::total_cmp);
                let n = abs_values.len();
                if n % 2 == 1 {
                    abs_values[n / 2]
                } else {
                    0.5 * (abs_values[n / 2 - 1] + abs_values[n / 2])
                }
            }
        }
    }
}

impl fmt::Display for BoostStatistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoostStatistic::MeanAbs => "mean_abs",
            BoostStatistic::MedianAbs => "median_abs",
            BoostStatistic::MaxAbs => "max_abs",
        })
    }
}

impl FromStr for BoostStatistic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mean_abs" | "mean" => Ok(Self::MeanAbs),
            "median_abs" | "median" => Ok(Self::MedianAbs),
            "max_abs" | "max" => Ok(Self::MaxAbs),
            other => Err(Error::Config(format!("unknown boost statistic {other:?}"))),
        }
    }
}

/// Which attention entries the boost may touch, and by how much.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionPlan {
    pub beta: bool,
    pub alpha: f64,
    pub visual: Range<usize>,
    /// `None` arms no layer at all.
    pub band: Option<LayerBand>,
    pub statistic: BoostStatistic,
}

impl InterventionPlan {
    pub fn new(alpha: f64, visual: Range<usize>, band: LayerBand) -> Self {
        Self {
            beta: true,
            alpha,
            visual,
            band: Some(band),
            statistic: BoostStatistic::MeanAbs,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if let Some(band) = &self.band {
            band.check_depth(n_layers)?;
        }
        Ok(())
    }

    /// Layers that receive the boost. Errors when the band exceeds the depth.
    pub fn apply_to_layers(&self, n_layers: usize) -> Result<Vec<usize>> {
        self.validate(n_layers)?;
        Ok(self.band.map(|b| b.layers().collect()).unwrap_or_default())
    }

    #[inline]
    pub fn is_armed(&self, layer: usize) -> bool {
        self.beta && self.band.is_some_and(|b| b.contains(layer))
    }
}

/// Boost a flat `n_heads × width` block of newest-row scores in place.
pub(crate) fn boost_rows_in_place(scores: &mut [f64], n_heads: usize, plan: &InterventionPlan) -> Result<()> {
    if n_heads == 0 || !scores.len().is_multiple_of(n_heads) {
        return Err(Error::Shape(format!(
            "{} scores do not split into {n_heads} equal head rows",
            scores.len()
        )));
    }
    let width = scores.len() / n_heads;
    if plan.visual.end > width {
        return Err(Error::Index {
            index: plan.visual.end.saturating_sub(1),
            len: width,
        });
    }
    if !plan.beta {
        return Ok(());
    }
    let mut column = vec![0.0; n_heads];
    for j in plan.visual.clone() {
        for (h, c) in column.iter_mut().enumerate() {
            *c = scores[h * width + j].abs();
        }
        let boost = plan.alpha * plan.statistic.reduce(&mut column);
        for h in 0..n_heads {
            scores[h * width + j] += boost;
        }
    }
    Ok(())
}

/// Boost the newest-row scores of every head (one row per head).
pub fn fci_boost(rows: &[Vec<f64>], plan: &InterventionPlan) -> Result<Vec<Vec<f64>>> {
    let Some(first) = rows.first() else {
        return Err(Error::Shape("no head rows".into()));
    };
    let width = first.len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::Shape("head rows have different widths".into()));
    }
    let mut flat: Vec<f64> = rows.iter().flatten().copied().collect();
    boost_rows_in_place(&mut flat, rows.len(), plan)?;
    Ok(flat.chunks(width).map(<[f64]>::to_vec).collect())
}
