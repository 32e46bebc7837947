//! Small dense kernels shared by the decoder, the sensor and telemetry.
//!
//! Everything is `f64`. Sizes here are tiny (tens of rows), so the kernels are
//! plain loops over row-major slices rather than anything blocked.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Floor below which a reference distribution entry is treated as zero mass.
pub const KL_FLOOR: f64 = 1e-12;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NumericDomain(format!("non-finite matrix entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `out = self · x`, with `x.len() == cols` and `out.len() == rows`.
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o = dot(row, x);
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        out
    }

    /// Matrix product `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let rrow = rhs.row(k);
                let orow = out.row_mut(i);
                for (o, &b) in orow.iter_mut().zip(rrow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax of one score row.
pub fn softmax_row(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::NumericDomain("softmax of empty row".into()));
    }
    if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::NumericDomain(format!("non-finite score {bad}")));
    }
    let mut out = scores.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// In-place softmax; callers guarantee a finite, non-empty row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Log-softmax with max subtraction.
pub fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = scores.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    scores.iter().map(|v| v - lse).collect()
}

/// Population variance (divides by the number of values).
pub fn variance(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::InsufficientCandidates(values.len()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(var.max(0.0))
}

/// Natural-log KL(p ‖ q).
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::NumericDomain(format!(
            "KL length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if qi < KL_FLOOR {
            return Err(Error::NumericDomain(format!(
                "reference probability {qi:e} below floor {KL_FLOOR:e}"
            )));
        }
        if pi > 0.0 {
            acc += pi * (pi / qi).ln();
        }
    }
    Ok(acc.max(0.0))
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Indices sorted by descending value, ties by ascending index.
pub fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// Seeded generator. Same seed, same draws.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Generator `stream` of a family sharing `seed`. Streams never overlap.
    pub fn for_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen::<u64>()
    }
}

/// Nucleus sampling over a probability vector.
///
/// Temperature rescales log-probabilities; the nucleus is the shortest prefix
/// (descending probability, ties by index) whose mass reaches `top_p`.
pub fn sample_categorical(probs: &[f64], rng: &mut Rng, top_p: f64, temperature: f64) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::NumericDomain("empty distribution".into()));
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::Argument(format!("top_p must be in (0, 1], got {top_p}")));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Argument(format!("temperature must be > 0, got {temperature}")));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::NumericDomain("invalid probability entry".into()));
    }

    let tempered: Vec<f64> = if temperature == 1.0 {
        let total: f64 = probs.iter().sum();
        probs.iter().map(|p| p / total).collect()
    } else {
        let logits: Vec<f64> = probs
            .iter()
            .map(|&p| {
                if p > 0.0 {
                    p.ln() / temperature
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    };

    let order = descending_order(&tempered);
    let mut nucleus = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        nucleus.push(i);
        mass += tempered[i];
        if mass >= top_p {
            break;
        }
    }

    let u = rng.uniform() * mass;
    let mut acc = 0.0;
    for &i in &nucleus {
        acc += tempered[i];
        if u < acc {
            return Ok(i);
        }
    }
    // Rounding can leave `u` a hair above the accumulated mass.
    Ok(nucleus
        .iter()
        .rev()
        .copied()
        .find(|&i| tempered[i] > 0.0)
        .unwrap_or(order[0]))
}

#[cfg(test)]
mod tests {
    use super::Rng;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_symmetric_pair() {
        let p = softmax_row(&[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_large_gap_does_not_overflow() {
        let p = softmax_row(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12);
        // exp(-1000) underflows in f64; the row must still be finite and normalized.
        assert!((0.0..1e-300).contains(&p[1]));
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_boosted_pair_matches_direct_exp() {
        // exp(0.55)/(exp(0.55)+exp(-0.05)) computed independently: 1/(1+exp(-0.6)).
        let expected0 = 1.0 / (1.0 + (-0.6f64).exp());
        let p = softmax_row(&[0.55, -0.05]).unwrap();
        assert!((p[0] - expected0).abs() < 1e-12);
        assert!((p[0] - 0.6457).abs() < 1e-4);
        assert!((p[1] - 0.3543).abs() < 1e-4);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(softmax_row(&[f64::NAN, 0.0]), Err(Error::NumericDomain(_))));
        assert!(matches!(softmax_row(&[]), Err(Error::NumericDomain(_))));
    }

    #[test]
    fn variance_examples() {
        assert_eq!(variance(&[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(variance(&[0.0, 3.0]).unwrap(), 2.25);
        assert_eq!(variance(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 1.25);
        assert!(matches!(variance(&[1.0]), Err(Error::InsufficientCandidates(1))));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        let a = kl_divergence(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        let b = kl_divergence(&[0.9, 0.1], &[0.5, 0.5]).unwrap();
        assert!((a - 0.51083).abs() < 1e-4, "{a}");
        assert!((b - 0.36806).abs() < 1e-4, "{b}");
    }

    #[test]
    fn kl_errors() {
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn sampling_degenerate_and_nucleus() {
        let mut rng = Rng::new(7);
        for _ in 0..50 {
            assert_eq!(sample_categorical(&[1.0, 0.0], &mut rng, 1.0, 1.0).unwrap(), 0);
            assert_eq!(sample_categorical(&[0.6, 0.3, 0.1], &mut rng, 0.5, 1.0).unwrap(), 0);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let probs = [0.1, 0.2, 0.3, 0.4];
        let draw = |seed| {
            let mut rng = Rng::new(seed);
            (0..20)
                .map(|_| sample_categorical(&probs, &mut rng, 1.0, 1.0).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(42), draw(42));
    }

    #[test]
    fn sampling_frequencies_track_probabilities() {
        let probs = [0.2, 0.5, 0.3];
        let mut rng = Rng::new(3);
        let mut counts = [0usize; 3];
        let n = 20_000;
        for _ in 0..n {
            counts[sample_categorical(&probs, &mut rng, 1.0, 1.0).unwrap()] += 1;
        }
        for (c, p) in counts.iter().zip(probs) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.02);
        }
    }

    #[test]
    fn low_temperature_concentrates_mass() {
        let mut rng = Rng::new(11);
        let hits = (0..500)
            .filter(|_| sample_categorical(&[0.4, 0.35, 0.25], &mut rng, 1.0, 0.05).unwrap() == 0)
            .count();
        assert!(hits > 450);
    }

    #[test]
    fn matmul_shapes() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Matrix::from_vec(3, 1, vec![1.0, 0.0, -1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[-2.0, -2.0]);
        assert!(b.matmul(&b).is_err());
        assert_eq!(a.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
    }

    fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-6.0f64..6.0, len).prop_map(|s| softmax_row(&s).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_rows_normalized_and_positive(scores in prop::collection::vec(-50.0f64..50.0, 1..40)) {
            let p = softmax_row(&scores).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&v| v > 0.0));
        }

        #[test]
        fn variance_affine(xs in prop::collection::vec(-10.0f64..10.0, 2..20), c in -5.0f64..5.0, b in -5.0f64..5.0) {
            let ys: Vec<f64> = xs.iter().map(|x| c * x + b).collect();
            let vx = variance(&xs).unwrap();
            let vy = variance(&ys).unwrap();
            prop_assert!((vy - c * c * vx).abs() <= 1e-9 * (1.0 + vy.abs()));
        }

        #[test]
        fn kl_nonnegative_and_zero_on_self((p, q) in (2usize..12).prop_flat_map(|n| (distribution(n), distribution(n)))) {
            prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
            prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        }
    }
}
