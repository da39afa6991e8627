//! Dense f64 linear algebra and loss primitives.
//!
//! Every reduction runs left to right over the index so repeated runs, and
//! different call paths over the same operands, produce bit-identical results.

use crate::error::{ensure_dim, Error, Result};

/// Probability mass tolerance accepted by [`ProbVec`].
pub const PROB_SUM_TOL: f64 = 1e-9;
/// Lower clamp applied to predicted probabilities before taking a log.
pub const LOG_CLAMP: f64 = 1e-12;

/// Row-major dense matrix.
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
        ensure_dim("matrix data", rows * cols, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            ensure_dim("matrix row", cols, r.len())?;
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self · other`, accumulating over the inner index in increasing order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        ensure_dim("matmul inner", self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
            vecmat_into(self.row(r), other, dst);
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `x · w` for a row vector `x` of length `w.rows()`; writes `w.cols()` values.
pub fn vecmat_into(x: &[f64], w: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(x.len(), w.rows);
    debug_assert_eq!(out.len(), w.cols);
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, &xi) in x.iter().enumerate() {
        let wrow = w.row(i);
        for (o, &wv) in out.iter_mut().zip(wrow) {
            *o += xi * wv;
        }
    }
}

pub fn vecmat(x: &[f64], w: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; w.cols];
    vecmat_into(x, w, &mut out);
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// RMS normalisation with a per-channel gain.
pub fn rms_norm(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().fold(0.0, |acc, v| acc + v * v) / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest entries, descending, lower index first on ties.
pub fn top_k_indices(x: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// A validated probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVec(Vec<f64>);

impl ProbVec {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::EmptyInput);
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidProb("negative or non-finite entry".into()));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidProb(format!("sums to {s}")));
        }
        Ok(Self(p))
    }

    /// Normalises non-negative weights into a distribution.
    pub fn from_weights(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::EmptyInput);
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidProb("negative or non-finite weight".into()));
        }
        let s = w.iter().fold(0.0, |a, v| a + v);
        if s <= 0.0 {
            return Err(Error::InvalidProb("zero total mass".into()));
        }
        Ok(Self(w.into_iter().map(|v| v / s).collect()))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, at: usize) -> Result<Self> {
        let mut v = vec![0.0; n];
        *v.get_mut(at)
            .ok_or(Error::InvalidArgument("one-hot index".into()))? = 1.0;
        Self::new(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// Inverse-CDF lookup: first index whose running mass exceeds `u`.
    /// Zero-mass entries are never returned.
    pub fn sample_with(&self, u: f64) -> usize {
        let mut acc = 0.0;
        let mut last_pos = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last_pos = i;
                if u < acc {
                    return i;
                }
            }
        }
        last_pos
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<ProbVec> {
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogit);
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(ProbVec(softmax_unchecked(logits, temperature)))
}

pub(crate) fn softmax_unchecked(logits: &[f64], temperature: f64) -> Vec<f64> {
    let inv_t = 1.0 / temperature;
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * inv_t));
    let mut out: Vec<f64> = logits.iter().map(|&v| (v * inv_t - m).exp()).collect();
    let s = out.iter().fold(0.0, |a, v| a + v);
    out.iter_mut().for_each(|v| *v /= s);
    out
}

/// Boolean attention mask, `rows` queries by `cols` keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMatrix {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![false; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn lower_triangular(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| c <= r)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| r == c)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Allowed key indices of row `r`, increasing.
    pub fn allowed(&self, r: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(r)
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }
}

/// Attention of one query over the key/value rows listed in `allowed`.
///
/// Keys are visited in the order given; callers pass increasing indices so a
/// tree path and the equivalent sequential prefix do identical arithmetic.
pub fn attend_row<'a>(
    query: &[f64],
    keys: impl Fn(usize) -> &'a [f64],
    values: impl Fn(usize) -> &'a [f64],
    allowed: &[usize],
    out: &mut [f64],
) {
    let scale = 1.0 / (query.len() as f64).sqrt();
    let scores: Vec<f64> = allowed.iter().map(|&j| dot(query, keys(j)) * scale).collect();
    let m = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let weights: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let total = weights.iter().fold(0.0, |a, v| a + v);
    out.iter_mut().for_each(|o| *o = 0.0);
    for (&j, w) in allowed.iter().zip(&weights) {
        let coef = w / total;
        for (o, v) in out.iter_mut().zip(values(j)) {
            *o += coef * v;
        }
    }
}

/// Single-head scaled dot-product attention restricted by `mask`.
pub fn masked_attention(q: &Matrix, k: &Matrix, v: &Matrix, mask: &BoolMatrix) -> Result<Matrix> {
    ensure_dim("attention mask rows", q.rows(), mask.rows())?;
    ensure_dim("attention mask cols", k.rows(), mask.cols())?;
    ensure_dim("attention key/value rows", k.rows(), v.rows())?;
    ensure_dim("attention head dim", q.cols(), k.cols())?;
    let mut out = Matrix::zeros(q.rows(), v.cols());
    for i in 0..q.rows() {
        let allowed: Vec<usize> = mask.allowed(i).collect();
        if allowed.is_empty() {
            return Err(Error::EmptyMaskRow(i));
        }
        attend_row(q.row(i), |j| k.row(j), |j| v.row(j), &allowed, out.row_mut(i));
    }
    Ok(out)
}

fn smooth_l1_elem(diff: f64, beta: f64) -> f64 {
    let a = diff.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

/// Mean-reduced Smooth L1 between `pred` and `target`.
pub fn smooth_l1(pred: &[f64], target: &[f64], beta: f64) -> Result<f64> {
    ensure_dim("smooth_l1", pred.len(), target.len())?;
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    if beta <= 0.0 {
        return Err(Error::InvalidArgument("smooth_l1 beta must be positive".into()));
    }
    let s = pred
        .iter()
        .zip(target)
        .fold(0.0, |acc, (p, t)| acc + smooth_l1_elem(p - t, beta));
    Ok(s / pred.len() as f64)
}

pub(crate) fn smooth_l1_grad(diff: f64, beta: f64) -> f64 {
    if diff.abs() < beta {
        diff / beta
    } else {
        diff.signum()
    }
}

/// `-Σ p log max(q, 1e-12)`.
pub fn cross_entropy(p_target: &ProbVec, q_pred: &ProbVec) -> Result<f64> {
    ensure_dim("cross_entropy", p_target.len(), q_pred.len())?;
    Ok(cross_entropy_raw(p_target.as_slice(), q_pred.as_slice()))
}

pub(crate) fn cross_entropy_raw(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .fold(0.0, |acc, (&pi, &qi)| acc - pi * qi.max(LOG_CLAMP).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_symmetric_and_saturated() {
        let p = softmax(&[0.0, 0.0, 0.0], 1.0).unwrap();
        for &v in p.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[1000.0, 0.0, 0.0], 1.0).unwrap();
        assert!((p.get(0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_matches_extended_precision_oracle() {
        // exp(x)/sum at 128-bit precision
        let want = [
            0.090_030_573_170_380_457_998,
            0.244_728_471_054_797_652_473,
            0.665_240_955_774_821_889_529,
        ];
        let p = softmax(&[1.0, 2.0, 3.0], 1.0).unwrap();
        for (a, b) in p.as_slice().iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(softmax(&[], 1.0), Err(Error::EmptyInput)));
        assert!(matches!(
            softmax(&[1.0, f64::NAN], 1.0),
            Err(Error::NonFiniteLogit)
        ));
        assert_eq!(
            softmax(&[f64::INFINITY], 1.0).unwrap_err().to_string(),
            "non-finite logit"
        );
    }

    #[test]
    fn attention_identity_and_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Matrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let k = Matrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let v = Matrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let out = masked_attention(&q, &k, &v, &BoolMatrix::identity(4)).unwrap();
        assert_eq!(out, v);

        let k_same = Matrix::from_fn(4, 3, |_, c| c as f64);
        let out = masked_attention(&q, &k_same, &v, &BoolMatrix::lower_triangular(4)).unwrap();
        for i in 0..4 {
            for c in 0..2 {
                let mean = (0..=i).map(|j| v.get(j, c)).sum::<f64>() / (i + 1) as f64;
                assert!((out.get(i, c) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attention_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = Matrix::from_fn(4, 4, |_, _| rng.random_range(-2.0..2.0));
        let k = Matrix::from_fn(4, 4, |_, _| rng.random_range(-2.0..2.0));
        let v = Matrix::from_fn(4, 4, |_, _| rng.random_range(-2.0..2.0));
        let mask = BoolMatrix::from_fn(4, 4, |r, c| r == c || (r + c) % 3 == 0);
        let out = masked_attention(&q, &k, &v, &mask).unwrap();
        for i in 0..4 {
            let mut w = [0.0f64; 4];
            for j in 0..4 {
                if mask.get(i, j) {
                    let s: f64 = (0..4).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / 2.0;
                    w[j] = s.exp();
                }
            }
            let z: f64 = w.iter().sum();
            for c in 0..4 {
                let want: f64 = (0..4).map(|j| w[j] / z * v.get(j, c)).sum();
                assert!((out.get(i, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_errors() {
        let m = Matrix::zeros(2, 2);
        let mask = BoolMatrix::from_fn(2, 2, |r, c| r == 0 && c == 0);
        assert!(matches!(
            masked_attention(&m, &m, &m, &mask),
            Err(Error::EmptyMaskRow(1))
        ));
        let mask3 = BoolMatrix::identity(3);
        assert!(matches!(
            masked_attention(&m, &m, &m, &mask3),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn smooth_l1_cases() {
        assert_eq!(smooth_l1(&[1.0, 2.0], &[1.0, 2.0], 1.0).unwrap(), 0.0);
        assert!((smooth_l1(&[1.0], &[0.0], 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((smooth_l1(&[3.0], &[0.0], 1.0).unwrap() - 2.5).abs() < 1e-15);
        assert!(smooth_l1(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let a = ProbVec::one_hot(3, 1).unwrap();
        assert!(cross_entropy(&a, &a).unwrap() <= 1e-9);
        let u = ProbVec::uniform(4).unwrap();
        assert!((cross_entropy(&u, &u).unwrap() - 4f64.ln()).abs() < 1e-14);
        let p = ProbVec::new(vec![0.7, 0.3]).unwrap();
        let q = ProbVec::new(vec![0.5, 0.5]).unwrap();
        assert!((cross_entropy(&p, &q).unwrap() - 2f64.ln()).abs() < 1e-14);
        assert!(cross_entropy(&p, &u).is_err());
    }

    #[test]
    fn top_k_tie_break() {
        assert_eq!(top_k_indices(&[0.1, 0.3, 0.3, 0.2], 3), vec![1, 2, 3]);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(x in proptest::collection::vec(-50.0f64..50.0, 1..40), t in 0.05f64..10.0) {
            let p = softmax(&x, t).unwrap();
            let s: f64 = p.as_slice().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert_eq!(p.argmax(), argmax(&x));
        }

        #[test]
        fn causal_attention_is_prefix_consistent(seed in 0u64..1000, n in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = Matrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
            let k = Matrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
            let v = Matrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
            let full = masked_attention(&q, &k, &v, &BoolMatrix::lower_triangular(n)).unwrap();
            for i in 0..n {
                let take = |m: &Matrix| Matrix::from_fn(i + 1, m.cols(), |r, c| m.get(r, c));
                let qi = Matrix::from_fn(1, 3, |_, c| q.get(i, c));
                let out = masked_attention(&qi, &take(&k), &take(&v), &BoolMatrix::from_fn(1, i + 1, |_, _| true)).unwrap();
                prop_assert_eq!(out.row(0), full.row(i));
            }
        }

        #[test]
        fn losses_non_negative(a in proptest::collection::vec(-5.0f64..5.0, 1..10), b in proptest::collection::vec(-5.0f64..5.0, 1..10)) {
            let n = a.len().min(b.len());
            prop_assert!(smooth_l1(&a[..n], &b[..n], 1.0).unwrap() >= 0.0);
            let p = softmax(&a[..n], 1.0).unwrap();
            let q = softmax(&b[..n], 1.0).unwrap();
            let ce = cross_entropy(&p, &q).unwrap();
            let h = cross_entropy(&p, &p).unwrap();
            prop_assert!(ce >= h - 1e-12);
        }
    }
}
