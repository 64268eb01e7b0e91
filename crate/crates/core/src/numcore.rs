//! Deterministic numeric substrate: seeded randomness, dense linear heads with
//! analytic gradients, plain SGD and EMA parameter tracking.
//!
//! All arithmetic is `f64`.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, first_non_finite, Error, Result};

/// Counter-based random stream.
///
/// A `(seed, stream)` pair addresses an independent ChaCha keystream, so
/// sub-streams derived from one master seed never overlap.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`. Uses 64-bit sampling on every platform.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below called with n = 0");
        self.inner.random_range(0..n as u64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{rows}x{cols} = {} entries", rows * cols),
                format!("{} entries", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("row {i} of length {cols}"),
                    format!("length {}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Entries drawn i.i.d. from `N(0, std^2)`.
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self[i] += scale * v` for row `i`.
    pub fn add_scaled_row(&mut self, i: usize, scale: f64, v: &[f64]) {
        for (w, x) in self.row_mut(i).iter_mut().zip(v) {
            *w += scale * x;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                "Matrix::add_assign",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Dense affine map `out = W f + b`. The classification head has no bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub weights: Matrix,
    pub bias: Option<Vec<f64>>,
}

/// Parameter gradient of a [`LinearHead`], same layout as the head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrad {
    pub weights: Matrix,
    pub bias: Option<Vec<f64>>,
}

impl HeadGrad {
    pub fn zeros_like(head: &LinearHead) -> Self {
        Self {
            weights: Matrix::zeros(head.out_dim(), head.in_dim()),
            bias: head.bias.as_ref().map(|b| vec![0.0; b.len()]),
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.weights.scale_in_place(s);
        if let Some(b) = self.bias.as_mut() {
            b.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Adds `scale * grad_out ⊗ feature` (and `scale * grad_out` to the bias).
    pub fn accumulate(&mut self, feature: &[f64], grad_out: &[f64], scale: f64) {
        for (i, &g) in grad_out.iter().enumerate() {
            if g != 0.0 {
                self.weights.add_scaled_row(i, scale * g, feature);
            }
        }
        if let Some(b) = self.bias.as_mut() {
            for (bi, g) in b.iter_mut().zip(grad_out) {
                *bi += scale * g;
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.weights.as_slice().to_vec();
        if let Some(b) = &self.bias {
            out.extend_from_slice(b);
        }
        out
    }
}

impl LinearHead {
    pub fn classifier(weights: Matrix) -> Result<Self> {
        ensure_finite("LinearHead weights", weights.as_slice())?;
        Ok(Self {
            weights,
            bias: None,
        })
    }

    pub fn with_bias(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::shape(
                "LinearHead bias",
                weights.rows(),
                bias.len(),
            ));
        }
        ensure_finite("LinearHead weights", weights.as_slice())?;
        ensure_finite("LinearHead bias", &bias)?;
        Ok(Self {
            weights,
            bias: Some(bias),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    fn check_input(&self, feature: &[f64]) -> Result<()> {
        if feature.len() != self.in_dim() {
            return Err(Error::shape(
                "linear_forward feature",
                format!("length {} (head is {}x{})", self.in_dim(), self.out_dim(), self.in_dim()),
                format!("length {}", feature.len()),
            ));
        }
        ensure_finite("linear_forward feature", feature)
    }

    /// `output[i] = dot(row i, feature) + bias[i]`.
    pub fn forward(&self, feature: &[f64]) -> Result<Vec<f64>> {
        self.check_input(feature)?;
        Ok(self
            .weights
            .iter_rows()
            .enumerate()
            .map(|(i, row)| dot(row, feature) + self.bias.as_ref().map_or(0.0, |b| b[i]))
            .collect())
    }

    /// Adds `d out / d params` contracted with `grad_out` into `acc`.
    pub fn accumulate_param_grad(&self, feature: &[f64], grad_out: &[f64], acc: &mut HeadGrad) {
        debug_assert_eq!(grad_out.len(), self.out_dim());
        for (i, &g) in grad_out.iter().enumerate() {
            if g != 0.0 {
                acc.weights.add_scaled_row(i, g, feature);
            }
        }
        if let Some(b) = acc.bias.as_mut() {
            for (bi, g) in b.iter_mut().zip(grad_out) {
                *bi += g;
            }
        }
    }

    /// `W^T grad_out`, the gradient with respect to the input feature.
    pub fn input_grad(&self, grad_out: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.in_dim()];
        for (row, &g) in self.weights.iter_rows().zip(grad_out) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += g * w;
            }
        }
        out
    }

    /// Full backward pass: parameter gradient and input gradient.
    pub fn backward(&self, feature: &[f64], grad_out: &[f64]) -> Result<(HeadGrad, Vec<f64>)> {
        self.check_input(feature)?;
        if grad_out.len() != self.out_dim() {
            return Err(Error::shape("linear backward grad_out", self.out_dim(), grad_out.len()));
        }
        let mut acc = HeadGrad::zeros_like(self);
        self.accumulate_param_grad(feature, grad_out, &mut acc);
        Ok((acc, self.input_grad(grad_out)))
    }

    pub fn num_params(&self) -> usize {
        self.weights.as_slice().len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weights.as_slice());
        if let Some(b) = &self.bias {
            out.extend_from_slice(b);
        }
    }

    /// Reads parameters back from `flat`, returning the unread tail.
    pub fn read_params<'a>(&mut self, flat: &'a [f64]) -> Result<&'a [f64]> {
        if flat.len() < self.num_params() {
            return Err(Error::shape("LinearHead::read_params", self.num_params(), flat.len()));
        }
        let n = self.weights.as_slice().len();
        self.weights.as_mut_slice().copy_from_slice(&flat[..n]);
        let mut rest = &flat[n..];
        if let Some(b) = self.bias.as_mut() {
            let m = b.len();
            b.copy_from_slice(&rest[..m]);
            rest = &rest[m..];
        }
        Ok(rest)
    }

    pub fn apply_sgd(&mut self, grad: &HeadGrad, lr: f64) -> Result<()> {
        sgd_step(self.weights.as_mut_slice(), grad.weights.as_slice(), lr)?;
        match (self.bias.as_mut(), grad.bias.as_ref()) {
            (Some(b), Some(g)) => sgd_step(b, g, lr),
            (None, None) => Ok(()),
            _ => Err(Error::shape("LinearHead::apply_sgd", "matching bias layout", "mismatched bias")),
        }
    }
}

/// Functional SGD: `params - lr * grads`.
pub fn sgd_update(params: &[f64], grads: &[f64], lr: f64) -> Result<Vec<f64>> {
    let mut out = params.to_vec();
    sgd_step(&mut out, grads, lr)?;
    Ok(out)
}

/// In-place SGD step. Rejects non-finite gradients before touching `params`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("sgd_update", params.len(), grads.len()));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    if let Some(index) = first_non_finite(grads) {
        return Err(Error::NonFinite {
            context: "sgd_update gradient",
            index,
        });
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

/// Teacher parameters tracked as an exponential moving average of the student.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub teacher: Vec<f64>,
    pub momentum: f64,
}

impl EmaState {
    pub fn new(teacher: Vec<f64>, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "EMA momentum must lie in [0, 1), got {momentum}"
            )));
        }
        ensure_finite("EMA teacher", &teacher)?;
        Ok(Self { teacher, momentum })
    }

    /// `teacher = m * teacher + (1 - m) * student`.
    pub fn update(&mut self, student: &[f64]) -> Result<()> {
        self.update_with_momentum(student, self.momentum)
    }

    /// One update with an explicit momentum; `0` copies the student.
    pub fn update_with_momentum(&mut self, student: &[f64], m: f64) -> Result<()> {
        if student.len() != self.teacher.len() {
            return Err(Error::shape("ema_update", self.teacher.len(), student.len()));
        }
        if !(0.0..1.0).contains(&m) {
            return Err(Error::InvalidArgument(format!("EMA momentum must lie in [0, 1), got {m}")));
        }
        for (t, s) in self.teacher.iter_mut().zip(student) {
            *t = m * *t + (1.0 - m) * s;
        }
        Ok(())
    }
}

pub fn ema_update(state: &EmaState, student: &[f64]) -> Result<EmaState> {
    let mut next = state.clone();
    next.update(student)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_identity_and_bias() {
        let head = LinearHead::with_bias(
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            vec![0.0, 0.0],
        )
        .unwrap();
        assert_eq!(head.forward(&[3.0, 4.0]).unwrap(), vec![3.0, 4.0]);

        let head = LinearHead::with_bias(Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(), vec![0.5]).unwrap();
        assert_eq!(head.forward(&[1.0, 2.0]).unwrap(), vec![3.5]);
    }

    #[test]
    fn forward_rejects_wrong_length() {
        let head = LinearHead::classifier(Matrix::zeros(3, 2)).unwrap();
        let err = head.forward(&[1.0, 2.0, 3.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3x2"), "{msg}");
        assert!(msg.contains("length 3"), "{msg}");
    }

    #[test]
    fn sgd_examples() {
        assert_eq!(sgd_update(&[1.0], &[2.0], 0.1).unwrap()[0], 1.0 - 0.1 * 2.0);
        assert_eq!(sgd_update(&[1.5, -2.0], &[0.0, 0.0], 0.3).unwrap(), vec![1.5, -2.0]);
        assert_eq!(sgd_update(&[0.0, 0.0], &[1.0, -1.0], 0.5).unwrap(), vec![-0.5, 0.5]);
    }

    #[test]
    fn sgd_rejects_non_finite_gradients() {
        let err = sgd_update(&[0.0, 0.0], &[1.0, f64::NAN], 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
        assert!(sgd_update(&[0.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn ema_examples() {
        let s = ema_update(&EmaState::new(vec![1.0], 0.9).unwrap(), &[0.0]).unwrap();
        assert!((s.teacher[0] - 0.9).abs() < 1e-15);

        let s = ema_update(&EmaState::new(vec![7.0, -3.0], 0.0).unwrap(), &[0.25, 4.0]).unwrap();
        assert_eq!(s.teacher, vec![0.25, 4.0]);

        assert!(EmaState::new(vec![0.0], 1.0).is_err());
        assert!(EmaState::new(vec![0.0], 0.5).unwrap().update(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn ema_closed_form() {
        let m: f64 = 0.999;
        let (t0, s) = (2.5, -1.25);
        let mut state = EmaState::new(vec![t0], m).unwrap();
        for k in 1..=3000 {
            state.update(&[s]).unwrap();
            let expected = m.powi(k) * t0 + (1.0 - m.powi(k)) * s;
            assert!((state.teacher[0] - expected).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn rng_is_reproducible_and_streams_differ() {
        let a: Vec<f64> = {
            let mut r = Rng::with_stream(42, 3);
            (0..16).map(|_| r.uniform()).collect()
        };
        let b: Vec<f64> = {
            let mut r = Rng::with_stream(42, 3);
            (0..16).map(|_| r.uniform()).collect()
        };
        let c: Vec<f64> = {
            let mut r = Rng::with_stream(42, 4);
            (0..16).map(|_| r.uniform()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|x| (0.0..1.0).contains(x)));
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut r = Rng::new(9);
        let mut v: Vec<usize> = (0..50).collect();
        r.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn flat_params_round_trip() {
        let mut rng = Rng::new(1);
        let head = LinearHead::with_bias(Matrix::random_normal(4, 3, 1.0, &mut rng), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut flat = Vec::new();
        head.write_params(&mut flat);
        let mut other = LinearHead::with_bias(Matrix::zeros(4, 3), vec![0.0; 4]).unwrap();
        let rest = other.read_params(&flat).unwrap();
        assert!(rest.is_empty());
        assert_eq!(head, other);
    }
}
