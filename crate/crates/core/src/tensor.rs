//! Dense row-major tensors and their forward kernels.
//!
//! Kernels here are pure functions of their inputs. Differentiation lives in
//! [`crate::graph`], which records these kernels and replays their adjoints.

use thiserror::Error;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const TNSR_MAGIC: &[u8; 4] = b"TNSR";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("zero-length dimension in header")]
    ZeroDim,
}

/// Splits `shape` around `axis` into (outer, axis length, inner) strides.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero-length dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| S::lit(v)).collect())
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn matrix(rows: &[&[f64]]) -> Self {
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged matrix");
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_f64(vec![rows.len(), cols], &data).expect("non-empty matrix")
    }

    pub fn vector(data: &[f64]) -> Self {
        Self::from_f64(vec![data.len()], data).expect("non-empty vector")
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, v: S) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n])
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: Vec<usize>) -> Result<Self> {
        Self::full(shape, S::one())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<S>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient of length {} for tensor of {} elements",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<S> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    fn like(&self, data: Vec<S>) -> Self {
        Self {
            shape: self.shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::shape(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::shape(format!("{what} expects a matrix, got shape {s:?}"))),
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let mut t = Self::new(shape, self.data.clone())?;
        t.requires_grad = self.requires_grad;
        Ok(t)
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {:?} @ {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == S::zero() {
                    continue;
                }
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Self::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(vec![n, m], out)
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        if self.shape != rhs.shape {
            return Err(Error::shape(format!(
                "add of mismatched shapes {:?} and {:?}",
                self.shape, rhs.shape
            )));
        }
        Ok(self.like(
            self.data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        ))
    }

    /// Adds a vector along the last axis of every leading index.
    pub fn add_bias(&self, bias: &Self) -> Result<Self> {
        let d = *self.shape.last().unwrap_or(&1);
        if bias.shape != [d] {
            return Err(Error::shape(format!(
                "bias of shape {:?} does not match last axis of {:?}",
                bias.shape, self.shape
            )));
        }
        let data = self
            .data
            .chunks(d)
            .flat_map(|row| row.iter().zip(&bias.data).map(|(&x, &b)| x + b))
            .collect();
        Ok(self.like(data))
    }

    pub fn scale(&self, c: S) -> Self {
        self.like(self.data.iter().map(|&x| x * c).collect())
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        self.check_axis(axis)?;
        let (outer, n, inner) = split_axis(&self.shape, axis);
        let mut out = vec![S::zero(); self.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n)
                    .map(|j| self.data[idx(j)])
                    .fold(S::neg_infinity(), S::max);
                let mut total = S::zero();
                for j in 0..n {
                    let e = (self.data[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total = total + e;
                }
                for j in 0..n {
                    out[idx(j)] = out[idx(j)] / total;
                }
            }
        }
        Ok(self.like(out))
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: S) -> Result<Self> {
        Ok(self.layer_norm_parts(gamma, beta, eps)?.0)
    }

    /// Returns (output, normalized input, per-row inverse std).
    pub(crate) fn layer_norm_parts(
        &self,
        gamma: &Self,
        beta: &Self,
        eps: S,
    ) -> Result<(Self, Vec<S>, Vec<S>)> {
        if eps <= S::zero() {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let d = *self.shape.last().unwrap_or(&1);
        if gamma.shape != [d] || beta.shape != [d] {
            return Err(Error::shape(format!(
                "layer_norm over width {d} got gamma {:?}, beta {:?}",
                gamma.shape, beta.shape
            )));
        }
        let width = S::from_usize(d).unwrap();
        let mut out = Vec::with_capacity(self.data.len());
        let mut xhat = Vec::with_capacity(self.data.len());
        let mut inv_std = Vec::with_capacity(self.data.len() / d);
        for row in self.data.chunks(d) {
            let mean = row.iter().copied().sum::<S>() / width;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / width;
            let r = (var + eps).sqrt().recip();
            inv_std.push(r);
            for (j, &x) in row.iter().enumerate() {
                let h = (x - mean) * r;
                xhat.push(h);
                out.push(h * gamma.data[j] + beta.data[j]);
            }
        }
        Ok((self.like(out), xhat, inv_std))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&self) -> Self {
        self.like(self.data.iter().map(|&x| gelu(x)).collect())
    }

    pub fn concat(a: &Self, b: &Self, axis: usize) -> Result<Self> {
        a.check_axis(axis)?;
        let compatible = a.rank() == b.rank()
            && a.shape
                .iter()
                .zip(&b.shape)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::shape(format!(
                "cannot concat {:?} and {:?} along axis {axis}",
                a.shape, b.shape
            )));
        }
        let (outer, na, inner) = split_axis(&a.shape, axis);
        let nb = b.shape[axis];
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        for o in 0..outer {
            data.extend_from_slice(&a.data[o * na * inner..(o + 1) * na * inner]);
            data.extend_from_slice(&b.data[o * nb * inner..(o + 1) * nb * inner]);
        }
        let mut shape = a.shape.clone();
        shape[axis] = na + nb;
        Self::new(shape, data)
    }

    /// The slice `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        self.check_axis(axis)?;
        if len == 0 || start + len > self.shape[axis] {
            return Err(Error::shape(format!(
                "narrow {start}..{} out of range for axis {axis} of {:?}",
                start + len,
                self.shape
            )));
        }
        let (outer, n, inner) = split_axis(&self.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Self::new(shape, data)
    }

    /// Mean along `axis`, keeping it as a length-1 dimension.
    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        self.check_axis(axis)?;
        let (outer, n, inner) = split_axis(&self.shape, axis);
        let denom = S::from_usize(n).unwrap();
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    data[o * inner + i] = data[o * inner + i] + self.data[(o * n + j) * inner + i];
                }
            }
        }
        for v in &mut data {
            *v = *v / denom;
        }
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        Self::new(shape, data)
    }

    pub fn sum(&self) -> Self {
        Self::scalar(self.data.iter().copied().sum())
    }

    /// Index of the largest element; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn to_tnsr_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.rank() + S::BYTES * self.numel());
        out.extend_from_slice(TNSR_MAGIC);
        out.extend_from_slice(&S::TNSR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rank() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    /// Decodes one TNSR blob from the front of `bytes`, returning the tensor
    /// and the number of bytes consumed.
    pub fn from_tnsr_bytes(bytes: &[u8]) -> Result<(Self, usize), DecodeError> {
        let need = |n: usize| {
            if bytes.len() < n {
                Err(DecodeError::Truncated {
                    need: n,
                    have: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        need(12)?;
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != TNSR_MAGIC {
            return Err(DecodeError::BadMagic(magic));
        }
        let version = u32_at(4);
        if version != S::TNSR_VERSION {
            return Err(DecodeError::Version {
                found: version,
                expected: S::TNSR_VERSION,
            });
        }
        let rank = u32_at(8) as usize;
        need(12 + 4 * rank)?;
        let shape: Vec<usize> = (0..rank).map(|i| u32_at(12 + 4 * i) as usize).collect();
        if shape.contains(&0) {
            return Err(DecodeError::ZeroDim);
        }
        let n: usize = shape.iter().product();
        let start = 12 + 4 * rank;
        let end = start + n * S::BYTES;
        need(end)?;
        let data = bytes[start..end]
            .chunks_exact(S::BYTES)
            .map(S::read_le)
            .collect();
        Ok((
            Self {
                shape,
                data,
                requires_grad: false,
                grad: None,
            },
            end,
        ))
    }
}

pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    x * normal_cdf(x)
}

pub(crate) fn normal_cdf<S: Scalar>(x: S) -> S {
    S::lit(0.5) * (S::one() + (x * S::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn normal_pdf<S: Scalar>(x: S) -> S {
    let inv_sqrt_2pi = S::lit(0.398_942_280_401_432_7);
    inv_sqrt_2pi * (-(x * x) * S::lit(0.5)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f32> {
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_f64(shape, &data).unwrap()
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert_eq!(Tensor::<f32>::scalar(3.0).numel(), 1);
    }

    #[test]
    fn matmul_identity_and_dot() {
        let eye = Tensor::<f32>::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = Tensor::<f32>::matrix(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(eye.matmul(&b).unwrap(), b);

        let r = Tensor::<f32>::matrix(&[&[1.0, 2.0]]);
        let c = Tensor::<f32>::matrix(&[&[3.0], &[4.0]]);
        assert_eq!(r.matmul(&c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random(&mut rng, vec![3, 4], -1.0, 1.0);
            let b = random(&mut rng, vec![4, 2], -1.0, 1.0);
            let got = a.matmul(&b).unwrap();
            for i in 0..3 {
                for j in 0..2 {
                    let mut acc = 0.0f64;
                    for k in 0..4 {
                        acc += a.data()[i * 4 + k] as f64 * b.data()[k * 2 + j] as f64;
                    }
                    assert!((got.data()[i * 2 + j] as f64 - acc).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn matmul_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(vec![2, 3]).unwrap();
        let b = Tensor::<f32>::zeros(vec![2, 3]).unwrap();
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] @ [2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let a = random(&mut rng, vec![3, 5], -1.0, 1.0);
            let b = random(&mut rng, vec![5, 4], -1.0, 1.0);
            let c = random(&mut rng, vec![4, 2], -1.0, 1.0);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                assert!((x - y).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn softmax_known_values() {
        let half = Tensor::<f32>::vector(&[0.0, 0.0]).softmax(0).unwrap();
        assert_eq!(half.data(), &[0.5, 0.5]);

        // exp(k) / (e + e^2 + e^3), evaluated in extended precision
        let s = Tensor::<f64>::vector(&[1.0, 2.0, 3.0]).softmax(0).unwrap();
        let expected = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
        for (g, e) in s.data().iter().zip(expected) {
            assert!((g - e).abs() < 1e-12);
        }

        let shifted = Tensor::<f64>::vector(&[101.0, 102.0, 103.0]).softmax(0).unwrap();
        for (a, b) in s.data().iter().zip(shifted.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let rows = rng.random_range(1..6usize);
            let cols = rng.random_range(1..12usize);
            let x = random(&mut rng, vec![rows, cols], -100.0, 100.0);
            let y = x.softmax(1).unwrap();
            for row in y.data().chunks(cols) {
                let total: f32 = row.iter().sum();
                assert!((total - 1.0).abs() <= 1e-6, "row sum {total}");
                // entries 200 below the row max underflow to exactly 0 in f32
                assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
            let wide = x.cast::<f64>().softmax(1).unwrap();
            for row in wide.data().chunks(cols) {
                let total: f64 = row.iter().sum();
                assert!((total - 1.0).abs() <= 1e-12);
                assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
            }
        }
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        assert!(Tensor::<f32>::vector(&[1.0]).softmax(1).is_err());
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = Tensor::<f64>::matrix(&[&[0.0, 1.0], &[0.0, 3.0]]);
        let y = x.softmax(0).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-12);
        assert!((y.data()[1] + y.data()[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::<f64>::ones(vec![3]).unwrap();
        let zeros = Tensor::<f64>::zeros(vec![3]).unwrap();
        let x = Tensor::<f64>::matrix(&[&[1.0, 1.0, 1.0]]);
        assert_eq!(x.layer_norm(&ones, &zeros, 1e-5).unwrap().data(), &[0.0, 0.0, 0.0]);

        let g2 = Tensor::<f64>::ones(vec![2]).unwrap();
        let b2 = Tensor::<f64>::zeros(vec![2]).unwrap();
        let y = Tensor::<f64>::matrix(&[&[-1.0, 1.0]])
            .layer_norm(&g2, &b2, 1e-12)
            .unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);

        assert!(x.layer_norm(&g2, &b2, 1e-5).is_err());
        assert!(x.layer_norm(&ones, &zeros, 0.0).is_err());
    }

    #[test]
    fn layer_norm_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, vec![4, 6], -3.0, 3.0);
        let g = random(&mut rng, vec![6], 0.5, 1.5);
        let b = random(&mut rng, vec![6], -0.5, 0.5);
        let y = x.layer_norm(&g, &b, 1e-5).unwrap();
        for r in 0..4 {
            let row: Vec<f64> = x.data()[r * 6..(r + 1) * 6].iter().map(|&v| v as f64).collect();
            let mu = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 6.0;
            for j in 0..6 {
                let e = (row[j] - mu) / (var + 1e-5).sqrt() * g.data()[j] as f64
                    + b.data()[j] as f64;
                assert!((y.data()[r * 6 + j] as f64 - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gelu_values() {
        let t = Tensor::<f64>::vector(&[0.0, 1.0, 12.0, -12.0]).gelu();
        assert_eq!(t.data()[0], 0.0);
        // Phi(1) = 0.841344746068543 (erfc-based reference)
        assert!((t.data()[1] - 0.841344746068543).abs() < 1e-12);
        assert!((t.data()[2] - 12.0).abs() < 1e-12);
        assert!(t.data()[3].abs() < 1e-12);

        let grid: Vec<f64> = (0..400).map(|i| -0.75 + i as f64 * 0.01).collect();
        let g = Tensor::<f64>::vector(&grid).gelu();
        // GELU has its minimum near -0.7518; it is nondecreasing to the right of it
        assert!(g.data().windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn concat_and_narrow() {
        let a = Tensor::<f32>::matrix(&[&[1.0]]);
        let b = Tensor::<f32>::matrix(&[&[2.0]]);
        let c = Tensor::concat(&a, &b, 0).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[1.0, 2.0]);

        let a = Tensor::<f32>::zeros(vec![2, 3]).unwrap();
        let b = Tensor::<f32>::ones(vec![4, 3]).unwrap();
        let c = Tensor::concat(&a, &b, 0).unwrap();
        assert_eq!(c.shape(), &[6, 3]);
        assert_eq!(&c.data()[..6], &[0.0; 6]);
        assert_eq!(&c.data()[6..], &[1.0; 12]);
        assert_eq!(c.narrow(0, 2, 4).unwrap(), b);
        assert!(Tensor::concat(&a, &b, 1).is_err());

        let m = Tensor::<f32>::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let wide = Tensor::concat(&m, &m, 1).unwrap();
        assert_eq!(wide.data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
        assert_eq!(wide.narrow(1, 2, 2).unwrap(), m);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        let t = Tensor::<f32>::vector(&[0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 3.0, 0.0]);
        assert_eq!(t.argmax(), 2);
    }

    #[test]
    fn tnsr_header_layout() {
        let t = Tensor::<f32>::matrix(&[&[1.0, 2.0, 3.0]]);
        let bytes = t.to_tnsr_bytes();
        assert_eq!(&bytes[..4], b"TNSR");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 3);
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 32);

        let (back, used) = Tensor::<f32>::from_tnsr_bytes(&bytes).unwrap();
        assert_eq!(used, 32);
        assert_eq!(back, t);
        assert!(matches!(
            Tensor::<f32>::from_tnsr_bytes(&bytes[..30]),
            Err(DecodeError::Truncated { .. })
        ));
        assert!(matches!(
            Tensor::<f64>::from_tnsr_bytes(&bytes),
            Err(DecodeError::Version { found: 1, expected: 2 })
        ));
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn tnsr_round_trip_is_bit_exact(
                dims in proptest::collection::vec(1usize..5, 0..4),
                seed in any::<u64>(),
            ) {
                let n: usize = dims.iter().product();
                let data: Vec<f32> = (0..n)
                    .map(|i| f32::from_bits((seed as u32).wrapping_add((i as u32).wrapping_mul(2654435761)) & 0x7f7f_ffff))
                    .collect();
                let t = Tensor::new(dims, data).unwrap();
                let (back, _) = Tensor::<f32>::from_tnsr_bytes(&t.to_tnsr_bytes()).unwrap();
                prop_assert_eq!(back.shape(), t.shape());
                let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                prop_assert!(same);
            }
        }
    }
}
