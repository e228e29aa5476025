//! Dense row-major tensors and the handful of kernels the training code needs.
//!
//! All reductions and products run in a fixed loop order so results are
//! bit-reproducible across runs and thread counts. Every op checks its output
//! for NaN/Inf and reports it as [`Error::NonFinite`].

use crate::error::{Error, Result};
use crate::rng::Rng;

#[cfg(not(feature = "f32"))]
pub type Scalar = f64;
#[cfg(feature = "f32")]
pub type Scalar = f32;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Scalar>,
}

fn check_finite(data: &[Scalar], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Scalar>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || len != data.len() {
            return Err(Error::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        check_finite(&data, "Tensor::new")?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn vector(data: Vec<Scalar>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<Scalar>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian entries with the given standard deviation.
    pub fn gaussian(rng: &mut Rng, shape: &[usize], std: Scalar) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.normal() as Scalar * std).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// `[fan_in x fan_out]` weight matrix with std `1/sqrt(fan_in)`.
    pub fn gaussian_init(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        let std = 1.0 / (fan_in as Scalar).sqrt();
        Self::gaussian(rng, &[fan_in, fan_out], std)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Scalar] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Scalar> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() > 1 {
            self.shape[1]
        } else {
            1
        }
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: vec![0, 0],
            })
        }
    }

    fn require_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            })
        }
    }

    fn mismatch(&self, other: &Tensor, op: &'static str) -> Error {
        Error::ShapeMismatch {
            op,
            left: self.shape.clone(),
            right: other.shape.clone(),
        }
    }

    /// `self · other` for `[m x k] · [k x n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(self.mismatch(other, "matmul"));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                let b = &other.data[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        check_finite(&out, "matmul")?;
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `selfᵀ · other` for `[k x m]ᵀ · [k x n]`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.require_matrix("matmul_tn")?;
        let (k2, n) = other.require_matrix("matmul_tn")?;
        if k != k2 {
            return Err(self.mismatch(other, "matmul_tn"));
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let b = &other.data[p * n..(p + 1) * n];
            for i in 0..m {
                let a = self.data[p * m + i];
                let row = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        check_finite(&out, "matmul_tn")?;
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self · otherᵀ` for `[m x k] · [n x k]ᵀ`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_matrix("matmul_nt")?;
        let (n, k2) = other.require_matrix("matmul_nt")?;
        if k != k2 {
            return Err(self.mismatch(other, "matmul_nt"));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b = &other.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (&x, &y) in a.iter().zip(b) {
                    acc += x * y;
                }
                out[i * n + j] = acc;
            }
        }
        check_finite(&out, "matmul_nt")?;
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.require_matrix("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Adds a length-`n` bias to every row of an `[m x n]` matrix.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, n) = self.require_matrix("add_bias")?;
        if bias.len() != n {
            return Err(self.mismatch(bias, "add_bias"));
        }
        let mut out = self.data.clone();
        for row in out.chunks_exact_mut(n) {
            for (o, &b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        check_finite(&out, "add_bias")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Column sums of an `[m x n]` matrix, rows accumulated in order.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (_, n) = self.require_matrix("sum_rows")?;
        let mut out = vec![0.0; n];
        for row in self.data.chunks_exact(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        check_finite(&out, "sum_rows")?;
        Ok(Tensor {
            shape: vec![n],
            data: out,
        })
    }

    pub fn relu(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v.max(0.0)).collect(),
        }
    }

    /// Passes `grad` through where `self > 0`; the subgradient at 0 is 0.
    pub fn relu_backward(&self, grad: &Tensor) -> Result<Tensor> {
        self.require_same_shape(grad, "relu_backward")?;
        let data = self
            .data
            .iter()
            .zip(&grad.data)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, s: Scalar) -> Result<Tensor> {
        let data: Vec<Scalar> = self.data.iter().map(|&v| v * s).collect();
        check_finite(&data, "scale")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// `self += alpha * x`.
    pub fn axpy(&mut self, alpha: Scalar, x: &Tensor) -> Result<()> {
        self.require_same_shape(x, "axpy")?;
        for (o, &v) in self.data.iter_mut().zip(&x.data) {
            *o += alpha * v;
        }
        check_finite(&self.data, "axpy")
    }

    fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(Scalar, Scalar) -> Scalar,
    ) -> Result<Tensor> {
        self.require_same_shape(other, op)?;
        let data: Vec<Scalar> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        check_finite(&data, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn sum(&self) -> Scalar {
        self.data.iter().fold(0.0, |acc, &v| acc + v)
    }

    pub fn mean(&self) -> Scalar {
        self.sum() / self.data.len() as Scalar
    }

    pub fn dot(&self, other: &Tensor) -> Result<Scalar> {
        self.require_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (&a, &b)| acc + a * b))
    }

    /// Row-wise argmax of an `[m x n]` matrix; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let (_, n) = self.require_matrix("argmax_rows")?;
        Ok(self
            .data
            .chunks_exact(n)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Gathers the given rows of a matrix into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (m, n) = self.require_matrix("select_rows")?;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(Error::ShapeMismatch {
                    op: "select_rows",
                    left: self.shape.clone(),
                    right: vec![i],
                });
            }
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Tensor::new(vec![indices.len(), n], data)
    }
}

/// Mean softmax cross-entropy over the rows of `logits` and its gradient
/// `(softmax - onehot) / m`. Rows are shifted by their max before
/// exponentiation.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(Scalar, Tensor)> {
    let (m, c) = logits.require_matrix("softmax_xent")?;
    if labels.len() != m {
        return Err(Error::ShapeMismatch {
            op: "softmax_xent",
            left: logits.shape.clone(),
            right: vec![labels.len()],
        });
    }
    let inv_m = 1.0 / m as Scalar;
    let mut grad = vec![0.0; m * c];
    let mut total = 0.0;
    for (i, (row, &label)) in logits.data.chunks_exact(c).zip(labels).enumerate() {
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
        let g = &mut grad[i * c..(i + 1) * c];
        let mut z = 0.0;
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - max).exp();
            z += *gj;
        }
        total += z.ln() - (row[label] - max);
        for gj in g.iter_mut() {
            *gj = *gj / z * inv_m;
        }
        g[label] -= inv_m;
    }
    let loss = total * inv_m;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_xent"));
    }
    check_finite(&grad, "softmax_xent")?;
    Ok((
        loss,
        Tensor {
            shape: vec![m, c],
            data: grad,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (m, k, n) = (a.len(), b.len(), b[0].len());
        let mut out = vec![vec![0.0; n]; m];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i][p] * b[p][j];
                }
                out[i][j] = s;
            }
        }
        out
    }

    fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
        t.data()
            .chunks(t.cols())
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect()
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&Tensor::identity(2)).unwrap(), a);
    }

    #[test]
    fn matmul_projector() {
        let p = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(p.matmul(&b).unwrap().data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(42);
        let a = Tensor::gaussian(&mut rng, &[3, 4], 1.0);
        let b = Tensor::gaussian(&mut rng, &[4, 2], 1.0);
        let got = to_rows(&a.matmul(&b).unwrap());
        let want = naive_matmul(&to_rows(&a), &to_rows(&b));
        for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = Rng::new(5);
        let a = Tensor::gaussian(&mut rng, &[5, 3], 1.0);
        let b = Tensor::gaussian(&mut rng, &[5, 4], 1.0);
        let c = Tensor::gaussian(&mut rng, &[4, 3], 1.0);
        let tn = a.matmul_tn(&b).unwrap();
        let via_t = a.transpose().unwrap().matmul(&b).unwrap();
        for (x, y) in tn.data().iter().zip(via_t.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let nt = a.matmul_nt(&c).unwrap();
        let via_t = a.matmul(&c.transpose().unwrap()).unwrap();
        for (x, y) in nt.data().iter().zip(via_t.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn new_rejects_bad_shape_and_nan() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(matches!(
            Tensor::new(vec![1], vec![Scalar::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn relu_forward_and_backward() {
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
        let g = Tensor::vector(vec![5.0, 5.0, 5.0]).unwrap();
        assert_eq!(x.relu_backward(&g).unwrap().data(), &[0.0, 0.0, 5.0]);
        assert!(x.relu_backward(&Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn relu_finite_difference() {
        let h = 1e-5;
        let f = |v: Scalar| Tensor::vector(vec![v]).unwrap().relu().data()[0];
        let numeric = (f(0.3 + h) - f(0.3 - h)) / (2.0 * h);
        let x = Tensor::vector(vec![0.3]).unwrap();
        let analytic = x
            .relu_backward(&Tensor::vector(vec![1.0]).unwrap())
            .unwrap()
            .data()[0];
        assert!((numeric - analytic).abs() < 1e-7);
    }

    #[test]
    fn xent_uniform_logits() {
        let logits = Tensor::zeros(&[3, 10]);
        let (loss, _) = softmax_xent(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - (10.0 as Scalar).ln()).abs() < 1e-12);
        assert!((loss - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn xent_decreases_with_confident_correct_logits() {
        let mut last = Scalar::INFINITY;
        for scale in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
            let logits = Tensor::matrix(1, 3, vec![0.0, scale, 0.0]).unwrap();
            let (loss, _) = softmax_xent(&logits, &[1]).unwrap();
            assert!(loss < last);
            last = loss;
        }
        assert!(last < 1e-12);
    }

    #[test]
    fn xent_gradient_finite_difference() {
        let mut rng = Rng::new(9);
        let logits = Tensor::gaussian(&mut rng, &[4, 3], 1.0);
        let labels = [0, 2, 1, 2];
        let (_, grad) = softmax_xent(&logits, &labels).unwrap();
        let h = 1e-5;
        for idx in 0..logits.len() {
            let mut plus = logits.clone();
            plus.data_mut()[idx] += h;
            let mut minus = logits.clone();
            minus.data_mut()[idx] -= h;
            let lp = softmax_xent(&plus, &labels).unwrap().0;
            let lm = softmax_xent(&minus, &labels).unwrap().0;
            let numeric = (lp - lm) / (2.0 * h);
            assert!((numeric - grad.data()[idx]).abs() < 1e-7, "index {idx}");
        }
    }

    #[test]
    fn xent_label_out_of_range() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            softmax_xent(&logits, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn plumbing_identity_and_zero_cases() {
        let mut rng = Rng::new(1);
        let x = Tensor::gaussian(&mut rng, &[3, 2], 1.0);
        let zero_bias = Tensor::zeros(&[2]);
        assert_eq!(x.add_bias(&zero_bias).unwrap(), x);
        assert_eq!(x.scale(1.0).unwrap(), x);
        assert_eq!(x.transpose().unwrap().transpose().unwrap(), x);
        let mut y = x.clone();
        y.axpy(0.0, &x).unwrap();
        assert_eq!(y, x);
        assert_eq!(Tensor::zeros(&[3, 2]).sum_rows().unwrap().data(), &[0.0, 0.0]);
        assert_eq!(x.sub(&x).unwrap().sum(), 0.0);
        assert_eq!(x.mul(&Tensor::zeros(&[3, 2])).unwrap().sum(), 0.0);
        assert_eq!(Tensor::vector(vec![1.0, 3.0]).unwrap().mean(), 2.0);
        assert!(x.add(&zero_bias).is_err());
    }

    #[test]
    fn argmax_and_select() {
        let t = Tensor::matrix(2, 3, vec![1.0, 5.0, 5.0, 9.0, 0.0, 1.0]).unwrap();
        assert_eq!(t.argmax_rows().unwrap(), vec![1, 0]);
        let s = t.select_rows(&[1, 1, 0]).unwrap();
        assert_eq!(s.shape(), &[3, 3]);
        assert_eq!(&s.data()[..3], &[9.0, 0.0, 1.0]);
        assert!(t.select_rows(&[2]).is_err());
    }
}
