//! Dense row-major tensors and the handful of ops a small decoder needs.
//!
//! Every reduction runs sequentially in ascending index order (matmul sums
//! over the inner index `p = 0..k`, row statistics over columns `0..d`), so
//! results are bit-identical across runs on the same platform.

mod tape;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use tape::{Gradients, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor, rejecting zero extents, length mismatches and non-finite data.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Contract(format!("tensor extents must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor construction",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        check_finite("tensor construction", &data)?;
        Ok(Self { shape, data })
    }

    /// Internal constructor for op outputs whose shape is correct by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, S::zero())
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; numel])
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> S) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..numel).map(f).collect())
    }

    pub fn scalar(value: S) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable access to the raw values. Callers are responsible for keeping them finite.
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!("item() on tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Contract(format!("expected a 2-D tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn row(&self, i: usize) -> &[S] {
        let cols = *self.shape.last().expect("tensor has at least one extent");
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Converts to another scalar type (e.g. `f32` -> `f64` for gradient checks).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| T::from_f64c(v.to_f64c())).collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    /// Exact erf formulation `0.5·x·(1 + erf(x/√2))`.
    Gelu,
    Relu,
}

impl ActivationKind {
    #[inline]
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            ActivationKind::Relu => x.max(S::zero()),
            ActivationKind::Gelu => {
                let half = S::from_f64c(0.5);
                half * x * (S::one() + (x * S::from_f64c(std::f64::consts::FRAC_1_SQRT_2)).erf())
            }
        }
    }

    #[inline]
    pub fn derivative<S: Scalar>(self, x: S) -> S {
        match self {
            ActivationKind::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            ActivationKind::Gelu => {
                let half = S::from_f64c(0.5);
                let cdf = half * (S::one() + (x * S::from_f64c(std::f64::consts::FRAC_1_SQRT_2)).erf());
                let pdf = (-half * x * x).exp() * S::from_f64c(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                cdf + x * pdf
            }
        }
    }
}

pub(crate) fn check_finite<S: Scalar>(op: &'static str, data: &[S]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

// ---- kernels ---------------------------------------------------------------

/// `c[m×n] = a[m×k] · b[k×n]`; each `c[i][j]` accumulates over `p` ascending.
pub(crate) fn gemm<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `c[m×n] = aᵀ · b` with `a[k×m]`, `b[k×n]`.
pub(crate) fn gemm_tn<S: Scalar>(a: &[S], b: &[S], k: usize, m: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += api * bv;
            }
        }
    }
    c
}

/// `c[m×n] = a · bᵀ` with `a[m×k]`, `b[n×k]`.
pub(crate) fn gemm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] = acc;
        }
    }
    c
}

pub(crate) fn transpose_data<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

// ---- ops -------------------------------------------------------------------

pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let c = gemm(&a.data, &b.data, m, k, n);
    check_finite("matmul", &c)?;
    Ok(Tensor::from_parts(vec![m, n], c))
}

pub fn transpose<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    let (r, c) = a.dims2()?;
    Ok(Tensor::from_parts(vec![c, r], transpose_data(&a.data, r, c)))
}

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    same_shape("add", a, b)?;
    let out: Vec<S> = a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect();
    check_finite("add", &out)?;
    Ok(Tensor::from_parts(a.shape.clone(), out))
}

pub fn mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    same_shape("mul", a, b)?;
    let out: Vec<S> = a.data.iter().zip(&b.data).map(|(&x, &y)| x * y).collect();
    check_finite("mul", &out)?;
    Ok(Tensor::from_parts(a.shape.clone(), out))
}

/// Adds a `[n]` bias to every row of `[m×n]`.
pub fn add_bias<S: Scalar>(x: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let (_, n) = x.dims2()?;
    if bias.shape != [n] {
        return Err(Error::Shape {
            op: "add_bias",
            lhs: x.shape.clone(),
            rhs: bias.shape.clone(),
        });
    }
    let out: Vec<S> = x
        .data
        .chunks(n)
        .flat_map(|row| row.iter().zip(&bias.data).map(|(&v, &b)| v + b))
        .collect();
    check_finite("add_bias", &out)?;
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

pub fn activation<S: Scalar>(x: &Tensor<S>, kind: ActivationKind) -> Result<Tensor<S>> {
    let out = x.map(|v| kind.apply(v));
    check_finite("activation", &out.data)?;
    Ok(out)
}

pub(crate) struct LayerNormParts<S> {
    pub out: Vec<S>,
    pub xhat: Vec<S>,
    pub rstd: Vec<S>,
}

pub(crate) fn layernorm_parts<S: Scalar>(
    x: &Tensor<S>,
    gain: &Tensor<S>,
    bias: &Tensor<S>,
    eps: S,
) -> Result<LayerNormParts<S>> {
    let d = *x.shape.last().expect("non-empty shape");
    if gain.shape != [d] || bias.shape != [d] {
        return Err(Error::Shape {
            op: "layernorm",
            lhs: x.shape.clone(),
            rhs: gain.shape.clone(),
        });
    }
    if !(eps > S::zero()) {
        return Err(Error::Contract("layernorm eps must be positive".into()));
    }
    let dn = S::from_usize(d).expect("width fits scalar");
    let mut out = Vec::with_capacity(x.data.len());
    let mut xhat = Vec::with_capacity(x.data.len());
    let mut rstd = Vec::with_capacity(x.data.len() / d);
    for row in x.data.chunks(d) {
        let mut sum = S::zero();
        for &v in row {
            sum += v;
        }
        let mean = sum / dn;
        let mut var = S::zero();
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        var /= dn;
        let r = S::one() / (var + eps).sqrt();
        rstd.push(r);
        for (j, &v) in row.iter().enumerate() {
            let h = (v - mean) * r;
            xhat.push(h);
            out.push(h * gain.data[j] + bias.data[j]);
        }
    }
    check_finite("layernorm", &out)?;
    Ok(LayerNormParts { out, xhat, rstd })
}

/// Per-row zero-mean unit-variance normalization over the last axis, then affine.
pub fn layernorm<S: Scalar>(
    x: &Tensor<S>,
    gain: &Tensor<S>,
    bias: &Tensor<S>,
    eps: S,
) -> Result<Tensor<S>> {
    let parts = layernorm_parts(x, gain, bias, eps)?;
    Ok(Tensor::from_parts(x.shape.clone(), parts.out))
}

/// Row-wise softmax probabilities and per-row negative log-likelihood.
pub(crate) fn softmax_xent_parts<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[u32],
) -> Result<(Vec<S>, Vec<S>)> {
    let (t, v) = logits.dims2()?;
    if targets.len() != t {
        return Err(Error::Shape {
            op: "softmax_cross_entropy",
            lhs: logits.shape.clone(),
            rhs: vec![targets.len()],
        });
    }
    let mut probs = Vec::with_capacity(t * v);
    let mut nll = Vec::with_capacity(t);
    for (row, &target) in logits.data.chunks(v).zip(targets) {
        let target = target as usize;
        if target >= v {
            return Err(Error::Index {
                what: "target token",
                index: target,
                bound: v,
            });
        }
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for &l in row {
            sum += (l - max).exp();
        }
        let log_sum = sum.ln();
        for &l in row {
            probs.push((l - max).exp() / sum);
        }
        nll.push(log_sum - (row[target] - max));
    }
    check_finite("softmax_cross_entropy", &nll)?;
    Ok((nll, probs))
}

/// Per-position negative log-likelihood, without the mean.
pub fn cross_entropy_rows<S: Scalar>(logits: &Tensor<S>, targets: &[u32]) -> Result<Vec<S>> {
    Ok(softmax_xent_parts(logits, targets)?.0)
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of `logits[T×V]`.
pub fn softmax_cross_entropy<S: Scalar>(logits: &Tensor<S>, targets: &[u32]) -> Result<S> {
    let (nll, _) = softmax_xent_parts(logits, targets)?;
    Ok(mean_of(&nll))
}

pub(crate) fn mean_of<S: Scalar>(values: &[S]) -> S {
    let mut sum = S::zero();
    for &v in values {
        sum += v;
    }
    sum / S::from_usize(values.len()).expect("length fits scalar")
}

/// Gathers rows of `table[V×d]`.
pub fn embedding<S: Scalar>(table: &Tensor<S>, ids: &[u32]) -> Result<Tensor<S>> {
    let (v, d) = table.dims2()?;
    if ids.is_empty() {
        return Err(Error::Contract("embedding lookup with no ids".into()));
    }
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        let id = id as usize;
        if id >= v {
            return Err(Error::Index {
                what: "token id",
                index: id,
                bound: v,
            });
        }
        out.extend_from_slice(table.row(id));
    }
    Ok(Tensor::from_parts(vec![ids.len(), d], out))
}

/// Causal multi-head attention over already-projected `q`, `k`, `v` of shape `[T×d]`.
///
/// Position `i` attends to positions `0..=i`. Returns the concatenated head
/// outputs and the attention probabilities laid out as `[head][i][j]`.
pub(crate) fn causal_attention_parts<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    n_heads: usize,
) -> Result<(Vec<S>, Vec<S>)> {
    let (t, d) = q.dims2()?;
    if k.shape != q.shape || v.shape != q.shape {
        return Err(Error::Shape {
            op: "attention",
            lhs: q.shape.clone(),
            rhs: k.shape.clone(),
        });
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Contract(format!("width {d} not divisible into {n_heads} heads")));
    }
    let dh = d / n_heads;
    let scale = S::one() / S::from_usize(dh).expect("head width fits scalar").sqrt();
    let mut out = vec![S::zero(); t * d];
    let mut probs = vec![S::zero(); n_heads * t * t];
    let mut scores = vec![S::zero(); t];
    for h in 0..n_heads {
        let off = h * dh;
        for i in 0..t {
            let qi = &q.data[i * d + off..i * d + off + dh];
            let mut max = S::neg_infinity();
            for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                let kj = &k.data[j * d + off..j * d + off + dh];
                let mut acc = S::zero();
                for (&a, &b) in qi.iter().zip(kj) {
                    acc += a * b;
                }
                *s = acc * scale;
                max = max.max(*s);
            }
            let mut sum = S::zero();
            for s in scores.iter_mut().take(i + 1) {
                *s = (*s - max).exp();
                sum += *s;
            }
            let p_row = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
            for j in 0..=i {
                p_row[j] = scores[j] / sum;
            }
            let o_row = &mut out[i * d + off..i * d + off + dh];
            for j in 0..=i {
                let p = p_row[j];
                let vj = &v.data[j * d + off..j * d + off + dh];
                for (o, &vv) in o_row.iter_mut().zip(vj) {
                    *o += p * vv;
                }
            }
        }
    }
    check_finite("attention", &out)?;
    Ok((out, probs))
}

pub fn causal_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    n_heads: usize,
) -> Result<Tensor<S>> {
    let (out, _) = causal_attention_parts(q, k, v, n_heads)?;
    Ok(Tensor::from_parts(q.shape.clone(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = t2(2, 2, &[1., 2., 3., 4.]);
        let eye = t2(2, 2, &[1., 0., 0., 1.]);
        assert_eq!(matmul(&a, &eye).unwrap(), a);
        let zero = Tensor::zeros(&[2, 2]);
        assert_eq!(matmul(&a, &zero).unwrap(), zero);
        // hand arithmetic: [1*5+2*7, 1*6+2*8; 3*5+4*7, 3*6+4*8]
        let b = t2(2, 2, &[5., 6., 7., 8.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        match matmul(&a, &b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn identity_associativity_is_bitwise() {
        let a = Tensor::<f32>::from_fn(&[3, 4], |i| (i as f32 * 0.37).sin());
        let b = Tensor::<f32>::from_fn(&[4, 2], |i| (i as f32 * 1.3).cos());
        let eye = Tensor::<f32>::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let lhs = matmul(&matmul(&a, &eye).unwrap(), &b).unwrap();
        let rhs = matmul(&a, &matmul(&eye, &b).unwrap()).unwrap();
        assert_eq!(lhs.data(), rhs.data());
    }

    #[test]
    fn activation_examples() {
        let x = Tensor::<f32>::new(vec![3], vec![-3.0, 0.0, 1.0]).unwrap();
        let relu = activation(&x, ActivationKind::Relu).unwrap();
        assert_eq!(relu.data()[0], 0.0);
        let gelu = activation(&x, ActivationKind::Gelu).unwrap();
        assert_eq!(gelu.data()[1], 0.0);
        // 0.5 * (1 + erf(1/sqrt 2)) = Phi(1)
        assert!((gelu.data()[2] - 0.841_344_7).abs() < 1e-6);
    }

    #[test]
    fn layernorm_examples() {
        let ones = Tensor::<f64>::filled(&[2], 1.0);
        let zeros = Tensor::<f64>::zeros(&[2]);
        let constant = t2(1, 2, &[3.0, 3.0]);
        let out = layernorm(&constant, &ones, &zeros, 1e-5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let x = t2(1, 2, &[1.0, -1.0]);
        let out = layernorm(&x, &ones, &zeros, 1e-12).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-9 && (out.data()[1] + 1.0).abs() < 1e-9);

        // mean 1, var 1 -> xhat [-1, 1] -> 2*xhat + 1
        let x = t2(1, 2, &[0.0, 2.0]);
        let gain = Tensor::filled(&[2], 2.0);
        let bias = Tensor::filled(&[2], 1.0);
        let out = layernorm(&x, &gain, &bias, 1e-12).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-9 && (out.data()[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_examples() {
        let zeros = Tensor::<f64>::zeros(&[1, 4]);
        let l = softmax_cross_entropy(&zeros, &[2]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        let mut sure = Tensor::<f32>::zeros(&[1, 5]);
        sure.data_mut()[3] = 1000.0;
        assert!(softmax_cross_entropy(&sure, &[3]).unwrap().abs() < 1e-6);

        // ln(e^1 + e^2 + e^3) - 3
        let oracle = ((1f64).exp() + (2f64).exp() + (3f64).exp()).ln() - 3.0;
        assert!((oracle - 0.407_605_964_5).abs() < 1e-9);
        let logits = t2(1, 3, &[1., 2., 3.]);
        assert!((softmax_cross_entropy(&logits, &[2]).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let zeros = Tensor::<f32>::zeros(&[2, 4]);
        assert!(matches!(
            softmax_cross_entropy(&zeros, &[0, 4]),
            Err(Error::Index { index: 4, bound: 4, .. })
        ));
    }

    #[test]
    fn construction_rejects_non_finite() {
        assert!(matches!(
            Tensor::<f32>::new(vec![2], vec![1.0, f32::NAN]),
            Err(Error::NonFinite { .. })
        ));
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![3], vec![1.0]).is_err());
    }

    #[test]
    fn matmul_overflow_is_reported() {
        let a = Tensor::<f32>::filled(&[1, 2], 1e30);
        let b = Tensor::<f32>::filled(&[2, 1], 1e30);
        assert!(matches!(matmul(&a, &b), Err(Error::NonFinite { op: "matmul" })));
    }

    #[test]
    fn attention_first_position_copies_value() {
        let q = Tensor::<f64>::from_fn(&[3, 4], |i| i as f64 * 0.1);
        let k = Tensor::<f64>::from_fn(&[3, 4], |i| (i as f64).sin());
        let v = Tensor::<f64>::from_fn(&[3, 4], |i| (i as f64).cos());
        let out = causal_attention(&q, &k, &v, 2).unwrap();
        assert_eq!(out.row(0), v.row(0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cross_entropy_shift_invariant(
                logits in proptest::collection::vec(-5.0f32..5.0, 12),
                shift in -50.0f32..50.0,
                target in 0u32..4,
            ) {
                let a = Tensor::new(vec![3, 4], logits.clone()).unwrap();
                let b = Tensor::new(vec![3, 4], logits.iter().map(|v| v + shift).collect()).unwrap();
                let targets = [target, (target + 1) % 4, (target + 3) % 4];
                let la = softmax_cross_entropy(&a, &targets).unwrap();
                let lb = softmax_cross_entropy(&b, &targets).unwrap();
                prop_assert!((la - lb).abs() <= 1e-5);
            }
        }
    }
}
