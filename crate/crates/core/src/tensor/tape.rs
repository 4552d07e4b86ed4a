//! Reverse-mode differentiation over a linear op record.
//!
//! Nodes are appended in evaluation order, so the record is topologically
//! sorted by construction and `backward` is a single reverse sweep. An op
//! whose inputs are all untracked is stored as an untracked constant with no
//! saved state, which keeps inference passes cheap.

use super::{
    add, add_bias, causal_attention_parts, check_finite, embedding, gemm_nt, gemm_tn,
    layernorm_parts, matmul, mean_of, mul, softmax_xent_parts, transpose_data, ActivationKind,
    Tensor,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Activation(Var, ActivationKind),
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
        bias: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        probs: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        probs: Vec<S>,
    },
    Sum(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    tracked: bool,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input. Gradients are produced only for tracked leaves.
    pub fn leaf(&mut self, value: Tensor<S>, tracked: bool) -> Var {
        self.push(value, Op::Leaf, tracked)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Records `op` only when some input needs a gradient.
    fn record(&mut self, value: Tensor<S>, inputs: &[Var], op: impl FnOnce() -> Op<S>) -> Var {
        if self.any_tracked(inputs) {
            self.push(value, op(), true)
        } else {
            self.push(value, Op::Leaf, false)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.record(out, &[a, b], || Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = super::transpose(self.value(a))?;
        Ok(self.record(out, &[a], || Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = add(self.value(a), self.value(b))?;
        Ok(self.record(out, &[a, b], || Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = mul(self.value(a), self.value(b))?;
        Ok(self.record(out, &[a, b], || Op::Mul(a, b)))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = add_bias(self.value(x), self.value(bias))?;
        Ok(self.record(out, &[x, bias], || Op::AddBias(x, bias)))
    }

    /// `x · w + b` for `x[T×in]`, `w[in×out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn activation(&mut self, x: Var, kind: ActivationKind) -> Result<Var> {
        let out = super::activation(self.value(x), kind)?;
        Ok(self.record(out, &[x], || Op::Activation(x, kind)))
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let parts = layernorm_parts(self.value(x), self.value(gain), self.value(bias), eps)?;
        let value = Tensor::from_parts(self.value(x).shape().to_vec(), parts.out);
        let (xhat, rstd) = (parts.xhat, parts.rstd);
        Ok(self.record(value, &[x, gain, bias], || Op::LayerNorm {
            x,
            gain,
            xhat,
            rstd,
            bias,
        }))
    }

    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let out = embedding(self.value(table), ids)?;
        Ok(self.record(out, &[table], || Op::Embedding {
            table,
            ids: ids.to_vec(),
        }))
    }

    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Var> {
        let (out, probs) =
            causal_attention_parts(self.value(q), self.value(k), self.value(v), n_heads)?;
        let value = Tensor::from_parts(self.value(q).shape().to_vec(), out);
        Ok(self.record(value, &[q, k, v], || Op::Attention {
            q,
            k,
            v,
            n_heads,
            probs,
        }))
    }

    /// Mean next-token negative log-likelihood as a one-element node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let (nll, probs) = softmax_xent_parts(self.value(logits), targets)?;
        let value = Tensor::scalar(mean_of(&nll));
        Ok(self.record(value, &[logits], || Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut acc = S::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        check_finite("sum", &[acc])?;
        Ok(self.record(Tensor::scalar(acc), &[x], || Op::Sum(x)))
    }

    /// Gradients of the one-element node `loss` with respect to every tracked leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if loss_node.tracked {
            grads[loss.0] = Some(vec![S::one()]);
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.tracked) {
                (Op::Leaf, true) => Some(Tensor::from_parts(
                    node.value.shape().to_vec(),
                    g.unwrap_or_else(|| vec![S::zero(); node.value.numel()]),
                )),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], v: Var, contribution: Vec<S>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backprop_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                if self.is_tracked(*a) {
                    let da = gemm_nt(g, self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.is_tracked(*b) {
                    let db = gemm_tn(self.value(*a).data(), g, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2()?;
                // g is [c×r]
                self.accumulate(grads, *a, transpose_data(g, c, r));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect());
                self.accumulate(grads, *b, g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect());
            }
            Op::AddBias(x, b) => {
                let n = self.value(*b).numel();
                if self.is_tracked(*b) {
                    let mut db = vec![S::zero(); n];
                    for row in g.chunks(n) {
                        for (d, &r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
                self.accumulate(grads, *x, g.to_vec());
            }
            Op::Activation(x, kind) => {
                let xv = self.value(*x).data();
                let dx = g.iter().zip(xv).map(|(&gi, &xi)| gi * kind.derivative(xi)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                xhat,
                rstd,
                bias,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                let dn = S::from_usize(d).expect("width fits scalar");
                let mut dgain = vec![S::zero(); d];
                let mut dbias = vec![S::zero(); d];
                let mut dx = Vec::with_capacity(g.len());
                let mut dxhat = vec![S::zero(); d];
                for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut mean_dxhat = S::zero();
                    let mut mean_dxhat_xhat = S::zero();
                    for j in 0..d {
                        dgain[j] += grow[j] * hrow[j];
                        dbias[j] += grow[j];
                        dxhat[j] = grow[j] * gv[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * hrow[j];
                    }
                    mean_dxhat /= dn;
                    mean_dxhat_xhat /= dn;
                    for j in 0..d {
                        dx.push(rstd[r] * (dxhat[j] - mean_dxhat - hrow[j] * mean_dxhat_xhat));
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
                self.accumulate(grads, *bias, dbias);
            }
            Op::Embedding { table, ids } => {
                if self.is_tracked(*table) {
                    let (v, d) = self.value(*table).dims2()?;
                    let mut dt = vec![S::zero(); v * d];
                    for (pos, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        for j in 0..d {
                            dt[id * d + j] += g[pos * d + j];
                        }
                    }
                    self.accumulate(grads, *table, dt);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                probs,
            } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    *n_heads,
                    probs,
                    g,
                );
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (t, vocab) = self.value(*logits).dims2()?;
                let scale = g[0] / S::from_usize(t).expect("length fits scalar");
                let mut dl: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                for (row, &target) in targets.iter().enumerate() {
                    dl[row * vocab + target as usize] -= scale;
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
        }
        Ok(())
    }
}

fn attention_backward<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    n_heads: usize,
    probs: &[S],
    g: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let t = q.shape()[0];
    let d = q.shape()[1];
    let dh = d / n_heads;
    let scale = S::one() / S::from_usize(dh).expect("head width fits scalar").sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut dq = vec![S::zero(); t * d];
    let mut dk = vec![S::zero(); t * d];
    let mut dv = vec![S::zero(); t * d];
    let mut dp = vec![S::zero(); t];
    for h in 0..n_heads {
        let off = h * dh;
        for i in 0..t {
            let p_row = &probs[(h * t + i) * t..(h * t + i + 1) * t];
            let go = &g[i * d + off..i * d + off + dh];
            let mut dot = S::zero();
            for j in 0..=i {
                let vj = &vd[j * d + off..j * d + off + dh];
                let mut acc = S::zero();
                for (&a, &b) in go.iter().zip(vj) {
                    acc += a * b;
                }
                dp[j] = acc;
                dot += acc * p_row[j];
                let dvj = &mut dv[j * d + off..j * d + off + dh];
                for (dvv, &gg) in dvj.iter_mut().zip(go) {
                    *dvv += p_row[j] * gg;
                }
            }
            for j in 0..=i {
                let ds = p_row[j] * (dp[j] - dot) * scale;
                for c in 0..dh {
                    dq[i * d + off + c] += ds * kd[j * d + off + c];
                    dk[j * d + off + c] += ds * qd[i * d + off + c];
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Gradients for the tracked leaves of a tape, indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64), true);
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn untracked_inputs_get_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(Tensor::filled(&[2, 2], 1.0), true);
        let x = tape.leaf(Tensor::filled(&[1, 2], 3.0), false);
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn unreached_tracked_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f32>::new();
        let unused = tape.leaf(Tensor::filled(&[3], 1.0), true);
        let x = tape.leaf(Tensor::filled(&[2], 1.0), true);
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }
}
