//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every tensor produced during one forward pass. Operations
//! are appended in execution order, so replaying the node list backwards is a
//! valid topological order. Nodes whose inputs are all constant are stored as
//! constants and carry no backward rule.

use crate::error::{contract_err, shape_err, Error, Result};
use crate::ops::{self, LayerNormCache};
use crate::scalar::Scalar;
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        cache: LayerNormCache<T>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    SelectRow {
        x: Var,
        row: usize,
    },
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Recording of one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient populated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a[m,k] * b[n,k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).matrix_dims()?;
        let (n, k2) = self.value(b).matrix_dims()?;
        if k != k2 {
            return shape_err(format!(
                "matmul_nt inner dimensions disagree: {:?} x {:?}^T",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a `[n]` vector to every row of `x[.., n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(bias).shape() != [d] {
            return shape_err(format!(
                "bias {:?} does not broadcast over {:?}",
                self.value(bias).shape(),
                self.value(x).shape()
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(ops::gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: T) -> Result<Var> {
        ops::check_affine(self.value(x), self.value(gain), self.value(shift))?;
        if eps <= T::zero() {
            return Err(Error::Domain("layer norm eps must be positive".into()));
        }
        let xv = self.value(x);
        let (out, cache) = ops::layer_norm_forward(
            xv.data(),
            xv.last_dim(),
            self.value(gain).data(),
            self.value(shift).data(),
            eps,
        );
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, shift, cache }, &[x, gain, shift]))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = ops::softmax(self.value(a))?;
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    /// Mean cross-entropy of `[B, C]` logits; produces a scalar.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, c) = lv.matrix_dims()?;
        ops::check_labels(labels, b, c)?;
        let loss = ops::cross_entropy(lv, labels)?;
        let probs = ops::softmax(lv)?.into_data();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Divides every row by `max(||row||_2, 1e-12)`.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let d = out.last_dim();
        let norms = ops::l2_normalize_rows_in_place(out.data_mut(), d);
        self.push(out, Op::L2Normalize { x: a, norms }, &[a])
    }

    /// Row `row` of a matrix as a `[n]` vector.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let (m, _) = self.value(x).matrix_dims()?;
        if row >= m {
            return Err(Error::Index(format!("row {row} out of range for {m} rows")));
        }
        let out = Tensor::vector(self.value(x).row(row).to_vec())?;
        Ok(self.push(out, Op::SelectRow { x, row }, &[x]))
    }

    /// Stacks vectors and matrices sharing a last dimension into one matrix.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_rows needs at least one input");
        };
        let d = self.value(first).last_dim();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.last_dim() != d || v.shape().len() > 2 {
                return shape_err(format!(
                    "cannot stack {:?} under rows of width {d}",
                    v.shape()
                ));
            }
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / d;
        let out = Tensor::new(vec![rows, d], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Multi-head scaled dot-product attention over `[T, d]` inputs.
    ///
    /// Head `h` uses columns `h*dh..(h+1)*dh` with `dh = d / heads` and scale
    /// `1/sqrt(dh)`; head outputs are written back into the same columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (t, d) = self.value(q).matrix_dims()?;
        if self.value(k).shape() != [t, d] || self.value(v).shape() != [t, d] {
            return shape_err(format!(
                "attention operands differ: q {:?}, k {:?}, v {:?}",
                self.value(q).shape(),
                self.value(k).shape(),
                self.value(v).shape()
            ));
        }
        if heads == 0 || d % heads != 0 {
            return shape_err(format!("{d} features cannot be split into {heads} heads"));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).expect("head size fits").sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![T::zero(); heads * t * t];
        let mut out = vec![T::zero(); t * d];
        let mut scores = vec![T::zero(); t];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let qi = &qd[i * d + off..i * d + off + dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &kd[j * d + off..j * d + off + dh];
                    let mut acc = T::zero();
                    for (&a, &b) in qi.iter().zip(kj) {
                        acc += a * b;
                    }
                    *s = acc * scale;
                }
                let p = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                ops::softmax_row(&scores, p);
                let oi = &mut out[i * d + off..i * d + off + dh];
                for (j, &pij) in p.iter().enumerate() {
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (o, &vv) in oi.iter_mut().zip(vj) {
                        *o += pij * vv;
                    }
                }
            }
        }
        let out = Tensor::new(vec![t, d], out)?;
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients from every use site of a tensor are summed. Trainable leaves
    /// that the loss does not depend on receive a zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = match (node.requires_grad, g) {
                (true, Some(g)) => Some(
                    Tensor::new(node.value.shape().to_vec(), g).expect("gradient matches shape"),
                ),
                (true, None) if matches!(node.op, Op::Leaf) => {
                    Some(Tensor::zeros(node.value.shape()))
                }
                _ => None,
            };
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let nodes = &self.nodes;
        // Runs `f` on the gradient buffer of `v` if `v` is differentiable.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            let target = &nodes[v.0];
            if !target.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); target.value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).matrix_dims().unwrap();
                let n = val(*b).last_dim();
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |buf| matmul_nt_into(g, bd, buf, m, n, k));
                acc(*b, &mut |buf| matmul_tn_into(ad, g, buf, k, m, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = val(*a).matrix_dims().unwrap();
                let n = val(*b).shape()[0];
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |buf| matmul_into(g, bd, buf, m, n, k));
                acc(*b, &mut |buf| matmul_tn_into(g, ad, buf, n, m, k));
            }
            Op::Transpose(a) => {
                let (m, n) = val(*a).matrix_dims().unwrap();
                acc(*a, &mut |buf| {
                    for r in 0..m {
                        for c in 0..n {
                            buf[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    acc(x, &mut |buf| add_into(buf, g));
                }
            }
            Op::AddRow(x, bias) => {
                let d = val(*bias).len();
                acc(*x, &mut |buf| add_into(buf, g));
                acc(*bias, &mut |buf| {
                    for row in g.chunks(d) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |buf| {
                    for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(bd) {
                        *o += gv * bv;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, &gv), &av) in buf.iter_mut().zip(g).zip(ad) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |buf| {
                for (o, &gv) in buf.iter_mut().zip(g) {
                    *o += gv * *c;
                }
            }),
            Op::Sum(a) => acc(*a, &mut |buf| {
                for o in buf.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Gelu(a) => {
                let ad = val(*a).data();
                acc(*a, &mut |buf| {
                    for ((o, &gv), &x) in buf.iter_mut().zip(g).zip(ad) {
                        *o += gv * ops::gelu_grad(x);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                cache,
            } => {
                let gd = val(*gain).data();
                let d = gd.len();
                let dt = T::from_usize(d).unwrap();
                acc(*x, &mut |buf| {
                    for (r, istd) in cache.inv_std.iter().enumerate() {
                        let rows = r * d..(r + 1) * d;
                        let (gr, xh) = (&g[rows.clone()], &cache.xhat[rows.clone()]);
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for c in 0..d {
                            let dxh = gr[c] * gd[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[c];
                        }
                        mean_dxh /= dt;
                        mean_dxh_xh /= dt;
                        for c in 0..d {
                            let dxh = gr[c] * gd[c];
                            buf[r * d + c] += *istd * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
                        }
                    }
                });
                acc(*gain, &mut |buf| {
                    for (gr, xh) in g.chunks(d).zip(cache.xhat.chunks(d)) {
                        for c in 0..d {
                            buf[c] += gr[c] * xh[c];
                        }
                    }
                });
                acc(*shift, &mut |buf| {
                    for gr in g.chunks(d) {
                        add_into(buf, gr);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                acc(*a, &mut |buf| {
                    for ((yr, gr), br) in y.chunks(d).zip(g.chunks(d)).zip(buf.chunks_mut(d)) {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for c in 0..d {
                            br[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = val(*logits).last_dim();
                let scale = g[0] / T::from_usize(labels.len()).unwrap();
                acc(*logits, &mut |buf| {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { T::one() } else { T::zero() };
                            buf[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let eps = T::lit(ops::NORM_EPS);
                acc(*x, &mut |buf| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let rows = r * d..(r + 1) * d;
                        let (yr, gr) = (&y[rows.clone()], &g[rows.clone()]);
                        if norm > eps {
                            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            for c in 0..d {
                                buf[r * d + c] += (gr[c] - yr[c] * dot) / norm;
                            }
                        } else {
                            for c in 0..d {
                                buf[r * d + c] += gr[c] / eps;
                            }
                        }
                    }
                });
            }
            Op::SelectRow { x, row } => {
                let d = g.len();
                acc(*x, &mut |buf| add_into(&mut buf[row * d..(row + 1) * d], g));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    acc(p, &mut |buf| add_into(buf, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (t, d) = val(*q).matrix_dims().unwrap();
                let dh = d / heads;
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                // Score gradients per head, shared by the q and k rules.
                let mut dscores = vec![T::zero(); heads * t * t];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..t {
                        let p = &probs[(h * t + i) * t..(h * t + i + 1) * t];
                        let gi = &g[i * d + off..i * d + off + dh];
                        let ds = &mut dscores[(h * t + i) * t..(h * t + i + 1) * t];
                        let mut dot = T::zero();
                        for j in 0..t {
                            let vj = &vd[j * d + off..j * d + off + dh];
                            let dp: T = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                            ds[j] = dp;
                            dot += dp * p[j];
                        }
                        for j in 0..t {
                            ds[j] = p[j] * (ds[j] - dot) * scale;
                        }
                    }
                }
                acc(*v, &mut |buf| {
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..t {
                            let p = &probs[(h * t + i) * t..(h * t + i + 1) * t];
                            let gi = &g[i * d + off..i * d + off + dh];
                            for j in 0..t {
                                let bj = &mut buf[j * d + off..j * d + off + dh];
                                for (o, &gv) in bj.iter_mut().zip(gi) {
                                    *o += p[j] * gv;
                                }
                            }
                        }
                    }
                });
                acc(*q, &mut |buf| {
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..t {
                            let ds = &dscores[(h * t + i) * t..(h * t + i + 1) * t];
                            let bi = &mut buf[i * d + off..i * d + off + dh];
                            for j in 0..t {
                                let kj = &kd[j * d + off..j * d + off + dh];
                                for (o, &kv) in bi.iter_mut().zip(kj) {
                                    *o += ds[j] * kv;
                                }
                            }
                        }
                    }
                });
                acc(*k, &mut |buf| {
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..t {
                            let ds = &dscores[(h * t + i) * t..(h * t + i + 1) * t];
                            let qi = &qd[i * d + off..i * d + off + dh];
                            for j in 0..t {
                                let bj = &mut buf[j * d + off..j * d + off + dh];
                                for (o, &qv) in bj.iter_mut().zip(qi) {
                                    *o += ds[j] * qv;
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let mut tape = Tape::<f64>::new();
        let xs = [0.3, -1.1, 2.0, 0.0];
        let x = tape.param(Tensor::from_f64(&[4], &xs).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &xs);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(Tensor::ones(&[2, 2]));
        let x = tape.param(Tensor::ones(&[2, 2]));
        let y = tape.matmul(w, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(w).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[3]));
        let unused = tape.param(Tensor::ones(&[2]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::zeros(&[3, 6]));
        assert!(tape.attention(q, q, q, 4).is_err());
    }

    #[test]
    fn attention_with_uniform_scores_averages_values() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = tape.constant(Tensor::zeros(&[3, 4]));
        let v = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let out = tape.attention(q, q, v, 2).unwrap();
        let vv = tape.value(v).clone();
        for c in 0..4 {
            let mean = (0..3).map(|r| vv.row(r)[c]).sum::<f64>() / 3.0;
            for r in 0..3 {
                assert!((tape.value(out).row(r)[c] - mean).abs() < 1e-15);
            }
        }
    }
}
