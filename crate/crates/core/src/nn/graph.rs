//! Reverse-mode tape.
//!
//! A [`Graph`] records one forward pass. Every op computes its value eagerly,
//! keeps whatever it needs for the backward pass, and [`Graph::backward`]
//! walks the nodes in reverse creation order. Ops are coarse (a whole linear
//! layer, a whole multi-head attention core) so the tape stays short and the
//! heavy lifting happens inside GEMM calls.

use std::rc::Rc;

use rand::Rng;

use super::{gemm, Grads, ParamId, ParamStore, Real, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Which rows attend to which: contiguous sequences inside a row matrix.
///
/// `key_valid`, when present, excludes individual key rows (padding) from
/// every query in the same sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnLayout {
    segments: Vec<(usize, usize)>,
    key_valid: Option<Vec<bool>>,
}

impl AttnLayout {
    /// Back-to-back sequences of the given lengths, no padding.
    pub fn packed(lengths: &[usize]) -> Self {
        let mut start = 0;
        let segments = lengths
            .iter()
            .map(|&len| {
                let s = (start, len);
                start += len;
                s
            })
            .collect();
        AttnLayout {
            segments,
            key_valid: None,
        }
    }

    /// `batch` sequences of `seq` rows each; `valid[b * seq + s]` marks real tokens.
    pub fn padded(batch: usize, seq: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != batch * seq {
            return Err(Error::shape("attn_layout", &[batch, seq], &[valid.len()]));
        }
        Ok(AttnLayout {
            segments: (0..batch).map(|b| (b * seq, seq)).collect(),
            key_valid: Some(valid),
        })
    }

    pub fn segments(&self) -> &[(usize, usize)] {
        &self.segments
    }

    pub fn rows(&self) -> usize {
        self.segments.last().map(|(s, l)| s + l).unwrap_or(0)
    }

    fn prob_len(&self, heads: usize) -> usize {
        self.segments.iter().map(|(_, l)| heads * l * l).sum()
    }
}

enum Stored<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        x: Var,
        tanh: Vec<T>,
    },
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Softmax {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    Attention {
        qkv: Var,
        layout: Rc<AttnLayout>,
        heads: usize,
        probs: Vec<T>,
    },
    Gather {
        x: Var,
        idx: Rc<Vec<usize>>,
    },
    Concat(Var, Var),
    JointMix {
        x: Var,
        mix: Rc<JointMixing<T>>,
    },
    L2Normalize {
        x: Var,
        inv_norms: Vec<T>,
    },
    MatMulNT(Var, Var),
    ScaleExp {
        x: Var,
        s: Var,
    },
    DiagXent {
        x: Var,
        probs: Vec<T>,
    },
    WeightedL1 {
        x: Var,
        target: Vec<T>,
        row_weights: Vec<T>,
    },
    WeightedSum(Vec<(Var, T)>),
}

/// Per-row mixing of joint feature blocks: `out[i] = Σ_k a_ik x[k]`.
#[derive(Debug, Clone)]
pub struct JointMixing<T> {
    joints: usize,
    /// `neighbors[i]` = `(k, a_ik)` for every non-zero entry.
    neighbors: Vec<Vec<(usize, T)>>,
}

impl<T: Real> JointMixing<T> {
    pub fn from_dense(joints: usize, a: &[T]) -> Result<Self> {
        if a.len() != joints * joints {
            return Err(Error::shape("joint_mixing", &[joints, joints], &[a.len()]));
        }
        let neighbors = (0..joints)
            .map(|i| {
                (0..joints)
                    .filter(|&k| a[i * joints + k] != T::zero())
                    .map(|k| (k, a[i * joints + k]))
                    .collect()
            })
            .collect();
        Ok(JointMixing { joints, neighbors })
    }

    pub fn joints(&self) -> usize {
        self.joints
    }
}

struct Node<T> {
    value: Stored<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// One recorded forward pass over parameters borrowed from a [`ParamStore`].
pub struct Graph<'s, T: Real> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    training: bool,
}

const LN_EPS: f64 = 1e-6;

const GELU_K: f64 = 0.044715;

fn gelu_c<T: Real>() -> T {
    T::lit((2.0 / std::f64::consts::PI).sqrt())
}

/// `tanh(c (x + k x³))` for every element; the tanh-approximation GELU is
/// `0.5 x (1 + t)`.
fn gelu_tanh<T: Real>(x: &[T]) -> Vec<T> {
    let (c, k) = (gelu_c::<T>(), T::lit(GELU_K));
    let mut t: Vec<T> = x.iter().map(|&v| c * (v + k * v * v * v)).collect();
    T::tanh_slice(&mut t);
    t
}

fn gelu_grad<T: Real>(x: T, t: T) -> T {
    let half = T::lit(0.5);
    let one = T::one();
    let du = gelu_c::<T>() * (one + T::lit(3.0 * GELU_K) * x * x);
    half * (one + t) + half * x * (one - t * t) * du
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>, training: bool) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            training,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Stored::Owned(t) => t,
            Stored::Param(id) => self.store.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Stored::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Stored::Owned(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Stored::Param(id),
            op: Op::Param(id),
            needs_grad: self.store.get(id).trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `y = x W + b` over the last axis; `W` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.cols() != wv.shape()[0] {
            return Err(Error::shape("linear", xv.shape(), wv.shape()));
        }
        let (n, inp, out) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        let mut y = Tensor::zeros(&shape);
        gemm(
            false,
            false,
            n,
            out,
            inp,
            T::one(),
            xv.data(),
            inp,
            wv.data(),
            out,
            T::zero(),
            y.data_mut(),
            out,
        );
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != out {
                return Err(Error::shape("linear_bias", bv.shape(), &[out]));
            }
            for row in y.data_mut().chunks_mut(out) {
                for (v, &bb) in row.iter_mut().zip(bv.data()) {
                    *v += bb;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(y, Op::Linear { x, w, b }, &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", av.shape(), bv.shape()));
        }
        let mut y = av.clone();
        y.add_assign(bv);
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(y, Op::Scale(x, c), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x), &[x]))
    }

    /// Normalises the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != c || bv.len() != c {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let n = xv.rows();
        let mut y = Tensor::zeros(xv.shape());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); n];
        let inv_c = T::lit(1.0 / c as f64);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + T::lit(LN_EPS)).sqrt();
            rstd[r] = rs;
            let out = &mut y.data_mut()[r * c..(r + 1) * c];
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        let tanh = gelu_tanh(y.data());
        let half = T::lit(0.5);
        for (v, &t) in y.data_mut().iter_mut().zip(&tanh) {
            *v = half * *v * (T::one() + t);
        }
        self.push(y, Op::Gelu { x, tanh }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
        self.push(y, Op::Relu(x), &[x])
    }

    /// Inverted dropout; the identity outside training or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability {p}")));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let xv = self.value(x);
        // Drop when a uniform 32-bit draw falls below p * 2^32.
        let threshold = (p * 4_294_967_296.0) as u64;
        let mask: Vec<T> = (0..xv.len())
            .map(|_| {
                if u64::from(rng.next_u32()) < threshold {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut y = xv.clone();
        y.data_mut()
            .iter_mut()
            .zip(&mask)
            .for_each(|(v, &m)| *v *= m);
        Ok(self.push(y, Op::Dropout { x, mask }, &[x]))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut y = xv.clone();
        let d = y.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * axis_len + a) * inner + i;
                let mut m = T::neg_infinity();
                for a in 0..axis_len {
                    m = m.max(d[at(a)]);
                }
                let mut s = T::zero();
                for a in 0..axis_len {
                    let e = (d[at(a)] - m).exp();
                    d[at(a)] = e;
                    s += e;
                }
                for a in 0..axis_len {
                    d[at(a)] /= s;
                }
            }
        }
        Ok(self.push(
            y,
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            },
            &[x],
        ))
    }

    /// Scaled dot-product attention core over a fused `[rows, 3d]` QKV matrix.
    pub fn attention(&mut self, qkv: Var, layout: &Rc<AttnLayout>, heads: usize) -> Result<Var> {
        let qv = self.value(qkv);
        let three_d = qv.cols();
        if !three_d.is_multiple_of(3) || heads == 0 || !(three_d / 3).is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention width {} is not divisible into 3 x {heads} heads",
                three_d
            )));
        }
        if qv.rows() != layout.rows() {
            return Err(Error::shape(
                "attention",
                qv.shape(),
                &[layout.rows(), three_d],
            ));
        }
        let d = three_d / 3;
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut out = Tensor::zeros(&[qv.rows(), d]);
        let mut probs = vec![T::zero(); layout.prob_len(heads)];
        let mut p_off = 0;
        let q = qv.data();
        for &(start, len) in &layout.segments {
            for h in 0..heads {
                let p = &mut probs[p_off..p_off + len * len];
                let base = start * three_d + h * dh;
                gemm(
                    false,
                    true,
                    len,
                    len,
                    dh,
                    scale,
                    &q[base..],
                    three_d,
                    &q[base + d..],
                    three_d,
                    T::zero(),
                    p,
                    len,
                );
                for i in 0..len {
                    let row = &mut p[i * len..(i + 1) * len];
                    if let Some(valid) = &layout.key_valid {
                        for (j, v) in row.iter_mut().enumerate() {
                            if !valid[start + j] {
                                *v = T::neg_infinity();
                            }
                        }
                    }
                    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                    if m == T::neg_infinity() {
                        row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    row.iter_mut().for_each(|v| *v -= m);
                    T::exp_slice(row);
                    let s: T = row.iter().copied().sum();
                    let inv = T::one() / s;
                    row.iter_mut().for_each(|v| *v *= inv);
                }
                let o = &mut out.data_mut()[start * d + h * dh..];
                gemm(
                    false,
                    false,
                    len,
                    dh,
                    len,
                    T::one(),
                    p,
                    len,
                    &q[base + 2 * d..],
                    three_d,
                    T::zero(),
                    o,
                    d,
                );
                p_off += len * len;
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                qkv,
                layout: Rc::clone(layout),
                heads,
                probs,
            },
            &[qkv],
        ))
    }

    /// Attention probabilities recorded by an attention node, per segment and head.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Row gather: `out[i] = x[idx[i]]`. Also serves as embedding lookup.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "row index {bad} out of range for {rows} rows"
            )));
        }
        if idx.is_empty() {
            return Err(Error::InvalidArgument("empty row gather".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(xv.row(i));
        }
        let y = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(y, Op::Gather { x, idx }, &[x]))
    }

    /// Embedding lookup of `ids` into a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, Rc::new(ids.to_vec()))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::shape("concat_rows", av.shape(), bv.shape()));
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let y = Tensor::new(vec![av.rows() + bv.rows(), av.cols()], data)?;
        Ok(self.push(y, Op::Concat(a, b), &[a, b]))
    }

    /// Graph aggregation over joint blocks of each row of `x: [n, J*g]`.
    pub fn joint_mix(&mut self, x: Var, mix: &Rc<JointMixing<T>>) -> Result<Var> {
        let xv = self.value(x);
        let j = mix.joints;
        if !xv.cols().is_multiple_of(j) {
            return Err(Error::shape("joint_mix", xv.shape(), &[j]));
        }
        let g = xv.cols() / j;
        let c = xv.cols();
        let mut y = Tensor::zeros(xv.shape());
        for (src, dst) in xv.data().chunks(c).zip(y.data_mut().chunks_mut(c)) {
            for (i, nb) in mix.neighbors.iter().enumerate() {
                let out = &mut dst[i * g..(i + 1) * g];
                for &(k, a) in nb {
                    for (o, &s) in out.iter_mut().zip(&src[k * g..(k + 1) * g]) {
                        *o += a * s;
                    }
                }
            }
        }
        Ok(self.push(
            y,
            Op::JointMix {
                x,
                mix: Rc::clone(mix),
            },
            &[x],
        ))
    }

    /// Scales each row to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut y = xv.clone();
        let mut inv_norms = Vec::with_capacity(xv.rows());
        for row in y.data_mut().chunks_mut(c) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(n > T::lit(1e-12)) {
                return Err(Error::NonFinite(
                    "cannot normalise a zero or non-finite row".into(),
                ));
            }
            let inv = T::one() / n;
            row.iter_mut().for_each(|v| *v *= inv);
            inv_norms.push(inv);
        }
        Ok(self.push(y, Op::L2Normalize { x, inv_norms }, &[x]))
    }

    /// `a · bᵀ` for row matrices `a: [n, p]`, `b: [m, p]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.cols() {
            return Err(Error::shape("matmul_nt", av.shape(), bv.shape()));
        }
        let (n, m, p) = (av.rows(), bv.rows(), av.cols());
        let mut y = Tensor::zeros(&[n, m]);
        gemm(
            false,
            true,
            n,
            m,
            p,
            T::one(),
            av.data(),
            p,
            bv.data(),
            p,
            T::zero(),
            y.data_mut(),
            m,
        );
        Ok(self.push(y, Op::MatMulNT(a, b), &[a, b]))
    }

    /// `x * exp(s)` for a scalar `s`.
    pub fn scale_exp(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::shape("scale_exp", sv.shape(), &[1]));
        }
        let f = sv.data()[0].exp();
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v *= f);
        Ok(self.push(y, Op::ScaleExp { x, s }, &[x, s]))
    }

    /// Mean cross-entropy of the diagonal under a softmax over each row
    /// (`transpose == false`) or each column (`transpose == true`).
    pub fn diag_cross_entropy(&mut self, x: Var, transpose: bool) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::shape("diag_cross_entropy", s, &[s[0], s[0]]));
        }
        let n = s[0];
        let at = |i: usize, j: usize| if transpose { j * n + i } else { i * n + j };
        let d = xv.data();
        let mut probs = vec![T::zero(); n * n];
        let mut total = 0.0f64;
        for i in 0..n {
            let m = (0..n)
                .map(|j| d[at(i, j)].as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n).map(|j| (d[at(i, j)].as_f64() - m).exp()).sum();
            for j in 0..n {
                probs[at(i, j)] = T::lit((d[at(i, j)].as_f64() - m).exp() / z);
            }
            total += m + z.ln() - d[at(i, i)].as_f64();
        }
        let y = Tensor::scalar(T::lit(total / n as f64));
        Ok(self.push(y, Op::DiagXent { x, probs }, &[x]))
    }

    /// `Σ_r w_r Σ_c |x_rc − t_rc|`, accumulated in f64.
    pub fn weighted_l1(&mut self, x: Var, target: &Tensor<T>, row_weights: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(Error::shape("weighted_l1", xv.shape(), target.shape()));
        }
        if row_weights.len() != xv.rows() {
            return Err(Error::shape(
                "weighted_l1_weights",
                &[xv.rows()],
                &[row_weights.len()],
            ));
        }
        let c = xv.cols();
        let mut total = 0.0f64;
        for (r, &w) in row_weights.iter().enumerate() {
            if w == T::zero() {
                continue;
            }
            let s: f64 = xv
                .row(r)
                .iter()
                .zip(target.row(r))
                .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
                .sum();
            total += w.as_f64() * s;
        }
        debug_assert_eq!(c * row_weights.len(), xv.len());
        let y = Tensor::scalar(T::lit(total));
        Ok(self.push(
            y,
            Op::WeightedL1 {
                x,
                target: target.data().to_vec(),
                row_weights,
            },
            &[x],
        ))
    }

    /// `Σ_k c_k x_k` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = 0.0f64;
        for &(v, c) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::shape("weighted_sum", t.shape(), &[1]));
            }
            total += c.as_f64() * t.data()[0].as_f64();
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(
            Tensor::scalar(T::lit(total)),
            Op::WeightedSum(terms.to_vec()),
            &inputs,
        ))
    }

    /// Signs at every non-differentiable point of the tape (ReLU inputs and
    /// L1 residuals) in node order. A change between two forward passes means
    /// a finite difference straddled a kink.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Relu(x) => out.extend(self.value(*x).data().iter().map(|v| v.as_f64() > 0.0)),
                Op::WeightedL1 { x, target, .. } => out.extend(
                    self.value(*x)
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(a, b)| a.as_f64() > b.as_f64()),
                ),
                _ => {}
            }
        }
        out
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward", lv.shape(), &[1]));
        }
        self.backward_from(&[(loss, Tensor::full(lv.shape(), T::one()))])
    }

    /// Backpropagates given upstream gradients for arbitrary nodes.
    pub fn backward_from(&self, seeds: &[(Var, Tensor<T>)]) -> Result<Grads<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        for (v, g) in seeds {
            if g.shape() != self.value(*v).shape() {
                return Err(Error::shape(
                    "backward_seed",
                    g.shape(),
                    self.value(*v).shape(),
                ));
            }
            accumulate(&mut grads, *v, g.clone());
        }
        let mut out = Grads::new(self.store.len());
        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backward_node(idx, dy, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backward_node(
        &self,
        idx: usize,
        dy: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        out: &mut Grads<T>,
    ) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.accumulate(*id, dy),
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, inp, outd) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    gemm(
                        false,
                        true,
                        n,
                        inp,
                        outd,
                        T::one(),
                        dy.data(),
                        outd,
                        wv.data(),
                        outd,
                        T::zero(),
                        dx.data_mut(),
                        inp,
                    );
                    accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    gemm(
                        true,
                        false,
                        inp,
                        outd,
                        n,
                        T::one(),
                        xv.data(),
                        inp,
                        dy.data(),
                        outd,
                        T::zero(),
                        dw.data_mut(),
                        outd,
                    );
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = Tensor::zeros(self.value(*b).shape());
                        for row in dy.data().chunks(outd) {
                            for (a, &g) in db.data_mut().iter_mut().zip(row) {
                                *a += g;
                            }
                        }
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, dy);
                }
            }
            Op::Scale(x, c) => {
                let mut dx = dy;
                dx.data_mut().iter_mut().for_each(|v| *v *= *c);
                accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let dx = dy.reshape(self.value(*x).shape()).expect("same size");
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.value(*x).cols();
                let gv = self.value(*gamma).data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = Tensor::zeros(&[c]);
                    let mut db = Tensor::zeros(&[c]);
                    for (r, row) in dy.data().chunks(c).enumerate() {
                        for j in 0..c {
                            dg.data_mut()[j] += row[j] * xhat[r * c + j];
                            db.data_mut()[j] += row[j];
                        }
                    }
                    let dg = dg.reshape(self.value(*gamma).shape()).expect("same size");
                    let db = db.reshape(self.value(*beta).shape()).expect("same size");
                    if self.needs(*gamma) {
                        accumulate(grads, *gamma, dg);
                    }
                    if self.needs(*beta) {
                        accumulate(grads, *beta, db);
                    }
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    let inv_c = T::lit(1.0 / c as f64);
                    let mut dxhat = vec![T::zero(); c];
                    for (r, row) in dy.data().chunks(c).enumerate() {
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..c {
                            dxhat[j] = row[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xh[j];
                        }
                        mean_d *= inv_c;
                        mean_dx *= inv_c;
                        let o = &mut dx.data_mut()[r * c..(r + 1) * c];
                        for j in 0..c {
                            o[j] = rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Gelu { x, tanh } => {
                let mut dx = dy;
                for ((g, &xv), &t) in dx
                    .data_mut()
                    .iter_mut()
                    .zip(self.value(*x).data())
                    .zip(tanh)
                {
                    *g *= gelu_grad(xv, t);
                }
                accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let mut dx = dy;
                for (g, &xv) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if xv <= T::zero() {
                        *g = T::zero();
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                let mut dx = dy;
                dx.data_mut()
                    .iter_mut()
                    .zip(mask)
                    .for_each(|(g, &m)| *g *= m);
                accumulate(grads, *x, dx);
            }
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            } => {
                let y = match &node.value {
                    Stored::Owned(t) => t.data(),
                    Stored::Param(_) => unreachable!(),
                };
                let mut dx = dy;
                let d = dx.data_mut();
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |a: usize| (o * axis_len + a) * inner + i;
                        let dot: T = (0..*axis_len).map(|a| d[at(a)] * y[at(a)]).sum();
                        for a in 0..*axis_len {
                            d[at(a)] = y[at(a)] * (d[at(a)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Attention {
                qkv,
                layout,
                heads,
                probs,
            } => {
                let qv = self.value(*qkv);
                let three_d = qv.cols();
                let d = three_d / 3;
                let dh = d / heads;
                let scale = T::lit(1.0 / (dh as f64).sqrt());
                let q = qv.data();
                let mut dqkv = Tensor::zeros(qv.shape());
                let mut dp = Vec::new();
                let mut p_off = 0;
                for &(start, len) in &layout.segments {
                    dp.resize(len * len, T::zero());
                    for h in 0..*heads {
                        let p = &probs[p_off..p_off + len * len];
                        let base = start * three_d + h * dh;
                        let dout = &dy.data()[start * d + h * dh..];
                        gemm(
                            false,
                            true,
                            len,
                            len,
                            dh,
                            T::one(),
                            dout,
                            d,
                            &q[base + 2 * d..],
                            three_d,
                            T::zero(),
                            &mut dp,
                            len,
                        );
                        gemm(
                            true,
                            false,
                            len,
                            dh,
                            len,
                            T::one(),
                            p,
                            len,
                            dout,
                            d,
                            T::one(),
                            &mut dqkv.data_mut()[base + 2 * d..],
                            three_d,
                        );
                        for i in 0..len {
                            let pr = &p[i * len..(i + 1) * len];
                            let dr = &mut dp[i * len..(i + 1) * len];
                            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                            for (g, &pp) in dr.iter_mut().zip(pr) {
                                *g = pp * (*g - dot);
                            }
                        }
                        gemm(
                            false,
                            false,
                            len,
                            dh,
                            len,
                            scale,
                            &dp,
                            len,
                            &q[base + d..],
                            three_d,
                            T::one(),
                            &mut dqkv.data_mut()[base..],
                            three_d,
                        );
                        gemm(
                            true,
                            false,
                            len,
                            dh,
                            len,
                            scale,
                            &dp,
                            len,
                            &q[base..],
                            three_d,
                            T::one(),
                            &mut dqkv.data_mut()[base + d..],
                            three_d,
                        );
                        p_off += len * len;
                    }
                }
                accumulate(grads, *qkv, dqkv);
            }
            Op::Gather { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for (r, &i) in idx.iter().enumerate() {
                    let src = &dy.data()[r * c..(r + 1) * c];
                    for (a, &g) in dx.data_mut()[i * c..(i + 1) * c].iter_mut().zip(src) {
                        *a += g;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Concat(a, b) => {
                let split = self.value(*a).len();
                if self.needs(*a) {
                    let da =
                        Tensor::new(self.value(*a).shape().to_vec(), dy.data()[..split].to_vec())
                            .expect("same size");
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db =
                        Tensor::new(self.value(*b).shape().to_vec(), dy.data()[split..].to_vec())
                            .expect("same size");
                    accumulate(grads, *b, db);
                }
            }
            Op::JointMix { x, mix } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let g = c / mix.joints;
                let mut dx = Tensor::zeros(xv.shape());
                for (src, dst) in dy.data().chunks(c).zip(dx.data_mut().chunks_mut(c)) {
                    for (i, nb) in mix.neighbors.iter().enumerate() {
                        let gi = &src[i * g..(i + 1) * g];
                        for &(k, a) in nb {
                            for (o, &s) in dst[k * g..(k + 1) * g].iter_mut().zip(gi) {
                                *o += a * s;
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::L2Normalize { x, inv_norms } => {
                let y = match &node.value {
                    Stored::Owned(t) => t,
                    Stored::Param(_) => unreachable!(),
                };
                let c = y.cols();
                let mut dx = dy;
                for (r, g) in dx.data_mut().chunks_mut(c).enumerate() {
                    let yr = y.row(r);
                    let dot: T = g.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (gv, &yv) in g.iter_mut().zip(yr) {
                        *gv = (*gv - yv * dot) * inv_norms[r];
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, m, p) = (av.rows(), bv.rows(), av.cols());
                if self.needs(*a) {
                    let mut da = Tensor::zeros(av.shape());
                    gemm(
                        false,
                        false,
                        n,
                        p,
                        m,
                        T::one(),
                        dy.data(),
                        m,
                        bv.data(),
                        p,
                        T::zero(),
                        da.data_mut(),
                        p,
                    );
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(bv.shape());
                    gemm(
                        true,
                        false,
                        m,
                        p,
                        n,
                        T::one(),
                        dy.data(),
                        m,
                        av.data(),
                        p,
                        T::zero(),
                        db.data_mut(),
                        p,
                    );
                    accumulate(grads, *b, db);
                }
            }
            Op::ScaleExp { x, s } => {
                let f = self.value(*s).data()[0].exp();
                if self.needs(*s) {
                    let y = match &node.value {
                        Stored::Owned(t) => t,
                        Stored::Param(_) => unreachable!(),
                    };
                    let ds: f64 = dy
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&g, &v)| g.as_f64() * v.as_f64())
                        .sum();
                    let shape = self.value(*s).shape().to_vec();
                    accumulate(grads, *s, Tensor::full(&shape, T::lit(ds)));
                }
                if self.needs(*x) {
                    let mut dx = dy;
                    dx.data_mut().iter_mut().for_each(|v| *v *= f);
                    accumulate(grads, *x, dx);
                }
            }
            Op::DiagXent { x, probs, .. } => {
                let n = self.value(*x).shape()[0];
                let g = dy.data()[0] / T::lit(n as f64);
                let mut dx = Tensor::new(vec![n, n], probs.clone()).expect("square");
                for (k, v) in dx.data_mut().iter_mut().enumerate() {
                    let diag = if k / n == k % n { T::one() } else { T::zero() };
                    *v = (*v - diag) * g;
                }
                accumulate(grads, *x, dx);
            }
            Op::WeightedL1 {
                x,
                target,
                row_weights,
            } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let g = dy.data()[0];
                let mut dx = Tensor::zeros(xv.shape());
                for (r, &w) in row_weights.iter().enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let o = &mut dx.data_mut()[r * c..(r + 1) * c];
                    for j in 0..c {
                        let diff = xv.data()[r * c + j] - target[r * c + j];
                        o[j] = if diff > T::zero() {
                            g * w
                        } else if diff < T::zero() {
                            -g * w
                        } else {
                            T::zero()
                        };
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::WeightedSum(terms) => {
                let g = dy.data()[0];
                for &(v, c) in terms {
                    if self.needs(v) {
                        let shape = self.value(v).shape().to_vec();
                        accumulate(grads, v, Tensor::full(&shape, g * c));
                    }
                }
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
