//! Tape-based reverse-mode differentiation over the small op set the toy
//! encoder, decoder and diffusion transformer need.
//!
//! Every node stores its forward value. `backward` walks the tape once in
//! reverse creation order, so gradients accumulate in a fixed order and the
//! result is bit-reproducible.

use crate::error::{shape_err, Result};
use crate::params::ParamSet;
use crate::tensor::{gemm, Real, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    LayerNorm(Var),
    Attention { qkv: Var, batch: usize, seq: usize, heads: usize },
    ConcatSeq { parts: Vec<(Var, usize)>, batch: usize },
    SliceSeq { a: Var, batch: usize, seq: usize, start: usize, len: usize },
    SeqMean { a: Var, batch: usize, seq: usize },
    AddSeqBroadcast { a: Var, b: Var, seq: usize },
    AddPos { a: Var, pos: Var },
    TokenMix { mix: Var, a: Var, batch: usize },
    Gather { table: Var, idx: Vec<usize> },
    MseLoss(Var),
    CosineLoss(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    MeanAll(Var),
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op,
    needs_grad: bool,
    /// Op-specific saved state (normalization scales, attention weights,
    /// loss targets, softmax probabilities).
    aux: Vec<T>,
}

/// A single-use computation tape.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + k * x * x * x);
    // tanh via one exp; libm tanh dominates the step time otherwise
    let th = if inner.abs() < T::lit(1e-4) {
        inner
    } else {
        let e = (inner + inner).exp();
        T::one() - T::lit(2.0) / (e + T::one())
    };
    let val = half * x * (T::one() + th);
    let dinner = c * (T::one() + T::lit(3.0) * k * x * x);
    let der = half * (T::one() + th) + half * x * (T::one() - th * th) * dinner;
    (val, der)
}

impl<T: Real> Graph<T> {
    pub const LN_EPS: f64 = 1e-6;

    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool, aux: Vec<T>) -> Var {
        self.nodes.push(Node { value, grad: None, op, needs_grad, aux });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false, Vec::new())
    }

    /// Parameter leaf; its gradient is routed back by [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, ps: &ParamSet<T>, name: &str) -> Result<Var> {
        let id = ps.id(name)?;
        Ok(self.push(ps.by_id(id).value.clone(), Op::Param(id), true, Vec::new()))
    }

    /// Parameter leaf with gradients disabled (frozen weights).
    pub fn frozen(&mut self, ps: &ParamSet<T>, name: &str) -> Result<Var> {
        let t = ps.value(name)?.clone();
        Ok(self.input(t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng, Vec::new()))
    }

    /// Adds a row vector `b` (length = last dim of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let c = av.last_dim();
        if bv.len() != c {
            return shape_err("add_row", format!("{:?} + {:?}", av.dims(), bv.dims()));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::AddRow(a, b), ng, Vec::new()))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng, Vec::new()))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng, Vec::new()))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.check_same_dims(bv, "mul")?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(av.dims(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng, Vec::new()))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(T::lit(s));
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng, Vec::new())
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ng = self.ng(a);
        let av = self.value(a);
        let mut der = Vec::with_capacity(if ng { av.len() } else { 0 });
        let mut out = Vec::with_capacity(av.len());
        for &x in av.data() {
            let (v, d) = gelu_parts(x);
            out.push(v);
            if ng {
                der.push(d);
            }
        }
        let out = Tensor::from_vec(av.dims(), out).expect("dims");
        self.push(out, Op::Gelu(a), ng, der)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng, Vec::new())
    }

    /// Per-row layer normalization over the last dim, without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.last_dim();
        let cf = T::from_usize(c).unwrap();
        let eps = T::lit(Self::LN_EPS);
        let mut out = av.clone();
        let mut rstds = Vec::with_capacity(av.rows());
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / cf;
            let rstd = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm(a), ng, rstds)
    }

    /// Multi-head self-attention over a packed `[batch*seq, 3*width]` q/k/v
    /// projection; returns `[batch*seq, width]`.
    pub fn attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let qv = self.value(qkv);
        let w3 = qv.last_dim();
        if w3 % 3 != 0 || (w3 / 3) % heads != 0 || qv.rows() != batch * seq {
            return shape_err(
                "attention",
                format!("qkv {:?} for batch {batch} seq {seq} heads {heads}", qv.dims()),
            );
        }
        let width = w3 / 3;
        let dh = width / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut out = vec![T::zero(); batch * seq * width];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let data = qv.data();
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * w3;
                let q = base + h * dh;
                let k = base + width + h * dh;
                let v = base + 2 * width + h * dh;
                let p_off = (b * heads + h) * seq * seq;
                let p = &mut probs[p_off..p_off + seq * seq];
                // SAFETY: every view stays inside `data` / `p` / `out` by construction
                // of the offsets above; outputs are distinct buffers.
                unsafe {
                    T::gemm_raw(
                        seq, dh, seq, scale,
                        data.as_ptr().add(q), w3 as isize, 1,
                        data.as_ptr().add(k), 1, w3 as isize,
                        T::zero(), p.as_mut_ptr(), seq as isize, 1,
                    );
                }
                for row in p.chunks_mut(seq) {
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut s = T::zero();
                    for x in row.iter_mut() {
                        *x = (*x - mx).exp();
                        s += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= s;
                    }
                }
                unsafe {
                    T::gemm_raw(
                        seq, seq, dh, T::one(),
                        p.as_ptr(), seq as isize, 1,
                        data.as_ptr().add(v), w3 as isize, 1,
                        T::zero(), out.as_mut_ptr().add(b * seq * width + h * dh), width as isize, 1,
                    );
                }
            }
        }
        let out = Tensor::from_vec(&[batch * seq, width], out)?;
        let ng = self.ng(qkv);
        Ok(self.push(out, Op::Attention { qkv, batch, seq, heads }, ng, probs))
    }

    /// Concatenates per-sample sequences: each part is `[batch*len_i, width]`
    /// and the output is `[batch*sum(len_i), width]` with parts in order.
    pub fn concat_seq(&mut self, parts: &[(Var, usize)], batch: usize) -> Result<Var> {
        let width = self.value(parts[0].0).last_dim();
        let total: usize = parts.iter().map(|p| p.1).sum();
        let mut out = vec![T::zero(); batch * total * width];
        let mut offset = 0;
        for &(v, len) in parts {
            let pv = self.value(v);
            if pv.last_dim() != width || pv.rows() != batch * len {
                return shape_err(
                    "concat_seq",
                    format!("part {:?} for batch {batch} len {len} width {width}", pv.dims()),
                );
            }
            for b in 0..batch {
                let src = &pv.data()[b * len * width..(b + 1) * len * width];
                let dst = (b * total + offset) * width;
                out[dst..dst + len * width].copy_from_slice(src);
            }
            offset += len;
        }
        let out = Tensor::from_vec(&[batch * total, width], out)?;
        let ng = parts.iter().any(|p| self.ng(p.0));
        Ok(self.push(out, Op::ConcatSeq { parts: parts.to_vec(), batch }, ng, Vec::new()))
    }

    /// Positions `[start, start+len)` of each sample's sequence.
    pub fn slice_seq(&mut self, a: Var, batch: usize, seq: usize, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let width = av.last_dim();
        if av.rows() != batch * seq || start + len > seq {
            return shape_err("slice_seq", format!("{:?} seq {seq} [{start},+{len})", av.dims()));
        }
        let mut out = Vec::with_capacity(batch * len * width);
        for b in 0..batch {
            let s = (b * seq + start) * width;
            out.extend_from_slice(&av.data()[s..s + len * width]);
        }
        let out = Tensor::from_vec(&[batch * len, width], out)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceSeq { a, batch, seq, start, len }, ng, Vec::new()))
    }

    /// Mean over each sample's sequence: `[batch*seq, w] -> [batch, w]`.
    pub fn seq_mean(&mut self, a: Var, batch: usize, seq: usize) -> Result<Var> {
        let av = self.value(a);
        let width = av.last_dim();
        if av.rows() != batch * seq {
            return shape_err("seq_mean", format!("{:?} for batch {batch} seq {seq}", av.dims()));
        }
        let inv = T::one() / T::from_usize(seq).unwrap();
        let mut out = vec![T::zero(); batch * width];
        for b in 0..batch {
            for s in 0..seq {
                let row = &av.data()[(b * seq + s) * width..(b * seq + s + 1) * width];
                for (o, &x) in out[b * width..(b + 1) * width].iter_mut().zip(row) {
                    *o += x;
                }
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let out = Tensor::from_vec(&[batch, width], out)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::SeqMean { a, batch, seq }, ng, Vec::new()))
    }

    /// Adds a per-sample vector `b: [batch, w]` to each position of `a: [batch*seq, w]`.
    pub fn add_seq_broadcast(&mut self, a: Var, b: Var, seq: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let width = av.last_dim();
        if bv.last_dim() != width || av.rows() != bv.rows() * seq {
            return shape_err("add_seq_broadcast", format!("{:?} + {:?}", av.dims(), bv.dims()));
        }
        let mut out = av.clone();
        for (r, row) in out.data_mut().chunks_mut(width).enumerate() {
            let bb = &bv.data()[(r / seq) * width..(r / seq + 1) * width];
            for (o, &x) in row.iter_mut().zip(bb) {
                *o += x;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::AddSeqBroadcast { a, b, seq }, ng, Vec::new()))
    }

    /// Adds a positional table `pos: [seq, w]` to every sample of `a: [batch*seq, w]`.
    pub fn add_pos(&mut self, a: Var, pos: Var) -> Result<Var> {
        let (av, pv) = (self.value(a), self.value(pos));
        let width = av.last_dim();
        let seq = pv.rows();
        if pv.last_dim() != width || seq == 0 || av.rows() % seq != 0 {
            return shape_err("add_pos", format!("{:?} + {:?}", av.dims(), pv.dims()));
        }
        let mut out = av.clone();
        for (r, row) in out.data_mut().chunks_mut(width).enumerate() {
            let pp = &pv.data()[(r % seq) * width..(r % seq + 1) * width];
            for (o, &x) in row.iter_mut().zip(pp) {
                *o += x;
            }
        }
        let ng = self.ng(a) || self.ng(pos);
        Ok(self.push(out, Op::AddPos { a, pos }, ng, Vec::new()))
    }

    /// Token mixing: for each sample, `Y_b = M X_b` with `M: [seq, seq]`.
    pub fn token_mix(&mut self, mix: Var, a: Var, batch: usize) -> Result<Var> {
        let (mv, av) = (self.value(mix), self.value(a));
        let seq = mv.rows();
        let width = av.last_dim();
        if mv.last_dim() != seq || av.rows() != batch * seq {
            return shape_err("token_mix", format!("{:?} x {:?}", mv.dims(), av.dims()));
        }
        let mut out = vec![T::zero(); batch * seq * width];
        for b in 0..batch {
            let s = b * seq * width;
            gemm(
                seq, seq, width, T::one(),
                mv.data(), false,
                &av.data()[s..s + seq * width], false,
                T::zero(), &mut out[s..s + seq * width],
            );
        }
        let out = Tensor::from_vec(&[batch * seq, width], out)?;
        let ng = self.ng(mix) || self.ng(a);
        Ok(self.push(out, Op::TokenMix { mix, a, batch }, ng, Vec::new()))
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(table).select_outer(idx)?;
        let ng = self.ng(table);
        Ok(self.push(out, Op::Gather { table, idx: idx.to_vec() }, ng, Vec::new()))
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, a: Var, target: &Tensor<T>) -> Result<Var> {
        let av = self.value(a);
        if av.len() != target.len() {
            return shape_err("mse_loss", format!("{:?} vs {:?}", av.dims(), target.dims()));
        }
        let n = T::from_usize(av.len().max(1)).unwrap();
        let loss = av.data().iter().zip(target.data()).map(|(&x, &t)| (x - t) * (x - t)).sum::<T>() / n;
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(loss), Op::MseLoss(a), ng, target.data().to_vec()))
    }

    /// Mean over rows of `1 - cos(a_row, target_row)`. Rows where either side
    /// has zero norm count as similarity 0.
    pub fn cosine_loss(&mut self, a: Var, target: &Tensor<T>) -> Result<Var> {
        let av = self.value(a);
        if av.len() != target.len() || av.last_dim() != target.last_dim() {
            return shape_err("cosine_loss", format!("{:?} vs {:?}", av.dims(), target.dims()));
        }
        let loss = cosine_distance_mean(av.data(), target.data(), av.last_dim());
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(loss), Op::CosineLoss(a), ng, target.data().to_vec()))
    }

    /// Mean softmax cross-entropy of `logits: [n, classes]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.last_dim();
        if lv.rows() != labels.len() || labels.iter().any(|&l| l >= c) {
            return shape_err("cross_entropy", format!("{:?} with {} labels", lv.dims(), labels.len()));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = T::zero();
        for (row, &l) in probs.chunks_mut(c).zip(labels) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
            loss -= row[l].max(T::min_positive_value()).ln();
        }
        loss /= T::from_usize(labels.len().max(1)).unwrap();
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec() }, ng, probs))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.value(a).mean();
        let ng = self.ng(a);
        self.push(Tensor::scalar(m), Op::MeanAll(a), ng, Vec::new())
    }

    fn acc(&mut self, v: Var, g: Tensor<T>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += *x;
                }
            }
            None => node.grad = Some(g),
        }
    }

    fn acc_slice(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let g = node.grad.get_or_insert_with(|| Tensor::zeros(node.value.dims()));
        f(g.data_mut());
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return shape_err("backward", format!("root must be scalar, got {:?}", self.value(root).dims()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = self.nodes[i].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(i, &op, &gy)?;
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(gy);
        }
        Ok(())
    }

    fn backward_op(&mut self, i: usize, op: &Op, gy: &Tensor<T>) -> Result<()> {
        match *op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(a).rows(), self.value(a).last_dim());
                let n = self.value(b).last_dim();
                if self.ng(a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, T::one(), gy.data(), false, self.value(b).data(), true, T::zero(), &mut ga);
                    let dims = self.value(a).dims().to_vec();
                    self.acc(a, Tensor::from_vec(&dims, ga)?);
                }
                if self.ng(b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, T::one(), self.value(a).data(), true, gy.data(), false, T::zero(), &mut gb);
                    let dims = self.value(b).dims().to_vec();
                    self.acc(b, Tensor::from_vec(&dims, gb)?);
                }
            }
            Op::AddRow(a, b) => {
                self.acc(a, gy.clone());
                if self.ng(b) {
                    let c = gy.last_dim();
                    let mut gb = vec![T::zero(); c];
                    for row in gy.data().chunks(c) {
                        for (g, &x) in gb.iter_mut().zip(row) {
                            *g += x;
                        }
                    }
                    let dims = self.value(b).dims().to_vec();
                    self.acc(b, Tensor::from_vec(&dims, gb)?);
                }
            }
            Op::Add(a, b) => {
                self.acc(a, gy.clone());
                self.acc(b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(a, gy.clone());
                if self.ng(b) {
                    self.acc(b, gy.scale(-T::one()));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(a) {
                    let g = Tensor::from_vec(
                        gy.dims(),
                        gy.data().iter().zip(self.value(b).data()).map(|(&g, &y)| g * y).collect(),
                    )?;
                    self.acc(a, g);
                }
                if self.ng(b) {
                    let g = Tensor::from_vec(
                        gy.dims(),
                        gy.data().iter().zip(self.value(a).data()).map(|(&g, &x)| g * x).collect(),
                    )?;
                    self.acc(b, g);
                }
            }
            Op::Scale(a, s) => self.acc(a, gy.scale(T::lit(s))),
            Op::Gelu(a) => {
                let data = gy.data().iter().zip(&self.nodes[i].aux).map(|(&g, &d)| g * d).collect();
                self.acc(a, Tensor::from_vec(gy.dims(), data)?);
            }
            Op::Tanh(a) => {
                let data =
                    gy.data().iter().zip(self.nodes[i].value.data()).map(|(&g, &y)| g * (T::one() - y * y)).collect();
                self.acc(a, Tensor::from_vec(gy.dims(), data)?);
            }
            Op::LayerNorm(a) => {
                let y = &self.nodes[i].value;
                let c = y.last_dim();
                let cf = T::from_usize(c).unwrap();
                let mut gx = vec![T::zero(); y.len()];
                for (r, rstd) in self.nodes[i].aux.iter().enumerate() {
                    let yr = &y.data()[r * c..(r + 1) * c];
                    let gr = &gy.data()[r * c..(r + 1) * c];
                    let mg = gr.iter().copied().sum::<T>() / cf;
                    let mgy = gr.iter().zip(yr).map(|(&g, &yy)| g * yy).sum::<T>() / cf;
                    for ((o, &g), &yy) in gx[r * c..(r + 1) * c].iter_mut().zip(gr).zip(yr) {
                        *o = *rstd * (g - mg - yy * mgy);
                    }
                }
                let dims = y.dims().to_vec();
                self.acc(a, Tensor::from_vec(&dims, gx)?);
            }
            Op::Attention { qkv, batch, seq, heads } => {
                let g = self.attention_backward(i, qkv, batch, seq, heads, gy)?;
                self.acc(qkv, g);
            }
            Op::ConcatSeq { ref parts, batch } => {
                let width = gy.last_dim();
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(v, len) in parts {
                    if self.ng(v) {
                        let mut g = Vec::with_capacity(batch * len * width);
                        for b in 0..batch {
                            let s = (b * total + offset) * width;
                            g.extend_from_slice(&gy.data()[s..s + len * width]);
                        }
                        let dims = self.value(v).dims().to_vec();
                        self.acc(v, Tensor::from_vec(&dims, g)?);
                    }
                    offset += len;
                }
            }
            Op::SliceSeq { a, batch, seq, start, len } => {
                let width = gy.last_dim();
                self.acc_slice(a, |g| {
                    for b in 0..batch {
                        let d = (b * seq + start) * width;
                        for (o, &x) in g[d..d + len * width].iter_mut().zip(&gy.data()[b * len * width..]) {
                            *o += x;
                        }
                    }
                });
            }
            Op::SeqMean { a, batch, seq } => {
                let width = gy.last_dim();
                let inv = T::one() / T::from_usize(seq).unwrap();
                self.acc_slice(a, |g| {
                    for b in 0..batch {
                        let gb = &gy.data()[b * width..(b + 1) * width];
                        for s in 0..seq {
                            let d = (b * seq + s) * width;
                            for (o, &x) in g[d..d + width].iter_mut().zip(gb) {
                                *o += x * inv;
                            }
                        }
                    }
                });
            }
            Op::AddSeqBroadcast { a, b, seq } => {
                self.acc(a, gy.clone());
                let width = gy.last_dim();
                self.acc_slice(b, |g| {
                    for (r, row) in gy.data().chunks(width).enumerate() {
                        let d = (r / seq) * width;
                        for (o, &x) in g[d..d + width].iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                });
            }
            Op::AddPos { a, pos } => {
                self.acc(a, gy.clone());
                let width = gy.last_dim();
                let seq = self.value(pos).rows();
                self.acc_slice(pos, |g| {
                    for (r, row) in gy.data().chunks(width).enumerate() {
                        let d = (r % seq) * width;
                        for (o, &x) in g[d..d + width].iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                });
            }
            Op::TokenMix { mix, a, batch } => {
                let seq = self.value(mix).rows();
                let width = gy.last_dim();
                if self.ng(mix) {
                    let mut gm = vec![T::zero(); seq * seq];
                    let av = self.value(a).data();
                    for b in 0..batch {
                        let s = b * seq * width;
                        gemm(
                            seq, width, seq, T::one(),
                            &gy.data()[s..s + seq * width], false,
                            &av[s..s + seq * width], true,
                            T::one(), &mut gm,
                        );
                    }
                    let dims = self.value(mix).dims().to_vec();
                    self.acc(mix, Tensor::from_vec(&dims, gm)?);
                }
                if self.ng(a) {
                    let mut ga = vec![T::zero(); batch * seq * width];
                    let mv = self.value(mix).data();
                    for b in 0..batch {
                        let s = b * seq * width;
                        gemm(
                            seq, seq, width, T::one(),
                            mv, true,
                            &gy.data()[s..s + seq * width], false,
                            T::zero(), &mut ga[s..s + seq * width],
                        );
                    }
                    let dims = self.value(a).dims().to_vec();
                    self.acc(a, Tensor::from_vec(&dims, ga)?);
                }
            }
            Op::Gather { table, ref idx } => {
                let width = gy.last_dim();
                self.acc_slice(table, |g| {
                    for (r, &t) in idx.iter().enumerate() {
                        for (o, &x) in g[t * width..(t + 1) * width].iter_mut().zip(&gy.data()[r * width..]) {
                            *o += x;
                        }
                    }
                });
            }
            Op::MseLoss(a) => {
                let s = gy.data()[0];
                let av = self.value(a);
                let n = T::from_usize(av.len().max(1)).unwrap();
                let coef = T::lit(2.0) * s / n;
                let data = av.data().iter().zip(&self.nodes[i].aux).map(|(&x, &t)| coef * (x - t)).collect();
                let dims = av.dims().to_vec();
                self.acc(a, Tensor::from_vec(&dims, data)?);
            }
            Op::CosineLoss(a) => {
                let s = gy.data()[0];
                let av = self.value(a);
                let c = av.last_dim();
                let rows = av.rows();
                let coef = -s / T::from_usize(rows.max(1)).unwrap();
                let mut g = vec![T::zero(); av.len()];
                for r in 0..rows {
                    let x = &av.data()[r * c..(r + 1) * c];
                    let t = &self.nodes[i].aux[r * c..(r + 1) * c];
                    let nx = x.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let nt = t.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if nx <= T::lit(1e-12) || nt <= T::lit(1e-12) {
                        continue;
                    }
                    let dot = x.iter().zip(t).map(|(&p, &q)| p * q).sum::<T>();
                    let cos = dot / (nx * nt);
                    for ((o, &xv), &tv) in g[r * c..(r + 1) * c].iter_mut().zip(x).zip(t) {
                        *o = coef * (tv / (nx * nt) - cos * xv / (nx * nx));
                    }
                }
                let dims = av.dims().to_vec();
                self.acc(a, Tensor::from_vec(&dims, g)?);
            }
            Op::CrossEntropy { logits, ref labels } => {
                let s = gy.data()[0];
                let c = self.value(logits).last_dim();
                let coef = s / T::from_usize(labels.len().max(1)).unwrap();
                let mut g = self.nodes[i].aux.clone();
                for (row, &l) in g.chunks_mut(c).zip(labels) {
                    row[l] -= T::one();
                    row.iter_mut().for_each(|x| *x *= coef);
                }
                let dims = self.value(logits).dims().to_vec();
                self.acc(logits, Tensor::from_vec(&dims, g)?);
            }
            Op::MeanAll(a) => {
                let s = gy.data()[0];
                let n = T::from_usize(self.value(a).len().max(1)).unwrap();
                let dims = self.value(a).dims().to_vec();
                self.acc(a, Tensor::full(&dims, s / n));
            }
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        i: usize,
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        gy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let qv = self.value(qkv);
        let w3 = qv.last_dim();
        let width = w3 / 3;
        let dh = width / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let data = qv.data();
        let probs = &self.nodes[i].aux;
        let mut g = vec![T::zero(); data.len()];
        let mut dp = vec![T::zero(); seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * w3;
                let (q, k, v) = (base + h * dh, base + width + h * dh, base + 2 * width + h * dh);
                let o = b * seq * width + h * dh;
                let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                // SAFETY: offsets mirror the forward pass; `g` and `dp` are distinct
                // from the read-only inputs.
                unsafe {
                    // dP = dO V^T
                    T::gemm_raw(
                        seq, dh, seq, T::one(),
                        gy.data().as_ptr().add(o), width as isize, 1,
                        data.as_ptr().add(v), 1, w3 as isize,
                        T::zero(), dp.as_mut_ptr(), seq as isize, 1,
                    );
                    // dV = P^T dO
                    T::gemm_raw(
                        seq, seq, dh, T::one(),
                        p.as_ptr(), 1, seq as isize,
                        gy.data().as_ptr().add(o), width as isize, 1,
                        T::one(), g.as_mut_ptr().add(v), w3 as isize, 1,
                    );
                }
                // dS = P * (dP - rowsum(dP * P))
                for (dprow, prow) in dp.chunks_mut(seq).zip(p.chunks(seq)) {
                    let dot = dprow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<T>();
                    for (d, &pp) in dprow.iter_mut().zip(prow) {
                        *d = pp * (*d - dot);
                    }
                }
                unsafe {
                    // dQ = dS K * scale
                    T::gemm_raw(
                        seq, seq, dh, scale,
                        dp.as_ptr(), seq as isize, 1,
                        data.as_ptr().add(k), w3 as isize, 1,
                        T::one(), g.as_mut_ptr().add(q), w3 as isize, 1,
                    );
                    // dK = dS^T Q * scale
                    T::gemm_raw(
                        seq, seq, dh, scale,
                        dp.as_ptr(), 1, seq as isize,
                        data.as_ptr().add(q), w3 as isize, 1,
                        T::one(), g.as_mut_ptr().add(k), w3 as isize, 1,
                    );
                }
            }
        }
        Tensor::from_vec(qv.dims(), g)
    }

    /// Adds every parameter leaf's gradient into `ps`.
    pub fn accumulate_param_grads(&self, ps: &mut ParamSet<T>) {
        for node in &self.nodes {
            if let (Op::Param(id), Some(g)) = (&node.op, &node.grad) {
                let p = ps.by_id_mut(*id);
                for (dst, &src) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *dst += src;
                }
            }
        }
    }
}

/// Mean over rows of `1 - cos(a_row, b_row)`; zero-norm rows count as cos = 0.
pub fn cosine_distance_mean<T: Real>(a: &[T], b: &[T], width: usize) -> T {
    let rows = a.len() / width.max(1);
    let mut total = T::zero();
    for r in 0..rows {
        let x = &a[r * width..(r + 1) * width];
        let t = &b[r * width..(r + 1) * width];
        let nx = x.iter().map(|&v| v * v).sum::<T>().sqrt();
        let nt = t.iter().map(|&v| v * v).sum::<T>().sqrt();
        let cos = if nx <= T::lit(1e-12) || nt <= T::lit(1e-12) {
            T::zero()
        } else {
            x.iter().zip(t).map(|(&p, &q)| p * q).sum::<T>() / (nx * nt)
        };
        total += T::one() - cos;
    }
    total / T::from_usize(rows.max(1)).unwrap()
}
