//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built eagerly: every operation computes its value when it
//! is recorded. [`Graph::gradients`] then walks the tape backwards from a
//! scalar root, touching only nodes that lie between the root and the
//! requested variables.

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, Tensor};

/// Clamp applied to every probability before it enters a logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: Var, k: Var, geom: ConvGeometry },
    Deconv { x: Var, k: Var, geom: ConvGeometry },
    BiasAdd { x: Var, b: Var },
    Dense { x: Var, w: Var },
    Relu(Var),
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid(Var),
    ConcatLast { a: Var, b: Var },
    Reshape(Var),
    Add(Var, Var),
    MulConst { x: Var, c: Tensor },
    Mul(Var, Var),
    WeightedSum(Vec<(Var, f64)>),
    BceMean { p: Var, target: Tensor },
    WeightedL1Mean { p: Var, target: Tensor, weight: Tensor },
    NegLogMean(Var),
    NegLogOneMinusMean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    label: Option<String>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[inline]
fn inside_clamp(p: f64) -> bool {
    (PROB_EPS..=1.0 - PROB_EPS).contains(&p)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Attaches a human-readable label (used for layer shape walks).
    pub fn tag(&mut self, v: Var, label: impl Into<String>) -> Var {
        self.nodes[v.0].label = Some(label.into());
        v
    }

    /// Labelled nodes in recording order.
    pub fn tagged(&self) -> Vec<(String, Vec<usize>)> {
        self.nodes
            .iter()
            .filter_map(|n| n.label.clone().map(|l| (l, n.value.shape().to_vec())))
            .collect()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf holding a copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 4 || ks.len() != 4 || ks[0] != ks[1] || ks[2] != xs[3] {
            return Err(Error::Shape(format!(
                "conv2d input {xs:?} incompatible with kernel {ks:?}"
            )));
        }
        let geom = ConvGeometry::same(xs[0], xs[1], xs[2], xs[3], ks[3], ks[0], stride);
        let out = tensor::conv2d(&geom, self.value(x).data(), self.value(k).data());
        let t = Tensor::new(geom.output_shape().to_vec(), out)?;
        Ok(self.push(t, Op::Conv { x, k, geom }))
    }

    /// Transposed convolution that multiplies spatial size by `stride`. The
    /// kernel has shape `(kh, kw, c_out, c_in)` so that it is the adjoint of
    /// a same-padded convolution from the output space back to the input.
    pub fn deconv2d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 4 || ks.len() != 4 || ks[0] != ks[1] || ks[3] != xs[3] {
            return Err(Error::Shape(format!(
                "deconv2d input {xs:?} incompatible with kernel {ks:?}"
            )));
        }
        let geom = ConvGeometry::same(xs[0], xs[1] * stride, xs[2] * stride, ks[2], ks[3], ks[0], stride);
        debug_assert_eq!((geom.out_h, geom.out_w), (xs[1], xs[2]));
        let out = tensor::conv2d_backward_input(&geom, self.value(x).data(), self.value(k).data());
        let t = Tensor::new(geom.input_shape().to_vec(), out)?;
        Ok(self.push(t, Op::Deconv { x, k, geom }))
    }

    /// Adds a per-channel bias along the last axis.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [c] {
            return Err(Error::Shape(format!(
                "bias {:?} does not match channels {c}",
                self.shape(b)
            )));
        }
        let bias = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for chunk in t.data_mut().chunks_mut(c) {
            for (v, bv) in chunk.iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        Ok(self.push(t, Op::BiasAdd { x, b }))
    }

    /// `(N, d_in) · (d_in, d_out)`.
    pub fn dense(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::Shape(format!(
                "dense input {xs:?} incompatible with weight {ws:?}"
            )));
        }
        let out = tensor::matmul(xs[0], xs[1], ws[1], self.value(x).data(), self.value(w).data());
        let t = Tensor::new(vec![xs[0], ws[1]], out)?;
        Ok(self.push(t, Op::Dense { x, w }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(t, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    /// Concatenates two tensors along their last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::Shape(format!("cannot concatenate {sa:?} and {sb:?}")));
        }
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows = self.value(a).len() / ca.max(1);
        let mut data = Vec::with_capacity(rows * (ca + cb));
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for r in 0..rows {
            data.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::ConcatLast { a, b }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let t = self.value(x).zip_map(&c, |a, b| a * b)?;
        Ok(self.push(t, Op::MulConst { x, c }))
    }

    /// `Σ wᵢ·sᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::Shape(format!(
                    "weighted_sum expects scalars, got {:?}",
                    self.shape(v)
                )));
            }
            total += w * self.value(v).item();
        }
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec())))
    }

    /// Mean per-element binary cross-entropy of predictions against a
    /// constant target, with predictions clamped to `[ε, 1−ε]`.
    pub fn bce_mean(&mut self, p: Var, target: &Tensor) -> Result<Var> {
        self.value(p).expect_shape(target.shape())?;
        let pred = self.value(p).data();
        let n = pred.len() as f64;
        let total: f64 = pred
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let q = clamp_prob(p);
                -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceMean {
                p,
                target: target.clone(),
            },
        ))
    }

    /// `mean |w ⊙ (p − target)|` with constant target and weights.
    pub fn weighted_l1_mean(&mut self, p: Var, target: &Tensor, weight: &Tensor) -> Result<Var> {
        self.value(p).expect_shape(target.shape())?;
        self.value(p).expect_shape(weight.shape())?;
        let pred = self.value(p).data();
        let n = pred.len() as f64;
        let total: f64 = pred
            .iter()
            .zip(target.data())
            .zip(weight.data())
            .map(|((&p, &t), &w)| (w * (p - t)).abs())
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::WeightedL1Mean {
                p,
                target: target.clone(),
                weight: weight.clone(),
            },
        ))
    }

    /// `mean(−ln p)` with clamped `p`.
    pub fn neg_log_mean(&mut self, p: Var) -> Var {
        let v = self.value(p);
        let total: f64 = v.data().iter().map(|&p| -clamp_prob(p).ln()).sum();
        let t = Tensor::scalar(total / v.len() as f64);
        self.push(t, Op::NegLogMean(p))
    }

    /// `mean(−ln(1 − p))` with clamped `p`.
    pub fn neg_log_one_minus_mean(&mut self, p: Var) -> Var {
        let v = self.value(p);
        let total: f64 = v.data().iter().map(|&p| -(1.0 - clamp_prob(p)).ln()).sum();
        let t = Tensor::scalar(total / v.len() as f64);
        self.push(t, Op::NegLogOneMinusMean(p))
    }

    fn inputs(op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Conv { x, k, .. } | Op::Deconv { x, k, .. } => vec![*x, *k],
            Op::BiasAdd { x, b } => vec![*x, *b],
            Op::Dense { x, w } => vec![*x, *w],
            Op::Relu(x) | Op::Sigmoid(x) | Op::Reshape(x) | Op::NegLogMean(x) | Op::NegLogOneMinusMean(x) => {
                vec![*x]
            }
            Op::LeakyRelu { x, .. } | Op::MulConst { x, .. } => vec![*x],
            Op::ConcatLast { a, b } | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::WeightedSum(terms) => terms.iter().map(|(v, _)| *v).collect(),
            Op::BceMean { p, .. } | Op::WeightedL1Mean { p, .. } => vec![*p],
        }
    }

    /// Gradients of the scalar `root` with respect to each of `wrt`.
    /// Variables that do not influence `root` receive zeros.
    pub fn gradients(&self, root: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "gradient root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        let n = root.0 + 1;
        let mut needed = vec![false; n];
        for v in wrt {
            if v.0 < n {
                needed[v.0] = true;
            }
        }
        for i in 0..n {
            if !needed[i] && Self::inputs(&self.nodes[i].op).iter().any(|v| needed[v.0]) {
                needed[i] = true;
            }
        }

        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        let mut results: Vec<Option<Tensor>> = vec![None; wrt.len()];

        for i in (0..n).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (slot, v) in wrt.iter().enumerate() {
                if v.0 == i {
                    results[slot] = Some(g.clone());
                }
            }
            let node = &self.nodes[i];
            let want = |v: &Var| needed[v.0];
            let send = |v: Var, t: Tensor, grads: &mut Vec<Option<Tensor>>| match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Conv { x, k, geom } => {
                    if want(x) {
                        let gx = tensor::conv2d_backward_input(geom, g.data(), self.value(*k).data());
                        send(*x, Tensor::new(geom.input_shape().to_vec(), gx)?, &mut grads);
                    }
                    if want(k) {
                        let gk = tensor::conv2d_backward_kernel(geom, self.value(*x).data(), g.data());
                        send(*k, Tensor::new(geom.kernel_shape().to_vec(), gk)?, &mut grads);
                    }
                }
                Op::Deconv { x, k, geom } => {
                    if want(x) {
                        let gx = tensor::conv2d(geom, g.data(), self.value(*k).data());
                        send(*x, Tensor::new(geom.output_shape().to_vec(), gx)?, &mut grads);
                    }
                    if want(k) {
                        let gk = tensor::conv2d_backward_kernel(geom, g.data(), self.value(*x).data());
                        send(*k, Tensor::new(geom.kernel_shape().to_vec(), gk)?, &mut grads);
                    }
                }
                Op::BiasAdd { x, b } => {
                    if want(b) {
                        let c = self.shape(*b)[0];
                        let mut gb = vec![0.0; c];
                        for chunk in g.data().chunks(c) {
                            for (acc, v) in gb.iter_mut().zip(chunk) {
                                *acc += v;
                            }
                        }
                        send(*b, Tensor::new(vec![c], gb)?, &mut grads);
                    }
                    if want(x) {
                        send(*x, g, &mut grads);
                    }
                }
                Op::Dense { x, w } => {
                    let xs = self.shape(*x);
                    let ws = self.shape(*w);
                    let (rows, din, dout) = (xs[0], xs[1], ws[1]);
                    if want(x) {
                        let gx = tensor::matmul_bt(rows, dout, din, g.data(), self.value(*w).data());
                        send(*x, Tensor::new(vec![rows, din], gx)?, &mut grads);
                    }
                    if want(w) {
                        let gw = tensor::matmul_at(rows, din, dout, self.value(*x).data(), g.data());
                        send(*w, Tensor::new(vec![din, dout], gw)?, &mut grads);
                    }
                }
                Op::Relu(x) => {
                    let gx = g.zip_map(&node.value, |gv, y| if y > 0.0 { gv } else { 0.0 })?;
                    send(*x, gx, &mut grads);
                }
                Op::LeakyRelu { x, slope } => {
                    let s = *slope;
                    let gx = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { s * gv })?;
                    send(*x, gx, &mut grads);
                }
                Op::Sigmoid(x) => {
                    let gx = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))?;
                    send(*x, gx, &mut grads);
                }
                Op::ConcatLast { a, b } => {
                    let ca = *self.shape(*a).last().unwrap();
                    let cb = *self.shape(*b).last().unwrap();
                    let rows = g.len() / (ca + cb).max(1);
                    let mut ga = Vec::with_capacity(rows * ca);
                    let mut gb = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        let row = &g.data()[r * (ca + cb)..(r + 1) * (ca + cb)];
                        ga.extend_from_slice(&row[..ca]);
                        gb.extend_from_slice(&row[ca..]);
                    }
                    if want(a) {
                        send(*a, Tensor::new(self.shape(*a).to_vec(), ga)?, &mut grads);
                    }
                    if want(b) {
                        send(*b, Tensor::new(self.shape(*b).to_vec(), gb)?, &mut grads);
                    }
                }
                Op::Reshape(x) => {
                    let gx = g.reshape(self.shape(*x))?;
                    send(*x, gx, &mut grads);
                }
                Op::Add(a, b) => {
                    if want(a) && want(b) {
                        send(*a, g.clone(), &mut grads);
                        send(*b, g, &mut grads);
                    } else if want(a) {
                        send(*a, g, &mut grads);
                    } else {
                        send(*b, g, &mut grads);
                    }
                }
                Op::Mul(a, b) => {
                    if want(a) {
                        send(*a, g.zip_map(self.value(*b), |x, y| x * y)?, &mut grads);
                    }
                    if want(b) {
                        send(*b, g.zip_map(self.value(*a), |x, y| x * y)?, &mut grads);
                    }
                }
                Op::MulConst { x, c } => {
                    send(*x, g.zip_map(c, |a, b| a * b)?, &mut grads);
                }
                Op::WeightedSum(terms) => {
                    let gv = g.item();
                    for &(v, w) in terms {
                        if want(&v) {
                            send(v, Tensor::full(self.shape(v), gv * w), &mut grads);
                        }
                    }
                }
                Op::BceMean { p, target } => {
                    let scale = g.item() / target.len() as f64;
                    let gp = self.value(*p).zip_map(target, |p, t| {
                        if inside_clamp(p) {
                            scale * (-t / p + (1.0 - t) / (1.0 - p))
                        } else {
                            0.0
                        }
                    })?;
                    send(*p, gp, &mut grads);
                }
                Op::WeightedL1Mean { p, target, weight } => {
                    let scale = g.item() / target.len() as f64;
                    let mut gp = self.value(*p).zip_map(target, |p, t| p - t)?;
                    for (d, w) in gp.data_mut().iter_mut().zip(weight.data()) {
                        let r = *d * w;
                        *d = scale * w * if r > 0.0 {
                            1.0
                        } else if r < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                    send(*p, gp, &mut grads);
                }
                Op::NegLogMean(p) => {
                    let pv = self.value(*p);
                    let scale = g.item() / pv.len() as f64;
                    let gp = pv.map(|p| if inside_clamp(p) { -scale / p } else { 0.0 });
                    send(*p, gp, &mut grads);
                }
                Op::NegLogOneMinusMean(p) => {
                    let pv = self.value(*p);
                    let scale = g.item() / pv.len() as f64;
                    let gp = pv.map(|p| if inside_clamp(p) { scale / (1.0 - p) } else { 0.0 });
                    send(*p, gp, &mut grads);
                }
            }
        }

        Ok(results
            .into_iter()
            .zip(wrt)
            .map(|(g, v)| g.unwrap_or_else(|| Tensor::zeros(self.shape(*v))))
            .collect())
    }
}
