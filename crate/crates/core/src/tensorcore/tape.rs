//! Reverse-mode differentiation over a recorded list of tensor ops.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological sort and `backward` simply walks it in reverse.
//!
//! Gradients of bound parameters *accumulate* into
//! [`ParamGroup`](super::sgd::ParamGroup) gradient slots: calling
//! [`Tape::backward_params`] twice without zeroing doubles them.

use super::ops::{self, ConvGeom};
use super::sgd::ParamGroup;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ChannelAffine { x: Var, scale: Var, shift: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var },
    Reshape { x: Var },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { x: Var },
    Mse { a: Var, b: Var },
    CrossEntropy { log_probs: Vec<f64>, x: Var, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(Var, usize)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A differentiable leaf bound to `params[index]`; see [`Tape::backward_params`].
    pub fn param(&mut self, index: usize, p: &ParamGroup) -> Var {
        let mut t = p.tensor.clone();
        t.zero_grad();
        let v = self.variable(t);
        self.bindings.push((v, index));
        v
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din, dout) = ops::linear_dims(
            self.value(x).shape(),
            self.value(w).shape(),
            b.map(|b| self.value(b).shape()),
        )?;
        let y = ops::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            n,
            din,
            dout,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(vec![n, dout], y)?, Op::Linear { x, w, b }, rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::infer(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        if let Some(b) = b {
            if self.value(b).shape() != [geom.c_out] {
                return Err(Error::dim(
                    "conv2d",
                    "bias",
                    format!("expected [{}], got {:?}", geom.c_out, self.value(b).shape()),
                ));
            }
        }
        let y = ops::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(geom.out_shape(), y)?, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Per-channel `(x - mean) / sqrt(var + eps) * scale + shift` with fixed statistics.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var, mean: &[f64], inv_std: &[f64]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (_, c, _) = ops::channel_dims(&shape)?;
        for (name, len) in [
            ("scale", self.value(scale).len()),
            ("shift", self.value(shift).len()),
            ("mean", mean.len()),
            ("inv_std", inv_std.len()),
        ] {
            if len != c {
                return Err(Error::dim("channel_affine", name, format!("{len} vs {c} channels")));
            }
        }
        let y = ops::channel_affine_forward(
            self.value(x).data(),
            &shape,
            self.value(scale).data(),
            self.value(shift).data(),
            mean,
            inv_std,
        );
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        let op = Op::ChannelAffine {
            x,
            scale,
            shift,
            mean: mean.to_vec(),
            inv_std: inv_std.to_vec(),
        };
        Ok(self.push(Tensor::new(shape, y)?, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", "k", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let c = ops::matmul_forward(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], c)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Transpose { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// Collapses every axis after the leading one.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        let n = s[0];
        let rest: usize = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu_forward(self.value(x).data());
        let t = Tensor::new(self.value(x).shape().to_vec(), y).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Relu { x }, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(
                op,
                "shape",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Mean of squared differences over every element.
    ///
    /// For a batch of feature pairs this is the per-pair `‖a - b‖² / n`
    /// averaged over the batch.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let s: f64 = va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum();
        let m = s / va.len() as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(m), Op::Mse { a, b }, rg))
    }

    /// Mean cross-entropy of `[N, C]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(
                "cross_entropy",
                "N",
                format!("logits {s:?} vs {} labels", labels.len()),
            ));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::contract(format!("label {bad} out of range for {c} classes")));
        }
        let lp = ops::log_softmax(self.value(logits).data(), n, c);
        let loss = -labels.iter().enumerate().map(|(i, &y)| lp[i * c + y]).sum::<f64>() / n as f64;
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            log_probs: lp,
            x: logits,
            labels: labels.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward() needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and accumulates gradients into the bound
    /// parameter groups. A bound parameter that the loss does not reach
    /// receives an exact zero gradient.
    pub fn backward_params(&self, loss: Var, params: &mut [ParamGroup]) -> Result<()> {
        let grads = self.backward(loss)?;
        for &(v, i) in &self.bindings {
            let p = params
                .get_mut(i)
                .ok_or_else(|| Error::contract(format!("binding to missing param {i}")))?;
            match grads.wrt(v) {
                Some(g) => p.tensor.accumulate_grad(g)?,
                None => {
                    let z = vec![0.0; p.tensor.len()];
                    p.tensor.accumulate_grad(&z)?
                }
            }
        }
        Ok(())
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.rg(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.value(*x), self.value(*w));
                let (n, din, dout) = (xs.shape()[0], xs.shape()[1], ws.shape()[0]);
                // Separate slots so the borrow checker sees disjoint buffers.
                let mut dx = self.grad_slot(grads, *x).map(|s| s.to_vec());
                let mut dw = self.grad_slot(grads, *w).map(|s| s.to_vec());
                let mut db = b.and_then(|b| self.grad_slot(grads, b).map(|s| s.to_vec()));
                ops::linear_backward(
                    xs.data(),
                    ws.data(),
                    gy,
                    n,
                    din,
                    dout,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                store(grads, *x, dx);
                store(grads, *w, dw);
                if let Some(b) = b {
                    store(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let mut dx = self.grad_slot(grads, *x).map(|s| s.to_vec());
                let mut dw = self.grad_slot(grads, *w).map(|s| s.to_vec());
                let mut db = b.and_then(|b| self.grad_slot(grads, b).map(|s| s.to_vec()));
                ops::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gy,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                store(grads, *x, dx);
                store(grads, *w, dw);
                if let Some(b) = b {
                    store(grads, *b, db);
                }
            }
            Op::ChannelAffine {
                x,
                scale,
                shift,
                mean,
                inv_std,
            } => {
                let xv = self.value(*x);
                let (n, c, inner) = ops::channel_dims(xv.shape()).expect("validated");
                let sc = self.value(*scale).data();
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for s in 0..n {
                        for ch in 0..c {
                            let a = sc[ch] * inv_std[ch];
                            let off = (s * c + ch) * inner;
                            for i in off..off + inner {
                                dx[i] += gy[i] * a;
                            }
                        }
                    }
                }
                if let Some(ds) = self.grad_slot(grads, *scale) {
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * inner;
                            let mut acc = 0.0;
                            for i in off..off + inner {
                                acc += gy[i] * (xv.data()[i] - mean[ch]) * inv_std[ch];
                            }
                            ds[ch] += acc;
                        }
                    }
                }
                if let Some(db) = self.grad_slot(grads, *shift) {
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * inner;
                            db[ch] += gy[off..off + inner].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.grad_slot(grads, *a) {
                    // dA = dC Bᵀ
                    for i in 0..*m {
                        for p in 0..*k {
                            let mut acc = 0.0;
                            for j in 0..*n {
                                acc += gy[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] += acc;
                        }
                    }
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    // dB = Aᵀ dC
                    for i in 0..*m {
                        for p in 0..*k {
                            let av_ip = av[i * k + p];
                            for j in 0..*n {
                                db[p * n + j] += av_ip * gy[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                let s = self.value(*x).shape();
                let (r, c) = (s[0], s[1]);
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += gy[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    dx.iter_mut().zip(gy).for_each(|(d, g)| *d += g);
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for i in 0..dx.len() {
                        if xv[i] > 0.0 {
                            dx[i] += gy[i];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(d) = self.grad_slot(grads, v) {
                        d.iter_mut().zip(gy).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(d) = self.grad_slot(grads, *a) {
                    d.iter_mut().zip(gy).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = self.grad_slot(grads, *b) {
                    d.iter_mut().zip(gy).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.grad_slot(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += gy[i] * bv[i];
                    }
                }
                if let Some(d) = self.grad_slot(grads, *b) {
                    for i in 0..d.len() {
                        d[i] += gy[i] * av[i];
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += gy[0]);
                }
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let scale = 2.0 * gy[0] / av.len() as f64;
                if let Some(d) = self.grad_slot(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += scale * (av[i] - bv[i]);
                    }
                }
                if let Some(d) = self.grad_slot(grads, *b) {
                    for i in 0..d.len() {
                        d[i] -= scale * (av[i] - bv[i]);
                    }
                }
            }
            Op::CrossEntropy { log_probs, x, labels } => {
                let n = labels.len();
                let c = log_probs.len() / n;
                if let Some(dx) = self.grad_slot(grads, *x) {
                    let scale = gy[0] / n as f64;
                    for (s, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let p = log_probs[s * c + j].exp();
                            let t = if j == y { 1.0 } else { 0.0 };
                            dx[s * c + j] += scale * (p - t);
                        }
                    }
                }
            }
        }
    }
}

fn store(grads: &mut [Option<Vec<f64>>], v: Var, g: Option<Vec<f64>>) {
    if let Some(g) = g {
        grads[v.0] = Some(g);
    }
}
