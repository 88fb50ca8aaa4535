//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and whatever its backward
//! rule needs. Nodes are only ever appended, so tape order is a topological
//! order and the backward pass is a single reverse sweep.

use rand::Rng;

use super::conv::{conv2d_backward, conv2d_forward, ConvSpec};
use super::norm::{batch_norm_backward, batch_norm_forward, BatchNormState, Mode};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// `exp(-z^2)`.
    GaussianGate,
}

impl Activation {
    pub fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Sigmoid => T::one() / (T::one() + (-z).exp()),
            Activation::GaussianGate => (-z * z).exp(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pool {
    /// 2x2 mean with stride 2; odd trailing rows/columns are dropped.
    Avg2x2,
    GlobalAvg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    Mse,
    Mae,
    /// Softmax cross-entropy; the target holds class indices.
    SoftmaxCe,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Pool {
        x: Var,
        kind: Pool,
    },
    Concat {
        xs: Vec<Var>,
    },
    Hadamard {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    PixelShuffle {
        x: Var,
        r: usize,
    },
    Mask {
        x: Var,
        mask: Tensor<T>,
    },
    Loss {
        kind: LossKind,
        pred: Var,
        target: Tensor<T>,
        aux: Option<Tensor<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// A single forward computation and its gradients.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
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
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Graph::backward`] target w.r.t. `v`, if `v` requires one.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>, name: &str) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            out,
            &inputs,
            Op::Conv {
                x,
                w,
                b,
                spec: *spec,
            },
            "conv2d",
        )
    }

    /// Batch normalization; the mode comes from `state`, and train mode
    /// updates its running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
    ) -> Result<Var> {
        let fwd = batch_norm_forward(self.value(x), self.value(gamma), self.value(beta), state)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: fwd.xhat,
            inv_std: fwd.inv_std,
            train: state.mode == Mode::Train,
        };
        self.push(fwd.out, &[x, gamma, beta], op, "batch_norm")
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let out = self.value(x).map(|z| kind.apply(z));
        self.push(out, &[x], Op::Act { x, kind }, "activation")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn pool(&mut self, x: Var, kind: Pool) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        let out = match kind {
            Pool::Avg2x2 => {
                let (oh, ow) = (h / 2, w / 2);
                if oh == 0 || ow == 0 {
                    return Err(Error::shape(format!("avg2x2 on {h}x{w} leaves no output")));
                }
                let q = T::lit(0.25);
                let src = xv.data();
                let mut out = Vec::with_capacity(n * c * oh * ow);
                for plane in src.chunks(h * w) {
                    for y in 0..oh {
                        let r0 = &plane[2 * y * w..];
                        let r1 = &plane[(2 * y + 1) * w..];
                        for x_ in 0..ow {
                            out.push(
                                q * (r0[2 * x_] + r0[2 * x_ + 1] + r1[2 * x_] + r1[2 * x_ + 1]),
                            );
                        }
                    }
                }
                Tensor::new(&[n, c, oh, ow], out)?
            }
            Pool::GlobalAvg => {
                let inv = T::one() / T::from_usize(h * w).unwrap();
                let out = xv
                    .data()
                    .chunks(h * w)
                    .map(|p| p.iter().copied().sum::<T>() * inv)
                    .collect();
                Tensor::new(&[n, c, 1, 1], out)?
            }
        };
        self.push(out, &[x], Op::Pool { x, kind }, "pool")
    }

    /// Concatenates NCHW tensors along channels, preserving order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut total = 0;
        for &v in xs {
            let (vn, vc, vh, vw) = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape(format!(
                    "concat of {:?} with {:?}",
                    self.value(*first).shape(),
                    self.value(v).shape()
                )));
            }
            total += vc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for &v in xs {
                let t = self.value(v);
                let len = t.shape()[1] * plane;
                out.extend_from_slice(&t.data()[b * len..(b + 1) * len]);
            }
        }
        let out = Tensor::new(&[n, total, h, w], out)?;
        self.push(out, xs, Op::Concat { xs: xs.to_vec() }, "concat")
    }

    /// Elementwise product of equally shaped tensors.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        self.push(out, &[a, b], Op::Hadamard { a, b }, "hadamard")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, &[a, b], Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push(out, &[a, b], Op::Sub { a, b }, "sub")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).scale(s);
        self.push(out, &[x], Op::Scale { x, s }, "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, &[x], Op::Sum { x }, "sum")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, &[x], Op::Reshape { x }, "reshape")
    }

    /// `x (N, F) @ w^T (F, O) + b`, with `w` stored `(O, F)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (&[n, f], &[o, wf]) = (xv.shape(), wv.shape()) else {
            return Err(Error::shape(format!(
                "linear on {:?} with weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        };
        if f != wf {
            return Err(Error::shape(format!(
                "linear input {f} features, weight expects {wf}"
            )));
        }
        let mut out = vec![T::zero(); n * o];
        gemm(
            T::one(),
            MatRef::new(xv.data(), n, f),
            MatRef::transposed(wv.data(), f, o),
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [o] {
                return Err(Error::shape(format!(
                    "linear bias {:?}, expected [{o}]",
                    bv.shape()
                )));
            }
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bv.data()).for_each(|(v, &bb)| *v += bb);
            }
        }
        let out = Tensor::new(&[n, o], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, &inputs, Op::Linear { x, w, b }, "linear")
    }

    /// `(N, C*r*r, H, W) -> (N, C, H*r, W*r)`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, cr, h, w) = xv.dims4()?;
        if r == 0 || cr % (r * r) != 0 {
            return Err(Error::shape(format!("pixel shuffle x{r} of {cr} channels")));
        }
        let c = cr / (r * r);
        let mut out = vec![T::zero(); xv.numel()];
        for b in 0..n {
            for ch in 0..c {
                for i in 0..r {
                    for j in 0..r {
                        let src_c = ch * r * r + i * r + j;
                        for y in 0..h {
                            for x_ in 0..w {
                                let src = ((b * cr + src_c) * h + y) * w + x_;
                                let dst = ((b * c + ch) * h * r + y * r + i) * w * r + x_ * r + j;
                                out[dst] = xv.data()[src];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[n, c, h * r, w * r], out)?;
        self.push(out, &[x], Op::PixelShuffle { x, r }, "pixel_shuffle")
    }

    /// Inverted dropout: zeroes with probability `rate`, scales survivors by `1/(1-rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let xv = self.value(x);
        let mask = Tensor::from_fn(xv.shape(), |_| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        });
        let out = xv.zip_map(&mask, |a, m| a * m)?;
        self.push(out, &[x], Op::Mask { x, mask }, "dropout")
    }

    /// Scalar loss, averaged over elements (regression) or over the batch (classification).
    pub fn loss(&mut self, kind: LossKind, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let pv = self.value(pred);
        let (value, aux) = match kind {
            LossKind::Mse | LossKind::Mae => {
                if pv.shape() != target.shape() {
                    return Err(Error::shape(format!(
                        "loss pred {:?} vs target {:?}",
                        pv.shape(),
                        target.shape()
                    )));
                }
                let inv = T::one() / T::from_usize(pv.numel()).unwrap();
                let s: T = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| {
                        if kind == LossKind::Mse {
                            (p - t) * (p - t)
                        } else {
                            (p - t).abs()
                        }
                    })
                    .sum();
                (s * inv, None)
            }
            LossKind::SoftmaxCe => {
                let n = pv.shape()[0];
                let classes = pv.numel() / n;
                if target.numel() != n {
                    return Err(Error::shape(format!(
                        "{} class labels for batch of {n}",
                        target.numel()
                    )));
                }
                let labels = class_indices(target, classes)?;
                let mut probs = Vec::with_capacity(pv.numel());
                let mut total = T::zero();
                for (row, &label) in pv.data().chunks(classes).zip(&labels) {
                    let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                    let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
                    let lse = mx + z.ln();
                    total += lse - row[label];
                    probs.extend(row.iter().map(|&v| (v - lse).exp()));
                }
                (
                    total / T::from_usize(n).unwrap(),
                    Some(Tensor::new(pv.shape(), probs)?),
                )
            }
        };
        let op = Op::Loss {
            kind,
            pred,
            target: target.clone(),
            aux,
        };
        self.push(Tensor::scalar(value), &[pred], op, "loss")
    }

    /// Reverse sweep from a scalar `loss`; afterwards every reachable node
    /// that requires a gradient holds `d loss / d node`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward from non-scalar {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dout) = grads[i].take() else {
                continue;
            };
            for (var, g) in self.node_backward(i, &dout)? {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                grads[var.0] = Some(match grads[var.0].take() {
                    Some(acc) => acc.add(&g)?,
                    None => g,
                });
            }
            self.nodes[i].grad = Some(dout);
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, dout: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let g = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    dout,
                    spec,
                    (needs(*x), needs(*w), b.is_some_and(needs)),
                )?;
                out.extend(g.dx.map(|t| (*x, t)));
                out.extend(g.dw.map(|t| (*w, t)));
                if let (Some(b), Some(db)) = (b, g.db) {
                    out.push((*b, db));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (dx, dg, db) =
                    batch_norm_backward(dout, xhat, inv_std, self.value(*gamma), *train)?;
                out.push((*x, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::Act { x, kind } => {
                let y = &node.value;
                let xv = self.value(*x);
                let d = match kind {
                    Activation::Relu => {
                        xv.zip_map(dout, |z, g| if z > T::zero() { g } else { T::zero() })?
                    }
                    Activation::Sigmoid => y.zip_map(dout, |s, g| g * s * (T::one() - s))?,
                    Activation::GaussianGate => {
                        let two = T::lit(2.0);
                        let dz = xv.zip_map(y, |z, e| -two * z * e)?;
                        dz.zip_map(dout, |a, g| a * g)?
                    }
                };
                out.push((*x, d));
            }
            Op::Pool { x, kind } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let mut dx = vec![T::zero(); n * c * h * w];
                match kind {
                    Pool::Avg2x2 => {
                        let (oh, ow) = (h / 2, w / 2);
                        let q = T::lit(0.25);
                        for (p, plane) in dx.chunks_mut(h * w).enumerate() {
                            let d = &dout.data()[p * oh * ow..(p + 1) * oh * ow];
                            for y in 0..oh {
                                for x_ in 0..ow {
                                    let g = q * d[y * ow + x_];
                                    plane[2 * y * w + 2 * x_] = g;
                                    plane[2 * y * w + 2 * x_ + 1] = g;
                                    plane[(2 * y + 1) * w + 2 * x_] = g;
                                    plane[(2 * y + 1) * w + 2 * x_ + 1] = g;
                                }
                            }
                        }
                    }
                    Pool::GlobalAvg => {
                        let inv = T::one() / T::from_usize(h * w).unwrap();
                        for (p, plane) in dx.chunks_mut(h * w).enumerate() {
                            let g = dout.data()[p] * inv;
                            plane.iter_mut().for_each(|v| *v = g);
                        }
                    }
                }
                out.push((*x, Tensor::new(&[n, c, h, w], dx)?));
            }
            Op::Concat { xs } => {
                let mut start = 0;
                for &v in xs {
                    let c = self.value(v).shape()[1];
                    if needs(v) {
                        out.push((v, dout.slice_channels(start, c)?));
                    }
                    start += c;
                }
            }
            Op::Hadamard { a, b } => {
                out.push((*a, dout.zip_map(self.value(*b), |g, q| g * q)?));
                out.push((*b, dout.zip_map(self.value(*a), |g, p| g * p)?));
            }
            Op::Add { a, b } => {
                out.push((*a, dout.clone()));
                out.push((*b, dout.clone()));
            }
            Op::Sub { a, b } => {
                out.push((*a, dout.clone()));
                out.push((*b, dout.scale(-T::one())));
            }
            Op::Scale { x, s } => out.push((*x, dout.scale(*s))),
            Op::Sum { x } => {
                let g = dout.data()[0];
                out.push((*x, Tensor::full(self.value(*x).shape(), g)));
            }
            Op::Reshape { x } => out.push((*x, dout.reshape(self.value(*x).shape())?)),
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, f) = (xv.shape()[0], xv.shape()[1]);
                let o = wv.shape()[0];
                if needs(*x) {
                    let mut dx = vec![T::zero(); n * f];
                    gemm(
                        T::one(),
                        MatRef::new(dout.data(), n, o),
                        MatRef::new(wv.data(), o, f),
                        T::zero(),
                        &mut dx,
                    );
                    out.push((*x, Tensor::new(&[n, f], dx)?));
                }
                if needs(*w) {
                    let mut dw = vec![T::zero(); o * f];
                    gemm(
                        T::one(),
                        MatRef::transposed(dout.data(), o, n),
                        MatRef::new(xv.data(), n, f),
                        T::zero(),
                        &mut dw,
                    );
                    out.push((*w, Tensor::new(&[o, f], dw)?));
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); o];
                    for row in dout.data().chunks(o) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    out.push((*b, Tensor::new(&[o], db)?));
                }
            }
            Op::PixelShuffle { x, r } => {
                let r = *r;
                let xs = self.value(*x).shape().to_vec();
                let (n, cr, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let c = cr / (r * r);
                let mut dx = vec![T::zero(); dout.numel()];
                for b in 0..n {
                    for ch in 0..c {
                        for i in 0..r {
                            for j in 0..r {
                                let src_c = ch * r * r + i * r + j;
                                for y in 0..h {
                                    for x_ in 0..w {
                                        let src = ((b * cr + src_c) * h + y) * w + x_;
                                        let dst =
                                            ((b * c + ch) * h * r + y * r + i) * w * r + x_ * r + j;
                                        dx[src] = dout.data()[dst];
                                    }
                                }
                            }
                        }
                    }
                }
                out.push((*x, Tensor::new(&xs, dx)?));
            }
            Op::Mask { x, mask } => out.push((*x, dout.zip_map(mask, |g, m| g * m)?)),
            Op::Loss {
                kind,
                pred,
                target,
                aux,
            } => {
                let pv = self.value(*pred);
                let g = dout.data()[0];
                let d = match kind {
                    LossKind::Mse => {
                        let k = g * T::lit(2.0) / T::from_usize(pv.numel()).unwrap();
                        pv.zip_map(target, |p, t| k * (p - t))?
                    }
                    LossKind::Mae => {
                        let k = g / T::from_usize(pv.numel()).unwrap();
                        pv.zip_map(target, |p, t| {
                            let r = p - t;
                            if r > T::zero() {
                                k
                            } else if r < T::zero() {
                                -k
                            } else {
                                T::zero()
                            }
                        })?
                    }
                    LossKind::SoftmaxCe => {
                        let probs = aux.as_ref().expect("softmax probabilities saved");
                        let n = pv.shape()[0];
                        let classes = pv.numel() / n;
                        let labels = class_indices(target, classes)?;
                        let k = g / T::from_usize(n).unwrap();
                        let mut d: Vec<T> = probs.data().iter().map(|&p| p * k).collect();
                        for (row, &label) in labels.iter().enumerate() {
                            d[row * classes + label] -= k;
                        }
                        Tensor::new(pv.shape(), d)?
                    }
                };
                out.push((*pred, d));
            }
        }
        Ok(out)
    }
}

fn class_indices<T: Scalar>(target: &Tensor<T>, classes: usize) -> Result<Vec<usize>> {
    target
        .data()
        .iter()
        .map(|&v| {
            let f = v.as_f64();
            if f >= 0.0 && f.fract() == 0.0 && (f as usize) < classes {
                Ok(f as usize)
            } else {
                Err(Error::invalid(format!(
                    "class index {f} outside [0, {classes})"
                )))
            }
        })
        .collect()
}
