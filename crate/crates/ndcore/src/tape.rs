//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Each op appends a node holding its output value. `backward` walks the
//! nodes in reverse and accumulates vector-Jacobian products into the
//! parents that require a gradient. Nodes that depend on no trainable leaf
//! are skipped entirely, and frozen parameters never receive a gradient.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::error::{NdError, Result};
use crate::float::{gemm, Float, Mat};
use crate::param::ParameterTree;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        /// (mean, 1/std) per (sample, group).
        stats: Vec<(F, F)>,
    },
    Silu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Exp(Var),
    Clamp(Var, F, F),
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    ResizeNearest(Var),
    ConcatChannels(Vec<Var>),
    Reshape(Var),
    ChannelMix {
        x: Var,
        w: Var,
        subjects: Vec<usize>,
    },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
}

struct Node<F> {
    value: Arc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Tape<F: Float> {
    nodes: Vec<Node<F>>,
    params: HashMap<String, Var>,
    grad_enabled: bool,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape on which no node requires a gradient (inference).
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is wanted.
    pub fn input_grad(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for parameter `name`, shared by every use within this tape.
    pub fn param(&mut self, tree: &ParameterTree<F>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = tree.get(name)?;
        self.nodes.push(Node {
            value: Arc::clone(&p.tensor),
            op: Op::Param,
            requires_grad: p.trainable && self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] {
            return Err(NdError::ShapeMismatch {
                op: "conv2d",
                expected: vec![xs.first().copied().unwrap_or(0), ws.get(1).copied().unwrap_or(0), 0, 0],
                got: xs,
            });
        }
        if let Some(b) = b {
            self.value(b).expect_shape("conv2d bias", &[ws[0]])?;
        }
        let geom = ConvGeom::same([xs[0], xs[1], xs[2], xs[3]], ws[0], (ws[2], ws[3]), stride)?;
        let out = conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::new(geom.out_shape().to_vec(), out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// `x: [n, c, l]`, `w: [cout, c, k]`, stride along `l`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 {
            return Err(NdError::ShapeMismatch {
                op: "conv1d",
                expected: vec![0, 0, 0],
                got: xs,
            });
        }
        let x4 = self.reshape(x, &[xs[0], xs[1], 1, xs[2]])?;
        let w4 = self.reshape(w, &[ws[0], ws[1], 1, ws[2]])?;
        let y = self.conv2d(x4, w4, b, (1, stride))?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[1], ys[3]])
    }

    /// `x: [n, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(NdError::ShapeMismatch {
                op: "linear",
                expected: vec![xs.first().copied().unwrap_or(0), ws.get(1).copied().unwrap_or(0)],
                got: xs,
            });
        }
        let (n, out_dim) = (xs[0], ws[0]);
        let mut y = vec![F::zero(); n * out_dim];
        gemm(
            Mat::new(self.value(x).data(), n, xs[1]),
            Mat::new(self.value(w).data(), out_dim, ws[1]).t(),
            &mut y,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b);
            bv.expect_shape("linear bias", &[out_dim])?;
            for row in y.chunks_exact_mut(out_dim) {
                for (v, &bb) in row.iter_mut().zip(bv.data()) {
                    *v += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(vec![n, out_dim], y)?, Op::Linear { x, w, b }, rg))
    }

    /// Group normalization over `[n, c, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: F) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || groups == 0 || xs[1] % groups != 0 {
            return Err(NdError::InvalidArgument(format!(
                "group_norm: {groups} groups over shape {xs:?}"
            )));
        }
        let c = xs[1];
        self.value(gamma).expect_shape("group_norm gamma", &[c])?;
        self.value(beta).expect_shape("group_norm beta", &[c])?;
        let n = xs[0];
        let spatial: usize = xs[2..].iter().product();
        let cg = c / groups;
        let len = cg * spatial;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![F::zero(); xv.len()];
        let mut stats = Vec::with_capacity(n * groups);
        let inv_len = F::c(1.0 / len as f64);
        for s in 0..n {
            for g in 0..groups {
                let base = (s * c + g * cg) * spatial;
                let seg = &xv[base..base + len];
                let mean = seg.iter().copied().sum::<F>() * inv_len;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_len;
                let rstd = F::one() / (var + eps).sqrt();
                stats.push((mean, rstd));
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let off = base + ci * spatial;
                    for k in 0..spatial {
                        out[off + k] = (xv[off + k] - mean) * rstd * gv[ch] + bv[ch];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            rg,
        ))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(y, Op::Silu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let y = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(y, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        let y = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(y, Op::AddScalar(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.exp());
        let rg = self.rg(x);
        self.push(y, Op::Exp(x), rg)
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero where clipped.
    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        let y = self.value(x).map(|v| v.max(lo).min(hi));
        let rg = self.rg(x);
        self.push(y, Op::Clamp(x, lo, hi), rg)
    }

    /// Adds `bias: [n, c]` to every spatial position of `x: [n, c, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(NdError::InvalidArgument("add_channel_bias needs rank >= 2".into()));
        }
        self.value(bias).expect_shape("add_channel_bias", &xs[..2])?;
        let spatial: usize = xs[2..].iter().product();
        let mut y = self.value(x).clone();
        for (chunk, &b) in y.data_mut().chunks_exact_mut(spatial).zip(self.value(bias).data()) {
            for v in chunk {
                *v += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(y, Op::AddChannelBias { x, bias }, rg))
    }

    /// Nearest-neighbour resize of `[n, c, h, w]`; source index
    /// `floor(i * in / out)` per axis.
    pub fn resize_nearest(&mut self, x: Var, out_hw: (usize, usize)) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || out_hw.0 == 0 || out_hw.1 == 0 {
            return Err(NdError::InvalidArgument(format!("resize_nearest of {xs:?}")));
        }
        let (h, w) = (xs[2], xs[3]);
        let (ho, wo) = out_hw;
        let xv = self.value(x).data();
        let planes = xs[0] * xs[1];
        let mut y = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let plane = &xv[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                let iy = oy * h / ho;
                for ox in 0..wo {
                    y.push(plane[iy * w + ox * w / wo]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![xs[0], xs[1], ho, wo], y)?,
            Op::ResizeNearest(x),
            rg,
        ))
    }

    /// Concatenates `[n, c_k, ...]` tensors along axis 1.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let n = first[0];
        let rest: Vec<usize> = first[2..].to_vec();
        let spatial: usize = rest.iter().product();
        let mut total_c = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != n || s[2..] != rest[..] {
                return Err(NdError::ShapeMismatch {
                    op: "concat_channels",
                    expected: first.clone(),
                    got: s.to_vec(),
                });
            }
            total_c += s[1];
        }
        let mut y = Vec::with_capacity(n * total_c * spatial);
        for s in 0..n {
            for &p in parts {
                let c = self.shape(p)[1];
                y.extend_from_slice(&self.value(p).data()[s * c * spatial..(s + 1) * c * spatial]);
            }
        }
        let mut shape = first;
        shape[1] = total_c;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, y)?, Op::ConcatChannels(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Reshape(x), rg))
    }

    /// Per-sample channel mixing: `y[n] = w[subjects[n]] · x[n]` with
    /// `x: [n, c, l]` and `w: [s, c, c]`.
    pub fn channel_mix(&mut self, x: Var, w: Var, subjects: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[1] || ws[2] != xs[1] || subjects.len() != xs[0] {
            return Err(NdError::ShapeMismatch {
                op: "channel_mix",
                expected: vec![subjects.len(), ws.get(1).copied().unwrap_or(0), 0],
                got: xs,
            });
        }
        if let Some(&s) = subjects.iter().find(|&&s| s >= ws[0]) {
            return Err(NdError::InvalidArgument(format!(
                "subject {s} out of range for {} matrices",
                ws[0]
            )));
        }
        let (c, l) = (xs[1], xs[2]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut y = vec![F::zero(); xv.len()];
        for (n, &s) in subjects.iter().enumerate() {
            gemm(
                Mat::new(&wv[s * c * c..(s + 1) * c * c], c, c),
                Mat::new(&xv[n * c * l..(n + 1) * c * l], c, l),
                &mut y[n * c * l..(n + 1) * c * l],
                false,
            );
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor::new(xs, y)?,
            Op::ChannelMix {
                x,
                w,
                subjects: subjects.to_vec(),
            },
            rg,
        ))
    }

    /// Mean squared difference, as a one-element tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).sub(self.value(b))?;
        let v = d.sq_norm() / F::c(d.len() as f64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(v), Op::Mse(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x).mean();
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Mean(x), rg)
    }

    /// Gradients of the one-element `loss` w.r.t. every node requiring one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(NdError::InvalidArgument(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_with(loss, Tensor::ones(self.shape(loss)))
    }

    /// Vector-Jacobian product seeded with `upstream` at `out`.
    pub fn backward_with(&self, out: Var, upstream: Tensor<F>) -> Result<Gradients<F>> {
        if out.0 >= self.nodes.len() {
            return Err(NdError::MissingForward(format!("node {} not on tape", out.0)));
        }
        upstream.expect_shape("backward upstream", self.shape(out))?;
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(upstream);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d { x, w, b, geom } => {
                let cg = conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    geom,
                    self.rg(*x),
                    self.rg(*w),
                    b.is_some_and(|b| self.rg(b)),
                );
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?)?;
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w).to_vec(), dw)?)?;
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b).to_vec(), db)?)?;
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (n, din, dout) = (xs[0], xs[1], ws[0]);
                if self.rg(*x) {
                    let mut dx = vec![F::zero(); n * din];
                    gemm(
                        Mat::new(g.data(), n, dout),
                        Mat::new(self.value(*w).data(), dout, din),
                        &mut dx,
                        false,
                    );
                    self.accumulate(grads, *x, Tensor::new(vec![n, din], dx)?)?;
                }
                if self.rg(*w) {
                    let mut dw = vec![F::zero(); dout * din];
                    gemm(
                        Mat::new(g.data(), n, dout).t(),
                        Mat::new(self.value(*x).data(), n, din),
                        &mut dw,
                        false,
                    );
                    self.accumulate(grads, *w, Tensor::new(vec![dout, din], dw)?)?;
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let mut db = vec![F::zero(); dout];
                    for row in g.data().chunks_exact(dout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, b, Tensor::new(vec![dout], db)?)?;
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let xs = self.shape(*x).to_vec();
                let (n, c) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let cg = c / groups;
                let len = cg * spatial;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let gd = g.data();
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                let mut dx = vec![F::zero(); xv.len()];
                let inv_len = F::c(1.0 / len as f64);
                for s in 0..n {
                    for grp in 0..*groups {
                        let (mean, rstd) = stats[s * groups + grp];
                        let base = (s * c + grp * cg) * spatial;
                        let mut sum_dxhat = F::zero();
                        let mut sum_dxhat_xhat = F::zero();
                        for ci in 0..cg {
                            let ch = grp * cg + ci;
                            let off = base + ci * spatial;
                            for k in 0..spatial {
                                let xhat = (xv[off + k] - mean) * rstd;
                                let dy = gd[off + k];
                                dgamma[ch] += dy * xhat;
                                dbeta[ch] += dy;
                                let dxhat = dy * gv[ch];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                        }
                        let m1 = sum_dxhat * inv_len;
                        let m2 = sum_dxhat_xhat * inv_len;
                        for ci in 0..cg {
                            let ch = grp * cg + ci;
                            let off = base + ci * spatial;
                            for k in 0..spatial {
                                let xhat = (xv[off + k] - mean) * rstd;
                                let dxhat = gd[off + k] * gv[ch];
                                dx[off + k] = rstd * (dxhat - m1 - xhat * m2);
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs, dx)?)?;
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dgamma)?)?;
                self.accumulate(grads, *beta, Tensor::new(vec![c], dbeta)?)?;
            }
            Op::Silu(x) => {
                let dx = self.value(*x).zip_map(g, |v, d| {
                    let s = sigmoid(v);
                    d * s * (F::one() + v * (F::one() - s))
                })?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-F::one()))?;
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |d, v| d * v)?)?;
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |d, v| d * v)?)?;
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.scale(*s))?,
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone())?,
            Op::Exp(x) => {
                let d = g.zip_map(&node.value, |d, y| d * y)?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Clamp(x, lo, hi) => {
                let d = g.zip_map(self.value(*x), |d, v| if v < *lo || v > *hi { F::zero() } else { d })?;
                self.accumulate(grads, *x, d)?;
            }
            Op::AddChannelBias { x, bias } => {
                self.accumulate(grads, *x, g.clone())?;
                if self.rg(*bias) {
                    let xs = self.shape(*x);
                    let spatial: usize = xs[2..].iter().product();
                    let db: Vec<F> = g
                        .data()
                        .chunks_exact(spatial)
                        .map(|c| c.iter().copied().sum())
                        .collect();
                    self.accumulate(grads, *bias, Tensor::new(xs[..2].to_vec(), db)?)?;
                }
            }
            Op::ResizeNearest(x) => {
                let xs = self.shape(*x).to_vec();
                let (h, w) = (xs[2], xs[3]);
                let gs = g.shape();
                let (ho, wo) = (gs[2], gs[3]);
                let mut dx = vec![F::zero(); xs.iter().product()];
                let gd = g.data();
                for p in 0..xs[0] * xs[1] {
                    for oy in 0..ho {
                        let iy = oy * h / ho;
                        for ox in 0..wo {
                            dx[p * h * w + iy * w + ox * w / wo] += gd[(p * ho + oy) * wo + ox];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs, dx)?)?;
            }
            Op::ConcatChannels(parts) => {
                let gs = g.shape();
                let n = gs[0];
                let spatial: usize = gs[2..].iter().product();
                let total_c = gs[1];
                let mut c0 = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let c = ps[1];
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(n * c * spatial);
                        for s in 0..n {
                            let start = (s * total_c + c0) * spatial;
                            d.extend_from_slice(&g.data()[start..start + c * spatial]);
                        }
                        self.accumulate(grads, p, Tensor::new(ps, d)?)?;
                    }
                    c0 += c;
                }
            }
            Op::Reshape(x) => {
                let d = g.clone().reshape(self.shape(*x))?;
                self.accumulate(grads, *x, d)?;
            }
            Op::ChannelMix { x, w, subjects } => {
                let xs = self.shape(*x).to_vec();
                let (c, l) = (xs[1], xs[2]);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let gd = g.data();
                if self.rg(*x) {
                    let mut dx = vec![F::zero(); xv.len()];
                    for (n, &s) in subjects.iter().enumerate() {
                        gemm(
                            Mat::new(&wv[s * c * c..(s + 1) * c * c], c, c).t(),
                            Mat::new(&gd[n * c * l..(n + 1) * c * l], c, l),
                            &mut dx[n * c * l..(n + 1) * c * l],
                            false,
                        );
                    }
                    self.accumulate(grads, *x, Tensor::new(xs.clone(), dx)?)?;
                }
                if self.rg(*w) {
                    let ws = self.shape(*w).to_vec();
                    let mut dw = vec![F::zero(); wv.len()];
                    for (n, &s) in subjects.iter().enumerate() {
                        gemm(
                            Mat::new(&gd[n * c * l..(n + 1) * c * l], c, l),
                            Mat::new(&xv[n * c * l..(n + 1) * c * l], c, l).t(),
                            &mut dw[s * c * c..(s + 1) * c * c],
                            true,
                        );
                    }
                    self.accumulate(grads, *w, Tensor::new(ws, dw)?)?;
                }
            }
            Op::Mse(a, b) => {
                let upstream = g.data()[0];
                let d = self.value(*a).sub(self.value(*b))?;
                let k = F::c(2.0) * upstream / F::c(d.len() as f64);
                let da = d.scale(k);
                if self.rg(*b) {
                    self.accumulate(grads, *b, da.scale(-F::one()))?;
                }
                self.accumulate(grads, *a, da)?;
            }
            Op::Sum(x) => {
                let d = Tensor::full(self.shape(*x), g.data()[0]);
                self.accumulate(grads, *x, d)?;
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let d = Tensor::full(self.shape(*x), g.data()[0] / F::c(n as f64));
                self.accumulate(grads, *x, d)?;
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<F: Float>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

/// Result of a backward pass.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    params: HashMap<String, Var>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of parameter `name`; `None` when it is frozen or unreached.
    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name).and_then(|&v| self.get(v))
    }

    /// Gradients of every trainable parameter reached by the pass.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<F>> {
        self.params
            .iter()
            .filter_map(|(name, &v)| self.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_identity_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input_grad(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_at_three_has_gradient_six() {
        let mut tree = ParameterTree::new();
        tree.insert("w", Tensor::scalar(3.0f64), true).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&tree, "w").unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param("w").unwrap().data(), &[6.0]);
    }

    #[test]
    fn frozen_params_get_no_gradient_but_pass_it_through() {
        let mut tree = ParameterTree::new();
        tree.insert("frozen", Tensor::full(&[3], 2.0f64), false).unwrap();
        tree.insert("train", Tensor::full(&[3], 1.5f64), true).unwrap();
        let mut tape = Tape::new();
        let f = tape.param(&tree, "frozen").unwrap();
        let t = tape.param(&tree, "train").unwrap();
        let y = tape.mul(f, t).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert!(g.param("frozen").is_none());
        assert_eq!(g.param("train").unwrap().data(), &[2.0; 3]);
        assert_eq!(g.param_grads().len(), 1);
    }

    #[test]
    fn no_grad_tape_records_nothing_trainable() {
        let mut tree = ParameterTree::new();
        tree.insert("w", Tensor::full(&[2], 1.0f32), true).unwrap();
        let mut tape = Tape::no_grad();
        let w = tape.param(&tree, "w").unwrap();
        assert!(!tape.requires_grad(w));
    }

    #[test]
    fn param_leaf_is_shared() {
        let mut tree = ParameterTree::new();
        tree.insert("w", Tensor::full(&[2], 1.0f32), true).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&tree, "w").unwrap();
        let b = tape.param(&tree, "w").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn channel_mix_matches_per_step_matmul() {
        let x = Tensor::from_fn(&[2, 3, 5], |i| ((i * 7) % 5) as f64 - 2.0);
        let w = Tensor::from_fn(&[2, 3, 3], |i| ((i * 3) % 4) as f64 * 0.5 - 0.7);
        let subjects = [1usize, 0];
        let mut tape = Tape::<f64>::new();
        let xv = tape.input(x.clone());
        let wv = tape.input(w.clone());
        let y = tape.channel_mix(xv, wv, &subjects).unwrap();
        let yv = tape.value(y);
        for (n, &s) in subjects.iter().enumerate() {
            for t in 0..5 {
                for r in 0..3 {
                    let want: f64 = (0..3)
                        .map(|k| w.data()[s * 9 + r * 3 + k] * x.data()[n * 15 + k * 5 + t])
                        .sum();
                    assert!((yv.data()[n * 15 + r * 5 + t] - want).abs() < 1e-12);
                }
            }
        }
        let mut tape = Tape::<f64>::new();
        let xv = tape.input(x);
        let wv = tape.input(w);
        assert!(tape.channel_mix(xv, wv, &[2, 0]).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input_grad(Tensor::zeros(&[3]));
        assert!(tape.backward(x).is_err());
    }
}
