//! Define-by-run tape. Every primitive appends one node holding its output
//! value and the ids of its inputs; [`Tape::backward`] walks the nodes in
//! reverse and applies each primitive's reverse rule.

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LinComb(Vec<(f64, Var)>),
    MatMul(Var, Var),
    AddBias(Var, Var),
    ChannelAffine(Var, Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    Tanh(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    MeanSpatial(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    LogSoftmax(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Position in a tape, for [`Tape::truncate`].
#[derive(Clone, Copy, Debug)]
pub struct Mark(usize);

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a shape into `(outer, axis_len, inner)` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape whose leaves never require gradients. Integrators use this to
    /// discard intermediate stages as they go.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn mark(&self) -> Mark {
        Mark(self.nodes.len())
    }

    /// Drops every node recorded after `mark`. Any [`Var`] created after the
    /// mark is invalid afterwards.
    pub fn truncate(&mut self, mark: Mark) {
        self.nodes.truncate(mark.0);
    }

    /// Trainable/differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericFault { op: name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, &[self.shape(a), self.shape(b)]));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.record("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.record("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.record("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.record("scale", out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        self.record("add_scalar", out, Op::AddScalar(x), &[x])
    }

    /// `sum_i c_i * v_i` over same-shaped inputs.
    pub fn lincomb(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let Some(&(_, first)) = terms.first() else {
            return Err(Error::Contract("lincomb of zero terms".into()));
        };
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; self.value(first).numel()];
        for &(c, v) in terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("lincomb", &[&shape, t.shape()]));
            }
            if c == 0.0 {
                continue;
            }
            for (o, x) in out.iter_mut().zip(t.data()) {
                *o += c * x;
            }
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.1).collect();
        self.record(
            "lincomb",
            Tensor::from_vec(&shape, out),
            Op::LinComb(terms.to_vec()),
            &inputs,
        )
    }

    /// `(n,k) x (k,m) -> (n,m)`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &[sa, sb]));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        self.record("matmul", Tensor::from_vec(&[n, m], out), Op::MatMul(a, b), &[a, b])
    }

    /// Adds `b[c]` along axis 1 of `x` (`(n, c, ...)`).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::shape("add_bias", &[sx, sb]));
        }
        let (outer, c, inner) = split_axis(sx, 1);
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bias[(i / inner) % c];
        }
        debug_assert_eq!(out.numel(), outer * c * inner);
        self.record("add_bias", out, Op::AddBias(x, b), &[x, b])
    }

    /// `x[:, c, ...] * scale[c] + shift[c]`
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (sx, ss, sh) = (self.shape(x), self.shape(scale), self.shape(shift));
        if sx.len() < 2 || ss != [sx[1]] || sh != [sx[1]] {
            return Err(Error::shape("channel_affine", &[sx, ss, sh]));
        }
        let (_, c, inner) = split_axis(sx, 1);
        let (s, t) = (self.value(scale).data(), self.value(shift).data());
        let out = self.value(x).data().iter().enumerate().map(|(i, &v)| {
            let ch = (i / inner) % c;
            v * s[ch] + t[ch]
        });
        let out = Tensor::from_vec(sx, out.collect());
        self.record(
            "channel_affine",
            out,
            Op::ChannelAffine(x, scale, shift),
            &[x, scale, shift],
        )
    }

    /// Cross-correlation of `x: (n,c,h,w)` with `w: (o,c,k,k)`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)
            .ok_or_else(|| Error::shape("conv2d", &[self.shape(x), self.shape(w)]))?;
        let out = kernels::conv2d(self.value(x).data(), self.value(w).data(), &geom);
        let out = Tensor::from_vec(&[geom.n, geom.o, geom.ho, geom.wo], out);
        self.record("conv2d", out, Op::Conv2d { x, w, geom }, &[x, w])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.record("relu", out, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.record("tanh", out, Op::Tanh(x), &[x])
    }

    /// Group normalization over `(n, c, ...)` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gamma), self.shape(beta));
        if sx.len() < 2 || sg != [sx[1]] || sb != [sx[1]] || groups == 0 || sx[1] % groups != 0 {
            return Err(Error::shape("group_norm", &[sx, sg, sb]));
        }
        let (n, c, spatial) = split_axis(sx, 1);
        let (xhat, rstd) =
            kernels::group_norm_stats(self.value(x).data(), n, c, spatial, groups, 1e-5);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / spatial) % c;
                v * g[ch] + b[ch]
            })
            .collect();
        let out = Tensor::from_vec(sx, out);
        self.record(
            "group_norm",
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::ln);
        self.record("log", out, Op::Log(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        self.record("exp", out, Op::Exp(x), &[x])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.record("sum", out, Op::Sum(x), &[x])
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.record("mean", out, Op::Mean(x), &[x])
    }

    /// Global average pool: `(n, c, ...) -> (n, c)`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() < 2 {
            return Err(Error::shape("mean_spatial", &[sx]));
        }
        let (n, c, inner) = split_axis(sx, 1);
        let data = self.value(x).data();
        let out = (0..n * c)
            .map(|i| data[i * inner..(i + 1) * inner].iter().sum::<f64>() / inner as f64)
            .collect();
        let out = Tensor::from_vec(&[n, c], out);
        self.record("mean_spatial", out, Op::MeanSpatial(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self
            .value(x)
            .reshape(shape)
            .map_err(|_| Error::shape("reshape", &[self.shape(x), shape]))?;
        self.record("reshape", out, Op::Reshape(x), &[x])
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat of zero tensors".into()));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &[&base]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter().enumerate().all(|(i, &d)| i == axis || d == base[i]);
            if !ok {
                return Err(Error::shape("concat", &[&base, s]));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::from_vec(&shape, out);
        self.record(
            "concat",
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x);
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return Err(Error::shape("slice", &[sx, &[axis, start, len]]));
        }
        let (outer, dim, inner) = split_axis(sx, axis);
        let mut shape = sx.to_vec();
        shape[axis] = len;
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * dim + start) * inner;
            out.extend_from_slice(&data[off..off + len * inner]);
        }
        let out = Tensor::from_vec(&shape, out);
        self.record("slice", out, Op::Slice { x, axis, start }, &[x])
    }

    /// Non-overlapping `k x k` max pooling on `(n, c, h, w)`.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 4 || k == 0 || sx[2] < k || sx[3] < k {
            return Err(Error::shape("max_pool2d", &[sx]));
        }
        let (nc, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
        let (ho, wo) = (h / k, w / k);
        let shape = [sx[0], sx[1], ho, wo];
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(nc * ho * wo);
        let mut argmax = Vec::with_capacity(nc * ho * wo);
        for p in 0..nc {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = p * h * w + (i * k) * w + j * k;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = p * h * w + (i * k + di) * w + j * k + dj;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::from_vec(&shape, out);
        self.record("max_pool2d", out, Op::MaxPool { x, argmax }, &[x])
    }

    /// Row-wise log-softmax of a `(n, k)` tensor, max-shifted.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(Error::shape("log_softmax", &[sx]));
        }
        let out = log_softmax_rows(self.value(x));
        self.record("log_softmax", out, Op::LogSoftmax(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lt.shape()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            self.reverse_rule(i, g, lower)?;
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn reverse_rule(&self, i: usize, g: &Tensor, lower: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, t: Tensor| {
            if self.nodes[v.0].requires_grad {
                add_into(&mut lower[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    send(*a, g.zip_map(val(*b), |x, y| x * y)?);
                }
                if rg(*b) {
                    send(*b, g.zip_map(val(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(x, c) => send(*x, g.map(|v| v * c)),
            Op::AddScalar(x) => send(*x, g.clone()),
            Op::LinComb(terms) => {
                for &(c, v) in terms {
                    if rg(v) {
                        send(v, g.map(|x| x * c));
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                if rg(*a) {
                    let ga = kernels::matmul_a_bt(g.data(), val(*b).data(), n, k, m);
                    send(*a, Tensor::from_vec(sa, ga));
                }
                if rg(*b) {
                    let gb = kernels::matmul_at_b(val(*a).data(), g.data(), n, k, m);
                    send(*b, Tensor::from_vec(sb, gb));
                }
            }
            Op::AddBias(x, b) => {
                send(*x, g.clone());
                if rg(*b) {
                    let (_, c, inner) = split_axis(g.shape(), 1);
                    let mut gb = vec![0.0; c];
                    for (idx, v) in g.data().iter().enumerate() {
                        gb[(idx / inner) % c] += v;
                    }
                    send(*b, Tensor::from_vec(&[c], gb));
                }
            }
            Op::ChannelAffine(x, s, t) => {
                let (_, c, inner) = split_axis(g.shape(), 1);
                let sv = val(*s).data();
                if rg(*x) {
                    let gx = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(idx, v)| v * sv[(idx / inner) % c]);
                    send(*x, Tensor::from_vec(g.shape(), gx.collect()));
                }
                if rg(*s) || rg(*t) {
                    let (mut gs, mut gt) = (vec![0.0; c], vec![0.0; c]);
                    let xv = val(*x).data();
                    for (idx, v) in g.data().iter().enumerate() {
                        let ch = (idx / inner) % c;
                        gs[ch] += v * xv[idx];
                        gt[ch] += v;
                    }
                    send(*s, Tensor::from_vec(&[c], gs));
                    send(*t, Tensor::from_vec(&[c], gt));
                }
            }
            Op::Conv2d { x, w, geom } => {
                if rg(*x) {
                    let gx = kernels::conv2d_grad_input(g.data(), val(*w).data(), geom);
                    send(*x, Tensor::from_vec(val(*x).shape(), gx));
                }
                if rg(*w) {
                    let gw = kernels::conv2d_grad_weight(g.data(), val(*x).data(), geom);
                    send(*w, Tensor::from_vec(val(*w).shape(), gw));
                }
            }
            Op::Relu(x) => send(*x, g.zip_map(out, |gv, o| if o > 0.0 { gv } else { 0.0 })?),
            Op::Tanh(x) => send(*x, g.zip_map(out, |gv, o| gv * (1.0 - o * o))?),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let (n, c, spatial) = split_axis(g.shape(), 1);
                let gam = val(*gamma).data();
                let gd = g.data();
                if rg(*gamma) || rg(*beta) {
                    let (mut gg, mut gb) = (vec![0.0; c], vec![0.0; c]);
                    for (idx, v) in gd.iter().enumerate() {
                        let ch = (idx / spatial) % c;
                        gg[ch] += v * xhat[idx];
                        gb[ch] += v;
                    }
                    send(*gamma, Tensor::from_vec(&[c], gg));
                    send(*beta, Tensor::from_vec(&[c], gb));
                }
                if rg(*x) {
                    let per_group = (c / groups) * spatial;
                    let mut gx = vec![0.0; gd.len()];
                    for s in 0..n {
                        for gi in 0..*groups {
                            let base = s * c * spatial + gi * per_group;
                            let dxhat = |idx: usize| gd[idx] * gam[(idx / spatial) % c];
                            let (mut m1, mut m2) = (0.0, 0.0);
                            for idx in base..base + per_group {
                                let d = dxhat(idx);
                                m1 += d;
                                m2 += d * xhat[idx];
                            }
                            m1 /= per_group as f64;
                            m2 /= per_group as f64;
                            let r = rstd[s * groups + gi];
                            for idx in base..base + per_group {
                                gx[idx] = r * (dxhat(idx) - m1 - xhat[idx] * m2);
                            }
                        }
                    }
                    send(*x, Tensor::from_vec(g.shape(), gx));
                }
            }
            Op::Log(x) => send(*x, g.zip_map(val(*x), |gv, xv| gv / xv)?),
            Op::Exp(x) => send(*x, g.zip_map(out, |gv, o| gv * o)?),
            Op::Sum(x) => send(*x, Tensor::full(val(*x).shape(), g.item())),
            Op::Mean(x) => {
                let t = val(*x);
                send(*x, Tensor::full(t.shape(), g.item() / t.numel() as f64));
            }
            Op::MeanSpatial(x) => {
                let sx = val(*x).shape();
                let (_, _, inner) = split_axis(sx, 1);
                let gx = (0..val(*x).numel()).map(|idx| g.data()[idx / inner] / inner as f64);
                send(*x, Tensor::from_vec(sx, gx.collect()));
            }
            Op::Reshape(x) => send(*x, g.reshape(val(*x).shape())?),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let sp = val(p).shape();
                    let len = sp[*axis];
                    if rg(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            gp.extend_from_slice(&g.data()[from..from + len * inner]);
                        }
                        send(p, Tensor::from_vec(sp, gp));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let sx = val(*x).shape();
                let (outer, dim, inner) = split_axis(sx, *axis);
                let len = g.shape()[*axis];
                let mut gx = vec![0.0; val(*x).numel()];
                for o in 0..outer {
                    let to = (o * dim + start) * inner;
                    let from = o * len * inner;
                    gx[to..to + len * inner].copy_from_slice(&g.data()[from..from + len * inner]);
                }
                send(*x, Tensor::from_vec(sx, gx));
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![0.0; val(*x).numel()];
                for (gv, &idx) in g.data().iter().zip(argmax) {
                    gx[idx] += gv;
                }
                send(*x, Tensor::from_vec(val(*x).shape(), gx));
            }
            Op::LogSoftmax(x) => {
                let k = out.shape()[1];
                let mut gx = g.data().to_vec();
                for (grow, orow) in gx.chunks_mut(k).zip(out.data().chunks(k)) {
                    let total: f64 = grow.iter().sum();
                    for (gv, o) in grow.iter_mut().zip(orow) {
                        *gv -= o.exp() * total;
                    }
                }
                send(*x, Tensor::from_vec(out.shape(), gx));
            }
        }
        Ok(())
    }
}

/// Row-wise log-softmax on plain values.
pub fn log_softmax_rows(t: &Tensor) -> Tensor {
    let k = t.shape()[t.rank() - 1];
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::from_vec(t.shape(), out)
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not influence the
    /// loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec())
    }

    #[test]
    fn add_is_elementwise() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let data = [0.3, -1.0, 2.0, 4.0, 5.5, -6.0, 7.0, 0.0, 9.0];
        let a = tape.leaf(t(&[3, 3], &data));
        let c = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(c).data(), &data);
    }

    #[test]
    fn shape_mismatch_reports_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 2]));
        match tape.add(a, b) {
            Err(Error::Shape { op, shapes }) => {
                assert_eq!(op, "add");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 2]]);
            }
            other => panic!("expected shape error, got {:?}", other.map(|_| ())),
        }
        assert!(tape.matmul(a, a).is_err());
    }

    #[test]
    fn non_finite_output_is_a_fault() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[0.0, 1.0]));
        match tape.log(a) {
            Err(Error::NumericFault { op }) => assert_eq!(op, "log"),
            _ => panic!("log(0) must be a numeric fault"),
        }
        let big = tape.leaf(t(&[1], &[1000.0]));
        assert!(matches!(tape.exp(big), Err(Error::NumericFault { op: "exp" })));
    }

    #[test]
    fn conv_of_constant_image_with_ones_kernel() {
        // Hand oracle: every interior pixel sees all nine taps of value c.
        let c = 0.7;
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 5, 5], c));
        let w = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[1, 1, 5, 5]);
        for i in 1..4 {
            for j in 1..4 {
                assert!((out.data()[i * 5 + j] - 9.0 * c).abs() < 1e-12);
            }
        }
        // corners see a 2x2 window, edges a 2x3 window
        assert!((out.data()[0] - 4.0 * c).abs() < 1e-12);
        assert!((out.data()[2] - 6.0 * c).abs() < 1e-12);
    }

    #[test]
    fn strided_and_pointwise_conv_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2, 3, 8, 8]));
        let w3 = tape.leaf(Tensor::ones(&[4, 3, 3, 3]));
        let w1 = tape.leaf(Tensor::ones(&[5, 3, 1, 1]));
        let y = tape.conv2d(x, w3, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 4, 4]);
        let z = tape.conv2d(x, w1, 1, 0).unwrap();
        assert_eq!(tape.shape(z), &[2, 5, 8, 8]);
        assert_eq!(tape.value(z).data()[0], 3.0);
        let bad = tape.leaf(Tensor::ones(&[4, 2, 3, 3]));
        assert!(tape.conv2d(x, bad, 1, 1).is_err());
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn grad_of_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 6.0);
    }

    #[test]
    fn unreachable_nodes_get_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let unused = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 1.0]));
        let y = tape.scale(x, 4.0).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 4.0);
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused), Tensor::zeros(&[2]));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_p_minus_onehot() {
        let logits = [0.2, -1.3, 2.1, 0.0];
        let onehot = [0.0, 0.0, 1.0, 0.0];
        let mut tape = Tape::new();
        let l = tape.leaf(t(&[1, 4], &logits));
        let y = tape.constant(t(&[1, 4], &onehot));
        let lp = tape.log_softmax(l).unwrap();
        let prod = tape.mul(lp, y).unwrap();
        let s = tape.sum(prod).unwrap();
        let loss = tape.scale(s, -1.0).unwrap();
        let g = tape.backward(loss).unwrap().wrt(l);
        let p = log_softmax_rows(&t(&[1, 4], &logits)).map(f64::exp);
        for i in 0..4 {
            assert!((g.data()[i] - (p.data()[i] - onehot[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn truncate_discards_later_nodes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let m = tape.mark();
        let _ = tape.scale(x, 2.0).unwrap();
        let _ = tape.scale(x, 3.0).unwrap();
        assert_eq!(tape.len(), 3);
        tape.truncate(m);
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(Tensor::from_vec(&[2, 2, 2], (0..8).map(|v| v as f64).collect()));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2]);
        assert_eq!(&tape.value(c).data()[..6], &[1.0, 2.0, 0.0, 1.0, 2.0, 3.0]);
        let s = tape.slice(c, 1, 1, 2).unwrap();
        assert_eq!(tape.value(s), tape.value(b));
    }

    #[test]
    fn max_pool_picks_window_max() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(
            &[1, 1, 2, 4],
            vec![1.0, 5.0, -1.0, 0.0, 2.0, 3.0, 7.0, 6.0],
        ));
        let y = tape.max_pool2d(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 7.0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap().wrt(x);
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn group_norm_output_is_standardized() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..16).map(|v| (v * v) as f64 * 0.1).collect();
        let x = tape.leaf(Tensor::from_vec(&[1, 4, 2, 2], data));
        let gamma = tape.leaf(Tensor::ones(&[4]));
        let beta = tape.leaf(Tensor::zeros(&[4]));
        let y = tape.group_norm(x, gamma, beta, 2).unwrap();
        let out = tape.value(y).data();
        for grp in out.chunks(8) {
            let mean: f64 = grp.iter().sum::<f64>() / 8.0;
            let var: f64 = grp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
