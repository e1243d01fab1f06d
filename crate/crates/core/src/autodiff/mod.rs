//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every forward op as a node; [`Graph::backward`] walks
//! the nodes in reverse creation order and leaves gradients on every
//! parameter leaf reachable from the loss. Graphs are single-threaded; build
//! one per sample to parallelize.

mod conv;
pub mod gradcheck;
mod pool;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;

use conv::ConvGeom;
pub use conv::{ConvSpec, Padding};

use crate::error::{Error, Result};
use crate::gaussian::GaussianBlur;
use crate::tensor::{Dims, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    Relu(usize),
    Sigmoid(usize),
    MaxPool { x: usize, argmax: Vec<usize> },
    GlobalAvgPool(usize),
    NearestResize { x: usize, factor: usize },
    Concat(Vec<usize>),
    ChannelMean(usize),
    Blur { x: usize, blur: GaussianBlur },
    SquaredResiduals { o: usize, p: usize },
    ChannelScale { x: usize, a: usize },
    Add(usize, usize),
    Scale { x: usize, s: usize },
    ScaleConst { x: usize, c: f64 },
    Sum(usize),
    SumSquares(usize),
    NormalizeMaps { x: usize, sums: Vec<f64> },
    Kl { m: usize, z: Vec<f64>, eps: f64 },
    CentreBias { lvx: usize, lvy: usize },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, .. } => {
                let mut p = vec![*x, *w];
                p.extend(b);
                p
            }
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::MaxPool { x, .. }
            | Op::GlobalAvgPool(x)
            | Op::NearestResize { x, .. }
            | Op::ChannelMean(x)
            | Op::Blur { x, .. }
            | Op::ScaleConst { x, .. }
            | Op::Sum(x)
            | Op::SumSquares(x)
            | Op::NormalizeMaps { x, .. }
            | Op::Kl { m: x, .. } => vec![*x],
            Op::Concat(parts) => parts.clone(),
            Op::SquaredResiduals { o, p } => vec![*o, *p],
            Op::ChannelScale { x, a } => vec![*x, *a],
            Op::Add(a, b) => vec![*a, *b],
            Op::Scale { x, s } => vec![*x, *s],
            Op::CentreBias { lvx, lvy } => vec![*lvx, *lvy],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    kink_margin: Cell<f64>,
    sigmoid_grad_scale: Cell<f64>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn same_dims(op: &'static str, a: Dims, b: Dims) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{a:?} vs {b:?}")))
    }
}

fn scalar_dims(op: &'static str, d: Dims) -> Result<()> {
    if d == [1, 1, 1, 1] {
        Ok(())
    } else {
        Err(Error::shape(op, format!("expected a scalar, got {d:?}")))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            kink_margin: Cell::new(f64::INFINITY),
            sigmoid_grad_scale: Cell::new(1.0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = match op {
            Op::Leaf => value.requires_grad,
            _ => op.parents().iter().any(|&p| nodes[p].needs_grad),
        };
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn make(&self, dims: Dims, data: Vec<f64>, op: Op) -> Var {
        self.push(Tensor::new(dims, data).expect("op produced consistent dims"), op)
    }

    /// A leaf whose gradient is not tracked.
    pub fn constant(&self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    /// A leaf that receives a gradient from [`backward`](Self::backward).
    pub fn param(&self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = true;
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn dims(&self, v: Var) -> Dims {
        self.nodes.borrow()[v.0].value.dims()
    }

    /// Gradient left on a leaf by the last [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<Vec<f64>> {
        self.nodes.borrow()[v.0].value.grad.clone()
    }

    /// Smallest distance of any relu input from 0, or of any max-pool maximum
    /// from its runner-up, seen so far. Finite differences with step `h` are
    /// only trustworthy when this exceeds `2h` by a comfortable factor.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin.get()
    }

    /// Test fixture: scales every sigmoid derivative in later backward
    /// passes by `factor`, so that gradient checks can be shown to fail.
    #[doc(hidden)]
    pub fn corrupt_sigmoid_grad(&self, factor: f64) {
        self.sigmoid_grad_scale.set(factor);
    }

    fn note_margin(&self, m: f64) {
        self.kink_margin.set(self.kink_margin.get().min(m));
    }

    /// Parameter leaves that `v` depends on, in creation order.
    pub fn upstream_params(&self, v: Var) -> Vec<Var> {
        let nodes = self.nodes.borrow();
        let mut seen = HashSet::new();
        let mut stack = vec![v.0];
        let mut out = Vec::new();
        while let Some(i) = stack.pop() {
            if !seen.insert(i) || !nodes[i].needs_grad {
                continue;
            }
            match &nodes[i].op {
                Op::Leaf => out.push(Var(i)),
                op => stack.extend(op.parents()),
            }
        }
        out.sort();
        out
    }

    // ---- forward ops -------------------------------------------------

    /// 2-D convolution; `kernel` is `[Cout, Cin, kh, kw]`, `bias` has `Cout` values.
    pub fn conv2d(&self, x: Var, kernel: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (dims, data, geom) = {
            let nodes = self.nodes.borrow();
            let xt = &nodes[x.0].value;
            let wt = &nodes[kernel.0].value;
            let geom = ConvGeom::new(xt.dims(), wt.dims(), &spec)?;
            let bt = bias.map(|b| &nodes[b.0].value);
            if let Some(bt) = bt {
                if bt.len() != geom.cout {
                    return Err(Error::shape("conv2d", format!("bias {:?} for kernel {:?}", bt.dims(), wt.dims())));
                }
            }
            let data = conv::forward(&geom, xt.data(), wt.data(), bt.map(|b| b.data()));
            (geom.out_dims(), data, geom)
        };
        Ok(self.make(dims, data, Op::Conv { x: x.0, w: kernel.0, b: bias.map(|b| b.0), geom }))
    }

    pub fn relu(&self, x: Var) -> Var {
        let (dims, data, margin) = {
            let t = self.value(x);
            let margin = t.data().iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
            (t.dims(), t.data().iter().map(|&v| v.max(0.0)).collect(), margin)
        };
        self.note_margin(margin);
        self.make(dims, data, Op::Relu(x.0))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let (dims, data) = {
            let t = self.value(x);
            (t.dims(), t.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect())
        };
        self.make(dims, data, Op::Sigmoid(x.0))
    }

    pub fn max_pool2d(&self, x: Var, window: usize, stride: usize, padding: Padding) -> Result<Var> {
        let r = {
            let t = self.value(x);
            pool::max_pool(t.dims(), t.data(), window, stride, padding)?
        };
        self.note_margin(r.margin);
        Ok(self.make(r.dims, r.values, Op::MaxPool { x: x.0, argmax: r.argmax }))
    }

    /// Per-channel spatial mean, `[B, C, 1, 1]`.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let (dims, data) = {
            let t = self.value(x);
            let [b, c, h, w] = t.dims();
            let n = (h * w) as f64;
            let data = (0..b * c).map(|p| t.data()[p * h * w..(p + 1) * h * w].iter().sum::<f64>() / n);
            ([b, c, 1, 1], data.collect())
        };
        self.make(dims, data, Op::GlobalAvgPool(x.0))
    }

    /// Replicates every pixel into a `factor × factor` block.
    pub fn nearest_resize(&self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Invalid("nearest_resize factor must be >= 1".into()));
        }
        let (dims, data) = {
            let t = self.value(x);
            let [b, c, h, w] = t.dims();
            let (oh, ow) = (h * factor, w * factor);
            let mut data = Vec::with_capacity(b * c * oh * ow);
            for p in 0..b * c {
                let src = &t.data()[p * h * w..(p + 1) * h * w];
                for y in 0..oh {
                    let row = &src[(y / factor) * w..][..w];
                    for x in 0..ow {
                        data.push(row[x / factor]);
                    }
                }
            }
            ([b, c, oh, ow], data)
        };
        Ok(self.make(dims, data, Op::NearestResize { x: x.0, factor }))
    }

    /// Concatenation along the channel axis, in argument order.
    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var> {
        let (dims, data) = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .map(|p| nodes[p.0].value.dims())
                .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
            let [b, _, h, w] = first;
            let mut channels = 0;
            for p in parts {
                let d = nodes[p.0].value.dims();
                if d[0] != b || d[2] != h || d[3] != w {
                    return Err(Error::shape("concat_channels", format!("{first:?} vs {d:?}")));
                }
                channels += d[1];
            }
            let mut data = Vec::with_capacity(b * channels * h * w);
            for bi in 0..b {
                for p in parts {
                    let t = &nodes[p.0].value;
                    let per = t.channels() * h * w;
                    data.extend_from_slice(&t.data()[bi * per..(bi + 1) * per]);
                }
            }
            ([b, channels, h, w], data)
        };
        Ok(self.make(dims, data, Op::Concat(parts.iter().map(|p| p.0).collect())))
    }

    /// Mean over channels, `[B, 1, H, W]`.
    pub fn channel_mean(&self, x: Var) -> Var {
        let (dims, data) = {
            let t = self.value(x);
            let [b, c, h, w] = t.dims();
            let hw = h * w;
            let mut data = vec![0.0; b * hw];
            for bi in 0..b {
                // x₀ + Σ(x_c − x₀)/C: exact when every channel agrees.
                let out = &mut data[bi * hw..(bi + 1) * hw];
                let first = t.plane(bi, 0);
                for ci in 1..c {
                    for ((o, v), f) in out.iter_mut().zip(t.plane(bi, ci)).zip(first) {
                        *o += v - f;
                    }
                }
                for (o, f) in out.iter_mut().zip(first) {
                    *o = f + *o / c as f64;
                }
            }
            ([b, 1, h, w], data)
        };
        self.make(dims, data, Op::ChannelMean(x.0))
    }

    /// Fixed (non-learnable) Gaussian filtering of every plane.
    pub fn blur(&self, x: Var, blur: &GaussianBlur) -> Var {
        let (dims, data) = {
            let t = self.value(x);
            let out = blur.forward(&t);
            (out.dims(), out.into_data())
        };
        self.make(dims, data, Op::Blur { x: x.0, blur: blur.clone() })
    }

    /// `(o_c − p_l)²` for every channel `c` of `o` and `l` of `p`, stacked
    /// with channel index `c·L + l`.
    pub fn squared_residuals(&self, o: Var, p: Var) -> Result<Var> {
        let (dims, data) = {
            let nodes = self.nodes.borrow();
            let (ot, pt) = (&nodes[o.0].value, &nodes[p.0].value);
            let [b, c, h, w] = ot.dims();
            let [pb, l, ph, pw] = pt.dims();
            if (pb, ph, pw) != (b, h, w) {
                return Err(Error::shape("squared_residuals", format!("{:?} vs {:?}", ot.dims(), pt.dims())));
            }
            let mut data = Vec::with_capacity(b * c * l * h * w);
            for bi in 0..b {
                for ci in 0..c {
                    let op = ot.plane(bi, ci);
                    for li in 0..l {
                        let pp = pt.plane(bi, li);
                        data.extend(op.iter().zip(pp).map(|(a, g)| (a - g) * (a - g)));
                    }
                }
            }
            ([b, c * l, h, w], data)
        };
        Ok(self.make(dims, data, Op::SquaredResiduals { o: o.0, p: p.0 }))
    }

    /// Multiplies channel `c` of `x` by `a[b, c]` (`a` is `[B, C, 1, 1]`).
    pub fn channel_scale(&self, x: Var, a: Var) -> Result<Var> {
        let (dims, data) = {
            let nodes = self.nodes.borrow();
            let (xt, at) = (&nodes[x.0].value, &nodes[a.0].value);
            let [b, c, h, w] = xt.dims();
            if at.dims() != [b, c, 1, 1] {
                return Err(Error::shape(
                    "channel_scale",
                    format!("feature {:?} vs weights {:?}", xt.dims(), at.dims()),
                ));
            }
            let hw = h * w;
            let data = xt.data().iter().enumerate().map(|(i, v)| v * at.data()[i / hw]).collect();
            ([b, c, h, w], data)
        };
        Ok(self.make(dims, data, Op::ChannelScale { x: x.0, a: a.0 }))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (dims, data) = {
            let nodes = self.nodes.borrow();
            let (at, bt) = (&nodes[a.0].value, &nodes[b.0].value);
            same_dims("add", at.dims(), bt.dims())?;
            (at.dims(), at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect())
        };
        Ok(self.make(dims, data, Op::Add(a.0, b.0)))
    }

    /// Sum of several equally-shaped tensors, left to right.
    pub fn add_all(&self, terms: &[Var]) -> Result<Var> {
        let (first, rest) = terms.split_first().ok_or_else(|| Error::Invalid("sum of zero terms".into()))?;
        rest.iter().try_fold(*first, |acc, &t| self.add(acc, t))
    }

    /// Multiplies `x` by the scalar node `s`.
    pub fn scale(&self, x: Var, s: Var) -> Result<Var> {
        let (dims, data) = {
            let nodes = self.nodes.borrow();
            let (xt, st) = (&nodes[x.0].value, &nodes[s.0].value);
            scalar_dims("scale", st.dims())?;
            let k = st.data()[0];
            (xt.dims(), xt.data().iter().map(|v| v * k).collect())
        };
        Ok(self.make(dims, data, Op::Scale { x: x.0, s: s.0 }))
    }

    pub fn scale_const(&self, x: Var, c: f64) -> Var {
        let (dims, data) = {
            let t = self.value(x);
            (t.dims(), t.data().iter().map(|v| v * c).collect())
        };
        self.make(dims, data, Op::ScaleConst { x: x.0, c })
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.make([1, 1, 1, 1], vec![s], Op::Sum(x.0))
    }

    pub fn sum_squares(&self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.make([1, 1, 1, 1], vec![s], Op::SumSquares(x.0))
    }

    /// Divides each batch item by its total so it sums to 1. A non-positive
    /// total falls back to the uniform distribution (and a zero gradient).
    pub fn normalize_maps(&self, x: Var) -> Var {
        let (dims, data, sums) = {
            let t = self.value(x);
            let b = t.batch();
            let per = t.len() / b;
            let mut data = Vec::with_capacity(t.len());
            let mut sums = Vec::with_capacity(b);
            for chunk in t.data().chunks(per) {
                let s: f64 = chunk.iter().sum();
                if s > 0.0 && s.is_finite() {
                    data.extend(chunk.iter().map(|v| v / s));
                } else {
                    data.extend(std::iter::repeat_n(1.0 / per as f64, per));
                }
                sums.push(s);
            }
            (t.dims(), data, sums)
        };
        self.make(dims, data, Op::NormalizeMaps { x: x.0, sums })
    }

    /// `Σ_t z(t)·log(z(t)/(m(t)+ε) + ε)` summed over every element.
    pub fn kl_div(&self, m: Var, target: &Tensor, eps: f64) -> Result<Var> {
        let value = {
            let mt = self.value(m);
            same_dims("kl_div", mt.dims(), target.dims())?;
            if mt.data().iter().chain(target.data()).any(|&v| v < 0.0) {
                return Err(Error::Invalid("kl_div needs nonnegative maps".into()));
            }
            kl_value(mt.data(), target.data(), eps)
        };
        Ok(self.make([1, 1, 1, 1], vec![value], Op::Kl { m: m.0, z: target.data().to_vec(), eps }))
    }

    /// Axis-aligned Gaussian density centred on the grid, parameterized by
    /// log-variances (scalar nodes), replicated over `batch`.
    pub fn centre_bias(&self, log_var_x: Var, log_var_y: Var, batch: usize, size: usize) -> Result<Var> {
        let (lvx, lvy) = {
            let nodes = self.nodes.borrow();
            let (a, b) = (&nodes[log_var_x.0].value, &nodes[log_var_y.0].value);
            scalar_dims("centre_bias", a.dims())?;
            scalar_dims("centre_bias", b.dims())?;
            (a.data()[0], b.data()[0])
        };
        if size < 2 || batch == 0 {
            return Err(Error::Invalid(format!("centre_bias needs size >= 2, got {size}")));
        }
        let plane = centre_bias_plane(size, lvx, lvy);
        let mut data = Vec::with_capacity(batch * plane.len());
        for _ in 0..batch {
            data.extend_from_slice(&plane);
        }
        Ok(self.make([batch, 1, size, size], data, Op::CentreBias { lvx: log_var_x.0, lvy: log_var_y.0 }))
    }

    // ---- reverse pass ------------------------------------------------

    /// Propagates d(loss)/d(node) back to every parameter leaf; leaf
    /// gradients accumulate across repeated calls.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let leaf_grads = {
            let nodes = self.nodes.borrow();
            let ld = nodes[loss.0].value.dims();
            if ld != [1, 1, 1, 1] {
                return Err(Error::NonScalarLoss(ld));
            }
            let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
            grads[loss.0] = Some(vec![1.0]);
            let mut leaf_grads = Vec::new();
            for id in (0..=loss.0).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &nodes[id];
                if !node.needs_grad {
                    continue;
                }
                if let Op::Leaf = node.op {
                    leaf_grads.push((id, g));
                    continue;
                }
                let mut local = local_grads(&nodes, node, &g);
                if let Op::Sigmoid(_) = node.op {
                    let k = self.sigmoid_grad_scale.get();
                    if k != 1.0 {
                        local.iter_mut().flat_map(|(_, pg)| pg.iter_mut()).for_each(|v| *v *= k);
                    }
                }
                for (parent, pg) in local {
                    if !nodes[parent].needs_grad {
                        continue;
                    }
                    match &mut grads[parent] {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(pg),
                    }
                }
            }
            leaf_grads
        };
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            nodes[id].value.accumulate_grad(&g);
        }
        Ok(())
    }
}

pub(crate) fn kl_value(m: &[f64], z: &[f64], eps: f64) -> f64 {
    m.iter().zip(z).filter(|(_, &zt)| zt > 0.0).map(|(&mt, &zt)| zt * (zt / (mt + eps) + eps).ln()).sum()
}

pub(crate) fn centre_bias_plane(size: usize, log_var_x: f64, log_var_y: f64) -> Vec<f64> {
    let (vx, vy) = (log_var_x.exp(), log_var_y.exp());
    let c = (size as f64 - 1.0) / 2.0;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * (vx * vy).sqrt());
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let dy = y as f64 - c;
        for x in 0..size {
            let dx = x as f64 - c;
            out.push(norm * (-(dx * dx / (2.0 * vx) + dy * dy / (2.0 * vy))).exp());
        }
    }
    out
}

/// Gradient contributions of one node to each of its parents.
fn local_grads(nodes: &[Node], node: &Node, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let val = |i: usize| &nodes[i].value;
    let wants = |i: usize| nodes[i].needs_grad;
    match &node.op {
        Op::Leaf => vec![],
        Op::Conv { x, w, b, geom } => {
            let mut out = Vec::new();
            if wants(*x) {
                out.push((*x, conv::backward_input(geom, g, val(*w).data())));
            }
            if wants(*w) || b.is_some_and(wants) {
                let (dw, db) = conv::backward_params(geom, g, val(*x).data());
                out.push((*w, dw));
                if let Some(b) = b {
                    out.push((*b, db));
                }
            }
            out
        }
        Op::Relu(x) => {
            let xv = val(*x).data();
            vec![(*x, g.iter().zip(xv).map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 }).collect())]
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            vec![(*x, g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect())]
        }
        Op::MaxPool { x, argmax } => {
            let mut gx = vec![0.0; val(*x).len()];
            for (gi, &src) in g.iter().zip(argmax) {
                gx[src] += gi;
            }
            vec![(*x, gx)]
        }
        Op::GlobalAvgPool(x) => {
            let [_, _, h, w] = val(*x).dims();
            let hw = h * w;
            let gx = (0..val(*x).len()).map(|i| g[i / hw] / hw as f64).collect();
            vec![(*x, gx)]
        }
        Op::NearestResize { x, factor } => {
            let [b, c, h, w] = val(*x).dims();
            let ow = w * factor;
            let mut gx = vec![0.0; b * c * h * w];
            let plane_out = h * factor * ow;
            for p in 0..b * c {
                let gp = &g[p * plane_out..(p + 1) * plane_out];
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for (i, gv) in gp.iter().enumerate() {
                    let (y, xx) = (i / ow, i % ow);
                    dst[(y / factor) * w + xx / factor] += gv;
                }
            }
            vec![(*x, gx)]
        }
        Op::Concat(parts) => {
            let [b, total, h, w] = node.value.dims();
            let hw = h * w;
            let mut out = Vec::with_capacity(parts.len());
            let mut c0 = 0;
            for &p in parts {
                let c = val(p).channels();
                let mut gp = Vec::with_capacity(b * c * hw);
                for bi in 0..b {
                    let start = (bi * total + c0) * hw;
                    gp.extend_from_slice(&g[start..start + c * hw]);
                }
                out.push((p, gp));
                c0 += c;
            }
            out
        }
        Op::ChannelMean(x) => {
            let [b, c, h, w] = val(*x).dims();
            let hw = h * w;
            let mut gx = Vec::with_capacity(b * c * hw);
            for bi in 0..b {
                let gp = &g[bi * hw..(bi + 1) * hw];
                for _ in 0..c {
                    gx.extend(gp.iter().map(|v| v / c as f64));
                }
            }
            vec![(*x, gx)]
        }
        Op::Blur { x, blur } => {
            let [b, c, h, w] = val(*x).dims();
            let hw = h * w;
            let mut gx = Vec::with_capacity(b * c * hw);
            for p in 0..b * c {
                gx.extend(blur.adjoint_plane(h, w, &g[p * hw..(p + 1) * hw]));
            }
            vec![(*x, gx)]
        }
        Op::SquaredResiduals { o, p } => {
            let (ot, pt) = (val(*o), val(*p));
            let [b, c, h, w] = ot.dims();
            let l = pt.channels();
            let hw = h * w;
            let mut go = vec![0.0; ot.len()];
            let mut gp = vec![0.0; pt.len()];
            for bi in 0..b {
                for ci in 0..c {
                    let op = ot.plane(bi, ci);
                    for li in 0..l {
                        let pp = pt.plane(bi, li);
                        let gs = &g[((bi * c + ci) * l + li) * hw..][..hw];
                        let go_p = &mut go[(bi * c + ci) * hw..][..hw];
                        for k in 0..hw {
                            let d = 2.0 * (op[k] - pp[k]) * gs[k];
                            go_p[k] += d;
                        }
                        let gp_p = &mut gp[(bi * l + li) * hw..][..hw];
                        for k in 0..hw {
                            gp_p[k] -= 2.0 * (op[k] - pp[k]) * gs[k];
                        }
                    }
                }
            }
            vec![(*o, go), (*p, gp)]
        }
        Op::ChannelScale { x, a } => {
            let (xt, at) = (val(*x), val(*a));
            let [_, _, h, w] = xt.dims();
            let hw = h * w;
            let gx = g.iter().enumerate().map(|(i, gi)| gi * at.data()[i / hw]).collect();
            let ga = (0..at.len())
                .map(|p| g[p * hw..(p + 1) * hw].iter().zip(&xt.data()[p * hw..(p + 1) * hw]).map(|(a, b)| a * b).sum())
                .collect();
            vec![(*x, gx), (*a, ga)]
        }
        Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
        Op::Scale { x, s } => {
            let k = val(*s).data()[0];
            let gs: f64 = g.iter().zip(val(*x).data()).map(|(a, b)| a * b).sum();
            vec![(*x, g.iter().map(|v| v * k).collect()), (*s, vec![gs])]
        }
        Op::ScaleConst { x, c } => vec![(*x, g.iter().map(|v| v * c).collect())],
        Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).len()])],
        Op::SumSquares(x) => vec![(*x, val(*x).data().iter().map(|v| 2.0 * v * g[0]).collect())],
        Op::NormalizeMaps { x, sums } => {
            let y = node.value.data();
            let per = y.len() / sums.len();
            let mut gx = Vec::with_capacity(y.len());
            for (bi, &s) in sums.iter().enumerate() {
                let (gb, yb) = (&g[bi * per..(bi + 1) * per], &y[bi * per..(bi + 1) * per]);
                if s > 0.0 && s.is_finite() {
                    let dotp: f64 = gb.iter().zip(yb).map(|(a, b)| a * b).sum();
                    gx.extend(gb.iter().map(|gi| (gi - dotp) / s));
                } else {
                    gx.extend(std::iter::repeat_n(0.0, per));
                }
            }
            vec![(*x, gx)]
        }
        Op::Kl { m, z, eps } => {
            let mv = val(*m).data();
            let gm = mv
                .iter()
                .zip(z)
                .map(|(&mt, &zt)| {
                    if zt > 0.0 {
                        let q = mt + eps;
                        let r = zt / q;
                        g[0] * zt * (-r / q) / (r + eps)
                    } else {
                        0.0
                    }
                })
                .collect();
            vec![(*m, gm)]
        }
        Op::CentreBias { lvx, lvy } => {
            let [_, _, size, _] = node.value.dims();
            let (vx, vy) = (val(*lvx).data()[0].exp(), val(*lvy).data()[0].exp());
            let c = (size as f64 - 1.0) / 2.0;
            let (mut gx, mut gy) = (0.0, 0.0);
            for (i, (gi, mv)) in g.iter().zip(node.value.data()).enumerate() {
                let k = i % (size * size);
                let dy = (k / size) as f64 - c;
                let dx = (k % size) as f64 - c;
                gx += gi * mv * (-0.5 + dx * dx / (2.0 * vx));
                gy += gi * mv * (-0.5 + dy * dy / (2.0 * vy));
            }
            vec![(*lvx, vec![gx]), (*lvy, vec![gy])]
        }
    }
}
