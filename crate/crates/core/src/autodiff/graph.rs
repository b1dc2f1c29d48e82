use super::kernels::{ConvGeom, Resampler, UpsamplePlan};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Linear,
}

#[derive(Debug, Clone, Copy)]
enum Bcast {
    Same,
    /// Left operand is a scalar.
    ScalarL,
    ScalarR,
    /// Left operand is a `[C]` vector against a `[C, ...]` grid.
    ChannelL(usize),
    ChannelR(usize),
}

impl Bcast {
    #[inline]
    fn left(self, i: usize) -> usize {
        match self {
            Bcast::Same | Bcast::ScalarR | Bcast::ChannelR(_) => i,
            Bcast::ScalarL => 0,
            Bcast::ChannelL(inner) => i / inner,
        }
    }

    #[inline]
    fn right(self, i: usize) -> usize {
        match self {
            Bcast::Same | Bcast::ScalarL | Bcast::ChannelL(_) => i,
            Bcast::ScalarR => 0,
            Bcast::ChannelR(inner) => i / inner,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum UnKind {
    Exp,
    Log,
    Square,
    Sqrt,
    Neg,
    LeakyRelu(f64),
}

enum Op {
    Leaf,
    Binary(BinKind, Var, Var, Bcast),
    Unary(UnKind, Var),
    Sum(Var),
    LogSumExp(Var),
    Conv {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Upsample {
        x: Var,
        plan: UpsamplePlan,
        channels: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Resample {
        src: Var,
        coords: Var,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Diff {
        x: Var,
        axis: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Tape of forward values. Nodes are appended in evaluation order, so the
/// graph is acyclic by construction.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every node that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `v`, zeros when `v` does not influence the root.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g.clone()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn spatial(shape: &[usize]) -> &[usize] {
    &shape[1..]
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(T::lit(value)))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn bcast(&self, a: Var, b: Var, what: &str) -> Result<(Bcast, Vec<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        if sa == sb {
            return Ok((Bcast::Same, sa.to_vec()));
        }
        if na == 1 && sa.len() <= 1 {
            return Ok((Bcast::ScalarL, sb.to_vec()));
        }
        if nb == 1 && sb.len() <= 1 {
            return Ok((Bcast::ScalarR, sa.to_vec()));
        }
        if sa.len() == 1 && sb.len() > 1 && sb[0] == sa[0] {
            return Ok((Bcast::ChannelL(nb / na), sb.to_vec()));
        }
        if sb.len() == 1 && sa.len() > 1 && sa[0] == sb[0] {
            return Ok((Bcast::ChannelR(na / nb), sa.to_vec()));
        }
        Err(Error::Shape(format!("{what}: cannot broadcast {sa:?} with {sb:?}")))
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (bc, shape) = self.bcast(a, b, &format!("{kind:?}"))?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let f = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let data = (0..n).map(|i| f(xa[bc.left(i)], xb[bc.right(i)])).collect();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Binary(kind, a, b, bc), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    /// `a * c` for a literal `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.mul(a, s)
    }

    /// `a + c` for a literal `c`.
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.add(a, s)
    }

    fn unary(&mut self, kind: UnKind, x: Var) -> Var {
        let xv = self.value(x);
        let f = |v: T| match kind {
            UnKind::Exp => v.exp(),
            UnKind::Log => v.ln(),
            UnKind::Square => v * v,
            UnKind::Sqrt => v.sqrt(),
            UnKind::Neg => -v,
            UnKind::LeakyRelu(s) => {
                if v > T::zero() {
                    v
                } else {
                    v * T::lit(s)
                }
            }
        };
        let value = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect());
        self.push(value, Op::Unary(kind, x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnKind::Exp, x)
    }

    /// Natural log. `log 0 = -inf`; entries whose upstream gradient is
    /// exactly zero propagate no gradient, so masked `-inf` terms inside a
    /// log-sum-exp stay finite under differentiation.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnKind::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnKind::Square, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnKind::Sqrt, x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnKind::Neg, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(UnKind::LeakyRelu(slope), x)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Log-sum-exp over the leading (label) axis: `[L, rest..] -> [rest..]`.
    /// Shifted by the per-column max; `-inf` entries are excluded.
    pub fn logsumexp_labels(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::Shape("logsumexp over labels needs a label axis".into()));
        }
        let l = shape[0];
        let rest = self.value(x).numel() / l.max(1);
        let xv = self.value(x).data();
        let mut out = vec![T::neg_infinity(); rest];
        for (r, o) in out.iter_mut().enumerate() {
            let m = (0..l).map(|k| xv[k * rest + r]).fold(T::neg_infinity(), T::max);
            if m == T::neg_infinity() {
                continue;
            }
            let s: T = (0..l).map(|k| (xv[k * rest + r] - m).exp()).sum();
            *o = m + s.ln();
        }
        Ok(self.push(Tensor::from_parts(shape[1..].to_vec(), out), Op::LogSumExp(x), &[x]))
    }

    /// Zero-padded "same" correlation. `x: [Cin, sp..]`, `w: [Cout, Cin, k..]`;
    /// output `[Cout, ceil(sp / stride)..]`.
    pub fn conv(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let d = sx.len().saturating_sub(1);
        if !(2..=3).contains(&d) || sw.len() != d + 2 || sw[1] != sx[0] {
            return Err(Error::Shape(format!("conv: input {sx:?} vs kernel {sw:?}")));
        }
        if stride == 0 || sw[2..].iter().any(|k| k % 2 == 0) {
            return Err(Error::Shape("conv: kernels must be odd and stride positive".into()));
        }
        let geom = ConvGeom::new(sx[0], sw[0], spatial(&sx), &sw[2..], stride);
        let mut out_shape = vec![sw[0]];
        out_shape.extend_from_slice(&geom.out_sp[3 - d..]);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        super::kernels::conv_forward(&geom, self.value(x).data(), self.value(w).data(), &mut out);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Conv { x, w, geom }, &[x, w]))
    }

    /// Upsamples the spatial axes of `[C, sp..]` by `factor` onto `out_sp`.
    /// Output index `i` samples input coordinate `i / factor` (clamped).
    pub fn upsample(&mut self, x: Var, factor: usize, out_sp: &[usize], mode: UpsampleMode) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != out_sp.len() + 1 || factor == 0 {
            return Err(Error::Shape(format!("upsample: {sx:?} onto {out_sp:?}")));
        }
        let plan = UpsamplePlan::new(spatial(&sx), out_sp, factor, mode == UpsampleMode::Linear);
        let out = plan.forward(sx[0], self.value(x).data());
        let mut shape = vec![sx[0]];
        shape.extend_from_slice(out_sp);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Upsample {
                x,
                plan,
                channels: sx[0],
            },
            &[x],
        ))
    }

    /// Per-channel max over all spatial positions: `[C, sp..] -> [C]`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::Shape(format!("global_max_pool: {sx:?}")));
        }
        let inner = self.value(x).numel() / sx[0];
        let xv = self.value(x).data();
        let mut argmax = Vec::with_capacity(sx[0]);
        let mut out = Vec::with_capacity(sx[0]);
        for c in 0..sx[0] {
            let row = &xv[c * inner..(c + 1) * inner];
            let (mut bi, mut bv) = (0, row[0]);
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > bv {
                    bi = i;
                    bv = v;
                }
            }
            argmax.push(bi);
            out.push(bv);
        }
        Ok(self.push(Tensor::from_parts(vec![sx[0]], out), Op::MaxPool { x, argmax }, &[x]))
    }

    /// Multilinear sampling of `src: [C, sp..]` at `coords: [D, out_sp..]`
    /// (voxel units, one channel per source axis), clamped to the domain.
    pub fn grid_resample(&mut self, src: Var, coords: Var) -> Result<Var> {
        let (ss, sc) = (self.shape(src).to_vec(), self.shape(coords).to_vec());
        let d = ss.len().saturating_sub(1);
        if !(2..=3).contains(&d) || sc.len() != d + 1 || sc[0] != d {
            return Err(Error::Shape(format!("grid_resample: source {ss:?} with coordinates {sc:?}")));
        }
        if ss[1..].iter().any(|&n| n < 2) {
            return Err(Error::Shape("grid_resample: source axes need 2+ samples".into()));
        }
        let n_out: usize = sc[1..].iter().product();
        let r = Resampler {
            src_sp: &ss[1..],
            channels: ss[0],
            n_out,
        };
        let out = r.forward(self.value(src).data(), self.value(coords).data());
        let mut shape = vec![ss[0]];
        shape.extend_from_slice(&sc[1..]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Resample { src, coords }, &[src, coords]))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::Shape(format!("concat: {s:?} vs {first:?}")));
            }
            lead += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = first;
        shape[0] = lead;
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(xs.to_vec()), xs))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() || start + len > sx[0] || len == 0 {
            return Err(Error::Shape(format!("slice {start}..{} of {sx:?}", start + len)));
        }
        let inner = self.value(x).numel() / sx[0];
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = sx;
        shape[0] = len;
        Ok(self.push(Tensor::from_parts(shape, data), Op::Slice { x, start }, &[x]))
    }

    /// Picks rows of the leading axis: `out[i] = x[index[i]]`.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() || index.iter().any(|&i| i >= sx[0]) {
            return Err(Error::Shape(format!("gather {index:?} from {sx:?}")));
        }
        let inner = self.value(x).numel() / sx[0];
        let xv = self.value(x).data();
        let data = index
            .iter()
            .flat_map(|&i| xv[i * inner..(i + 1) * inner].iter().copied())
            .collect();
        let mut shape = sx;
        shape[0] = index.len();
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// Forward difference `x[i + 1] - x[i]` along tensor axis `axis`.
    pub fn forward_diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || sx[axis] < 2 {
            return Err(Error::Shape(format!("forward_diff along {axis} of {sx:?}")));
        }
        let outer: usize = sx[..axis].iter().product();
        let n = sx[axis];
        let inner: usize = sx[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (n - 1) * inner);
        for o in 0..outer {
            for i in 0..n - 1 {
                let a = (o * n + i) * inner;
                let b = a + inner;
                out.extend((0..inner).map(|r| xv[b + r] - xv[a + r]));
            }
        }
        let mut shape = sx;
        shape[axis] = n - 1;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Diff { x, axis }, &[x]))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b, bc) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let ga = slot(grads, *a, xa.len());
                    for (i, &gi) in g.iter().enumerate() {
                        let (ia, ib) = (bc.left(i), bc.right(i));
                        ga[ia] += match kind {
                            BinKind::Add | BinKind::Sub => gi,
                            BinKind::Mul => gi * xb[ib],
                            BinKind::Div => gi / xb[ib],
                        };
                    }
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, xb.len());
                    for (i, &gi) in g.iter().enumerate() {
                        let (ia, ib) = (bc.left(i), bc.right(i));
                        gb[ib] += match kind {
                            BinKind::Add => gi,
                            BinKind::Sub => -gi,
                            BinKind::Mul => gi * xa[ia],
                            BinKind::Div => -gi * xa[ia] / (xb[ib] * xb[ib]),
                        };
                    }
                }
            }
            Op::Unary(kind, x) => {
                let xv = self.value(*x).data();
                let gx = slot(grads, *x, xv.len());
                let two = T::lit(2.0);
                for i in 0..g.len() {
                    let gi = g[i];
                    gx[i] += match *kind {
                        UnKind::Exp => gi * y[i],
                        UnKind::Log => {
                            if gi == T::zero() {
                                T::zero()
                            } else {
                                gi / xv[i]
                            }
                        }
                        UnKind::Square => two * xv[i] * gi,
                        UnKind::Sqrt => gi / (two * y[i]),
                        UnKind::Neg => -gi,
                        UnKind::LeakyRelu(s) => {
                            if xv[i] > T::zero() {
                                gi
                            } else {
                                gi * T::lit(s)
                            }
                        }
                    };
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                let gx = slot(grads, *x, n);
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }
            Op::LogSumExp(x) => {
                let xv = self.value(*x).data();
                let rest = y.len();
                let gx = slot(grads, *x, xv.len());
                for r in 0..rest {
                    if y[r] == T::neg_infinity() || g[r] == T::zero() {
                        continue;
                    }
                    let mut k = r;
                    while k < xv.len() {
                        gx[k] += g[r] * (xv[k] - y[r]).exp();
                        k += rest;
                    }
                }
            }
            Op::Conv { x, w, geom } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut gx_buf = self.wants(*x).then(|| take_slot(grads, *x, xv.len()));
                let mut gw_buf = self.wants(*w).then(|| take_slot(grads, *w, wv.len()));
                super::kernels::conv_backward(
                    geom,
                    xv,
                    wv,
                    g,
                    gx_buf.as_deref_mut(),
                    gw_buf.as_deref_mut(),
                );
                if let Some(b) = gx_buf {
                    grads[x.0] = Some(b);
                }
                if let Some(b) = gw_buf {
                    grads[w.0] = Some(b);
                }
            }
            Op::Upsample { x, plan, channels } => {
                let n = self.value(*x).numel();
                let gx = slot(grads, *x, n);
                plan.backward(*channels, g, gx);
            }
            Op::MaxPool { x, argmax } => {
                let n = self.value(*x).numel();
                let inner = n / argmax.len();
                let gx = slot(grads, *x, n);
                for (c, &a) in argmax.iter().enumerate() {
                    gx[c * inner + a] += g[c];
                }
            }
            Op::Resample { src, coords } => {
                let (sv, cv) = (self.value(*src), self.value(*coords));
                let r = Resampler {
                    src_sp: &sv.shape()[1..],
                    channels: sv.shape()[0],
                    n_out: cv.numel() / cv.shape()[0],
                };
                let mut gs = self.wants(*src).then(|| take_slot(grads, *src, sv.numel()));
                let mut gc = self.wants(*coords).then(|| take_slot(grads, *coords, cv.numel()));
                r.backward(sv.data(), cv.data(), g, gs.as_deref_mut(), gc.as_deref_mut());
                if let Some(b) = gs {
                    grads[src.0] = Some(b);
                }
                if let Some(b) = gc {
                    grads[coords.0] = Some(b);
                }
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).numel();
                    if self.wants(x) {
                        let gx = slot(grads, x, n);
                        for (a, &b) in gx.iter_mut().zip(&g[off..off + n]) {
                            *a += b;
                        }
                    }
                    off += n;
                }
            }
            Op::Slice { x, start } => {
                let xv = self.value(*x);
                let inner = xv.numel() / xv.shape()[0];
                let gx = slot(grads, *x, xv.numel());
                for (a, &b) in gx[start * inner..].iter_mut().zip(g) {
                    *a += b;
                }
            }
            Op::Gather { x, index } => {
                let xv = self.value(*x);
                let inner = xv.numel() / xv.shape()[0];
                let gx = slot(grads, *x, xv.numel());
                for (k, &i) in index.iter().enumerate() {
                    for r in 0..inner {
                        gx[i * inner + r] += g[k * inner + r];
                    }
                }
            }
            Op::Diff { x, axis } => {
                let sx = self.shape(*x);
                let outer: usize = sx[..*axis].iter().product();
                let n = sx[*axis];
                let inner: usize = sx[axis + 1..].iter().product();
                let gx = slot(grads, *x, self.value(*x).numel());
                let mut k = 0;
                for o in 0..outer {
                    for i in 0..n - 1 {
                        let a = (o * n + i) * inner;
                        for r in 0..inner {
                            gx[a + inner + r] += g[k];
                            gx[a + r] -= g[k];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn take_slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> Vec<T> {
    grads[v.0].take().unwrap_or_else(|| vec![T::zero(); n])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, d.to_vec()).unwrap()
    }

    #[test]
    fn identity_root_has_unit_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let grads = g.backward(x).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx);
        assert_eq!(g.backward(s).unwrap().wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn leaky_relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[-2.0, 3.0]));
        let y = g.leaky_relu(x, 0.2);
        assert_eq!(g.value(y).data(), &[-0.4, 3.0]);
    }

    #[test]
    fn logsumexp_of_normalized_logs_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 1], &[0.3f64.ln(), 0.7f64.ln()]));
        let y = g.logsumexp_labels(x).unwrap();
        assert!(g.value(y).item().abs() < 1e-15);
    }

    #[test]
    fn logsumexp_is_shift_safe() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3, 1], &[1000.0, 1001.0, 999.0]));
        let y = g.logsumexp_labels(x).unwrap();
        let base = {
            let mut h = Graph::<f64>::new();
            let x = h.constant(t(&[3, 1], &[0.0, 1.0, -1.0]));
            let y = h.logsumexp_labels(x).unwrap();
            h.value(y).item()
        };
        assert!((g.value(y).item() - (base + 1000.0)).abs() < 1e-12);
    }

    #[test]
    fn delta_kernel_conv_is_identity() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..20).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = g.constant(t(&[1, 4, 5], &data));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(t(&[1, 1, 3, 3], &k));
        let y = g.conv(x, w, 1).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn stride_two_conv_output_is_ceil_half() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 5, 6]));
        let w = g.constant(Tensor::zeros(&[3, 2, 3, 3]));
        let y = g.conv(x, w, 2).unwrap();
        assert_eq!(g.shape(y), &[3, 3, 3]);
    }

    #[test]
    fn shape_mismatch_is_a_construction_error() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, b).is_err());
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(g.mul(a, c).is_err());
        let w = g.constant(Tensor::zeros(&[1, 4, 3, 3]));
        let x = g.constant(Tensor::zeros(&[2, 4, 4]));
        assert!(g.conv(x, w, 1).is_err());
    }

    #[test]
    fn channel_broadcast() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2], &[10.0, 20.0]));
        let y = g.add(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 12.0, 23.0, 24.0]);
    }
}
