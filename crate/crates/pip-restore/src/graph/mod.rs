//! Reverse-mode autodiff on a recorded tape.
//!
//! A [`Graph`] is a Wengert list: every operation appends a node holding its
//! output values plus a record of how it was produced. Node creation order
//! is a topological order by construction, so the backward pass is a single
//! reverse sweep that visits each node exactly once and accumulates input
//! gradients in a fixed order — bit-identical across repeats and runs.
//!
//! Graphs are rebuilt per forward pass (define-by-run). Trainable tensors
//! live in a [`ParamStore`](crate::params::ParamStore) outside the graph and
//! are bound in as leaves each pass; gradients are read back out by
//! [`ParamId`].
//!
//! Every forward op validates shapes and checks its output for NaN/Inf —
//! non-finite values are a hard error, not a warning.

mod conv;
mod matrix;

use crate::error::Error;
use crate::num::Scalar;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{fmt_shape, numel, Tensor};
use crate::Result;

/// Handle to a node in a [`Graph`]. Cheap to copy; only valid for the graph
/// that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum UnKind<T> {
    AddC(T),
    MulC(T),
    /// max(x, c): subgradient 0 exactly at the kink.
    MaxC(T),
    Clamp(T, T),
    Gelu,
    Abs,
    Sqrt,
    Acos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ReduceKind {
    Sum,
    Mean,
}

/// How a node was produced. Variants carry whatever the backward pass needs
/// beyond the nodes themselves (e.g. layernorm's per-position statistics).
#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Bin(BinKind, Var, Var),
    Un(UnKind<T>, Var),
    Reduce(ReduceKind, Var),
    Matmul(Var, Var),
    /// `a · bᵀ` with both operands row-major `[rows, k]`.
    MatmulNT(Var, Var),
    SoftmaxRows(Var),
    CrossEntropyLogits { x: Var, label: usize, probs: Vec<T> },
    LayerNormChw { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Conv1x1 { x: Var, w: Var, b: Option<Var> },
    Conv3x3 { x: Var, w: Var, b: Option<Var>, stride: usize },
    DwConv3x3 { x: Var, w: Var, b: Option<Var> },
    GlobalAvgPool(Var),
    AdaptiveAvgPool(Var),
    NearestUpsample(Var),
    BroadcastChw(Var),
    Reshape(Var),
    ConcatCh(Vec<Var>),
    Row { x: Var, row: usize },
    ScaleBy { x: Var, s: Var },
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recorded computation. See the module docs for the execution model.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: Vec<(ParamId, Var)>,
    grad_enabled: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), bound: Vec::new(), grad_enabled: true }
    }

    /// Inference-mode graph: parameter leaves are treated as constants, so
    /// the backward pass has nothing to do and activations carry no
    /// gradient bookkeeping.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), bound: Vec::new(), grad_enabled: false }
    }

    // ── node plumbing ────────────────────────────────────────────────────

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        op: Op<T>,
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), data.len());
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node { shape, data, grad: None, requires_grad, op });
        Ok(Var((self.nodes.len() - 1) as u32))
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.idx()].requires_grad
    }

    /// Shape of a node.
    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.idx()].shape
    }

    /// Forward values of a node.
    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.idx()].data
    }

    /// Gradient of a node, if the backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.idx()].grad.as_deref()
    }

    /// Copy a node out into a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.idx()];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape/data consistent")
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── leaves ───────────────────────────────────────────────────────────

    /// Constant leaf: no gradient flows into it.
    pub fn input(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.push("input", t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    /// Constant leaf from raw parts.
    pub fn input_from(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "input",
                format!("shape {} wants {} elements, got {}", fmt_shape(&shape), numel(&shape), data.len()),
            ));
        }
        self.push("input", shape, data, false, Op::Leaf)
    }

    /// Scalar constant leaf (shape `[]`).
    pub fn scalar(&mut self, v: T) -> Result<Var> {
        self.push("scalar", vec![], vec![v], false, Op::Leaf)
    }

    /// Bind one parameter as a gradient-carrying leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let t = store.get(id);
        let v = self.push("param", t.shape().to_vec(), t.data().to_vec(), t.requires_grad, Op::Leaf)?;
        self.bound.push((id, v));
        Ok(v)
    }

    /// Bind every parameter in the store, in registration order. The result
    /// is indexable by [`ParamId`].
    pub fn bind(&mut self, store: &ParamStore<T>) -> Result<Bound> {
        let mut vars = Vec::with_capacity(store.len());
        for i in 0..store.len() {
            vars.push(self.param(store, ParamId(i))?);
        }
        Ok(Bound(vars))
    }

    /// Gradient of a bound parameter from the most recent backward pass.
    pub fn param_grad(&self, id: ParamId) -> Option<&[T]> {
        let (_, v) = self.bound.iter().find(|(p, _)| *p == id)?;
        self.grad(*v)
    }

    /// `(param, leaf)` pairs in binding order.
    pub fn bound_params(&self) -> &[(ParamId, Var)] {
        &self.bound
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Seeds `d loss/d loss = 1`, then
    /// visits nodes in reverse creation order (= reverse topological order),
    /// each exactly once. Does not clear existing gradients; call
    /// [`Graph::zero_grads`] first to re-run from scratch.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = &self.nodes[loss.idx()];
        if n.data.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {}", fmt_shape(&n.shape)),
            ));
        }
        if !n.requires_grad {
            // Loss does not depend on any parameter; nothing to do.
            return Ok(());
        }
        {
            let g = self.take_grad_buf(loss);
            let mut g = g;
            g[0] += T::one();
            self.nodes[loss.idx()].grad = Some(g);
        }
        for i in (0..=loss.idx()).rev() {
            self.backprop_node(i)?;
        }
        Ok(())
    }

    /// Clear every gradient buffer (parameter tensors outside the graph are
    /// untouched).
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn backprop_node(&mut self, i: usize) -> Result<()> {
        if self.nodes[i].grad.is_none() || matches!(self.nodes[i].op, Op::Leaf) {
            return Ok(());
        }
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let gout = self.nodes[i].grad.take().expect("checked above");
        let out = Var(i as u32);
        match &op {
            Op::Leaf => unreachable!(),
            Op::Bin(kind, a, b) => self.bw_bin(*kind, *a, *b, out, &gout),
            Op::Un(kind, a) => self.bw_un(*kind, *a, out, &gout),
            Op::Reduce(kind, a) => self.bw_reduce(*kind, *a, &gout),
            Op::Matmul(a, b) => self.bw_matmul(*a, *b, &gout),
            Op::MatmulNT(a, b) => self.bw_matmul_nt(*a, *b, &gout),
            Op::SoftmaxRows(a) => self.bw_softmax_rows(*a, out, &gout),
            Op::CrossEntropyLogits { x, label, probs } => {
                self.bw_cross_entropy(*x, *label, probs, &gout)
            }
            Op::LayerNormChw { x, gamma, beta, mean, rstd } => {
                self.bw_layernorm_chw(*x, *gamma, *beta, mean, rstd, &gout)
            }
            Op::Conv1x1 { x, w, b } => self.bw_conv1x1(*x, *w, *b, &gout),
            Op::Conv3x3 { x, w, b, stride } => self.bw_conv3x3(*x, *w, *b, *stride, out, &gout),
            Op::DwConv3x3 { x, w, b } => self.bw_dwconv3x3(*x, *w, *b, &gout),
            Op::GlobalAvgPool(a) => self.bw_global_avg_pool(*a, &gout),
            Op::AdaptiveAvgPool(a) => self.bw_adaptive_avg_pool(*a, out, &gout),
            Op::NearestUpsample(a) => self.bw_nearest_upsample(*a, out, &gout),
            Op::BroadcastChw(a) => self.bw_broadcast_chw(*a, out, &gout),
            Op::Reshape(a) => self.bw_passthrough(*a, &gout),
            Op::ConcatCh(parts) => self.bw_concat_channels(parts, &gout),
            Op::Row { x, row } => self.bw_row(*x, *row, &gout),
            Op::ScaleBy { x, s } => self.bw_scale_by(*x, *s, &gout),
        }
        self.nodes[i].grad = Some(gout);
        self.nodes[i].op = op;
        Ok(())
    }

    /// Take a node's gradient buffer out (allocating zeros on first touch)
    /// so contributions can be accumulated while the graph stays readable.
    fn take_grad_buf(&mut self, v: Var) -> Vec<T> {
        let n = self.nodes[v.idx()].data.len();
        self.nodes[v.idx()].grad.take().unwrap_or_else(|| vec![T::zero(); n])
    }

    fn put_grad(&mut self, v: Var, g: Vec<T>) {
        self.nodes[v.idx()].grad = Some(g);
    }

    // ── elementwise binary (with trailing size-1 broadcast) ──────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Div, a, b)
    }

    fn bin(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let name = bin_name(kind);
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let n = numel(&out_shape);
        let ad = &self.nodes[a.idx()].data;
        let bd = &self.nodes[b.idx()].data;
        let f = bin_fn::<T>(kind);
        let mut data = Vec::with_capacity(n);
        if sa == sb {
            data.extend(ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)));
        } else {
            let stra = broadcast_strides(&out_shape, &sa);
            let strb = broadcast_strides(&out_shape, &sb);
            data.resize(n, T::zero());
            for_each_offset_pair(&out_shape, &stra, &strb, |i, oa, ob| {
                data[i] = f(ad[oa], bd[ob]);
            });
        }
        let req = self.req(a) || self.req(b);
        self.push(name, out_shape, data, req, Op::Bin(kind, a, b))
    }

    fn bw_bin(&mut self, kind: BinKind, a: Var, b: Var, out: Var, gout: &[T]) {
        let out_shape = self.shape(out).to_vec();
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let stra = broadcast_strides(&out_shape, &sa);
        let strb = broadcast_strides(&out_shape, &sb);
        // One input at a time: the same node may appear on both sides.
        if self.req(a) {
            let mut ga = self.take_grad_buf(a);
            {
                let bd = &self.nodes[b.idx()].data;
                match kind {
                    BinKind::Add | BinKind::Sub => {
                        for_each_offset_pair(&out_shape, &stra, &strb, |i, oa, _| ga[oa] += gout[i])
                    }
                    BinKind::Mul => for_each_offset_pair(&out_shape, &stra, &strb, |i, oa, ob| {
                        ga[oa] += gout[i] * bd[ob]
                    }),
                    BinKind::Div => for_each_offset_pair(&out_shape, &stra, &strb, |i, oa, ob| {
                        ga[oa] += gout[i] / bd[ob]
                    }),
                }
            }
            self.put_grad(a, ga);
        }
        if self.req(b) {
            let mut gb = self.take_grad_buf(b);
            {
                let ad = &self.nodes[a.idx()].data;
                let bd = &self.nodes[b.idx()].data;
                let od = &self.nodes[out.idx()].data;
                match kind {
                    BinKind::Add => {
                        for_each_offset_pair(&out_shape, &stra, &strb, |i, _, ob| gb[ob] += gout[i])
                    }
                    BinKind::Sub => {
                        for_each_offset_pair(&out_shape, &stra, &strb, |i, _, ob| gb[ob] -= gout[i])
                    }
                    BinKind::Mul => for_each_offset_pair(&out_shape, &stra, &strb, |i, oa, ob| {
                        gb[ob] += gout[i] * ad[oa]
                    }),
                    // d(a/b)/db = -a/b² = -out/b
                    BinKind::Div => for_each_offset_pair(&out_shape, &stra, &strb, |i, _, ob| {
                        gb[ob] -= gout[i] * od[i] / bd[ob]
                    }),
                }
            }
            self.put_grad(b, gb);
        }
    }

    // ── elementwise unary ────────────────────────────────────────────────

    pub fn add_const(&mut self, a: Var, c: T) -> Result<Var> {
        self.un(UnKind::AddC(c), a)
    }

    pub fn mul_const(&mut self, a: Var, c: T) -> Result<Var> {
        self.un(UnKind::MulC(c), a)
    }

    /// Elementwise `max(x, c)` — the hinge used by the decorrelation loss.
    pub fn max_const(&mut self, a: Var, c: T) -> Result<Var> {
        self.un(UnKind::MaxC(c), a)
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes where the input is
    /// inside the interval (inclusive).
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid("clamp", format!("lo {lo} > hi {hi}")));
        }
        self.un(UnKind::Clamp(lo, hi), a)
    }

    /// Gaussian error linear unit (tanh form).
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.un(UnKind::Gelu, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.un(UnKind::Abs, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.un(UnKind::Sqrt, a)
    }

    /// Elementwise arccosine; inputs must already be inside (-1, 1).
    pub fn acos(&mut self, a: Var) -> Result<Var> {
        self.un(UnKind::Acos, a)
    }

    fn un(&mut self, kind: UnKind<T>, a: Var) -> Result<Var> {
        let ad = &self.nodes[a.idx()].data;
        let data: Vec<T> = ad.iter().map(|&x| un_fwd(kind, x)).collect();
        let req = self.req(a);
        let shape = self.shape(a).to_vec();
        self.push(un_name(&kind), shape, data, req, Op::Un(kind, a))
    }

    fn bw_un(&mut self, kind: UnKind<T>, a: Var, out: Var, gout: &[T]) {
        if !self.req(a) {
            return;
        }
        let mut ga = self.take_grad_buf(a);
        {
            let ad = &self.nodes[a.idx()].data;
            let od = &self.nodes[out.idx()].data;
            for i in 0..ga.len() {
                ga[i] += gout[i] * un_deriv(kind, ad[i], od[i]);
            }
        }
        self.put_grad(a, ga);
    }

    // ── reductions ───────────────────────────────────────────────────────

    /// Sum of all elements (scalar output).
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.idx()].data.iter().copied().sum();
        let req = self.req(a);
        self.push("sum", vec![], vec![s], req, Op::Reduce(ReduceKind::Sum, a))
    }

    /// Mean of all elements (scalar output).
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.idx()].data.len();
        if n == 0 {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let s: T = self.nodes[a.idx()].data.iter().copied().sum();
        let m = s / T::of_f64(n as f64);
        let req = self.req(a);
        self.push("mean", vec![], vec![m], req, Op::Reduce(ReduceKind::Mean, a))
    }

    fn bw_reduce(&mut self, kind: ReduceKind, a: Var, gout: &[T]) {
        if !self.req(a) {
            return;
        }
        let mut ga = self.take_grad_buf(a);
        let g = match kind {
            ReduceKind::Sum => gout[0],
            ReduceKind::Mean => gout[0] / T::of_f64(ga.len() as f64),
        };
        for v in ga.iter_mut() {
            *v += g;
        }
        self.put_grad(a, ga);
    }

    // ── structure ────────────────────────────────────────────────────────

    /// View under a new shape with identical element count (data is copied;
    /// gradient passes through unchanged).
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.nodes[a.idx()].data.len() {
            return Err(Error::shape(
                "reshape",
                format!(
                    "cannot view {} as {}",
                    fmt_shape(self.shape(a)),
                    fmt_shape(&shape)
                ),
            ));
        }
        let data = self.nodes[a.idx()].data.clone();
        let req = self.req(a);
        self.push("reshape", shape, data, req, Op::Reshape(a))
    }

    fn bw_passthrough(&mut self, a: Var, gout: &[T]) {
        if !self.req(a) {
            return;
        }
        let mut ga = self.take_grad_buf(a);
        for (g, &go) in ga.iter_mut().zip(gout.iter()) {
            *g += go;
        }
        self.put_grad(a, ga);
    }

    /// Concatenate `[C_i, H, W]` maps along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_channels", "no inputs"));
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 3 {
            return Err(Error::shape(
                "concat_channels",
                format!("want rank-3 [C,H,W], got {}", fmt_shape(&first)),
            ));
        }
        let (h, w) = (first[1], first[2]);
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(Error::shape(
                    "concat_channels",
                    format!("mismatched part {} vs [_, {h}, {w}]", fmt_shape(s)),
                ));
            }
            c_total += s[0];
        }
        let mut data = Vec::with_capacity(c_total * h * w);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.idx()].data);
        }
        let req = parts.iter().any(|&p| self.req(p));
        self.push("concat_channels", vec![c_total, h, w], data, req, Op::ConcatCh(parts.to_vec()))
    }

    fn bw_concat_channels(&mut self, parts: &[Var], gout: &[T]) {
        let mut off = 0;
        for &p in parts {
            let n = self.nodes[p.idx()].data.len();
            if self.req(p) {
                let mut gp = self.take_grad_buf(p);
                for (g, &go) in gp.iter_mut().zip(gout[off..off + n].iter()) {
                    *g += go;
                }
                self.put_grad(p, gp);
            }
            off += n;
        }
    }

    /// Extract row `r` of a `[rows, cols]` matrix as a `[cols]` vector.
    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("row", format!("want rank-2, got {}", fmt_shape(&s))));
        }
        if r >= s[0] {
            return Err(Error::invalid("row", format!("row {r} out of {} rows", s[0])));
        }
        let cols = s[1];
        let data = self.nodes[a.idx()].data[r * cols..(r + 1) * cols].to_vec();
        let req = self.req(a);
        self.push("row", vec![cols], data, req, Op::Row { x: a, row: r })
    }

    fn bw_row(&mut self, a: Var, r: usize, gout: &[T]) {
        if !self.req(a) {
            return;
        }
        let cols = self.shape(a)[1];
        let mut ga = self.take_grad_buf(a);
        for (g, &go) in ga[r * cols..(r + 1) * cols].iter_mut().zip(gout.iter()) {
            *g += go;
        }
        self.put_grad(a, ga);
    }

    /// Multiply a tensor by a learnable scalar (shape `[1]` or `[]`).
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.nodes[s.idx()].data.len() != 1 {
            return Err(Error::shape(
                "scale_by",
                format!("scale must be a single element, got {}", fmt_shape(self.shape(s))),
            ));
        }
        let sv = self.nodes[s.idx()].data[0];
        let data: Vec<T> = self.nodes[x.idx()].data.iter().map(|&v| v * sv).collect();
        let req = self.req(x) || self.req(s);
        let shape = self.shape(x).to_vec();
        self.push("scale_by", shape, data, req, Op::ScaleBy { x, s })
    }

    fn bw_scale_by(&mut self, x: Var, s: Var, gout: &[T]) {
        if self.req(s) {
            let mut gs = self.take_grad_buf(s);
            {
                let xd = &self.nodes[x.idx()].data;
                let mut acc = T::zero();
                for (&go, &xv) in gout.iter().zip(xd.iter()) {
                    acc += go * xv;
                }
                gs[0] += acc;
            }
            self.put_grad(s, gs);
        }
        if self.req(x) {
            let sv = self.nodes[s.idx()].data[0];
            let mut gx = self.take_grad_buf(x);
            for (g, &go) in gx.iter_mut().zip(gout.iter()) {
                *g += go * sv;
            }
            self.put_grad(x, gx);
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameter leaves bound into a graph, indexable by [`ParamId`].
pub struct Bound(Vec<Var>);

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

// ── broadcast helpers ────────────────────────────────────────────────────

fn bin_name(kind: BinKind) -> &'static str {
    match kind {
        BinKind::Add => "add",
        BinKind::Sub => "sub",
        BinKind::Mul => "mul",
        BinKind::Div => "div",
    }
}

fn bin_fn<T: Scalar>(kind: BinKind) -> fn(T, T) -> T {
    match kind {
        BinKind::Add => |a, b| a + b,
        BinKind::Sub => |a, b| a - b,
        BinKind::Mul => |a, b| a * b,
        BinKind::Div => |a, b| a / b,
    }
}

fn un_name<T>(kind: &UnKind<T>) -> &'static str {
    match kind {
        UnKind::AddC(_) => "add_const",
        UnKind::MulC(_) => "mul_const",
        UnKind::MaxC(_) => "max_const",
        UnKind::Clamp(..) => "clamp",
        UnKind::Gelu => "gelu",
        UnKind::Abs => "abs",
        UnKind::Sqrt => "sqrt",
        UnKind::Acos => "acos",
    }
}

fn un_fwd<T: Scalar>(kind: UnKind<T>, x: T) -> T {
    match kind {
        UnKind::AddC(c) => x + c,
        UnKind::MulC(c) => x * c,
        UnKind::MaxC(c) => x.max(c),
        UnKind::Clamp(lo, hi) => x.max(lo).min(hi),
        UnKind::Gelu => gelu_fwd(x),
        UnKind::Abs => x.abs(),
        UnKind::Sqrt => x.sqrt(),
        UnKind::Acos => x.acos(),
    }
}

fn un_deriv<T: Scalar>(kind: UnKind<T>, x: T, y: T) -> T {
    match kind {
        UnKind::AddC(_) => T::one(),
        UnKind::MulC(c) => c,
        UnKind::MaxC(c) => {
            if x > c {
                T::one()
            } else {
                T::zero()
            }
        }
        UnKind::Clamp(lo, hi) => {
            if x >= lo && x <= hi {
                T::one()
            } else {
                T::zero()
            }
        }
        UnKind::Gelu => gelu_deriv(x),
        UnKind::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        UnKind::Sqrt => {
            let two = T::of_f64(2.0);
            T::one() / (two * y)
        }
        UnKind::Acos => -T::one() / (T::one() - x * x).sqrt(),
    }
}

/// tanh-form GELU: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
fn gelu_fwd<T: Scalar>(x: T) -> T {
    let k = T::of_f64(0.7978845608028654); // √(2/π)
    let a = T::of_f64(0.044715);
    let half = T::of_f64(0.5);
    let u = k * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_deriv<T: Scalar>(x: T) -> T {
    let k = T::of_f64(0.7978845608028654);
    let a = T::of_f64(0.044715);
    let half = T::of_f64(0.5);
    let three = T::of_f64(3.0);
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * k * (T::one() + three * a * x * x)
}

/// Shapes must have equal rank; each dim must match or be 1 on one side.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(
            op,
            format!("rank mismatch {} vs {} (no implicit rank promotion)", fmt_shape(a), fmt_shape(b)),
        ));
    }
    a.iter()
        .zip(b.iter())
        .map(|(&da, &db)| {
            if da == db || db == 1 {
                Ok(da.max(db))
            } else if da == 1 {
                Ok(db)
            } else {
                Err(Error::shape(op, format!("cannot broadcast {} with {}", fmt_shape(a), fmt_shape(b))))
            }
        })
        .collect()
}

/// Row-major strides of `shape` as seen from `out_shape`, with 0 where the
/// dimension is broadcast.
fn broadcast_strides(out_shape: &[usize], shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; out_shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 && out_shape[i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Walk every flat index of `out_shape`, handing the callback the matching
/// offsets into the two (possibly broadcast) operands.
fn for_each_offset_pair(
    out_shape: &[usize],
    stra: &[usize],
    strb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let total = numel(out_shape);
    if rank == 0 {
        if total == 1 {
            f(0, 0, 0);
        }
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..total {
        f(i, oa, ob);
        // Odometer increment from the last axis.
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += stra[d];
            ob += strb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= stra[d] * out_shape[d];
            ob -= strb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}
