//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value and enough saved state
//! to run its adjoint. `Tape::backward` walks the nodes in reverse creation
//! order, which is a valid topological order by construction.

use std::cell::RefCell;

use super::{gemm, Elem, Tensor};
use crate::error::{dim_err, Error, Result};

/// One bilinear tap pair along an axis: source indices and their weights.
#[derive(Clone, Copy, Debug)]
pub struct Tap<T> {
    pub i0: usize,
    pub i1: usize,
    pub w0: T,
    pub w1: T,
}

/// Align-corners-false bilinear taps mapping `n_in` samples onto `n_out`.
pub fn bilinear_taps<T: Elem>(n_in: usize, n_out: usize) -> Vec<Tap<T>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            if n_in == n_out {
                return Tap {
                    i0: o,
                    i1: o,
                    w0: T::one(),
                    w1: T::zero(),
                };
            }
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            Tap {
                i0,
                i1,
                w0: T::of(1.0 - l1),
                w1: T::of(l1),
            }
        })
        .collect()
}

/// Nearest-neighbour source index for each of `n_out` samples.
pub fn nearest_index(n_in: usize, n_out: usize) -> Vec<usize> {
    (0..n_out)
        .map(|o| ((o * n_in) / n_out).min(n_in - 1))
        .collect()
}

/// Separable bilinear resample of a `[c,h,w]` buffer.
pub fn resample<T: Elem>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    rows: &[Tap<T>],
    cols: &[Tap<T>],
) -> Vec<T> {
    let (ho, wo) = (rows.len(), cols.len());
    let mut tmp = vec![T::zero(); c * h * wo];
    for ch in 0..c {
        for y in 0..h {
            let src = &x[(ch * h + y) * w..(ch * h + y + 1) * w];
            let dst = &mut tmp[(ch * h + y) * wo..(ch * h + y + 1) * wo];
            for (d, t) in dst.iter_mut().zip(cols) {
                *d = t.w0 * src[t.i0] + t.w1 * src[t.i1];
            }
        }
    }
    let mut out = vec![T::zero(); c * ho * wo];
    for ch in 0..c {
        for (yo, t) in rows.iter().enumerate() {
            let r0 = &tmp[(ch * h + t.i0) * wo..(ch * h + t.i0 + 1) * wo];
            let r1 = &tmp[(ch * h + t.i1) * wo..(ch * h + t.i1 + 1) * wo];
            let dst = &mut out[(ch * ho + yo) * wo..(ch * ho + yo + 1) * wo];
            for ((d, &a), &b) in dst.iter_mut().zip(r0).zip(r1) {
                *d = t.w0 * a + t.w1 * b;
            }
        }
    }
    out
}

fn resample_adjoint<T: Elem>(
    dy: &[T],
    (c, h, w): (usize, usize, usize),
    rows: &[Tap<T>],
    cols: &[Tap<T>],
    dx: &mut [T],
) {
    let (ho, wo) = (rows.len(), cols.len());
    let mut dtmp = vec![T::zero(); c * h * wo];
    for ch in 0..c {
        for (yo, t) in rows.iter().enumerate() {
            let src = &dy[(ch * ho + yo) * wo..(ch * ho + yo + 1) * wo];
            for (xo, &g) in src.iter().enumerate() {
                dtmp[(ch * h + t.i0) * wo + xo] += t.w0 * g;
                dtmp[(ch * h + t.i1) * wo + xo] += t.w1 * g;
            }
        }
    }
    for ch in 0..c {
        for y in 0..h {
            let src = &dtmp[(ch * h + y) * wo..(ch * h + y + 1) * wo];
            let dst = &mut dx[(ch * h + y) * w..(ch * h + y + 1) * w];
            for (&g, t) in src.iter().zip(cols) {
                dst[t.i0] += t.w0 * g;
                dst[t.i1] += t.w1 * g;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

fn im2col<T: Elem>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.c * g.kh * g.kw * hw];
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..(ci * g.h + iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Elem>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw = g.ho * g.wo;
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Sum(usize),
    Reshape(usize),
    Transpose(usize),
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    AddRowBias(usize, usize),
    AddChannelBias(usize, usize),
    Conv2d {
        x: usize,
        k: usize,
        bias: Option<usize>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Silu(usize),
    SoftmaxRows(usize),
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Resize {
        x: usize,
        rows: Vec<Tap<T>>,
        cols: Vec<Tap<T>>,
    },
    Nearest {
        x: usize,
        rows: Vec<usize>,
        cols: Vec<usize>,
    },
    Concat(Vec<usize>),
    Crop {
        x: usize,
        r0: usize,
        c0: usize,
    },
    Place {
        x: usize,
        r0: usize,
        c0: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording context for one differentiable computation.
///
/// A tape is single-threaded; run independent batch elements on separate
/// tapes and reduce their gradients in a fixed order.
pub struct Tape<T: Elem> {
    nodes: RefCell<Vec<Node<T>>>,
    record: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Elem> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Elem> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], retained for leaves only.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Elem> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        let g = self.grads.get(v.id)?.as_ref()?;
        Tensor::new(&self.shapes[v.id], g.clone()).ok()
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Vec<T>> {
        self.grads.get_mut(v.id)?.take()
    }
}

impl<T: Elem> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Tape<T> {
    /// A tape that records everything needed for `backward`.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A forward-only tape: ops skip saving adjoint state.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad && self.record)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        if !self.record {
            return false;
        }
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn value(&self, v: Var<'_, T>) -> Tensor<T> {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn with_value<R>(&self, v: Var<'_, T>, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.id].value)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !self.record {
            return Err(Error::Contract("backward on an inference tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);

        fn slot<'g, T: Elem>(
            grads: &'g mut [Option<Vec<T>>],
            nodes: &[Node<T>],
            id: usize,
        ) -> Option<&'g mut Vec<T>> {
            if !nodes[id].requires_grad {
                return None;
            }
            let len = nodes[id].value.numel();
            Some(grads[id].get_or_insert_with(|| vec![T::zero(); len]))
        }

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    for &p in &[*a, *b] {
                        if let Some(d) = slot(&mut grads, &nodes, p) {
                            add_into(d, &g);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(d) = slot(&mut grads, &nodes, *a) {
                        add_into(d, &g);
                    }
                    if let Some(d) = slot(&mut grads, &nodes, *b) {
                        for (x, &y) in d.iter_mut().zip(&g) {
                            *x -= y;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                    if let Some(d) = slot(&mut grads, &nodes, *a) {
                        for ((x, &y), &o) in d.iter_mut().zip(&g).zip(bv) {
                            *x += y * o;
                        }
                    }
                    if let Some(d) = slot(&mut grads, &nodes, *b) {
                        for ((x, &y), &o) in d.iter_mut().zip(&g).zip(av) {
                            *x += y * o;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    if let Some(d) = slot(&mut grads, &nodes, *a) {
                        for (x, &y) in d.iter_mut().zip(&g) {
                            *x += y * *s;
                        }
                    }
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    if let Some(d) = slot(&mut grads, &nodes, *a) {
                        add_into(d, &g);
                    }
                }
                Op::Sum(a) => {
                    if let Some(d) = slot(&mut grads, &nodes, *a) {
                        for x in d.iter_mut() {
                            *x += g[0];
                        }
                    }
                }
                Op::Transpose(a) => {
                    let s = nodes[*a].value.shape();
                    let (r, c) = (s[0], s[1]);
                    if let Some(d) = slot(&mut grads, &nodes, *a) {
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] += g[j * r + i];
                            }
                        }
                    }
                }
                Op::MatMul {
                    a,
                    b,
                    ta,
                    tb,
                    m,
                    k,
                    n,
                } => {
                    let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                    if let Some(d) = slot(&mut grads, &nodes, *a) {
                        if *ta {
                            // dA (k×m) = op(B) · dCᵀ
                            gemm(*k, *n, *m, bv, *tb, &g, true, d, T::one());
                        } else {
                            // dA (m×k) = dC · op(B)ᵀ
                            gemm(*m, *n, *k, &g, false, bv, !*tb, d, T::one());
                        }
                    }
                    if let Some(d) = slot(&mut grads, &nodes, *b) {
                        if *tb {
                            // dB (n×k) = dCᵀ · op(A)
                            gemm(*n, *m, *k, &g, true, av, *ta, d, T::one());
                        } else {
                            // dB (k×n) = op(A)ᵀ · dC
                            gemm(*k, *m, *n, av, !*ta, &g, false, d, T::one());
                        }
                    }
                }
                Op::AddRowBias(x, b) => {
                    if let Some(d) = slot(&mut grads, &nodes, *x) {
                        add_into(d, &g);
                    }
                    let dim = nodes[*b].value.numel();
                    if let Some(d) = slot(&mut grads, &nodes, *b) {
                        for row in g.chunks(dim) {
                            add_into(d, row);
                        }
                    }
                }
                Op::AddChannelBias(x, b) => {
                    if let Some(d) = slot(&mut grads, &nodes, *x) {
                        add_into(d, &g);
                    }
                    let c = nodes[*b].value.numel();
                    let plane = g.len() / c;
                    if let Some(d) = slot(&mut grads, &nodes, *b) {
                        for (ch, row) in g.chunks(plane).enumerate() {
                            d[ch] += row.iter().copied().sum::<T>();
                        }
                    }
                }
                Op::Conv2d {
                    x,
                    k,
                    bias,
                    geom,
                    cols,
                } => {
                    let co = nodes[*k].value.shape()[0];
                    let kk = geom.c * geom.kh * geom.kw;
                    let hw = geom.ho * geom.wo;
                    if let Some(d) = slot(&mut grads, &nodes, *k) {
                        gemm(co, hw, kk, &g, false, cols, true, d, T::one());
                    }
                    if nodes[*x].requires_grad {
                        let kv = nodes[*k].value.data();
                        let mut dcols = vec![T::zero(); kk * hw];
                        gemm(kk, co, hw, kv, true, &g, false, &mut dcols, T::zero());
                        if let Some(d) = slot(&mut grads, &nodes, *x) {
                            col2im(&dcols, geom, d);
                        }
                    }
                    if let Some(b) = bias {
                        if let Some(d) = slot(&mut grads, &nodes, *b) {
                            for (ch, row) in g.chunks(hw).enumerate() {
                                d[ch] += row.iter().copied().sum::<T>();
                            }
                        }
                    }
                }
                Op::Silu(a) => {
                    let av = nodes[*a].value.data();
                    if let Some(d) = slot(&mut grads, &nodes, *a) {
                        for ((x, &y), &v) in d.iter_mut().zip(&g).zip(av) {
                            let s = sigmoid(v);
                            *x += y * s * (T::one() + v * (T::one() - s));
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let yv = node.value.data();
                    let cols = *node.value.shape().last().unwrap();
                    if let Some(d) = slot(&mut grads, &nodes, *a) {
                        for ((dr, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(yv.chunks(cols)) {
                            let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                            for ((x, &gy), &y) in dr.iter_mut().zip(gr).zip(yr) {
                                *x += y * (gy - dot);
                            }
                        }
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    rstd,
                } => {
                    let (c, h, w) = nodes[*x].value.chw().expect("checked at forward");
                    let plane = h * w;
                    let cg = c / groups;
                    let gv = nodes[*gamma].value.data();
                    if let Some(d) = slot(&mut grads, &nodes, *gamma) {
                        for ch in 0..c {
                            let r = ch * plane..(ch + 1) * plane;
                            d[ch] += g[r.clone()].iter().zip(&xhat[r]).map(|(&a, &b)| a * b).sum::<T>();
                        }
                    }
                    if let Some(d) = slot(&mut grads, &nodes, *beta) {
                        for ch in 0..c {
                            d[ch] += g[ch * plane..(ch + 1) * plane].iter().copied().sum::<T>();
                        }
                    }
                    if nodes[*x].requires_grad {
                        let count = T::of((cg * plane) as f64);
                        let mut dx = vec![T::zero(); c * plane];
                        for grp in 0..*groups {
                            let r = grp * cg * plane..(grp + 1) * cg * plane;
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for i in r.clone() {
                                let dxh = g[i] * gv[i / plane];
                                s1 += dxh;
                                s2 += dxh * xhat[i];
                            }
                            let rs = rstd[grp];
                            for i in r {
                                let dxh = g[i] * gv[i / plane];
                                dx[i] = rs * (dxh - s1 / count - xhat[i] * s2 / count);
                            }
                        }
                        if let Some(d) = slot(&mut grads, &nodes, *x) {
                            add_into(d, &dx);
                        }
                    }
                }
                Op::Resize { x, rows, cols } => {
                    let dims = nodes[*x].value.chw().expect("checked at forward");
                    if let Some(d) = slot(&mut grads, &nodes, *x) {
                        resample_adjoint(&g, dims, rows, cols, d);
                    }
                }
                Op::Nearest { x, rows, cols } => {
                    let (c, h, w) = nodes[*x].value.chw().expect("checked at forward");
                    let (ho, wo) = (rows.len(), cols.len());
                    if let Some(d) = slot(&mut grads, &nodes, *x) {
                        for ch in 0..c {
                            for (yo, &yi) in rows.iter().enumerate() {
                                for (xo, &xi) in cols.iter().enumerate() {
                                    d[(ch * h + yi) * w + xi] += g[(ch * ho + yo) * wo + xo];
                                }
                            }
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = nodes[p].value.numel();
                        if let Some(d) = slot(&mut grads, &nodes, p) {
                            add_into(d, &g[off..off + len]);
                        }
                        off += len;
                    }
                }
                Op::Crop { x, r0, c0 } => {
                    let (c, h, w) = nodes[*x].value.chw().expect("checked at forward");
                    let (_, hh, ww) = node.value.chw().expect("checked at forward");
                    if let Some(d) = slot(&mut grads, &nodes, *x) {
                        for ch in 0..c {
                            for y in 0..hh {
                                for xx in 0..ww {
                                    d[(ch * h + r0 + y) * w + c0 + xx] += g[(ch * hh + y) * ww + xx];
                                }
                            }
                        }
                    }
                }
                Op::Place { x, r0, c0 } => {
                    let (c, hh, ww) = nodes[*x].value.chw().expect("checked at forward");
                    let (_, h, w) = node.value.chw().expect("checked at forward");
                    if let Some(d) = slot(&mut grads, &nodes, *x) {
                        for ch in 0..c {
                            for y in 0..hh {
                                for xx in 0..ww {
                                    d[(ch * hh + y) * ww + xx] += g[(ch * h + r0 + y) * w + c0 + xx];
                                }
                            }
                        }
                    }
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn add_into<T: Elem>(d: &mut [T], g: &[T]) {
    for (x, &y) in d.iter_mut().zip(g) {
        *x += y;
    }
}

fn sigmoid<T: Elem>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<'t, T: Elem> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        self.tape.nodes.borrow()[self.id].value.chw()
    }

    fn unary(self, op: Op<T>, f: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Self> {
        let value = self.tape.with_value(self, f)?;
        let rg = self.tape.needs(&[self.id]);
        Ok(self.tape.push(value, op, rg))
    }

    fn binary_same(self, other: Self, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.zip_map(&nodes[other.id].value, f)?
        };
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, op, rg))
    }

    pub fn add(self, other: Self) -> Result<Self> {
        self.binary_same(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.binary_same(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        self.binary_same(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, s: f64) -> Result<Self> {
        let s = T::of(s);
        self.unary(Op::Scale(self.id, s), |t| Ok(t.map(|x| x * s)))
    }

    pub fn add_scalar(self, s: f64) -> Result<Self> {
        let s = T::of(s);
        self.unary(Op::AddScalar(self.id), |t| Ok(t.map(|x| x + s)))
    }

    pub fn sum(self) -> Result<Self> {
        self.unary(Op::Sum(self.id), |t| Ok(Tensor::scalar(t.sum())))
    }

    pub fn mean(self) -> Result<Self> {
        let n = self.numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn square(self) -> Result<Self> {
        self.mul(self)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        self.unary(Op::Reshape(self.id), |t| t.clone().reshape(shape))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(self) -> Result<Self> {
        self.unary(Op::Transpose(self.id), |t| {
            let s = t.shape();
            if s.len() != 2 {
                return Err(dim_err!("transpose needs rank 2, got {s:?}"));
            }
            let (r, c) = (s[0], s[1]);
            let d = t.data();
            Tensor::new(&[c, r], (0..r * c).map(|i| d[(i % r) * c + i / r]).collect())
        })
    }

    /// `op(self) · op(other)` for rank-2 operands; `ta`/`tb` transpose.
    pub fn matmul_t(self, other: Self, ta: bool, tb: bool) -> Result<Self> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(dim_err!("matmul needs rank 2, got {sa:?} and {sb:?}"));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(dim_err!("matmul inner extents {k} vs {k2}"));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let mut c = vec![T::zero(); m * n];
            gemm(
                m,
                k,
                n,
                nodes[self.id].value.data(),
                ta,
                nodes[other.id].value.data(),
                tb,
                &mut c,
                T::zero(),
            );
            Tensor::new(&[m, n], c)?
        };
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn matmul(self, other: Self) -> Result<Self> {
        self.matmul_t(other, false, false)
    }

    /// `[n, d] + [d]`.
    pub fn add_row_bias(self, b: Self) -> Result<Self> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (x, bv) = (&nodes[self.id].value, &nodes[b.id].value);
            let d = *x.shape().last().unwrap();
            if bv.numel() != d || bv.rank() != 1 {
                return Err(dim_err!("row bias {:?} for input {:?}", bv.shape(), x.shape()));
            }
            let bd = bv.data();
            let data = x.data().chunks(d).flat_map(|row| row.iter().zip(bd).map(|(&a, &c)| a + c)).collect();
            Tensor::new(x.shape(), data)?
        };
        let rg = self.tape.needs(&[self.id, b.id]);
        Ok(self.tape.push(value, Op::AddRowBias(self.id, b.id), rg))
    }

    /// `[c, h, w] + [c]` broadcast over the spatial plane.
    pub fn add_channel_bias(self, b: Self) -> Result<Self> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (x, bv) = (&nodes[self.id].value, &nodes[b.id].value);
            let (c, h, w) = x.chw()?;
            if bv.numel() != c || bv.rank() != 1 {
                return Err(dim_err!("channel bias {:?} for input {:?}", bv.shape(), x.shape()));
            }
            let bd = bv.data();
            let plane = h * w;
            let data = x.data().iter().enumerate().map(|(i, &a)| a + bd[i / plane]).collect();
            Tensor::new(x.shape(), data)?
        };
        let rg = self.tape.needs(&[self.id, b.id]);
        Ok(self.tape.push(value, Op::AddChannelBias(self.id, b.id), rg))
    }

    /// Cross-correlation of `[c_in,h,w]` with `[c_out,c_in,kh,kw]`.
    pub fn conv2d(self, k: Self, bias: Option<Self>, stride: usize, pad: usize) -> Result<Self> {
        let tape = self.tape;
        let (value, geom, cols) = {
            let nodes = tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let kv = &nodes[k.id].value;
            let (c, h, w) = x.chw()?;
            let [co, ci, kh, kw] = kv.shape()[..] else {
                return Err(dim_err!("kernel must be rank 4, got {:?}", kv.shape()));
            };
            if ci != c {
                return Err(dim_err!("kernel expects {ci} input channels, input has {c}"));
            }
            if stride == 0 {
                return Err(dim_err!("stride must be positive"));
            }
            let (ph, pw) = (h + 2 * pad, w + 2 * pad);
            if kh > ph || kw > pw {
                return Err(dim_err!("kernel {kh}x{kw} exceeds padded input {ph}x{pw}"));
            }
            if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
                return Err(dim_err!(
                    "non-integral output extent for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
                ));
            }
            let geom = ConvGeom {
                c,
                h,
                w,
                kh,
                kw,
                stride,
                pad,
                ho: (ph - kh) / stride + 1,
                wo: (pw - kw) / stride + 1,
            };
            let cols = im2col(x.data(), &geom);
            let hw = geom.ho * geom.wo;
            let mut out = vec![T::zero(); co * hw];
            gemm(co, c * kh * kw, hw, kv.data(), false, &cols, false, &mut out, T::zero());
            if let Some(b) = bias {
                let bv = &nodes[b.id].value;
                if bv.numel() != co {
                    return Err(dim_err!("conv bias has {} entries for {co} outputs", bv.numel()));
                }
                for (ch, row) in out.chunks_mut(hw).enumerate() {
                    let bc = bv.data()[ch];
                    for v in row {
                        *v += bc;
                    }
                }
            }
            (Tensor::new(&[co, geom.ho, geom.wo], out)?, geom, cols)
        };
        let mut ids = vec![self.id, k.id];
        ids.extend(bias.map(|b| b.id));
        let rg = tape.needs(&ids);
        let cols = if rg { cols } else { Vec::new() };
        Ok(tape.push(
            value,
            Op::Conv2d {
                x: self.id,
                k: k.id,
                bias: bias.map(|b| b.id),
                geom,
                cols,
            },
            rg,
        ))
    }

    pub fn silu(self) -> Result<Self> {
        self.unary(Op::Silu(self.id), |t| Ok(t.map(|v| v * sigmoid(v))))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(self) -> Result<Self> {
        self.unary(Op::SoftmaxRows(self.id), |t| {
            let cols = *t.shape().last().unwrap();
            let mut out = t.data().to_vec();
            for row in out.chunks_mut(cols) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v = *v / s;
                }
            }
            Tensor::new(t.shape(), out)
        })
    }

    pub fn group_norm(self, gamma: Self, beta: Self, groups: usize, eps: f64) -> Result<Self> {
        let tape = self.tape;
        let (value, xhat, rstd) = {
            let nodes = tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let (c, h, w) = x.chw()?;
            if groups == 0 || c % groups != 0 {
                return Err(dim_err!("{c} channels not divisible into {groups} groups"));
            }
            let (gv, bv) = (nodes[gamma.id].value.data(), nodes[beta.id].value.data());
            if gv.len() != c || bv.len() != c {
                return Err(dim_err!("group norm affine params must have {c} entries"));
            }
            let plane = h * w;
            let per = c / groups * plane;
            let xd = x.data();
            let mut xhat = vec![T::zero(); xd.len()];
            let mut rstd = Vec::with_capacity(groups);
            let inv = T::one() / T::of(per as f64);
            for g in 0..groups {
                let r = g * per..(g + 1) * per;
                let mean = xd[r.clone()].iter().copied().sum::<T>() * inv;
                let var = xd[r.clone()].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv;
                let rs = T::one() / (var + T::of(eps)).sqrt();
                for i in r {
                    xhat[i] = (xd[i] - mean) * rs;
                }
                rstd.push(rs);
            }
            let out = xhat.iter().enumerate().map(|(i, &v)| gv[i / plane] * v + bv[i / plane]).collect();
            (Tensor::new(x.shape(), out)?, xhat, rstd)
        };
        let rg = tape.needs(&[self.id, gamma.id, beta.id]);
        let (xhat, rstd) = if rg { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(tape.push(
            value,
            Op::GroupNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                groups,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Align-corners-false bilinear resize of `[c,h,w]` to `[c,ho,wo]`.
    pub fn resize(self, ho: usize, wo: usize) -> Result<Self> {
        if ho == 0 || wo == 0 {
            return Err(dim_err!("resize target must be at least 1x1"));
        }
        let (c, h, w) = self.chw()?;
        let rows = bilinear_taps::<T>(h, ho);
        let cols = bilinear_taps::<T>(w, wo);
        let value = self.tape.with_value(self, |t| {
            if h == ho && w == wo {
                return Ok(t.clone());
            }
            Tensor::new(&[c, ho, wo], resample(t.data(), (c, h, w), &rows, &cols))
        })?;
        let rg = self.tape.needs(&[self.id]);
        Ok(self.tape.push(value, Op::Resize { x: self.id, rows, cols }, rg))
    }

    pub fn resize_nearest(self, ho: usize, wo: usize) -> Result<Self> {
        if ho == 0 || wo == 0 {
            return Err(dim_err!("resize target must be at least 1x1"));
        }
        let (c, h, w) = self.chw()?;
        let rows = nearest_index(h, ho);
        let cols = nearest_index(w, wo);
        let value = self.tape.with_value(self, |t| {
            let d = t.data();
            let mut out = Vec::with_capacity(c * ho * wo);
            for ch in 0..c {
                for &yi in &rows {
                    for &xi in &cols {
                        out.push(d[(ch * h + yi) * w + xi]);
                    }
                }
            }
            Tensor::new(&[c, ho, wo], out)
        })?;
        let rg = self.tape.needs(&[self.id]);
        Ok(self.tape.push(value, Op::Nearest { x: self.id, rows, cols }, rg))
    }

    /// Sub-grid `[c, r0..r0+hh, c0..c0+ww]`.
    pub fn crop(self, r0: usize, c0: usize, hh: usize, ww: usize) -> Result<Self> {
        let (c, h, w) = self.chw()?;
        if hh == 0 || ww == 0 || r0 + hh > h || c0 + ww > w {
            return Err(dim_err!("crop {hh}x{ww} at ({r0},{c0}) outside {h}x{w}"));
        }
        self.unary(Op::Crop { x: self.id, r0, c0 }, |t| {
            let d = t.data();
            let mut out = Vec::with_capacity(c * hh * ww);
            for ch in 0..c {
                for y in 0..hh {
                    let base = (ch * h + r0 + y) * w + c0;
                    out.extend_from_slice(&d[base..base + ww]);
                }
            }
            Tensor::new(&[c, hh, ww], out)
        })
    }

    /// Writes `self` into an otherwise-zero `[c, h, w]` map at `(r0, c0)`.
    pub fn place(self, h: usize, w: usize, r0: usize, c0: usize) -> Result<Self> {
        let (c, hh, ww) = self.chw()?;
        if r0 + hh > h || c0 + ww > w {
            return Err(dim_err!("placing {hh}x{ww} at ({r0},{c0}) exceeds {h}x{w}"));
        }
        self.unary(Op::Place { x: self.id, r0, c0 }, |t| {
            let d = t.data();
            let mut out = vec![T::zero(); c * h * w];
            for ch in 0..c {
                for y in 0..hh {
                    let base = (ch * h + r0 + y) * w + c0;
                    out[base..base + ww].copy_from_slice(&d[(ch * hh + y) * ww..(ch * hh + y + 1) * ww]);
                }
            }
            Tensor::new(&[c, h, w], out)
        })
    }
}

/// Concatenates along the leading axis; trailing extents must agree.
pub fn concat<'t, T: Elem>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    let tape = first.tape;
    let value = {
        let nodes = tape.nodes.borrow();
        let tail = nodes[first.id].value.shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = &nodes[p.id].value;
            if v.shape()[1..] != tail[..] {
                return Err(dim_err!("concat trailing extents {:?} vs {:?}", v.shape(), tail));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Tensor::new(&shape, data)?
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = tape.needs(&ids);
    Ok(tape.push(value, Op::Concat(ids), rg))
}
