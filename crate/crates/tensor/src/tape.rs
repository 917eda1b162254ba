//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable operation appends a node holding its forward value
//! and enough bookkeeping to propagate adjoints. [`Tape::backward`] walks the
//! nodes in reverse order; since a node can only reference earlier nodes the
//! tape is acyclic by construction.

use std::cell::{Ref, RefCell};

use crate::error::{Result, TensorError};
use crate::kernels::{self, Boundary, ConvGeom};
use crate::scalar::{gemm, Scalar};
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        batch: usize,
        out_ch: usize,
    },
    ConvT2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        batch: usize,
        in_ch: usize,
    },
    LayerNorm {
        x: usize,
        rstd: Vec<T>,
    },
    Softmax(usize),
    Silu(usize),
    Gelu(usize),
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    ScatterRows {
        base: usize,
        src: usize,
        idx: Vec<usize>,
    },
    Sum(usize),
    Mean(usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            check_finite: true,
        }
    }

    /// Disables the per-op non-finite scan (used by overflow tests).
    pub fn unchecked() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            check_finite: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
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

    fn emit(&self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Result<Var<'_, T>> {
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let rg = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push(value, op, rg))
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat<'t>(&'t self, xs: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        if xs.is_empty() {
            return Err(TensorError::Contract("concat of zero tensors".into()));
        }
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let first = nodes[xs[0].id].value.shape().to_vec();
            if axis >= first.len() {
                return Err(TensorError::shape("concat", format!("axis {axis} for {first:?}")));
            }
            let mut total = 0;
            for x in xs {
                let s = nodes[x.id].value.shape();
                let same = s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !same {
                    return Err(TensorError::shape("concat", format!("{first:?} vs {s:?}")));
                }
                total += s[axis];
            }
            let outer: usize = first[..axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let mut shape = first.clone();
            shape[axis] = total;
            let mut data = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for x in xs {
                    let v = &nodes[x.id].value;
                    let chunk = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            (shape, data)
        };
        let ids: Vec<usize> = xs.iter().map(|x| x.id).collect();
        self.emit(
            "concat",
            Tensor::new(&shape, data)?,
            Op::Concat {
                xs: ids.clone(),
                axis,
            },
            &ids,
        )
    }

    /// Computes gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn acc<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    id: usize,
) -> Option<&'a mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backprop<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for p in [*a, *b] {
                if let Some(d) = acc(nodes, grads, p) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = acc(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
            if let Some(d) = acc(nodes, grads, *b) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(d) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    d[i] += g[i] * bv[i];
                }
            }
            if let Some(d) = acc(nodes, grads, *b) {
                for i in 0..g.len() {
                    d[i] += g[i] * av[i];
                }
            }
        }
        Op::AddRow(a, row) => {
            if let Some(d) = acc(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
            if let Some(d) = acc(nodes, grads, *row) {
                let n = d.len();
                for chunk in g.chunks(n) {
                    d.iter_mut().zip(chunk).for_each(|(d, &g)| *d += g);
                }
            }
        }
        Op::MulRow(a, row) => {
            let (av, rv) = (nodes[*a].value.data(), nodes[*row].value.data());
            let n = rv.len();
            if let Some(d) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    d[i] += g[i] * rv[i % n];
                }
            }
            if let Some(d) = acc(nodes, grads, *row) {
                for i in 0..g.len() {
                    d[i % n] += g[i] * av[i];
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(d) = acc(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *c);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(d) = acc(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
        }
        &Op::MatMul {
            a,
            b,
            ta,
            tb,
            batch,
            m,
            k,
            n,
        } => {
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            if let Some(d) = acc(nodes, grads, a) {
                for bi in 0..batch {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let bs = &bv[bi * k * n..(bi + 1) * k * n];
                    let ds = &mut d[bi * m * k..(bi + 1) * m * k];
                    if ta {
                        gemm(k, n, m, bs, tb, gs, true, ds, true);
                    } else {
                        gemm(m, n, k, gs, false, bs, !tb, ds, true);
                    }
                }
            }
            if let Some(d) = acc(nodes, grads, b) {
                for bi in 0..batch {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let as_ = &av[bi * m * k..(bi + 1) * m * k];
                    let ds = &mut d[bi * k * n..(bi + 1) * k * n];
                    if tb {
                        gemm(n, m, k, gs, true, as_, ta, ds, true);
                    } else {
                        gemm(k, m, n, as_, !ta, gs, false, ds, true);
                    }
                }
            }
        }
        &Op::Conv2d {
            x,
            w,
            b,
            geom,
            batch,
            out_ch,
        } => {
            let (xv, wv) = (nodes[x].value.data(), nodes[w].value.data());
            let (rows, cols) = (geom.col_rows(), geom.col_cols());
            let big = geom.channels * geom.big_h * geom.big_w;
            let mut col = vec![T::zero(); rows * cols];
            let mut dcol = vec![T::zero(); rows * cols];
            let need_x = nodes[x].requires_grad;
            let need_w = nodes[w].requires_grad;
            for bi in 0..batch {
                let gs = &g[bi * out_ch * cols..(bi + 1) * out_ch * cols];
                if need_w {
                    geom.im2col(&xv[bi * big..(bi + 1) * big], &mut col);
                    let d = acc(nodes, grads, w).unwrap();
                    gemm(out_ch, cols, rows, gs, false, &col, true, d, true);
                }
                if need_x {
                    gemm(rows, out_ch, cols, wv, true, gs, false, &mut dcol, false);
                    let d = acc(nodes, grads, x).unwrap();
                    geom.col2im_add(&dcol, &mut d[bi * big..(bi + 1) * big]);
                }
            }
            if let Some(bias) = b {
                if let Some(d) = acc(nodes, grads, bias) {
                    for bi in 0..batch {
                        for (c, dc) in d.iter_mut().enumerate() {
                            let off = (bi * out_ch + c) * cols;
                            *dc += g[off..off + cols].iter().copied().sum::<T>();
                        }
                    }
                }
            }
        }
        &Op::ConvT2d {
            x,
            w,
            b,
            geom,
            batch,
            in_ch,
        } => {
            let (xv, wv) = (nodes[x].value.data(), nodes[w].value.data());
            let (rows, cols) = (geom.col_rows(), geom.col_cols());
            let big = geom.channels * geom.big_h * geom.big_w;
            let mut dcol = vec![T::zero(); rows * cols];
            let need_x = nodes[x].requires_grad;
            let need_w = nodes[w].requires_grad;
            for bi in 0..batch {
                geom.im2col(&g[bi * big..(bi + 1) * big], &mut dcol);
                if need_x {
                    let d = acc(nodes, grads, x).unwrap();
                    gemm(
                        in_ch,
                        rows,
                        cols,
                        wv,
                        false,
                        &dcol,
                        false,
                        &mut d[bi * in_ch * cols..(bi + 1) * in_ch * cols],
                        true,
                    );
                }
                if need_w {
                    let d = acc(nodes, grads, w).unwrap();
                    let xs = &xv[bi * in_ch * cols..(bi + 1) * in_ch * cols];
                    gemm(in_ch, cols, rows, xs, false, &dcol, true, d, true);
                }
            }
            if let Some(bias) = b {
                if let Some(d) = acc(nodes, grads, bias) {
                    let plane = geom.big_h * geom.big_w;
                    for bi in 0..batch {
                        for (c, dc) in d.iter_mut().enumerate() {
                            let off = (bi * geom.channels + c) * plane;
                            *dc += g[off..off + plane].iter().copied().sum::<T>();
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, rstd } => {
            if let Some(d) = acc(nodes, grads, *x) {
                let n = node.value.numel() / rstd.len();
                kernels::layer_norm_backward(node.value.data(), rstd, g, d, n);
            }
        }
        Op::Softmax(x) => {
            if let Some(d) = acc(nodes, grads, *x) {
                let n = *node.value.shape().last().unwrap();
                kernels::softmax_backward(node.value.data(), g, d, n);
            }
        }
        Op::Silu(x) => {
            let xv = nodes[*x].value.data();
            if let Some(d) = acc(nodes, grads, *x) {
                for i in 0..g.len() {
                    d[i] += g[i] * kernels::silu_grad(xv[i]);
                }
            }
        }
        Op::Gelu(x) => {
            let xv = nodes[*x].value.data();
            if let Some(d) = acc(nodes, grads, *x) {
                for i in 0..g.len() {
                    d[i] += g[i] * kernels::gelu_grad(xv[i]);
                }
            }
        }
        Op::Permute { x, perm } => {
            if let Some(d) = acc(nodes, grads, *x) {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let mut tmp = vec![T::zero(); g.len()];
                kernels::permute_into(g, node.value.shape(), &inv, &mut tmp);
                d.iter_mut().zip(&tmp).for_each(|(d, &t)| *d += t);
            }
        }
        Op::Concat { xs, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let row = shape[*axis] * inner;
            let mut offset = 0;
            for &p in xs {
                let chunk = nodes[p].value.shape()[*axis] * inner;
                if let Some(d) = acc(nodes, grads, p) {
                    for o in 0..outer {
                        let src = &g[o * row + offset..o * row + offset + chunk];
                        d[o * chunk..(o + 1) * chunk]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &s)| *d += s);
                    }
                }
                offset += chunk;
            }
        }
        &Op::Slice { x, axis, start } => {
            if let Some(d) = acc(nodes, grads, x) {
                let in_shape = nodes[x].value.shape();
                let len = node.value.shape()[axis];
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let in_row = in_shape[axis] * inner;
                let chunk = len * inner;
                for o in 0..outer {
                    let dst = &mut d[o * in_row + start * inner..o * in_row + start * inner + chunk];
                    dst.iter_mut()
                        .zip(&g[o * chunk..(o + 1) * chunk])
                        .for_each(|(d, &s)| *d += s);
                }
            }
        }
        Op::GatherRows { x, idx } => {
            if let Some(d) = acc(nodes, grads, *x) {
                let w = g.len() / idx.len();
                for (r, &i) in idx.iter().enumerate() {
                    d[i * w..(i + 1) * w]
                        .iter_mut()
                        .zip(&g[r * w..(r + 1) * w])
                        .for_each(|(d, &s)| *d += s);
                }
            }
        }
        Op::ScatterRows { base, src, idx } => {
            let w = *node.value.shape().last().unwrap();
            if let Some(d) = acc(nodes, grads, *base) {
                let mut keep = g.to_vec();
                for &i in idx {
                    keep[i * w..(i + 1) * w].iter_mut().for_each(|v| *v = T::zero());
                }
                d.iter_mut().zip(&keep).for_each(|(d, &s)| *d += s);
            }
            if let Some(d) = acc(nodes, grads, *src) {
                for (r, &i) in idx.iter().enumerate() {
                    d[r * w..(r + 1) * w]
                        .iter_mut()
                        .zip(&g[i * w..(i + 1) * w])
                        .for_each(|(d, &s)| *d += s);
                }
            }
        }
        Op::Sum(x) => {
            if let Some(d) = acc(nodes, grads, *x) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(d) = acc(nodes, grads, *x) {
                let s = g[0] / T::lit(d.len() as f64);
                d.iter_mut().for_each(|d| *d += s);
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`; `None` when no path from `v` reaches the loss.
    pub fn get(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor, zero-filled when unused.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        let shape = v.shape();
        match self.get(v) {
            Some(g) => Tensor::new(&shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(self.id).clone()
    }

    pub fn item(&self) -> T {
        self.tape.value(self.id).item()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.tape.value(self.id))
    }

    fn zip(&self, other: Var<'t, T>, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var<'t, T>> {
        let out = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            same_shape(name, &a, &b)?;
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape(), data)?
        };
        self.tape.emit(name, out, op, &[self.id, other.id])
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn square(&self) -> Result<Var<'t, T>> {
        self.mul(*self)
    }

    fn row_op(&self, row: Var<'t, T>, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var<'t, T>> {
        let out = {
            let a = self.tape.value(self.id);
            let r = self.tape.value(row.id);
            let n = r.numel();
            if a.shape().last() != Some(&n) || r.ndim() != 1 {
                return Err(TensorError::shape(name, format!("{:?} with row {:?}", a.shape(), r.shape())));
            }
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, r.data()[i % n]))
                .collect();
            Tensor::new(a.shape(), data)?
        };
        self.tape.emit(name, out, op, &[self.id, row.id])
    }

    /// Adds a 1-D `row` to every trailing-axis row.
    pub fn add_row(&self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        self.row_op(row, "add_row", |a, b| a + b, Op::AddRow(self.id, row.id))
    }

    /// Multiplies every trailing-axis row by a 1-D `row`.
    pub fn mul_row(&self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        self.row_op(row, "mul_row", |a, b| a * b, Op::MulRow(self.id, row.id))
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t, T>> {
        let c = T::lit(c);
        let out = self.tape.value(self.id).map(|v| v * c);
        self.tape.emit("scale", out, Op::Scale(self.id, c), &[self.id])
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t, T>> {
        let c = T::lit(c);
        let out = self.tape.value(self.id).map(|v| v + c);
        self.tape.emit("add_scalar", out, Op::AddScalar(self.id), &[self.id])
    }

    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_t(other, false, false)
    }

    /// Matrix product of 2-D operands, or batched product of 3-D operands
    /// with equal batch size. `ta`/`tb` use the transposed trailing matrix.
    pub fn matmul_t(&self, other: Var<'t, T>, ta: bool, tb: bool) -> Result<Var<'t, T>> {
        let (out, op) = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            let bad = || TensorError::shape("matmul", format!("{:?} x {:?} (ta={ta}, tb={tb})", a.shape(), b.shape()));
            if a.ndim() != b.ndim() || !(a.ndim() == 2 || a.ndim() == 3) {
                return Err(bad());
            }
            let nd = a.ndim();
            let batch = if nd == 3 { a.dim(0) } else { 1 };
            if nd == 3 && b.dim(0) != batch {
                return Err(bad());
            }
            let (ar, ac) = (a.dim(nd - 2), a.dim(nd - 1));
            let (br, bc) = (b.dim(nd - 2), b.dim(nd - 1));
            let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
            let (k2, n) = if tb { (bc, br) } else { (br, bc) };
            if k != k2 {
                return Err(bad());
            }
            let mut data = vec![T::zero(); batch * m * n];
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    ta,
                    &b.data()[bi * k * n..(bi + 1) * k * n],
                    tb,
                    &mut data[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
            let shape = if nd == 3 { vec![batch, m, n] } else { vec![m, n] };
            (
                Tensor::new(&shape, data)?,
                Op::MatMul {
                    a: self.id,
                    b: other.id,
                    ta,
                    tb,
                    batch,
                    m,
                    k,
                    n,
                },
            )
        };
        self.tape.emit("matmul", out, op, &[self.id, other.id])
    }

    /// 2-D convolution. `self`: `[B, Ci, H, W]`, `weight`: `[Co, Ci, k, k]`,
    /// `bias`: `[Co]`.
    pub fn conv2d(
        &self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        pad: usize,
        boundary: Boundary,
    ) -> Result<Var<'t, T>> {
        let (out, op) = {
            let x = self.tape.value(self.id);
            let w = self.tape.value(weight.id);
            if x.ndim() != 4 || w.ndim() != 4 || w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3) || stride == 0 {
                return Err(TensorError::shape("conv2d", format!("input {:?}, weight {:?}", x.shape(), w.shape())));
            }
            let (batch, ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
            let (co, k) = (w.dim(0), w.dim(2));
            if h + 2 * pad < k || wd + 2 * pad < k {
                return Err(TensorError::shape("conv2d", format!("kernel {k} larger than padded input {h}x{wd}")));
            }
            let geom = ConvGeom {
                channels: ci,
                big_h: h,
                big_w: wd,
                small_h: (h + 2 * pad - k) / stride + 1,
                small_w: (wd + 2 * pad - k) / stride + 1,
                kernel: k,
                stride,
                pad,
                boundary,
            };
            if let Some(b) = bias {
                let bv = self.tape.value(b.id);
                if bv.shape() != [co] {
                    return Err(TensorError::shape("conv2d", format!("bias {:?} for {co} channels", bv.shape())));
                }
            }
            let (rows, cols) = (geom.col_rows(), geom.col_cols());
            let mut col = vec![T::zero(); rows * cols];
            let mut data = vec![T::zero(); batch * co * cols];
            for bi in 0..batch {
                geom.im2col(&x.data()[bi * ci * h * wd..(bi + 1) * ci * h * wd], &mut col);
                let dst = &mut data[bi * co * cols..(bi + 1) * co * cols];
                gemm(co, rows, cols, w.data(), false, &col, false, dst, false);
                if let Some(b) = bias {
                    let bv = self.tape.value(b.id);
                    for c in 0..co {
                        let bc = bv.data()[c];
                        dst[c * cols..(c + 1) * cols].iter_mut().for_each(|v| *v += bc);
                    }
                }
            }
            (
                Tensor::new(&[batch, co, geom.small_h, geom.small_w], data)?,
                Op::Conv2d {
                    x: self.id,
                    w: weight.id,
                    b: bias.map(|b| b.id),
                    geom,
                    batch,
                    out_ch: co,
                },
            )
        };
        let mut parents = vec![self.id, weight.id];
        parents.extend(bias.map(|b| b.id));
        self.tape.emit("conv2d", out, op, &parents)
    }

    /// Transposed 2-D convolution (adjoint of [`Var::conv2d`] with the same
    /// stride/padding). `self`: `[B, Ci, h, w]`, `weight`: `[Ci, Co, k, k]`.
    pub fn conv_transpose2d(
        &self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        pad: usize,
        boundary: Boundary,
    ) -> Result<Var<'t, T>> {
        let (out, op) = {
            let x = self.tape.value(self.id);
            let w = self.tape.value(weight.id);
            if x.ndim() != 4 || w.ndim() != 4 || w.dim(0) != x.dim(1) || w.dim(2) != w.dim(3) || stride == 0 {
                return Err(TensorError::shape(
                    "conv_transpose2d",
                    format!("input {:?}, weight {:?}", x.shape(), w.shape()),
                ));
            }
            let (batch, ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
            let (co, k) = (w.dim(1), w.dim(2));
            let big_h = ((h - 1) * stride + k).checked_sub(2 * pad);
            let big_w = ((wd - 1) * stride + k).checked_sub(2 * pad);
            let (Some(big_h), Some(big_w)) = (big_h, big_w) else {
                return Err(TensorError::shape("conv_transpose2d", "padding exceeds output"));
            };
            let geom = ConvGeom {
                channels: co,
                big_h,
                big_w,
                small_h: h,
                small_w: wd,
                kernel: k,
                stride,
                pad,
                boundary,
            };
            let (rows, cols) = (geom.col_rows(), geom.col_cols());
            let mut col = vec![T::zero(); rows * cols];
            let plane = big_h * big_w;
            let mut data = vec![T::zero(); batch * co * plane];
            for bi in 0..batch {
                let xs = &x.data()[bi * ci * cols..(bi + 1) * ci * cols];
                gemm(rows, ci, cols, w.data(), true, xs, false, &mut col, false);
                let dst = &mut data[bi * co * plane..(bi + 1) * co * plane];
                geom.col2im_add(&col, dst);
                if let Some(b) = bias {
                    let bv = self.tape.value(b.id);
                    if bv.shape() != [co] {
                        return Err(TensorError::shape("conv_transpose2d", format!("bias {:?}", bv.shape())));
                    }
                    for c in 0..co {
                        let bc = bv.data()[c];
                        dst[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += bc);
                    }
                }
            }
            (
                Tensor::new(&[batch, co, big_h, big_w], data)?,
                Op::ConvT2d {
                    x: self.id,
                    w: weight.id,
                    b: bias.map(|b| b.id),
                    geom,
                    batch,
                    in_ch: ci,
                },
            )
        };
        let mut parents = vec![self.id, weight.id];
        parents.extend(bias.map(|b| b.id));
        self.tape.emit("conv_transpose2d", out, op, &parents)
    }

    /// Normalizes over the trailing axis (no affine part).
    pub fn layer_norm(&self, eps: f64) -> Result<Var<'t, T>> {
        let (out, rstd) = {
            let x = self.tape.value(self.id);
            let n = *x.shape().last().unwrap();
            let mut out = x.clone();
            let rstd = kernels::layer_norm_rows(out.data_mut(), n, T::lit(eps));
            (out, rstd)
        };
        self.tape.emit("layer_norm", out, Op::LayerNorm { x: self.id, rstd }, &[self.id])
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&self) -> Result<Var<'t, T>> {
        let out = {
            let x = self.tape.value(self.id);
            let n = *x.shape().last().unwrap();
            let mut out = x.clone();
            kernels::softmax_rows(out.data_mut(), n);
            out
        };
        self.tape.emit("softmax", out, Op::Softmax(self.id), &[self.id])
    }

    pub fn silu(&self) -> Result<Var<'t, T>> {
        let out = self.tape.value(self.id).map(kernels::silu);
        self.tape.emit("silu", out, Op::Silu(self.id), &[self.id])
    }

    pub fn gelu(&self) -> Result<Var<'t, T>> {
        let out = self.tape.value(self.id).map(kernels::gelu);
        self.tape.emit("gelu", out, Op::Gelu(self.id), &[self.id])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = self.tape.value(self.id).clone().reshape(shape)?;
        self.tape.emit("reshape", out, Op::Reshape(self.id), &[self.id])
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let out = {
            let x = self.tape.value(self.id);
            let mut seen = vec![false; x.ndim()];
            if perm.len() != x.ndim() || perm.iter().any(|&p| p >= x.ndim() || std::mem::replace(&mut seen[p], true)) {
                return Err(TensorError::shape("permute", format!("{perm:?} for {:?}", x.shape())));
            }
            let shape: Vec<usize> = perm.iter().map(|&p| x.dim(p)).collect();
            let mut data = vec![T::zero(); x.numel()];
            kernels::permute_into(x.data(), x.shape(), perm, &mut data);
            Tensor::new(&shape, data)?
        };
        self.tape.emit(
            "permute",
            out,
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
            &[self.id],
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let out = {
            let x = self.tape.value(self.id);
            if axis >= x.ndim() || len == 0 || start + len > x.dim(axis) {
                return Err(TensorError::shape("slice", format!("[{start}, {start}+{len}) on axis {axis} of {:?}", x.shape())));
            }
            let outer: usize = x.shape()[..axis].iter().product();
            let inner: usize = x.shape()[axis + 1..].iter().product();
            let row = x.dim(axis) * inner;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                data.extend_from_slice(&x.data()[o * row + start * inner..o * row + (start + len) * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = len;
            Tensor::new(&shape, data)?
        };
        self.tape.emit(
            "slice",
            out,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            &[self.id],
        )
    }

    /// Selects rows (leading-axis entries) of a 2-D tensor; repeats allowed.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t, T>> {
        let out = {
            let x = self.tape.value(self.id);
            if x.ndim() != 2 || idx.is_empty() || idx.iter().any(|&i| i >= x.dim(0)) {
                return Err(TensorError::shape("gather_rows", format!("{} indices into {:?}", idx.len(), x.shape())));
            }
            let w = x.dim(1);
            let mut data = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                data.extend_from_slice(&x.data()[i * w..(i + 1) * w]);
            }
            Tensor::new(&[idx.len(), w], data)?
        };
        self.tape.emit(
            "gather_rows",
            out,
            Op::GatherRows {
                x: self.id,
                idx: idx.to_vec(),
            },
            &[self.id],
        )
    }

    /// Copy of `self` (2-D) with rows `idx` (distinct) replaced by `src`.
    pub fn scatter_rows(&self, src: Var<'t, T>, idx: &[usize]) -> Result<Var<'t, T>> {
        let out = {
            let base = self.tape.value(self.id);
            let s = self.tape.value(src.id);
            let mut seen = vec![false; base.dim(0)];
            let ok = base.ndim() == 2
                && s.ndim() == 2
                && s.dim(1) == base.dim(1)
                && s.dim(0) == idx.len()
                && idx.iter().all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true));
            if !ok {
                return Err(TensorError::shape(
                    "scatter_rows",
                    format!("{:?} into {:?} at {} rows", s.shape(), base.shape(), idx.len()),
                ));
            }
            let w = base.dim(1);
            let mut out = base.clone();
            for (r, &i) in idx.iter().enumerate() {
                out.data_mut()[i * w..(i + 1) * w].copy_from_slice(&s.data()[r * w..(r + 1) * w]);
            }
            out
        };
        self.tape.emit(
            "scatter_rows",
            out,
            Op::ScatterRows {
                base: self.id,
                src: src.id,
                idx: idx.to_vec(),
            },
            &[self.id, src.id],
        )
    }

    pub fn sum(&self) -> Result<Var<'t, T>> {
        let out = Tensor::scalar(self.tape.value(self.id).data().iter().copied().sum::<T>());
        self.tape.emit("sum", out, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Result<Var<'t, T>> {
        let out = {
            let x = self.tape.value(self.id);
            Tensor::scalar(x.data().iter().copied().sum::<T>() / T::lit(x.numel() as f64))
        };
        self.tape.emit("mean", out, Op::Mean(self.id), &[self.id])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_of_squares() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
        let loss = x.square().unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[3]), true);
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0), true);
        let unused = tape.leaf(Tensor::full(&[3], 1.0), true);
        let g = tape.backward(x.sum().unwrap()).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused), Tensor::zeros(&[3]));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[3, 2]), false);
        assert!(matches!(a.add(b), Err(TensorError::Shape { .. })));
        assert!(a.matmul(a).is_err());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::full(&[2], f32::MAX), false);
        assert!(matches!(a.add(a), Err(TensorError::NonFinite { op: "add" })));
    }

    #[test]
    fn scatter_then_gather_roundtrip() {
        let tape = Tape::<f64>::new();
        let base = tape.leaf(Tensor::zeros(&[4, 2]), true);
        let src = tape.leaf(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let out = base.scatter_rows(src, &[3, 1]).unwrap();
        assert_eq!(out.value().data(), &[0.0, 0.0, 3.0, 4.0, 0.0, 0.0, 1.0, 2.0]);
        let back = out.gather_rows(&[3, 1]).unwrap();
        assert_eq!(back.value(), src.value());
    }
}
