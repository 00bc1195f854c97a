//! Define-by-run tape with reverse accumulation.
//!
//! Every forward operation appends one node holding its output value and the
//! bookkeeping its gradient rule needs. Node ids are assigned in creation
//! order, so the node list is already topologically sorted and `backward`
//! is a single reverse sweep.

use std::cell::RefCell;

use super::kernels::{self, gemm_acc, gemm_nt_acc, gemm_tn_acc, sigmoid};
use super::tensor::{Result, Tensor, TensorError};

const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Silu,
    Tanh,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        a_batched: bool,
        b_batched: bool,
    },
    /// `b` is either the same shape as `a` or a trailing suffix of it.
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    Offset {
        a: usize,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    Softmax {
        a: usize,
        cols: usize,
    },
    LayerNorm {
        a: usize,
        cols: usize,
        rstd: Vec<f64>,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        axes: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        lens: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Narrow {
        a: usize,
        outer: usize,
        inner: usize,
        axis_len: usize,
        start: usize,
        len: usize,
    },
    Repeat {
        a: usize,
        times: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    /// Each input scalar expands into `width` outputs; `deriv` holds d(out)/d(in).
    Expand {
        a: usize,
        width: usize,
        deriv: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradient buffers produced by [`Tape::backward`], indexed by node id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visits: Vec<u32>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, var: Var<'_>) -> Option<Tensor> {
        self.get(var)
            .map(|g| Tensor::new(var.shape(), g.to_vec()).expect("gradient shape"))
    }

    /// How many times each node was processed during the reverse sweep.
    pub fn visit_counts(&self) -> &[u32] {
        &self.visits
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar root. Every node on the tape is processed at
    /// most once, in decreasing id order.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_shape = &nodes[root.id].shape;
        if numel(root_shape) != 1 {
            return Err(TensorError::NonScalarRoot(root_shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        let mut visits = vec![0u32; nodes.len()];
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            visits[id] += 1;
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        // only differentiable nodes keep a buffer; unreachable ones get zeros
        for (g, n) in grads.iter_mut().zip(nodes.iter()) {
            if !n.requires_grad {
                *g = None;
            } else if g.is_none() {
                *g = Some(vec![0.0; n.value.len()]);
            }
        }
        Ok(Gradients { grads, visits })
    }
}

fn accumulate<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            a_batched,
            b_batched,
        } => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            if let Some(ga) = accumulate(grads, nodes, a) {
                for bi in 0..batch {
                    let ao = if a_batched { bi * m * k } else { 0 };
                    let bo = if b_batched { bi * k * n } else { 0 };
                    gemm_nt_acc(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bv[bo..bo + k * n],
                        &mut ga[ao..ao + m * k],
                        m,
                        n,
                        k,
                    );
                }
            }
            if let Some(gb) = accumulate(grads, nodes, b) {
                for bi in 0..batch {
                    let ao = if a_batched { bi * m * k } else { 0 };
                    let bo = if b_batched { bi * k * n } else { 0 };
                    gemm_tn_acc(
                        &av[ao..ao + m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut gb[bo..bo + k * n],
                        k,
                        m,
                        n,
                    );
                }
            }
        }
        &Op::Binary { kind, a, b } => {
            let bl = nodes[b].value.len();
            match kind {
                BinaryKind::Add | BinaryKind::Sub => {
                    if let Some(ga) = accumulate(grads, nodes, a) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                    let sign = if kind == BinaryKind::Add { 1.0 } else { -1.0 };
                    if let Some(gb) = accumulate(grads, nodes, b) {
                        for chunk in g.chunks(bl) {
                            gb.iter_mut().zip(chunk).for_each(|(x, y)| *x += sign * y);
                        }
                    }
                }
                BinaryKind::Mul => {
                    let av = &nodes[a].value;
                    let bv = &nodes[b].value;
                    if let Some(ga) = accumulate(grads, nodes, a) {
                        for (i, x) in ga.iter_mut().enumerate() {
                            *x += g[i] * bv[i % bl];
                        }
                    }
                    if let Some(gb) = accumulate(grads, nodes, b) {
                        for (gc, ac) in g.chunks(bl).zip(av.chunks(bl)) {
                            for j in 0..bl {
                                gb[j] += gc[j] * ac[j];
                            }
                        }
                    }
                }
            }
        }
        &Op::Scale { a, factor } => {
            if let Some(ga) = accumulate(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += factor * y);
            }
        }
        &Op::Offset { a } | &Op::Reshape { a } => {
            if let Some(ga) = accumulate(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        &Op::Unary { kind, a } => {
            let xv = &nodes[a].value;
            let yv = &node.value;
            if let Some(ga) = accumulate(grads, nodes, a) {
                for i in 0..ga.len() {
                    let d = match kind {
                        UnaryKind::Silu => {
                            let s = sigmoid(xv[i]);
                            s * (1.0 + xv[i] * (1.0 - s))
                        }
                        UnaryKind::Tanh => 1.0 - yv[i] * yv[i],
                        UnaryKind::Sigmoid => yv[i] * (1.0 - yv[i]),
                    };
                    ga[i] += g[i] * d;
                }
            }
        }
        &Op::Softmax { a, cols } => {
            let yv = &node.value;
            if let Some(ga) = accumulate(grads, nodes, a) {
                for ((gr, yr), out) in g.chunks(cols).zip(yv.chunks(cols)).zip(ga.chunks_mut(cols))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for j in 0..cols {
                        out[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { a, cols, rstd } => {
            let cols = *cols;
            let xhat = &node.value;
            if let Some(ga) = accumulate(grads, nodes, *a) {
                let inv = 1.0 / cols as f64;
                for (r, ((gr, xr), out)) in g
                    .chunks(cols)
                    .zip(xhat.chunks(cols))
                    .zip(ga.chunks_mut(cols))
                    .enumerate()
                {
                    let mean_g: f64 = gr.iter().sum::<f64>() * inv;
                    let mean_gx: f64 = gr.iter().zip(xr).map(|(x, y)| x * y).sum::<f64>() * inv;
                    for j in 0..cols {
                        out[j] += rstd[r] * (gr[j] - mean_g - xr[j] * mean_gx);
                    }
                }
            }
        }
        Op::Permute { a, axes } => {
            if let Some(ga) = accumulate(grads, nodes, *a) {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let back = kernels::permute(g, &node.shape, &inverse);
                ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y);
            }
        }
        Op::Concat {
            parts,
            lens,
            outer,
            inner,
        } => {
            let total: usize = lens.iter().sum();
            let mut offset = 0;
            for (&p, &len) in parts.iter().zip(lens) {
                if let Some(gp) = accumulate(grads, nodes, p) {
                    for o in 0..*outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
                offset += len;
            }
        }
        &Op::Narrow {
            a,
            outer,
            inner,
            axis_len,
            start,
            len,
        } => {
            if let Some(ga) = accumulate(grads, nodes, a) {
                for o in 0..outer {
                    let dst = &mut ga[(o * axis_len + start) * inner..(o * axis_len + start + len) * inner];
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                }
            }
        }
        &Op::Repeat { a, times } => {
            if let Some(ga) = accumulate(grads, nodes, a) {
                let n = ga.len();
                for t in 0..times {
                    ga.iter_mut()
                        .zip(&g[t * n..(t + 1) * n])
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
        &Op::Sum { a } => {
            if let Some(ga) = accumulate(grads, nodes, a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        &Op::Mean { a } => {
            if let Some(ga) = accumulate(grads, nodes, a) {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|x| *x += s);
            }
        }
        Op::Expand { a, width, deriv } => {
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for (i, x) in ga.iter_mut().enumerate() {
                    let gs = &g[i * width..(i + 1) * width];
                    let ds = &deriv[i * width..(i + 1) * width];
                    *x += gs.iter().zip(ds).map(|(p, q)| p * q).sum::<f64>();
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape")
    }

    /// Runs `f` on the node's flat value without copying it.
    pub fn with_value<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    /// Matrix product over the last two axes.
    ///
    /// Supported operand layouts: `[.., p, q] · [q, r]`, `[B.., p, q] · [B.., q, r]`
    /// with identical leading extents, and `[p, q] · [B.., q, r]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (sa, sb) = (self.shape(), other.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if q != q2 {
            return Err(mismatch());
        }
        let (batch, m, a_batched, b_batched, mut out_shape) = if sb.len() == 2 {
            (1, numel(&sa) / q, false, false, sa[..sa.len() - 1].to_vec())
        } else if sa.len() == 2 {
            let lead = &sb[..sb.len() - 2];
            let mut s = lead.to_vec();
            s.push(p);
            (numel(lead), p, false, true, s)
        } else {
            let lead = &sa[..sa.len() - 2];
            if lead != &sb[..sb.len() - 2] {
                return Err(mismatch());
            }
            (numel(lead), p, true, true, sa[..sa.len() - 1].to_vec())
        };
        out_shape.push(r);
        let k = q;
        let n = r;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let av = &nodes[self.id].value;
            let bv = &nodes[other.id].value;
            let mut out = vec![0.0; batch * m * n];
            for bi in 0..batch {
                let ao = if a_batched { bi * m * k } else { 0 };
                let bo = if b_batched { bi * k * n } else { 0 };
                gemm_acc(
                    &av[ao..ao + m * k],
                    &bv[bo..bo + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            out
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            out_shape,
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            },
            rg,
        ))
    }

    fn binary(&self, other: &Var<'t>, kind: BinaryKind, name: &'static str) -> Result<Var<'t>> {
        self.same_tape(other);
        let (sa, sb) = (self.shape(), other.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: sa,
                rhs: sb,
            });
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let av = &nodes[self.id].value;
            let bv = &nodes[other.id].value;
            let bl = bv.len();
            let mut out = Vec::with_capacity(av.len());
            for chunk in av.chunks(bl) {
                match kind {
                    BinaryKind::Add => out.extend(chunk.iter().zip(bv).map(|(x, y)| x + y)),
                    BinaryKind::Sub => out.extend(chunk.iter().zip(bv).map(|(x, y)| x - y)),
                    BinaryKind::Mul => out.extend(chunk.iter().zip(bv).map(|(x, y)| x * y)),
                }
            }
            out
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            sa,
            value,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    /// Elementwise sum. `other` may also be a trailing suffix of `self`'s shape,
    /// in which case it is broadcast over the leading axes.
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    /// Elementwise product, with the same suffix broadcasting as [`Var::add`].
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        let value = self.with_value(|v| v.iter().map(|x| x * factor).collect());
        self.tape.push(
            self.shape(),
            value,
            Op::Scale {
                a: self.id,
                factor,
            },
            self.requires_grad(),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let value = self.with_value(|v| v.iter().map(|x| x + c).collect());
        self.tape
            .push(self.shape(), value, Op::Offset { a: self.id }, self.requires_grad())
    }

    fn unary(&self, kind: UnaryKind) -> Var<'t> {
        let value = self.with_value(|v| {
            v.iter()
                .map(|&x| match kind {
                    UnaryKind::Silu => x * sigmoid(x),
                    UnaryKind::Tanh => x.tanh(),
                    UnaryKind::Sigmoid => sigmoid(x),
                })
                .collect()
        });
        self.tape.push(
            self.shape(),
            value,
            Op::Unary { kind, a: self.id },
            self.requires_grad(),
        )
    }

    /// `x · σ(x)`
    pub fn silu(&self) -> Var<'t> {
        self.unary(UnaryKind::Silu)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(UnaryKind::Sigmoid)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_lastdim(&self) -> Var<'t> {
        let shape = self.shape();
        let cols = *shape.last().expect("rank >= 1");
        let value = self.with_value(|v| {
            let mut out = Vec::with_capacity(v.len());
            for row in v.chunks(cols) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let start = out.len();
                let mut s = 0.0;
                for &x in row {
                    let e = (x - mx).exp();
                    s += e;
                    out.push(e);
                }
                out[start..].iter_mut().for_each(|e| *e /= s);
            }
            out
        });
        self.tape.push(
            shape,
            value,
            Op::Softmax { a: self.id, cols },
            self.requires_grad(),
        )
    }

    /// Normalizes each row of the last axis to zero mean and unit variance
    /// (biased variance, eps = 1e-5). Affine scaling is left to the caller.
    pub fn layernorm_lastdim(&self) -> Var<'t> {
        let shape = self.shape();
        let cols = *shape.last().expect("rank >= 1");
        let (value, rstd) = self.with_value(|v| {
            let mut out = Vec::with_capacity(v.len());
            let mut rstd = Vec::with_capacity(v.len() / cols);
            for row in v.chunks(cols) {
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
                let r = 1.0 / (var + LAYERNORM_EPS).sqrt();
                out.extend(row.iter().map(|x| (x - mean) * r));
                rstd.push(r);
            }
            (out, rstd)
        });
        self.tape.push(
            shape,
            value,
            Op::LayerNorm {
                a: self.id,
                cols,
                rstd,
            },
            self.requires_grad(),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let cur = self.shape();
        if numel(shape) != numel(&cur) || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: cur,
                rhs: shape.to_vec(),
            });
        }
        let value = self.with_value(|v| v.to_vec());
        Ok(self
            .tape
            .push(shape.to_vec(), value, Op::Reshape { a: self.id }, self.requires_grad()))
    }

    /// Reorders axes; output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("axes {axes:?} do not match rank {}", shape.len()),
            });
        }
        for &a in axes {
            if a >= shape.len() || seen[a] {
                return Err(TensorError::Invalid {
                    op: "permute",
                    msg: format!("axes {axes:?} are not a permutation"),
                });
            }
            seen[a] = true;
        }
        let value = self.with_value(|v| kernels::permute(v, &shape, axes));
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        Ok(self.tape.push(
            out_shape,
            value,
            Op::Permute {
                a: self.id,
                axes: axes.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Var<'t>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(TensorError::Axis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "narrow",
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!("range {start}..{} exceeds extent {}", start + len, shape[axis]),
            });
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let axis_len = shape[axis];
        let value = self.with_value(|v| {
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                out.extend_from_slice(
                    &v[(o * axis_len + start) * inner..(o * axis_len + start + len) * inner],
                );
            }
            out
        });
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.tape.push(
            out_shape,
            value,
            Op::Narrow {
                a: self.id,
                outer,
                inner,
                axis_len,
                start,
                len,
            },
            self.requires_grad(),
        ))
    }

    /// Stacks `n` copies along a new leading axis.
    pub fn repeat_leading(&self, times: usize) -> Var<'t> {
        let value = self.with_value(|v| {
            let mut out = Vec::with_capacity(v.len() * times);
            for _ in 0..times {
                out.extend_from_slice(v);
            }
            out
        });
        let mut shape = vec![times];
        shape.extend(self.shape());
        self.tape.push(
            shape,
            value,
            Op::Repeat { a: self.id, times },
            self.requires_grad(),
        )
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.with_value(|v| v.iter().sum());
        self.tape
            .push(vec![1], vec![s], Op::Sum { a: self.id }, self.requires_grad())
    }

    pub fn mean(&self) -> Var<'t> {
        let s = self.with_value(|v| v.iter().sum::<f64>() / v.len() as f64);
        self.tape
            .push(vec![1], vec![s], Op::Mean { a: self.id }, self.requires_grad())
    }

    /// Maps every scalar to `width` outputs (appended as a new last axis).
    /// `f(x, out, deriv)` must fill `out` and the derivative of each output with
    /// respect to `x`.
    pub fn expand_with(&self, width: usize, mut f: impl FnMut(f64, &mut [f64], &mut [f64])) -> Var<'t> {
        let (value, deriv) = self.with_value(|v| {
            let mut out = vec![0.0; v.len() * width];
            let mut deriv = vec![0.0; v.len() * width];
            for (i, &x) in v.iter().enumerate() {
                f(
                    x,
                    &mut out[i * width..(i + 1) * width],
                    &mut deriv[i * width..(i + 1) * width],
                );
            }
            (out, deriv)
        });
        let mut shape = self.shape();
        shape.push(width);
        self.tape.push(
            shape,
            value,
            Op::Expand {
                a: self.id,
                width,
                deriv,
            },
            self.requires_grad(),
        )
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts.first().ok_or(TensorError::Invalid {
        op: "concat",
        msg: "no operands".into(),
    })?;
    let tape = first.tape;
    let base = first.shape();
    if axis >= base.len() {
        return Err(TensorError::Axis {
            op: "concat",
            axis,
            rank: base.len(),
        });
    }
    let mut lens = Vec::with_capacity(parts.len());
    for p in parts {
        first.same_tape(p);
        let s = p.shape();
        if s.len() != base.len()
            || s.iter()
                .zip(&base)
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: base,
                rhs: s,
            });
        }
        lens.push(s[axis]);
    }
    let outer = numel(&base[..axis]);
    let inner = numel(&base[axis + 1..]);
    let total: usize = lens.iter().sum();
    let value = {
        let nodes = tape.nodes.borrow();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                let v = &nodes[p.id].value;
                out.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        out
    };
    let mut shape = base;
    shape[axis] = total;
    let rg = parts.iter().any(|p| p.requires_grad());
    Ok(tape.push(
        shape,
        value,
        Op::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
            lens,
            outer,
            inner,
        },
        rg,
    ))
}
