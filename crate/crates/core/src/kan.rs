//! Kolmogorov-Arnold output head built from cubic B-spline edge functions,
//! plus the plain linear head it is compared against.

use crate::autodiff::{Result, TensorError, Var};
use crate::nn::{Bound, Linear, ParamBuilder, ParamId};

pub const GRID_SIZES: [usize; 3] = [5, 15, 50];
pub const NEURON_CHOICES: [usize; 2] = [5, 10];
pub const SPLINE_ORDER: usize = 3;

/// Uniform knot grid on [-1, 1], extended by `order` knots on each side.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineGrid {
    pub n_intervals: usize,
    pub order: usize,
    knots: Vec<f64>,
}

impl BSplineGrid {
    pub fn new(n_intervals: usize, order: usize) -> Self {
        assert!(n_intervals >= 1 && order >= 1, "grid needs at least one interval and order 1");
        let h = 2.0 / n_intervals as f64;
        let knots = (0..=n_intervals + 2 * order)
            .map(|j| -1.0 + (j as f64 - order as f64) * h)
            .collect();
        Self {
            n_intervals,
            order,
            knots,
        }
    }

    pub fn cubic(n_intervals: usize) -> Self {
        Self::new(n_intervals, SPLINE_ORDER)
    }

    pub fn n_basis(&self) -> usize {
        self.n_intervals + self.order
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn spacing(&self) -> f64 {
        2.0 / self.n_intervals as f64
    }

    /// Index of the knot span containing `x` (already clamped to the domain).
    fn span(&self, x: f64) -> usize {
        let k = self.order;
        let cell = ((x + 1.0) / self.spacing()).floor() as isize;
        k + cell.clamp(0, self.n_intervals as isize - 1) as usize
    }

    /// Fills `vals` with every basis value at `x` and `ders` with their
    /// derivatives. `x` is clamped to [-1, 1] first; outside the domain the
    /// derivatives are zero. Returns whether clamping happened.
    pub fn eval(&self, x: f64, vals: &mut [f64], ders: Option<&mut [f64]>) -> bool {
        let k = self.order;
        let clamped = !(-1.0..=1.0).contains(&x);
        let x = x.clamp(-1.0, 1.0);
        let i = self.span(x);
        let t = &self.knots;

        // triangular Cox-de Boor; n[r] holds B_{i-j+r, j}
        let mut n = [0.0f64; 16];
        let mut lower = [0.0f64; 16];
        let mut left = [0.0f64; 16];
        let mut right = [0.0f64; 16];
        assert!(k < 16, "spline order too large");
        n[0] = 1.0;
        for j in 1..=k {
            if j == k {
                lower[..k].copy_from_slice(&n[..k]);
            }
            left[j] = x - t[i + 1 - j];
            right[j] = t[i + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let tmp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            n[j] = saved;
        }
        vals.fill(0.0);
        // round-off can leave a denormal negative where a basis touches zero
        for (v, &b) in vals[i - k..=i].iter_mut().zip(&n[..=k]) {
            *v = b.max(0.0);
        }

        if let Some(d) = ders {
            d.fill(0.0);
            if !clamped {
                // B'_{m,k} = (B_{m,k-1} - B_{m+1,k-1}) / h on a uniform grid;
                // lower[s] holds B_{i-k+1+s, k-1}
                let h = self.spacing();
                let low = |m: usize| -> f64 {
                    if m + k > i && m <= i {
                        lower[m + k - 1 - i]
                    } else {
                        0.0
                    }
                };
                for m in i - k..=i {
                    d[m] = (low(m) - low(m + 1)) / h;
                }
            }
        }
        clamped
    }

    pub fn basis(&self, x: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.n_basis()];
        self.eval(x, &mut v, None);
        v
    }
}

/// Clamp counts accumulated over forward passes.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClampStats {
    pub clamped: u64,
    pub total: u64,
}

impl ClampStats {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.clamped as f64 / self.total as f64
        }
    }

    pub fn merge(&mut self, other: ClampStats) {
        self.clamped += other.clamped;
        self.total += other.total;
    }
}

/// `out_j = sum_i w_b[i,j] silu(x_i) + sum_i sum_m c[i,m,j] B_m(clamp(x_i))`.
#[derive(Debug, Clone)]
pub struct KanLayer {
    pub d_in: usize,
    pub d_out: usize,
    pub grid: BSplineGrid,
    /// `[d_in, n_basis, d_out]`.
    pub coef: ParamId,
    /// `[d_in, d_out]`.
    pub base: ParamId,
}

impl KanLayer {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize, grid: BSplineGrid) -> Self {
        let coef = pb.normal(&format!("{name}.coef"), &[d_in, grid.n_basis(), d_out], 0.1);
        let base = pb.xavier(&format!("{name}.base"), d_in, d_out);
        Self {
            d_in,
            d_out,
            grid,
            coef,
            base,
        }
    }

    pub fn n_params(d_in: usize, d_out: usize, n_intervals: usize, order: usize) -> usize {
        d_in * d_out * (n_intervals + order) + d_in * d_out
    }

    /// `x: [.., d_in]` to `[.., d_out]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>, stats: &mut ClampStats) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.last() != Some(&self.d_in) {
            return Err(TensorError::ShapeMismatch {
                op: "kan_forward",
                lhs: shape,
                rhs: vec![self.d_in, self.d_out],
            });
        }
        let rows = x.numel() / self.d_in;
        let nb = self.grid.n_basis();
        let basis = x.expand_with(nb, |v, out, der| {
            stats.total += 1;
            if self.grid.eval(v, out, Some(der)) {
                stats.clamped += 1;
            }
        });
        let coef = p[self.coef].reshape(&[self.d_in * nb, self.d_out])?;
        let spline = basis.reshape(&[rows, self.d_in * nb])?.matmul(&coef)?;
        let base = x.reshape(&[rows, self.d_in])?.silu().matmul(&p[self.base])?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = self.d_out;
        spline.add(&base)?.reshape(&out_shape)
    }
}

/// Which output projection sits on top of the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Kan { neurons: usize, grid: usize },
    Linear,
}

impl HeadKind {
    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Kan { .. } => "kan",
            HeadKind::Linear => "linear",
        }
    }
}

/// `d_model -> neurons -> seg_len` KAN, or one affine map.
#[derive(Debug, Clone)]
pub enum Head {
    Kan(Vec<KanLayer>),
    Linear(Linear),
}

impl Head {
    pub fn new(pb: &mut ParamBuilder, kind: HeadKind, d_model: usize, seg_len: usize) -> Self {
        match kind {
            HeadKind::Kan { neurons, grid } => Head::Kan(vec![
                KanLayer::new(pb, "head.kan0", d_model, neurons, BSplineGrid::cubic(grid)),
                KanLayer::new(pb, "head.kan1", neurons, seg_len, BSplineGrid::cubic(grid)),
            ]),
            HeadKind::Linear => Head::Linear(Linear::new(pb, "head.linear", d_model, seg_len, true)),
        }
    }

    pub fn n_params(kind: HeadKind, d_model: usize, seg_len: usize) -> usize {
        match kind {
            HeadKind::Kan { neurons, grid } => {
                KanLayer::n_params(d_model, neurons, grid, SPLINE_ORDER)
                    + KanLayer::n_params(neurons, seg_len, grid, SPLINE_ORDER)
            }
            HeadKind::Linear => Linear::n_params(d_model, seg_len, true),
        }
    }

    /// Smallest distance from any spline input to a clamp boundary at ±1.
    /// Finite-difference checks use it to avoid straddling the kink.
    pub fn kink_distance<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<f64> {
        let Head::Kan(layers) = self else {
            return Ok(f64::INFINITY);
        };
        let mut h = *x;
        let mut dist = f64::INFINITY;
        for l in layers {
            dist = h.with_value(|v| v.iter().fold(dist, |d, &u| d.min((u.abs() - 1.0).abs())));
            h = l.forward(p, &h, &mut ClampStats::default())?;
        }
        Ok(dist)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>, stats: &mut ClampStats) -> Result<Var<'t>> {
        match self {
            Head::Kan(layers) => layers.iter().try_fold(*x, |h, l| l.forward(p, &h, stats)),
            Head::Linear(l) => {
                if x.shape().last() != Some(&l.d_in) {
                    return Err(TensorError::ShapeMismatch {
                        op: "linear_head",
                        lhs: x.shape(),
                        rhs: vec![l.d_in, l.d_out],
                    });
                }
                l.forward(p, x)
            }
        }
    }
}
