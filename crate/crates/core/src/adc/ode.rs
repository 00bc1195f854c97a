//! Backward Euler with a damped Newton corrector.

use super::AdcError;

/// First-order system `dy/dt = f(t, y)`.
pub trait OdeSystem {
    fn dim(&self) -> usize;

    fn rhs(&self, t: f64, y: &[f64], dydt: &mut [f64]);

    /// Row-major `dim × dim` Jacobian of `rhs` with respect to `y`.
    /// Defaults to forward differences.
    fn jacobian(&self, t: f64, y: &[f64], jac: &mut [f64]) {
        let n = self.dim();
        let mut f0 = vec![0.0; n];
        let mut f1 = vec![0.0; n];
        let mut yp = y.to_vec();
        self.rhs(t, y, &mut f0);
        for j in 0..n {
            let eps = 1e-7 * y[j].abs().max(1.0);
            yp[j] = y[j] + eps;
            self.rhs(t, &yp, &mut f1);
            yp[j] = y[j];
            for i in 0..n {
                jac[i * n + j] = (f1[i] - f0[i]) / eps;
            }
        }
    }
}

/// Autonomous system given by a closure.
pub struct FnSystem<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], &mut [f64])> FnSystem<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64], &mut [f64])> OdeSystem for FnSystem<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn rhs(&self, _t: f64, y: &[f64], dydt: &mut [f64]) {
        (self.f)(y, dydt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StiffOdeStepper {
    pub h: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl StiffOdeStepper {
    pub fn new(h: f64) -> Self {
        Self {
            h,
            newton_tol: 1e-10,
            newton_max_iter: 50,
        }
    }

    /// One step of size `self.h` from `(t, y)`.
    pub fn step<S: OdeSystem + ?Sized>(&self, sys: &S, t: f64, y: &[f64]) -> Result<Vec<f64>, AdcError> {
        self.step_by(sys, t, y, self.h)
    }

    /// Solves `z = y + h f(t + h, z)`.
    pub fn step_by<S: OdeSystem + ?Sized>(
        &self,
        sys: &S,
        t: f64,
        y: &[f64],
        h: f64,
    ) -> Result<Vec<f64>, AdcError> {
        let n = sys.dim();
        let t1 = t + h;
        let mut z = y.to_vec();
        let mut f = vec![0.0; n];
        let residual = |z: &[f64], f: &mut [f64]| -> Vec<f64> {
            sys.rhs(t1, z, f);
            (0..n).map(|i| z[i] - y[i] - h * f[i]).collect()
        };
        let norm = |r: &[f64]| r.iter().fold(0.0f64, |m, v| m.max(v.abs()));

        let mut r = residual(&z, &mut f);
        let mut rn = norm(&r);
        let mut jac = vec![0.0; n * n];
        for _ in 0..self.newton_max_iter {
            if rn < self.newton_tol {
                return Ok(z);
            }
            sys.jacobian(t1, &z, &mut jac);
            // I - h J
            let mut m: Vec<f64> = jac.iter().map(|v| -h * v).collect();
            for i in 0..n {
                m[i * n + i] += 1.0;
            }
            let delta = solve_dense(&mut m, r.iter().map(|v| -v).collect(), n)
                .ok_or(AdcError::SingularJacobian { t: t1 })?;
            let mut lambda = 1.0;
            loop {
                let trial: Vec<f64> = z.iter().zip(&delta).map(|(a, d)| a + lambda * d).collect();
                let rt = residual(&trial, &mut f);
                let rtn = norm(&rt);
                if rtn < rn || lambda < 1e-6 {
                    z = trial;
                    r = rt;
                    rn = rtn;
                    break;
                }
                lambda *= 0.5;
            }
        }
        if rn < self.newton_tol {
            Ok(z)
        } else {
            Err(AdcError::NewtonDiverged {
                t: t1,
                residual: rn,
                iterations: self.newton_max_iter,
            })
        }
    }
}

/// Gaussian elimination with partial pivoting; `None` if singular.
fn solve_dense(m: &mut [f64], mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let piv = (col..n).max_by(|&a, &c| m[a * n + col].abs().total_cmp(&m[c * n + col].abs()))?;
        if m[piv * n + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for j in 0..n {
                m.swap(col * n + j, piv * n + j);
            }
            b.swap(col, piv);
        }
        for row in col + 1..n {
            let factor = m[row * n + col] / m[col * n + col];
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                m[row * n + j] -= factor * m[col * n + j];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| m[i * n + j] * x[j]).sum();
        x[i] = (b[i] - s) / m[i * n + i];
    }
    Some(x)
}

/// One backward Euler step of the autonomous system `dy/dt = f(y)`.
pub fn backward_euler_step(
    f: impl Fn(&[f64], &mut [f64]),
    y: &[f64],
    h: f64,
) -> Result<Vec<f64>, AdcError> {
    let sys = FnSystem::new(y.len(), f);
    StiffOdeStepper::new(h).step(&sys, 0.0, y)
}
