//! Critically damped second-order low-pass standing in for the lossy RLC channel.
//!
//! State space with `x = (y, dy/dt)`:
//!
//! ```text
//! x' = [[0, 1], [-w0^2, -2 w0]] x + [0, w0^2] u,   y = x[0]
//! ```
//!
//! discretized exactly under a zero-order hold on `u`.

use std::f64::consts::TAU;

#[derive(Debug, Clone, Copy)]
pub struct ChannelFilter {
    phi: [[f64; 2]; 2],
    gamma: [f64; 2],
}

impl ChannelFilter {
    pub fn new(dt: f64, f_cut: f64) -> Self {
        assert!(dt > 0.0 && f_cut > 0.0, "dt and f_cut must be positive");
        let w = TAU * f_cut;
        let e = (-w * dt).exp();
        // exp(A dt) for the repeated eigenvalue -w
        let phi = [
            [e * (1.0 + w * dt), e * dt],
            [-e * w * w * dt, e * (1.0 - w * dt)],
        ];
        // A^-1 (Phi - I) B with A^-1 B = (-1, 0)
        let gamma = [1.0 - phi[0][0], -phi[1][0]];
        Self { phi, gamma }
    }

    /// Filters `samples` (each held for one step) starting from state `x0`.
    /// Output `k` is the response at `t = k * dt`.
    pub fn run_from(&self, samples: &[f64], x0: [f64; 2]) -> Vec<f64> {
        let mut x = x0;
        let mut out = Vec::with_capacity(samples.len());
        for &u in samples {
            out.push(x[0]);
            let y = self.phi[0][0] * x[0] + self.phi[0][1] * x[1] + self.gamma[0] * u;
            let v = self.phi[1][0] * x[0] + self.phi[1][1] * x[1] + self.gamma[1] * u;
            x = [y, v];
        }
        out
    }
}

/// Response from rest (zero initial state).
pub fn channel_filter(samples: &[f64], dt: f64, f_cut: f64) -> Vec<f64> {
    ChannelFilter::new(dt, f_cut).run_from(samples, [0.0, 0.0])
}

/// Response starting in equilibrium with the first sample, so a record does
/// not begin with an artificial charging transient.
pub fn channel_filter_settled(samples: &[f64], dt: f64, f_cut: f64) -> Vec<f64> {
    let x0 = [samples.first().copied().unwrap_or(0.0), 0.0];
    ChannelFilter::new(dt, f_cut).run_from(samples, x0)
}
