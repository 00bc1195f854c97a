use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    RmsProp,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::RmsProp => "rmsprop",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            _ => Err(format!("unknown optimizer {s:?} (expected adam|rmsprop)")),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const RMSPROP_RHO: f64 = 0.99;
pub const EPS: f64 = 1e-8;

/// Adam (bias-corrected) or RMSProp with per-parameter moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub t: u64,
    /// First moments (Adam only; zeros for RMSProp).
    pub m: ParamStore,
    /// Second moments.
    pub v: ParamStore,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamStore) -> Self {
        let mut zeros = params.clone();
        for t in zeros.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        Self {
            kind,
            lr,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update; `grads[i]` matches `params.tensors()[i]`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.t += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Adam => {
                let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for (i, g) in grads.iter().enumerate() {
                    let p = params.tensors_mut()[i].data_mut();
                    let m = self.m.tensors_mut()[i].data_mut();
                    let v = self.v.tensors_mut()[i].data_mut();
                    for j in 0..g.len() {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                        p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + EPS);
                    }
                }
            }
            OptimizerKind::RmsProp => {
                for (i, g) in grads.iter().enumerate() {
                    let p = params.tensors_mut()[i].data_mut();
                    let v = self.v.tensors_mut()[i].data_mut();
                    for j in 0..g.len() {
                        v[j] = RMSPROP_RHO * v[j] + (1.0 - RMSPROP_RHO) * g[j] * g[j];
                        p[j] -= lr * g[j] / (v[j].sqrt() + EPS);
                    }
                }
            }
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
