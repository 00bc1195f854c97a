//! Behavioral model of a 1.5-bit pipeline sub-ADC stage.
//!
//! A clocked comparator pair latches one of three codes on every rising clock
//! edge. Each output node is driven toward 0 V or the supply through the
//! driver resistance into the randomized RC load, which gives the slow
//! exponential settling that coexists with the nanosecond clock edges.

mod ode;

use thiserror::Error;

pub use ode::{backward_euler_step, FnSystem, OdeSystem, StiffOdeStepper};

use crate::signal::{Pwl, RecordParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdcError {
    #[error("Newton iteration did not converge at t={t:e} s: residual {residual:e} after {iterations} iterations")]
    NewtonDiverged {
        t: f64,
        residual: f64,
        iterations: usize,
    },
    #[error("singular Newton matrix at t={t:e} s")]
    SingularJacobian { t: f64 },
    #[error("input waveforms have mismatched lengths ({0}, {1}, {2})")]
    LengthMismatch(usize, usize, usize),
}

/// Output code of the stage. `11` is not representable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Code {
    /// `00`
    Low,
    /// `01`
    Mid,
    /// `10`
    High,
}

impl Code {
    /// `(DOut<1>, DOut<0>)`
    pub fn bits(self) -> (u8, u8) {
        match self {
            Code::Low => (0, 0),
            Code::Mid => (0, 1),
            Code::High => (1, 0),
        }
    }
}

/// Standard 1.5-bit decision with thresholds at `±v_ref / 4`.
pub fn comparator_code(v_diff: f64, v_ref: f64) -> Code {
    debug_assert!(v_ref > 0.0);
    let th = v_ref / 4.0;
    if v_diff > th {
        Code::High
    } else if v_diff < -th {
        Code::Low
    } else {
        Code::Mid
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdcConfig {
    pub v_ref: f64,
    pub r_drv: f64,
    pub v_high: f64,
    pub clk_threshold: f64,
    pub fine_dt: f64,
}

impl Default for AdcConfig {
    fn default() -> Self {
        Self {
            v_ref: 0.4,
            r_drv: 1000.0,
            v_high: 0.9,
            clk_threshold: 0.45,
            fine_dt: 0.25e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdcState {
    pub latch: Code,
    pub v_out1: f64,
    pub v_out2: f64,
    pub last_clk: f64,
}

impl AdcState {
    pub fn reset() -> Self {
        Self {
            latch: Code::Low,
            v_out1: 0.0,
            v_out2: 0.0,
            last_clk: 0.0,
        }
    }
}

/// Both output nodes relaxing toward their latch-selected targets.
struct OutputStage {
    tau: f64,
    target: [f64; 2],
}

impl OdeSystem for OutputStage {
    fn dim(&self) -> usize {
        2
    }

    fn rhs(&self, _t: f64, y: &[f64], dydt: &mut [f64]) {
        for i in 0..2 {
            dydt[i] = (self.target[i] - y[i]) / self.tau;
        }
    }

    fn jacobian(&self, _t: f64, _y: &[f64], jac: &mut [f64]) {
        jac.copy_from_slice(&[-1.0 / self.tau, 0.0, 0.0, -1.0 / self.tau]);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdcTrace {
    pub dout1: Vec<f64>,
    pub dout0: Vec<f64>,
    /// Interpolated times of the rising threshold crossings that latched.
    pub latch_times: Vec<f64>,
    pub codes: Vec<Code>,
}

/// Simulates the stage on inputs sampled every `cfg.fine_dt` seconds.
///
/// A latch event fires when the clock crosses `cfg.clk_threshold` upward
/// between two samples. The crossing time is found by linear interpolation,
/// the integration step is split there, and the comparator sees the
/// differential input interpolated to that instant.
pub fn simulate_record(
    vin_p: &[f64],
    vin_m: &[f64],
    clk: &[f64],
    params: &RecordParams,
    cfg: &AdcConfig,
) -> Result<AdcTrace, AdcError> {
    let n = vin_p.len();
    if vin_m.len() != n || clk.len() != n {
        return Err(AdcError::LengthMismatch(n, vin_m.len(), clk.len()));
    }
    let dt = cfg.fine_dt;
    let mut stage = OutputStage {
        tau: (cfg.r_drv + params.r_load) * params.c_load,
        target: [0.0, 0.0],
    };
    let stepper = StiffOdeStepper::new(dt);
    let mut state = AdcState::reset();
    let set_target = |stage: &mut OutputStage, code: Code| {
        let (d1, d0) = code.bits();
        stage.target = [cfg.v_high * d1 as f64, cfg.v_high * d0 as f64];
    };
    set_target(&mut stage, state.latch);

    let mut trace = AdcTrace {
        dout1: Vec::with_capacity(n),
        dout0: Vec::with_capacity(n),
        latch_times: Vec::new(),
        codes: Vec::new(),
    };
    if n == 0 {
        return Ok(trace);
    }
    state.last_clk = clk[0];
    trace.dout1.push(state.v_out1);
    trace.dout0.push(state.v_out2);

    for k in 1..n {
        let t0 = (k - 1) as f64 * dt;
        let mut y = [state.v_out1, state.v_out2];
        let (c0, c1) = (state.last_clk, clk[k]);
        if c0 < cfg.clk_threshold && c1 >= cfg.clk_threshold {
            let frac = (cfg.clk_threshold - c0) / (c1 - c0);
            let h1 = frac * dt;
            if h1 > 0.0 {
                let z = stepper.step_by(&stage, t0, &y, h1)?;
                y = [z[0], z[1]];
            }
            let vd0 = vin_p[k - 1] - vin_m[k - 1];
            let vd1 = vin_p[k] - vin_m[k];
            let code = comparator_code(vd0 + frac * (vd1 - vd0), cfg.v_ref);
            state.latch = code;
            set_target(&mut stage, code);
            trace.latch_times.push(t0 + h1);
            trace.codes.push(code);
            let h2 = dt - h1;
            if h2 > 0.0 {
                let z = stepper.step_by(&stage, t0 + h1, &y, h2)?;
                y = [z[0], z[1]];
            }
        } else {
            let z = stepper.step(&stage, t0, &y)?;
            y = [z[0], z[1]];
        }
        state.v_out1 = y[0];
        state.v_out2 = y[1];
        state.last_clk = c1;
        trace.dout1.push(y[0]);
        trace.dout0.push(y[1]);
    }
    Ok(trace)
}

/// Samples the waveforms on the fine grid over `[0, duration)` and simulates.
pub fn simulate_pwl(
    vin_p: &Pwl,
    vin_m: &Pwl,
    clk: &Pwl,
    params: &RecordParams,
    cfg: &AdcConfig,
    duration: f64,
) -> Result<AdcTrace, AdcError> {
    let n = (duration / cfg.fine_dt).round() as usize;
    simulate_record(
        &vin_p.sample(cfg.fine_dt, n),
        &vin_m.sample(cfg.fine_dt, n),
        &clk.sample(cfg.fine_dt, n),
        params,
        cfg,
    )
}
