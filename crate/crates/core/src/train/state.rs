//! Little-endian "SCTS" training state: the current model checkpoint, the best
//! parameters, optimizer moments, early-stop counter and the epoch log.

use std::fs;
use std::path::Path;

use super::{EpochLog, Optimizer, OptimizerKind, RunLog, StopReason, TrainError, TrainState};
use crate::crossformer::checkpoint::{read_params, write_params, Cursor};
use crate::crossformer::{read_checkpoint, write_checkpoint};

pub const STATE_MAGIC: [u8; 4] = *b"SCTS";
pub const STATE_VERSION: u16 = 1;

pub fn write_state(st: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&STATE_MAGIC);
    out.extend_from_slice(&STATE_VERSION.to_le_bytes());
    let ckpt = write_checkpoint(&st.model);
    out.extend_from_slice(&(ckpt.len() as u64).to_le_bytes());
    out.extend_from_slice(&ckpt);
    write_params(&st.best, &mut out);

    let o = &st.optimizer;
    out.push(match o.kind {
        OptimizerKind::Adam => 0,
        OptimizerKind::RmsProp => 1,
    });
    out.extend_from_slice(&o.lr.to_le_bytes());
    out.extend_from_slice(&o.t.to_le_bytes());
    write_params(&o.m, &mut out);
    write_params(&o.v, &mut out);

    let log = &st.log;
    out.extend_from_slice(&(st.wait as u64).to_le_bytes());
    out.extend_from_slice(&(log.best_epoch.unwrap_or(0) as u64).to_le_bytes());
    out.extend_from_slice(&log.best_val.to_le_bytes());
    out.push(match log.stop {
        StopReason::NotStarted => 0,
        StopReason::MaxEpochs => 1,
        StopReason::EarlyStop => 2,
    });
    out.push(log.test_nrmse.is_some() as u8);
    out.extend_from_slice(&log.test_nrmse.unwrap_or(0.0).to_le_bytes());
    out.extend_from_slice(&(log.epochs.len() as u64).to_le_bytes());
    for e in &log.epochs {
        out.extend_from_slice(&(e.epoch as u64).to_le_bytes());
        for v in [e.train_loss, e.val_loss, e.val_nrmse, e.wall_ms, e.clamp_rate] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_state(buf: &[u8]) -> Result<TrainState, TrainError> {
    let bad = |m: &str| TrainError::State(m.to_string());
    let mut cur = Cursor { buf, pos: 0 };
    let magic = cur.bytes(4)?;
    if magic != STATE_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = cur.u16()?;
    if version != STATE_VERSION {
        return Err(TrainError::State(format!(
            "unsupported version {version} (expected {STATE_VERSION})"
        )));
    }
    let len = cur.u64()? as usize;
    let model = read_checkpoint(cur.bytes(len)?)?;
    let best = read_params(&mut cur, &model.params)?;
    let kind = match cur.u8()? {
        0 => OptimizerKind::Adam,
        1 => OptimizerKind::RmsProp,
        _ => return Err(bad("unknown optimizer tag")),
    };
    let lr = cur.f64()?;
    let t = cur.u64()?;
    let m = read_params(&mut cur, &model.params)?;
    let v = read_params(&mut cur, &model.params)?;

    let wait = cur.u64()? as usize;
    let best_epoch = match cur.u64()? {
        0 => None,
        e => Some(e as usize),
    };
    let best_val = cur.f64()?;
    let stop = match cur.u8()? {
        0 => StopReason::NotStarted,
        1 => StopReason::MaxEpochs,
        2 => StopReason::EarlyStop,
        _ => return Err(bad("unknown stop tag")),
    };
    let has_test = cur.u8()? != 0;
    let test = cur.f64()?;
    let n = cur.u64()? as usize;
    let mut epochs = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        epochs.push(EpochLog {
            epoch: cur.u64()? as usize,
            train_loss: cur.f64()?,
            val_loss: cur.f64()?,
            val_nrmse: cur.f64()?,
            wall_ms: cur.f64()?,
            clamp_rate: cur.f64()?,
        });
    }
    if cur.pos != buf.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(TrainState {
        model,
        best,
        optimizer: Optimizer { kind, lr, t, m, v },
        log: RunLog {
            epochs,
            best_epoch,
            best_val,
            stop,
            test_nrmse: has_test.then_some(test),
        },
        wait,
    })
}

pub fn save_state(st: &TrainState, path: impl AsRef<Path>) -> Result<(), TrainError> {
    fs::write(path, write_state(st)).map_err(|e| TrainError::Model(e.into()))
}

pub fn load_state(path: impl AsRef<Path>) -> Result<TrainState, TrainError> {
    let bytes = fs::read(path).map_err(|e| TrainError::Model(e.into()))?;
    read_state(&bytes)
}
