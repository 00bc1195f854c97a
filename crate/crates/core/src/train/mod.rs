//! Mean-squared-error training with early stopping, NRMSE reporting and the
//! linear-versus-KAN head comparison.

mod optim;
mod state;

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use optim::{clip_global_norm, Optimizer, OptimizerKind};
pub use state::{load_state, read_state, save_state, write_state, STATE_MAGIC, STATE_VERSION};

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::crossformer::{CrossformerKan, ModelConfig, ModelError};
use crate::dataset::{normalize, Dataset, Split, N_INPUTS};
use crate::kan::{ClampStats, HeadKind};
use crate::nn::ParamStore;

pub const LEARNING_RATES: [f64; 3] = [1e-3, 1e-4, 1e-5];
pub const D_MODELS: [usize; 2] = [256, 512];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: {0} values vs {1}")]
    Shape(usize, usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("split {0:?} is empty")]
    EmptySplit(Split),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training state: {0}")]
    State(String),
}

/// `(1 / (N T)) * sum_i sum_j (y_j^(i) - yhat_j^(i))^2` over flattened rows.
pub fn waveform_mse(y: &[f64], y_hat: &[f64]) -> Result<f64, TrainError> {
    if y.len() != y_hat.len() || y.is_empty() {
        return Err(TrainError::Shape(y.len(), y_hat.len()));
    }
    let s: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / y.len() as f64)
}

/// The same loss recorded on a tape.
pub fn waveform_mse_var<'t>(y: &Var<'t>, y_hat: &Var<'t>) -> crate::autodiff::Result<Var<'t>> {
    let d = y_hat.sub(y)?;
    Ok(d.mul(&d)?.mean())
}

/// `100 * sqrt(waveform_mse)`: the percentage error against a unit normalized range.
pub fn nrmse_report(y: &[f64], y_hat: &[f64]) -> Result<f64, TrainError> {
    Ok(100.0 * waveform_mse(y, y_hat)?.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip: Option<f64>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            batch_size: 16,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            clip: Some(1.0),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Learning rate, head settings and loop sizes must be legal. `d_model`
    /// only has to split evenly across heads, so reduced-width runs stay
    /// possible; [`TrainConfig::validate_full_scale`] adds the width check.
    pub fn validate(&self) -> Result<(), TrainError> {
        if !LEARNING_RATES.contains(&self.lr) {
            return Err(TrainError::Config(format!("lr {} not in {LEARNING_RATES:?}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::Config("patience must be at least 1".into()));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(TrainError::Config(format!("clip norm {c} must be positive")));
            }
        }
        self.model.validate()?;
        Ok(())
    }

    pub fn validate_full_scale(&self) -> Result<(), TrainError> {
        self.validate()?;
        if !D_MODELS.contains(&self.model.d_model) {
            return Err(TrainError::Config(format!(
                "d_model {} not in {D_MODELS:?}",
                self.model.d_model
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_nrmse: f64,
    pub wall_ms: f64,
    pub clamp_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    NotStarted,
    MaxEpochs,
    EarlyStop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_val: f64,
    pub stop: StopReason,
    pub test_nrmse: Option<f64>,
}

impl Default for RunLog {
    fn default() -> Self {
        Self {
            epochs: Vec::new(),
            best_epoch: None,
            best_val: f64::INFINITY,
            stop: StopReason::NotStarted,
            test_nrmse: None,
        }
    }
}

impl RunLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,val_nrmse,wall_ms,clamp_rate";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for e in &self.epochs {
            writeln!(
                s,
                "{},{:e},{:e},{:e},{:.3},{:e}",
                e.epoch, e.train_loss, e.val_loss, e.val_nrmse, e.wall_ms, e.clamp_rate
            )
            .expect("write to string");
        }
        s
    }

    /// True when every logged value except wall time is bitwise equal.
    pub fn same_values(&self, other: &RunLog) -> bool {
        let key = |e: &EpochLog| {
            (
                e.epoch,
                e.train_loss.to_bits(),
                e.val_loss.to_bits(),
                e.val_nrmse.to_bits(),
                e.clamp_rate.to_bits(),
            )
        };
        self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| key(a) == key(b))
            && self.best_epoch == other.best_epoch
            && self.best_val.to_bits() == other.best_val.to_bits()
            && self.stop == other.stop
    }
}

/// Anything mapping normalized `[B, 3, T]` inputs to `[B, 2, T]` outputs.
pub trait Predictor {
    fn predict_batch(&self, x: &Tensor) -> Result<Tensor, TrainError>;
}

impl Predictor for CrossformerKan {
    fn predict_batch(&self, x: &Tensor) -> Result<Tensor, TrainError> {
        Ok(self.predict(x)?.0)
    }
}

/// Normalized inputs and targets of one split, record-major.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub indices: Vec<usize>,
    pub t_len: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Prepared {
    pub fn new(data: &Dataset, split: Split) -> Result<Self, TrainError> {
        Self::from_indices(data, data.indices(split)).map_err(|e| match e {
            TrainError::EmptySplit(_) => TrainError::EmptySplit(split),
            e => e,
        })
    }

    pub fn from_indices(data: &Dataset, indices: Vec<usize>) -> Result<Self, TrainError> {
        if indices.is_empty() {
            return Err(TrainError::EmptySplit(Split::Unassigned));
        }
        let t = data.gen.n_samples;
        let mut x = Vec::with_capacity(indices.len() * N_INPUTS * t);
        let mut y = Vec::with_capacity(indices.len() * (data.records[0].data.len() - N_INPUTS * t));
        for &i in &indices {
            let r = &data.records[i];
            x.extend(normalize(r.inputs(), 0, t));
            y.extend(normalize(r.outputs(), N_INPUTS, t));
        }
        Ok(Self {
            indices,
            t_len: t,
            x,
            y,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn x_width(&self) -> usize {
        self.x.len() / self.len()
    }

    fn y_width(&self) -> usize {
        self.y.len() / self.len()
    }

    /// Inputs and targets of the given positions as `[B, 3, T]` and `[B, 2, T]`.
    pub fn batch(&self, rows: &[usize]) -> (Tensor, Tensor) {
        let (wx, wy) = (self.x_width(), self.y_width());
        let gather = |src: &[f64], w: usize| -> Vec<f64> {
            rows.iter().flat_map(|&r| src[r * w..(r + 1) * w].iter().copied()).collect()
        };
        let t = self.t_len;
        (
            Tensor::new(vec![rows.len(), wx / t, t], gather(&self.x, wx)).expect("batch shape"),
            Tensor::new(vec![rows.len(), wy / t, t], gather(&self.y, wy)).expect("batch shape"),
        )
    }
}

const EVAL_BATCH: usize = 16;

/// Per-record NRMSE (percent) in split order.
pub fn per_record_nrmse(model: &dyn Predictor, prep: &Prepared) -> Result<Vec<f64>, TrainError> {
    let mut out = Vec::with_capacity(prep.len());
    let rows: Vec<usize> = (0..prep.len()).collect();
    for chunk in rows.chunks(EVAL_BATCH) {
        let (x, y) = prep.batch(chunk);
        let y_hat = model.predict_batch(&x)?;
        if y_hat.shape() != y.shape() {
            return Err(TrainError::Shape(y_hat.numel(), y.numel()));
        }
        let w = prep.y_width();
        for r in 0..chunk.len() {
            out.push(nrmse_report(&y.data()[r * w..(r + 1) * w], &y_hat.data()[r * w..(r + 1) * w])?);
        }
    }
    Ok(out)
}

/// Mean per-record NRMSE (percent) over a split.
pub fn evaluate(model: &dyn Predictor, data: &Dataset, split: Split) -> Result<f64, TrainError> {
    let v = per_record_nrmse(model, &Prepared::new(data, split)?)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean loss and mean NRMSE over a prepared split.
fn validation(model: &CrossformerKan, prep: &Prepared) -> Result<(f64, f64), TrainError> {
    let rows: Vec<usize> = (0..prep.len()).collect();
    let w = prep.y_width();
    let (mut loss, mut nrmse) = (0.0, 0.0);
    for chunk in rows.chunks(EVAL_BATCH) {
        let (x, y) = prep.batch(chunk);
        let y_hat = model.predict(&x)?.0;
        for r in 0..chunk.len() {
            let l = waveform_mse(&y.data()[r * w..(r + 1) * w], &y_hat.data()[r * w..(r + 1) * w])?;
            loss += l;
            nrmse += 100.0 * l.sqrt();
        }
    }
    let n = prep.len() as f64;
    Ok((loss / n, nrmse / n))
}

/// Training order of epoch `epoch` (1-based), a pure function of the seed.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: CrossformerKan,
    pub best: ParamStore,
    pub optimizer: Optimizer,
    pub log: RunLog,
    /// Epochs since the last validation improvement.
    pub wait: usize,
}

impl TrainState {
    pub fn new(model: CrossformerKan, cfg: &TrainConfig) -> Self {
        let optimizer = Optimizer::new(cfg.optimizer, cfg.lr, &model.params);
        Self {
            best: model.params.clone(),
            model,
            optimizer,
            log: RunLog::default(),
            wait: 0,
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.log.epochs.len()
    }

    /// The model with the best validation parameters.
    pub fn best_model(&self) -> CrossformerKan {
        let mut m = self.model.clone();
        m.params = self.best.clone();
        m
    }
}

/// One optimizer step on a batch; returns the batch loss and clamp counts.
pub fn train_step(
    model: &mut CrossformerKan,
    opt: &mut Optimizer,
    x: &Tensor,
    y: &Tensor,
    clip: Option<f64>,
) -> Result<(f64, ClampStats), TrainError> {
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let mut stats = ClampStats::default();
    let y_hat = model.forward(&p, &tape.constant(x), &mut stats)?;
    let loss = waveform_mse_var(&tape.constant(y), &y_hat)?;
    let value = loss.with_value(|v| v[0]);
    if !value.is_finite() {
        return Ok((value, stats));
    }
    let g = tape.backward(loss)?;
    let mut grads: Vec<Vec<f64>> = p
        .vars()
        .iter()
        .map(|v| g.get(*v).expect("parameter gradient").to_vec())
        .collect();
    if let Some(c) = clip {
        clip_global_norm(&mut grads, c);
    }
    opt.step(&mut model.params, &grads);
    Ok((value, stats))
}

/// Starts a run from an initialized model.
pub fn train(model: CrossformerKan, data: &Dataset, cfg: &TrainConfig) -> Result<TrainState, TrainError> {
    resume(TrainState::new(model, cfg), data, cfg, &mut |_| {})
}

/// Continues a run until `cfg.max_epochs` total epochs or early stopping.
/// `on_epoch` sees the state after every completed epoch.
pub fn resume(
    mut st: TrainState,
    data: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&TrainState),
) -> Result<TrainState, TrainError> {
    cfg.validate()?;
    if st.log.stop == StopReason::EarlyStop || st.epochs_done() >= cfg.max_epochs {
        return Ok(st);
    }
    let train_set = Prepared::new(data, Split::Train)?;
    let val_set = Prepared::new(data, Split::Val)?;
    st.optimizer.lr = cfg.lr;

    while st.epochs_done() < cfg.max_epochs {
        let epoch = st.epochs_done() + 1;
        let start = Instant::now();
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let mut clamp = ClampStats::default();
        let mut loss_sum = 0.0;
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train_set.batch(rows);
            let (loss, stats) = train_step(&mut st.model, &mut st.optimizer, &x, &y, cfg.clip)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: b });
            }
            loss_sum += loss * rows.len() as f64;
            clamp.merge(stats);
        }
        let (val_loss, val_nrmse) = validation(&st.model, &val_set)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFinite { epoch, batch: usize::MAX });
        }
        st.log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
            val_nrmse,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            clamp_rate: clamp.rate(),
        });
        if val_loss < st.log.best_val {
            st.log.best_val = val_loss;
            st.log.best_epoch = Some(epoch);
            st.best = st.model.params.clone();
            st.wait = 0;
        } else {
            st.wait += 1;
        }
        st.log.stop = if st.wait >= cfg.patience {
            StopReason::EarlyStop
        } else {
            StopReason::MaxEpochs
        };
        on_epoch(&st);
        if st.log.stop == StopReason::EarlyStop {
            break;
        }
    }
    Ok(st)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub arm: String,
    pub test_nrmse: f64,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm,test_nrmse,best_epoch,epochs_run\n");
        for r in &self.rows {
            let best = r.best_epoch.map(|e| e.to_string()).unwrap_or_default();
            writeln!(s, "{},{:.6},{},{}", r.arm, r.test_nrmse, best, r.epochs_run).expect("write to string");
        }
        s
    }

    pub fn row(&self, arm: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.arm == arm)
    }
}

/// Test-split row for an already trained predictor.
pub fn ablation_row(
    arm: &str,
    model: &dyn Predictor,
    data: &Dataset,
    best_epoch: Option<usize>,
    epochs_run: usize,
) -> Result<AblationRow, TrainError> {
    Ok(AblationRow {
        arm: arm.to_string(),
        test_nrmse: evaluate(model, data, Split::Test)?,
        best_epoch,
        epochs_run,
    })
}

/// Result of one ablation arm.
#[derive(Debug, Clone)]
pub struct ArmResult {
    pub row: AblationRow,
    pub log: RunLog,
}

/// Trains the linear-head arm and the KAN arm (with `kan` settings) from the
/// same seed and hyperparameters, and evaluates both on the test split.
pub fn ablation_run(
    data: &Dataset,
    base: &TrainConfig,
    kan: HeadKind,
) -> Result<(AblationTable, Vec<ArmResult>), TrainError> {
    let mut results = Vec::with_capacity(2);
    for head in [HeadKind::Linear, kan] {
        let mut cfg = *base;
        cfg.model.head = head;
        let model = CrossformerKan::new(cfg.model, cfg.seed)?;
        let st = train(model, data, &cfg)?;
        let mut log = st.log.clone();
        let row = ablation_row(head.name(), &st.best_model(), data, log.best_epoch, log.epochs.len())?;
        log.test_nrmse = Some(row.test_nrmse);
        results.push(ArmResult { row, log });
    }
    Ok((
        AblationTable {
            rows: results.iter().map(|r| r.row.clone()).collect(),
        },
        results,
    ))
}
