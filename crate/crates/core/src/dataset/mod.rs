//! Record generation, train/validation/test splitting and normalization.

mod io;
mod normalize;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use io::{load, read_dataset, save, write_dataset, write_record_csv, HEADER_LEN, MAGIC, RECORD_PARAMS_LEN, VERSION};
pub use normalize::{
    channel_rails, denormalize, denormalize_channel, normalize, normalize_channel, ANALOG_RAIL,
    DIGITAL_RAIL,
};

use crate::adc::{simulate_record, AdcConfig, AdcError};
use crate::signal::{
    bits_to_pwl, channel_filter_settled, differential_pair, gen_clock, gen_prbs, sample_params,
    PrbsConfig, RecordParams, SignalError, CLK_EDGE,
};

/// Input rows: VInP, VInM, ClkEval.
pub const N_INPUTS: usize = 3;
/// Output rows: DOut<1>, DOut<0>.
pub const N_OUTPUTS: usize = 2;
pub const N_ROWS: usize = N_INPUTS + N_OUTPUTS;
pub const ROW_NAMES: [&str; N_ROWS] = ["VInP", "VInM", "ClkEval", "DOut1", "DOut0"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("bad magic: expected \"SCDS\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("file has {extra} trailing bytes after the last record")]
    TrailingBytes { extra: usize },
    #[error("corrupt record {index}: {msg}")]
    Corrupt { index: usize, msg: String },
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("split fractions {0:?} do not sum to 1")]
    BadFractions([f64; 3]),
    #[error("split {0:?} is empty")]
    EmptySplit(Split),
    #[error("record {index}: {source}")]
    Signal {
        index: usize,
        #[source]
        source: SignalError,
    },
    #[error("record {index}: {source}")]
    Simulation {
        index: usize,
        #[source]
        source: AdcError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    pub duration: f64,
    pub sample_dt: f64,
    pub n_samples: usize,
    pub f_cut: f64,
    pub prbs_order: u32,
    pub clk_edge: f64,
    pub adc: AdcConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            duration: 1250e-9,
            sample_dt: 2.5e-9,
            n_samples: 500,
            f_cut: 175e6,
            prbs_order: 7,
            clk_edge: CLK_EDGE,
            adc: AdcConfig::default(),
        }
    }
}

impl GenConfig {
    /// Fine simulation steps per dataset sample.
    pub fn decimation(&self) -> Result<usize, DatasetError> {
        let ratio = self.sample_dt / self.adc.fine_dt;
        let r = ratio.round();
        if r < 1.0 || (ratio - r).abs() > 1e-9 {
            return Err(DatasetError::InvalidConfig(format!(
                "sample_dt {:e} is not an integer multiple of fine_dt {:e}",
                self.sample_dt, self.adc.fine_dt
            )));
        }
        Ok(r as usize)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        self.decimation()?;
        let span = self.n_samples as f64 * self.sample_dt;
        if self.n_samples == 0 || (span - self.duration).abs() > 1e-6 * self.duration {
            return Err(DatasetError::InvalidConfig(format!(
                "{} samples at {:e} s do not span duration {:e} s",
                self.n_samples, self.sample_dt, self.duration
            )));
        }
        if !(self.f_cut > 0.0) {
            return Err(DatasetError::InvalidConfig(format!("f_cut {} must be positive", self.f_cut)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Unassigned,
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> u8 {
        match self {
            Split::Unassigned => 0,
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Split::Unassigned,
            1 => Split::Train,
            2 => Split::Val,
            3 => Split::Test,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Unassigned => "unassigned",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?} (expected train|val|test)")),
        }
    }
}

/// One 5×T waveform matrix, rows in [`ROW_NAMES`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub data: Vec<f64>,
    pub n_samples: usize,
    pub params: RecordParams,
}

impl Record {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_samples..(i + 1) * self.n_samples]
    }

    /// Rows 0..3 (VInP, VInM, ClkEval), flat.
    pub fn inputs(&self) -> &[f64] {
        &self.data[..N_INPUTS * self.n_samples]
    }

    /// Rows 3..5 (DOut1, DOut0), flat.
    pub fn outputs(&self) -> &[f64] {
        &self.data[N_INPUTS * self.n_samples..]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub split: Vec<Split>,
    pub master_seed: u64,
    pub split_seed: Option<u64>,
    pub gen: GenConfig,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == which).collect()
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        let c = |s| self.split.iter().filter(|&&x| x == s).count();
        (c(Split::Train), c(Split::Val), c(Split::Test))
    }
}

/// Full fine-grid waveforms of one record before decimation.
#[derive(Debug, Clone)]
pub struct FineRecord {
    pub params: RecordParams,
    pub fine_dt: f64,
    pub rows: [Vec<f64>; N_ROWS],
}

/// Runs the whole chain for one record on the fine grid.
pub fn simulate_fine(master_seed: u64, index: usize, cfg: &GenConfig) -> Result<FineRecord, DatasetError> {
    let sig = |source| DatasetError::Signal { index, source };
    let dt = cfg.adc.fine_dt;
    let n_fine = cfg.n_samples * cfg.decimation()?;
    let mut params = sample_params(master_seed, index as u64);
    params.clk_edge = cfg.clk_edge;

    let n_bits = (cfg.duration / params.bit_time).ceil() as usize + 1;
    let bits = gen_prbs(&PrbsConfig {
        register_length: cfg.prbs_order,
        seed: params.prbs_seed(),
        n_bits,
    })
    .map_err(sig)?;
    let edge = params.edge_time();
    let nrz = bits_to_pwl(&bits, params.bit_time, edge, edge, -0.5, 0.5).map_err(sig)?;
    let (p, m) = differential_pair(&nrz, params.v_cm, params.v_dm);
    let vin_p = channel_filter_settled(&p.sample(dt, n_fine), dt, cfg.f_cut);
    let vin_m = channel_filter_settled(&m.sample(dt, n_fine), dt, cfg.f_cut);
    let clk = gen_clock(&params, cfg.duration).map_err(sig)?.sample(dt, n_fine);
    let trace = simulate_record(&vin_p, &vin_m, &clk, &params, &cfg.adc)
        .map_err(|source| DatasetError::Simulation { index, source })?;
    Ok(FineRecord {
        params,
        fine_dt: dt,
        rows: [vin_p, vin_m, clk, trace.dout1, trace.dout0],
    })
}

/// Generates record `index`, point-sampling the fine grid every `sample_dt`.
pub fn generate_record(master_seed: u64, index: usize, cfg: &GenConfig) -> Result<Record, DatasetError> {
    let fine = simulate_fine(master_seed, index, cfg)?;
    let step = cfg.decimation()?;
    let mut data = Vec::with_capacity(N_ROWS * cfg.n_samples);
    for row in &fine.rows {
        data.extend((0..cfg.n_samples).map(|j| row[j * step]));
    }
    Ok(Record {
        data,
        n_samples: cfg.n_samples,
        params: fine.params,
    })
}

/// Assembles an unsplit dataset from already generated records.
pub fn from_records(records: Vec<Record>, master_seed: u64, gen: GenConfig) -> Dataset {
    let n = records.len();
    Dataset {
        records,
        split: vec![Split::Unassigned; n],
        master_seed,
        split_seed: None,
        gen,
    }
}

/// Record count of a default generation run.
pub const DEFAULT_RECORDS: usize = 2000;

/// Generates `n_records` records sequentially. The result is a pure function of
/// `(n_records, master_seed, cfg)`.
pub fn build_dataset(n_records: usize, master_seed: u64, cfg: &GenConfig) -> Result<Dataset, DatasetError> {
    if n_records == 0 {
        return Err(DatasetError::InvalidConfig("n_records must be at least 1".into()));
    }
    cfg.validate()?;
    let records = (0..n_records)
        .map(|i| generate_record(master_seed, i, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(from_records(records, master_seed, *cfg))
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];

/// Per-split counts: validation and test take `floor(n * fraction)`, the
/// remainder goes to training.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> Result<(usize, usize, usize), DatasetError> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
        return Err(DatasetError::BadFractions(fractions));
    }
    // nudge so that products like 2000 * 0.15 do not land a hair below an integer
    let take = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
    let (val, test) = (take(fractions[1]), take(fractions[2]));
    Ok((n - val - test, val, test))
}

/// Deterministic shuffled partition keyed by `seed`.
pub fn split_dataset(mut d: Dataset, fractions: [f64; 3], seed: u64) -> Result<Dataset, DatasetError> {
    let (train, val, _) = split_counts(d.len(), fractions)?;
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (rank, &i) in order.iter().enumerate() {
        d.split[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    d.split_seed = Some(seed);
    Ok(d)
}
