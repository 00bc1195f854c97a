//! Model and training keys shared by `train` and `sweep`.

use anyhow::{anyhow, bail, Result};
use clap::Args;
use stiffnet::crossformer::ModelConfig;
use stiffnet::kan::{HeadKind, GRID_SIZES, NEURON_CHOICES};
use stiffnet::train::{OptimizerKind, TrainConfig, LEARNING_RATES};

use crate::config::{ensure_range, Settings};

pub const HYPER_KEYS: [&str; 16] = [
    "seed",
    "head",
    "neurons",
    "grid",
    "lr",
    "optimizer",
    "d_model",
    "d_ff",
    "heads",
    "levels",
    "routers",
    "seg_len",
    "batch_size",
    "max_epochs",
    "patience",
    "clip",
];

/// Overrides for the shared keys. `sweep` accepts comma lists for
/// neurons, grid, lr, optimizer and d_model.
#[derive(Debug, Clone, Default, Args)]
pub struct HyperFlags {
    /// Initialization and shuffling seed.
    #[arg(long)]
    pub seed: Option<String>,
    /// Output head: kan | linear.
    #[arg(long)]
    pub head: Option<String>,
    /// KAN hidden width: 5 | 10.
    #[arg(long)]
    pub neurons: Option<String>,
    /// KAN grid intervals: 5 | 15 | 50.
    #[arg(long)]
    pub grid: Option<String>,
    /// Learning rate: 1e-3 | 1e-4 | 1e-5.
    #[arg(long)]
    pub lr: Option<String>,
    /// adam | rmsprop.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub d_model: Option<String>,
    /// Feed-forward width (default 2 * d_model).
    #[arg(long)]
    pub d_ff: Option<String>,
    #[arg(long)]
    pub heads: Option<String>,
    /// Encoder levels.
    #[arg(long)]
    pub levels: Option<String>,
    #[arg(long)]
    pub routers: Option<String>,
    #[arg(long)]
    pub seg_len: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub max_epochs: Option<String>,
    #[arg(long)]
    pub patience: Option<String>,
    /// Global gradient-norm cap; 0 disables clipping.
    #[arg(long)]
    pub clip: Option<String>,
}

impl HyperFlags {
    pub fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("seed", &self.seed),
            ("head", &self.head),
            ("neurons", &self.neurons),
            ("grid", &self.grid),
            ("lr", &self.lr),
            ("optimizer", &self.optimizer),
            ("d_model", &self.d_model),
            ("d_ff", &self.d_ff),
            ("heads", &self.heads),
            ("levels", &self.levels),
            ("routers", &self.routers),
            ("seg_len", &self.seg_len),
            ("batch_size", &self.batch_size),
            ("max_epochs", &self.max_epochs),
            ("patience", &self.patience),
            ("clip", &self.clip),
        ]
    }
}

pub fn check_neurons(n: usize) -> Result<()> {
    ensure_range(NEURON_CHOICES.contains(&n), "neurons", &format!("one of {NEURON_CHOICES:?}"), n)
}

pub fn check_grid(g: usize) -> Result<()> {
    ensure_range(GRID_SIZES.contains(&g), "grid", &format!("one of {GRID_SIZES:?}"), g)
}

pub fn check_lr(lr: f64) -> Result<()> {
    ensure_range(LEARNING_RATES.contains(&lr), "lr", "one of 1e-3, 1e-4, 1e-5", lr)
}

pub fn parse_optimizer(s: &str) -> Result<OptimizerKind> {
    s.parse().map_err(|e: String| anyhow!("config key `optimizer`: {e}"))
}

/// Everything except the head, which callers resolve themselves.
pub fn resolve_trunk(s: &mut Settings, t_len: usize, d_model: usize) -> Result<TrainConfig> {
    let seed = s.get("seed", 0u64)?;
    let d_ff = s.get("d_ff", 2 * d_model)?;
    let heads = s.get("heads", 4usize)?;
    let levels = s.get("levels", 3usize)?;
    let routers = s.get("routers", 4usize)?;
    let seg_len = s.get("seg_len", 20usize)?;
    let batch_size = s.get("batch_size", 16usize)?;
    let max_epochs = s.get("max_epochs", 100usize)?;
    let patience = s.get("patience", 10usize)?;
    let clip = s.get("clip", 1.0f64)?;
    ensure_range(d_model >= 1, "d_model", "at least 1", d_model)?;
    ensure_range(heads >= 1 && d_model.is_multiple_of(heads), "heads", "a divisor of d_model", heads)?;
    ensure_range(d_ff >= 1, "d_ff", "at least 1", d_ff)?;
    ensure_range((1..=8).contains(&levels), "levels", "in 1..=8", levels)?;
    ensure_range(routers >= 1, "routers", "at least 1", routers)?;
    ensure_range(
        seg_len >= 1 && t_len.is_multiple_of(seg_len),
        "seg_len",
        &format!("a divisor of the record length {t_len}"),
        seg_len,
    )?;
    ensure_range(batch_size >= 1, "batch_size", "at least 1", batch_size)?;
    ensure_range(patience >= 1, "patience", "at least 1", patience)?;
    ensure_range(clip >= 0.0 && clip.is_finite(), "clip", "a finite value >= 0", clip)?;
    Ok(TrainConfig {
        lr: 1e-3,
        optimizer: OptimizerKind::Adam,
        batch_size,
        max_epochs,
        patience,
        seed,
        clip: (clip > 0.0).then_some(clip),
        model: ModelConfig {
            t_len,
            seg_len,
            d_model,
            n_heads: heads,
            n_levels: levels,
            n_routers: routers,
            d_ff,
            ..ModelConfig::default()
        },
    })
}

/// Full single-run configuration for records of length `t_len`.
pub fn resolve(s: &mut Settings, t_len: usize) -> Result<TrainConfig> {
    let d_model = s.get("d_model", 256usize)?;
    let mut cfg = resolve_trunk(s, t_len, d_model)?;
    cfg.model.head = match s.get("head", "kan".to_string())?.as_str() {
        "kan" => {
            let neurons = s.get("neurons", 5usize)?;
            let grid = s.get("grid", 5usize)?;
            check_neurons(neurons)?;
            check_grid(grid)?;
            HeadKind::Kan { neurons, grid }
        }
        "linear" => HeadKind::Linear,
        other => bail!("config key `head` must be kan or linear (got {other})"),
    };
    cfg.lr = s.get("lr", 1e-3f64)?;
    check_lr(cfg.lr)?;
    cfg.optimizer = parse_optimizer(&s.get("optimizer", "adam".to_string())?)?;
    cfg.validate().map_err(|e| anyhow!("invalid configuration: {e}"))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(pairs: &[(&str, &str)]) -> Settings {
        let mut s = Settings::default();
        let owned: Vec<(String, Option<String>)> =
            pairs.iter().map(|(k, v)| (k.to_string(), Some(v.to_string()))).collect();
        let refs: Vec<(&str, &Option<String>)> = owned.iter().map(|(k, v)| (k.as_str(), v)).collect();
        s.apply(&refs);
        s
    }

    #[test]
    fn defaults_are_full_scale() {
        let cfg = resolve(&mut Settings::default(), 500).unwrap();
        assert_eq!(cfg.model.d_model, 256);
        assert_eq!(cfg.model.d_ff, 512);
        assert_eq!(cfg.model.head, HeadKind::Kan { neurons: 5, grid: 5 });
        assert_eq!(cfg.clip, Some(1.0));
        assert!(cfg.validate_full_scale().is_ok());
    }

    #[test]
    fn illegal_values_name_their_key() {
        for (k, v) in [
            ("neurons", "7"),
            ("grid", "10"),
            ("lr", "0.01"),
            ("seg_len", "30"),
            ("heads", "3"),
            ("head", "mlp"),
            ("optimizer", "sgd"),
        ] {
            let e = resolve(&mut settings(&[(k, v)]), 500).unwrap_err().to_string();
            assert!(e.contains(&format!("`{k}`")), "{k}: {e}");
        }
    }

    #[test]
    fn linear_head_ignores_kan_keys() {
        let mut s = settings(&[("head", "linear"), ("clip", "0")]);
        let cfg = resolve(&mut s, 500).unwrap();
        assert_eq!(cfg.model.head, HeadKind::Linear);
        assert_eq!(cfg.clip, None);
        assert!(!s.snapshot().contains_key("neurons"));
    }
}
