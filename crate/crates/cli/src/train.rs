use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use stiffnet::crossformer::{save_checkpoint, CrossformerKan};
use stiffnet::dataset::{load, Dataset, Split};
use stiffnet::train::{evaluate, load_state, resume, save_state, RunLog, TrainConfig, TrainState};

use crate::config::Settings;
use crate::hyper::{self, HyperFlags, HYPER_KEYS};
use crate::manifest::RunManifest;
use crate::svg::{stacked, Panel, Series};

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// key = value config file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset file written by `generate`.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Directory for the checkpoint, run log, curve and state.
    #[arg(long)]
    pub out_dir: Option<String>,
    /// Continue from `<out_dir>/state.scts` up to `max_epochs` total epochs.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub hyper: HyperFlags,
}

pub const CHECKPOINT: &str = "model.sckp";
pub const RUN_LOG: &str = "runlog.csv";
pub const CURVE: &str = "curve.svg";
pub const STATE: &str = "state.scts";

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        bail!("dataset {} does not exist", path.display());
    }
    load(path).with_context(|| format!("cannot load dataset {}", path.display()))
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let mut keys = vec!["dataset", "out_dir"];
    keys.extend(HYPER_KEYS);
    let mut s = Settings::load(args.config.as_deref(), &keys)?;
    s.apply(&[("dataset", &args.dataset), ("out_dir", &args.out_dir)]);
    s.apply(&args.hyper.pairs());
    let dataset = PathBuf::from(s.require::<String>("dataset")?);
    let out_dir = PathBuf::from(s.get("out_dir", "run".to_string())?);
    let data = load_dataset(&dataset)?;
    let cfg = hyper::resolve(&mut s, data.gen.n_samples)?;

    fs::create_dir_all(&out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    let state_path = out_dir.join(STATE);
    let start = if args.resume {
        if !state_path.exists() {
            bail!("nothing to resume: {} does not exist", state_path.display());
        }
        let st = load_state(&state_path)?;
        if st.model.cfg != cfg.model || st.model.seed != cfg.seed || st.optimizer.kind != cfg.optimizer {
            bail!("saved state in {} was trained with a different configuration", out_dir.display());
        }
        st
    } else {
        TrainState::new(CrossformerKan::new(cfg.model, cfg.seed)?, &cfg)
    };

    let st = fit(start, &data, &cfg, &state_path)?;
    let mut log = st.log.clone();
    let best = st.best_model();
    if !data.indices(Split::Test).is_empty() {
        log.test_nrmse = Some(evaluate(&best, &data, Split::Test)?);
    }

    let ckpt = out_dir.join(CHECKPOINT);
    save_checkpoint(&best, &ckpt)?;
    let log_path = out_dir.join(RUN_LOG);
    fs::write(&log_path, log.to_csv())?;
    let curve = out_dir.join(CURVE);
    fs::write(&curve, learning_curve(&log, &cfg))?;

    match (log.best_epoch, log.epochs.last()) {
        (Some(b), Some(last)) => println!(
            "trained {} epochs ({:?}); best epoch {b} val loss {:.6e}; last val nrmse {:.3}%{}",
            log.epochs.len(),
            log.stop,
            log.best_val,
            last.val_nrmse,
            log.test_nrmse.map(|t| format!("; test nrmse {t:.3}%")).unwrap_or_default()
        ),
        _ => println!("no epochs run; checkpoint holds the initial parameters"),
    }

    let mut m = RunManifest::new("train", s.source.as_deref(), s.snapshot(), cfg.seed);
    for p in [&ckpt, &log_path, &curve, &state_path] {
        m.add(p)?;
    }
    m.write(&out_dir.join("train.manifest.json"))?;
    Ok(())
}

/// Runs to `cfg.max_epochs`, saving the state after every epoch.
pub fn fit(start: TrainState, data: &Dataset, cfg: &TrainConfig, state_path: &Path) -> Result<TrainState> {
    let mut save_err = None;
    let st = resume(start, data, cfg, &mut |st| {
        if let Some(e) = st.log.epochs.last() {
            eprintln!(
                "epoch {:>3}  train {:.6e}  val {:.6e}  val nrmse {:.3}%  clamp {:.3}  {:.0} ms",
                e.epoch, e.train_loss, e.val_loss, e.val_nrmse, e.clamp_rate, e.wall_ms
            );
        }
        if save_err.is_none() {
            save_err = save_state(st, state_path).err();
        }
    })?;
    if let Some(e) = save_err {
        return Err(anyhow!("cannot save training state: {e}"));
    }
    save_state(&st, state_path)?;
    Ok(st)
}

pub fn learning_curve(log: &RunLog, cfg: &TrainConfig) -> String {
    let x: Vec<f64> = log.epochs.iter().map(|e| e.epoch as f64).collect();
    let train: Vec<f64> = log.epochs.iter().map(|e| e.train_loss).collect();
    let val: Vec<f64> = log.epochs.iter().map(|e| e.val_loss).collect();
    let nrmse: Vec<f64> = log.epochs.iter().map(|e| e.val_nrmse).collect();
    let title = format!(
        "learning curves: {} head, d_model {}, lr {}, {}",
        cfg.model.head.name(),
        cfg.model.d_model,
        cfg.lr,
        cfg.optimizer.name()
    );
    stacked(
        &title,
        &x,
        "epoch",
        &[
            Panel {
                title: "loss (mean squared error, normalized)",
                series: vec![
                    Series { label: "train", y: &train, color: "#1f77b4", dashed: false },
                    Series { label: "validation", y: &val, color: "#d62728", dashed: false },
                ],
            },
            Panel {
                title: "validation NRMSE (%)",
                series: vec![Series { label: "validation", y: &nrmse, color: "#d62728", dashed: true }],
            },
        ],
    )
}
