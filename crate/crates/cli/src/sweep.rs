//! KAN hyperparameter sweeps over the cross product of list-valued keys.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use rayon::prelude::*;
use serde_json::{json, Value};
use stiffnet::crossformer::{save_checkpoint, CrossformerKan};
use stiffnet::dataset::{Dataset, Split};
use stiffnet::kan::HeadKind;
use stiffnet::train::{evaluate, train, OptimizerKind, TrainConfig, D_MODELS};

use crate::config::{ensure_range, Settings};
use crate::hyper::{self, check_grid, check_lr, check_neurons, parse_optimizer, HyperFlags, HYPER_KEYS};
use crate::manifest::{config_key, sha256_file, RunManifest};
use crate::train::{load_dataset, CHECKPOINT, RUN_LOG};

/// Spline order of every KAN edge.
pub const SPLINE_ORDER: usize = 3;

/// Named (neurons, grid) settings.
pub const PRESETS: [(&str, usize, usize); 3] = [
    ("kan-n5-g5-k3", 5, 5),
    ("kan-n5-g50-k3", 5, 50),
    ("kan-n10-g5-k3", 10, 5),
];

pub const CSV_HEADER: &str =
    "run,key,seed,neurons,grid,k,lr,optimizer,d_model,best_epoch,epochs_run,best_val_nrmse,test_nrmse";

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// key = value config file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<String>,
    /// Sweep directory; each run lives in `<out_dir>/runs/<key>`.
    #[arg(long)]
    pub out_dir: Option<String>,
    /// Comma list of presets: kan-n5-g5-k3, kan-n5-g50-k3, kan-n10-g5-k3.
    /// Replaces the neurons and grid axes.
    #[arg(long)]
    pub name: Option<String>,
    #[command(flatten)]
    pub hyper: HyperFlags,
}

struct Planned {
    cfg: TrainConfig,
    snapshot: BTreeMap<String, String>,
    key: String,
}

#[derive(Debug, Clone)]
struct Outcome {
    best_epoch: Option<usize>,
    epochs_run: usize,
    best_val_nrmse: Option<f64>,
    test_nrmse: Option<f64>,
}

fn preset(name: &str) -> Result<(usize, usize)> {
    PRESETS
        .iter()
        .find(|p| p.0 == name.trim())
        .map(|p| (p.1, p.2))
        .ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|p| p.0).collect();
            anyhow!("config key `name` must be one of {} (got {name})", names.join(", "))
        })
}

/// Expands and checks every axis. Nothing is trained here.
fn plan(s: &mut Settings, data: &Dataset, dataset_sha: &str) -> Result<Vec<Planned>> {
    let head = s.get("head", "kan".to_string())?;
    if head != "kan" {
        bail!("config key `head` must be kan for a sweep (got {head})");
    }
    let shapes: Vec<(usize, usize)> = if s.raw("name").is_some() {
        if s.raw("neurons").is_some() || s.raw("grid").is_some() {
            bail!("config key `name` cannot be combined with `neurons` or `grid`");
        }
        let names: Vec<String> = s.list("name", Vec::new())?;
        names.iter().map(|n| preset(n)).collect::<Result<_>>()?
    } else {
        let neurons: Vec<usize> = s.list("neurons", vec![5])?;
        let grids: Vec<usize> = s.list("grid", vec![5])?;
        neurons.iter().try_for_each(|&n| check_neurons(n))?;
        grids.iter().try_for_each(|&g| check_grid(g))?;
        neurons.iter().flat_map(|&n| grids.iter().map(move |&g| (n, g))).collect()
    };
    let lrs: Vec<f64> = s.list("lr", vec![1e-3])?;
    lrs.iter().try_for_each(|&lr| check_lr(lr))?;
    let optimizers: Vec<OptimizerKind> = s
        .list::<String>("optimizer", vec!["adam".into()])?
        .iter()
        .map(|o| parse_optimizer(o))
        .collect::<Result<_>>()?;
    let d_models: Vec<usize> = s.list("d_model", vec![D_MODELS[0]])?;
    for &d in &d_models {
        ensure_range(D_MODELS.contains(&d), "d_model", &format!("one of {D_MODELS:?}"), d)?;
    }

    let mut runs = Vec::new();
    for &d_model in &d_models {
        let mut local = s.clone();
        let trunk = hyper::resolve_trunk(&mut local, data.gen.n_samples, d_model)?;
        let mut base = local.snapshot().clone();
        for axis in ["name", "head", "neurons", "grid", "lr", "optimizer", "d_model"] {
            base.remove(axis);
        }
        base.insert("dataset_sha256".into(), dataset_sha.to_string());
        for &(neurons, grid) in &shapes {
            for &lr in &lrs {
                for &optimizer in &optimizers {
                    let mut cfg = trunk;
                    cfg.model.head = HeadKind::Kan { neurons, grid };
                    cfg.lr = lr;
                    cfg.optimizer = optimizer;
                    cfg.validate_full_scale().map_err(|e| anyhow!("invalid sweep configuration: {e}"))?;
                    let mut snapshot = base.clone();
                    snapshot.insert("neurons".into(), neurons.to_string());
                    snapshot.insert("grid".into(), grid.to_string());
                    snapshot.insert("k".into(), SPLINE_ORDER.to_string());
                    snapshot.insert("lr".into(), lr.to_string());
                    snapshot.insert("optimizer".into(), optimizer.name().into());
                    snapshot.insert("d_model".into(), d_model.to_string());
                    let key = config_key(&snapshot);
                    runs.push(Planned { cfg, snapshot, key });
                }
            }
        }
    }
    Ok(runs)
}

fn result_json(p: &Planned, o: &Outcome) -> Value {
    json!({
        "key": p.key,
        "config": p.snapshot,
        "best_epoch": o.best_epoch,
        "epochs_run": o.epochs_run,
        "best_val_nrmse": o.best_val_nrmse,
        "test_nrmse": o.test_nrmse,
    })
}

fn parse_outcome(v: &Value) -> Result<Outcome> {
    let bad = || anyhow!("malformed result.json");
    Ok(Outcome {
        best_epoch: v["best_epoch"].as_u64().map(|e| e as usize),
        epochs_run: v["epochs_run"].as_u64().ok_or_else(bad)? as usize,
        best_val_nrmse: v["best_val_nrmse"].as_f64(),
        test_nrmse: v["test_nrmse"].as_f64(),
    })
}

/// A finished run whose manifest matches `p` and whose files are untouched.
fn cached(p: &Planned, dir: &Path) -> Option<Outcome> {
    let m = RunManifest::read(&dir.join("manifest.json")).ok()?;
    if m.config != p.snapshot || !m.artifacts_intact() {
        return None;
    }
    let text = fs::read_to_string(dir.join("result.json")).ok()?;
    parse_outcome(&serde_json::from_str(&text).ok()?).ok()
}

fn execute(p: &Planned, data: &Dataset, dir: &Path) -> Result<Outcome> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let st = train(CrossformerKan::new(p.cfg.model, p.cfg.seed)?, data, &p.cfg)?;
    let best = st.best_model();
    let mut log = st.log.clone();
    if !data.indices(Split::Test).is_empty() {
        log.test_nrmse = Some(evaluate(&best, data, Split::Test)?);
    }
    let outcome = Outcome {
        best_epoch: log.best_epoch,
        epochs_run: log.epochs.len(),
        best_val_nrmse: log.best_epoch.map(|b| log.epochs[b - 1].val_nrmse),
        test_nrmse: log.test_nrmse,
    };
    let ckpt = dir.join(CHECKPOINT);
    save_checkpoint(&best, &ckpt)?;
    let log_path = dir.join(RUN_LOG);
    fs::write(&log_path, log.to_csv())?;
    let result = dir.join("result.json");
    fs::write(&result, serde_json::to_string_pretty(&result_json(p, &outcome))? + "\n")?;
    // Written last: a run only counts as done once its manifest exists.
    let mut m = RunManifest::new("sweep-run", None, &p.snapshot, p.cfg.seed);
    for a in [&ckpt, &log_path, &result] {
        m.add(a)?;
    }
    m.write(&dir.join("manifest.json"))?;
    Ok(outcome)
}

fn opt(v: Option<impl ToString>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn run(args: &SweepArgs) -> Result<()> {
    let mut keys = vec!["dataset", "out_dir", "name"];
    keys.extend(HYPER_KEYS);
    let mut s = Settings::load(args.config.as_deref(), &keys)?;
    s.apply(&[("dataset", &args.dataset), ("out_dir", &args.out_dir), ("name", &args.name)]);
    s.apply(&args.hyper.pairs());
    let dataset = PathBuf::from(s.require::<String>("dataset")?);
    let out_dir = PathBuf::from(s.get("out_dir", "sweep".to_string())?);
    let data = load_dataset(&dataset)?;
    let dataset_sha = sha256_file(&dataset)?;
    let runs = plan(&mut s, &data, &dataset_sha)?;

    let run_dir = |p: &Planned| out_dir.join("runs").join(&p.key);
    let mut outcomes: Vec<Option<Outcome>> = runs.iter().map(|p| cached(p, &run_dir(p))).collect();
    let n_cached = outcomes.iter().flatten().count();
    for (i, (p, o)) in runs.iter().zip(&outcomes).enumerate() {
        if o.is_some() {
            println!("run {}/{} {}: cached", i + 1, runs.len(), p.key);
        }
    }

    let pending: Vec<usize> = (0..runs.len()).filter(|&i| outcomes[i].is_none()).collect();
    let fresh = pending
        .par_iter()
        .map(|&i| {
            let p = &runs[i];
            let o = execute(p, &data, &run_dir(p)).with_context(|| format!("run {} ({})", i + 1, p.key))?;
            println!(
                "run {}/{} {}: best epoch {} of {}, val nrmse {}%",
                i + 1,
                runs.len(),
                p.key,
                opt(o.best_epoch),
                o.epochs_run,
                opt(o.best_val_nrmse)
            );
            Ok((i, o))
        })
        .collect::<Result<Vec<_>>>()?;
    for (i, o) in fresh {
        outcomes[i] = Some(o);
    }

    let mut csv = format!("{CSV_HEADER}\n");
    for (i, (p, o)) in runs.iter().zip(&outcomes).enumerate() {
        let o = o.as_ref().expect("every run finished");
        let HeadKind::Kan { neurons, grid } = p.cfg.model.head else {
            unreachable!("sweeps only plan KAN heads")
        };
        writeln!(
            csv,
            "{},{},{},{neurons},{grid},{SPLINE_ORDER},{},{},{},{},{},{},{}",
            i + 1,
            p.key,
            p.cfg.seed,
            p.cfg.lr,
            p.cfg.optimizer.name(),
            p.cfg.model.d_model,
            opt(o.best_epoch),
            o.epochs_run,
            opt(o.best_val_nrmse),
            opt(o.test_nrmse)
        )?;
    }
    let csv_path = out_dir.join("sweep.csv");
    fs::create_dir_all(&out_dir)?;
    fs::write(&csv_path, csv)?;
    println!(
        "{} runs ({n_cached} cached, {} trained) -> {}",
        runs.len(),
        runs.len() - n_cached,
        csv_path.display()
    );

    let mut snapshot = s.snapshot().clone();
    snapshot.insert("dataset_sha256".into(), dataset_sha);
    let seed = runs.first().map_or(0, |p| p.cfg.seed);
    let mut m = RunManifest::new("sweep", s.source.as_deref(), &snapshot, seed);
    m.add(&csv_path)?;
    for p in &runs {
        m.add(&run_dir(p).join(CHECKPOINT))?;
    }
    m.write(&out_dir.join("sweep.manifest.json"))?;
    Ok(())
}
