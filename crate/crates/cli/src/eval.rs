use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use serde_json::json;
use stiffnet::crossformer::{load_checkpoint, CrossformerKan};
use stiffnet::dataset::{Dataset, Split, N_INPUTS, N_OUTPUTS};
use stiffnet::train::{per_record_nrmse, Prepared};

use crate::config::Settings;
use crate::manifest::RunManifest;
use crate::train::load_dataset;

const KEYS: [&str; 4] = ["checkpoint", "dataset", "split", "out_dir"];

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// key = value config file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<String>,
    #[arg(long)]
    pub dataset: Option<String>,
    /// train | val | test (default test).
    #[arg(long)]
    pub split: Option<String>,
    /// Directory for eval.csv, eval.jsonl and the manifest.
    #[arg(long)]
    pub out_dir: Option<String>,
}

pub fn load_model(path: &Path) -> Result<CrossformerKan> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    load_checkpoint(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

/// Fails when the model cannot consume the dataset's records.
pub fn check_compatible(model: &CrossformerKan, data: &Dataset) -> Result<()> {
    let c = &model.cfg;
    if c.t_len != data.gen.n_samples || c.n_inputs != N_INPUTS || c.n_outputs != N_OUTPUTS {
        bail!(
            "checkpoint/dataset mismatch: model expects {}x{} inputs, dataset records are {}x{}",
            c.n_inputs,
            c.t_len,
            N_INPUTS,
            data.gen.n_samples
        );
    }
    Ok(())
}

pub fn run(args: &EvalArgs) -> Result<()> {
    let mut s = Settings::load(args.config.as_deref(), &KEYS)?;
    s.apply(&[
        ("checkpoint", &args.checkpoint),
        ("dataset", &args.dataset),
        ("split", &args.split),
        ("out_dir", &args.out_dir),
    ]);
    let ckpt = PathBuf::from(s.require::<String>("checkpoint")?);
    let dataset = PathBuf::from(s.require::<String>("dataset")?);
    let split_name = s.get("split", "test".to_string())?;
    let split: Split = split_name
        .parse()
        .map_err(|e| anyhow!("config key `split` must be train, val or test: {e}"))?;
    let out_dir = PathBuf::from(s.get("out_dir", "eval".to_string())?);

    let model = load_model(&ckpt)?;
    let data = load_dataset(&dataset)?;
    check_compatible(&model, &data)?;
    let prep = Prepared::new(&data, split)?;
    let scores = per_record_nrmse(&model, &prep)?;

    fs::create_dir_all(&out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    let mut csv = String::from("record,split,nrmse_pct,mse\n");
    let mut jsonl = String::new();
    for (&idx, &v) in prep.indices.iter().zip(&scores) {
        let mse = (v / 100.0).powi(2);
        writeln!(csv, "{idx},{},{v},{mse}", split.name())?;
        let line = json!({"record": idx, "split": split.name(), "nrmse_pct": v, "mse": mse});
        writeln!(jsonl, "{line}")?;
    }
    let csv_path = out_dir.join("eval.csv");
    let jsonl_path = out_dir.join("eval.jsonl");
    fs::write(&csv_path, csv)?;
    fs::write(&jsonl_path, jsonl)?;

    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let worst = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    println!(
        "split {}: {} records, mean NRMSE {mean:.4}%, worst {worst:.4}%",
        split.name(),
        scores.len()
    );

    let mut m = RunManifest::new("eval", s.source.as_deref(), s.snapshot(), model.seed);
    m.add(&csv_path)?;
    m.add(&jsonl_path)?;
    m.write(&out_dir.join("eval.manifest.json"))?;
    Ok(())
}
