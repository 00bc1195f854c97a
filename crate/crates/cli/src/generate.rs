use std::path::PathBuf;

use anyhow::{anyhow, Result};
use clap::Args;
use rayon::prelude::*;
use stiffnet::dataset::{
    from_records, generate_record, save, split_dataset, Dataset, GenConfig, DEFAULT_FRACTIONS, DEFAULT_RECORDS,
    ROW_NAMES,
};

use crate::config::{ensure_range, Settings};
use crate::manifest::RunManifest;

const KEYS: [&str; 7] = ["records", "seed", "split_seed", "out", "f_cut", "fine_dt", "manifest"];

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// key = value config file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of records (default 2000).
    #[arg(long)]
    pub records: Option<String>,
    /// Master seed for record parameters.
    #[arg(long)]
    pub seed: Option<String>,
    /// Seed of the train/val/test shuffle (default: the master seed).
    #[arg(long)]
    pub split_seed: Option<String>,
    /// Output dataset file.
    #[arg(long)]
    pub out: Option<String>,
    /// Channel cutoff frequency in Hz.
    #[arg(long)]
    pub f_cut: Option<String>,
    /// Fine simulation step in seconds; must divide the 2.5 ns sample spacing.
    #[arg(long)]
    pub fine_dt: Option<String>,
    /// Manifest path (default: `<out>.manifest.json`).
    #[arg(long)]
    pub manifest: Option<String>,
}

pub fn run(args: &GenerateArgs) -> Result<()> {
    let mut s = Settings::load(args.config.as_deref(), &KEYS)?;
    s.apply(&[
        ("records", &args.records),
        ("seed", &args.seed),
        ("split_seed", &args.split_seed),
        ("out", &args.out),
        ("f_cut", &args.f_cut),
        ("fine_dt", &args.fine_dt),
        ("manifest", &args.manifest),
    ]);
    let defaults = GenConfig::default();
    let records = s.get("records", DEFAULT_RECORDS)?;
    ensure_range((1..=1_000_000).contains(&records), "records", "in 1..=1000000", records)?;
    let seed = s.get("seed", 0u64)?;
    let split_seed = s.get("split_seed", seed)?;
    let out = PathBuf::from(s.get("out", "dataset.scds".to_string())?);
    let f_cut = s.get("f_cut", defaults.f_cut)?;
    ensure_range(f_cut > 0.0 && f_cut.is_finite(), "f_cut", "a positive frequency in Hz", f_cut)?;
    let fine_dt = s.get("fine_dt", defaults.adc.fine_dt)?;
    let mut gen = GenConfig { f_cut, ..defaults };
    gen.adc.fine_dt = fine_dt;
    ensure_range(fine_dt > 0.0, "fine_dt", "positive", fine_dt)?;
    gen.validate().map_err(|e| anyhow!("config key `fine_dt`: {e}"))?;
    let manifest_path = PathBuf::from(s.get("manifest", format!("{}.manifest.json", out.display()))?);

    let data = build(records, seed, split_seed, &gen)?;
    save(&data, &out)?;

    let (tr, va, te) = data.counts();
    println!("generated {records} records (train {tr} / val {va} / test {te}) -> {}", out.display());
    for (row, (lo, hi)) in value_ranges(&data).iter().enumerate() {
        println!("  {:<8} {lo:.4} .. {hi:.4} V", ROW_NAMES[row]);
    }

    let mut m = RunManifest::new("generate", s.source.as_deref(), s.snapshot(), seed);
    m.add(&out)?;
    m.write(&manifest_path)?;
    Ok(())
}

/// Same result as the sequential builder; records are independent, so the
/// thread count cannot change the output.
pub fn build(records: usize, seed: u64, split_seed: u64, gen: &GenConfig) -> Result<Dataset> {
    let recs = (0..records)
        .into_par_iter()
        .map(|i| generate_record(seed, i, gen))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(split_dataset(from_records(recs, seed, *gen), DEFAULT_FRACTIONS, split_seed)?)
}

fn value_ranges(d: &Dataset) -> Vec<(f64, f64)> {
    (0..ROW_NAMES.len())
        .map(|row| {
            d.records
                .iter()
                .flat_map(|r| r.row(row).iter().copied())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
        })
        .collect()
}
