use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use stiffnet::autodiff::Tensor;
use stiffnet::dataset::{denormalize, normalize, N_INPUTS, N_OUTPUTS, N_ROWS, ROW_NAMES};

use crate::config::Settings;
use crate::eval::{check_compatible, load_model};
use crate::manifest::RunManifest;
use crate::svg::{stacked, Panel, Series};
use crate::train::load_dataset;

const KEYS: [&str; 5] = ["checkpoint", "dataset", "index", "input", "out_dir"];

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// key = value config file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<String>,
    /// Dataset to take the record from (with --index).
    #[arg(long)]
    pub dataset: Option<String>,
    /// Record index within the dataset (default 0).
    #[arg(long)]
    pub index: Option<String>,
    /// Record CSV (`t,VInP,VInM,ClkEval,DOut1,DOut0`) used instead of a dataset.
    #[arg(long)]
    pub input: Option<String>,
    /// Directory for prediction.csv, prediction.svg and the manifest.
    #[arg(long)]
    pub out_dir: Option<String>,
}

/// One record in volts, rows in [`ROW_NAMES`] order, plus its time axis.
pub struct Waveform {
    pub t: Vec<f64>,
    pub rows: Vec<f64>,
    pub n: usize,
}

impl Waveform {
    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.n..(i + 1) * self.n]
    }
}

/// Parses the record CSV layout written by the dataset tools.
pub fn read_record_csv(path: &Path) -> Result<Waveform> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let want = format!("t,{}", ROW_NAMES.join(","));
    if header.trim() != want {
        bail!("{}: expected header {want:?}, got {header:?}", path.display());
    }
    let mut t = Vec::new();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); N_ROWS];
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let vals = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("{} line {}", path.display(), n + 2))?;
        if vals.len() != N_ROWS + 1 {
            bail!("{} line {}: expected {} columns, got {}", path.display(), n + 2, N_ROWS + 1, vals.len());
        }
        t.push(vals[0]);
        for (c, v) in cols.iter_mut().zip(&vals[1..]) {
            c.push(*v);
        }
    }
    if t.is_empty() {
        bail!("{} holds no samples", path.display());
    }
    Ok(Waveform {
        n: t.len(),
        t,
        rows: cols.concat(),
    })
}

/// Denormalized model outputs for one record, `[2 * n]` row-major.
pub fn predict_volts(model: &stiffnet::crossformer::CrossformerKan, w: &Waveform) -> Result<Vec<f64>> {
    let x = normalize(&w.rows[..N_INPUTS * w.n], 0, w.n);
    let x = Tensor::new(vec![1, N_INPUTS, w.n], x)?;
    let (y, _) = model.predict(&x)?;
    Ok(denormalize(y.data(), N_INPUTS, w.n))
}

pub fn run(args: &PredictArgs) -> Result<()> {
    let mut s = Settings::load(args.config.as_deref(), &KEYS)?;
    s.apply(&[
        ("checkpoint", &args.checkpoint),
        ("dataset", &args.dataset),
        ("index", &args.index),
        ("input", &args.input),
        ("out_dir", &args.out_dir),
    ]);
    let ckpt = PathBuf::from(s.require::<String>("checkpoint")?);
    let out_dir = PathBuf::from(s.get("out_dir", "predict".to_string())?);
    let model = load_model(&ckpt)?;

    let (wave, label) = match (s.raw("input").is_some(), s.raw("dataset").is_some()) {
        (true, true) => bail!("set either `input` or `dataset`, not both"),
        (false, false) => bail!("config key `dataset` (or `input`) is required"),
        (true, false) => {
            let p = PathBuf::from(s.require::<String>("input")?);
            let w = read_record_csv(&p)?;
            if w.n != model.cfg.t_len {
                bail!(
                    "checkpoint/input mismatch: model expects {} samples, {} has {}",
                    model.cfg.t_len,
                    p.display(),
                    w.n
                );
            }
            (w, p.display().to_string())
        }
        (false, true) => {
            let p = PathBuf::from(s.require::<String>("dataset")?);
            let data = load_dataset(&p)?;
            check_compatible(&model, &data)?;
            let index = s.get("index", 0usize)?;
            if index >= data.len() {
                bail!("config key `index` must be in 0..{} (got {index})", data.len());
            }
            let r = &data.records[index];
            let dt = data.gen.sample_dt;
            let w = Waveform {
                t: (0..r.n_samples).map(|j| j as f64 * dt).collect(),
                rows: r.data.clone(),
                n: r.n_samples,
            };
            (w, format!("record {index} ({})", data.split[index].name()))
        }
    };

    let pred = predict_volts(&model, &wave)?;
    fs::create_dir_all(&out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;

    let mut csv = format!("t,{},DOut1_pred,DOut0_pred\n", ROW_NAMES.join(","));
    for j in 0..wave.n {
        write!(csv, "{}", wave.t[j])?;
        for row in 0..N_ROWS {
            write!(csv, ",{}", wave.row(row)[j])?;
        }
        for o in 0..N_OUTPUTS {
            write!(csv, ",{}", pred[o * wave.n + j])?;
        }
        csv.push('\n');
    }
    let csv_path = out_dir.join("prediction.csv");
    fs::write(&csv_path, csv)?;

    let t_ns: Vec<f64> = wave.t.iter().map(|t| t * 1e9).collect();
    let colors = ["#1f77b4", "#ff7f0e", "#2ca02c"];
    let mut panels: Vec<Panel> = (0..N_INPUTS)
        .map(|i| Panel {
            title: ROW_NAMES[i],
            series: vec![Series { label: ROW_NAMES[i], y: wave.row(i), color: colors[i], dashed: false }],
        })
        .collect();
    for o in 0..N_OUTPUTS {
        let row = N_INPUTS + o;
        panels.push(Panel {
            title: ROW_NAMES[row],
            series: vec![
                Series { label: "ground truth", y: wave.row(row), color: "#222222", dashed: false },
                Series { label: "prediction", y: &pred[o * wave.n..(o + 1) * wave.n], color: "#d62728", dashed: true },
            ],
        });
    }
    let svg_path = out_dir.join("prediction.svg");
    fs::write(&svg_path, stacked(&format!("prediction vs ground truth: {label}"), &t_ns, "time (ns)", &panels))?;

    let nrmse = stiffnet::train::nrmse_report(
        &normalize(&wave.rows[N_INPUTS * wave.n..], N_INPUTS, wave.n),
        &normalize(&pred, N_INPUTS, wave.n),
    )?;
    println!("{label}: NRMSE {nrmse:.4}% -> {}", csv_path.display());

    let mut m = RunManifest::new("predict", s.source.as_deref(), s.snapshot(), model.seed);
    m.add(&csv_path)?;
    m.add(&svg_path)?;
    m.write(&out_dir.join("predict.manifest.json"))?;
    Ok(())
}
