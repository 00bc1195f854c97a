use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use stiffnet::autodiff::Tensor;
use stiffnet::crossformer::load_checkpoint;
use stiffnet::dataset::{denormalize, load, normalize, save, N_INPUTS, N_OUTPUTS};

fn stiffnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stiffnet"))
        .arg("--single-thread")
        .args(args)
        .output()
        .expect("spawn stiffnet")
}

fn ok(args: &[&str]) -> String {
    let out = stiffnet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> (i32, String) {
    let out = stiffnet(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    (out.status.code().unwrap(), err)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Ten records shared by every test; the directory lives for the process.
fn toy_dataset() -> &'static Path {
    static DIR: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    &DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.scds");
        ok(&["generate", "--records", "10", "--seed", "7", "--out", s(&path)]);
        (dir, path)
    })
    .1
}

const TINY: [&str; 16] = [
    "--d-model", "8", "--heads", "2", "--levels", "1", "--routers", "2", "--d-ff", "16", "--batch-size", "4",
    "--seed", "3", "--patience", "100",
];

fn train_toy(out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--dataset", s(toy_dataset()), "--out-dir", s(out)];
    args.extend(TINY);
    args.extend(extra);
    ok(&args)
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    (header, rows)
}

#[test]
fn generate_is_reproducible_and_reports_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.scds"), dir.path().join("b.scds"));
    let out = ok(&["generate", "--records", "10", "--seed", "7", "--out", s(&a)]);
    ok(&["generate", "--records", "10", "--seed", "7", "--out", s(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(out.contains("generated 10 records"), "{out}");
    assert!(out.contains("DOut0"), "{out}");
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a.scds.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["records"], "10");
    assert_eq!(m["master_seed"], 7);
    assert_eq!(m["artifacts"].as_array().unwrap().len(), 1);
}

#[test]
fn generate_reads_config_file_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("gen.conf");
    let out = dir.path().join("c.scds");
    fs::write(&conf, format!("records = 4\nseed = 9\nout = {}\n", s(&out))).unwrap();
    ok(&["generate", "--config", s(&conf), "--records", "3"]);
    let d = load(&out).unwrap();
    assert_eq!((d.len(), d.master_seed), (3, 9));
}

#[test]
fn generate_rejects_zero_records_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = fails(&["generate", "--records", "0", "--out", s(&dir.path().join("x.scds"))]);
    assert_eq!(code, 1);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: ") && err.contains("`records`"), "{err}");
    assert!(!dir.path().join("x.scds").exists());
}

#[test]
fn usage_errors_exit_two_on_one_line() {
    let (code, err) = fails(&["frobnicate"]);
    assert_eq!(code, 2);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "));
    let (code, _) = fails(&["train", "--no-such-flag", "1"]);
    assert_eq!(code, 2);
}

#[test]
fn missing_dataset_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = fails(&["train", "--dataset", s(&dir.path().join("nope.scds"))]);
    assert_eq!(code, 1);
    assert!(err.contains("does not exist"), "{err}");
}

#[test]
fn train_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_toy(dir.path(), &["--max-epochs", "2"]);
    assert!(out.contains("trained 2 epochs"), "{out}");
    for f in ["model.sckp", "runlog.csv", "curve.svg", "state.scts", "train.manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let (header, rows) = csv_rows(&dir.path().join("runlog.csv"));
    assert_eq!(header.join(","), "epoch,train_loss,val_loss,val_nrmse,wall_ms,clamp_rate");
    assert_eq!(rows.len(), 2);
    let svg = fs::read_to_string(dir.path().join("curve.svg")).unwrap();
    assert_eq!(svg.matches(r#"<g class="panel">"#).count(), 2);
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("train.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["d_model"], "8");
    assert_eq!(m["config"]["head"], "kan");
    assert_eq!(m["artifacts"].as_array().unwrap().len(), 4);
}

#[test]
fn heads_differ_but_trunks_match() {
    let dir = tempfile::tempdir().unwrap();
    let (k, l) = (dir.path().join("kan"), dir.path().join("lin"));
    train_toy(&k, &["--max-epochs", "1", "--head", "kan"]);
    train_toy(&l, &["--max-epochs", "1", "--head", "linear"]);
    let kan = load_checkpoint(k.join("model.sckp")).unwrap();
    let lin = load_checkpoint(l.join("model.sckp")).unwrap();
    let split = |m: &stiffnet::crossformer::CrossformerKan| {
        let (mut trunk, mut head) = (BTreeMap::new(), BTreeMap::new());
        for (n, t) in m.params.iter() {
            let dst = if n.starts_with("head.") { &mut head } else { &mut trunk };
            dst.insert(n.to_string(), t.shape().to_vec());
        }
        (trunk, head)
    };
    let ((tk, hk), (tl, hl)) = (split(&kan), split(&lin));
    assert_eq!(tk, tl);
    assert_ne!(hk.keys().collect::<Vec<_>>(), hl.keys().collect::<Vec<_>>());
    assert!(hk.keys().all(|n| n.starts_with("head.kan")));
    assert!(hl.keys().all(|n| n.starts_with("head.linear")));
}

#[test]
fn resumed_training_matches_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let (split, straight) = (dir.path().join("split"), dir.path().join("straight"));
    train_toy(&split, &["--max-epochs", "5"]);
    train_toy(&split, &["--max-epochs", "10", "--resume"]);
    train_toy(&straight, &["--max-epochs", "10"]);
    let (_, a) = csv_rows(&split.join("runlog.csv"));
    let (_, b) = csv_rows(&straight.join("runlog.csv"));
    assert_eq!(a.len(), 10);
    assert_eq!(b.len(), 10);
    for (ra, rb) in a.iter().zip(&b) {
        for col in [1, 2, 3] {
            let (x, y): (f64, f64) = (ra[col].parse().unwrap(), rb[col].parse().unwrap());
            assert!((x - y).abs() <= 1e-10, "epoch {}: {x} vs {y}", ra[0]);
        }
    }
    assert_eq!(
        fs::read(split.join("model.sckp")).unwrap(),
        fs::read(straight.join("model.sckp")).unwrap()
    );
}

#[test]
fn resume_without_state_or_with_other_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = fails(&["train", "--dataset", s(toy_dataset()), "--out-dir", s(dir.path()), "--resume"]);
    assert_eq!(code, 1);
    assert!(err.contains("nothing to resume"), "{err}");
    train_toy(dir.path(), &["--max-epochs", "1"]);
    let mut args = vec!["train", "--dataset", s(toy_dataset()), "--out-dir", s(dir.path())];
    args.extend(TINY);
    args.extend(["--max-epochs", "2", "--resume", "--grid", "15"]);
    let (_, err) = fails(&args);
    assert!(err.contains("different configuration"), "{err}");
}

#[test]
fn eval_csv_and_jsonl_agree() {
    let dir = tempfile::tempdir().unwrap();
    train_toy(dir.path(), &["--max-epochs", "1"]);
    let ev = dir.path().join("ev");
    let ckpt = dir.path().join("model.sckp");
    let out = ok(&[
        "eval", "--checkpoint", s(&ckpt), "--dataset", s(toy_dataset()), "--split", "train", "--out-dir", s(&ev),
    ]);
    assert!(out.contains("split train: 8 records"), "{out}");
    let (header, rows) = csv_rows(&ev.join("eval.csv"));
    assert_eq!(header.join(","), "record,split,nrmse_pct,mse");
    let jsonl = fs::read_to_string(ev.join("eval.jsonl")).unwrap();
    let objs: Vec<serde_json::Value> = jsonl.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 8);
    assert_eq!(objs.len(), 8);
    for (r, o) in rows.iter().zip(&objs) {
        assert_eq!(r[0].parse::<u64>().unwrap(), o["record"].as_u64().unwrap());
        assert_eq!(r[1], o["split"].as_str().unwrap());
        assert_eq!(r[2].parse::<f64>().unwrap(), o["nrmse_pct"].as_f64().unwrap());
        assert_eq!(r[3].parse::<f64>().unwrap(), o["mse"].as_f64().unwrap());
    }
    let (code, err) = fails(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(toy_dataset()), "--split", "dev"]);
    assert_eq!(code, 1);
    assert!(err.contains("`split`"), "{err}");
}

#[test]
fn eval_rejects_mismatched_dataset() {
    let dir = tempfile::tempdir().unwrap();
    train_toy(dir.path(), &["--max-epochs", "1"]);
    let mut d = load(toy_dataset()).unwrap();
    let half = 250;
    for r in &mut d.records {
        r.data = (0..5).flat_map(|row| r.row(row)[..half].to_vec()).collect();
        r.n_samples = half;
    }
    d.gen.n_samples = half;
    let short = dir.path().join("short.scds");
    save(&d, &short).unwrap();
    let (code, err) = fails(&["eval", "--checkpoint", s(&dir.path().join("model.sckp")), "--dataset", s(&short)]);
    assert_eq!(code, 1);
    assert!(err.contains("checkpoint/dataset mismatch"), "{err}");
}

#[test]
fn predict_matches_forward_pass() {
    let dir = tempfile::tempdir().unwrap();
    train_toy(dir.path(), &["--max-epochs", "1"]);
    let ckpt = dir.path().join("model.sckp");
    let pr = dir.path().join("pr");
    let args = ["predict", "--checkpoint", s(&ckpt), "--dataset", s(toy_dataset()), "--index", "4", "--out-dir", s(&pr)];
    ok(&args);
    let first = fs::read(pr.join("prediction.csv")).unwrap();
    let first_svg = fs::read(pr.join("prediction.svg")).unwrap();

    let (header, rows) = csv_rows(&pr.join("prediction.csv"));
    assert_eq!(
        header.join(","),
        "t,VInP,VInM,ClkEval,DOut1,DOut0,DOut1_pred,DOut0_pred"
    );
    assert_eq!(rows.len(), 500);
    assert!(rows.iter().all(|r| r.len() == 8));
    let svg = String::from_utf8(first_svg.clone()).unwrap();
    assert_eq!(svg.matches(r#"<g class="panel">"#).count(), 5);

    let data = load(toy_dataset()).unwrap();
    let model = load_checkpoint(&ckpt).unwrap();
    let r = &data.records[4];
    let x = Tensor::new(vec![1, N_INPUTS, 500], normalize(r.inputs(), 0, 500)).unwrap();
    let want = denormalize(model.predict(&x).unwrap().0.data(), N_INPUTS, 500);
    for (j, row) in rows.iter().enumerate() {
        let v: Vec<f64> = row.iter().map(|c| c.parse().unwrap()).collect();
        assert!((v[0] - j as f64 * 2.5e-9).abs() < 1e-20);
        for c in 0..5 {
            assert_eq!(v[1 + c], r.row(c)[j]);
        }
        for o in 0..N_OUTPUTS {
            assert!((v[6 + o] - want[o * 500 + j]).abs() <= 1e-12, "row {j} output {o}");
        }
    }

    ok(&args);
    assert_eq!(fs::read(pr.join("prediction.csv")).unwrap(), first);
    assert_eq!(fs::read(pr.join("prediction.svg")).unwrap(), first_svg);

    // The CSV it wrote is itself a valid record input.
    let again = dir.path().join("again");
    let src = dir.path().join("record.csv");
    let text: String = fs::read_to_string(pr.join("prediction.csv"))
        .unwrap()
        .lines()
        .map(|l| l.split(',').take(6).collect::<Vec<_>>().join(",") + "\n")
        .collect();
    fs::write(&src, text).unwrap();
    ok(&["predict", "--checkpoint", s(&ckpt), "--input", s(&src), "--out-dir", s(&again)]);
    let (_, rows2) = csv_rows(&again.join("prediction.csv"));
    assert_eq!(rows, rows2);
}

#[test]
fn predict_rejects_out_of_range_index() {
    let dir = tempfile::tempdir().unwrap();
    train_toy(dir.path(), &["--max-epochs", "1"]);
    let (code, err) = fails(&[
        "predict",
        "--checkpoint",
        s(&dir.path().join("model.sckp")),
        "--dataset",
        s(toy_dataset()),
        "--index",
        "10",
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("`index`") && err.contains("0..10"), "{err}");
}

const SWEEP_TRUNK: [&str; 12] = [
    "--levels", "1", "--routers", "2", "--d-ff", "16", "--batch-size", "8", "--max-epochs", "1", "--seed", "5",
];

fn sweep(out: &Path, axes: &[&str]) -> String {
    let mut args = vec!["sweep", "--dataset", s(toy_dataset()), "--out-dir", s(out)];
    args.extend(SWEEP_TRUNK);
    args.extend(axes);
    ok(&args)
}

#[test]
fn sweep_cross_product_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let out = sweep(dir.path(), &["--neurons", "5,10", "--grid", "5,50"]);
    assert_eq!(out.matches(": cached").count(), 0, "{out}");
    let (header, rows) = csv_rows(&dir.path().join("sweep.csv"));
    assert_eq!(header.len(), 13);
    assert_eq!(rows.len(), 4);
    let pairs: Vec<(&str, &str)> = rows.iter().map(|r| (r[3].as_str(), r[4].as_str())).collect();
    assert_eq!(pairs, [("5", "5"), ("5", "50"), ("10", "5"), ("10", "50")]);
    assert!(rows.iter().all(|r| r[5] == "3" && r[8] == "256" && r[10] == "1"));
    let keys: std::collections::BTreeSet<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(keys.len(), 4);
    let before = fs::read(dir.path().join("sweep.csv")).unwrap();

    // Drop one finished run: only that one trains again.
    fs::remove_file(dir.path().join("runs").join(&rows[2][1]).join("manifest.json")).unwrap();
    let out = sweep(dir.path(), &["--neurons", "5,10", "--grid", "5,50"]);
    assert_eq!(out.matches(": cached").count(), 3, "{out}");
    assert!(out.contains("3 cached, 1 trained"), "{out}");
    assert_eq!(fs::read(dir.path().join("sweep.csv")).unwrap(), before);
}

#[test]
fn sweep_presets_run_by_name() {
    let dir = tempfile::tempdir().unwrap();
    sweep(dir.path(), &["--name", "kan-n5-g50-k3,kan-n10-g5-k3"]);
    let (_, rows) = csv_rows(&dir.path().join("sweep.csv"));
    let shapes: Vec<(&str, &str, &str)> = rows.iter().map(|r| (r[3].as_str(), r[4].as_str(), r[5].as_str())).collect();
    assert_eq!(shapes, [("5", "50", "3"), ("10", "5", "3")]);
}

#[test]
fn sweep_rejects_illegal_values_before_training() {
    for axes in [
        ["--neurons", "5,7"],
        ["--grid", "5,10"],
        ["--lr", "1e-3,1e-2"],
        ["--optimizer", "adam,sgd"],
        ["--d-model", "256,128"],
        ["--name", "kan-n3-g3-k3"],
        ["--head", "linear"],
    ] {
        let dir = tempfile::tempdir().unwrap();
        let mut args = vec!["sweep", "--dataset", s(toy_dataset()), "--out-dir", s(dir.path())];
        args.extend(SWEEP_TRUNK);
        args.extend(axes);
        let (code, err) = fails(&args);
        assert_eq!(code, 1);
        let key = axes[0].trim_start_matches("--").replace('-', "_");
        assert!(err.contains(&format!("`{key}`")), "{axes:?}: {err}");
        assert!(!dir.path().join("runs").exists(), "{axes:?} started a run");
    }
}
