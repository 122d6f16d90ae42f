use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lucf::model::{LucfNet, ModelConfig};
use lucf_cli::RunConfig;

fn lucf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lucf")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

const TINY: &[&str] = &["--base-width", "2", "--heads", "1,1,1,1", "--input", "32x32", "--batch-size", "2"];

fn tiny_data(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let o = lucf(&["synth", "--out", p(&data), "--num-samples", "4", "--size", "32x32", "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    data
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", p(data), "--out", p(out)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    lucf(&args)
}

#[test]
fn synth_default_writes_a_hundred_samples() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(code(&lucf(&["synth", "--out", p(&out)])), 0);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["samples"].as_array().unwrap().len(), 100);
    assert_eq!(fs::read_dir(out.join("images")).unwrap().count(), 100);
}

#[test]
fn synth_is_reproducible_and_guards_output() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(code(&lucf(&["synth", "--out", p(d), "--num-samples", "6", "--seed", "9"])), 0);
    }
    assert_eq!(tree(&a), tree(&b));
    // non-empty without --force
    assert_eq!(code(&lucf(&["synth", "--out", p(&a), "--num-samples", "6"])), 1);
    assert_eq!(code(&lucf(&["synth", "--out", p(&a), "--num-samples", "6", "--force"])), 0);
}

#[test]
fn invalid_size_fails_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bad");
    assert_eq!(code(&lucf(&["synth", "--out", p(&out), "--size", "100x100"])), 2);
    assert!(!out.exists());
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    assert_eq!(code(&train(&data, &dir.path().join("r"), &["--fusion-depth", "0"])), 2);
    assert_eq!(code(&train(&data, &dir.path().join("r"), &["--loss", "focal"])), 2);
    assert_eq!(code(&lucf(&["gradcheck", "--inject-fault", "nope"])), 2);
    assert_eq!(code(&lucf(&["frobnicate"])), 2);
    assert_eq!(lucf_cli::run(["lucf", "summary", "--fusion-depth", "5"]), 2);
}

#[test]
fn config_is_logged_and_reusable() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let first = dir.path().join("first");
    assert_eq!(code(&train(&data, &first, &["--epochs", "1", "--seed", "4", "--no-lg"])), 0);
    let cfg = RunConfig::load(&first.join("config.json")).unwrap();
    assert_eq!(cfg.train.seed, 4);
    assert!(!cfg.train.model.lg_enabled);

    // the logged config alone reproduces the run
    let again = dir.path().join("again");
    let cfg_path = first.join("config.json");
    let o = lucf(&["train", "--data", p(&data), "--out", p(&again), "--config", p(&cfg_path)]);
    assert_eq!(code(&o), 0);
    assert_eq!(tree(&first), tree(&again));
}

#[test]
fn stop_and_resume_matches_one_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    assert_eq!(code(&train(&data, &full, &["--epochs", "3"])), 0);
    assert_eq!(code(&train(&data, &split, &["--epochs", "3", "--stop-at", "3"])), 0);
    assert_eq!(fs::read_to_string(split.join("history.csv")).unwrap().lines().count(), 4);
    assert_eq!(code(&train(&data, &split, &["--epochs", "3", "--resume"])), 0);
    assert_eq!(tree(&full), tree(&split));
    // resuming with a different config is refused
    assert_eq!(code(&train(&data, &split, &["--epochs", "4", "--resume"])), 2);
}

#[test]
fn periodic_checkpoints_do_not_change_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&train(&data, &a, &["--epochs", "2"])), 0);
    assert_eq!(code(&train(&data, &b, &["--epochs", "2", "--checkpoint-every", "1"])), 0);
    assert_eq!(fs::read(a.join("history.csv")).unwrap(), fs::read(b.join("history.csv")).unwrap());
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap().len(), fs::read(b.join("checkpoint.bin")).unwrap().len());
}

#[test]
fn fusion_depth_sets_head_columns() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    for depth in ["1", "4"] {
        let out = dir.path().join(depth);
        assert_eq!(code(&train(&data, &out, &["--epochs", "1", "--fusion-depth", depth])), 0);
        let hist = fs::read_to_string(out.join("history.csv")).unwrap();
        let heads = hist.lines().next().unwrap().split(',').filter(|c| c.starts_with("head")).count();
        assert_eq!(heads.to_string(), depth);
    }
}

#[test]
fn hybrid_weight_grid_writes_one_history_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let out = dir.path().join("grid");
    let o = train(&data, &out, &["--epochs", "1", "--hybrid-weight", "0,0.25,0.5,0.75,1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut totals = Vec::new();
    for w in ["0", "0.25", "0.5", "0.75", "1"] {
        let cell = out.join(format!("hw-{w}"));
        let cfg = RunConfig::load(&cell.join("config.json")).unwrap();
        assert_eq!(cfg.train.loss.hybrid_weight.to_string(), w);
        let hist = fs::read_to_string(cell.join("history.csv")).unwrap();
        totals.push(hist.lines().nth(1).unwrap().split(',').nth(2).unwrap().to_string());
    }
    totals.dedup();
    assert_eq!(totals.len(), 5, "the weight must change the loss");
}

#[test]
fn divergence_aborts_with_history_kept() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let out = dir.path().join("nan");
    let o = train(&data, &out, &["--epochs", "2", "--lr", "1e30"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
    assert!(out.join("history.csv").exists());
    assert!(!out.join("checkpoint.bin").exists());
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden")
}

/// Regenerate with `UPDATE_GOLDEN=1 cargo test -p lucf-cli --test cli golden`.
#[test]
fn golden_checkpoint_reproduces_golden_report() {
    let golden = golden_dir();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        let _ = fs::remove_dir_all(&golden);
        fs::create_dir_all(&golden).unwrap();
        let data = golden.join("data");
        assert_eq!(code(&lucf(&["synth", "--out", p(&data), "--num-samples", "3", "--size", "32x32", "--seed", "2"])), 0);
        let run = golden.join("run");
        assert_eq!(code(&train(&data, &run, &["--epochs", "3", "--seed", "2"])), 0);
        fs::remove_file(run.join("history.csv")).unwrap();
        let ckpt = run.join("checkpoint.bin");
        assert_eq!(code(&lucf(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&golden.join("report"))])), 0);
    }
    let dir = tempfile::tempdir().unwrap();
    let ckpt = golden.join("run/checkpoint.bin");
    let o = lucf(&["eval", "--checkpoint", p(&ckpt), "--data", p(&golden.join("data")), "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(tree(dir.path()), tree(&golden.join("report")));
}

#[test]
fn metric_variant_labels_the_report() {
    let golden = golden_dir();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = golden.join("run/checkpoint.bin");
    let data = golden.join("data");
    let mut hd = Vec::new();
    for v in ["hd95", "hd100"] {
        let out = dir.path().join(v);
        let o = lucf(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&out), "--metrics", v, "--json"]);
        assert_eq!(code(&o), 0);
        let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().next().unwrap(), format!("case,class,dsc,iou,{v},absent"));
        let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        assert_eq!(summary["hd_variant"], v);
        hd.push(summary["mean_hd"].as_f64().unwrap());
    }
    assert!(hd[0] <= hd[1]);
}

#[test]
fn eval_errors_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let golden = golden_dir();
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    fs::write(
        empty.join("manifest.json"),
        r#"{"num_classes":4,"channels":1,"size":[32,32],"samples":[]}"#,
    )
    .unwrap();
    let out = dir.path().join("report");
    let ckpt = golden.join("run/checkpoint.bin");
    assert_eq!(code(&lucf(&["eval", "--checkpoint", p(&ckpt), "--data", p(&empty), "--out", p(&out)])), 1);
    assert!(!out.exists());
    let missing = dir.path().join("missing.bin");
    let data = golden.join("data");
    assert_eq!(code(&lucf(&["eval", "--checkpoint", p(&missing), "--data", p(&data), "--out", p(&out)])), 1);
    assert!(!out.exists());
}

#[test]
fn gradcheck_passes_and_fault_is_named() {
    let o = lucf(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let text = stdout(&o);
    for name in ["matmul", "conv2d", "lg_block", "lovasz_softmax", "ohem"] {
        assert!(text.lines().any(|l| l.starts_with("ok") && l.contains(name) && l.contains("max rel err")), "{name}");
    }

    let o = lucf(&["gradcheck", "--inject-fault", "conv2d", "--json"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("conv2d"));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let failed: Vec<_> = report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r["passed"] == false)
        .map(|r| r["name"].as_str().unwrap().to_string())
        .collect();
    assert!(failed.contains(&"conv2d".to_string()), "{failed:?}");
}

#[test]
fn summary_counts_match_the_model() {
    let o = lucf(&["summary", "--base-width", "4", "--heads", "1,1,2,2", "--json"]);
    assert_eq!(code(&o), 0);
    let s: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let cfg = ModelConfig { base_width: 4, heads: [1, 1, 2, 2], input_size: (224, 224), ..ModelConfig::default() };
    assert_eq!(s["params"].as_u64().unwrap(), LucfNet::new(&cfg, 0).unwrap().num_params() as u64);
    assert_eq!(s["input"], serde_json::json!([224, 224]));
    assert!(s["reference"].is_null());

    let o = lucf(&["summary", "--paper-preset"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("paper reports 6.93 M / 6.60 GFLOPs"));
}

#[test]
fn feature_dumps_have_stage_sizes() {
    let golden = golden_dir();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = golden.join("run/checkpoint.bin");
    let image = fs::read_dir(golden.join("data/images")).unwrap().next().unwrap().unwrap().path();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        assert_eq!(code(&lucf(&["dump-features", "--checkpoint", p(&ckpt), "--image", p(&image), "--out", p(&out)])), 0);
        runs.push(tree(&out));
    }
    assert_eq!(runs[0], runs[1]);
    for (stage, side) in [(1, 16), (2, 8), (3, 4), (4, 2)] {
        let bytes = &runs[0][&PathBuf::from(format!("stage{stage}.pgm"))];
        let header = format!("P5\n{side} {side}\n255\n");
        assert!(bytes.starts_with(header.as_bytes()), "stage {stage}");
        let px = &bytes[header.len()..];
        assert_eq!(px.len(), side * side);
        let (lo, hi) = (px.iter().min().unwrap(), px.iter().max().unwrap());
        assert!((*lo, *hi) == (0, 255) || lo == hi, "stage {stage}: {lo}..{hi}");
    }
}
