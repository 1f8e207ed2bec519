use std::path::Path;
use std::process::{Command, Output};

use secvit::data::checkpoint::load_checkpoint;
use secvit_cli::ppm::parse_ppm;

fn secvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_secvit"))
        .args(args)
        .env_remove("SEC_THREADS")
        .output()
        .expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_passes_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("grad.csv");
    let out = secvit(&["gradcheck", "--out", arg(&csv)]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let body = std::fs::read_to_string(&csv).unwrap();
    assert!(body.starts_with("op,max_rel_err,elements,passed\n"));
    assert!(body.contains("connector_interleaved"));
    assert!(!body.contains(",false"));
}

#[test]
fn skewed_backward_is_reported() {
    let out = secvit(&["gradcheck", "--corrupt-op", "softmax"]);
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    assert!(err.contains("softmax"), "{err}");
    assert!(text(&out.stdout).contains("FAIL"));
}

#[test]
fn compare_emits_the_partition_header() {
    let out = secvit(&["compare", "--seeds", "2"]);
    assert!(out.status.success());
    let body = text(&out.stdout);
    assert!(body.starts_with("strategy,L,d,groups,balance,purity,iterations,wall_ns\n"));
    assert_eq!(body.lines().count(), 1 + 2 * 3);
}

#[test]
fn bench_rejects_non_dividing_clusters() {
    let out = secvit(&["bench", "--tokens", "100", "--clusters", "3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn small_bench_reports_exact_flop_ratios() {
    let out = secvit(&["bench", "--tokens", "256", "--dim", "16", "--clusters", "2,4", "--dtype", "f64"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let body = text(&out.stdout);
    let csv: Vec<&str> = body.lines().skip_while(|l| !l.starts_with("strategy,")).collect();
    assert_eq!(csv.len(), 4);
    assert!(csv[2].contains(",2.0,") && csv[3].contains(",4.0,"), "{body}");
}

#[test]
fn connector_counts_outputs() {
    let out = secvit(&["connector", "--groups", "288,144"]);
    assert!(out.status.success());
    let body = text(&out.stdout);
    assert!(body.contains("interleaved,576,288,288,"));
    assert!(body.contains("sequential,576,144,144,"));
}

#[test]
fn pixel_map_splits_the_halves() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("map");
    let out = secvit(&["viz", "--source", "pixels", "--side", "16", "--scale", "2", "--out", arg(&base)]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let bytes = std::fs::read(dir.path().join("map.pixels.ppm")).unwrap();
    let (w, h, px) = parse_ppm(&bytes).unwrap();
    assert_eq!((w, h), (32, 32));
    // left and right halves get different colors
    let at = |x: usize, y: usize| &px[(y * w + x) * 3..(y * w + x) * 3 + 3];
    for y in 0..h {
        assert_eq!(at(0, y), at(w / 2 - 1, y));
        assert_ne!(at(0, y), at(w - 1, y));
    }
}

#[test]
fn train_writes_metrics_and_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = secvit(&["train", "--samples", "64", "--epochs", "1", "--out", arg(&run)]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,loss,accuracy,lr,wall_ms\n"));
    let entries = load_checkpoint(&run.join("checkpoint.secv")).unwrap();
    assert!(entries.iter().any(|e| e.name == "head.fc.weight"));

    let ckpt = run.join("checkpoint.secv");
    let base = dir.path().join("viz");
    let out = secvit(&["viz", "--checkpoint", arg(&ckpt), "--out", arg(&base)]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let (w, h, _) = parse_ppm(&std::fs::read(dir.path().join("viz.stage0.ppm")).unwrap()).unwrap();
    assert_eq!((w, h), (64, 64));
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"epochs": 2, "lr_max": 1.0}}"#).unwrap();
    let out = secvit(&["train", "--config", arg(&cfg), "--out", arg(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("lr_max"), "{}", text(&out.stderr));
}

#[test]
fn zero_threads_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_secvit"))
        .args(["connector"])
        .env("SEC_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
