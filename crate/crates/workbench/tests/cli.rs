use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mscnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mscnn")).args(args).output().expect("runs")
}

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

fn without_hash(text: &str) -> String {
    text.lines().filter(|l| !l.starts_with("# config_hash=")).map(|l| format!("{l}\n")).collect()
}

#[test]
fn grad_check_passes_and_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = mscnn(&["grad-check", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().count() >= 10);
    assert!(!stdout.contains("FAIL"));
    let report = std::fs::read_to_string(dir.path().join("grad_check_seed0.csv")).unwrap();
    assert!(report.starts_with("# config_hash="));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(mscnn(&["--no-such-flag", "propose"]).status.code(), Some(1));
    assert_eq!(mscnn(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(mscnn(&[]).status.code(), Some(1));
    assert_eq!(mscnn(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let missing = dir.path().join("missing.ckpt");
    assert_eq!(mscnn(&["propose", "--out", out, "--checkpoint", missing.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(mscnn(&["propose", "--out", out]).status.code(), Some(2));
    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(mscnn(&["detect", "--out", out, "--checkpoint", garbage.to_str().unwrap()]).status.code(), Some(2));
    let bad_cfg = dir.path().join("bad.txt");
    std::fs::write(&bad_cfg, "[eval]\niou = 2\n").unwrap();
    assert_eq!(mscnn(&["grad-check", "--out", out, "--config", bad_cfg.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(mscnn(&["grad-check", "--out", out, "--profile", "truck"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_three_and_keeps_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.txt");
    std::fs::write(
        &cfg,
        "[synthetic]\nimages = 2\nsize = 64\nmin_height = 12\nmax_height = 48\n\n\
         [train]\ncrop_size = 64\nresize_scales = 1\nbatch_size = 1\ndivergence_factor = 0.000001\n\n\
         [stage1]\niters = 3\n\n[stage2]\niters = 0\n",
    )
    .unwrap();
    let out = mscnn(&["train-proposal", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("loss_proposal_seed0.csv").exists());
    assert!(!dir.path().join("proposal_seed0.ckpt").exists());
}

#[test]
fn eval_recall_matches_the_brute_force_golden_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = mscnn(&[
        "eval-recall",
        "--config",
        fixture("recall/config.txt").to_str().unwrap(),
        "--data",
        fixture("recall/val").to_str().unwrap(),
        "--proposals",
        fixture("recall/proposals.csv").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["recall_table_iou0.6_n3.csv", "recall_vs_budget_iou0.6.csv", "recall_vs_iou_n3.csv"] {
        let got = std::fs::read_to_string(dir.path().join(name)).unwrap();
        let want = std::fs::read_to_string(fixture(&format!("recall/expected/{name}"))).unwrap();
        assert!(got.starts_with("# config_hash="), "{name} lacks the config hash");
        assert_eq!(without_hash(&got), want, "{name}");
    }
    for svg in ["recall_vs_budget_iou0.6.svg", "recall_vs_iou_n3.svg"] {
        assert!(std::fs::read_to_string(dir.path().join(svg)).unwrap().starts_with("<svg"));
    }
}

#[test]
fn proposals_for_unknown_images_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("p.csv");
    std::fs::write(&csv, "image,source,rank,score,x1,y1,x2,y2\nnope,b0,0,0.5,1,1,5,5\n").unwrap();
    let out = mscnn(&[
        "eval-recall",
        "--config",
        fixture("recall/config.txt").to_str().unwrap(),
        "--data",
        fixture("recall/val").to_str().unwrap(),
        "--proposals",
        csv.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn plot_renders_any_numeric_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = mscnn(&["plot", fixture("recall/expected/recall_vs_budget_iou0.6.csv").to_str().unwrap(), "--log-x", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let svg = std::fs::read_to_string(dir.path().join("recall_vs_budget_iou0.6.svg")).unwrap();
    assert!(svg.contains("<polyline") || svg.contains("<path"));
}
