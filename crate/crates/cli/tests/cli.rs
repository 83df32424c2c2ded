use std::path::Path;
use std::process::{Command, Output};

use caama_cli::experiments::SummaryRow;
use caama_cli::ModeSel;

fn caama(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_caama"))
        .args(args)
        .env("CAAMA_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn sample_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = |name: &str| {
        vec![
            "sample".to_string(),
            "--kind".into(),
            "dirichlet".into(),
            "--alpha".into(),
            "0.5".into(),
            "--seed".into(),
            "9".into(),
            "--count".into(),
            "300".into(),
            "-o".into(),
            dir.path().join(name).display().to_string(),
        ]
    };
    for name in ["a.csv", "b.csv"] {
        let a: Vec<String> = args(name);
        let a: Vec<&str> = a.iter().map(String::as_str).collect();
        ok(&caama(&a, dir.path()));
    }
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b.csv")).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("v_0_0,v_0_1,v_1_0,v_1_1\n"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 301);
}

#[test]
fn mixture_with_three_bidders_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = caama(&["sample", "--kind", "linear-mixture-sym", "--n", "3", "--count", "10"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn bad_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"schema_version":1,"distribution":{"kind":"uniform-iid","n":2,"m":1,"seed":0},"modes":["vcg"],"colour":1}"#).unwrap();
    let out = caama(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_then_eval_reproduces_summary() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let run_s = run.display().to_string();
    let stdout = ok(&caama(
        &[
            "train", "--kind", "uniform", "--m", "1", "--total-iters", "200", "--batch-size", "64",
            "--test-size", "2000", "--eval-every", "50", "--menu-size", "4", "--widths", "8,8",
            "--modes", "caama,ama-only,vcg", "-o", &run_s,
        ],
        dir.path(),
    ));
    assert!(stdout.starts_with("mode,revenue,revenue_postproc"));
    for f in [
        "caama.checkpoint.json",
        "ama-only.checkpoint.json",
        "caama.metrics.csv",
        "summary.csv",
        "summary.json",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let summary: Vec<SummaryRow> =
        serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.len(), 3);

    for (mode, ck) in [(ModeSel::Caama, "caama"), (ModeSel::AmaOnly, "ama-only")] {
        let row = summary.iter().find(|r| r.mode == mode).unwrap();
        let ck = run.join(format!("{ck}.checkpoint.json"));
        let eval_dir = dir.path().join(format!("eval-{}", mode.name()));
        let stdout = ok(&caama(
            &[
                "eval", "--checkpoint", ck.to_str().unwrap(), "--dsic-profiles", "20",
                "-o", eval_dir.to_str().unwrap(),
            ],
            dir.path(),
        ));
        let report: serde_json::Value = serde_json::from_str(&stdout).unwrap();
        let rev = report["revenue_mean"].as_f64().unwrap();
        let post = report["revenue_post_processed"].as_f64().unwrap();
        let reg = report["ir_regret_mean"].as_f64().unwrap();
        assert!((rev - row.revenue).abs() <= 1e-9, "{rev} vs {}", row.revenue);
        assert!((post - row.revenue_postproc).abs() <= 1e-9);
        assert!((reg - row.regret_ir_mean).abs() <= 1e-9);
        assert!(report["dsic_regret_max"].as_f64().unwrap() <= 1e-9);
        assert!(eval_dir.join("eval.json").exists() && eval_dir.join("eval.csv").exists());
    }

    let post = caama(
        &[
            "eval", "--checkpoint", run.join("caama.checkpoint.json").to_str().unwrap(),
            "--post-process", "--dsic-profiles", "20",
        ],
        dir.path(),
    );
    let report: serde_json::Value = serde_json::from_str(&ok(&post)).unwrap();
    assert!(report["min_utility"].as_f64().unwrap() >= 0.0);
    assert!(dir.path().join("eval").join("eval.json").exists());
}

#[test]
fn training_is_reproducible_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = Vec::new();
    for name in ["x", "y"] {
        let out = dir.path().join(name);
        ok(&caama(
            &[
                "train", "--kind", "dirichlet", "--total-iters", "60", "--batch-size", "32",
                "--test-size", "500", "--menu-size", "4", "--widths", "4,4", "--modes", "caama",
                "-o", out.to_str().unwrap(),
            ],
            dir.path(),
        ));
        csv.push(std::fs::read_to_string(out.join("caama.metrics.csv")).unwrap());
        let a = std::fs::read_to_string(out.join("caama.checkpoint.json")).unwrap();
        csv.push(a);
    }
    assert_eq!(csv[0], csv[2]);
    assert_eq!(csv[1], csv[3]);
}
