use std::path::Path;
use std::process::{Command, Output};

fn syq(args: &[&str], run_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_syq"))
        .args(args)
        .env("SYQ_RUN_DIR", run_root)
        .output()
        .expect("syq runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn field(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}\t")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .to_string()
}

const QUICK: &[&str] = &[
    "train",
    "--synthetic",
    "--epochs",
    "1",
    "--train-limit",
    "300",
    "--batch",
    "32",
    "--seed",
    "7",
];

fn quick_train(root: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = QUICK.to_vec();
    args.extend_from_slice(&["--out", out]);
    args.extend_from_slice(extra);
    let o = syq(&args, root);
    assert!(o.status.success(), "train failed: {}", stderr(&o));
    o
}

#[test]
fn missing_data_dir_is_a_usage_error_naming_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let o = syq(&["train", "--epochs", "1"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--data-dir"), "{}", stderr(&o));
}

#[test]
fn invalid_flag_values_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        &["train", "--synthetic", "--granularity", "diagonal"][..],
        &["train", "--synthetic", "--wbits", "3"],
        &["train", "--synthetic", "--abits", "9"],
        &["train", "--synthetic", "--lr", "-1"],
        &[
            "cost", "-K", "3", "-I", "4", "-N", "6", "-F", "5", "--method", "grouping",
        ],
    ] {
        let o = syq(args, tmp.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn missing_mnist_files_are_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let o = syq(&["train", "--data-dir", dir, "--epochs", "1"], tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn train_writes_the_run_directory_and_eval_paths_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let o = quick_train(tmp.path(), "quick", &[]);
    let run = tmp.path().join("quick");
    for f in [
        "config.json",
        "train.log",
        "metrics.json",
        "model.syq1",
        "checkpoints/last.syqc",
        "checkpoints/epoch-001.syqc",
        "checkpoints/warmup-001.syqc",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("metrics.json")).unwrap()).unwrap();
    let final_top1 = metrics["final_top1"].as_f64().unwrap();
    assert_eq!(format!("{final_top1:.6}"), field(&stdout(&o), "final_top1"));

    let ckpt = run.join("checkpoints/last.syqc");
    let exported = tmp.path().join("exported.syq1");
    let e = syq(
        &[
            "export",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            exported.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert!(e.status.success(), "{}", stderr(&e));
    assert_eq!(
        std::fs::read(&exported).unwrap(),
        std::fs::read(run.join("model.syq1")).unwrap()
    );

    let from_ckpt = syq(&["eval", "--synthetic", "--model", ckpt.to_str().unwrap()], tmp.path());
    let from_model = syq(
        &["eval", "--synthetic", "--model", exported.to_str().unwrap()],
        tmp.path(),
    );
    assert!(from_ckpt.status.success() && from_model.status.success());
    assert_eq!(stdout(&from_ckpt), stdout(&from_model));
    assert_eq!(field(&stdout(&from_model), "top1"), format!("{final_top1:.6}"));
    assert_eq!(field(&stdout(&from_model), "samples"), "1000");
}

#[test]
fn config_file_is_echoed_and_flags_override_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{"wbits": 1, "abits": 2, "granularity": "row", "train": {"learning_rate": 0.05}}"#,
    )
    .unwrap();
    quick_train(
        tmp.path(),
        "from-config",
        &["--config", cfg.to_str().unwrap(), "--abits", "4"],
    );
    let run = tmp.path().join("from-config");
    let echo: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["wbits"], 1);
    assert_eq!(echo["abits"], 4);
    assert_eq!(echo["granularity"], "row");
    assert_eq!(echo["train"]["learning_rate"], 0.05);
    assert!(run.join("config.input.json").is_file());

    std::fs::write(&cfg, r#"{"wbitz": 1}"#).unwrap();
    let o = syq(&["train", "--config", cfg.to_str().unwrap(), "--synthetic"], tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn synthetic_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = syq(
            &["train", "--synthetic", "--epochs", "2", "--seed", "7", "--out", out],
            tmp.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for f in [
        "metrics.json",
        "train.log",
        "model.syq1",
        "checkpoints/last.syqc",
        "checkpoints/epoch-002.syqc",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn pixel_wise_is_no_worse_than_layer_wise_on_the_synthetic_task() {
    let tmp = tempfile::tempdir().unwrap();
    let mut means = Vec::new();
    for granularity in ["pixel", "layer"] {
        let mut sum = 0.0;
        for seed in 1..=5 {
            let seed = seed.to_string();
            let out = format!("{granularity}-{seed}");
            let o = syq(
                &[
                    "train",
                    "--synthetic",
                    "--epochs",
                    "1",
                    "--train-limit",
                    "800",
                    "--wbits",
                    "1",
                    "--abits",
                    "2",
                    "--granularity",
                    granularity,
                    "--seed",
                    &seed,
                    "--out",
                    &out,
                ],
                tmp.path(),
            );
            assert!(o.status.success(), "{}", stderr(&o));
            sum += field(&stdout(&o), "final_top1").parse::<f64>().unwrap();
        }
        means.push(sum / 5.0);
    }
    eprintln!("synthetic mean top-1: pixel {:.4}, layer {:.4}", means[0], means[1]);
    assert!(means[0] >= means[1], "pixel {} < layer {}", means[0], means[1]);
}

#[test]
fn truncated_model_is_a_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    quick_train(tmp.path(), "t", &[]);
    let bytes = std::fs::read(tmp.path().join("t/model.syq1")).unwrap();
    let cut = tmp.path().join("cut.syq1");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let o = syq(&["eval", "--synthetic", "--model", cut.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("offset"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_with_code_four_and_saves_a_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = QUICK.to_vec();
    args.extend_from_slice(&["--out", "boom", "--lr", "1e200"]);
    let o = syq(&args, tmp.path());
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
    assert!(tmp.path().join("boom/checkpoints/diverged.syqc").is_file());
}

#[test]
fn cost_prints_every_method() {
    let tmp = tempfile::tempdir().unwrap();
    let o = syq(&["cost", "-K", "3", "-I", "384", "-N", "256", "-F", "13"], tmp.path());
    assert!(o.status.success());
    let text = stdout(&o);
    let rows: Vec<(String, u64, u64)> = text
        .lines()
        .filter_map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            match f.as_slice() {
                [m, s, p] => Some((m.to_string(), s.parse().ok()?, p.parse().ok()?)),
                _ => None,
            }
        })
        .collect();
    let names: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
    assert_eq!(names, ["layer", "row", "pixel", "asymmetric", "grouping", "channel"]);
    assert!(text.contains("L_v=3456 mul=3465"), "{text}");
    assert!(text.contains("add=3455"), "{text}");
}
