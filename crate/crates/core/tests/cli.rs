mod common;

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use tempfile::TempDir;

use common::{vecforge, vecforge_ok};
use vecforge::merge::baseline_average;
use vecforge::store;

/// One trained toy benchmark shared by the read-only tests.
fn trained() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        vecforge_ok(dir.path(), &["train-toy", "--out", ".", "--seed", "0"]);
        dir
    })
    .path()
}

fn params(path: &Path) -> vecforge::ParamSet {
    store::load_file(path).unwrap().0
}

fn code(out: &std::process::Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn train_toy_writes_base_tasks_and_fixtures() {
    let dir = trained();
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".tnsr"))
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "base.tnsr",
            "data_base.tnsr",
            "data_task0.tnsr",
            "data_task1.tnsr",
            "data_task2.tnsr",
            "data_task3.tnsr",
            "task0.tnsr",
            "task1.tnsr",
            "task2.tnsr",
            "task3.tnsr",
        ]
    );
    let manifest: vecforge::cli::RunManifest =
        serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.command, "train-toy");
    assert_eq!(manifest.outputs.len(), 10);
}

#[test]
fn train_toy_is_deterministic_per_seed() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let small = r#"{"train_size": 256, "test_size": 64, "base_steps": 20, "finetune_steps": 20}"#;
    for dir in [&a, &b] {
        fs::write(dir.path().join("spec.json"), small).unwrap();
    }
    let out_a = vecforge_ok(
        a.path(),
        &[
            "train-toy",
            "--spec",
            "spec.json",
            "--out",
            "o",
            "--seed",
            "4",
        ],
    );
    let out_b = vecforge_ok(
        b.path(),
        &[
            "train-toy",
            "--spec",
            "spec.json",
            "--out",
            "o",
            "--seed",
            "4",
        ],
    );
    assert_eq!(out_a.stdout, out_b.stdout);
    let out_c = vecforge_ok(
        b.path(),
        &[
            "train-toy",
            "--spec",
            "spec.json",
            "--out",
            "p",
            "--seed",
            "5",
        ],
    );
    assert_ne!(out_a.stdout, out_c.stdout);
}

#[test]
fn train_toy_error_codes() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"task_count": 1}"#).unwrap();
    fs::write(dir.path().join("typo.json"), r#"{"hiden": 4}"#).unwrap();
    fs::write(dir.path().join("file"), "").unwrap();
    assert_eq!(
        code(&vecforge(
            dir.path(),
            &["train-toy", "--spec", "bad.json", "--out", "o"]
        )),
        2
    );
    assert_eq!(
        code(&vecforge(
            dir.path(),
            &["train-toy", "--spec", "typo.json", "--out", "o"]
        )),
        2
    );
    assert_eq!(
        code(&vecforge(
            dir.path(),
            &["train-toy", "--spec", "missing.json", "--out", "o"]
        )),
        3
    );
    assert_eq!(
        code(&vecforge(dir.path(), &["train-toy", "--out", "file/sub"])),
        3
    );
    assert_eq!(code(&vecforge(dir.path(), &["train-toy"])), 2);
}

#[test]
fn fuse_avg_delegates_bitwise() {
    let dir = trained();
    let out = TempDir::new().unwrap();
    let target = out.path().join("avg.tnsr");
    vecforge_ok(
        dir,
        &[
            "fuse",
            "--pre",
            "base.tnsr",
            "--task",
            "task0.tnsr",
            "task1.tnsr",
            "task2.tnsr",
            "--baseline",
            "avg",
            "--out",
            target.to_str().unwrap(),
        ],
    );
    let models: Vec<_> = ["task0", "task1", "task2"]
        .iter()
        .map(|t| params(&dir.join(format!("{t}.tnsr"))))
        .collect();
    assert_eq!(
        params(&target).content_digest(),
        baseline_average(&models).unwrap().content_digest()
    );
    assert!(!out.path().join("avg.tnsr.selection.csv").exists());
    assert!(out.path().join("avg.tnsr.manifest.json").exists());
}

#[test]
fn fuse_identical_models_returns_pre() {
    let dir = trained();
    let out = TempDir::new().unwrap();
    let target = out.path().join("same.tnsr");
    let stdout = vecforge_ok(
        dir,
        &[
            "fuse",
            "--pre",
            "base.tnsr",
            "--task",
            "task0.tnsr",
            "task0.tnsr",
            "--samples",
            "data_task0.tnsr",
            "data_task0.tnsr",
            "--out",
            target.to_str().unwrap(),
        ],
    )
    .stdout;
    assert!(String::from_utf8_lossy(&stdout).contains("same.tnsr.selection.csv"));
    // Identical importance everywhere: every position is an all-tie, nothing is kept.
    assert_eq!(params(&target), params(&dir.join("base.tnsr")));
    let csv = fs::read_to_string(out.path().join("same.tnsr.selection.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",0")));
}

#[test]
fn fuse_error_codes() {
    let dir = trained();
    let out = TempDir::new().unwrap();
    let o = out.path().join("x.tnsr");
    let o = o.to_str().unwrap();
    // No importance source for LP.
    assert_eq!(
        code(&vecforge(
            dir,
            &[
                "fuse",
                "--pre",
                "base.tnsr",
                "--task",
                "task0.tnsr",
                "task1.tnsr",
                "--out",
                o
            ]
        )),
        2
    );
    // Too few tasks, bad p, mismatched source counts.
    assert_eq!(
        code(&vecforge(
            dir,
            &[
                "fuse",
                "--pre",
                "base.tnsr",
                "--task",
                "task0.tnsr",
                "--baseline",
                "ta",
                "--out",
                o
            ]
        )),
        2
    );
    assert_eq!(
        code(&vecforge(
            dir,
            &[
                "fuse",
                "--pre",
                "base.tnsr",
                "--task",
                "task0.tnsr",
                "task1.tnsr",
                "--metric",
                "Amp",
                "--p",
                "1.5",
                "--out",
                o
            ]
        )),
        2
    );
    assert_eq!(
        code(&vecforge(
            dir,
            &[
                "fuse",
                "--pre",
                "base.tnsr",
                "--task",
                "task0.tnsr",
                "task1.tnsr",
                "--samples",
                "data_task0.tnsr",
                "--out",
                o
            ]
        )),
        2
    );
    // A dataset fixture is not a checkpoint.
    assert_eq!(
        code(&vecforge(
            dir,
            &[
                "fuse",
                "--pre",
                "base.tnsr",
                "--task",
                "task0.tnsr",
                "data_task1.tnsr",
                "--baseline",
                "ta",
                "--out",
                o
            ]
        )),
        4
    );
    // Missing input.
    assert_eq!(
        code(&vecforge(
            dir,
            &[
                "fuse",
                "--pre",
                "nope.tnsr",
                "--task",
                "task0.tnsr",
                "task1.tnsr",
                "--baseline",
                "ta",
                "--out",
                o
            ]
        )),
        3
    );
    assert!(!out.path().join("x.tnsr").exists());
}

#[test]
fn overflowing_deltas_exit_numeric() {
    let dir = TempDir::new().unwrap();
    let base = params(&trained().join("base.tnsr"));
    let meta = vecforge::Meta::new(vecforge::Kind::Params);
    for (name, v) in [("lo.tnsr", -1e308), ("hi.tnsr", 1e308)] {
        let ps = base.map(|_, t| Ok(t.full_like(v))).unwrap();
        store::save_file(&dir.path().join(name), &ps, &meta).unwrap();
    }
    let out = vecforge(
        dir.path(),
        &[
            "fuse",
            "--pre",
            "lo.tnsr",
            "--task",
            "hi.tnsr",
            "hi.tnsr",
            "--baseline",
            "ta",
            "--out",
            "x.tnsr",
        ],
    );
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("x.tnsr").exists());
}

#[test]
fn fuse_rejects_incompatible_checkpoints() {
    let dir = TempDir::new().unwrap();
    fs::write(
        dir.path().join("narrow.json"),
        r#"{"hidden": 8, "train_size": 64, "test_size": 16, "base_steps": 1, "finetune_steps": 1}"#,
    )
    .unwrap();
    vecforge_ok(
        dir.path(),
        &["train-toy", "--spec", "narrow.json", "--out", "n"],
    );
    let base = trained().join("base.tnsr");
    let out = vecforge(
        dir.path(),
        &[
            "fuse",
            "--pre",
            base.to_str().unwrap(),
            "--task",
            "n/task0.tnsr",
            "n/task1.tnsr",
            "--baseline",
            "ta",
            "--out",
            "x.tnsr",
        ],
    );
    assert_eq!(code(&out), 4);
    let data = trained().join("data_task0.tnsr");
    let out = vecforge(
        dir.path(),
        &[
            "eval",
            "--model",
            "n/base.tnsr",
            "--data",
            data.to_str().unwrap(),
            "--report",
            "r.csv",
        ],
    );
    assert_eq!(code(&out), 0, "same input dim and classes evaluate fine");
    let out = vecforge(
        dir.path(),
        &[
            "eval",
            "--model",
            base.to_str().unwrap(),
            "--data",
            "n/task0.tnsr",
            "--report",
            "r.csv",
        ],
    );
    assert_eq!(code(&out), 4);
}

#[test]
fn forget_boundaries() {
    let dir = trained();
    let out = TempDir::new().unwrap();
    let base = params(&dir.join("base.tnsr"));
    let ta = out.path().join("ta.tnsr");
    vecforge_ok(
        dir,
        &[
            "forget",
            "--model",
            "base.tnsr",
            "--pre",
            "base.tnsr",
            "--task",
            "task1.tnsr",
            "--baseline",
            "ta",
            "--gamma",
            "0",
            "--out",
            ta.to_str().unwrap(),
        ],
    );
    assert_eq!(params(&ta), base);
    let sta = out.path().join("sta.tnsr");
    vecforge_ok(
        dir,
        &[
            "forget",
            "--model",
            "base.tnsr",
            "--pre",
            "base.tnsr",
            "--task",
            "task1.tnsr",
            "--samples",
            "data_task1.tnsr",
            "--p",
            "1",
            "--out",
            sta.to_str().unwrap(),
        ],
    );
    assert_eq!(params(&sta), base);
}

#[test]
fn forget_lowers_target_accuracy() {
    let dir = trained();
    let out = TempDir::new().unwrap();
    let model = out.path().join("f.tnsr");
    let report = out.path().join("f.csv");
    let before = out.path().join("b.csv");
    vecforge_ok(
        dir,
        &[
            "forget",
            "--model",
            "base.tnsr",
            "--pre",
            "base.tnsr",
            "--task",
            "task2.tnsr",
            "--samples",
            "data_task2.tnsr",
            "--out",
            model.to_str().unwrap(),
        ],
    );
    vecforge_ok(
        dir,
        &[
            "eval",
            "--model",
            model.to_str().unwrap(),
            "--data",
            "data_task2.tnsr",
            "--report",
            report.to_str().unwrap(),
        ],
    );
    vecforge_ok(
        dir,
        &[
            "eval",
            "--model",
            "base.tnsr",
            "--data",
            "data_task2.tnsr",
            "--report",
            before.to_str().unwrap(),
        ],
    );
    let acc = |p: &Path| -> f64 {
        let text = fs::read_to_string(p).unwrap();
        text.lines()
            .nth(1)
            .unwrap()
            .split(',')
            .nth(1)
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!(
        acc(&report) < acc(&before),
        "{} vs {}",
        acc(&report),
        acc(&before)
    );
}

#[test]
fn eval_report_format_and_errors() {
    let dir = trained();
    let out = TempDir::new().unwrap();
    let report = out.path().join("r.csv");
    vecforge_ok(
        dir,
        &[
            "eval",
            "--model",
            "base.tnsr",
            "--data",
            "data_base.tnsr",
            "data_task0.tnsr",
            "--report",
            report.to_str().unwrap(),
        ],
    );
    let text = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "task_id,accuracy");
    assert_eq!(lines.len(), 4);
    assert!(
        lines[1].starts_with("base,")
            && lines[2].starts_with("task0,")
            && lines[3].starts_with("average,")
    );
    let base_acc: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    assert!(base_acc > 0.9, "base mixture accuracy {base_acc}");

    assert_eq!(
        code(&vecforge(
            dir,
            &["eval", "--model", "base.tnsr", "--report", "r.csv"]
        )),
        2
    );
    assert_eq!(
        code(&vecforge(
            dir,
            &[
                "eval",
                "--model",
                "base.tnsr",
                "--data",
                "task0.tnsr",
                "--report",
                "r.csv"
            ]
        )),
        4
    );
}

#[test]
fn importance_command_feeds_fuse() {
    let dir = trained();
    let out = TempDir::new().unwrap();
    let p = |n: &str| out.path().join(n).to_str().unwrap().to_owned();
    for i in 0..2 {
        vecforge_ok(
            dir,
            &[
                "importance",
                "--model",
                &format!("task{i}.tnsr"),
                "--samples",
                &format!("data_task{i}.tnsr"),
                "--out",
                &p(&format!("imp{i}.tnsr")),
            ],
        );
    }
    vecforge_ok(
        dir,
        &[
            "fuse",
            "--pre",
            "base.tnsr",
            "--task",
            "task0.tnsr",
            "task1.tnsr",
            "--importance",
            &p("imp0.tnsr"),
            &p("imp1.tnsr"),
            "--out",
            &p("a.tnsr"),
        ],
    );
    vecforge_ok(
        dir,
        &[
            "fuse",
            "--pre",
            "base.tnsr",
            "--task",
            "task0.tnsr",
            "task1.tnsr",
            "--samples",
            "data_task0.tnsr",
            "data_task1.tnsr",
            "--out",
            &p("b.tnsr"),
        ],
    );
    assert_eq!(
        fs::read(p("a.tnsr")).unwrap(),
        fs::read(p("b.tnsr")).unwrap()
    );
    // Stored metric must agree with an explicit --metric.
    let out = vecforge(
        dir,
        &[
            "fuse",
            "--pre",
            "base.tnsr",
            "--task",
            "task0.tnsr",
            "task1.tnsr",
            "--importance",
            &p("imp0.tnsr"),
            &p("imp1.tnsr"),
            "--metric",
            "Amp",
            "--out",
            &p("c.tnsr"),
        ],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn thread_cap_does_not_change_output() {
    let dir = trained();
    let out = TempDir::new().unwrap();
    let run = |threads: &str, name: &str| {
        let target = out.path().join(name);
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_vecforge"))
            .current_dir(dir)
            .env("VECFORGE_THREADS", threads)
            .args([
                "fuse",
                "--pre",
                "base.tnsr",
                "--task",
                "task0.tnsr",
                "task1.tnsr",
                "task2.tnsr",
                "--samples",
            ])
            .args([
                "data_task0.tnsr",
                "data_task1.tnsr",
                "data_task2.tnsr",
                "--out",
                target.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        (status.code().unwrap(), fs::read(&target).ok())
    };
    let (c1, one) = run("1", "one.tnsr");
    let (c0, auto) = run("0", "auto.tnsr");
    assert_eq!((c1, c0), (0, 0));
    assert_eq!(one, auto);
    assert_eq!(run("many", "bad.tnsr").0, 2);
}
