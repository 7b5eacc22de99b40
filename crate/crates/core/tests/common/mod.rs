#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use vecforge::importance::{lp_importance, normalize_per_layer, ImportanceMap};
use vecforge::merge::{task_vector, MergeConfig, TaskVector};
use vecforge::toy::Benchmark;
use vecforge::{ParamSet, Tensor};

pub fn single(name: &str, values: &[f64]) -> ParamSet {
    let mut ps = ParamSet::new();
    ps.insert(
        name,
        Tensor::from_f64(vec![values.len()], values.to_vec()).unwrap(),
    )
    .unwrap();
    ps
}

pub fn task_vectors(bench: &Benchmark) -> Vec<TaskVector> {
    bench
        .tasks
        .iter()
        .map(|t| task_vector(&t.finetuned, &bench.base, &t.spec.task_id).unwrap())
        .collect()
}

/// Normalized LP importance of every fine-tuned model, sampled as the CLI does.
pub fn importances(bench: &Benchmark, cfg: &MergeConfig) -> Vec<ImportanceMap> {
    bench
        .tasks
        .iter()
        .map(|t| {
            let samples = t
                .train
                .sample_subset(cfg.importance_samples, cfg.seed)
                .unwrap();
            normalize_per_layer(&lp_importance(&t.finetuned, &samples, &t.spec.task_id).unwrap())
                .unwrap()
        })
        .collect()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Runs the `vecforge` binary in `dir`.
pub fn vecforge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vecforge"))
        .current_dir(dir)
        .args(args)
        .env_remove("VECFORGE_THREADS")
        .output()
        .expect("spawn vecforge")
}

pub fn vecforge_ok(dir: &Path, args: &[&str]) -> Output {
    let out = vecforge(dir, args);
    assert!(
        out.status.success(),
        "vecforge {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}
