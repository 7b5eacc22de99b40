//! Desk-scale substrate for end-to-end checks: synthetic tasks, a small MLP
//! trained with SGD, and accuracy evaluation.

pub mod bench;
pub mod data;
pub mod mlp;

pub use bench::{derive_seed, Benchmark, BenchmarkSpec, TaskRun, BASE_TASK_ID};
pub use data::{
    fixture_meta, fixture_params, fixture_split, gen_task, SampleBatch, SyntheticTaskSpec,
};
pub use mlp::{backward, evaluate, forward_loss, loss_and_grad, sgd_finetune, MlpShape, SgdConfig};
