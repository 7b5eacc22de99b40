//! Multi-task synthetic benchmark: a base model pretrained on the mixture of
//! all tasks, then one fine-tuned model per task starting from that base.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamSet;
use crate::toy::data::{gen_task, SampleBatch, SyntheticTaskSpec};
use crate::toy::mlp::{evaluate, sgd_finetune, MlpShape, SgdConfig};

pub const BASE_TASK_ID: &str = "base";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub task_count: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub hidden: usize,
    pub noise_sigma: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub base_steps: usize,
    pub base_lr: f64,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub batch_size: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> BenchmarkSpec {
        BenchmarkSpec {
            task_count: 4,
            input_dim: 16,
            num_classes: 8,
            hidden: 32,
            noise_sigma: 0.3,
            train_size: 2048,
            test_size: 512,
            base_steps: 150,
            base_lr: 0.1,
            finetune_steps: 300,
            finetune_lr: 0.05,
            batch_size: 64,
        }
    }
}

/// splitmix64 finalizer; derives independent sub-seeds from a run seed.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed
        .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.task_count < 2 {
            return Err(Error::InvalidSpec("need at least two tasks".into()));
        }
        if self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::InvalidSpec(
                "hidden and batch_size must be positive".into(),
            ));
        }
        for lr in [self.base_lr, self.finetune_lr] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::InvalidSpec(format!("learning rate {lr}")));
            }
        }
        self.task_specs(0)
            .iter()
            .try_for_each(SyntheticTaskSpec::validate)
    }

    pub fn shape(&self) -> MlpShape {
        MlpShape::new(self.input_dim, self.hidden, self.num_classes)
    }

    pub fn task_specs(&self, seed: u64) -> Vec<SyntheticTaskSpec> {
        (0..self.task_count)
            .map(|i| SyntheticTaskSpec {
                task_id: format!("task{i}"),
                input_dim: self.input_dim,
                num_classes: self.num_classes,
                prototype_seed: derive_seed(seed, 100 + i as u64),
                noise_sigma: self.noise_sigma,
                train_size: self.train_size,
                test_size: self.test_size,
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TaskRun {
    pub spec: SyntheticTaskSpec,
    pub train: SampleBatch,
    pub test: SampleBatch,
    pub finetuned: ParamSet,
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub seed: u64,
    pub base: ParamSet,
    pub base_train: SampleBatch,
    pub base_test: SampleBatch,
    pub tasks: Vec<TaskRun>,
}

impl Benchmark {
    pub fn build(spec: &BenchmarkSpec, seed: u64) -> Result<Benchmark> {
        spec.validate()?;
        let mut splits = Vec::with_capacity(spec.task_count);
        for task in spec.task_specs(seed) {
            let (train, test) = gen_task(&task)?;
            splits.push((task, train, test));
        }
        let base_train = SampleBatch::concat(&splits.iter().map(|s| &s.1).collect::<Vec<_>>())?;
        let base_test = SampleBatch::concat(&splits.iter().map(|s| &s.2).collect::<Vec<_>>())?;

        let init = spec.shape().init(derive_seed(seed, 1))?;
        let base = sgd_finetune(
            &init,
            &base_train,
            &SgdConfig {
                steps: spec.base_steps,
                lr: spec.base_lr,
                batch_size: spec.batch_size,
                seed: derive_seed(seed, 2),
            },
        )?;

        let tasks = splits
            .into_iter()
            .enumerate()
            .map(|(i, (task, train, test))| {
                let finetuned = sgd_finetune(
                    &base,
                    &train,
                    &SgdConfig {
                        steps: spec.finetune_steps,
                        lr: spec.finetune_lr,
                        batch_size: spec.batch_size,
                        seed: derive_seed(seed, 200 + i as u64),
                    },
                )?;
                Ok(TaskRun {
                    spec: task,
                    train,
                    test,
                    finetuned,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Benchmark {
            seed,
            base,
            base_train,
            base_test,
            tasks,
        })
    }

    /// Test accuracy of `params` on every task, in task order.
    pub fn accuracies(&self, params: &ParamSet) -> Result<Vec<f64>> {
        self.tasks
            .iter()
            .map(|t| evaluate(params, &t.test))
            .collect()
    }
}
