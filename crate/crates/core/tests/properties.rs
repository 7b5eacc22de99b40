mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::single;
use vecforge::importance::{
    amp_importance, lp_importance, mixed_importance, normalize_per_layer, ImportanceMap, Metric,
};
use vecforge::mask::{cross_masks, cross_threshold, forget_mask};
use vecforge::merge::{sta_forget, sta_fuse, task_vector, MergeConfig};
use vecforge::toy::{
    backward, forward_loss, gen_task, sgd_finetune, Benchmark, BenchmarkSpec, MlpShape, SgdConfig,
    SyntheticTaskSpec,
};
use vecforge::{ParamSet, Tensor};

fn raw_map(task_id: &str, scores: ParamSet) -> ImportanceMap {
    ImportanceMap {
        scores,
        metric: Metric::Lp,
        normalized: false,
        task_id: task_id.into(),
        sample_count: 1,
    }
}

fn small_model() -> (ParamSet, vecforge::toy::SampleBatch) {
    let (train, _) = gen_task(&SyntheticTaskSpec::new("p", 3)).unwrap();
    let params = MlpShape::new(16, 8, 8).init(7).unwrap();
    let trained = sgd_finetune(
        &params,
        &train,
        &SgdConfig {
            steps: 30,
            ..SgdConfig::default()
        },
    )
    .unwrap();
    (trained, train.sample_subset(12, 5).unwrap())
}

#[test]
fn lp_matches_per_sample_oracle_and_differs_from_batched() {
    let (params, samples) = small_model();
    let lp = lp_importance(&params, &samples, "p").unwrap();
    let mut batched_differs = false;
    let batch_grad = backward(&params, &samples).unwrap();
    for (name, theta) in &params {
        let theta = theta.to_f64_vec();
        let mut oracle = vec![0.0; theta.len()];
        for j in 0..samples.len() {
            let g = backward(&params, &samples.single(j))
                .unwrap()
                .get(name)
                .unwrap()
                .to_f64_vec();
            for (o, (t, g)) in oracle.iter_mut().zip(theta.iter().zip(&g)) {
                *o += (t * g).abs();
            }
        }
        assert_eq!(lp.scores.get(name).unwrap().to_f64_vec(), oracle, "{name}");
        let n = samples.len() as f64;
        let batched: Vec<f64> = theta
            .iter()
            .zip(batch_grad.get(name).unwrap().to_f64_vec())
            .map(|(t, g)| (t * g * n).abs())
            .collect();
        batched_differs |= batched
            .iter()
            .zip(&oracle)
            .any(|(b, o)| (b - o).abs() > 1e-9);
    }
    assert!(
        batched_differs,
        "per-sample accumulation should not collapse to the batched gradient"
    );
}

#[test]
fn mixed_is_lp_times_amp_on_a_model() {
    let (params, samples) = small_model();
    let lp = lp_importance(&params, &samples, "p").unwrap();
    let amp = amp_importance(&params, "p");
    let mixed = mixed_importance(&params, &samples, "p").unwrap();
    for (name, m) in &mixed.scores {
        let expect: Vec<f64> = lp
            .scores
            .get(name)
            .unwrap()
            .to_f64_vec()
            .iter()
            .zip(amp.scores.get(name).unwrap().to_f64_vec())
            .map(|(l, a)| l * a)
            .collect();
        assert_eq!(m.to_f64_vec(), expect);
    }
}

#[test]
fn normalized_lp_is_invariant_to_sample_order() {
    let (params, samples) = small_model();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.reverse();
    order.swap(0, 5);
    let shuffled = samples.select(&order).unwrap();
    let a = normalize_per_layer(&lp_importance(&params, &samples, "p").unwrap()).unwrap();
    let b = normalize_per_layer(&lp_importance(&params, &shuffled, "p").unwrap()).unwrap();
    for (name, t) in &a.scores {
        for (x, y) in t
            .to_f64_vec()
            .iter()
            .zip(b.scores.get(name).unwrap().to_f64_vec())
        {
            assert!((x - y).abs() <= 1e-12, "{name}: {x} vs {y}");
        }
    }
}

#[test]
fn default_training_lowers_loss_and_fits_each_task() {
    let bench = Benchmark::build(&BenchmarkSpec::default(), 11).unwrap();
    for task in &bench.tasks {
        let before = forward_loss(&bench.base, &task.train).unwrap().0;
        let after = forward_loss(&task.finetuned, &task.train).unwrap().0;
        assert!(after <= before, "{}: {after} > {before}", task.spec.task_id);
        let acc = vecforge::toy::evaluate(&task.finetuned, &task.test).unwrap();
        assert!(acc > 0.9, "{}: own-task accuracy {acc}", task.spec.task_id);
    }
    let base_acc = vecforge::toy::evaluate(&bench.base, &bench.base_test).unwrap();
    assert!(base_acc > 0.9, "base mixture accuracy {base_acc}");
}

#[test]
fn sta_fuse_disjoint_masks_match_recomposition() {
    // Task a wins positions 0..5, task b wins 5..10.
    let pre = single("w", &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
    let fa = single("w", &[0.5, 1.5, 1.0, 3.25, 5.0, 4.0, 6.5, 8.0, 7.0, 9.5]);
    let fb = single("w", &[1.0, 0.0, 2.5, 2.0, 4.5, 5.5, 5.0, 7.25, 9.0, 8.0]);
    let ia: Vec<f64> = (0..10)
        .map(|i| {
            if i < 5 {
                0.9 - 0.01 * i as f64
            } else {
                0.1 + 0.01 * i as f64
            }
        })
        .collect();
    let ib: Vec<f64> = ia.iter().map(|v| 1.0 - v).collect();
    let deltas = [
        task_vector(&fa, &pre, "a").unwrap(),
        task_vector(&fb, &pre, "b").unwrap(),
    ];
    let ims: Vec<ImportanceMap> = [("a", &ia), ("b", &ib)]
        .iter()
        .map(|(id, v)| normalize_per_layer(&raw_map(id, single("w", v))).unwrap())
        .collect();
    let fused = sta_fuse(&pre, &deltas, &ims, &MergeConfig::default()).unwrap();

    let pre_v = pre.get("w").unwrap().to_f64_vec();
    let expect: Vec<f64> = (0..10)
        .map(|i| {
            let winner = if i < 5 { &fa } else { &fb };
            pre_v[i] + (winner.get("w").unwrap().get_f64(i) - pre_v[i])
        })
        .collect();
    assert_eq!(fused.get("w").unwrap().to_f64_vec(), expect);
    assert_eq!(fused.schema_digest(), pre.schema_digest());
}

#[test]
fn forget_with_p_one_keeps_model() {
    let pre = single("w", &[1.0, 2.0, 3.0]);
    let fine = single("w", &[2.0, 0.0, 3.5]);
    let im = normalize_per_layer(&raw_map("t", single("w", &[0.2, 0.7, 0.1]))).unwrap();
    let tv = task_vector(&fine, &pre, "t").unwrap();
    let out = sta_forget(
        &pre,
        &tv,
        &im,
        &MergeConfig {
            p: 1.0,
            ..MergeConfig::default()
        },
    )
    .unwrap();
    assert_eq!(out, pre);
}

fn random_layers(rng: &mut ChaCha8Rng, sizes: &[usize]) -> ParamSet {
    let mut ps = ParamSet::new();
    for (i, &n) in sizes.iter().enumerate() {
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 5.0).collect();
        ps.insert(format!("l{i}"), Tensor::from_f64(vec![n], v).unwrap())
            .unwrap();
    }
    ps
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forgetting_mask_is_scale_equivariant(seed in any::<u64>(), c in 1e-3f64..1e3, p in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores = random_layers(&mut rng, &[17, 40]);
        let scaled = scores.map(|_, t| Ok(t.map_f64(|v| v * c))).unwrap();
        let a = forget_mask(&normalize_per_layer(&raw_map("t", scores)).unwrap(), p).unwrap();
        let b = forget_mask(&normalize_per_layer(&raw_map("t", scaled)).unwrap(), p).unwrap();
        prop_assert_eq!(&a.masks[0].mask, &b.masks[0].mask);
    }

    #[test]
    fn fusion_masks_cover_positions(seed in any::<u64>(), n in 2usize..6, p in 0.0f64..1.0) {
        // With distinct values the strict quantile at p < 1 leaves the maximum
        // above the threshold, so at least one task keeps every position.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ims: Vec<ImportanceMap> = (0..n)
            .map(|i| normalize_per_layer(&raw_map(&format!("t{i}"), random_layers(&mut rng, &[9, 4]))).unwrap())
            .collect();
        let masks = cross_masks(&ims, &cross_threshold(&ims, p).unwrap()).unwrap();
        for name in ims[0].scores.names() {
            let len = ims[0].scores.get(name).unwrap().len();
            for pos in 0..len {
                let values: Vec<f64> = ims.iter().map(|im| im.scores.get(name).unwrap().get_f64(pos)).collect();
                let distinct = (1..n).all(|i| values[..i].iter().all(|v| *v != values[i]));
                let kept = masks.masks.iter().filter(|m| m.mask.get(name).unwrap().get_f64(pos) == 1.0).count();
                if distinct {
                    prop_assert!(kept >= 1);
                }
                let max_kept = masks.masks.iter().zip(&values).any(|(m, v)| {
                    *v == values.iter().cloned().fold(f64::MIN, f64::max) && m.mask.get(name).unwrap().get_f64(pos) == 1.0
                });
                prop_assert!(kept == 0 || max_kept);
            }
        }
    }
}
