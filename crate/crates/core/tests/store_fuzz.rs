use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vecforge::store::{self, Kind, Meta};
use vecforge::toy::MlpShape;
use vecforge::{ParamSet, Tensor};

fn fixtures() -> Vec<Vec<u8>> {
    let mlp = MlpShape::new(3, 4, 2).init(1).unwrap();
    let mut mixed = ParamSet::new();
    mixed
        .insert(
            "h",
            Tensor::from_f32(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap(),
        )
        .unwrap();
    mixed
        .insert("m", Tensor::from_f64(vec![3], vec![0.0, 1.0, 1.0]).unwrap())
        .unwrap();
    vec![
        store::save(&mlp, &Meta::new(Kind::Params).with_task("x")).unwrap(),
        store::save(
            &mixed,
            &Meta::new(Kind::Importance).with_task("y").with_metric("LP"),
        )
        .unwrap(),
    ]
}

fn mutate(rng: &mut ChaCha8Rng, bytes: &[u8]) -> Vec<u8> {
    let mut out = bytes.to_vec();
    for _ in 0..rng.random_range(1..4) {
        match rng.random_range(0..4) {
            0 if !out.is_empty() => {
                let i = rng.random_range(0..out.len());
                out[i] ^= 1 << rng.random_range(0..8);
            }
            1 => out.truncate(rng.random_range(0..=out.len())),
            2 => {
                let i = rng.random_range(0..=out.len());
                out.insert(i, rng.random());
            }
            _ if !out.is_empty() => {
                let i = rng.random_range(0..out.len());
                out[i] = rng.random();
            }
            _ => {}
        }
    }
    out
}

#[test]
fn mutated_containers_never_panic() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut accepted = 0;
    for original in fixtures() {
        for _ in 0..3000 {
            let bytes = mutate(&mut rng, &original);
            if let Ok((ps, meta)) = store::load(&bytes) {
                accepted += 1;
                // Anything accepted must survive its own round trip.
                let again = store::save(&ps, &meta).unwrap();
                assert_eq!(store::load(&again).unwrap(), (ps, meta));
            }
        }
    }
    // Payload bit flips that keep values finite are legitimately accepted.
    assert!(accepted > 0);
}

#[test]
fn every_truncation_is_rejected() {
    for original in fixtures() {
        for len in 0..original.len() {
            assert!(
                store::load(&original[..len]).is_err(),
                "prefix of {len} bytes accepted"
            );
        }
    }
}
