//! Aggregation invariants and the FedAvg-vs-centralized one-step oracle.

use fedbell_core::fedavg::aggregate;
use fedbell_core::model::{evaluate, loss_and_gradient, sgd_step};
use fedbell_core::{
    init_params, local_train, ClassifierConfig, ClientUpdate, LabeledExample, ModelParams, TrainConfig,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_params(rng: &mut ChaCha8Rng, shape: &ModelParams) -> ModelParams {
    let flat: Vec<f64> = (0..shape.num_parameters())
        .map(|_| rng.random_range(-3.0..3.0))
        .collect();
    shape.with_flat(&flat).unwrap()
}

fn random_updates(seed: u64, k: usize) -> Vec<ClientUpdate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ClassifierConfig {
        input_dim: rng.random_range(1..40),
        hidden_dim: rng.random_range(0..12),
        num_classes: rng.random_range(2..6),
        seed,
    };
    let shape = init_params(&cfg).unwrap();
    (0..k)
        .map(|i| ClientUpdate {
            client_id: format!("client-{:03}", rng.random_range(0..1000) * 10 + i),
            round: 7,
            sample_count: rng.random_range(1..10_000),
            params: random_params(&mut rng, &shape),
        })
        .collect()
}

/// `sum_k n_k * w_k / n`, in input order.
fn weighted_mean_oracle(updates: &[ClientUpdate]) -> Vec<f64> {
    let n: u64 = updates.iter().map(|u| u.sample_count).sum();
    let mut acc = vec![0.0; updates[0].params.num_parameters()];
    for u in updates {
        for (a, w) in acc.iter_mut().zip(u.params.flatten()) {
            *a += u.sample_count as f64 * w;
        }
    }
    acc.iter().map(|a| a / n as f64).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_weighted_mean(seed in any::<u64>(), k in 1usize..=8) {
        let updates = random_updates(seed, k);
        let global = aggregate(&updates).unwrap();
        prop_assert_eq!(global.total_samples, updates.iter().map(|u| u.sample_count).sum::<u64>());
        for (g, o) in global.params.flatten().iter().zip(weighted_mean_oracle(&updates)) {
            prop_assert!((g - o).abs() <= 1e-12, "{} vs {}", g, o);
        }
    }

    #[test]
    fn permutation_invariant_bitwise(seed in any::<u64>(), k in 1usize..=8) {
        let updates = random_updates(seed, k);
        let mut shuffled = updates.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let a: Vec<u64> = aggregate(&updates).unwrap().params.flatten().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = aggregate(&shuffled).unwrap().params.flatten().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn components_stay_within_client_range(seed in any::<u64>(), k in 1usize..=8) {
        let updates = random_updates(seed, k);
        let global = aggregate(&updates).unwrap().params.flatten();
        let flats: Vec<Vec<f64>> = updates.iter().map(|u| u.params.flatten()).collect();
        for (j, g) in global.iter().enumerate() {
            let lo = flats.iter().map(|f| f[j]).fold(f64::INFINITY, f64::min);
            let hi = flats.iter().map(|f| f[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= *g && *g <= hi);
        }
    }

    #[test]
    fn identical_params_are_preserved(seed in any::<u64>(), k in 1usize..=8) {
        let mut updates = random_updates(seed, k);
        let shared = updates[0].params.clone();
        for u in &mut updates {
            u.params = shared.clone();
        }
        let global = aggregate(&updates).unwrap().params.flatten();
        for (g, w) in global.iter().zip(shared.flatten()) {
            prop_assert!((g - w).abs() <= 1e-12);
        }
    }
}

fn random_dataset(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Vec<LabeledExample> {
    (0..n)
        .map(|_| {
            let x = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            LabeledExample::new(x, rng.random_range(0..classes)).unwrap()
        })
        .collect()
}

/// Splits `data` into `k` non-empty contiguous shards of random sizes.
fn random_shards(rng: &mut ChaCha8Rng, data: &[LabeledExample], k: usize) -> Vec<Vec<LabeledExample>> {
    let mut cuts: Vec<usize> = (1..data.len()).collect();
    cuts.shuffle(rng);
    let mut cuts: Vec<usize> = cuts.into_iter().take(k - 1).collect();
    cuts.sort_unstable();
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(data.len());
    bounds.windows(2).map(|w| data[w[0]..w[1]].to_vec()).collect()
}

#[test]
fn one_round_equals_centralized_gradient_step() {
    for seed in 0..25u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ClassifierConfig {
            input_dim: rng.random_range(2..10),
            hidden_dim: [0, 3, 8][seed as usize % 3],
            num_classes: rng.random_range(2..5),
            seed,
        };
        let w0 = init_params(&cfg).unwrap();
        let n = rng.random_range(20..120);
        let data = random_dataset(&mut rng, n, cfg.input_dim, cfg.num_classes);
        let k = rng.random_range(1..=8);
        let shards = random_shards(&mut rng, &data, k);
        let train = TrainConfig {
            epochs: 1,
            batch_size: usize::MAX,
            learning_rate: 0.1,
            shuffle_seed: seed,
        };
        let updates: Vec<ClientUpdate> = shards
            .iter()
            .enumerate()
            .map(|(i, shard)| ClientUpdate {
                client_id: format!("c{i}"),
                round: 1,
                sample_count: shard.len() as u64,
                params: local_train(&w0, shard, &train).unwrap(),
            })
            .collect();
        let federated = aggregate(&updates).unwrap().params.flatten();

        let (_, grad) = loss_and_gradient(&w0, &data).unwrap();
        let centralized = sgd_step(&w0, &grad, 0.1).unwrap().flatten();
        for (f, c) in federated.iter().zip(&centralized) {
            assert!((f - c).abs() <= 1e-9, "seed {seed}: {f} vs {c}");
        }
    }
}

#[test]
fn global_objective_is_weighted_local_objectives() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ClassifierConfig {
            input_dim: 4,
            hidden_dim: 3,
            num_classes: 3,
            seed,
        };
        let w = random_params(&mut rng, &init_params(&cfg).unwrap());
        let data = random_dataset(&mut rng, 90, 4, 3);
        let k = rng.random_range(1..=8);
        let shards = random_shards(&mut rng, &data, k);
        let n = data.len() as f64;
        let weighted: f64 = shards
            .iter()
            .map(|s| s.len() as f64 / n * evaluate(&w, s).unwrap().mean_loss)
            .sum();
        let union = evaluate(&w, &data).unwrap().mean_loss;
        assert!((weighted - union).abs() <= 1e-12, "seed {seed}: {weighted} vs {union}");
    }
}
