//! Parallel and sequential execution must agree bit for bit.
#![cfg(feature = "parallel")]

use fedbell_core::fedavg::aggregate_with;
use fedbell_core::model::{evaluate_with, local_train_with, loss_and_gradient_with};
use fedbell_core::synth::build_dataset_with;
use fedbell_core::{init_params, ClassifierConfig, ClientUpdate, Execution, TrainConfig};

const SEQ: Execution = Execution::Sequential;
const PAR: Execution = Execution::Parallel;

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn dataset_generation_agrees() {
    assert_eq!(
        build_dataset_with(SEQ, 300, 4, 9).unwrap(),
        build_dataset_with(PAR, 300, 4, 9).unwrap()
    );
}

#[test]
fn training_and_evaluation_agree() {
    let data = build_dataset_with(PAR, 400, 4, 3).unwrap();
    let cfg = ClassifierConfig {
        input_dim: 256,
        hidden_dim: 8,
        num_classes: 4,
        seed: 1,
    };
    let p = init_params(&cfg).unwrap();
    let (ls, gs) = loss_and_gradient_with(SEQ, &p, &data).unwrap();
    let (lp, gp) = loss_and_gradient_with(PAR, &p, &data).unwrap();
    assert_eq!(ls.to_bits(), lp.to_bits());
    assert_eq!(bits(&gs.flatten()), bits(&gp.flatten()));

    let tc = TrainConfig {
        epochs: 2,
        batch_size: 150,
        learning_rate: 0.1,
        shuffle_seed: 4,
    };
    let ts = local_train_with(SEQ, &p, &data, &tc).unwrap();
    let tp = local_train_with(PAR, &p, &data, &tc).unwrap();
    assert_eq!(bits(&ts.flatten()), bits(&tp.flatten()));

    let es = evaluate_with(SEQ, &ts, &data).unwrap();
    let ep = evaluate_with(PAR, &tp, &data).unwrap();
    assert_eq!(es, ep);
}

#[test]
fn aggregation_agrees() {
    let cfg = ClassifierConfig {
        input_dim: 256,
        hidden_dim: 40,
        num_classes: 4,
        seed: 0,
    };
    let updates: Vec<ClientUpdate> = (0..6)
        .map(|i| ClientUpdate {
            client_id: format!("c{i}"),
            round: 1,
            sample_count: 10 + i * 7,
            params: init_params(&ClassifierConfig { seed: i, ..cfg }).unwrap(),
        })
        .collect();
    let s = aggregate_with(SEQ, &updates).unwrap();
    let p = aggregate_with(PAR, &updates).unwrap();
    assert_eq!(bits(&s.params.flatten()), bits(&p.params.flatten()));
}
