mod common;

use dcmgnn::evaluation::EvalData;
use dcmgnn::graph::{split_train_test, MultiplexBipartiteGraph};
use dcmgnn::model::{Model, ModelConfig};
use dcmgnn::rng::{stream, Stream};
use dcmgnn::synth::{generate, SynthConfig};
use dcmgnn::training::{
    adam_step, sample_negative, train, AdamState, Context, NegativeSampler, TrainConfig, TrainState,
};

fn small_data() -> (MultiplexBipartiteGraph, EvalData) {
    let cfg = SynthConfig {
        users: 40,
        items: 40,
        communities: 4,
        views_per_user: 8,
        carts_per_user: 4,
        buys_per_user: 3,
        ..SynthConfig::default()
    };
    let graph = generate(&cfg).unwrap().graph().unwrap();
    let split = split_train_test(&graph, 0.7, 42).unwrap();
    (split.train_graph(&graph).unwrap(), EvalData::new(&graph, &split))
}

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        model: ModelConfig { dim: 8, ..ModelConfig::default() },
        lr: 0.01,
        batch_size: 32,
        epochs,
        probe_size: 32,
        ..TrainConfig::default()
    }
}

fn run(config: &TrainConfig, state: Option<TrainState>) -> (Vec<dcmgnn::training::EpochRecord>, TrainState) {
    let (train_graph, eval) = small_data();
    let model = Model::new(&train_graph, config.model.clone(), None).unwrap();
    let mut state = state.unwrap_or_else(|| TrainState::new(&model, config.seed));
    let records = train(&model, &train_graph, &eval, config, &mut state, &mut |_, _| Ok(())).unwrap();
    (records, state)
}

#[test]
fn negatives_are_uniform_over_non_positives() {
    let positives = [1, 4, 5, 9];
    let n = 12;
    let draws = 80_000;
    let mut counts = vec![0usize; n];
    let mut rng = stream(9, Stream::Negatives);
    for _ in 0..draws {
        counts[sample_negative(&positives, n, &mut rng).unwrap()] += 1;
    }
    for p in positives {
        assert_eq!(counts[p], 0);
    }
    let free = n - positives.len();
    let expected = draws as f64 / free as f64;
    let chi2: f64 = (0..n)
        .filter(|i| !positives.contains(i))
        .map(|i| (counts[i] as f64 - expected).powi(2) / expected)
        .sum();
    // 7 degrees of freedom; the 0.999 quantile is 24.3
    assert!(chi2 < 24.3, "chi2 = {chi2}");
}

#[test]
fn sampling_fails_for_a_saturated_user() {
    let mut rng = stream(1, Stream::Negatives);
    assert!(sample_negative(&[0, 1, 2], 3, &mut rng).is_err());
    assert_eq!(sample_negative(&[0, 2], 3, &mut rng).unwrap(), 1);
}

#[test]
fn chain_negatives_avoid_the_pattern_items() {
    let graph = common::tiny_graph();
    let model = Model::new(&graph, common::tiny_config(), None).unwrap();
    let sampler = NegativeSampler::new(&model, &graph);
    let mut rng = stream(3, Stream::Negatives);
    for c in 0..model.chains().len() {
        for &(u, _) in model.chain_positives(c) {
            for _ in 0..50 {
                let neg = sampler.sample(u, Context::Chain(c), &mut rng).unwrap();
                assert!(!model.chain_positives(c).contains(&(u, neg)));
            }
        }
    }
    for &(u, _) in graph.edges(2) {
        let neg = sampler.sample(u, Context::Target, &mut rng).unwrap();
        assert!(!graph.has_edge(2, u, neg));
    }
}

#[test]
fn first_adam_step_moves_by_learning_rate_times_sign() {
    let graph = common::tiny_graph();
    let model = Model::new(&graph, common::tiny_config(), None).unwrap();
    let params = model.init_params(1);
    let mut grads = params.zeros_like();
    grads.base[0][[0, 0]] = 3.0;
    grads.base[0][[1, 1]] = -0.02;
    let mut state = AdamState::new(&params);
    let mut p = params.clone();
    adam_step(&mut p, &grads, &mut state, 0.1).unwrap();
    assert!((p.base[0][[0, 0]] - (params.base[0][[0, 0]] - 0.1)).abs() < 1e-8);
    assert!((p.base[0][[1, 1]] - (params.base[0][[1, 1]] + 0.1)).abs() < 1e-6);
    assert_eq!(p.base[0][[2, 2]], params.base[0][[2, 2]]);
    assert_eq!(state.step, 1);

    // second step with the same gradient: m and v corrections cancel again
    adam_step(&mut p, &grads, &mut state, 0.1).unwrap();
    assert!((p.base[0][[0, 0]] - (params.base[0][[0, 0]] - 0.2)).abs() < 1e-8);
}

#[test]
fn non_finite_gradients_abort_without_touching_parameters() {
    let graph = common::tiny_graph();
    let model = Model::new(&graph, common::tiny_config(), None).unwrap();
    let params = model.init_params(1);
    let mut grads = params.zeros_like();
    grads.chain_encoder.bias = f64::NAN;
    let mut state = AdamState::new(&params);
    let mut p = params.clone();
    assert!(adam_step(&mut p, &grads, &mut state, 0.1).is_err());
    assert_eq!(p, params);
    assert_eq!(state.step, 0);
}

#[test]
fn zero_learning_rate_keeps_the_probe_loss_flat() {
    let config = TrainConfig { lr: 0.0, eval_every: 0, ..small_config(3) };
    let (records, _) = run(&config, None);
    assert_eq!(records.len(), 3);
    assert!(records.iter().all(|r| r.probe_loss == records[0].probe_loss));
}

#[test]
fn training_lowers_the_probe_loss() {
    let config = TrainConfig { eval_every: 0, ..small_config(5) };
    let (records, _) = run(&config, None);
    assert!(records.last().unwrap().probe_loss < records[0].probe_loss);
}

#[test]
fn same_seed_same_run() {
    let config = small_config(2);
    let (a, sa) = run(&config, None);
    let (b, sb) = run(&config, None);
    assert_eq!(a, b);
    assert_eq!(sa, sb);
}

#[test]
fn resuming_from_a_serialized_state_matches_one_run() {
    let (full, full_state) = run(&small_config(4), None);
    let (_, half) = run(&small_config(2), None);
    let restored: TrainState = serde_json::from_str(&serde_json::to_string(&half).unwrap()).unwrap();
    let (rest, resumed) = run(&small_config(4), Some(restored));
    assert_eq!(rest, full[2..].to_vec());
    assert_eq!(resumed, full_state);
}

#[test]
fn patience_stops_early_and_keeps_the_best_epoch() {
    // with lr = 0 the metric never improves after epoch 1
    let config = TrainConfig { lr: 0.0, patience: 2, ..small_config(10) };
    let (records, state) = run(&config, None);
    assert_eq!(records.len(), 3);
    assert_eq!(state.best_epoch, Some(1));
    assert_eq!(state.best_params.as_ref(), Some(&state.params));
}
