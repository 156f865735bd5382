mod common;

use fedfreq::data::{default_profiles, synth, ClientProfile, FeatureTransform, Split};
use fedfreq::det::validation_f1;
use fedfreq::experiment::{client_rng, init_rng, run_experiment, run_experiment_on, ExperimentConfig, Strategy};
use fedfreq::metrics::{argmax_rows, macro_f1};
use fedfreq::model::{predict_probs, train_epoch_ce, ModelSpec, OptimizerState};
use rand::seq::SliceRandom;

#[test]
fn local_only_single_client_is_plain_sgd() {
    let profiles = default_profiles(0.1).unwrap();
    let data = synth(&profiles[..1], 4).unwrap();
    let cfg = ExperimentConfig {
        strategy: Strategy::LocalOnly,
        k: 1,
        t: 10,
        seed: 4,
        ..ExperimentConfig::default()
    };
    let out = run_experiment_on(&cfg, &data, None).unwrap();

    let spec = ModelSpec::mlp(data.dim, data.classes);
    let client = &data.clients[0];
    let (train, val) = (client.samples(Split::Train), client.samples(Split::Val));
    let mut params = spec.init_params(&mut init_rng(4, profiles[0].seed));
    let mut rng = client_rng(4, profiles[0].seed);
    let mut opt = OptimizerState::new(cfg.base_lr, cfg.lr_halving);
    for (epoch, row) in out.log.rows.iter().enumerate() {
        opt.epoch = epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let loss = train_epoch_ce(&mut params, &spec, &train.features, &train.labels, &order, 16, &opt, None).unwrap();
        assert_eq!(row.ce_loss, loss);
        assert_eq!(row.phi_p, validation_f1(&params, &spec, &val).unwrap());
    }
    assert_eq!(out.finals[0], params);
}

#[test]
fn curves_and_averages_are_consistent() {
    let cfg = ExperimentConfig {
        t: 10,
        seed: 2,
        ..ExperimentConfig::default()
    };
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.log.rows.len(), cfg.k * cfg.t);
    assert_eq!(out.results.aggregation_events, cfg.t / cfg.e);
    let mean = out.results.clients.iter().map(|c| c.test.f1).sum::<f64>() / cfg.k as f64;
    assert!((out.results.average.test.f1 - mean).abs() < 1e-12);
    for row in &out.log.rows {
        assert_eq!(row.comm_event, (row.epoch + 1) % cfg.e == 0);
    }
}

fn linear_f1(train_on: &fedfreq::data::ClientDataset, test_on: &fedfreq::data::ClientDataset, seed: u64) -> f64 {
    let spec = ModelSpec::linear(train_on.dim, train_on.classes);
    let mut params = spec.init_params(&mut common::rng(seed));
    let train = train_on.samples(Split::Train);
    let order: Vec<usize> = (0..train.len()).collect();
    let opt = OptimizerState::new(0.05, 1000);
    for _ in 0..40 {
        train_epoch_ce(&mut params, &spec, &train.features, &train.labels, &order, 16, &opt, None).unwrap();
    }
    let test = test_on.samples(Split::Test);
    let probs = predict_probs(&params, &spec, &test.features).unwrap();
    macro_f1(&argmax_rows(&probs, 3), &test.labels, 3).unwrap()
}

#[test]
fn transforms_make_clients_heterogeneous() {
    let base = default_profiles(0.1).unwrap()[0].clone();
    let shifted = ClientProfile {
        name: "A'".into(),
        transform: FeatureTransform::family(base.transform.dim(), 3.0, 75.0),
        ..base.clone()
    };
    for seed in 0..5 {
        let data = synth(&[base.clone(), shifted.clone()], seed).unwrap();
        let own = linear_f1(&data.clients[0], &data.clients[0], seed);
        let other = linear_f1(&data.clients[0], &data.clients[1], seed);
        assert!(other < own, "seed {seed}: own {own:.3}, other {other:.3}");
    }
}

#[test]
fn held_out_client_scores_lower() {
    let (mut own, mut ood) = (0.0, 0.0);
    for seed in 0..3 {
        let cfg = ExperimentConfig {
            strategy: Strategy::LocalOnly,
            t: 20,
            seed,
            ..ExperimentConfig::default()
        };
        let avg = run_experiment(&cfg).unwrap().results.average;
        own += avg.test.f1;
        ood += avg.ood.unwrap().f1;
    }
    assert!(ood < own, "ood {ood:.3} vs own {own:.3}");
}
