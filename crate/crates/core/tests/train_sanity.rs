//! End-to-end training checks on a small planted-signal set: convergence
//! on a noise-free linear target, optimizer sanity, checkpoint round
//! trips, and bit-deterministic trajectories.

use gcgvt_core::data::{split, SplitSpec};
use gcgvt_core::model::{
    forward, prepare_sample, Checkpoint, ForwardOptions, ModelConfig, Sample, Variant,
};
use gcgvt_core::synth::{generate_synthetic, SynthConfig, OUTCOME_GEO};
use gcgvt_core::train::{evaluate, train, TrainConfig, TrainSetup};

fn sanity_setup(n: usize, sigma: f64, seed: u64) -> (Vec<Sample>, SplitSpec, Vec<String>, ModelConfig) {
    let synth = SynthConfig { n_samples: n, sigma, seed, ..Default::default() };
    let out = generate_synthetic(&synth).unwrap();
    let config = ModelConfig::desk(Variant::G);
    let samples: Vec<Sample> = out
        .samples
        .iter()
        .map(|s| {
            let record = gcgvt_core::data::Record {
                id: s.id.clone(),
                local_image: s.local_image.clone(),
                area_image: Some(s.area_image.clone()),
                local_geo: s.local_geo.clone(),
                area_geo: Some(s.area_geo.clone()),
                targets: s.targets.clone(),
            };
            prepare_sample(&record, &config).unwrap()
        })
        .collect();
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let split_spec = split(&ids, 0).unwrap();
    let outcomes = synth.outcome_names();
    (samples, split_spec, outcomes, config)
}

fn geo_outcome_index(outcomes: &[String]) -> usize {
    outcomes.iter().position(|o| o == OUTCOME_GEO).unwrap()
}

#[test]
fn linear_target_sanity_reaches_high_train_r2_within_budget() {
    // The geo outcome with sigma = 0 is exactly affine in the aggregated
    // geo means, so the model must fit the train split nearly perfectly
    // well inside the 128-epoch budget.
    let (samples, split_spec, outcomes, config) = sanity_setup(40, 0.0, 21);
    let setup = TrainSetup {
        samples: &samples,
        split: &split_spec,
        outcome_names: outcomes.clone(),
        outcome: Some(geo_outcome_index(&outcomes)),
        opts: ForwardOptions::default(),
    };
    let tc = TrainConfig {
        epochs: 64,
        batch_size: 4,
        learning_rate: 1e-2,
        eval_every: 16,
        seed: 1,
        ..Default::default()
    };
    let result = train(&setup, &config, &tc).unwrap();

    let mut cfg = config.clone();
    cfg.n_outcomes = 1;
    cfg.finalize().unwrap();
    let params = result.last.into_params().unwrap();
    let train_refs: Vec<&Sample> = split_spec
        .train
        .iter()
        .filter_map(|id| samples.iter().find(|s| &s.id == id))
        .collect();
    let report = evaluate(
        "train",
        &train_refs,
        &outcomes,
        &cfg,
        &params,
        &ForwardOptions::default(),
        Some(geo_outcome_index(&outcomes)),
    )
    .unwrap();
    assert!(report.mean > 0.95, "train R2 {} below 0.95", report.mean);
}

#[test]
fn loss_is_non_increasing_over_first_epochs() {
    let (samples, split_spec, outcomes, config) = sanity_setup(40, 0.0, 22);
    let setup = TrainSetup {
        samples: &samples,
        split: &split_spec,
        outcome_names: outcomes.clone(),
        outcome: Some(geo_outcome_index(&outcomes)),
        opts: ForwardOptions::default(),
    };
    let tc = TrainConfig {
        epochs: 5,
        batch_size: 8,
        learning_rate: 1e-2,
        eval_every: 1,
        seed: 2,
        ..Default::default()
    };
    let result = train(&setup, &config, &tc).unwrap();
    let losses: Vec<f64> = result.history.iter().map(|r| r.train_loss).collect();
    assert_eq!(losses.len(), 5);
    // Two-epoch moving average must not increase.
    for w in losses.windows(3) {
        let a = (w[0] + w[1]) / 2.0;
        let b = (w[1] + w[2]) / 2.0;
        assert!(b <= a * 1.001, "moving-average loss increased: {losses:?}");
    }
    assert!(losses.last().unwrap() < losses.first().unwrap());
}

#[test]
fn one_epoch_checkpoint_reloads_to_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (samples, split_spec, outcomes, config) = sanity_setup(24, 1.0, 23);
    let outcome = Some(geo_outcome_index(&outcomes));
    let setup = TrainSetup {
        samples: &samples,
        split: &split_spec,
        outcome_names: outcomes.clone(),
        outcome,
        opts: ForwardOptions::default(),
    };
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 8,
        learning_rate: 1e-3,
        eval_every: 1,
        seed: 3,
        ..Default::default()
    };
    let result = train(&setup, &config, &tc).unwrap();
    let recorded = result.history.last().unwrap().val.clone();

    let path = dir.path().join("ckpt.json");
    result.best.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let params = loaded.into_params().unwrap();

    let val_refs: Vec<&Sample> = split_spec
        .val
        .iter()
        .filter_map(|id| samples.iter().find(|s| &s.id == id))
        .collect();
    let again = evaluate(
        "val",
        &val_refs,
        &outcomes,
        &loaded.config,
        &params,
        &ForwardOptions::default(),
        outcome,
    )
    .unwrap();
    assert_eq!(recorded.per_outcome, again.per_outcome, "metrics must reproduce bit-exactly");
}

#[test]
fn training_trajectory_is_bit_deterministic() {
    let run = || {
        let (samples, split_spec, outcomes, config) = sanity_setup(20, 1.0, 24);
        let setup = TrainSetup {
            samples: &samples,
            split: &split_spec,
            outcome_names: outcomes.clone(),
            outcome: Some(geo_outcome_index(&outcomes)),
            opts: ForwardOptions::default(),
        };
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            eval_every: 1,
            seed: 4,
            ..Default::default()
        };
        let result = train(&setup, &config, &tc).unwrap();
        let losses: Vec<f64> = result.history.iter().map(|r| r.train_loss).collect();
        (losses, result.best.params)
    };
    let (l1, p1) = run();
    let (l2, p2) = run();
    assert_eq!(l1, l2, "loss trajectory must be bit-identical");
    for ((na, ta), (nb, tb)) in p1.iter().zip(p2.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.data, tb.data, "checkpoint {na} differs between runs");
    }
}

#[test]
fn variant_a_zero_geo_reduction_matches_gate_free_cross_attention() {
    // With both geo projections zeroed and gates pinned to 1, GCGVT-A is
    // a two-image cross-attention model; disabling gates outright is the
    // independent gate-free wiring and must agree bit-for-bit.
    let (samples, _, _, _) = sanity_setup(10, 1.0, 25);
    let mut config = ModelConfig::desk(Variant::A);
    config.seed = 9;
    config.finalize().unwrap();
    let mut params = gcgvt_core::model::init_params(&config);
    let zero = |a: &mut gcgvt_core::model::AffineG<gcgvt_core::Tensor>| {
        let (k, n) = a.w.dims2().unwrap();
        a.w = gcgvt_core::Tensor::matrix(k, n, vec![0.0; k * n]).unwrap();
        a.b = gcgvt_core::Tensor::vector(vec![0.0; n]);
    };
    for a in params.geo_in.as_mut().unwrap() {
        zero(a);
    }
    for a in params.geo_gd.as_mut().unwrap() {
        zero(a);
    }

    let sample = &samples[0];
    let forced = ForwardOptions {
        gates: Some(gcgvt_core::attention::GateMode::Forced(vec![1.0; config.n_heads()])),
        ..Default::default()
    };
    let disabled = ForwardOptions {
        gates: Some(gcgvt_core::attention::GateMode::Disabled),
        ..Default::default()
    };
    let (pred_forced, _) = forward(sample, &config, &params, &forced).unwrap();
    let (pred_free, _) = forward(sample, &config, &params, &disabled).unwrap();
    assert_eq!(pred_forced, pred_free);
}
