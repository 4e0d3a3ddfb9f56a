//! Training loop contracts on a small synthetic corpus.

use ncrf::crf::{is_crf_param, l1_prox};
use ncrf::dataset::{split_by_subject, synth_generate, Record, SleepStage, Split, SynthConfig, DEFAULT_FRACTIONS};
use ncrf::model::{encode, model_init, sequence_loss, ModelConfig, ModelKind, Profile};
use ncrf::numeric::{Params, SeedTree, Tape};
use ncrf::training::{evaluate_kappa, train, Adam, Checkpoint, TrainConfig};
use ncrf::Error;

fn small_split(seed: u64) -> Split {
    let config = SynthConfig {
        num_subjects: 6,
        epochs_per_subject: 20,
        seed,
        ..SynthConfig::desk()
    };
    split_by_subject(synth_generate(&config).unwrap(), DEFAULT_FRACTIONS, seed).unwrap()
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs: 3,
        seed,
        ..TrainConfig::default()
    }
}

fn crf_model() -> ModelConfig {
    ModelConfig::for_profile(Profile::Desk, ModelKind::Crf)
}

#[test]
fn same_seed_same_history_and_checkpoint() {
    let split = small_split(1);
    for kind in [ModelKind::Softmax, ModelKind::Crf, ModelKind::Crf2] {
        let model = ModelConfig::for_profile(Profile::Desk, kind);
        let a = train(&split.train, &split.validation, &model, &quick(4), |_| {}).unwrap();
        let b = train(&split.train, &split.validation, &model, &quick(4), |_| {}).unwrap();
        assert_eq!(a.history, b.history, "{kind}");
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap(), "{kind}");
    }
}

#[test]
fn different_seeds_differ() {
    let split = small_split(1);
    let a = train(&split.train, &split.validation, &crf_model(), &quick(1), |_| {}).unwrap();
    let b = train(&split.train, &split.validation, &crf_model(), &quick(2), |_| {}).unwrap();
    assert_ne!(a.checkpoint.params, b.checkpoint.params);
}

#[test]
fn huge_lambda_zeroes_the_transitions() {
    let split = small_split(2);
    let config = TrainConfig {
        l1_lambda: 10.0,
        ..quick(0)
    };
    let out = train(&split.train, &split.validation, &crf_model(), &config, |_| {}).unwrap();
    let trans = out.checkpoint.params.get("crf.trans").unwrap();
    assert!(trans.data().iter().all(|&v| v == 0.0), "{trans:?}");
    assert_eq!(out.checkpoint.params.get("crf.edge_bias").unwrap().item(), 0.0);
}

#[test]
fn prox_leaves_cnn_and_gru_untouched() {
    let params = model_init(&crf_model(), 3).unwrap();
    let mut after = params.clone();
    l1_prox(&mut after, 0.05).unwrap();
    let mut crf_changed = false;
    for (name, before) in params.iter() {
        let now = after.get(name).unwrap();
        if is_crf_param(name) {
            crf_changed |= now != before;
        } else {
            assert_eq!(now.sq_norm(), before.sq_norm(), "{name}");
            assert_eq!(now, before, "{name}");
        }
    }
    assert!(crf_changed);
}

fn deterministic_loss(params: &Params, model: &ModelConfig, record: &Record) -> (f64, Params) {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let (_, h) = encode(&mut tape, &bound, model, record.signal(), false, &mut SeedTree::new(0).rng()).unwrap();
    let loss = sequence_loss(&mut tape, &bound, model, h, &record.label_indices(), None).unwrap();
    let grads = bound.collect(&tape.backward(loss).unwrap());
    (tape.value(loss).item(), grads)
}

#[test]
fn one_small_step_decreases_the_loss() {
    let split = small_split(3);
    let record = &split.train[0];
    for kind in [ModelKind::Softmax, ModelKind::Crf, ModelKind::Crf2] {
        let model = ModelConfig::for_profile(Profile::Desk, kind);
        let mut params = model_init(&model, 9).unwrap();
        let (before, grads) = deterministic_loss(&params, &model, record);
        let mut adam = Adam::new(&params, 1e-4, (0.9, 0.999), 1e-8);
        adam.step(&mut params, &grads).unwrap();
        let (after, _) = deterministic_loss(&params, &model, record);
        assert!(after < before, "{kind}: {before} -> {after}");
    }
}

#[test]
fn stored_kappa_is_reproducible_from_the_checkpoint() {
    let split = small_split(4);
    let out = train(&split.train, &split.validation, &crf_model(), &quick(5), |_| {}).unwrap();
    let stored: f64 = out.checkpoint.info["train.val_kappa"].parse().unwrap();
    let recomputed = evaluate_kappa(&out.checkpoint.params, &out.checkpoint.config, &split.validation).unwrap();
    assert_eq!(stored, recomputed);
    let best = out.history.iter().map(|s| s.val_kappa).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(stored, best);
}

#[test]
fn early_stopping_respects_patience() {
    let split = small_split(5);
    let config = TrainConfig {
        max_epochs: 50,
        patience: 2,
        learning_rate: 1e-9,
        transition_lr_scale: 1.0,
        ..quick(0)
    };
    let out = train(&split.train, &split.validation, &crf_model(), &config, |_| {}).unwrap();
    let best: usize = out.checkpoint.info["train.epoch"].parse().unwrap();
    assert_eq!(out.history.len(), best + 2);
}

#[test]
fn trained_checkpoint_round_trips_through_disk() {
    let split = small_split(6);
    let out = train(&split.train, &split.validation, &crf_model(), &quick(6), |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ncrf");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, out.checkpoint);
    let again = dir.path().join("again.ncrf");
    loaded.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn cost_sensitive_needs_every_class() {
    let split = small_split(7);
    let awake: Vec<Record> = split
        .train
        .iter()
        .map(|r| Record::new(r.subject_id(), r.timing(), r.signal().to_vec(), vec![SleepStage::Wake; r.num_epochs()]).unwrap())
        .collect();
    let config = TrainConfig {
        cost_sensitive: true,
        ..quick(0)
    };
    let err = train(&awake, &split.validation, &crf_model(), &config, |_| {}).unwrap_err();
    assert!(matches!(err, Error::DegenerateDistribution { .. }), "{err}");
}

#[test]
fn invalid_configs_rejected() {
    let split = small_split(8);
    for bad in [
        TrainConfig { l1_lambda: -1.0, ..quick(0) },
        TrainConfig { patience: 0, ..quick(0) },
        TrainConfig { learning_rate: 0.0, ..quick(0) },
    ] {
        assert!(matches!(
            train(&split.train, &split.validation, &crf_model(), &bad, |_| {}),
            Err(Error::Parameter(_))
        ));
    }
    assert!(train(&[], &split.validation, &crf_model(), &quick(0), |_| {}).is_err());
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let split = small_split(9);
    let mut records = split.train.clone();
    let bad = &records[0];
    let huge: Vec<f64> = bad.signal().iter().map(|v| v.signum() * f64::MAX).collect();
    records[0] = bad.with_signal(huge).unwrap();
    let err = train(&records, &split.validation, &crf_model(), &quick(0), |_| {}).unwrap_err();
    match err {
        Error::TrainingAborted { epoch, record, .. } => {
            assert_eq!(epoch, 1);
            assert_eq!(record, records[0].subject_id());
        }
        other => panic!("unexpected error {other}"),
    }
}
