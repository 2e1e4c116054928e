use std::path::Path;

use maae_core::config::{Paradigm, RunConfig, SyntheticSpec};
use maae_core::format::load_checkpoint;
use maae_core::scoring::{ClassResult, EvalReport};
use maae_core::synthetic::generate_synthetic_dataset;
use maae_core::trainer::{fit, PreparedData, TrainState};
use maae_core::MaaeError;
use maae_tensor::{Tape, Tensor};

fn small_config() -> RunConfig {
    let mut c = RunConfig::desk();
    c.data = SyntheticSpec {
        num_classes: 2,
        image_size: 64,
        train_per_class: 4,
        test_normal_per_class: 2,
        test_anomalous_per_class: 2,
        seed: 1,
    };
    c.epochs = 1;
    c.batch_size = 4;
    c
}

fn prepare(config: &RunConfig, root: &Path) -> PreparedData {
    let index = generate_synthetic_dataset(&config.data, root).unwrap();
    PreparedData::prepare(config, &index).unwrap()
}

fn fresh_state(config: &RunConfig, data: &PreparedData) -> TrainState {
    let probe = &data.stacks[0];
    TrainState::new(config, &probe.channel_plan(), probe.final_grid())
}

fn snapshot(state: &TrainState) -> Vec<Vec<f32>> {
    state.system.params.iter().map(|(_, t)| t.data().to_vec()).collect()
}

#[test]
fn each_update_leaves_the_other_group_bit_unchanged() {
    let config = small_config();
    let dir = tempfile::tempdir().unwrap();
    let data = prepare(&config, dir.path());
    let mut state = fresh_state(&config, &data);
    let batch: Vec<_> = (0..4).map(|i| (i, &data.stacks[i])).collect();
    state.step = 1;

    let w = state.noise.w.clone();
    let before = snapshot(&state);
    state.model_step(&config, &batch).unwrap();
    assert_eq!(state.noise.w.data(), w.data());
    let after_model = snapshot(&state);
    assert_ne!(before, after_model);

    state.noise_step(&config, &batch).unwrap();
    assert_eq!(snapshot(&state), after_model);
    assert_ne!(state.noise.w.data(), w.data());
}

#[test]
fn every_parameter_receives_gradient() {
    let config = small_config();
    let dir = tempfile::tempdir().unwrap();
    let data = prepare(&config, dir.path());
    let mut state = fresh_state(&config, &data);
    let batch: Vec<_> = (0..4).map(|i| (i, &data.stacks[i])).collect();
    let before = snapshot(&state);
    state.train_step(&config, &batch).unwrap();
    let names: Vec<String> = state.system.params.iter().map(|(n, _)| n.to_string()).collect();
    for ((name, old), new) in names.iter().zip(&before).zip(snapshot(&state)) {
        assert_ne!(old, &new, "{name} did not move");
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::from_fn(&[7, 5], |i| (i as f64 * 1.37).sin() * 30.0));
    let p = tape.softmax_rows(logits).unwrap();
    for row in tape.value(p).data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn zero_epochs_checkpoint_equals_initialization() {
    let mut config = small_config();
    config.epochs = 0;
    let dir = tempfile::tempdir().unwrap();
    let data = prepare(&config, &dir.path().join("data"));
    let ckpt = dir.path().join("ckpt");
    let models = fit(&config, &data, Some(&ckpt)).unwrap();
    let stored = load_checkpoint(&ckpt.join("unified/epoch_000.maac")).unwrap();
    let init = fresh_state(&config, &data).checkpoint_params();
    assert_eq!(stored, init);
    assert_eq!(models[0].state.checkpoint_params(), init);
    assert!(!ckpt.join("unified/epoch_001.maac").exists());
}

#[test]
fn separate_models_never_read_other_classes() {
    let mut config = small_config();
    config.paradigm = Paradigm::Separate;
    let dir = tempfile::tempdir().unwrap();
    let data = prepare(&config, dir.path());
    let baseline = fit(&config, &data, None).unwrap();
    assert_eq!(baseline.len(), 2);

    let mut poisoned = data.clone();
    for (record, stack) in poisoned.records.iter().zip(poisoned.stacks.iter_mut()) {
        if record.class_id == 1 {
            for s in &mut stack.stages {
                s.data_mut().iter_mut().for_each(|v| *v *= 3.0);
            }
        }
    }
    let other = fit(&config, &poisoned, None).unwrap();
    assert_eq!(baseline[0].tag, "class_0");
    assert_eq!(baseline[0].classes, vec![0]);
    assert_eq!(baseline[0].state.checkpoint_params(), other[0].state.checkpoint_params());
    assert_ne!(baseline[1].state.checkpoint_params(), other[1].state.checkpoint_params());
}

#[test]
fn non_finite_loss_aborts_before_checkpointing() {
    let config = small_config();
    let dir = tempfile::tempdir().unwrap();
    let mut data = prepare(&config, &dir.path().join("data"));
    data.stacks[0].stages[0].data_mut()[0] = f32::NAN;
    let ckpt = dir.path().join("ckpt");
    match fit(&config, &data, Some(&ckpt)) {
        Err(MaaeError::NonFiniteLoss { step }) => assert_eq!(step, 1),
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
    assert!(ckpt.join("unified/epoch_000.maac").exists());
    assert!(!ckpt.join("unified/epoch_001.maac").exists());
}

#[test]
fn report_averages_are_arithmetic_means() {
    let row = |name: &str, image, pixel| ClassResult {
        class_name: name.into(),
        image_auroc: image,
        pixel_auroc: pixel,
        num_normal: 1,
        num_anomalous: 1,
    };
    let report = EvalReport {
        classes: vec![row("a", 0.91, Some(0.8)), row("b", 0.73, Some(0.95)), row("c", 0.5, Some(0.61))],
        config_digest: String::new(),
    };
    assert!((report.mean_image_auroc() - (0.91 + 0.73 + 0.5) / 3.0).abs() <= 1e-12);
    assert!((report.mean_pixel_auroc().unwrap() - (0.8 + 0.95 + 0.61) / 3.0).abs() <= 1e-12);
    assert!(report.to_string().lines().last().unwrap().starts_with("average\t"));
}

#[test]
fn desk_training_halves_reconstruction_loss() {
    let config = RunConfig::desk();
    let dir = tempfile::tempdir().unwrap();
    let data = prepare(&config, dir.path());
    let models = fit(&config, &data, None).unwrap();
    let log = &models[0].state.log;
    let (first, last) = (log.first().unwrap().l_e, log.last().unwrap().l_e);
    assert!(last <= 0.5 * first, "L_e {first} -> {last}");
}
