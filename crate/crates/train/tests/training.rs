use std::path::Path;

use spillsense_core::dataset::{DatasetManifest, Split};
use spillsense_core::frame::Frame;
use spillsense_core::synth::{gen_split_dataset, Profile, SynthSpec};
use spillsense_train::model::SpillNet;
use spillsense_train::trainer::{EpochMetrics, Trainer};
use spillsense_train::{find_backbone, AugmentConfig, TrainConfig, TrainError, TrainedModel, WeightsStore};

fn dataset(dir: &Path, counts: [usize; 3]) -> DatasetManifest {
    gen_split_dataset(&SynthSpec::profile(Profile::Separable, 11), counts, dir).unwrap()
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        ..TrainConfig::default()
    }
}

fn test_frames(m: &DatasetManifest) -> Vec<Frame> {
    m.split(Split::Test)
        .map(|e| Frame::load_png(&m.absolute_path(e), e.modality).unwrap())
        .collect()
}

#[test]
fn frozen_backbone_is_bit_identical_after_training() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(&dir.path().join("data"), [28, 8, 4]);
    let store = WeightsStore::new(dir.path().join("weights"), true);
    let spec = find_backbone("VGG19").unwrap();
    let before = SpillNet::build(&spec, &store, 0).unwrap();
    let frozen_before = before.frozen_values().unwrap();
    let tail_before = before.trainable_values().unwrap();

    let (model, history) = Trainer::new(quick_config(2))
        .with_store(store)
        .run(&m, &dir.path().join("model"))
        .unwrap();
    assert_eq!(history.epochs.len(), 2);
    let report = model.net().freeze_report();
    assert_eq!(report.unfrozen().len(), 5);
    assert_eq!(model.net().frozen_values().unwrap(), frozen_before);
    assert_ne!(model.net().trainable_values().unwrap(), tail_before);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(&dir.path().join("data"), [8, 4, 2]);
    let store = WeightsStore::new(dir.path().join("weights"), true);
    let spec = find_backbone("VGG19").unwrap();
    let before = SpillNet::build(&spec, &store, 0).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        aug: AugmentConfig::none(),
        ..quick_config(3)
    };
    let (model, history) = Trainer::new(cfg).with_store(store).run(&m, &dir.path().join("model")).unwrap();
    assert_eq!(model.net().trainable_values().unwrap(), before.trainable_values().unwrap());
    let v: Vec<f64> = history.epochs.iter().map(|e| e.val_loss).collect();
    assert!(v.windows(2).all(|w| w[0] == w[1]), "{v:?}");
    // batch order changes per epoch, so only accumulation noise is allowed
    let t: Vec<f64> = history.epochs.iter().map(|e| e.train_loss).collect();
    assert!(t.windows(2).all(|w| ((w[0] - w[1]) / w[0]).abs() <= 1e-6), "{t:?}");
}

#[test]
fn injected_val_losses_drive_early_stop_and_restore() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(&dir.path().join("data"), [8, 4, 2]);
    let cfg = TrainConfig {
        patience: 1,
        ..quick_config(10)
    };
    let mut snapshots = Vec::new();
    let hook = |metrics: &mut EpochMetrics, net: &SpillNet| {
        metrics.val_loss = [0.5, 0.4, 0.45, 0.3][metrics.epoch - 1];
        snapshots.push(net.trainable_values().unwrap());
    };
    let (model, history) = Trainer::new(cfg)
        .with_store(WeightsStore::new(dir.path().join("weights"), true))
        .with_hook(hook)
        .run(&m, &dir.path().join("model"))
        .unwrap();
    assert_eq!(history.stopped_epoch, 3);
    assert_eq!(history.restored_epoch, 2);
    assert_eq!(history.epochs.len(), 3);
    assert_eq!(model.net().trainable_values().unwrap(), snapshots[1]);
    assert_eq!(model.provenance().restored_epoch, 2);
}

#[test]
fn saved_model_reloads_with_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(&dir.path().join("data"), [8, 4, 4]);
    let out = dir.path().join("model");
    let (model, _) = Trainer::new(quick_config(1))
        .with_store(WeightsStore::new(dir.path().join("weights"), true))
        .run(&m, &out)
        .unwrap();
    for file in ["model.weights", "history.csv", "provenance.json"] {
        assert!(out.join(file).is_file(), "{file}");
    }
    let reloaded = TrainedModel::load(&out).unwrap();
    let frames = test_frames(&m);
    assert_eq!(model.probabilities(&frames).unwrap(), reloaded.probabilities(&frames).unwrap());
    assert_eq!(reloaded.backbone_name(), "VGG19");
    assert_eq!(reloaded.input_shape(), [3, 224, 224]);
    assert_eq!(reloaded.trained_on().manifest_hash, m.content_hash());
}

#[test]
fn bad_datasets_are_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(&dir.path().join("data"), [8, 4, 2]);
    let store = || WeightsStore::new(dir.path().join("weights"), true);
    let out = dir.path().join("model");

    let mut unsplit = m.clone();
    unsplit.entries.iter_mut().for_each(|e| e.split = Split::Unassigned);
    let err = Trainer::new(quick_config(1)).with_store(store()).run(&unsplit, &out).unwrap_err();
    assert!(matches!(err, TrainError::Unsplit), "{err}");

    let mut no_val = m.clone();
    no_val.entries.iter_mut().filter(|e| e.split == Split::Val).for_each(|e| e.split = Split::Train);
    let err = Trainer::new(quick_config(1)).with_store(store()).run(&no_val, &out).unwrap_err();
    assert!(matches!(err, TrainError::EmptySplit("val")), "{err}");

    let err = Trainer::new(quick_config(1))
        .with_store(store())
        .with_memory_limit(1_000_000)
        .run(&m, &out)
        .unwrap_err();
    match err {
        TrainError::OutOfMemory { suggested_batch, .. } => assert!(suggested_batch >= 1),
        other => panic!("{other}"),
    }

    let offline = WeightsStore::new(dir.path().join("empty-weights"), false);
    let err = Trainer::new(quick_config(1)).with_store(offline).run(&m, &out).unwrap_err();
    assert!(matches!(err, TrainError::WeightsUnavailable { .. }), "{err}");

    let err = Trainer::new(TrainConfig {
        backbone: "LeNet".into(),
        ..quick_config(1)
    })
    .run(&m, &out)
    .unwrap_err();
    assert!(matches!(err, TrainError::UnknownBackbone(_)), "{err}");
    assert!(!out.join("model.weights").exists());
}
