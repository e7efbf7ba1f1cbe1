//! Train a backbone on a generated separable thermal set and print the
//! per-epoch history.
//!
//! cargo run --release -p spillsense-train --example synthetic_run -- [backbone] [out_dir]

use std::path::PathBuf;
use std::time::Instant;

use spillsense_core::bench::evaluate_accuracy;
use spillsense_core::synth::{gen_split_dataset, Profile, SynthSpec};
use spillsense_train::model::SpillNet;
use spillsense_train::trainer::{EpochMetrics, Trainer};
use spillsense_train::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let backbone = args.next().unwrap_or_else(|| "VGG19".into());
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("spillsense-synthetic-run"));
    let data_dir = out.join("data");
    if data_dir.exists() {
        std::fs::remove_dir_all(&data_dir)?;
    }
    let spec = SynthSpec::profile(Profile::Separable, 7);
    let manifest = gen_split_dataset(&spec, [200, 60, 30], &data_dir)?;

    let start = Instant::now();
    let config = TrainConfig { backbone, ..TrainConfig::default() };
    let model_dir = out.join("model");
    let (model, history) = Trainer::new(config)
        .with_hook(|m: &mut EpochMetrics, _: &SpillNet| {
            println!(
                "epoch {:>3} train_loss {:.5} val_loss {:.5} train_acc {:.3} val_acc {:.3} t={:.0}s",
                m.epoch,
                m.train_loss,
                m.val_loss,
                m.train_acc,
                m.val_acc,
                start.elapsed().as_secs_f64()
            );
        })
        .run(&manifest, &model_dir)?;
    let report = evaluate_accuracy(&model, &manifest, 2)?;
    println!(
        "stopped_epoch={:?} restored_epoch={:?} test_accuracy={:.4} elapsed={:.1}s",
        history.stopped_epoch,
        history.restored_epoch,
        report.accuracy,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
