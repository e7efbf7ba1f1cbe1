//! `spillsense`: capture, align, index, train, evaluate and serve spill
//! classifiers from the command line.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use spillsense_core::bench::{
    evaluate_accuracy, measure_latency, model_size, parse_rows_csv, render_report, ReportFormat, DEFAULT_ITERATIONS,
    DEFAULT_WARMUP, TEST_BATCH,
};
use spillsense_core::dataset::{
    build_manifest, select_subset, split_manifest, validate_dataset, DatasetManifest, SplitOptions, SplitRatios,
    SubsetFilter, MANIFEST_FILE,
};
use spillsense_core::frame::{ClassLabel, Frame, Liquid, Modality, Room, SessionMeta};
use spillsense_core::geometry::{
    align_rgb, fuse_side_by_side, mean_reprojection_error, parse_point_pairs_csv, Calibration,
};
use spillsense_core::source::{capture_pair, open_source, SourceDescriptor, DEFAULT_MAX_SKEW_MS};
use spillsense_core::store::PairStore;
use spillsense_core::synth::{gen_dataset, Profile, SynthSpec};
use spillsense_serve::ServiceConfig;
use spillsense_train::{AugmentConfig, TrainConfig, TrainedModel};

#[derive(Debug, Parser)]
#[command(name = "spillsense", version, about = "RGB and thermal spill detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Capture labelled thermal/RGB pairs into the dataset layout.
    Capture {
        #[arg(long)]
        thermal: SourceDescriptor,
        #[arg(long)]
        rgb: SourceDescriptor,
        #[arg(long)]
        room: Room,
        #[arg(long)]
        liquid: Liquid,
        #[arg(long)]
        label: ClassLabel,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_SKEW_MS)]
        max_skew_ms: u64,
        /// Pairs to capture in this invocation.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value = "cli")]
        session: String,
    },
    /// Fit a calibration from a point-pair CSV (src_x,src_y,dst_x,dst_y).
    Calibrate {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value = "calibration.json")]
        out: PathBuf,
    },
    /// Align an RGB image to its thermal partner and write the side-by-side image.
    Fuse {
        #[arg(long)]
        thermal: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Index a capture root and assign train/val/test splits.
    Split {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "0.7,0.2,0.1")]
        ratios: SplitRatios,
        #[arg(long)]
        paired_split: bool,
        /// Defaults to `<root>/manifest.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print class balance and pairing problems for a manifest.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Filter a manifest by room, liquid and modality, keeping splits.
    Subset {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        room: Option<Room>,
        #[arg(long)]
        liquid: Option<Liquid>,
        #[arg(long)]
        modality: Modality,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a pretrained backbone on one modality.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        modality: Modality,
        #[arg(long)]
        room: Option<Room>,
        #[arg(long)]
        liquid: Option<Liquid>,
        #[arg(long, default_value = "VGG19")]
        backbone: String,
        #[arg(long, default_value_t = 1e-5)]
        lr: f64,
        #[arg(long, default_value_t = 5)]
        patience: usize,
        #[arg(long, default_value_t = 50)]
        max_epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_augment: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Test-split accuracy; writes eval.json into the model directory.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Single-image latency; writes latency.csv and latency.json.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long, default_value_t = DEFAULT_WARMUP)]
        warmup: usize,
        #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
        iters: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render benchmark rows as a table.
    Report {
        #[arg(long)]
        rows: PathBuf,
        #[arg(long, default_value = "markdown")]
        format: ReportFormat,
        #[arg(long, default_value = "Model")]
        label_header: String,
        /// Also write the table here (e.g. report.md).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the HTTP inference service.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "thermal")]
        modality: Modality,
        #[arg(long, default_value = "127.0.0.1:8750")]
        listen: SocketAddr,
        #[arg(long)]
        session_root: PathBuf,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long, default_value = "sim:0")]
        thermal_source: SourceDescriptor,
        #[arg(long, default_value = "sim:1")]
        rgb_source: SourceDescriptor,
    },
    /// Generate a labelled synthetic dataset.
    Synth {
        #[arg(long, default_value = "separable")]
        profile: Profile,
        /// Pairs per class.
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn load_frames(dir: &Path, modality: Modality) -> Result<Vec<Frame>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no PNG frames in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| Frame::load_png(p, modality).with_context(|| format!("loading {}", p.display())))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Capture {
            thermal,
            rgb,
            room,
            liquid,
            label,
            out,
            max_skew_ms,
            count,
            session,
        } => {
            let meta = SessionMeta::new(session, room, liquid, label)?;
            let mut t = open_source(&thermal, Modality::Thermal)?;
            let mut r = open_source(&rgb, Modality::Rgb)?;
            let mut store = PairStore::open(&out)?;
            for _ in 0..count {
                let pair = capture_pair(t.as_mut(), r.as_mut(), max_skew_ms, &meta.session_id)?;
                let (index, tp, rp) = store.save_pair(&pair, &meta)?;
                println!("{index}\t{}\t{}", tp.display(), rp.display());
            }
        }
        Command::Calibrate { pairs, out } => {
            let text = std::fs::read_to_string(&pairs).with_context(|| format!("reading {}", pairs.display()))?;
            let points = parse_point_pairs_csv(&text).map_err(anyhow::Error::msg)?;
            let calib = Calibration::from_point_pairs(&points)?;
            calib.save(&out)?;
            println!(
                "wrote {} (mean reprojection error {:.4} px over {} points)",
                out.display(),
                mean_reprojection_error(&calib.h, &points),
                points.len()
            );
        }
        Command::Fuse {
            thermal,
            rgb,
            calib,
            out,
        } => {
            let calib = Calibration::load(&calib)?;
            let t = Frame::load_png(&thermal, Modality::Thermal)?;
            let r = Frame::load_png(&rgb, Modality::Rgb)?;
            fuse_side_by_side(&t, &align_rgb(&r, &calib)?)?.save_png(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Split {
            root,
            seed,
            ratios,
            paired_split,
            out,
        } => {
            let built = build_manifest(&root)?;
            for w in &built.warnings {
                log::warn!("{w}");
            }
            for ignored in &built.ignored {
                log::warn!("ignored {}: {}", ignored.path, ignored.reason);
            }
            let report = split_manifest(&built.manifest, &ratios, seed, SplitOptions { paired: paired_split })?;
            for w in &report.warnings {
                log::warn!("{w}");
            }
            let out = out.unwrap_or_else(|| root.join(MANIFEST_FILE));
            report.manifest.save(&out)?;
            for (split, n) in report.manifest.split_counts() {
                println!("{}\t{n}", split.as_str());
            }
            println!("wrote {}", out.display());
        }
        Command::Validate { manifest } => {
            let report = validate_dataset(&load_manifest(&manifest)?);
            print_json(&report)?;
            if !report.balanced || !report.orphans.is_empty() {
                bail!("dataset is unbalanced or has orphan RGB images");
            }
        }
        Command::Subset {
            manifest,
            room,
            liquid,
            modality,
            out,
        } => {
            let filter = SubsetFilter { room, liquid, modality };
            let subset = select_subset(&load_manifest(&manifest)?, &filter)?;
            subset.save(&out)?;
            println!("{} entries {filter} -> {}", subset.len(), out.display());
        }
        Command::Train {
            manifest,
            modality,
            room,
            liquid,
            backbone,
            lr,
            patience,
            max_epochs,
            seed,
            no_augment,
            out,
        } => {
            let full = load_manifest(&manifest)?;
            let filter = SubsetFilter {
                room: room.clone(),
                liquid: liquid.clone(),
                modality,
            };
            let subset = select_subset(&full, &filter)?;
            let config = TrainConfig {
                backbone,
                learning_rate: lr,
                patience,
                max_epochs,
                seed,
                room,
                liquid,
                aug: if no_augment { AugmentConfig::none() } else { AugmentConfig::default() },
                ..TrainConfig::default()
            };
            let (model, history) = spillsense_train::train(config, &subset, &out)?;
            println!(
                "stopped after epoch {}, restored epoch {}, {} trainable of {} parameters",
                history.stopped_epoch,
                history.restored_epoch,
                model.net().freeze_report().trainable_params(),
                model.net().freeze_report().total_params()
            );
            println!("wrote {}", out.display());
        }
        Command::Eval { model, manifest, out } => {
            let trained = TrainedModel::load(&model)?;
            let m = load_manifest(&manifest)?;
            let filter = SubsetFilter {
                room: trained.trained_on().room.clone(),
                liquid: trained.trained_on().liquid.clone(),
                modality: trained.trained_on().modality,
            };
            let report = evaluate_accuracy(&trained, &select_subset(&m, &filter)?, TEST_BATCH)?;
            let path = out.unwrap_or(model).join("eval.json");
            std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
            print_json(&report)?;
        }
        Command::Bench {
            model,
            frames,
            warmup,
            iters,
            out,
        } => {
            let trained = TrainedModel::load(&model)?;
            let frames = load_frames(&frames, trained.trained_on().modality)?;
            let run = measure_latency(&trained, &frames, warmup, iters)?;
            let (size_mb, warning) = model_size(trained.weights_path())?;
            if let Some(w) = warning {
                log::warn!("{w}");
            }
            let dir = out.unwrap_or(model);
            run.write_csv(&dir.join("latency.csv"))?;
            let summary = serde_json::json!({ "latency": run.stats, "model_size_mb": size_mb });
            std::fs::write(dir.join("latency.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
            print_json(&summary)?;
        }
        Command::Report {
            rows,
            format,
            label_header,
            out,
        } => {
            let text = std::fs::read_to_string(&rows).with_context(|| format!("reading {}", rows.display()))?;
            let table = render_report(&parse_rows_csv(&text)?, format, &label_header)?;
            print!("{table}");
            if let Some(out) = out {
                std::fs::write(&out, &table)?;
            }
        }
        Command::Serve {
            model,
            modality,
            listen,
            session_root,
            calib,
            thermal_source,
            rgb_source,
        } => {
            let mut config = ServiceConfig::new(model, modality, session_root);
            config.listen = listen;
            config.calib_path = calib;
            config.thermal_source = thermal_source;
            config.rgb_source = rgb_source;
            tokio::runtime::Runtime::new()?.block_on(spillsense_serve::run(config))?;
        }
        Command::Synth { profile, n, out, seed } => {
            let manifest = gen_dataset(&SynthSpec::profile(profile, seed), n, &out)?;
            let path = out.join(MANIFEST_FILE);
            manifest.save(&path)?;
            println!("{} images, wrote {}", manifest.len(), path.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
