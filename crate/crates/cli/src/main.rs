//! `maae`: dataset generation, training, evaluation and diagnostics.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use maae_core::backbone::{save_feature_file, ToyBackbone};
use maae_core::config::RunConfig;
use maae_core::dataset::{load_dataset_manifest, record_features, DatasetIndex, Record};
use maae_core::gradsuite::run_suite;
use maae_core::synthetic::generate_synthetic_dataset;
use maae_core::trainer::{ablate, evaluate, fit, latest_checkpoints, load_system, PreparedData};
use maae_core::{MaaeError, Result};

#[derive(Debug, Parser)]
#[command(name = "maae", version, about = "Mixed-attention autoencoder for unified anomaly detection")]
struct Cli {
    /// Flat `key = value` configuration file; unset keys keep desk defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset under `data.path` (default `<run.dir>/data`).
    Synth,
    /// Extract backbone features of every record into MAAF files plus a manifest.
    Extract {
        /// Output directory [default: <run.dir>/features]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and write per-epoch checkpoints and the loss log.
    Train,
    /// Evaluate the final checkpoints and print the report.
    Eval,
    /// Write a PGM anomaly heatmap for every test image.
    Heatmap {
        /// Output directory [default: <run.dir>/heatmaps]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate all six module combinations.
    Ablate,
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Print the effective configuration.
    Config,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let config = match load_config(cli.config.as_deref(), &cli.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("maae: {e}");
            return ExitCode::from(1);
        }
    };
    match run(&cli.command, &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("maae: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut config = match file {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::desk(),
    };
    for o in overrides {
        config.apply_override(o)?;
    }
    Ok(config)
}

fn load_index(config: &RunConfig) -> Result<DatasetIndex> {
    load_dataset_manifest(&config.dataset_path(), false)
}

fn run(command: &Command, config: &RunConfig) -> Result<()> {
    match command {
        Command::Synth => {
            let root = config.dataset_path();
            let index = generate_synthetic_dataset(&config.data, &root)?;
            println!(
                "{} records in {} classes written to {}",
                index.records.len(),
                index.num_classes(),
                root.display()
            );
        }
        Command::Extract { out } => {
            let out = out.clone().unwrap_or_else(|| config.run_dir.join("features"));
            let index = load_index(config)?;
            let backbone = ToyBackbone::new(config.seed_backbone);
            let mut records = Vec::with_capacity(index.records.len());
            for r in &index.records {
                let stack = record_features(r, &backbone, config.image_size)?;
                let path = out.join(format!("{}.maaf", r.image_id()));
                save_feature_file(&stack, &path)?;
                records.push(Record { path, ..r.clone() });
            }
            let features = DatasetIndex {
                records,
                class_names: index.class_names,
            };
            let manifest = out.join("manifest.tsv");
            features.write_manifest(&manifest)?;
            println!("{} feature files; manifest {}", features.records.len(), manifest.display());
        }
        Command::Train => {
            let data = PreparedData::prepare(config, &load_index(config)?)?;
            let dir = config.checkpoint_dir();
            let models = fit(config, &data, Some(&dir))?;
            write_text(&config.run_dir.join("config.cfg"), &config.to_text())?;
            for m in &models {
                let (first, last) = (m.state.log.first(), m.state.log.last());
                match (first, last) {
                    (Some(f), Some(l)) => println!(
                        "{}: {} steps, L_e {:.6} -> {:.6}, norm_W {:.6}",
                        m.tag, l.step, f.l_e, l.l_e, l.norm_w
                    ),
                    _ => println!("{}: no training steps", m.tag),
                }
            }
            println!("checkpoints in {}", dir.display());
        }
        Command::Eval => {
            let report = evaluate(config, &load_index(config)?, &config.checkpoint_dir())?;
            print!("{report}");
        }
        Command::Heatmap { out } => {
            let out = out.clone().unwrap_or_else(|| config.run_dir.join("heatmaps"));
            let data = PreparedData::prepare(config, &load_index(config)?)?;
            let probe = data.stacks.first().ok_or(MaaeError::EmptyDataset)?;
            let (plan, grid) = (probe.channel_plan(), probe.final_grid());
            std::fs::create_dir_all(&out).map_err(|e| MaaeError::io(&out, e))?;
            let mut written = 0;
            for (_, classes, path) in latest_checkpoints(config, &data, &config.checkpoint_dir()) {
                let system = load_system(config, &path, &plan, grid)?;
                for (r, stack) in data.records.iter().zip(&data.stacks) {
                    if r.split == maae_core::dataset::Split::Test && classes.contains(&r.class_id) {
                        let map = system.anomaly_map(stack, data.image_size)?;
                        maae_core::scoring::emit_heatmap(&map, &out.join(format!("{}.pgm", r.image_id())))?;
                        written += 1;
                    }
                }
            }
            println!("{written} heatmaps written to {}", out.display());
        }
        Command::Ablate => {
            let data = PreparedData::prepare(config, &load_index(config)?)?;
            println!("use_ang\tuse_ffm\tuse_mixed_attention\timage_auroc\tpixel_auroc");
            for (a, report) in ablate(config, &data)? {
                let pixel = report.mean_pixel_auroc().map_or("nan".to_string(), |p| format!("{p:.4}"));
                println!(
                    "{}\t{}\t{}\t{:.4}\t{pixel}",
                    a.use_ang,
                    a.use_ffm,
                    a.use_mixed_attention,
                    report.mean_image_auroc()
                );
            }
        }
        Command::Gradcheck => {
            let entries = run_suite()?;
            println!("check\tinstances\tmax_rel_error\ttolerance\tresult");
            for e in &entries {
                let verdict = if e.passed() { "pass" } else { "FAIL" };
                println!("{}\t{}\t{:.3e}\t{:.0e}\t{verdict}", e.name, e.instances, e.max_rel_error, e.tol);
            }
            maae_core::gradsuite::check_suite(&entries)?;
        }
        Command::Config => print!("{}", config.to_text()),
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    maae_core::format::write_bytes(path, text.as_bytes())
}
