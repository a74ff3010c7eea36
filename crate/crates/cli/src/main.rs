//! Command-line front end: synthetic dataset generation, episodic training,
//! protocol evaluation and report summarization.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use protoseg3d::catalog::NiftiSource;
use protoseg3d::synthio;
use protoseg3d_core::config::RunConfig;
use protoseg3d_core::engine::{self, EvalReport, TrainState};
use protoseg3d_core::sampler::make_split;
use protoseg3d_core::synth::SynthSpec;

#[derive(Parser)]
#[command(name = "protoseg3d", version, about = "Few-shot 3D segmentation with local prototypes, support alignment and mask conditioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the default run config and synthetic dataset spec as TOML.
    InitConfig {
        /// Directory receiving run_config.toml and synth_spec.toml
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Emit the desk-scale synthetic benchmark profile instead of the
        /// full-scale defaults.
        #[arg(long)]
        benchmark: bool,
    },
    /// Generate a synthetic multi-institution dataset.
    Synth {
        /// Dataset spec (TOML); omit for the built-in benchmark spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory for volumes, labels and catalog.txt
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a catalog.
    Train {
        /// Run configuration (TOML); omit for defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory containing catalog.txt
        #[arg(long)]
        data_root: PathBuf,
        /// Novel-class fold (1..=4)
        #[arg(long)]
        fold: usize,
        /// Novel institution id
        #[arg(long)]
        novel_ins: String,
        /// Run seed (split + init + episode sampling)
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint output path
        #[arg(long)]
        out: PathBuf,
        /// Also write the split manifest here
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Evaluate a checkpoint with the full protocol.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_root: PathBuf,
        /// Supports per episode (K)
        #[arg(long, default_value_t = 1)]
        shots: usize,
        /// Seed for support sampling
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-episode rows (TSV)
        #[arg(long)]
        out: PathBuf,
        /// Evaluate the final weights instead of the best validation
        /// snapshot.
        #[arg(long)]
        final_weights: bool,
    },
    /// Summarize a rows TSV into aggregate metrics.
    Report {
        #[arg(long, value_name = "ROWS_TSV")]
        input: PathBuf,
        /// Summary output path (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    let config = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
    };
    config.validate()?;
    Ok(config)
}

fn open_source(data_root: &Path) -> Result<NiftiSource> {
    let catalog = data_root.join("catalog.txt");
    Ok(NiftiSource::open(&catalog)?)
}

fn write_report(report: &EvalReport, rows_path: &Path) -> Result<()> {
    std::fs::write(rows_path, report.rows_tsv())
        .with_context(|| format!("writing {}", rows_path.display()))?;
    println!("# distances in mm; both-empty Dice scored 1.0");
    print!("{}", report.summary());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::InitConfig { out, benchmark } => {
            std::fs::create_dir_all(&out)?;
            let config = if benchmark {
                RunConfig::synthetic_benchmark()
            } else {
                RunConfig::default()
            };
            let config_path = out.join("run_config.toml");
            std::fs::write(&config_path, toml::to_string_pretty(&config)?)?;
            let spec_path = out.join("synth_spec.toml");
            std::fs::write(&spec_path, toml::to_string_pretty(&SynthSpec::benchmark())?)?;
            println!("wrote {} and {}", config_path.display(), spec_path.display());
        }
        Command::Synth { spec, out } => {
            let spec = match spec {
                None => SynthSpec::benchmark(),
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .with_context(|| format!("reading spec {}", p.display()))?;
                    toml::from_str(&text)
                        .with_context(|| format!("parsing spec {}", p.display()))?
                }
            };
            let catalog = synthio::write_dataset(&spec, &out)?;
            println!("wrote {}", catalog.display());
        }
        Command::Train {
            config,
            data_root,
            fold,
            novel_ins,
            seed,
            out,
            manifest,
        } => {
            let config = load_config(&config)?;
            let data = open_source(&data_root)?;
            let split = make_split(
                &data,
                fold,
                &novel_ins,
                seed,
                config.split.val_per_institution,
            )?;
            if let Some(path) = &manifest {
                std::fs::write(path, split.to_manifest())?;
            }
            eprintln!(
                "training variant {} on {} base-institution images ({} iterations)",
                config.variant().name(),
                split.train_pool().len(),
                config.train.iterations
            );
            let state = engine::train(&config, split, &data, seed, |it, report| {
                if it % 50 == 0 {
                    eprintln!(
                        "iter {it}: fewshot {:.4} base_seg {:.4} align {:.4}",
                        report.fewshot, report.base_seg, report.align
                    );
                }
            })?;
            if let Some(best) = &state.best {
                eprintln!(
                    "best validation dice {:.4} at iteration {}",
                    best.score, best.iteration
                );
            }
            std::fs::write(&out, state.to_bytes()?)
                .with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {}", out.display());
        }
        Command::Eval {
            checkpoint,
            data_root,
            shots,
            seed,
            out,
            final_weights,
        } => {
            if shots == 0 {
                bail!("--shots must be at least 1");
            }
            let bytes = std::fs::read(&checkpoint)
                .with_context(|| format!("reading {}", checkpoint.display()))?;
            let mut state = TrainState::from_bytes(&bytes)?;
            if final_weights {
                state.best = None;
            }
            let data = open_source(&data_root)?;
            let report = engine::evaluate(&state, &data, shots, seed)?;
            write_report(&report, &out)?;
        }
        Command::Report { input, out } => {
            let text = std::fs::read_to_string(&input)
                .with_context(|| format!("reading {}", input.display()))?;
            let rows = EvalReport::rows_from_tsv(&text)?;
            let shots = rows.first().map_or(1, |r| r.support_ids.len());
            let report = EvalReport::from_rows(rows, shots);
            let summary = format!(
                "# distances in mm; both-empty Dice scored 1.0\n{}",
                report.summary()
            );
            match out {
                Some(p) => std::fs::write(&p, summary)?,
                None => print!("{summary}"),
            }
        }
    }
    Ok(())
}
