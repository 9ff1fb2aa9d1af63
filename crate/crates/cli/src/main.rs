use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use partreid::engine::{
    ablate, evaluate, format_table, visualize_attention, AblationSpec, Checkpoint, RunConfig, Trainer, CHECKPOINT_FILE,
    METRICS_FILE,
};
use partreid::synthetic_data::{export_splits, import_splits, make_splits};

#[derive(Parser)]
#[command(name = "partreid", version, about = "Part-attention person re-identification on synthetic occluded pedestrians")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset described by the `[data]` table.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes metrics.ndjson and checkpoint.safetensors.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the query/gallery splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Override the visibility threshold stored in the checkpoint config.
        #[arg(long)]
        mu: Option<f64>,
        /// Also write the query x gallery distance matrix (safetensors).
        #[arg(long)]
        distances: Option<PathBuf>,
    },
    /// Write per-channel attention images and an arg-max overlay for one sample.
    VisualizeAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index into the chosen split.
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
        /// Data directory; defaults to regenerating the data from the
        /// checkpoint's config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "query")]
        split: Split,
    },
    /// Train ablation variants and sweeps; writes ablation.json and ablation.md.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated: full, no_part_attention, no_focuser,
        /// no_pixel_predictor, plain_triplet, mu_sweep, gamma_sweep.
        #[arg(long)]
        variants: String,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated training seeds; defaults to the config's seed.
        #[arg(long)]
        seeds: Option<String>,
        /// Data directory; defaults to generating from the config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn load_or_generate(data: Option<&Path>, cfg: &RunConfig) -> Result<partreid::synthetic_data::DatasetSplits> {
    match data {
        Some(dir) => import_splits(dir).with_context(|| format!("reading dataset from {}", dir.display())),
        None => Ok(make_splits(&cfg.data)?),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let splits = make_splits(&cfg.data)?;
            let manifest = export_splits(&splits, &out)?;
            for s in &manifest.splits {
                info!("{}: {} samples, sha256 {}", s.name, s.samples, s.sha256);
            }
        }
        Command::Train { config, data, out, resume } => {
            let cfg = RunConfig::load(&config)?;
            let splits = import_splits(&data)?;
            if splits.config != cfg.data {
                bail!("dataset in {} was generated with a different [data] config", data.display());
            }
            let mut trainer = match resume {
                Some(path) => {
                    let ckpt = Checkpoint::load(&path)?;
                    if ckpt.config != cfg {
                        bail!("checkpoint config differs from {}", config.display());
                    }
                    Trainer::from_checkpoint(&ckpt)?
                }
                None => {
                    if out.join(METRICS_FILE).exists() {
                        bail!("{} already holds a metrics log; use --resume or a fresh directory", out.display());
                    }
                    Trainer::new(&cfg, &splits)?
                }
            };
            trainer.run(&splits, cfg.train.epochs, Some(&out))?;
            info!("checkpoint written to {}", out.join(CHECKPOINT_FILE).display());
        }
        Command::Eval { checkpoint, data, report, mu, distances } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let trainer = Trainer::from_checkpoint(&ckpt)?;
            let splits = import_splits(&data)?;
            let (rep, dm) = evaluate(trainer.net(), &splits, mu.unwrap_or(ckpt.config.train.mu))?;
            if let Some(dir) = report.parent() {
                fs::create_dir_all(dir)?;
            }
            let text = serde_json::to_string_pretty(&rep.to_flat_json())?;
            fs::write(&report, &text)?;
            println!("{text}");
            if let Some(path) = distances {
                dm.save(&path)?;
            }
        }
        Command::VisualizeAttention { checkpoint, sample, out, data, split } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let trainer = Trainer::from_checkpoint(&ckpt)?;
            let splits = load_or_generate(data.as_deref(), &ckpt.config)?;
            let pool = match split {
                Split::Train => &splits.train,
                Split::Query => &splits.query,
                Split::Gallery => &splits.gallery,
            };
            let Some(s) = pool.get(sample) else {
                bail!("sample {sample} out of range (split has {})", pool.len());
            };
            for path in visualize_attention(trainer.net(), s, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Ablate { config, variants, out, seeds, data } => {
            let cfg = RunConfig::load(&config)?;
            let specs = AblationSpec::parse_list(&variants)?;
            let seeds: Vec<u64> = match seeds {
                Some(s) => s
                    .split(',')
                    .map(|x| x.trim().parse::<u64>().with_context(|| format!("bad seed {x:?}")))
                    .collect::<Result<_>>()?,
                None => vec![cfg.train.global_seed],
            };
            let splits = load_or_generate(data.as_deref(), &cfg)?;
            let rows = ablate(&cfg, &splits, &specs, &seeds, Some(&out))?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
            let table = format_table(&rows);
            fs::write(out.join("ablation.md"), &table)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
