//! Command-line interface: `generate`, `train`, `eval` and `explain`.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;

use crate::config::RunConfig;
use crate::datapipe::{synth_generate, Dataset, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::explain::{explain, to_dot};
use crate::train::{evaluate_incidents, load_checkpoint, train};

#[derive(Debug, Parser)]
#[command(name = "hyperode-rca", version, about = "Root-cause localization for microservice incidents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic incident dataset (NDJSON, manifest first).
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        services: usize,
        #[arg(long, default_value_t = 200)]
        incidents: usize,
        #[arg(long, default_value_t = 600.0)]
        window_seconds: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the dataset path of the config.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out_checkpoint: Option<PathBuf>,
        /// Per-epoch loss history (JSON); overrides the config.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Score incidents with a checkpoint and write the metrics report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Model dimensions used at training time (defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Restrict to these splits; every incident when omitted.
        #[arg(long, value_parser = parse_split)]
        split: Vec<Split>,
    },
    /// Explain one incident: hyperedges, attention, routing, ranking.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        incident_id: usize,
        /// JSON output; the DOT graph goes next to it with a `.dot` extension.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?} (expected train, val or test)")),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.with_env()
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::Config(format!("dataset {} does not exist", path.display())));
    }
    Dataset::load(path)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            seed,
            services,
            incidents,
            window_seconds,
            out,
        } => {
            let ds = synth_generate(&SynthConfig {
                window_seconds,
                ..SynthConfig::new(seed, services, incidents)
            })?;
            ds.save(&out)?;
            let m = &ds.manifest;
            println!(
                "wrote {} incidents over {} services ({} call edges, {} fault types) to {}",
                ds.incidents.len(),
                m.services.len(),
                m.call_edges.len(),
                m.fault_types.len(),
                out.display()
            );
            println!(
                "splits: train {} / val {} / test {}",
                m.splits.train.len(),
                m.splits.val.len(),
                m.splits.test.len()
            );
        }
        Command::Train {
            config,
            dataset,
            out_checkpoint,
            history,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if dataset.is_some() {
                cfg.dataset = dataset;
            }
            if history.is_some() {
                cfg.history = history;
            }
            let data_path = cfg
                .dataset
                .clone()
                .ok_or_else(|| Error::Config("no dataset path (set `dataset` in the config or pass --dataset)".into()))?;
            let out = out_checkpoint
                .or_else(|| cfg.checkpoint.clone())
                .ok_or_else(|| Error::Config("no checkpoint path (pass --out-checkpoint)".into()))?;
            let ds = load_dataset(&data_path)?;
            info!("training on {} with seed {}", data_path.display(), cfg.seed);
            let trained = train(&cfg, &ds)?;
            trained.store.save(&out)?;
            if let Some(h) = &cfg.history {
                write_json(h, &trained.history)?;
            }
            if let Some(last) = trained.history.last() {
                println!(
                    "trained {} epochs: total {:.6}, cls {:.6}; checkpoint {}",
                    last.epoch,
                    last.total,
                    last.components.cls,
                    out.display()
                );
            }
        }
        Command::Eval {
            checkpoint,
            dataset,
            report,
            config,
            split,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ds = load_dataset(&dataset)?;
            let (model, store) = load_checkpoint(&checkpoint, &cfg, &ds)?;
            let incidents = if split.is_empty() {
                ds.incidents.iter().collect()
            } else {
                ds.select(&split)
            };
            let rep = evaluate_incidents(&model, &store, &incidents)?;
            write_json(&report, &rep)?;
            println!(
                "{} incidents: f1 {:.4} precision {:.4} recall {:.4} mcc {:.4} auc {} mrr {:.4}",
                rep.n_incidents,
                rep.f1,
                rep.precision,
                rep.recall,
                rep.mcc,
                rep.auc.map_or("n/a".to_string(), |a| format!("{a:.4}")),
                rep.mrr
            );
        }
        Command::Explain {
            checkpoint,
            dataset,
            incident_id,
            out,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ds = load_dataset(&dataset)?;
            let inc = ds
                .find(incident_id)
                .ok_or_else(|| Error::Config(format!("incident {incident_id} is not in {}", dataset.display())))?;
            let (model, store) = load_checkpoint(&checkpoint, &cfg, &ds)?;
            let f = model.featurize(inc)?;
            let ex = explain(&model, &store, &ds.manifest, &f)?;
            write_json(&out, &ex)?;
            let dot_path = out.with_extension("dot");
            std::fs::write(&dot_path, to_dot(&ex, &ds.manifest.services))?;
            println!("explanation written to {} and {}", out.display(), dot_path.display());
        }
    }
    Ok(())
}

/// Process exit code for a command outcome.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_usage() => 2,
        Err(_) => 1,
    }
}
