use std::fs;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use heae_core::train::{self, ablation, EpochRecord, PreparedSet, SyntheticDatasetSpec, TrainConfig};
use heae_core::ModelConfig;
use serde::Deserialize;

use crate::assess::{parse_assess_request, AssessError, Assessor};
use crate::http;

#[derive(Debug, Parser)]
#[command(name = "heae", version, about = "Narrative + empathy-vector severity assessment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic JSON-lines corpus.
    Synth {
        /// Dataset spec (JSON). Defaults to 2000 uniform samples, seed 42.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// `{"model": …, "train": …, "split_seed": …}`; every key optional.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Run one ablation family and write a CSV report.
    Ablate {
        #[arg(long)]
        family: ablation::Family,
        #[arg(long)]
        out: PathBuf,
        /// Corpus; synthesized with the default spec when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "42,43,44")]
        seeds: Vec<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = http::DEFAULT_HOST)]
        host: String,
        #[arg(long, default_value_t = http::DEFAULT_PORT)]
        port: u16,
    },
    /// Assess one narrative.
    Assess {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        narrative_file: PathBuf,
        /// Nine comma-separated scores 0-5.
        #[arg(long, value_delimiter = ',', num_args = 1.., allow_negative_numbers = true)]
        ev: Vec<f64>,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_split_seed")]
    pub split_seed: u64,
}

fn default_split_seed() -> u64 {
    42
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &PathBuf) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).with_context(|| format!("parsing {}", path.display()))
}

fn train_file(path: Option<&PathBuf>) -> Result<TrainFile> {
    match path {
        Some(p) => read_json(p),
        None => Ok(TrainFile {
            split_seed: default_split_seed(),
            ..Default::default()
        }),
    }
}

fn log_epoch(r: &EpochRecord) {
    match &r.val {
        Some(m) => eprintln!(
            "epoch {:>3}  loss {:.4}  val acc {:.4}  macro-F1 {:.4}",
            r.epoch, r.loss, m.accuracy, m.macro_f1
        ),
        None => eprintln!("epoch {:>3}  loss {:.4}", r.epoch, r.loss),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out } => {
            let spec = match spec {
                Some(p) => read_json(&p)?,
                None => SyntheticDatasetSpec::new(2000, 42),
            };
            let data = train::synthesize(&spec)?;
            train::write_jsonl(&out, &data)?;
            eprintln!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::Train { data, config, out } => {
            let cfg = train_file(config.as_ref())?;
            let samples = train::read_jsonl(&data)?;
            let outcome = train::run(&samples, &cfg.model, &cfg.train, cfg.split_seed, log_epoch)?;
            train::save(&outcome.model, &out)?;
            println!("{}", serde_json::to_string_pretty(&outcome.metrics)?);
        }
        Command::Eval { data, model } => {
            let assessor = Assessor::load(&model)?;
            let samples = train::read_jsonl(&data)?;
            let set = PreparedSet::new(assessor.model(), &samples)?;
            let metrics = train::evaluate(assessor.model(), &set)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Ablate {
            family,
            out,
            data,
            config,
            seeds,
            epochs,
        } => {
            let mut cfg = train_file(config.as_ref())?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let samples = match data {
                Some(p) => train::read_jsonl(&p)?,
                None => train::synthesize(&SyntheticDatasetSpec::new(2000, 42))?,
            };
            let report = train::ablate(family, &samples, &cfg.model, &cfg.train, &seeds, cfg.split_seed, |v, s, r| {
                eprint!("{v} seed {s}: ");
                log_epoch(r);
            });
            report.write_csv(fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?)?;
            for s in report.summary() {
                eprintln!(
                    "{:<18} acc {:.4} ± {:.4}  macro-F1 {:.4} ± {:.4}  ({} failed)",
                    s.variant, s.accuracy_mean, s.accuracy_sd, s.macro_f1_mean, s.macro_f1_sd, s.failures
                );
            }
        }
        Command::Serve { model, host, port } => {
            let assessor = Arc::new(Assessor::load(&model).with_context(|| format!("loading {}", model.display()))?);
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .with_context(|| format!("invalid address {host}:{port}"))?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let (listener, local) = http::bind(addr).await.with_context(|| format!("binding {addr}"))?;
                tracing::info!(%local, model_id = assessor.model_id(), "serving");
                http::serve(listener, assessor, async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await?;
                anyhow::Ok(())
            })?;
        }
        Command::Assess { model, narrative_file, ev } => {
            let assessor = Assessor::load(&model)?;
            let narrative = fs::read_to_string(&narrative_file)?;
            let body = serde_json::to_vec(&serde_json::json!({ "narrative": narrative, "empathy_vector": ev }))?;
            let result = parse_assess_request(&body).and_then(|req| assessor.assess(&req));
            match result {
                Ok(r) => println!("{}", serde_json::to_string_pretty(&r)?),
                Err(AssessError::Validation(details)) => {
                    for d in &details {
                        eprintln!("{}: {}", d.field, d.message);
                    }
                    bail!("invalid input");
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(())
}
