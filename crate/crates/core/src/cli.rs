//! Command-line entry points. `run` returns the process exit code:
//! 0 on success, 1 on usage errors, 2 on runtime errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use crate::backend::Backends;
use crate::data_builder::{build_dataset, read_jsonl, write_jsonl, QaRecord, TrainingTuple};
use crate::datastore::{PolicyDatastore, Rollout};
use crate::eval::{curve_csv, evaluate_run, latency_curve, EvalRecord, MatchMode};
use crate::orchestrator::{AnswerOptions, Gateway};
use crate::registry::{load_config, GatewayConfig, LabelingHeuristic, SourceRegistry, CONFIG_ENV};
use crate::service::{self, RouteResponse};
use crate::training::write_training_files;

#[derive(Debug, Parser)]
#[command(
    name = "srrag",
    version,
    about = "Self-routing retrieval-augmented generation gateway"
)]
struct Cli {
    /// Gateway config file (JSON).
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Label QA pairs with their preferred knowledge source.
    BuildData {
        /// JSONL of {id, question, answer, dataset_tag}.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        heuristic: Option<LabelingHeuristic>,
    },
    /// Write SFT and DPO files from labeled tuples.
    EmitTrain {
        #[arg(long)]
        input: PathBuf,
        /// Output directory; receives sft.jsonl and dpo.jsonl.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        heuristic: Option<LabelingHeuristic>,
    },
    /// Build the policy datastore from rollouts or labeled tuples.
    BuildDatastore {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        datastore: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        datastore: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Print the routing decision for one question.
    Route {
        #[arg(long)]
        question: String,
        #[arg(long)]
        datastore: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Answer QA pairs and write an evaluation run file.
    Answer {
        /// JSONL of {id, question, answer, dataset_tag}; the answer is the gold.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        datastore: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Summarize run files; two or more inputs also give a latency curve.
    Eval {
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        #[arg(long, default_value = "substring")]
        mode: MatchMode,
        /// Summary JSON destination (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        curve_out: Option<PathBuf>,
    },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DatastoreInput {
    Tuple(Box<TrainingTuple>),
    Rollout(Rollout),
}

fn config(path: &Option<PathBuf>) -> Result<GatewayConfig> {
    let Some(path) = path else {
        bail!("no config given (use --config or {CONFIG_ENV})");
    };
    Ok(load_config(path)?)
}

fn backends(config: &GatewayConfig) -> Result<Backends> {
    let Some(b) = &config.backends else {
        bail!("config has no backends section");
    };
    Ok(Backends::from_config(b, &config.registry, config.embedding_dim)?)
}

fn gateway(config: GatewayConfig, datastore: Option<&Path>) -> Result<Gateway> {
    let backends = backends(&config)?;
    let store = match datastore {
        Some(p) if p.exists() => PolicyDatastore::restore(p).with_context(|| format!("loading {}", p.display()))?,
        _ => PolicyDatastore::for_registry(config.embedding_dim, &config.registry),
    };
    Ok(Gateway::new(config, backends, store)?)
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildData {
            input,
            out,
            seed,
            heuristic,
        } => {
            let cfg = config(&cli.config)?;
            let heuristic = heuristic.unwrap_or(cfg.labeling_heuristic);
            let records: Vec<QaRecord> = read_jsonl(&input)?;
            let b = backends(&cfg)?;
            let mut tuples = Vec::with_capacity(records.len());
            for (rec, r) in records.iter().zip(build_dataset(
                &records,
                &cfg,
                &b,
                heuristic,
                seed.unwrap_or(cfg.rng_seed),
            )) {
                let label = rec.id.clone().unwrap_or_else(|| rec.question.clone());
                tuples.push(r.with_context(|| format!("record {label}"))?);
            }
            write_jsonl::<(), _>(&out, None, &tuples)?;
            eprintln!("wrote {} tuples to {}", tuples.len(), out.display());
        }
        Command::EmitTrain {
            input,
            out,
            seed,
            heuristic,
        } => {
            let cfg = config(&cli.config)?;
            let tuples: Vec<TrainingTuple> = read_jsonl(&input)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let (sft, dpo) = write_training_files(
                &tuples,
                &cfg.registry,
                cfg.poisson_lambda,
                seed.unwrap_or(cfg.rng_seed),
                heuristic.unwrap_or(cfg.labeling_heuristic),
                &out.join("sft.jsonl"),
                &out.join("dpo.jsonl"),
            )?;
            eprintln!("wrote {sft} SFT and {dpo} DPO records to {}", out.display());
        }
        Command::BuildDatastore { input, datastore } => {
            let cfg = config(&cli.config)?;
            let rollouts: Vec<Rollout> = read_jsonl::<DatastoreInput>(&input)?
                .into_iter()
                .map(|r| match r {
                    DatastoreInput::Tuple(t) => t.to_rollout(),
                    DatastoreInput::Rollout(r) => r,
                })
                .collect();
            let b = backends(&cfg)?;
            let store = PolicyDatastore::build_from_rollouts(&rollouts, &cfg.registry, &b.embed)?;
            store.persist(&datastore)?;
            eprintln!("wrote {} entries to {}", store.len(), datastore.display());
        }
        Command::Serve { datastore, addr } => {
            let cfg = config(&cli.config)?;
            let gw = Arc::new(gateway(cfg, datastore.as_deref())?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(service::router(gw, datastore), &addr))?;
        }
        Command::Route {
            question,
            datastore,
            tau,
        } => {
            let gw = gateway(config(&cli.config)?, datastore.as_deref())?;
            let opts = AnswerOptions {
                tau_override: tau,
                force_source: None,
            };
            print_json(&RouteResponse::from(gw.route(&question, &opts)?));
        }
        Command::Answer {
            input,
            out,
            datastore,
            tau,
            batch_size,
        } => {
            let gw = gateway(config(&cli.config)?, datastore.as_deref())?;
            let records: Vec<QaRecord> = read_jsonl(&input)?;
            let questions: Vec<String> = records.iter().map(|r| r.question.clone()).collect();
            let opts = AnswerOptions {
                tau_override: tau,
                force_source: None,
            };
            let mut run = Vec::with_capacity(records.len());
            for (i, (rec, res)) in records
                .iter()
                .zip(gw.answer_batch(&questions, &opts, batch_size))
                .enumerate()
            {
                let id = rec.id.clone().unwrap_or_else(|| i.to_string());
                let res = res.with_context(|| format!("record {id}"))?;
                run.push(EvalRecord::from_answer(
                    &id,
                    &res,
                    vec![rec.answer.clone()],
                    &gw.config.registry,
                ));
            }
            write_jsonl::<(), _>(&out, None, &run)?;
            eprintln!("wrote {} results to {}", run.len(), out.display());
        }
        Command::Eval {
            input,
            mode,
            out,
            curve_out,
        } => {
            let registry = match &cli.config {
                Some(p) => load_config(p)?.registry,
                None => SourceRegistry::two_source(),
            };
            let groups = input
                .iter()
                .map(|p| read_jsonl::<EvalRecord>(p).map_err(anyhow::Error::from))
                .collect::<Result<Vec<_>>>()?;
            let all: Vec<EvalRecord> = groups.iter().flatten().cloned().collect();
            let summary = evaluate_run(&all, &registry, mode)?;
            match &out {
                Some(p) => std::fs::write(p, serde_json::to_string_pretty(&summary)?)?,
                None => print_json(&summary),
            }
            if let Some(p) = curve_out {
                std::fs::write(&p, curve_csv(&latency_curve(&groups, &registry, mode)?))?;
            }
        }
    }
    Ok(())
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}
