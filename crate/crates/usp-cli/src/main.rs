//! Operator surface: run the pipeline against a backend, report metrics,
//! inspect selected demos and warm the response cache.

mod artifacts;
mod config;
mod dataset;
mod inspect;
mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use usp_core::embedding::{Embedder, NgramHashEmbedder, RemoteEmbedder};
use usp_core::gateway::{
    Backend, CachedBackend, FileStore, HttpBackend, OracleEntry, SyntheticBackend,
    SyntheticOracleSpec,
};
use usp_core::model::{RunConfig, TaskQuery, TaskType};
use usp_core::pipeline::Strategy;
use usp_core::{Result, UspError};

use config::{BackendConfig, ConfigFile, EmbedderConfig, TOKEN_ENV};
use dataset::{load_dataset, Dataset};

#[derive(Parser)]
#[command(
    name = "usp",
    about = "Self-adaptive prompting: pseudo-demo selection and in-context inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a strategy and write an artifact directory.
    Run(RunArgs),
    /// Compute metrics over one or more artifact directories.
    Report(ReportArgs),
    /// Dump the selected pseudo-demos of a run.
    Inspect(InspectArgs),
    /// Issue every backend call of a run to fill the response cache.
    CacheWarm(CacheWarmArgs),
    /// Write a synthetic task dataset (queries plus hidden truths) for
    /// offline experimentation with the synthetic backend.
    GenSynthetic(GenSyntheticArgs),
}

#[derive(Args)]
struct GenSyntheticArgs {
    /// cls | sfg | lfg
    #[arg(long)]
    task: String,
    /// Number of queries.
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Label-space size (classification only).
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset path (line-delimited JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct RunOpts {
    /// Configuration file (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Test set (line-delimited JSON records).
    #[arg(long)]
    dataset: PathBuf,
    /// Unlabeled demo-generation set; defaults to the test set.
    #[arg(long)]
    unlabeled: Option<PathBuf>,
    /// usp | random-demo | zero-shot | few-shot | usp-fs
    #[arg(long, default_value = "usp")]
    mode: String,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the backend with a remote endpoint URL.
    #[arg(long)]
    backend_url: Option<String>,
    /// Override the demo budget K.
    #[arg(long)]
    k: Option<usize>,
    /// Override the Stage-1 sample count m.
    #[arg(long)]
    m: Option<usize>,
    /// Override the diversity trade-off weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Override the response cache directory.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    opts: RunOpts,
    /// Artifact output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CacheWarmArgs {
    #[command(flatten)]
    opts: RunOpts,
}

#[derive(Args)]
struct ReportArgs {
    /// Artifact directories to compare.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    /// Write the machine-readable summary here as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    dir: PathBuf,
}

struct PreparedRun {
    config: RunConfig,
    strategy: Strategy,
    unlabeled: Vec<TaskQuery>,
    test: Vec<TaskQuery>,
    dataset_label: String,
    backend: Box<dyn Backend>,
    embedder: Box<dyn Embedder>,
}

fn resolve_task(
    file: &ConfigFile,
    test: &Dataset,
    unlabeled: Option<&Dataset>,
) -> Result<TaskType> {
    let declared = [
        file.task_type,
        test.task_type,
        unlabeled.and_then(|d| d.task_type),
    ];
    let mut resolved = None;
    for task in declared.into_iter().flatten() {
        match resolved {
            None => resolved = Some(task),
            Some(existing) if existing == task => {}
            Some(existing) => {
                return Err(UspError::InvalidField {
                    field: "task_type".into(),
                    reason: format!("config says {existing}, dataset says {task}"),
                })
            }
        }
    }
    resolved.ok_or_else(|| UspError::InvalidField {
        field: "task_type".into(),
        reason: "set task_type in the config file or dataset records".into(),
    })
}

fn synthetic_truth(queries: &[TaskQuery]) -> Result<Vec<OracleEntry>> {
    let mut entries = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for query in queries {
        if !seen.insert(query.id.clone()) {
            continue;
        }
        // queries without references are simply unknown to the oracle
        if let Some(answer) = query.references.first() {
            entries.push(OracleEntry {
                id: query.id.clone(),
                text: query.text.clone(),
                answer: answer.clone(),
            });
        }
    }
    if entries.is_empty() {
        return Err(UspError::InvalidField {
            field: "references".into(),
            reason: "the synthetic backend needs references to act as hidden truths; none found"
                .into(),
        });
    }
    Ok(entries)
}

fn build_backend(
    file: &ConfigFile,
    opts: &RunOpts,
    config: &RunConfig,
    all_queries: &[TaskQuery],
) -> Result<Box<dyn Backend>> {
    let token = std::env::var(TOKEN_ENV).ok();
    let base: Box<dyn Backend> = match (&opts.backend_url, &file.backend) {
        (Some(url), _) => Box::new(HttpBackend::new(url.clone(), token, Default::default())),
        (None, BackendConfig::Http { url, score_norm }) => {
            Box::new(HttpBackend::new(url.clone(), token, *score_norm))
        }
        (
            None,
            BackendConfig::Synthetic {
                calibration,
                noise_seed,
                difficulty,
                icl_gain,
            },
        ) => {
            let mut spec = SyntheticOracleSpec::new(
                synthetic_truth(all_queries)?,
                calibration.unwrap_or(0.8),
                noise_seed.unwrap_or(config.rng_seed),
            );
            if let Some(difficulty) = difficulty {
                spec.difficulty = *difficulty;
            }
            if let Some(gain) = icl_gain {
                spec.icl_gain = *gain;
            }
            Box::new(SyntheticBackend::new(spec))
        }
    };
    let cache_dir = opts.cache.clone().or_else(|| file.cache_dir.clone());
    Ok(match cache_dir {
        Some(dir) => Box::new(CachedBackend::new(base, FileStore::open(dir)?)),
        None => base,
    })
}

fn prepare(opts: &RunOpts) -> Result<PreparedRun> {
    let file = match &opts.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let strategy = Strategy::parse(&opts.mode)?;
    let test = load_dataset(&opts.dataset)?;
    let unlabeled = opts.unlabeled.as_deref().map(load_dataset).transpose()?;

    let task = resolve_task(&file, &test, unlabeled.as_ref())?;
    let mut config = file.resolve(task);
    if let Some(seed) = opts.seed {
        config.rng_seed = seed;
    }
    if opts.k.is_some() {
        config.k = opts.k;
    }
    if let Some(m) = opts.m {
        config.m = m;
    }
    if let Some(lambda) = opts.lambda {
        config.lambda = lambda;
    }
    let config = usp_core::validate_config(config)?;

    let unlabeled_queries = unlabeled
        .as_ref()
        .map(|d| d.queries.clone())
        .unwrap_or_else(|| test.queries.clone());
    let mut all_queries = unlabeled_queries.clone();
    all_queries.extend(test.queries.iter().cloned());
    let backend = build_backend(&file, opts, &config, &all_queries)?;
    let embedder: Box<dyn Embedder> = match &file.embedder {
        EmbedderConfig::Ngram => Box::new(NgramHashEmbedder::default()),
        EmbedderConfig::Http { url } => Box::new(RemoteEmbedder::new(
            url.clone(),
            std::env::var(TOKEN_ENV).ok(),
        )),
    };
    Ok(PreparedRun {
        config,
        strategy,
        unlabeled: unlabeled_queries,
        test: test.queries,
        dataset_label: test.label,
        backend,
        embedder,
    })
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let prepared = prepare(&args.opts)?;
    let artifacts = usp_core::run_strategy(
        prepared.strategy,
        &prepared.config,
        &prepared.unlabeled,
        &prepared.test,
        prepared.backend.as_ref(),
        prepared.embedder.as_ref(),
    )?;
    artifacts::write_artifacts(&args.out, &artifacts, &prepared.dataset_label)?;
    for warning in &artifacts.diagnostics.warnings {
        eprintln!("warning: {warning}");
    }
    println!(
        "{} on `{}`: {} predictions, {} demos, artifacts in {}",
        prepared.strategy.as_str(),
        prepared.dataset_label,
        artifacts.predictions.len(),
        artifacts.demoset.demos.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_cache_warm(args: &CacheWarmArgs) -> Result<()> {
    let has_cache = args.opts.cache.is_some()
        || args
            .opts
            .config
            .as_deref()
            .map(ConfigFile::load)
            .transpose()?
            .is_some_and(|f| f.cache_dir.is_some());
    if !has_cache {
        return Err(UspError::InvalidField {
            field: "cache".into(),
            reason: "cache-warm needs --cache or cache_dir in the config".into(),
        });
    }
    let prepared = prepare(&args.opts)?;
    let artifacts = usp_core::run_strategy(
        prepared.strategy,
        &prepared.config,
        &prepared.unlabeled,
        &prepared.test,
        prepared.backend.as_ref(),
        prepared.embedder.as_ref(),
    )?;
    let d = &artifacts.diagnostics;
    println!(
        "cache warmed: {} decode ops, {} scoring ops",
        d.stage1_decode_ops + d.stage2_decode_ops,
        d.stage1_scoring_ops + d.stage2_scoring_ops,
    );
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let runs: Vec<_> = args
        .dirs
        .iter()
        .map(|dir| artifacts::read_artifacts(dir))
        .collect::<Result<_>>()?;
    let summary = report::build_report(&runs)?;
    print!("{}", report::render_table(&summary));
    if let Some(path) = &args.json {
        let body = serde_json::to_string_pretty(&summary).expect("report serializes");
        std::fs::write(path, body).map_err(|e| UspError::CorruptArtifact(format!(
            "{}: {e}",
            path.display()
        )))?;
        println!("machine-readable report written to {}", path.display());
    }
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let run = artifacts::read_artifacts(&args.dir)?;
    print!("{}", inspect::render_inspect(&run));
    Ok(())
}

fn cmd_gen_synthetic(args: &GenSyntheticArgs) -> Result<()> {
    let task = match args.task.as_str() {
        "cls" => TaskType::Cls,
        "sfg" => TaskType::Sfg,
        "lfg" => TaskType::Lfg,
        other => {
            return Err(UspError::InvalidField {
                field: "task".into(),
                reason: format!("unknown task type `{other}`"),
            })
        }
    };
    let (queries, _) = usp_core::gateway::synthetic_task(task, args.n, args.classes, args.seed);
    dataset::write_dataset(&args.out, &queries, task)?;
    println!(
        "{} synthetic {task} queries written to {}",
        queries.len(),
        args.out.display()
    );
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Report(args) => cmd_report(args),
        Command::Inspect(args) => cmd_inspect(args),
        Command::CacheWarm(args) => cmd_cache_warm(args),
        Command::GenSynthetic(args) => cmd_gen_synthetic(args),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
