use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use mile_core::experiments::{run_quality_comparison, run_size_sweep, ExperimentConfig};
use mile_core::fixtures;
use mile_core::io;
use mile_core::model::GcPolicy;
use mile_core::pipeline::{read_run_dir, write_run_dir, RunTimestamps};
use mile_core::{
    generate_mutants, kill_matrix, run_evaluation, score_report, Cache, IclModel, MockModel, ModelEndpoint, Mutant,
    MutationConfig, OodPool, Parallelism, RemoteModel, RunManifest,
};

#[derive(Parser, Debug)]
#[command(name = "mile", version, about = "Mutation testing for in-context-learning prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate mutated demonstration sets.
    Mutate(MutateArgs),
    /// Evaluate test cases against the original prompt and every mutant.
    Run(RunArgs),
    /// Score a finished run directory.
    Score(ScoreArgs),
    /// Compare uniform and class-biased test sets.
    Experiment {
        #[command(subcommand)]
        kind: ExperimentKind,
    },
    /// Drop cache entries older than a given age.
    CacheGc {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        max_age_secs: u64,
    },
    /// Write a bundled task (task.toml, demos.jsonl, dataset.jsonl, ood_pool.jsonl) to disk.
    Fixture {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(fixtures::NAMES))]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct MutateArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    demos: PathBuf,
    /// Mutation config TOML; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSONL of {"input", "output"} pairs; the bundled pool is used when omitted.
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Base URL of an OpenAI-compatible API, e.g. http://localhost:8000/v1
    #[arg(long, required_unless_present = "mock", conflicts_with = "mock", requires = "model_name")]
    endpoint: Option<String>,
    /// Offline token-overlap model.
    #[arg(long)]
    mock: bool,
    #[arg(long, requires = "endpoint")]
    model_name: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long, default_value = "OPENAI_API_KEY")]
    api_key_env: String,
    #[arg(long, default_value_t = 8)]
    max_tokens: u32,
    #[arg(long, default_value_t = 60.0)]
    timeout_secs: f64,
    #[arg(long, default_value_t = 3)]
    max_retries: u32,
}

impl ModelArgs {
    fn build(&self) -> Result<Box<dyn IclModel>> {
        let Some(url) = &self.endpoint else {
            return Ok(Box::new(MockModel::new()));
        };
        let Some(name) = &self.model_name else {
            bail!("--endpoint needs --model-name");
        };
        let mut endpoint = ModelEndpoint::new(url.clone(), name.clone());
        endpoint.api_key_env = self.api_key_env.clone();
        endpoint.max_tokens = self.max_tokens;
        endpoint.request_timeout_secs = self.timeout_secs;
        endpoint.max_retries = self.max_retries;
        Ok(Box::new(RemoteModel::new(endpoint)?))
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    demos: PathBuf,
    #[arg(long)]
    mutants: PathBuf,
    #[arg(long)]
    tests: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Response cache directory; reruns against it resume where they stopped.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Subcommand, Debug)]
enum ExperimentKind {
    /// One uniform test set against one biased set per class.
    Quality(ExperimentArgs),
    /// The quality comparison repeated on nested subsamples.
    Sweep(ExperimentArgs),
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    demos: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Drives both test-set sampling and mutant generation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Test-set size; defaults to a quarter of the dataset.
    #[arg(long)]
    size: Option<usize>,
    /// Sweep ratios, comma separated.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn parallelism(n: Option<usize>) -> Parallelism {
    n.map(Parallelism::new).unwrap_or_default()
}

fn open_cache(dir: Option<&Path>) -> Result<Cache> {
    Ok(match dir {
        Some(d) => Cache::open(d).with_context(|| format!("opening cache {}", d.display()))?,
        None => Cache::in_memory(),
    })
}

fn load_config(path: Option<&Path>) -> Result<MutationConfig> {
    match path {
        Some(p) => Ok(MutationConfig::from_toml_str(&io::read_to_string(p)?)
            .with_context(|| format!("reading {}", p.display()))?),
        None => Ok(MutationConfig::default()),
    }
}

fn load_pool(path: Option<&Path>) -> Result<OodPool> {
    match path {
        Some(p) => Ok(OodPool::new(io::read_jsonl(p)?)),
        None => Ok(fixtures::ood_pool()),
    }
}

fn mutate(args: &MutateArgs) -> Result<()> {
    let task = io::load_task(&args.task)?;
    let demos = io::load_demos(&args.demos)?;
    let config = load_config(args.config.as_deref())?;
    let pool = load_pool(args.pool.as_deref())?;
    let set = generate_mutants(&demos, &task, &config, &pool, Parallelism::default())?;
    for s in &set.shortfalls {
        warn!("{}: requested {} mutants, produced {}", s.kind, s.requested, s.produced);
    }
    io::write_jsonl(&args.out, &set.mutants)?;
    info!("wrote {} mutants to {}", set.mutants.len(), args.out.display());
    Ok(())
}

fn run(args: &RunArgs) -> Result<()> {
    let task = io::load_task(&args.task)?;
    let demos = io::load_demos(&args.demos)?;
    let mutants: Vec<Mutant> = io::read_jsonl(&args.mutants)?;
    let tests = io::load_dataset(&args.tests)?;
    let model = args.model.build()?;
    let cache = open_cache(args.cache.as_deref())?;
    let started_ms = RunTimestamps::now_ms();
    let matrix = run_evaluation(
        model.as_ref(),
        &task,
        &demos,
        &mutants,
        &tests,
        parallelism(args.parallelism),
        &cache,
    )?;
    let mut manifest = RunManifest::new(&task, &demos, model.as_ref(), &matrix);
    manifest.timestamps = Some(RunTimestamps {
        started_ms,
        finished_ms: RunTimestamps::now_ms(),
    });
    write_run_dir(&args.out, &manifest, &matrix)?;
    info!(
        "{} of {} cases passed the baseline; {} cells evaluated",
        manifest.counts.passed,
        manifest.counts.cases,
        matrix.cell_count()
    );
    Ok(())
}

fn score(args: &ScoreArgs) -> Result<()> {
    let (_, matrix) = read_run_dir(&args.run)?;
    let report = score_report(&kill_matrix(&matrix)?)?;
    match args.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        Format::Csv => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn experiment(kind: &ExperimentKind) -> Result<()> {
    let (args, sweep) = match kind {
        ExperimentKind::Quality(a) => (a, false),
        ExperimentKind::Sweep(a) => (a, true),
    };
    let task = io::load_task(&args.task)?;
    let demos = io::load_demos(&args.demos)?;
    let dataset = io::load_dataset(&args.dataset)?;
    let pool = load_pool(args.pool.as_deref())?;
    let mut config = ExperimentConfig::new(task, demos, dataset, pool);
    config.mutation = load_config(args.config.as_deref())?;
    config.mutation.seed = args.seed;
    config.seed = args.seed;
    config.size = args.size;
    if let Some(r) = &args.ratios {
        config.ratios = r.clone();
    }
    config.parallelism = parallelism(args.parallelism);
    let model = args.model.build()?;
    let cache = open_cache(args.cache.as_deref())?;
    let report = if sweep {
        run_size_sweep(&config, model.as_ref(), &cache)?
    } else {
        run_quality_comparison(&config, model.as_ref(), &cache)?
    };
    report.write_dir(&args.out)?;
    print!("{}", report.scores_csv());
    Ok(())
}

fn cache_gc(dir: &Path, max_age_secs: u64) -> Result<()> {
    let cache = Cache::open(dir)?;
    let cutoff = SystemTime::now()
        .checked_sub(Duration::from_secs(max_age_secs))
        .unwrap_or(SystemTime::UNIX_EPOCH);
    let stats = cache.gc(GcPolicy { cutoff })?;
    println!("scanned {} removed {}", stats.scanned, stats.removed);
    Ok(())
}

fn export_fixture(name: &str, out: &Path) -> Result<()> {
    let Some(f) = fixtures::fixture(name) else {
        bail!("unknown fixture {name}");
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let toml = toml_task(&f.task);
    io::write_string(&out.join("task.toml"), &toml)?;
    io::write_jsonl(&out.join("demos.jsonl"), &f.demos.iter().collect::<Vec<_>>())?;
    io::write_jsonl(&out.join("dataset.jsonl"), &f.dataset)?;
    io::write_jsonl(&out.join("ood_pool.jsonl"), &fixtures::ood_pool().pairs)?;
    Ok(())
}

fn toml_task(task: &mile_core::TaskSpec) -> String {
    let q = |s: &str| serde_json::to_string(s).expect("string serializes");
    let list = |v: &[String]| v.iter().map(|s| q(s)).collect::<Vec<_>>().join(", ");
    format!(
        "name = {}\nsystem_prompt = {}\nfields = [{}]\nanswer_field = {}\nlabels = [{}]\nood_label_token = {}\n",
        q(&task.name),
        q(&task.system_prompt),
        list(&task.fields),
        q(&task.answer_field),
        list(&task.labels),
        q(&task.ood_label_token),
    )
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Mutate(a) => mutate(&a),
        Command::Run(a) => run(&a),
        Command::Score(a) => score(&a),
        Command::Experiment { kind } => experiment(&kind),
        Command::CacheGc { cache, max_age_secs } => cache_gc(&cache, max_age_secs),
        Command::Fixture { name, out } => export_fixture(&name, &out),
    }
}
