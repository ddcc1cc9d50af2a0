use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kcd_core::grounding::{
    build_synthetic_dataset, evaluate_classifier, relabel, train_token_classifier, ClassifierConfig, DataGenConfig,
    GroundednessScorer, HeadKind, LabelScheme,
};
use kcd_core::lm::{LanguageModel, TableLm};
use kcd_core::toy::{grounding_suite, SuiteConfig};
use kcd_harness::config::{ConfigError, ExperimentConfig, LmSpec, ScorerSpec, Strategy};
use kcd_harness::dataset::{load_dataset, load_labeled, save_dataset, save_labeled};
use kcd_harness::mock::{MockOptions, MockServer};
use kcd_harness::runner::{run_experiment, RunError};

#[derive(Parser)]
#[command(name = "kcd", version, about = "Knowledge-constrained decoding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one strategy over a dataset and write results plus reports.
    Decode(RunArgs),
    /// Run several strategies and write one merged report.
    Compare(RunArgs),
    /// Build a labeled dataset of grounded and synthetic negative responses.
    GenData(GenDataArgs),
    /// Train a token-level groundedness classifier.
    TrainScorer(TrainArgs),
    /// Token and sequence accuracy of a scorer on a labeled dataset.
    EvalScorer(EvalArgs),
    /// Serve a table model behind a local completion endpoint.
    MockServer(MockArgs),
    /// Write a synthetic model, dataset and experiment config.
    Toy(ToyArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Strategies to run instead of the configured ones.
    #[arg(long, short, value_delimiter = ',')]
    strategy: Vec<String>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct LmArgs {
    /// Table model file (JSON).
    #[arg(long)]
    lm: PathBuf,
    /// Copy-mixture weight over the conditioning tokens.
    #[arg(long, default_value_t = 0.0)]
    copy_weight: f64,
}

impl LmArgs {
    fn load(&self) -> Result<Arc<dyn LanguageModel>, ConfigError> {
        LmSpec { path: self.lm.clone(), copy_weight: self.copy_weight }.load()
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Ripa,
    Truncation,
    TokenLevel,
}

impl From<SchemeArg> for LabelScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Ripa => LabelScheme::Ripa,
            SchemeArg::Truncation => LabelScheme::Truncation,
            SchemeArg::TokenLevel => LabelScheme::TokenLevel,
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Raw dataset (JSONL with id, context, knowledge, reference).
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    lm: LmArgs,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "ripa")]
    scheme: SchemeArg,
    #[arg(long, default_value_t = 1.4)]
    temperature: f64,
    /// Fraction of negatives made by knowledge shuffle.
    #[arg(long, default_value_t = 0.5)]
    mixture_ratio: f64,
    #[arg(long)]
    summarization: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Shared,
    PerToken,
}

#[derive(Args)]
struct TrainArgs {
    /// Labeled dataset from `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Model whose vocabulary the data uses.
    #[arg(long)]
    lm: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "shared")]
    head: HeadArg,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 2)]
    window: usize,
    #[arg(long, default_value_t = 1e-4)]
    l2: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    lm: PathBuf,
    /// Classifier file, or `lexical` for the lexical oracle.
    #[arg(long, default_value = "lexical")]
    scorer: String,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct MockArgs {
    #[command(flatten)]
    lm: LmArgs,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Answer the first N requests with 429.
    #[arg(long, default_value_t = 0)]
    fail_first: usize,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, short, default_value = "toy")]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    examples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Config(anyhow::Error),
    Partial(usize),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Config(e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.into())
    }
}

fn run(args: RunArgs, single: bool) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if !args.strategy.is_empty() {
        cfg.strategies = args.strategy.iter().map(|s| s.parse()).collect::<Result<Vec<Strategy>, _>>()?;
    }
    if single && cfg.strategies.len() != 1 {
        return Err(anyhow::anyhow!("decode runs exactly one strategy; got {}, use compare or --strategy", cfg.strategies.len()).into());
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(dir) = args.output_dir {
        cfg.output_dir = dir;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let outcome = match run_experiment(&cfg) {
        Ok(o) => o,
        Err(RunError::Config(e)) => return Err(e.into()),
        Err(e) => return Err(anyhow::Error::new(e).into()),
    };
    println!("{:<20} {:>6} {:>7} {:>8} {:>8}", "strategy", "n", "failed", "KF1", "f");
    for (strategy, summary) in &outcome.report.aggregate {
        let mean = |m: &str| summary.mean.get(m).map_or("-".to_string(), |v| format!("{v:.4}"));
        println!("{strategy:<20} {:>6} {:>7} {:>8} {:>8}", summary.count, summary.failed, mean("KF1"), mean("f"));
    }
    println!("reports written to {}", cfg.output_dir.display());
    match outcome.failures() {
        0 => Ok(()),
        n => Err(Failure::Partial(n)),
    }
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let lm = a.lm.load()?;
    let corpus = load_dataset(&a.dataset, lm.vocabulary())?;
    let cfg = DataGenConfig {
        hallucination_temperature: a.temperature,
        mixture_ratio: a.mixture_ratio,
        summarization: a.summarization,
        seed: a.seed,
        ..DataGenConfig::default()
    };
    let data = build_synthetic_dataset(&corpus, &*lm, &cfg)?;
    let scheme = LabelScheme::from(a.scheme);
    let data: Vec<_> = data
        .iter()
        .enumerate()
        .map(|(i, ex)| relabel(ex, scheme, kcd_core::mix_seed(a.seed, i as u64)))
        .collect();
    save_labeled(&a.out, &data, lm.vocabulary())?;
    println!("wrote {} labeled examples to {}", data.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let lm = TableLm::load(&a.lm)?;
    let data = load_labeled(&a.data, lm.vocabulary())?;
    let head = match a.head {
        HeadArg::Shared => HeadKind::Shared,
        HeadArg::PerToken => HeadKind::PerToken,
    };
    let cfg = ClassifierConfig { epochs: a.epochs, window: a.window, l2: a.l2, head, seed: a.seed, ..ClassifierConfig::default() };
    let model = train_token_classifier(&data, &cfg)?;
    kcd_harness::dataset::write_text(&a.out, &model.to_json())?;
    println!(
        "trained on {} examples; loss {:.4} -> {:.4}; saved to {}",
        data.len(),
        model.loss_history.first().copied().unwrap_or(f64::NAN),
        model.loss_history.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let lm = TableLm::load(&a.lm)?;
    let data = load_labeled(&a.data, lm.vocabulary())?;
    let spec = if a.scorer == "lexical" { ScorerSpec::Lexical } else { ScorerSpec::Classifier { path: a.scorer.into() } };
    let scorer: Arc<dyn GroundednessScorer> = spec.load()?;
    let report = evaluate_classifier(&*scorer, &data, a.threshold)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn mock(a: MockArgs) -> anyhow::Result<()> {
    let lm = a.lm.load()?;
    let server = MockServer::start(lm, MockOptions { addr: Some(a.addr), fail_first: a.fail_first })?;
    println!("serving {}", server.endpoint());
    server.join();
    Ok(())
}

fn toy(a: ToyArgs) -> anyhow::Result<()> {
    if a.examples == 0 {
        bail!("--examples must be positive");
    }
    let cfg = SuiteConfig { seed: a.seed, ..SuiteConfig::default() };
    let suite = grounding_suite(&cfg, a.examples);
    let dir = Path::new(&a.out);
    kcd_harness::dataset::write_text(&dir.join("lm.json"), &suite.lm.base().to_json())?;
    save_dataset(dir.join("dev.jsonl"), &suite.examples, suite.vocabulary())?;
    let config = format!(
        "dataset = \"dev.jsonl\"\n\
         strategies = [\"nucleus\", \"kwd\", \"nado\", \"kcts\"]\n\
         output_dir = \"out\"\n\
         workers = 4\n\
         seed = {seed}\n\n\
         [lm]\npath = \"lm.json\"\ncopy_weight = {cw}\n\n\
         [scorer]\nkind = \"lexical\"\n\n\
         [eval_scorer]\nkind = \"lexical\"\n\n\
         [decode]\n{decode}",
        seed = a.seed,
        cw = cfg.copy_weight,
        decode = toml::to_string(&kcd_core::decoding::DecodeConfig::default())?,
    );
    kcd_harness::dataset::write_text(&dir.join("experiment.toml"), &config)?;
    ExperimentConfig::load(dir.join("experiment.toml")).context("generated config does not load")?;
    println!("wrote lm.json, dev.jsonl and experiment.toml to {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result: Result<(), Failure> = match cli.command {
        Command::Decode(a) => run(a, true),
        Command::Compare(a) => run(a, false),
        Command::GenData(a) => gen_data(a).map_err(Failure::from),
        Command::TrainScorer(a) => train(a).map_err(Failure::from),
        Command::EvalScorer(a) => eval(a).map_err(Failure::from),
        Command::MockServer(a) => mock(a).map_err(Failure::from),
        Command::Toy(a) => toy(a).map_err(Failure::from),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Partial(n)) => {
            eprintln!("{n} example(s) failed; see the error column of the report");
            ExitCode::from(2)
        }
    }
}
