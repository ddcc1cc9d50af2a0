//! Batch decoding: every strategy over every example on a fixed-size worker
//! pool, then metrics and report files.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use kcd_core::decoding::{
    kcts_decode, nado_weighted_sample, nucleus_decode, prefix_constrained_decode, weighted_decode, DecodeConfig,
    DecodeRequest, DecodeResult,
};
use kcd_core::grounding::{GroundedExample, GroundednessScorer};
use kcd_core::lm::LanguageModel;
use kcd_core::metrics::{evaluate_batch, MetricError, MetricReport};
use kcd_core::mix_seed;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, Strategy};
use crate::dataset::{load_dataset, write_file, DatasetError};
use crate::remote::{pre_guided_remote_decode, CompletionBackend, RemoteClient, RemoteGuidanceConfig};
use crate::report::{emit_report, ReportFormat};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// FNV-1a of the example id; stable across platforms and runs.
pub fn stable_hash(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Sampling seed of one example, independent of its position and of the
/// worker that decodes it.
pub fn example_seed(job_seed: u64, id: &str) -> u64 {
    mix_seed(job_seed, stable_hash(id))
}

/// Remote model plus the guidance settings used with it.
pub struct RemoteSetup {
    pub backend: Arc<dyn CompletionBackend>,
    pub guidance: RemoteGuidanceConfig,
}

/// Everything needed to decode, with models already loaded.
pub struct Experiment {
    pub lm: Arc<dyn LanguageModel>,
    pub examples: Vec<GroundedExample>,
    pub strategies: Vec<Strategy>,
    pub scorers: BTreeMap<Strategy, Arc<dyn GroundednessScorer>>,
    pub eval_scorer: Arc<dyn GroundednessScorer>,
    pub decode: DecodeConfig,
    pub remote: Option<RemoteSetup>,
    pub workers: usize,
    pub seed: u64,
}

pub type Outcome = Result<DecodeResult, String>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CallTotals {
    pub lm_forward_calls: usize,
    pub scorer_calls: usize,
    pub terminal_evaluations: usize,
    pub fallback_steps: usize,
    pub remote_calls: usize,
}

impl CallTotals {
    fn add(&mut self, r: &DecodeResult) {
        self.lm_forward_calls += r.lm_forward_calls;
        self.scorer_calls += r.scorer_calls;
        self.terminal_evaluations += r.terminal_evaluations;
        self.fallback_steps += r.fallback_steps;
        self.remote_calls += r.remote_calls;
    }
}

pub struct RunOutcome {
    pub results: Vec<(Strategy, Vec<(String, Outcome)>)>,
    pub report: MetricReport,
    pub totals: BTreeMap<Strategy, CallTotals>,
}

impl RunOutcome {
    pub fn failures(&self) -> usize {
        self.report.failures()
    }
}

impl Experiment {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self, RunError> {
        let lm = cfg.lm.load()?;
        let examples = load_dataset(&cfg.dataset, lm.vocabulary())?;
        let mut scorers = BTreeMap::new();
        for &s in &cfg.strategies {
            scorers.insert(s, cfg.scorer_for(s).load()?);
        }
        let remote = match &cfg.remote {
            Some(g) if cfg.strategies.contains(&Strategy::Remote) => {
                let client = RemoteClient::new(g.clone(), lm.vocabulary().clone())
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                Some(RemoteSetup { backend: Arc::new(client), guidance: g.clone() })
            }
            _ => None,
        };
        Ok(Self {
            lm,
            examples,
            strategies: cfg.strategies.clone(),
            scorers,
            eval_scorer: cfg.eval_scorer.load()?,
            decode: cfg.decode.clone(),
            remote,
            workers: cfg.workers,
            seed: cfg.seed,
        })
    }

    /// Decodes one example. Errors and panics become `Err` strings so one
    /// bad example never stops the batch.
    pub fn decode_example(&self, strategy: Strategy, example: &GroundedExample) -> Outcome {
        let cfg = DecodeConfig { seed: example_seed(self.seed, &example.id), ..self.decode.clone() };
        let run = || -> Result<DecodeResult, String> {
            let request = DecodeRequest::new(example.context.clone(), example.knowledge.clone()).map_err(|e| e.to_string())?;
            let lm = &*self.lm;
            let scorer = self
                .scorers
                .get(&strategy)
                .ok_or_else(|| format!("no scorer configured for {strategy}"))?
                .as_ref();
            let out = match strategy {
                Strategy::Nucleus => nucleus_decode(lm, &request, &cfg),
                Strategy::Kcts => kcts_decode(lm, scorer, &request, &cfg),
                Strategy::Kwd | Strategy::Fudge => {
                    weighted_decode(lm, scorer, &request, &cfg, strategy.weighted_mode().expect("weighted strategy"))
                }
                Strategy::Nado => nado_weighted_sample(lm, scorer, &request, &cfg),
                Strategy::PrefixConstrained => prefix_constrained_decode(lm, scorer, &request, &cfg),
                Strategy::Remote => {
                    let setup = self.remote.as_ref().ok_or("no remote endpoint configured")?;
                    return pre_guided_remote_decode(&*setup.backend, lm, scorer, &request, &cfg, &setup.guidance)
                        .map_err(|e| e.to_string());
                }
            };
            out.map_err(|e| e.to_string())
        };
        match catch_unwind(AssertUnwindSafe(run)) {
            Ok(r) => r,
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "unknown panic".into());
                Err(format!("decoder panicked: {msg}"))
            }
        }
    }

    /// Runs every strategy over every example on `workers` threads. Results
    /// keep dataset order and do not depend on the worker count.
    pub fn run(&self) -> Result<RunOutcome, RunError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers.max(1))
            .build()
            .map_err(|e| RunError::Pool(e.to_string()))?;
        let vocab = self.lm.vocabulary();
        let mut results = Vec::new();
        let mut report = MetricReport::default();
        let mut totals = BTreeMap::new();
        for &strategy in &self.strategies {
            let outcomes: Vec<(String, Outcome)> = pool.install(|| {
                self.examples.par_iter().map(|ex| (ex.id.clone(), self.decode_example(strategy, ex))).collect()
            });
            let mut t = CallTotals::default();
            for (id, o) in &outcomes {
                match o {
                    Ok(r) => t.add(r),
                    Err(e) => log::warn!("{strategy} {id}: {e}"),
                }
            }
            log::info!(
                "{strategy}: {} examples, lm calls {}, scorer calls {}, remote calls {}",
                outcomes.len(),
                t.lm_forward_calls,
                t.scorer_calls,
                t.remote_calls
            );
            if !outcomes.is_empty() {
                let batch = pool.install(|| {
                    evaluate_batch(strategy.name(), &outcomes, &self.examples, &*self.eval_scorer, vocab)
                })?;
                report = report.merge(batch);
            }
            totals.insert(strategy, t);
            results.push((strategy, outcomes));
        }
        Ok(RunOutcome { results, report, totals })
    }
}

#[derive(Serialize)]
struct ResultRecord<'a> {
    strategy: &'a str,
    id: &'a str,
    tokens: Vec<String>,
    text: String,
    per_step_scores: &'a [f64],
    final_groundedness: Option<f64>,
    lm_forward_calls: usize,
    scorer_calls: usize,
    terminal_evaluations: usize,
    fallback_steps: usize,
    remote_calls: usize,
    error: Option<&'a str>,
}

/// Writes `results.jsonl`, `report.csv` and `report.json` into `dir`.
pub fn write_outputs(outcome: &RunOutcome, lm: &dyn LanguageModel, dir: &Path) -> Result<(), DatasetError> {
    let vocab = lm.vocabulary();
    let mut lines = String::new();
    for (strategy, outcomes) in &outcome.results {
        for (id, o) in outcomes {
            let empty = DecodeResult::default();
            let (r, error) = match o {
                Ok(r) => (r, None),
                Err(e) => (&empty, Some(e.as_str())),
            };
            let rec = ResultRecord {
                strategy: strategy.name(),
                id,
                tokens: vocab.decode(r.tokens.ids()),
                text: vocab.detokenize(r.tokens.content()),
                per_step_scores: &r.per_step_scores,
                final_groundedness: r.final_groundedness,
                lm_forward_calls: r.lm_forward_calls,
                scorer_calls: r.scorer_calls,
                terminal_evaluations: r.terminal_evaluations,
                fallback_steps: r.fallback_steps,
                remote_calls: r.remote_calls,
                error,
            };
            lines.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            lines.push('\n');
        }
    }
    write_file(&dir.join("results.jsonl"), lines.as_bytes())?;
    emit_report(&outcome.report, ReportFormat::Csv, dir.join("report.csv"))?;
    emit_report(&outcome.report, ReportFormat::Json, dir.join("report.json"))
}

/// Loads, runs and writes one configured experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    let exp = Experiment::from_config(cfg)?;
    let outcome = exp.run()?;
    write_outputs(&outcome, &*exp.lm, &cfg.output_dir)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(stable_hash(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(stable_hash("a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(stable_hash("foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn seeds_depend_on_id_not_position() {
        assert_eq!(example_seed(3, "ex1"), example_seed(3, "ex1"));
        assert_ne!(example_seed(3, "ex1"), example_seed(3, "ex2"));
        assert_ne!(example_seed(3, "ex1"), example_seed(4, "ex1"));
    }
}
