//! Seeded experiment orchestration: one trial end to end, batches on a
//! bounded worker pool, and persisted results.
//!
//! A trial generates a model from its configuration, audits the
//! intervention set, samples every environment, recovers the latent graph
//! and decoder from oracle scores, removes residual mixing when the
//! interventions are hard, and scores the estimates against the generating
//! truth. Algorithmic failures become a [`TrialStatus`] on the result — a
//! failing trial never aborts its batch. Every random draw descends from
//! `(config seed, trial index, stage)`, so any trial reproduces in
//! isolation, in any order, on any worker.
//!
//! Batches write one JSON file per trial, an aggregate `results.csv`, and a
//! `summary.json` with outcome rates and mean scores. Stage timings are
//! measured on a monotonic clock and carried on the in-memory result only;
//! the persisted artifacts depend on nothing but the configuration and
//! seed, so identical runs produce identical bytes.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::{self, AuditReport};
use crate::config::ExperimentConfig;
use crate::dataset;
use crate::graph::surround_map;
use crate::metrics::{self, ConsistencyScore};
use crate::recover::{self, RecoveryConfig, RecoveryReport};
use crate::scm::{self, EnvironmentSet, MixingMap};
use crate::score::ScoreOracle;
use crate::seed::{self, Stream};
use crate::{Error, Result};

/// How one trial ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    /// The pipeline ran to completion and produced estimates.
    Success,
    /// The graph or decoder could not be pinned down from the score
    /// variations — the model is outside what the method can identify.
    IdentifiabilityFailure,
    /// Recovery produced a decoder but the estimates could not be cleaned
    /// up or scored: residual dependence persisted, or a later stage
    /// rejected the estimates.
    RefinementFailure,
}

impl TrialStatus {
    /// The status as it appears in CSV rows and JSON.
    pub fn as_str(self) -> &'static str {
        match self {
            TrialStatus::Success => "success",
            TrialStatus::IdentifiabilityFailure => "identifiability_failure",
            TrialStatus::RefinementFailure => "refinement_failure",
        }
    }
}

/// Wall-clock milliseconds per stage. Reported for profiling, never
/// asserted on, and excluded from persisted artifacts so that identical
/// runs write identical bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub generate_ms: f64,
    pub audit_ms: f64,
    pub sample_ms: f64,
    pub recover_ms: f64,
    pub refine_ms: f64,
    pub score_ms: f64,
}

impl StageTimings {
    /// Total measured time across stages.
    pub fn total_ms(&self) -> f64 {
        self.generate_ms
            + self.audit_ms
            + self.sample_ms
            + self.recover_ms
            + self.refine_ms
            + self.score_ms
    }
}

/// Everything recorded about one trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub status: TrialStatus,
    /// Message of the stage failure when the status is not success.
    pub failure: Option<String>,
    pub audit: AuditReport,
    /// Populated whenever recovery produced a decoder.
    pub recovery: Option<RecoveryReport>,
    /// Populated whenever the estimates could be scored against the truth.
    pub score: Option<ConsistencyScore>,
    #[serde(skip)]
    pub timings: StageTimings,
}

impl TrialResult {
    /// The JSON persisted as `trial_<t>.json`: pretty-printed, newline
    /// terminated, and independent of wall-clock time.
    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// The recovery knobs an experiment configuration pins down.
pub fn recovery_config(cfg: &ExperimentConfig) -> RecoveryConfig {
    RecoveryConfig {
        rank_tol: cfg.rank_tol,
        equivalence: cfg.equivalence(),
        dcor_threshold: cfg.independence_threshold,
        ..RecoveryConfig::default()
    }
}

/// The generating process of one trial: its derived root seed, the
/// environment set, and the mixing map.
#[derive(Debug, Clone)]
pub struct TrialModel {
    /// Per-trial root seed every stage stream derives from.
    pub root: u64,
    pub envs: EnvironmentSet,
    pub mixing: MixingMap,
}

/// Deterministically generate the model for one trial: the latent graph,
/// a base mechanism set, one intervention per node, and a random mixing.
pub fn trial_model(cfg: &ExperimentConfig, trial: usize) -> Result<TrialModel> {
    let root = seed::derive(cfg.seed, Stream::Trial, trial as u64);
    let dag = cfg.dag(root)?;
    let base = scm::random_scm_with_noise(
        &dag,
        cfg.mechanism,
        cfg.coupling,
        cfg.noise_family,
        cfg.noise_scale,
        root,
    );
    let envs = scm::random_environments(&base, cfg.mechanism, cfg.intervention, root)?;
    let mixing = MixingMap::random(cfg.observed_dim(), cfg.n, root)?;
    Ok(TrialModel { root, envs, mixing })
}

/// Draw `k` latent and observed samples from every environment, each
/// environment on its own random stream under `root`.
pub fn sample_environments(
    envs: &EnvironmentSet,
    mixing: &MixingMap,
    k: usize,
    root: u64,
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
    let mut latents = Vec::with_capacity(envs.len());
    let mut observed = Vec::with_capacity(envs.len());
    for m in 0..envs.len() {
        let mut rng = seed::rng(root, Stream::Samples, m as u64);
        let z = envs.env(m).sample_latent(k, &mut rng);
        let x = mixing.mix(&z)?;
        latents.push(z);
        observed.push(x);
    }
    Ok((latents, observed))
}

/// Run one trial end to end. Deterministic given `(cfg.seed, trial)`:
/// model generation, audit probes, and environment samples each draw from
/// their own stream under a per-trial root seed. Algorithmic failures are
/// captured in the result's status; an error here means the configuration
/// itself was unusable.
pub fn run_trial(cfg: &ExperimentConfig, trial: usize) -> Result<TrialResult> {
    cfg.validate()?;
    let mut timings = StageTimings::default();

    let start = Instant::now();
    let TrialModel { root, envs, mixing } = trial_model(cfg, trial)?;
    timings.generate_ms = elapsed_ms(start);

    let start = Instant::now();
    let audit = audit::audit_environments(&envs, audit::DEFAULT_REGULARITY_PROBES, root);
    timings.audit_ms = elapsed_ms(start);

    let start = Instant::now();
    let (latents, observed) = sample_environments(&envs, &mixing, cfg.samples_per_env, root)?;
    timings.sample_ms = elapsed_ms(start);

    let hard = envs.is_hard();
    let truth_dag = envs.dag().clone();
    let surround = surround_map(&truth_dag);
    let oracle = ScoreOracle::new(envs, mixing.clone())?;
    let rcfg = recovery_config(cfg);

    let done = |status: TrialStatus, failure: String, timings: StageTimings, audit| {
        Ok(TrialResult {
            trial,
            status,
            failure: Some(failure),
            audit,
            recovery: None,
            score: None,
            timings,
        })
    };

    let start = Instant::now();
    let mut decoder = match recover::soft_recover(&oracle, &observed[0], &rcfg) {
        Ok(d) => d,
        Err(e) => {
            timings.recover_ms = elapsed_ms(start);
            // Anything the construction rejects — insufficient score
            // variation, a pattern that fails verification, samples off the
            // recovered manifold — means no decoder could be identified.
            return done(
                TrialStatus::IdentifiabilityFailure,
                e.to_string(),
                timings,
                audit,
            );
        }
    };
    timings.recover_ms = elapsed_ms(start);

    let mut failure = None;
    let mut status = TrialStatus::Success;
    let mut unmixing = Vec::new();
    if hard {
        let start = Instant::now();
        match recover::hard_refine(&decoder, &observed, &surround, &rcfg) {
            Ok(out) => {
                timings.refine_ms = elapsed_ms(start);
                decoder = out.decoder;
                unmixing = out.unmixing;
                if !out.failed_pairs.is_empty() {
                    status = TrialStatus::RefinementFailure;
                    failure = Some(format!(
                        "residual dependence persisted for node pairs {:?}",
                        out.failed_pairs
                    ));
                }
            }
            Err(e) => {
                timings.refine_ms = elapsed_ms(start);
                return done(TrialStatus::RefinementFailure, e.to_string(), timings, audit);
            }
        }
    }

    let start = Instant::now();
    let scored = (|| -> Result<(RecoveryReport, ConsistencyScore)> {
        let zhat = decoder.estimate_latents(&observed[0])?;
        let mut report = recover::analyze_against_truth(&decoder, &mixing, &truth_dag)?;
        report.hard_refined = hard;
        report.unmixing_coeffs = unmixing.clone();
        let score = if hard {
            metrics::scaling_consistency(&latents[0], &zhat, &decoder.dag_hat, &truth_dag)?
        } else {
            metrics::mixing_consistency(&latents[0], &zhat, &decoder.dag_hat, &truth_dag, &surround)?
        };
        Ok((report, score))
    })();
    timings.score_ms = elapsed_ms(start);
    match scored {
        Ok((report, score)) => Ok(TrialResult {
            trial,
            status,
            failure,
            audit,
            recovery: Some(report),
            score: Some(score),
            timings,
        }),
        Err(e) => done(TrialStatus::RefinementFailure, e.to_string(), timings, audit),
    }
}

/// Aggregate rates and mean scores for one batch. Means are taken over the
/// trials that produced a consistency score and are absent when none did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub trials: usize,
    pub success: usize,
    pub identifiability_failure: usize,
    pub refinement_failure: usize,
    pub success_rate: f64,
    /// Fraction of trials whose assumption audit fully passed.
    pub audit_pass_rate: f64,
    /// Trials that produced a consistency score.
    pub scored: usize,
    pub dag_exact_rate: Option<f64>,
    pub mean_shd: Option<f64>,
    pub mean_min_corr: Option<f64>,
    pub mean_mixing_residual: Option<f64>,
    pub consistency_pass_rate: Option<f64>,
}

impl BatchSummary {
    /// The JSON persisted as `summary.json`.
    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }
}

/// Counted rates and means over a slice of trial results.
pub fn summarize(results: &[TrialResult]) -> BatchSummary {
    let trials = results.len();
    let count = |s: TrialStatus| results.iter().filter(|r| r.status == s).count();
    let success = count(TrialStatus::Success);
    let audits = results.iter().filter(|r| r.audit.all_pass()).count();
    let scores: Vec<&ConsistencyScore> = results.iter().filter_map(|r| r.score.as_ref()).collect();
    let scored = scores.len();
    let frac = |k: usize, of: usize| {
        if of == 0 {
            0.0
        } else {
            k as f64 / of as f64
        }
    };
    let mean = |f: &dyn Fn(&ConsistencyScore) -> f64| {
        if scored == 0 {
            None
        } else {
            Some(scores.iter().map(|s| f(s)).sum::<f64>() / scored as f64)
        }
    };
    BatchSummary {
        trials,
        success,
        identifiability_failure: count(TrialStatus::IdentifiabilityFailure),
        refinement_failure: count(TrialStatus::RefinementFailure),
        success_rate: frac(success, trials),
        audit_pass_rate: frac(audits, trials),
        scored,
        dag_exact_rate: mean(&|s| if s.dag_exact { 1.0 } else { 0.0 }),
        mean_shd: mean(&|s| s.shd as f64),
        mean_min_corr: mean(&|s| s.min_corr()),
        mean_mixing_residual: mean(&|s| s.mixing_residual),
        consistency_pass_rate: mean(&|s| if s.passes() { 1.0 } else { 0.0 }),
    }
}

/// The aggregate CSV persisted as `results.csv`: one row per trial, score
/// columns empty when a trial produced no score, floats written with enough
/// digits to reproduce the exact values.
pub fn results_csv(results: &[TrialResult]) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("trial,status,dag_exact,shd,min_corr,mixing_residual,order\n");
    for r in results {
        write!(out, "{},{}", r.trial, r.status.as_str()).unwrap();
        match &r.score {
            Some(s) => {
                let order: Vec<String> =
                    s.matched_order.seq().iter().map(|i| i.to_string()).collect();
                write!(
                    out,
                    ",{},{},{:.16e},{:.16e},{}",
                    s.dag_exact,
                    s.shd,
                    s.min_corr(),
                    s.mixing_residual,
                    order.join("-")
                )
                .unwrap();
            }
            None => out.push_str(",,,,,"),
        }
        out.push('\n');
    }
    out
}

/// One labeled row of an aggregate report, recomputed from a persisted
/// `results.csv`. Mean fields are absent when no trial carried a score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CsvAggregate {
    pub label: String,
    pub trials: usize,
    pub success_rate: f64,
    pub dag_exact_rate: Option<f64>,
    pub mean_shd: Option<f64>,
    pub mean_min_corr: Option<f64>,
    pub mean_mixing_residual: Option<f64>,
}

/// Recompute batch rates from the text of a `results.csv`.
pub fn aggregate_results_csv(label: &str, text: &str) -> Result<CsvAggregate> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != "trial,status,dag_exact,shd,min_corr,mixing_residual,order" {
        return Err(Error::Structural(format!(
            "unrecognized results header `{header}`"
        )));
    }
    let mut trials = 0usize;
    let mut success = 0usize;
    let mut scored = 0usize;
    let mut dag_exact = 0usize;
    let (mut shd_sum, mut corr_sum, mut residual_sum) = (0.0, 0.0, 0.0);
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Structural(format!(
                "line {}: expected 7 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        trials += 1;
        if fields[1] == TrialStatus::Success.as_str() {
            success += 1;
        }
        if fields[2].is_empty() {
            continue;
        }
        let bad = |what: &str| {
            Error::Structural(format!("line {}: unreadable {what} `{line}`", lineno + 2))
        };
        scored += 1;
        dag_exact += usize::from(fields[2] == "true");
        shd_sum += fields[3].parse::<f64>().map_err(|_| bad("shd"))?;
        corr_sum += fields[4].parse::<f64>().map_err(|_| bad("min_corr"))?;
        residual_sum += fields[5]
            .parse::<f64>()
            .map_err(|_| bad("mixing_residual"))?;
    }
    let over_scored = |sum: f64| (scored > 0).then(|| sum / scored as f64);
    Ok(CsvAggregate {
        label: label.to_string(),
        trials,
        success_rate: if trials == 0 {
            0.0
        } else {
            success as f64 / trials as f64
        },
        dag_exact_rate: over_scored(dag_exact as f64),
        mean_shd: over_scored(shd_sum),
        mean_min_corr: over_scored(corr_sum),
        mean_mixing_residual: over_scored(residual_sum),
    })
}

/// Resolve the worker-pool size from an optional `SCALEI_THREADS` override
/// and the configured value; absent both, every logical core is used.
pub fn resolve_threads(env_override: Option<&str>, configured: Option<usize>) -> Result<usize> {
    if let Some(text) = env_override {
        return match text.trim().parse::<usize>() {
            Ok(k) if k >= 1 => Ok(k),
            _ => Err(Error::Config(format!(
                "SCALEI_THREADS must be a positive integer, got `{text}`"
            ))),
        };
    }
    if let Some(k) = configured {
        return Ok(k);
    }
    Ok(std::thread::available_parallelism().map_or(1, |k| k.get()))
}

/// Worker-pool size for a configuration, honoring the environment override.
pub fn thread_count(cfg: &ExperimentConfig) -> Result<usize> {
    let env = std::env::var("SCALEI_THREADS").ok();
    resolve_threads(env.as_deref(), cfg.threads)
}

fn with_path(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

fn panic_text(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        format!("panicked: {s}")
    } else if let Some(s) = payload.downcast_ref::<String>() {
        format!("panicked: {s}")
    } else {
        "panicked".into()
    }
}

/// Run every trial of a configuration on a bounded worker pool and persist
/// the artifacts under `cfg.output_dir`: `trial_<t>.json` per trial,
/// `results.csv`, and `summary.json`. Trials are independent and each
/// writes only its own file, so one trial crashing leaves every other
/// trial's output intact; crashed trials surface as an error after the
/// rest have been persisted.
pub fn run_batch(cfg: &ExperimentConfig) -> Result<(BatchSummary, Vec<TrialResult>)> {
    cfg.validate()?;
    let threads = thread_count(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build a {threads}-thread worker pool: {e}")))?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| with_path(&cfg.output_dir, e))?;

    let outcomes: Vec<std::result::Result<TrialResult, String>> = pool.install(|| {
        (0..cfg.trials)
            .into_par_iter()
            .map(|t| {
                catch_unwind(AssertUnwindSafe(|| run_trial(cfg, t)))
                    .map_err(panic_text)
                    .and_then(|r| r.map_err(|e| e.to_string()))
            })
            .collect()
    });

    let mut results = Vec::with_capacity(outcomes.len());
    let mut crashed = Vec::new();
    for (t, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(result) => {
                let path = cfg.output_dir.join(dataset::trial_file_name(t));
                std::fs::write(&path, result.to_json()?).map_err(|e| with_path(&path, e))?;
                results.push(result);
            }
            Err(msg) => crashed.push(format!("trial {t}: {msg}")),
        }
    }
    if !crashed.is_empty() {
        return Err(Error::Domain(format!(
            "{} of {} trials crashed — {}",
            crashed.len(),
            cfg.trials,
            crashed.join("; ")
        )));
    }

    let csv_path = cfg.output_dir.join("results.csv");
    std::fs::write(&csv_path, results_csv(&results)).map_err(|e| with_path(&csv_path, e))?;
    let summary = summarize(&results);
    let summary_path = cfg.output_dir.join("summary.json");
    std::fs::write(&summary_path, summary.to_json()?).map_err(|e| with_path(&summary_path, e))?;
    Ok((summary, results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::Verdict;
    use crate::graph::CausalOrder;

    fn test_dir(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("scalei_harness_{name}_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        dir
    }

    fn chain_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig::parse_str(&format!(
            "n = 3\n\
             graph_kind = chain\n\
             mechanism = quadratic\n\
             intervention = hard\n\
             samples_per_env = 4000\n\
             trials = 2\n\
             seed = 11\n\
             threads = 2\n\
             output_dir = {}\n",
            dir.display()
        ))
        .unwrap()
    }

    #[test]
    fn hard_chain_trial_succeeds_with_the_exact_graph() {
        let cfg = chain_config(Path::new("unused"));
        let result = run_trial(&cfg, 0).unwrap();
        assert_eq!(result.status, TrialStatus::Success, "{:?}", result.failure);
        let score = result.score.as_ref().unwrap();
        assert!(score.dag_exact);
        assert!(score.passes(), "min corr {}", score.min_corr());
        assert!(result.recovery.as_ref().unwrap().hard_refined);
        assert!(result.audit.all_pass());
    }

    #[test]
    fn linear_diamond_is_an_identifiability_failure() {
        let cfg = ExperimentConfig::parse_str(
            "n = 4\n\
             graph_kind = diamond\n\
             mechanism = linear\n\
             intervention = soft\n\
             samples_per_env = 1500\n\
             seed = 3\n",
        )
        .unwrap();
        let result = run_trial(&cfg, 0).unwrap();
        assert_eq!(result.status, TrialStatus::IdentifiabilityFailure);
        assert!(result.failure.is_some());
        assert!(result.score.is_none());
        // The audit predicts the failure: the collider's gradient system
        // cannot reach full rank under linear mechanisms.
        assert_eq!(result.audit.verdicts[3], Verdict::Fail);
    }

    #[test]
    fn trial_json_is_identical_across_reruns() {
        let cfg = chain_config(Path::new("unused"));
        let a = run_trial(&cfg, 1).unwrap();
        let b = run_trial(&cfg, 1).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        // The round trip preserves everything but the timings.
        let back: TrialResult = serde_json::from_str(&a.to_json().unwrap()).unwrap();
        assert_eq!(back.status, a.status);
        assert_eq!(back.timings, StageTimings::default());
    }

    #[test]
    fn success_implies_populated_reports() {
        let cfg = chain_config(Path::new("unused"));
        let result = run_trial(&cfg, 0).unwrap();
        if result.status == TrialStatus::Success {
            assert!(result.recovery.is_some() && result.score.is_some());
        }
    }

    #[test]
    fn batch_writes_every_artifact() {
        let dir = test_dir("artifacts");
        let cfg = chain_config(&dir);
        let (summary, results) = run_batch(&cfg).unwrap();
        assert_eq!(summary.trials, 2);
        assert_eq!(results.len(), 2);
        for t in 0..2 {
            let text = std::fs::read_to_string(dir.join(dataset::trial_file_name(t))).unwrap();
            let back: TrialResult = serde_json::from_str(&text).unwrap();
            assert_eq!(back.trial, t);
        }
        let csv = std::fs::read_to_string(dir.join("results.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("trial,status,dag_exact,shd,min_corr,mixing_residual,order\n"));
        let summary_back: BatchSummary =
            serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap())
                .unwrap();
        assert_eq!(summary_back, summary);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn reruns_and_thread_counts_do_not_change_the_artifacts() {
        let dir_a = test_dir("rerun_a");
        let dir_b = test_dir("rerun_b");
        let mut cfg_a = chain_config(&dir_a);
        cfg_a.threads = Some(1);
        let mut cfg_b = chain_config(&dir_b);
        cfg_b.threads = Some(3);
        run_batch(&cfg_a).unwrap();
        run_batch(&cfg_b).unwrap();
        let csv_a = std::fs::read_to_string(dir_a.join("results.csv")).unwrap();
        let csv_b = std::fs::read_to_string(dir_b.join("results.csv")).unwrap();
        assert_eq!(csv_a, csv_b);
        for t in 0..2 {
            let name = dataset::trial_file_name(t);
            assert_eq!(
                std::fs::read_to_string(dir_a.join(&name)).unwrap(),
                std::fs::read_to_string(dir_b.join(&name)).unwrap()
            );
        }
        std::fs::remove_dir_all(&dir_a).unwrap();
        std::fs::remove_dir_all(&dir_b).unwrap();
    }

    #[test]
    fn single_trial_summary_equals_that_trial() {
        let dir = test_dir("single");
        let mut cfg = chain_config(&dir);
        cfg.trials = 1;
        let (summary, results) = run_batch(&cfg).unwrap();
        assert_eq!(summary.trials, 1);
        let score = results[0].score.as_ref().unwrap();
        assert_eq!(summary.mean_min_corr, Some(score.min_corr()));
        assert_eq!(summary.mean_shd, Some(score.shd as f64));
        assert_eq!(summary.success_rate, 1.0);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn rates_are_counted_fractions() {
        let dummy_audit = AuditReport {
            coverage_ok: true,
            regularity: vec![None],
            vmatrix_ranks: vec![None],
            nn_ranks: vec![None],
            verdicts: vec![Verdict::NotApplicable],
            witnesses: vec![None],
        };
        let score = ConsistencyScore {
            matched_order: CausalOrder::identity(1),
            per_node_corr: vec![1.0],
            mixing_residual: 0.0,
            dag_exact: true,
            shd: 0,
        };
        let make = |trial, status, with_score: bool| TrialResult {
            trial,
            status,
            failure: None,
            audit: dummy_audit.clone(),
            recovery: None,
            score: with_score.then(|| score.clone()),
            timings: StageTimings::default(),
        };
        let results = vec![
            make(0, TrialStatus::Success, true),
            make(1, TrialStatus::IdentifiabilityFailure, false),
            make(2, TrialStatus::RefinementFailure, true),
            make(3, TrialStatus::Success, true),
        ];
        let summary = summarize(&results);
        assert_eq!(summary.success, 2);
        assert_eq!(summary.identifiability_failure, 1);
        assert_eq!(summary.refinement_failure, 1);
        assert_eq!(summary.success_rate, 0.5);
        assert_eq!(summary.scored, 3);
        assert_eq!(summary.dag_exact_rate, Some(1.0));
        assert_eq!(summary.audit_pass_rate, 1.0);
        let csv = results_csv(&results);
        let failed_row = csv.lines().nth(2).unwrap();
        assert_eq!(failed_row, "1,identifiability_failure,,,,,");
    }

    #[test]
    fn csv_aggregation_matches_the_direct_summary() {
        let dir = test_dir("aggregate");
        let cfg = chain_config(&dir);
        let (summary, results) = run_batch(&cfg).unwrap();
        let csv = results_csv(&results);
        let agg = aggregate_results_csv("chain", &csv).unwrap();
        assert_eq!(agg.trials, summary.trials);
        assert_eq!(agg.success_rate, summary.success_rate);
        assert_eq!(agg.dag_exact_rate, summary.dag_exact_rate);
        assert_eq!(agg.mean_shd, summary.mean_shd);
        // Means recomputed from 17-digit text agree to round-off.
        let close = |a: Option<f64>, b: Option<f64>| (a.unwrap() - b.unwrap()).abs() < 1e-12;
        assert!(close(agg.mean_min_corr, summary.mean_min_corr));
        assert!(close(agg.mean_mixing_residual, summary.mean_mixing_residual));
        assert!(aggregate_results_csv("x", "wrong,header\n").is_err());
        assert!(aggregate_results_csv(
            "x",
            "trial,status,dag_exact,shd,min_corr,mixing_residual,order\n0,success,true,oops,1,1,0\n"
        )
        .is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn thread_resolution_prefers_the_environment() {
        assert_eq!(resolve_threads(Some("6"), Some(2)).unwrap(), 6);
        assert_eq!(resolve_threads(None, Some(2)).unwrap(), 2);
        assert!(resolve_threads(None, None).unwrap() >= 1);
        assert!(resolve_threads(Some("0"), None).is_err());
        assert!(resolve_threads(Some("many"), None).is_err());
    }
}
