//! Command-line front end: simulate datasets, audit model assumptions,
//! recover from a dataset directory, run experiment batches, and aggregate
//! result files into report tables.
//!
//! Exit codes: 0 on success, 2 on configuration or usage errors, 3 when
//! `experiment --strict` saw a failed trial, 1 on any other failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scalei::audit;
use scalei::config::ExperimentConfig;
use scalei::dataset;
use scalei::harness::{self, CsvAggregate, TrialModel};
use scalei::metrics;
use scalei::recover::{self, RecoveryConfig, RecoveryReport};
use scalei::score::ScoreOracle;
use scalei::{graph, Error, Result};

#[derive(Parser)]
#[command(
    name = "scalei",
    version,
    about = "Latent causal model recovery from interventional score data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the datasets of a configuration, one directory per trial.
    Simulate {
        /// Experiment configuration file (key=value or JSON).
        #[arg(long)]
        config: PathBuf,
        /// Write datasets here instead of the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write exact observed scores as S_<m>.csv.
        #[arg(long)]
        scores: bool,
    },
    /// Check the identifiability assumptions of a configured model.
    Audit {
        /// Experiment configuration file (key=value or JSON).
        #[arg(long)]
        config: PathBuf,
        /// Trial index whose model is audited.
        #[arg(long, default_value_t = 0)]
        trial: usize,
        /// Probe points per node for the regularity check.
        #[arg(long, default_value_t = audit::DEFAULT_REGULARITY_PROBES)]
        probes: usize,
    },
    /// Recover the latent graph and decoder from a dataset directory.
    Recover {
        /// Dataset directory holding meta.json and the environment CSVs.
        #[arg(long)]
        data: PathBuf,
        /// Also compare against the generating truth stored in the dataset.
        #[arg(long)]
        truth: bool,
    },
    /// Run every trial of a configuration and persist the results.
    Experiment {
        /// Experiment configuration file (key=value or JSON).
        #[arg(long)]
        config: PathBuf,
        /// Exit with status 3 if any trial fails.
        #[arg(long)]
        strict: bool,
    },
    /// Aggregate results.csv files into a summary table.
    Report {
        /// results.csv files, or directories containing one.
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// Also write the table as tab-separated values to this file.
        #[arg(long)]
        tsv: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Simulate {
            config,
            out,
            scores,
        } => simulate(&config, out, scores),
        Command::Audit {
            config,
            trial,
            probes,
        } => audit_command(&config, trial, probes),
        Command::Recover { data, truth } => recover_command(&data, truth),
        Command::Experiment { config, strict } => experiment(&config, strict),
        Command::Report { results, tsv } => report(&results, tsv.as_deref()),
    }
}

fn simulate(config: &Path, out: Option<PathBuf>, scores: bool) -> Result<ExitCode> {
    let mut cfg = ExperimentConfig::from_file(config)?;
    if let Some(dir) = out {
        cfg.output_dir = dir;
    }
    for t in 0..cfg.trials {
        let TrialModel { root, envs, mixing } = harness::trial_model(&cfg, t)?;
        let (latents, observed) =
            harness::sample_environments(&envs, &mixing, cfg.samples_per_env, root)?;
        let score_blocks = if scores {
            let oracle = ScoreOracle::new(envs.clone(), mixing.clone())?;
            let mut blocks = Vec::with_capacity(observed.len());
            for (m, x) in observed.iter().enumerate() {
                blocks.push(oracle.score_batch(m, x)?);
            }
            Some(blocks)
        } else {
            None
        };
        let dir = dataset::trial_dir(&cfg.output_dir, t);
        dataset::write_dataset(
            &dir,
            &envs,
            &mixing,
            root,
            &latents,
            &observed,
            score_blocks.as_deref(),
        )?;
        println!(
            "trial {t}: {} environments x {} samples -> {}",
            envs.len(),
            cfg.samples_per_env,
            dir.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn audit_command(config: &Path, trial: usize, probes: usize) -> Result<ExitCode> {
    let cfg = ExperimentConfig::from_file(config)?;
    let TrialModel { root, envs, .. } = harness::trial_model(&cfg, trial)?;
    let report = audit::audit_environments(&envs, probes, root);
    println!(
        "coverage: {} ({} environments over {} nodes)",
        if report.coverage_ok { "ok" } else { "FAIL" },
        envs.len(),
        envs.n()
    );
    println!(
        "{:<6}{:<6}{:<12}{:<15}{:<13}{:<8}notes",
        "node", "env", "regularity", "gradient-rank", "first-layer", "verdict"
    );
    let dash = "-".to_string();
    for i in 0..report.n() {
        let env = (1..envs.len()).find(|&m| envs.target(m) == i).unwrap_or(0);
        let regularity = report.regularity[i]
            .map(|f| format!("{f:.3}"))
            .unwrap_or_else(|| dash.clone());
        let rank = |check: &Option<audit::RankCheck>| {
            check
                .as_ref()
                .map(|c| format!("{}/{}", c.achieved, c.required))
                .unwrap_or_else(|| dash.clone())
        };
        let verdict = match report.verdicts[i] {
            audit::Verdict::Pass => "pass",
            audit::Verdict::Fail => "FAIL",
            audit::Verdict::NotApplicable => "n/a",
        };
        println!(
            "{:<6}{:<6}{:<12}{:<15}{:<13}{:<8}{}",
            i,
            env,
            regularity,
            rank(&report.vmatrix_ranks[i]),
            rank(&report.nn_ranks[i]),
            verdict,
            report.witnesses[i].as_deref().unwrap_or("")
        );
    }
    println!(
        "overall: {}",
        if report.all_pass() {
            "all assumptions hold"
        } else {
            "assumption violations found"
        }
    );
    Ok(ExitCode::SUCCESS)
}

fn recover_command(data: &Path, truth: bool) -> Result<ExitCode> {
    let ds = dataset::load_dataset(data)?;
    let envs = ds.meta.environments.clone();
    let mixing = ds.meta.mixing.clone();
    let oracle = ScoreOracle::new(envs.clone(), mixing.clone())?;
    let rcfg = RecoveryConfig::default();
    let mut decoder = recover::soft_recover(&oracle, &ds.observed[0], &rcfg)?;
    let surround = graph::surround_map(envs.dag());
    let mut hard_outcome = None;
    if envs.is_hard() {
        let outcome = recover::hard_refine(&decoder, &ds.observed, &surround, &rcfg)?;
        decoder = outcome.decoder.clone();
        hard_outcome = Some(outcome);
    }

    println!("recovered graph:");
    print!("{}", dataset::graph_to_text(&decoder.dag_hat));
    println!("causal order: {}", order_text(decoder.order.seq()));
    println!(
        "environment for node i: {:?}",
        (0..decoder.n()).map(|i| decoder.env_of_node(i)).collect::<Vec<_>>()
    );
    println!("subspace dimensions: {:?}", decoder.subspace_dims);
    if decoder.used_fallback {
        println!("note: the peel used the forced-ordering fallback");
    }
    if let Some(out) = &hard_outcome {
        println!("hard refinement: {} coefficient(s) removed", out.unmixing.len());
        for u in &out.unmixing {
            println!("  node {} minus {:.6} x node {}", u.node, u.beta, u.parent);
        }
        if !out.failed_pairs.is_empty() {
            println!("  WARNING: residual dependence for pairs {:?}", out.failed_pairs);
        }
    }

    if truth {
        let mut report = recover::analyze_against_truth(&decoder, &mixing, envs.dag())?;
        report.hard_refined = hard_outcome.is_some();
        if let Some(out) = hard_outcome {
            report.unmixing_coeffs = out.unmixing;
        }
        print_truth_report(&report);
        let zhat = decoder.estimate_latents(&ds.observed[0])?;
        let score = if envs.is_hard() {
            metrics::scaling_consistency(&ds.latents[0], &zhat, &decoder.dag_hat, envs.dag())?
        } else {
            metrics::mixing_consistency(
                &ds.latents[0],
                &zhat,
                &decoder.dag_hat,
                envs.dag(),
                &surround,
            )?
        };
        println!(
            "consistency: min |corr| {:.6}, mixing residual {:.3e}, dag exact {}, shd {}",
            score.min_corr(),
            score.mixing_residual,
            score.dag_exact,
            score.shd
        );
        println!(
            "verdict: {}",
            if score.passes() {
                "recovered up to permutation and scale"
            } else {
                "recovery does not meet the consistency thresholds"
            }
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn print_truth_report(report: &RecoveryReport) {
    if let Some(det) = report.det_h {
        println!("latent coefficient matrix: |det H| = {:.3e}", det.abs());
    }
    if let Some(p1) = &report.p1 {
        println!("row alignment to true nodes: {}", order_text(p1));
    }
    if let Some(masks) = report.lemma_masks_hold {
        println!(
            "sparsity masks: {}",
            if masks { "respected" } else { "VIOLATED" }
        );
    }
    if let Some(c) = &report.c_diag {
        let text: Vec<String> = c.iter().map(|v| format!("{v:.4}")).collect();
        println!("per-node scales: [{}]", text.join(", "));
    }
    if let Some(b) = report.b_residual {
        println!("disallowed mixing residual: {b:.3e}");
    }
}

fn experiment(config: &Path, strict: bool) -> Result<ExitCode> {
    let cfg = ExperimentConfig::from_file(config)?;
    let threads = harness::thread_count(&cfg)?;
    println!(
        "running {} trial(s) on {} worker thread(s) -> {}",
        cfg.trials,
        threads,
        cfg.output_dir.display()
    );
    let (summary, results) = harness::run_batch(&cfg)?;
    for r in &results {
        let note = r.failure.as_deref().unwrap_or("");
        println!(
            "trial {}: {} [{:.0} ms] {}",
            r.trial,
            r.status.as_str(),
            r.timings.total_ms(),
            note
        );
    }
    println!(
        "summary: {}/{} succeeded, audit pass rate {:.2}",
        summary.success, summary.trials, summary.audit_pass_rate
    );
    if let (Some(corr), Some(residual)) = (summary.mean_min_corr, summary.mean_mixing_residual) {
        println!("mean min |corr| {corr:.6}, mean mixing residual {residual:.3e}");
    }
    println!("wrote {}", cfg.output_dir.join("summary.json").display());
    if strict && summary.success < summary.trials {
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn report(paths: &[PathBuf], tsv: Option<&Path>) -> Result<ExitCode> {
    let mut rows: Vec<CsvAggregate> = Vec::with_capacity(paths.len());
    for path in paths {
        let csv_path = if path.is_dir() {
            path.join("results.csv")
        } else {
            path.clone()
        };
        let text = std::fs::read_to_string(&csv_path).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", csv_path.display()))
        })?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        rows.push(harness::aggregate_results_csv(&label, &text)?);
    }

    let columns = [
        "label",
        "trials",
        "success_rate",
        "dag_exact_rate",
        "mean_shd",
        "mean_min_corr",
        "mean_mixing_residual",
    ];
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
    let table: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                r.trials.to_string(),
                format!("{:.6}", r.success_rate),
                cell(r.dag_exact_rate),
                cell(r.mean_shd),
                cell(r.mean_min_corr),
                cell(r.mean_mixing_residual),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = columns.iter().map(|c| c.len()).collect();
    for row in &table {
        for (w, value) in widths.iter_mut().zip(row.iter()) {
            *w = (*w).max(value.len());
        }
    }
    let print_row = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(value, w)| format!("{value:<w$}"))
            .collect();
        println!("{}", padded.join("  ").trim_end());
    };
    print_row(&columns.map(String::from));
    for row in &table {
        print_row(row.as_slice());
    }

    if let Some(path) = tsv {
        let mut text = columns.join("\t");
        text.push('\n');
        for row in &table {
            text.push_str(&row.join("\t"));
            text.push('\n');
        }
        std::fs::write(path, text)
            .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn order_text(seq: &[usize]) -> String {
    let parts: Vec<String> = seq.iter().map(|i| i.to_string()).collect();
    parts.join("-")
}
