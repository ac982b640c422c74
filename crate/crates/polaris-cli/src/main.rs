//! Command-line front end: suite generation, scenario runs, evaluation,
//! and trace replay.
//!
//! Exit codes: 0 success, 1 configuration error, 2 run failure,
//! 3 evaluation mismatch.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use polaris::executor::ExecutionMode;
use polaris::harness::{
    build_report, emit_outputs, generate_bundle, load_suite, recheck_run_dir, render_report,
    run_scenario, save_suite, Scenario, SuiteConfig,
};
use polaris::trace::{replay, ExecutionTrace};
use polaris::EngineConfig;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "polaris", version, about = "Governed workflow orchestration engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Concurrent,
    Serialized,
}

impl From<ModeArg> for ExecutionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Concurrent => ExecutionMode::Concurrent,
            ModeArg::Serialized => ExecutionMode::Serialized,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Table,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic suite (documents, ground truth, policy store).
    GenSuite {
        /// CC, CM, VU, VL, or "all".
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Invoices per scenario.
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Run a suite through the plan-select-act loop and emit artifacts.
    Run {
        #[arg(long)]
        suite: PathBuf,
        /// Output directory for records, decisions, traces, and metrics.
        #[arg(long)]
        trace: PathBuf,
        /// Engine configuration overrides (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ModeArg::Concurrent)]
        mode: ModeArg,
    },
    /// Recompute metric tables against ground truth and verify the run's
    /// emitted metrics.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Suite directory holding truth.json.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Table)]
        format: FormatArg,
    },
    /// Re-execute a trace in serialized mode and verify the decision and
    /// final store reproduce.
    Replay {
        #[arg(long)]
        trace: PathBuf,
    },
}

fn scenario_list(arg: &str) -> Result<Vec<Scenario>> {
    if arg.eq_ignore_ascii_case("all") {
        return Ok(Scenario::ALL.to_vec());
    }
    match Scenario::parse(arg) {
        Some(s) => Ok(vec![s]),
        None => bail!("unknown scenario {arg:?}; expected CC, CM, VU, VL, or all"),
    }
}

fn is_suite_dir(dir: &Path) -> bool {
    dir.join("config.json").exists()
}

fn suite_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if is_suite_dir(root) {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    for scenario in Scenario::ALL {
        let candidate = root.join(scenario.code());
        if is_suite_dir(&candidate) {
            dirs.push(candidate);
        }
    }
    if dirs.is_empty() {
        bail!("{} is not a suite directory (no config.json found)", root.display());
    }
    Ok(dirs)
}

fn cmd_gen_suite(scenario: &str, seed: u64, out: &Path, count: usize) -> Result<()> {
    let scenarios = scenario_list(scenario)?;
    let multi = scenarios.len() > 1;
    for s in scenarios {
        let mut cfg = SuiteConfig::for_scenario(s, seed);
        cfg.invoices_per_scenario = count;
        if cfg.anomaly_injections.count > count {
            cfg.anomaly_injections.count = count;
        }
        let bundle = generate_bundle(&cfg).context("suite generation")?;
        let dir = if multi { out.join(s.code()) } else { out.to_path_buf() };
        save_suite(&bundle, &dir).context("writing suite")?;
        println!(
            "wrote {} suite: {} documents, {} violation labels, {} anomaly labels -> {}",
            s,
            bundle.documents.len(),
            bundle.truth.invoices.iter().filter(|t| t.has_violation()).count(),
            bundle.truth.invoices.iter().filter(|t| t.has_anomaly()).count(),
            dir.display()
        );
    }
    Ok(())
}

fn cmd_run(suite: &Path, trace_out: &Path, config: Option<&Path>, mode: ModeArg) -> Result<()> {
    let engine_config = match config {
        Some(path) => EngineConfig::load(path)
            .map_err(|e| anyhow::anyhow!("loading engine config: {e}"))?,
        None => EngineConfig::default(),
    };
    let dirs = suite_dirs(suite)?;
    let multi = dirs.len() > 1;
    let mut pairs = Vec::new();
    for dir in &dirs {
        let bundle = load_suite(dir).context("loading suite")?;
        let run = run_scenario(&bundle, &engine_config, mode.into());
        let out_dir = if multi {
            trace_out.join(bundle.config.scenario.code())
        } else {
            trace_out.to_path_buf()
        };
        std::fs::create_dir_all(&out_dir)?;
        engine_config
            .save(&out_dir.join("run_config.json"))
            .map_err(|e| anyhow::anyhow!("writing run config: {e}"))?;
        emit_outputs(&run, &bundle.truth, &out_dir).context("emitting outputs")?;
        let approvals = run
            .outcomes
            .iter()
            .filter(|o| matches!(o.decision.decision, polaris::DecisionKind::Approve))
            .count();
        println!(
            "{}: {} documents, {} approvals -> {}",
            bundle.config.scenario,
            run.outcomes.len(),
            approvals,
            out_dir.display()
        );
        pairs.push((run, bundle.truth));
    }
    if multi {
        let refs: Vec<_> = pairs.iter().map(|(r, t)| (r, t)).collect();
        let report = build_report(&refs);
        std::fs::write(
            trace_out.join("metrics.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
        std::fs::write(trace_out.join("metrics.txt"), render_report(&report))?;
        println!("{}", render_report(&report));
    }
    Ok(())
}

fn cmd_eval(run: &Path, truth_dir: &Path, format: FormatArg) -> Result<bool> {
    let suite_roots = suite_dirs(truth_dir)?;
    let mut all_match = true;
    let mut reports = Vec::new();
    for suite in &suite_roots {
        let bundle = load_suite(suite).context("loading suite")?;
        let run_dir = if suite_roots.len() > 1 {
            run.join(bundle.config.scenario.code())
        } else {
            run.to_path_buf()
        };
        let (report, matches) =
            recheck_run_dir(&run_dir, &bundle.truth).context("rechecking run")?;
        all_match &= matches;
        reports.push((bundle.config.scenario, report, matches));
    }
    for (scenario, report, matches) in &reports {
        match format {
            FormatArg::Table => {
                println!("== {scenario} ==");
                println!("{}", render_report(report));
                println!("emitted metrics {}", if *matches { "verified" } else { "MISMATCH" });
            }
            FormatArg::Json => {
                println!(
                    "{}",
                    serde_json::json!({
                        "scenario": scenario.code(),
                        "report": report,
                        "emitted_metrics_match": matches,
                    })
                );
            }
        }
    }
    Ok(all_match)
}

fn cmd_replay(trace_path: &Path) -> Result<bool> {
    let trace = ExecutionTrace::load(trace_path)
        .map_err(|e| anyhow::anyhow!("loading trace: {e}"))?;
    let report = replay(&trace).map_err(|e| anyhow::anyhow!("replaying: {e}"))?;
    println!(
        "trace {}: decision {} store {}",
        report.trace_id,
        if report.decision_match { "reproduced" } else { "DIVERGED" },
        if report.store_match { "reproduced" } else { "DIVERGED" },
    );
    if let Some(detail) = &report.mismatch_detail {
        println!("  {detail}");
    }
    Ok(report.matches())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenSuite { scenario, seed, out, count } => {
            match cmd_gen_suite(scenario, *seed, out, *count) {
                Ok(()) => 0,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    1
                }
            }
        }
        Command::Run { suite, trace, config, mode } => {
            match cmd_run(suite, trace, config.as_deref(), *mode) {
                Ok(()) => 0,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    2
                }
            }
        }
        Command::Eval { run, truth, format } => match cmd_eval(run, truth, *format) {
            Ok(true) => 0,
            Ok(false) => 3,
            Err(e) => {
                eprintln!("error: {e:#}");
                1
            }
        },
        Command::Replay { trace } => match cmd_replay(trace) {
            Ok(true) => 0,
            Ok(false) => 2,
            Err(e) => {
                eprintln!("error: {e:#}");
                2
            }
        },
    };
    ExitCode::from(result)
}
