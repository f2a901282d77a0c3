//! Command-line front end.
//!
//! Exit statuses: 0 success, 1 usage or input error, 2 job or simulator
//! failure, 3 finished without every point converging.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{
    build_scorecard, emit_plotdata, metrics_csv, render_table, scorecard_csv, scorecard_table,
    summarize_sweep, AnalysisOptions, CampaignData, SignificanceTest,
};
use crate::blackbox::{LaunchSpec, SimulatorHandle};
use crate::campaign::{run_campaign, CampaignConfig, Direction, JobStatus, RunOptions};
use crate::conformance::{protocol_check, CheckOptions};
use crate::engine::{run_query, EngineConfig, RunStatus};
use crate::models::BuiltinModel;
use crate::quatex::{expand_parametric, parse};
use crate::stats::StoppingPolicy;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

/// Horizon used when a query has no parametric grid and none is given.
pub const DEFAULT_HORIZON: u64 = 600;

#[derive(Debug, Parser)]
#[command(
    name = "smcsweep",
    version,
    about = "Statistical model checking and sensitivity sweeps for black-box simulators"
)]
pub struct Cli {
    /// Increase log detail (-v info, -vv debug). Logs go to stderr.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate one query's trajectory of expectations.
    RunQuery(RunQueryArgs),
    /// Run every job of a sweep campaign.
    RunCampaign(RunCampaignArgs),
    /// Compute separation metrics, plot data and the scorecard of a campaign.
    Analyze(AnalysisArgs),
    /// Print and write only the cross-experiment scorecard of a campaign.
    Scorecard(AnalysisArgs),
    /// Check that an external simulator speaks the line protocol.
    ProtocolCheck(ProtocolCheckArgs),
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// Simulator: `counter`, `bernoulli:P`, `gaussian:MU,SD`,
    /// `switching[:NAME=VALUE,...]`, or `exec:PATH` for an external binary.
    #[arg(long, default_value = "switching")]
    pub sim: String,
    /// Extra argument passed to an external simulator (repeatable).
    #[arg(long = "sim-arg", allow_hyphen_values = true)]
    pub sim_args: Vec<String>,
    /// Value of `-experimentMV` for an external simulator.
    #[arg(long, default_value_t = 1, allow_hyphen_values = true)]
    pub experiment_id: i64,
    /// Value of `-numMCexpMV` for an external simulator.
    #[arg(long, default_value_t = 1, allow_hyphen_values = true)]
    pub param_index: i64,
    /// Seconds to wait for an external simulator's first response.
    #[arg(long, default_value_t = 60.0)]
    pub startup_timeout: f64,
    /// Seconds to wait for each later response.
    #[arg(long, default_value_t = 30.0)]
    pub response_timeout: f64,
}

#[derive(Debug, Clone)]
enum SimChoice {
    Builtin(BuiltinModel),
    External(LaunchSpec),
}

fn seconds(flag: &str, v: f64) -> Result<Duration, String> {
    Duration::try_from_secs_f64(v)
        .ok()
        .filter(|d| !d.is_zero())
        .ok_or_else(|| format!("--{flag} must be a positive number of seconds"))
}

impl SimArgs {
    fn resolve(&self) -> Result<SimChoice, String> {
        if let Some(path) = self.sim.strip_prefix("exec:") {
            let mut spec = LaunchSpec::new(path);
            spec.args = self.sim_args.clone();
            spec.experiment_id = self.experiment_id;
            spec.param_index = self.param_index;
            spec.startup_timeout = seconds("startup-timeout", self.startup_timeout)?;
            spec.response_timeout = seconds("response-timeout", self.response_timeout)?;
            return Ok(SimChoice::External(spec));
        }
        if !self.sim_args.is_empty() {
            return Err("--sim-arg only applies to `exec:` simulators".into());
        }
        self.sim
            .parse::<BuiltinModel>()
            .map(SimChoice::Builtin)
            .map_err(|e| format!("--sim: {e}"))
    }
}

#[derive(Debug, Args)]
pub struct RunQueryArgs {
    /// Query file.
    #[arg(long)]
    pub query: PathBuf,
    /// Bind a free name of the query to an observable, e.g. `obs=X`
    /// (repeatable).
    #[arg(long = "obs", value_name = "NAME=OBS")]
    pub obs: Vec<String>,
    /// Target confidence-interval half-width.
    #[arg(long)]
    pub delta: f64,
    /// Significance level of the confidence intervals.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Runs between convergence checks.
    #[arg(long, default_value_t = 30)]
    pub block: u64,
    /// Parallel simulator workers.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Master seed from which every run seed is derived.
    #[arg(long, default_value_t = 1)]
    pub seed_of_seeds: u64,
    /// Stop after this many runs even if some points have not converged
    /// [default: no cap].
    #[arg(long)]
    pub max_runs: Option<u64>,
    /// Steps simulated per run [default: the largest grid bound, or 600].
    #[arg(long)]
    pub horizon: Option<u64>,
    /// Write the trajectory CSV here [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Emit block-level progress records on stderr.
    #[arg(long)]
    pub progress: bool,
    #[command(flatten)]
    pub sim: SimArgs,
}

#[derive(Debug, Args)]
pub struct RunCampaignArgs {
    /// Campaign configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for trajectory CSVs and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Emit block-level progress records on stderr.
    #[arg(long)]
    pub progress: bool,
}

#[derive(Debug, Args)]
pub struct AnalysisArgs {
    /// Campaign output directory (containing manifest.json).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Fraction of the grid forming the tail window [default: the
    /// campaign's tail_fraction, itself 0.3 by default].
    #[arg(long)]
    pub tail_frac: Option<f64>,
    /// Significance level of the pairwise tests [default: the campaign's
    /// alpha, itself 0.05 by default].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Trade-off observables as GOOD,BAD [default: the first
    /// higher-is-better and the first lower-is-better observable].
    #[arg(long, value_name = "GOOD,BAD")]
    pub pair: Option<String>,
    /// Call a pair significant when the confidence intervals are disjoint,
    /// instead of using the two-sample z-test.
    #[arg(long)]
    pub ci_overlap: bool,
    /// Output location [default: `<in>/analysis` for analyze,
    /// `<in>/scorecard.csv` for scorecard].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProtocolCheckArgs {
    /// Observable the simulator must answer.
    #[arg(long, default_value = "X")]
    pub observable: String,
    /// Seed for the reset checks.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Value of `-experimentMV` passed to the simulator.
    #[arg(long, default_value_t = 1, allow_hyphen_values = true)]
    pub experiment_id: i64,
    /// Value of `-numMCexpMV` passed to the simulator.
    #[arg(long, default_value_t = 1, allow_hyphen_values = true)]
    pub param_index: i64,
    /// Seconds to wait for each response.
    #[arg(long, default_value_t = 10.0)]
    pub timeout: f64,
    /// Simulator executable followed by its arguments.
    #[arg(long, required = true, num_args = 1.., allow_hyphen_values = true, value_name = "BIN [ARGS...]")]
    pub cmd: Vec<String>,
}

/// A failure mapped to an exit status and a message for stderr.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn failure(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_FAILURE,
        message: message.into(),
    }
}

fn write_output(out: Option<&Path>, contents: &[u8]) -> Result<(), Failure> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)
                    .map_err(|e| failure(format!("{}: {e}", parent.display())))?;
            }
            fs::write(path, contents).map_err(|e| failure(format!("{}: {e}", path.display())))
        }
        None => io::stdout()
            .write_all(contents)
            .map_err(|e| failure(format!("stdout: {e}"))),
    }
}

fn cmd_run_query(args: &RunQueryArgs) -> Result<i32, Failure> {
    let source = fs::read_to_string(&args.query)
        .map_err(|e| usage(format!("{}: {e}", args.query.display())))?;
    let ast = parse(&source).map_err(|e| usage(format!("{}:{e}", args.query.display())))?;
    let mut bindings = BTreeMap::new();
    for b in &args.obs {
        let (name, obs) = b
            .split_once('=')
            .filter(|(n, o)| !n.is_empty() && !o.is_empty())
            .ok_or_else(|| usage(format!("--obs expects NAME=OBS, got `{b}`")))?;
        bindings.insert(name.to_string(), obs.to_string());
    }
    let horizon = args.horizon.unwrap_or_else(|| {
        ast.directives
            .iter()
            .filter_map(|d| d.parametric.as_ref())
            .map(|p| p.hi.max(1) as u64)
            .max()
            .unwrap_or(DEFAULT_HORIZON)
    });
    let plan = expand_parametric(&ast, &bindings, horizon).map_err(|e| usage(e.to_string()))?;
    let policy = StoppingPolicy::new(args.alpha, args.delta, args.block)
        .and_then(|p| p.with_max_runs(args.max_runs))
        .map_err(|e| usage(e.to_string()))?;
    let config = EngineConfig {
        workers: args.workers,
        seed_of_seeds: args.seed_of_seeds,
        policy,
        horizon,
        progress: args.progress,
    };
    let result = match args.sim.resolve().map_err(usage)? {
        SimChoice::Builtin(model) => {
            let declared = model.observables();
            run_query(
                &ast,
                &plan,
                |_| {
                    Ok(SimulatorHandle::in_process(model.instantiate())
                        .with_declared_observables(declared.iter().cloned()))
                },
                &config,
            )
        }
        SimChoice::External(spec) => run_query(
            &ast,
            &plan,
            |_| SimulatorHandle::spawn_external(&spec),
            &config,
        ),
    };
    let result = result.map_err(|e| match e {
        crate::engine::EngineError::InvalidConfig(m) => usage(m),
        other => failure(other.to_string()),
    })?;
    let mut csv = Vec::new();
    result.write_csv(&mut csv).expect("writing to memory");
    write_output(args.out.as_deref(), &csv)?;
    log::info!(
        "{} runs in {:.2} s, status {:?}",
        result.total_runs,
        result.wall_time.as_secs_f64(),
        result.status
    );
    Ok(match result.status {
        RunStatus::Converged => EXIT_OK,
        RunStatus::Partial => {
            eprintln!("warning: run cap reached before every point converged");
            EXIT_PARTIAL
        }
    })
}

fn cmd_run_campaign(args: &RunCampaignArgs) -> Result<i32, Failure> {
    let config = CampaignConfig::load(&args.config)
        .map_err(|e| usage(format!("{}: {e}", args.config.display())))?;
    let outcome = run_campaign(
        &config,
        &args.out,
        RunOptions {
            progress: args.progress,
        },
    )
    .map_err(|e| failure(e.to_string()))?;
    let m = &outcome.manifest;
    let (failed, skipped, partial) = (
        m.count(JobStatus::Failed),
        m.count(JobStatus::Skipped),
        m.count(JobStatus::Partial),
    );
    eprintln!(
        "{} jobs: {} converged, {partial} partial, {failed} failed, {skipped} skipped ({:.1} s)",
        m.jobs.len(),
        m.count(JobStatus::Converged),
        m.wall_time_s
    );
    Ok(if failed + skipped > 0 {
        EXIT_FAILURE
    } else if partial > 0 {
        EXIT_PARTIAL
    } else {
        EXIT_OK
    })
}

type ObservablePair = (String, String);

fn analysis_setup(
    args: &AnalysisArgs,
) -> Result<(CampaignData, AnalysisOptions, Option<ObservablePair>), Failure> {
    let data = CampaignData::load(&args.input).map_err(|e| usage(e.to_string()))?;
    let opts = AnalysisOptions {
        alpha: args.alpha.unwrap_or(data.config.alpha),
        tail_fraction: args.tail_frac.unwrap_or(data.config.tail_fraction),
        test: if args.ci_overlap {
            SignificanceTest::CiOverlap
        } else {
            SignificanceTest::ZTest
        },
    };
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(usage("--alpha must lie in (0, 1)"));
    }
    if !(opts.tail_fraction > 0.0 && opts.tail_fraction <= 1.0) {
        return Err(usage("--tail-frac must lie in (0, 1]"));
    }
    let pair = match &args.pair {
        Some(p) => {
            let (good, bad) = p
                .split_once(',')
                .ok_or_else(|| usage(format!("--pair expects GOOD,BAD, got `{p}`")))?;
            for name in [good, bad] {
                if data.config.observable(name).is_none() {
                    return Err(usage(format!(
                        "--pair: `{name}` is not an observable of the campaign"
                    )));
                }
            }
            Some((good.to_string(), bad.to_string()))
        }
        None => {
            let first = |d: Direction| {
                data.config
                    .observables
                    .iter()
                    .find(|o| o.direction == d)
                    .map(|o| o.name.clone())
            };
            first(Direction::HigherIsBetter).zip(first(Direction::LowerIsBetter))
        }
    };
    Ok((data, opts, pair))
}

fn observable_names(data: &CampaignData) -> Vec<String> {
    data.config
        .observables
        .iter()
        .map(|o| o.name.clone())
        .collect()
}

fn scorecard_outputs(
    data: &CampaignData,
    opts: &AnalysisOptions,
    pair: &ObservablePair,
    csv_path: &Path,
) -> Result<i32, Failure> {
    let rows =
        build_scorecard(data, (&pair.0, &pair.1), opts).map_err(|e| failure(e.to_string()))?;
    let names = observable_names(data);
    write_output(Some(csv_path), scorecard_csv(&rows, &names).as_bytes())?;
    print!("{}", scorecard_table(&rows, &names));
    Ok(if rows.iter().any(|r| r.partial) {
        EXIT_PARTIAL
    } else {
        EXIT_OK
    })
}

fn cmd_analyze(args: &AnalysisArgs) -> Result<i32, Failure> {
    let (data, opts, pair) = analysis_setup(args)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.input.join("analysis"));
    let mut summaries = Vec::new();
    for e in &data.config.experiments {
        for o in &data.config.observables {
            summaries.push(
                summarize_sweep(&data, &e.id, &o.name, &opts)
                    .map_err(|err| failure(format!("{} {}: {err}", e.id, o.name)))?,
            );
        }
    }
    write_output(
        Some(&out.join("metrics.csv")),
        metrics_csv(&summaries).as_bytes(),
    )?;
    let files =
        emit_plotdata(&data, &out.join("plots"), &opts).map_err(|e| failure(e.to_string()))?;
    let header: Vec<String> = [
        "experiment",
        "observable",
        "final_diff",
        "tail_share",
        "tail_majority",
        "best_point",
        "best_tail_mean",
        "mean_nsamples",
    ]
    .map(String::from)
    .to_vec();
    let rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|s| {
            vec![
                s.experiment.clone(),
                s.observable.clone(),
                format!("{}/{}", s.final_diff, s.tail.total_pairs),
                format!("{:.3}", s.tail.tail_diff_share),
                format!("{}/{}", s.tail.tail_majority, s.tail.total_pairs),
                crate::analysis::point_label(s.best_index),
                format!("{:.6}", s.best_tail_mean),
                format!("{:.0}", s.mean_nsamples),
            ]
        })
        .collect();
    print!("{}", render_table(&header, &rows));
    println!();
    log::info!(
        "wrote {} plot files under {}",
        files.len(),
        out.join("plots").display()
    );
    match pair {
        Some(pair) => scorecard_outputs(&data, &opts, &pair, &out.join("scorecard.csv")),
        None => {
            eprintln!(
                "warning: no higher-is-better/lower-is-better observable pair; scorecard skipped"
            );
            Ok(EXIT_OK)
        }
    }
}

fn cmd_scorecard(args: &AnalysisArgs) -> Result<i32, Failure> {
    let (data, opts, pair) = analysis_setup(args)?;
    let pair = pair.ok_or_else(|| {
        usage("the campaign has no higher-is-better/lower-is-better pair; pass --pair GOOD,BAD")
    })?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.input.join("scorecard.csv"));
    scorecard_outputs(&data, &opts, &pair, &out)
}

fn cmd_protocol_check(args: &ProtocolCheckArgs) -> Result<i32, Failure> {
    let (bin, rest) = args
        .cmd
        .split_first()
        .ok_or_else(|| usage("--cmd needs an executable"))?;
    let mut spec = LaunchSpec::new(bin);
    spec.args = rest.to_vec();
    spec.experiment_id = args.experiment_id;
    spec.param_index = args.param_index;
    let timeout = seconds("timeout", args.timeout).map_err(usage)?;
    spec.startup_timeout = timeout;
    spec.response_timeout = timeout;
    let opts = CheckOptions {
        observable: args.observable.clone(),
        seed: args.seed,
        ..CheckOptions::default()
    };
    let outcomes = protocol_check(&spec, &opts);
    for o in &outcomes {
        println!(
            "{} {}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.detail
        );
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} checks, {failed} failed", outcomes.len());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_FAILURE })
}

/// Parses `argv` (including the program name) and runs the command.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();
    let outcome = match &cli.command {
        Command::RunQuery(a) => cmd_run_query(a),
        Command::RunCampaign(a) => cmd_run_campaign(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Scorecard(a) => cmd_scorecard(a),
        Command::ProtocolCheck(a) => cmd_protocol_check(a),
    };
    match outcome {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn help_documents_defaults() {
        let mut cmd = Cli::command();
        let help = cmd
            .find_subcommand_mut("run-query")
            .unwrap()
            .render_long_help()
            .to_string();
        for needle in [
            "--alpha",
            "[default: 0.05]",
            "--block",
            "[default: 30]",
            "--seed-of-seeds",
            "[default: 1]",
            "--max-runs",
            "no cap",
            "--horizon",
        ] {
            assert!(help.contains(needle), "run-query help lacks `{needle}`");
        }
        let help = cmd
            .find_subcommand_mut("analyze")
            .unwrap()
            .render_long_help()
            .to_string();
        for needle in ["--tail-frac", "0.3", "--pair", "--ci-overlap"] {
            assert!(help.contains(needle), "analyze help lacks `{needle}`");
        }
    }

    #[test]
    fn sim_spec_resolution() {
        let args = |sim: &str| SimArgs {
            sim: sim.into(),
            sim_args: vec![],
            experiment_id: 4,
            param_index: 2,
            startup_timeout: 1.0,
            response_timeout: 1.0,
        };
        assert!(matches!(
            args("bernoulli:0.5").resolve(),
            Ok(SimChoice::Builtin(BuiltinModel::Bernoulli { .. }))
        ));
        match args("exec:/opt/sim").resolve() {
            Ok(SimChoice::External(spec)) => {
                assert_eq!(spec.argv(), ["-experimentMV", "4", "-numMCexpMV", "2"]);
            }
            other => panic!("{other:?}"),
        }
        assert!(args("nonsense").resolve().is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(dispatch(["smcsweep"]), EXIT_USAGE);
        assert_eq!(
            dispatch(["smcsweep", "run-query", "--delta", "0.1"]),
            EXIT_USAGE
        );
        assert_eq!(dispatch(["smcsweep", "frobnicate"]), EXIT_USAGE);
        assert_eq!(dispatch(["smcsweep", "--help"]), EXIT_OK);
    }
}
