//! Declarative sweep campaigns.
//!
//! A campaign runs one engine job per (experiment, sweep value, observable)
//! and writes one trajectory CSV per job plus `manifest.json`.
//!
//! ```toml
//! workers = 4
//! max_runs = 100000
//!
//! [simulator]
//! builtin = "switching"
//!
//! [grid]
//! lo = 101
//! step = 10
//! hi = 600
//!
//! [[observables]]
//! name = "X"
//! delta = 0.02
//! direction = "higher-is-better"
//!
//! [[experiments]]
//! id = "E1"
//! parameter = "beta"
//! values = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::blackbox::{LaunchSpec, SimulatorHandle};
use crate::engine::{run_query, seed_for_run, EngineConfig, RunStatus, TrajectoryResult};
use crate::models::BuiltinModel;
use crate::quatex::{expand_parametric, obs_at_step_query, parse};
use crate::stats::StoppingPolicy;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const JOBS_DIR: &str = "jobs";
pub const MANIFEST_FORMAT: &str = "smcsweep-campaign/1";

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("malformed manifest: {0}")]
    Manifest(String),
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> CampaignError {
    CampaignError::Invalid {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimulatorConfig {
    Builtin(BuiltinModel),
    External(LaunchSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub lo: u64,
    pub step: u64,
    pub hi: u64,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            lo: 101,
            step: 10,
            hi: 600,
        }
    }
}

impl Grid {
    pub fn steps(&self) -> Vec<u64> {
        (self.lo..=self.hi)
            .step_by(self.step.max(1) as usize)
            .collect()
    }

    pub fn last(&self) -> u64 {
        self.lo + (self.hi - self.lo) / self.step.max(1) * self.step
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "lower-is-better")]
    LowerIsBetter,
    #[serde(rename = "higher-is-better")]
    HigherIsBetter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservableSpec {
    pub name: String,
    /// Target confidence-interval half-width.
    #[serde(default = "missing_number")]
    pub delta: f64,
    pub direction: Direction,
}

fn missing_number() -> f64 {
    f64::NAN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepExperiment {
    pub id: String,
    pub parameter: String,
    pub values: Vec<f64>,
    #[serde(default)]
    pub baseline: usize,
    /// Value of `-experimentMV` for external simulators; defaults to the
    /// experiment's 1-based position.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_id: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub simulator: SimulatorConfig,
    /// Steps simulated per run; defaults to the last grid step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<u64>,
    #[serde(default)]
    pub grid: Grid,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_block")]
    pub block: u64,
    #[serde(default = "default_one")]
    pub workers: usize,
    #[serde(default = "default_seed")]
    pub seed_of_seeds: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_runs: Option<u64>,
    #[serde(default = "default_tail")]
    pub tail_fraction: f64,
    #[serde(default)]
    pub fail_fast: bool,
    #[serde(default = "default_one")]
    pub jobs_parallel: usize,
    pub observables: Vec<ObservableSpec>,
    pub experiments: Vec<SweepExperiment>,
}

fn default_alpha() -> f64 {
    0.05
}
fn default_block() -> u64 {
    30
}
fn default_one() -> usize {
    1
}
fn default_seed() -> u64 {
    1
}
fn default_tail() -> f64 {
    0.3
}

fn path_safe(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && s != "."
        && s != ".."
}

impl CampaignConfig {
    pub fn from_toml(text: &str) -> Result<Self, CampaignError> {
        let config: CampaignConfig =
            toml::from_str(text).map_err(|e| CampaignError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CampaignError> {
        let text = fs::read_to_string(path).map_err(|source| CampaignError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn horizon(&self) -> u64 {
        self.horizon.unwrap_or_else(|| self.grid.last())
    }

    pub fn observable(&self, name: &str) -> Option<&ObservableSpec> {
        self.observables.iter().find(|o| o.name == name)
    }

    pub fn experiment(&self, id: &str) -> Option<&SweepExperiment> {
        self.experiments.iter().find(|e| e.id == id)
    }

    pub fn job_count(&self) -> usize {
        self.experiments
            .iter()
            .map(|e| e.values.len())
            .sum::<usize>()
            * self.observables.len()
    }

    pub fn validate(&self) -> Result<(), CampaignError> {
        let g = &self.grid;
        if g.step == 0 {
            return Err(invalid("grid.step", "must be at least 1"));
        }
        if g.lo == 0 {
            return Err(invalid("grid.lo", "steps start at 1"));
        }
        if g.lo > g.hi {
            return Err(invalid("grid", format!("lo {} exceeds hi {}", g.lo, g.hi)));
        }
        if self.horizon() < g.last() {
            return Err(invalid(
                "horizon",
                format!(
                    "{} is shorter than the last grid step {}",
                    self.horizon(),
                    g.last()
                ),
            ));
        }
        StoppingPolicy::new(self.alpha, 1.0, self.block)
            .and_then(|p| p.with_max_runs(self.max_runs))
            .map_err(|e| {
                let field = if !(self.alpha > 0.0 && self.alpha < 1.0) {
                    "alpha"
                } else if self.block < 2 {
                    "block"
                } else {
                    "max_runs"
                };
                invalid(field, e.to_string())
            })?;
        if self.workers == 0 {
            return Err(invalid("workers", "must be at least 1"));
        }
        if self.jobs_parallel == 0 {
            return Err(invalid("jobs_parallel", "must be at least 1"));
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return Err(invalid("tail_fraction", "must lie in (0, 1]"));
        }

        if self.observables.is_empty() {
            return Err(invalid(
                "observables",
                "at least one observable is required",
            ));
        }
        let mut names = HashSet::new();
        for (i, o) in self.observables.iter().enumerate() {
            let path = format!("observables[{i}]");
            if !path_safe(&o.name) {
                return Err(invalid(
                    format!("{path}.name"),
                    "must be non-empty and use only letters, digits, `_`, `-` or `.`",
                ));
            }
            if !names.insert(o.name.as_str()) {
                return Err(invalid(
                    format!("{path}.name"),
                    format!("duplicate observable `{}`", o.name),
                ));
            }
            if o.delta.is_nan() {
                return Err(invalid(format!("{path}.delta"), "missing"));
            }
            if !(o.delta > 0.0 && o.delta.is_finite()) {
                return Err(invalid(
                    format!("{path}.delta"),
                    format!("must be positive, got {}", o.delta),
                ));
            }
            if let SimulatorConfig::Builtin(model) = &self.simulator {
                if !model.observables().contains(&o.name) {
                    return Err(invalid(
                        format!("{path}.name"),
                        format!(
                            "model `{model}` has no observable `{}` (known: {})",
                            o.name,
                            model.observables().join(", ")
                        ),
                    ));
                }
            }
        }

        if self.experiments.is_empty() {
            return Err(invalid(
                "experiments",
                "at least one experiment is required",
            ));
        }
        let mut ids = HashSet::new();
        for (i, e) in self.experiments.iter().enumerate() {
            let path = format!("experiments[{i}]");
            if !path_safe(&e.id) {
                return Err(invalid(
                    format!("{path}.id"),
                    "must be non-empty and use only letters, digits, `_`, `-` or `.`",
                ));
            }
            if !ids.insert(e.id.as_str()) {
                return Err(invalid(
                    format!("{path}.id"),
                    format!("duplicate experiment id `{}`", e.id),
                ));
            }
            if e.parameter.is_empty() {
                return Err(invalid(format!("{path}.parameter"), "must not be empty"));
            }
            if e.values.len() < 2 {
                return Err(invalid(
                    format!("{path}.values"),
                    "a sweep needs at least 2 values",
                ));
            }
            for (j, v) in e.values.iter().enumerate() {
                if !v.is_finite() {
                    return Err(invalid(format!("{path}.values[{j}]"), "must be finite"));
                }
                if e.values[..j].contains(v) {
                    return Err(invalid(
                        format!("{path}.values[{j}]"),
                        format!("duplicate sweep value {v}"),
                    ));
                }
            }
            if e.baseline >= e.values.len() {
                return Err(invalid(
                    format!("{path}.baseline"),
                    format!(
                        "index {} is out of range for {} values",
                        e.baseline,
                        e.values.len()
                    ),
                ));
            }
            if let SimulatorConfig::Builtin(model) = &self.simulator {
                for (j, &v) in e.values.iter().enumerate() {
                    model
                        .clone()
                        .set_param(&e.parameter, v)
                        .map_err(|err| invalid(format!("{path}.values[{j}]"), err.to_string()))?;
                }
            }
        }
        if let SimulatorConfig::External(spec) = &self.simulator {
            spec.validate()
                .map_err(|m| invalid("simulator.external", m))?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON rendering of the configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical))
    }

    /// Jobs in execution order: experiment, then sweep value, then
    /// observable.
    pub fn jobs(&self) -> Vec<JobSpec> {
        let mut jobs = Vec::with_capacity(self.job_count());
        for (e_idx, e) in self.experiments.iter().enumerate() {
            for (v_idx, &value) in e.values.iter().enumerate() {
                for o in &self.observables {
                    let ordinal = jobs.len();
                    jobs.push(JobSpec {
                        ordinal,
                        experiment: e.id.clone(),
                        experiment_index: e_idx,
                        value_index: v_idx,
                        param_name: e.parameter.clone(),
                        param_value: value,
                        observable: o.name.clone(),
                        seed_of_seeds: seed_for_run(self.seed_of_seeds, ordinal as u64),
                    });
                }
            }
        }
        jobs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub ordinal: usize,
    pub experiment: String,
    pub experiment_index: usize,
    pub value_index: usize,
    pub param_name: String,
    pub param_value: f64,
    pub observable: String,
    pub seed_of_seeds: u64,
}

impl JobSpec {
    /// Sweep-point label, 1-based.
    pub fn point_label(&self) -> String {
        format!("p{}", self.value_index + 1)
    }

    pub fn csv_name(&self) -> String {
        format!(
            "{}_{}_{}.csv",
            self.experiment,
            self.point_label(),
            self.observable
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Converged,
    Partial,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    #[serde(flatten)]
    pub spec: JobSpec,
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub total_runs: u64,
    pub wall_time_s: f64,
    /// Path of the trajectory CSV relative to the campaign directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config_hash: String,
    pub config: CampaignConfig,
    pub jobs: Vec<JobRecord>,
    pub wall_time_s: f64,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, CampaignError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|source| CampaignError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| CampaignError::Manifest(e.to_string()))?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(CampaignError::Manifest(format!(
                "unsupported format `{}`",
                manifest.format
            )));
        }
        Ok(manifest)
    }

    pub fn count(&self, status: JobStatus) -> usize {
        self.jobs.iter().filter(|j| j.status == status).count()
    }
}

/// One row of a job's trajectory CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub experiment: String,
    pub param_name: String,
    pub param_value: f64,
    pub observable: String,
    pub step: u64,
    pub mean: f64,
    pub ci_halfwidth: f64,
    pub n_at_convergence: u64,
}

pub const TRAJECTORY_HEADER: &str =
    "experiment,param_name,param_value,observable,step,mean,ci_halfwidth,n_at_convergence";

pub fn write_trajectory_csv(
    path: &Path,
    job: &JobSpec,
    trajectory: &TrajectoryResult,
) -> Result<(), CampaignError> {
    let write_err = |source: std::io::Error| CampaignError::Write {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| write_err(e.into()))?;
    for p in &trajectory.points {
        w.serialize(TrajectoryRow {
            experiment: job.experiment.clone(),
            param_name: job.param_name.clone(),
            param_value: job.param_value,
            observable: job.observable.clone(),
            step: p.step,
            mean: p.mean,
            ci_halfwidth: p.half_width,
            n_at_convergence: p.n,
        })
        .map_err(|e| write_err(e.into()))?;
    }
    w.flush().map_err(write_err)
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<TrajectoryRow>, CampaignError> {
    let read_err = |source: std::io::Error| CampaignError::Read {
        path: path.display().to_string(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| read_err(e.into()))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| read_err(e.into()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.join(",") != TRAJECTORY_HEADER {
        return Err(CampaignError::Manifest(format!(
            "{}: unexpected header `{}`",
            path.display(),
            header.join(",")
        )));
    }
    r.deserialize()
        .collect::<Result<Vec<TrajectoryRow>, _>>()
        .map_err(|e| read_err(e.into()))
}

#[derive(Debug, Clone)]
pub struct JobResult {
    pub spec: JobSpec,
    pub trajectory: TrajectoryResult,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Forward engine progress records to stderr.
    pub progress: bool,
}

#[derive(Debug)]
pub struct CampaignOutcome {
    pub results: Vec<JobResult>,
    pub manifest: Manifest,
}

type JobEntry = (JobRecord, Option<JobResult>);

fn run_job(
    config: &CampaignConfig,
    job: &JobSpec,
    options: RunOptions,
) -> Result<TrajectoryResult, String> {
    let g = config.grid;
    let ast = parse(&obs_at_step_query(g.lo, g.step, g.hi)).map_err(|e| e.to_string())?;
    let bindings = BTreeMap::from([("obs".to_string(), job.observable.clone())]);
    let plan = expand_parametric(&ast, &bindings, config.horizon()).map_err(|e| e.to_string())?;
    let delta = config
        .observable(&job.observable)
        .map(|o| o.delta)
        .ok_or_else(|| format!("unknown observable `{}`", job.observable))?;
    let policy = StoppingPolicy::new(config.alpha, delta, config.block)
        .and_then(|p| p.with_max_runs(config.max_runs))
        .map_err(|e| e.to_string())?;
    let engine = EngineConfig {
        workers: config.workers,
        seed_of_seeds: job.seed_of_seeds,
        policy,
        horizon: config.horizon(),
        progress: options.progress,
    };
    let result = match &config.simulator {
        SimulatorConfig::Builtin(model) => {
            let mut model = model.clone();
            model
                .set_param(&job.param_name, job.param_value)
                .map_err(|e| e.to_string())?;
            let declared = model.observables();
            run_query(
                &ast,
                &plan,
                |_| {
                    Ok(SimulatorHandle::in_process(model.instantiate())
                        .with_declared_observables(declared.iter().cloned()))
                },
                &engine,
            )
        }
        SimulatorConfig::External(template) => {
            let mut spec = template.clone();
            spec.experiment_id = config.experiments[job.experiment_index]
                .external_id
                .unwrap_or(job.experiment_index as i64 + 1);
            spec.param_index = job.value_index as i64 + 1;
            run_query(
                &ast,
                &plan,
                |_| SimulatorHandle::spawn_external(&spec),
                &engine,
            )
        }
    };
    result.map_err(|e| e.to_string())
}

/// Runs every job and persists CSVs and the manifest under `out_dir`.
///
/// Failed jobs are recorded and the campaign continues unless `fail_fast`
/// is set, in which case the remaining jobs are marked skipped.
pub fn run_campaign(
    config: &CampaignConfig,
    out_dir: &Path,
    options: RunOptions,
) -> Result<CampaignOutcome, CampaignError> {
    config.validate()?;
    let jobs_dir = out_dir.join(JOBS_DIR);
    fs::create_dir_all(&jobs_dir).map_err(|source| CampaignError::Write {
        path: jobs_dir.display().to_string(),
        source,
    })?;
    let started = Instant::now();
    let jobs = config.jobs();
    let slots: Vec<Mutex<Option<JobEntry>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let io_error: Mutex<Option<CampaignError>> = Mutex::new(None);

    thread::scope(|scope| {
        for _ in 0..config.jobs_parallel.min(jobs.len()) {
            scope.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                log::info!(
                    "job {}/{}: {} {}={} ({}) {}",
                    i + 1,
                    jobs.len(),
                    job.experiment,
                    job.param_name,
                    job.param_value,
                    job.point_label(),
                    job.observable
                );
                let t0 = Instant::now();
                let outcome = run_job(config, job, options);
                let wall_time_s = t0.elapsed().as_secs_f64();
                let entry = match outcome {
                    Ok(trajectory) => {
                        let rel = format!("{JOBS_DIR}/{}", job.csv_name());
                        if let Err(e) = write_trajectory_csv(&out_dir.join(&rel), job, &trajectory)
                        {
                            io_error.lock().expect("lock").get_or_insert(e);
                            abort.store(true, Ordering::SeqCst);
                            break;
                        }
                        let status = match trajectory.status {
                            RunStatus::Converged => JobStatus::Converged,
                            RunStatus::Partial => JobStatus::Partial,
                        };
                        let record = JobRecord {
                            spec: job.clone(),
                            status,
                            error: None,
                            total_runs: trajectory.total_runs,
                            wall_time_s,
                            csv: Some(rel),
                        };
                        (
                            record,
                            Some(JobResult {
                                spec: job.clone(),
                                trajectory,
                            }),
                        )
                    }
                    Err(message) => {
                        log::error!("job {} failed: {message}", i + 1);
                        if config.fail_fast {
                            abort.store(true, Ordering::SeqCst);
                        }
                        let record = JobRecord {
                            spec: job.clone(),
                            status: JobStatus::Failed,
                            error: Some(message),
                            total_runs: 0,
                            wall_time_s,
                            csv: None,
                        };
                        (record, None)
                    }
                };
                *slots[i].lock().expect("lock") = Some(entry);
            });
        }
    });
    if let Some(e) = io_error.into_inner().expect("lock") {
        return Err(e);
    }

    let mut records = Vec::with_capacity(jobs.len());
    let mut results = Vec::new();
    for (job, slot) in jobs.iter().zip(slots) {
        match slot.into_inner().expect("lock") {
            Some((record, result)) => {
                records.push(record);
                results.extend(result);
            }
            None => records.push(JobRecord {
                spec: job.clone(),
                status: JobStatus::Skipped,
                error: Some("not run: an earlier job failed and fail_fast is set".into()),
                total_runs: 0,
                wall_time_s: 0.0,
                csv: None,
            }),
        }
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        config_hash: config.hash(),
        config: config.clone(),
        jobs: records,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    let manifest_path: PathBuf = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text + "\n").map_err(|source| CampaignError::Write {
        path: manifest_path.display().to_string(),
        source,
    })?;
    Ok(CampaignOutcome { results, manifest })
}
