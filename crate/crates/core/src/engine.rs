//! Sequential estimation over a pool of simulator workers.
//!
//! Run `i` always uses seed `seed_for_run(seed_of_seeds, i)`, and samples
//! are committed strictly in run-index order, so the result does not depend
//! on the number of workers or on scheduling.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::sync::mpsc;
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::blackbox::{SimError, SimulatorHandle};
use crate::quatex::{evaluate_run, EvalError, ObservationPlan, QueryAst};
use crate::rng::SplitMix64;
use crate::stats::{check_convergence, half_width, PointAccumulator, StatsError, StoppingPolicy};

/// Fresh simulator attempts for a failing run after the first one.
pub const RUN_RETRIES: usize = 3;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine configuration: {0}")]
    InvalidConfig(String),
    #[error("run {run_index} failed after {attempts} attempt(s): {source}")]
    SimulatorFailure {
        run_index: u64,
        attempts: usize,
        source: SimError,
    },
    #[error("run {run_index}: {source}")]
    Evaluation { run_index: u64, source: EvalError },
    #[error("run {0} committed twice")]
    DuplicateRun(u64),
    #[error("run {run_index} returned {got} samples for a plan of {expected} points")]
    SampleCount {
        run_index: u64,
        got: usize,
        expected: usize,
    },
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    pub workers: usize,
    pub seed_of_seeds: u64,
    pub policy: StoppingPolicy,
    pub horizon: u64,
    /// Emit line-delimited progress records on stderr.
    pub progress: bool,
}

impl EngineConfig {
    pub fn new(policy: StoppingPolicy, horizon: u64) -> Self {
        EngineConfig {
            workers: 1,
            seed_of_seeds: 1,
            policy,
            horizon,
            progress: false,
        }
    }

    pub fn validate(&self, plan: &ObservationPlan) -> Result<(), EngineError> {
        self.policy
            .validate()
            .map_err(|e| EngineError::InvalidConfig(e.to_string()))?;
        if self.workers == 0 {
            return Err(EngineError::InvalidConfig(
                "workers must be at least 1".into(),
            ));
        }
        if self.horizon < plan.max_step() {
            return Err(EngineError::InvalidConfig(format!(
                "horizon {} is shorter than the last observation step {}",
                self.horizon,
                plan.max_step()
            )));
        }
        if plan.is_empty() {
            return Err(EngineError::InvalidConfig(
                "observation plan is empty".into(),
            ));
        }
        Ok(())
    }
}

/// Seed of run `run_index`: the `(run_index + 1)`-th SplitMix64 output
/// from `seed_of_seeds`.
pub fn seed_for_run(seed_of_seeds: u64, run_index: u64) -> u64 {
    SplitMix64::nth_output(seed_of_seeds, run_index)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointResult {
    pub step: u64,
    pub observable: String,
    pub mean: f64,
    pub half_width: f64,
    /// Committed runs when the point froze, or at the stop for unconverged
    /// points.
    pub n: u64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    /// The run cap was reached with unconverged points.
    Partial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryResult {
    pub points: Vec<PointResult>,
    pub total_runs: u64,
    pub status: RunStatus,
    pub wall_time: Duration,
}

impl TrajectoryResult {
    pub const CSV_HEADER: &'static str =
        "observable,step,mean,ci_halfwidth,n_at_convergence,converged";

    /// Deterministic CSV rendering; wall time is not included.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for p in &self.points {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                p.observable, p.step, p.mean, p.half_width, p.n, p.converged
            )?;
        }
        Ok(())
    }
}

/// Accumulators plus the in-order commit buffer.
#[derive(Debug)]
pub struct EngineState {
    policy: StoppingPolicy,
    accumulators: Vec<PointAccumulator>,
    committed: u64,
    buffer: BTreeMap<u64, Vec<f64>>,
    last_checked: u64,
    done: Option<RunStatus>,
    progress: bool,
}

impl EngineState {
    pub fn new(points: usize, policy: StoppingPolicy) -> Self {
        EngineState {
            policy,
            accumulators: vec![PointAccumulator::new(); points],
            committed: 0,
            buffer: BTreeMap::new(),
            last_checked: 0,
            done: None,
            progress: false,
        }
    }

    pub fn committed(&self) -> u64 {
        self.committed
    }

    pub fn is_done(&self) -> bool {
        self.done.is_some()
    }

    pub fn accumulators(&self) -> &[PointAccumulator] {
        &self.accumulators
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    /// Highest run index (exclusive) worth launching: the block being
    /// collected plus one speculative block.
    pub fn launch_limit(&self) -> u64 {
        let limit = self.last_checked + 2 * self.policy.block_size;
        match self.policy.max_runs {
            Some(cap) => limit.min(cap),
            None => limit,
        }
    }

    fn check_boundary(&mut self) -> Result<(), EngineError> {
        self.last_checked = self.committed;
        let mut newly_frozen = 0;
        for acc in self.accumulators.iter_mut().filter(|a| !a.is_frozen()) {
            if check_convergence(acc, &self.policy) {
                acc.freeze(self.policy.alpha)?;
                newly_frozen += 1;
            }
        }
        let frozen = self.accumulators.iter().filter(|a| a.is_frozen()).count();
        if self.progress {
            eprintln!(
                "{}",
                serde_json::json!({
                    "event": "block",
                    "committed": self.committed,
                    "newly_frozen": newly_frozen,
                    "frozen": frozen,
                    "points": self.accumulators.len(),
                })
            );
        }
        if frozen == self.accumulators.len() {
            self.done = Some(RunStatus::Converged);
        }
        Ok(())
    }

    fn apply(&mut self, samples: Vec<f64>) -> Result<(), EngineError> {
        for (acc, x) in self.accumulators.iter_mut().zip(samples) {
            acc.update(x)?;
        }
        self.committed += 1;
        if self.committed.is_multiple_of(self.policy.block_size) {
            self.check_boundary()?;
        }
        if self.done.is_none() && self.policy.max_runs == Some(self.committed) {
            if self.last_checked != self.committed {
                self.check_boundary()?;
            }
            if self.done.is_none() {
                self.done = Some(RunStatus::Partial);
            }
        }
        Ok(())
    }

    /// Buffers the samples of `run_index` and applies every run that is now
    /// contiguous with the committed prefix. Runs arriving after the stop
    /// are discarded.
    pub fn commit_sample(&mut self, run_index: u64, samples: Vec<f64>) -> Result<(), EngineError> {
        if samples.len() != self.accumulators.len() {
            return Err(EngineError::SampleCount {
                run_index,
                got: samples.len(),
                expected: self.accumulators.len(),
            });
        }
        if run_index < self.committed || self.buffer.contains_key(&run_index) {
            return Err(EngineError::DuplicateRun(run_index));
        }
        if self.done.is_some() {
            return Ok(());
        }
        self.buffer.insert(run_index, samples);
        while self.done.is_none() {
            match self.buffer.remove(&self.committed) {
                Some(s) => self.apply(s)?,
                None => break,
            }
        }
        if self.done.is_some() {
            self.buffer.clear();
        }
        Ok(())
    }

    pub fn result(&self, plan: &ObservationPlan, wall_time: Duration) -> TrajectoryResult {
        let points = plan
            .points()
            .iter()
            .zip(&self.accumulators)
            .map(|(p, acc)| match acc.frozen() {
                Some(f) => PointResult {
                    step: p.step,
                    observable: p.observable.clone(),
                    mean: f.mean,
                    half_width: f.half_width,
                    n: f.n,
                    converged: true,
                },
                None => PointResult {
                    step: p.step,
                    observable: p.observable.clone(),
                    mean: acc.stat().mean(),
                    half_width: half_width(acc.stat(), self.policy.alpha).unwrap_or(f64::INFINITY),
                    n: acc.stat().count(),
                    converged: false,
                },
            })
            .collect();
        TrajectoryResult {
            points,
            total_runs: self.committed,
            status: self.done.unwrap_or(RunStatus::Partial),
            wall_time,
        }
    }
}

struct Dispatch {
    next: u64,
    limit: u64,
    stop: bool,
}

struct Dispatcher {
    state: Mutex<Dispatch>,
    wake: Condvar,
}

impl Dispatcher {
    fn claim(&self) -> Option<u64> {
        let mut d = self.state.lock().expect("dispatcher lock");
        loop {
            if d.stop {
                return None;
            }
            if d.next < d.limit {
                d.next += 1;
                return Some(d.next - 1);
            }
            d = self.wake.wait(d).expect("dispatcher lock");
        }
    }

    fn set_limit(&self, limit: u64) {
        let mut d = self.state.lock().expect("dispatcher lock");
        if limit > d.limit {
            d.limit = limit;
            self.wake.notify_all();
        }
    }

    fn stop(&self) {
        self.state.lock().expect("dispatcher lock").stop = true;
        self.wake.notify_all();
    }
}

fn execute_run<F>(
    ast: &QueryAst,
    plan: &ObservationPlan,
    factory: &F,
    worker: usize,
    sim: &mut Option<SimulatorHandle>,
    run_index: u64,
    seed: u64,
) -> Result<Vec<f64>, EngineError>
where
    F: Fn(usize) -> Result<SimulatorHandle, SimError>,
{
    let mut attempts = 0;
    loop {
        attempts += 1;
        let outcome = match sim {
            Some(handle) => evaluate_run(ast, plan, handle, seed),
            None => match factory(worker) {
                Ok(handle) => evaluate_run(ast, plan, sim.insert(handle), seed),
                Err(e) => Err(EvalError::Simulator(e)),
            },
        };
        match outcome {
            Ok(samples) => return Ok(samples),
            Err(EvalError::Simulator(source)) => {
                *sim = None;
                if attempts > RUN_RETRIES {
                    return Err(EngineError::SimulatorFailure {
                        run_index,
                        attempts,
                        source,
                    });
                }
                log::warn!(
                    "worker {worker}: run {run_index} failed ({source}); retrying on a fresh simulator"
                );
            }
            Err(source) => return Err(EngineError::Evaluation { run_index, source }),
        }
    }
}

/// Estimates every plan point until each confidence interval is within the
/// policy's half-width target, or the run cap is hit.
pub fn run_query<F>(
    ast: &QueryAst,
    plan: &ObservationPlan,
    factory: F,
    config: &EngineConfig,
) -> Result<TrajectoryResult, EngineError>
where
    F: Fn(usize) -> Result<SimulatorHandle, SimError> + Sync,
{
    config.validate(plan)?;
    let started = Instant::now();
    let mut state = EngineState::new(plan.len(), config.policy);
    state.progress = config.progress;
    let dispatcher = Dispatcher {
        state: Mutex::new(Dispatch {
            next: 0,
            limit: state.launch_limit(),
            stop: false,
        }),
        wake: Condvar::new(),
    };
    let (tx, rx) = mpsc::channel::<(u64, Result<Vec<f64>, EngineError>)>();

    let outcome = thread::scope(|scope| {
        for worker in 0..config.workers {
            let tx = tx.clone();
            let dispatcher = &dispatcher;
            let factory = &factory;
            scope.spawn(move || {
                let mut sim = None;
                while let Some(run_index) = dispatcher.claim() {
                    let seed = seed_for_run(config.seed_of_seeds, run_index);
                    let result = execute_run(ast, plan, factory, worker, &mut sim, run_index, seed);
                    let failed = result.is_err();
                    if tx.send((run_index, result)).is_err() || failed {
                        dispatcher.stop();
                        break;
                    }
                }
            });
        }
        drop(tx);

        let outcome = loop {
            let Ok((run_index, result)) = rx.recv() else {
                break Err(EngineError::InvalidConfig(
                    "all workers exited before the analysis finished".into(),
                ));
            };
            let committed = result.and_then(|samples| state.commit_sample(run_index, samples));
            if let Err(e) = committed {
                break Err(e);
            }
            if state.is_done() {
                break Ok(());
            }
            dispatcher.set_limit(state.launch_limit());
        };
        dispatcher.stop();
        outcome
    });
    outcome?;
    Ok(state.result(plan, started.elapsed()))
}
