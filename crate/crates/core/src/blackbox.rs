//! Uniform driver for simulators: in-process models and external child
//! processes speaking the line protocol.
//!
//! Requests are newline-terminated ASCII lines: `reset <seed>`, `next`, or
//! an observable name. The only responses are `OUTPUTMV:<real>` lines sent
//! in reply to observable requests. `reset` and `next` are never
//! acknowledged, so they are buffered and flushed with the next observable
//! request.

use std::collections::BTreeSet;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{builtin_observe, Model};

pub const RESPONSE_PREFIX: &str = "OUTPUTMV:";
/// Observable answered by the engine from its own step counter.
pub const STEPS: &str = "steps";
pub const SENTINEL: f64 = -1.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("failed to spawn `{path}`: {source}")]
    Spawn { path: String, source: io::Error },
    #[error("simulator did not answer within the startup timeout of {0:?}")]
    StartupTimeout(Duration),
    #[error("simulator did not answer `{name}` within {timeout:?}")]
    ResponseTimeout { name: String, timeout: Duration },
    #[error("malformed response line {0:?}")]
    MalformedResponse(String),
    #[error("simulator closed its output stream")]
    ProcessExited,
    #[error("broken pipe to simulator: {0}")]
    BrokenPipe(io::Error),
    #[error("protocol misuse: {0}")]
    Misuse(&'static str),
    #[error("observable `{0}` is not declared")]
    UnknownObservable(String),
    #[error("simulator handle has failed and must be replaced")]
    Failed,
}

/// How to launch an external simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaunchSpec {
    pub executable: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "default_experiment_id")]
    pub experiment_id: i64,
    #[serde(default = "default_param_index")]
    pub param_index: i64,
    #[serde(default = "default_startup", with = "secs")]
    pub startup_timeout: Duration,
    #[serde(default = "default_response", with = "secs")]
    pub response_timeout: Duration,
}

fn default_experiment_id() -> i64 {
    1
}
fn default_param_index() -> i64 {
    1
}
fn default_startup() -> Duration {
    Duration::from_secs(60)
}
fn default_response() -> Duration {
    Duration::from_secs(30)
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

impl LaunchSpec {
    pub fn new(executable: impl Into<PathBuf>) -> Self {
        LaunchSpec {
            executable: executable.into(),
            args: Vec::new(),
            experiment_id: default_experiment_id(),
            param_index: default_param_index(),
            startup_timeout: default_startup(),
            response_timeout: default_response(),
        }
    }

    /// Full argument vector: passthrough arguments followed by the
    /// sweep-selection flags.
    pub fn argv(&self) -> Vec<String> {
        let mut argv = self.args.clone();
        argv.extend([
            "-experimentMV".to_string(),
            self.experiment_id.to_string(),
            "-numMCexpMV".to_string(),
            self.param_index.to_string(),
        ]);
        argv
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.startup_timeout.is_zero() || self.response_timeout.is_zero() {
            return Err("timeouts must be positive".into());
        }
        Ok(())
    }
}

/// Parses one response line of the form `OUTPUTMV:<real>`.
pub fn parse_response(line: &str) -> Result<f64, SimError> {
    let malformed = || SimError::MalformedResponse(line.to_string());
    let body = line
        .trim_end_matches(['\n', '\r'])
        .strip_prefix(RESPONSE_PREFIX)
        .ok_or_else(malformed)?
        .trim();
    // Only plain decimal or scientific notation; no inf/nan, no locale commas.
    if body.is_empty()
        || !body
            .bytes()
            .all(|b| b.is_ascii_digit() || matches!(b, b'.' | b'e' | b'E' | b'+' | b'-'))
    {
        return Err(malformed());
    }
    let value: f64 = body.parse().map_err(|_| malformed())?;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(malformed())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandleState {
    Idle,
    InRun,
    Failed,
}

struct ExternalProcess {
    child: Child,
    stdin: Option<BufWriter<ChildStdin>>,
    responses: Receiver<io::Result<String>>,
    awaiting_first_response: bool,
    startup_timeout: Duration,
    response_timeout: Duration,
}

impl ExternalProcess {
    fn spawn(spec: &LaunchSpec) -> Result<Self, SimError> {
        let mut child = Command::new(&spec.executable)
            .args(spec.argv())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| SimError::Spawn {
                path: spec.executable.display().to_string(),
                source,
            })?;
        let stdin = Some(BufWriter::new(child.stdin.take().expect("stdin is piped")));
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, rx) = mpsc::channel();
        thread::Builder::new()
            .name("sim-reader".into())
            .spawn(move || {
                for line in BufReader::new(stdout).lines() {
                    if tx.send(line).is_err() {
                        break;
                    }
                }
            })
            .map_err(|source| SimError::Spawn {
                path: spec.executable.display().to_string(),
                source,
            })?;
        Ok(ExternalProcess {
            child,
            stdin,
            responses: rx,
            awaiting_first_response: true,
            startup_timeout: spec.startup_timeout,
            response_timeout: spec.response_timeout,
        })
    }

    fn stdin(&mut self) -> Result<&mut BufWriter<ChildStdin>, SimError> {
        self.stdin.as_mut().ok_or(SimError::ProcessExited)
    }

    fn send(&mut self, line: &str) -> Result<(), SimError> {
        writeln!(self.stdin()?, "{line}").map_err(SimError::BrokenPipe)
    }

    fn request(&mut self, name: &str) -> Result<f64, SimError> {
        self.send(name)?;
        self.stdin()?.flush().map_err(SimError::BrokenPipe)?;
        let timeout = if self.awaiting_first_response {
            self.startup_timeout.max(self.response_timeout)
        } else {
            self.response_timeout
        };
        let line = match self.responses.recv_timeout(timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(SimError::BrokenPipe(e)),
            Err(RecvTimeoutError::Disconnected) => return Err(SimError::ProcessExited),
            Err(RecvTimeoutError::Timeout) if self.awaiting_first_response => {
                return Err(SimError::StartupTimeout(timeout))
            }
            Err(RecvTimeoutError::Timeout) => {
                return Err(SimError::ResponseTimeout {
                    name: name.to_string(),
                    timeout,
                })
            }
        };
        self.awaiting_first_response = false;
        parse_response(&line)
    }
}

impl Drop for ExternalProcess {
    fn drop(&mut self) {
        // Closing stdin lets a well-behaved simulator exit at EOF.
        if let Some(mut stdin) = self.stdin.take() {
            let _ = stdin.flush();
        }
        let deadline = Instant::now() + Duration::from_secs(2);
        loop {
            match self.child.try_wait() {
                Ok(Some(_)) => return,
                Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(5)),
                _ => break,
            }
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

enum Backend {
    InProcess(Box<dyn Model>),
    External(Box<ExternalProcess>),
}

/// A driveable simulator with an engine-side step counter.
pub struct SimulatorHandle {
    backend: Backend,
    step: u64,
    state: HandleState,
    declared: Option<BTreeSet<String>>,
    transcript: Option<Vec<String>>,
}

impl std::fmt::Debug for SimulatorHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.backend {
            Backend::InProcess(_) => "in-process",
            Backend::External(_) => "external",
        };
        f.debug_struct("SimulatorHandle")
            .field("kind", &kind)
            .field("step", &self.step)
            .field("state", &self.state)
            .finish()
    }
}

impl SimulatorHandle {
    pub fn in_process(model: Box<dyn Model>) -> Self {
        Self::with_backend(Backend::InProcess(model))
    }

    /// Starts an external simulator with the sweep-selection flags appended.
    pub fn spawn_external(spec: &LaunchSpec) -> Result<Self, SimError> {
        spec.validate()
            .map_err(|_| SimError::Misuse("timeouts must be positive"))?;
        Ok(Self::with_backend(Backend::External(Box::new(
            ExternalProcess::spawn(spec)?,
        ))))
    }

    fn with_backend(backend: Backend) -> Self {
        SimulatorHandle {
            backend,
            step: 0,
            state: HandleState::Idle,
            declared: None,
            transcript: None,
        }
    }

    /// Restricts observable requests to `names` (plus `steps`); anything
    /// else is rejected before reaching the simulator.
    pub fn with_declared_observables<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.declared = Some(names.into_iter().map(Into::into).collect());
        self
    }

    /// Records every request line from now on.
    pub fn record_transcript(&mut self) {
        self.transcript = Some(Vec::new());
    }

    pub fn transcript(&self) -> Option<&[String]> {
        self.transcript.as_deref()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> HandleState {
        self.state
    }

    pub fn is_external(&self) -> bool {
        matches!(self.backend, Backend::External(_))
    }

    fn log(&mut self, line: impl FnOnce() -> String) {
        if let Some(t) = self.transcript.as_mut() {
            t.push(line());
        }
    }

    fn fail(&mut self, err: SimError) -> SimError {
        self.state = HandleState::Failed;
        self.step = 0;
        err
    }

    /// Starts a new run. Reset performs the first step, so the counter is 1
    /// afterwards.
    pub fn reset(&mut self, seed: u64) -> Result<(), SimError> {
        if self.state == HandleState::Failed {
            return Err(SimError::Failed);
        }
        self.log(|| format!("reset {seed}"));
        match &mut self.backend {
            Backend::InProcess(model) => model.reset(seed),
            Backend::External(proc) => {
                if let Err(e) = proc.send(&format!("reset {seed}")) {
                    return Err(self.fail(e));
                }
            }
        }
        self.step = 1;
        self.state = HandleState::InRun;
        Ok(())
    }

    pub fn advance(&mut self) -> Result<(), SimError> {
        match self.state {
            HandleState::Failed => return Err(SimError::Failed),
            HandleState::Idle => return Err(SimError::Misuse("advance before reset")),
            HandleState::InRun => {}
        }
        self.log(|| "next".to_string());
        match &mut self.backend {
            Backend::InProcess(model) => model.step(),
            Backend::External(proc) => {
                if let Err(e) = proc.send("next") {
                    return Err(self.fail(e));
                }
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Reads one observable of the current state. `steps` is answered from
    /// the engine-side counter without contacting the simulator.
    pub fn observe(&mut self, name: &str) -> Result<f64, SimError> {
        match self.state {
            HandleState::Failed => return Err(SimError::Failed),
            HandleState::Idle => return Err(SimError::Misuse("observe before reset")),
            HandleState::InRun => {}
        }
        if name == STEPS {
            return Ok(self.step as f64);
        }
        if let Some(declared) = &self.declared {
            if !declared.contains(name) {
                return Err(SimError::UnknownObservable(name.to_string()));
            }
        }
        self.log(|| name.to_string());
        let value = match &mut self.backend {
            Backend::InProcess(model) => builtin_observe(model.as_ref(), name),
            Backend::External(proc) => match proc.request(name) {
                Ok(v) => {
                    if v == SENTINEL {
                        log::warn!(
                            "simulator answered `{name}` with the sentinel -1; \
                             the name may be unknown to it"
                        );
                    }
                    v
                }
                Err(e) => return Err(self.fail(e)),
            },
        };
        Ok(value)
    }

    /// Marks the current run finished; the handle may be reset again.
    pub fn finish_run(&mut self) {
        if self.state == HandleState::InRun {
            self.state = HandleState::Idle;
            self.step = 0;
        }
    }
}
