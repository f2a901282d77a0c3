//! Conformance transcript for external simulators.
//!
//! The checks drive the executable over raw pipes so that framing problems
//! (acknowledgements, extra lines, bad prefixes) are visible, then run one
//! session through [`SimulatorHandle`] as the engine would.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use crate::blackbox::{parse_response, LaunchSpec, SimulatorHandle, RESPONSE_PREFIX};

/// Observable name no simulator is expected to know.
pub const UNKNOWN_OBSERVABLE: &str = "__PROTOCOL_CHECK_UNKNOWN__";

#[derive(Debug, Clone)]
pub struct CheckOptions {
    /// Observable the simulator must answer.
    pub observable: String,
    /// Seed used for the reset checks.
    pub seed: u64,
    /// How long to wait for unsolicited output before declaring silence.
    pub quiet: Duration,
    /// Maximum time allowed for a clean exit after stdin closes.
    pub exit_timeout: Duration,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            observable: "X".into(),
            seed: 7,
            quiet: Duration::from_millis(150),
            exit_timeout: Duration::from_secs(5),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn pass(name: &'static str, detail: impl Into<String>) -> Self {
        CheckOutcome {
            name,
            passed: true,
            detail: detail.into(),
        }
    }

    fn fail(name: &'static str, detail: impl Into<String>) -> Self {
        CheckOutcome {
            name,
            passed: false,
            detail: detail.into(),
        }
    }
}

/// Whether a response line has the exact `OUTPUTMV:<number>` form.
pub fn well_framed(line: &str) -> bool {
    let Some(body) = line.strip_prefix(RESPONSE_PREFIX) else {
        return false;
    };
    let body = body.strip_prefix('-').unwrap_or(body);
    !body.is_empty()
        && body
            .chars()
            .all(|c| c.is_ascii_digit() || matches!(c, '.' | 'e' | 'E' | '+' | '-'))
}

struct RawSession {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<String>,
    response_timeout: Duration,
}

impl RawSession {
    fn start(spec: &LaunchSpec) -> Result<Self, String> {
        let mut child = Command::new(&spec.executable)
            .args(spec.argv())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| format!("cannot start {}: {e}", spec.executable.display()))?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines().map_while(Result::ok) {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(RawSession {
            child,
            stdin,
            lines: rx,
            response_timeout: spec.startup_timeout.max(spec.response_timeout),
        })
    }

    fn send(&mut self, line: &str) -> Result<(), String> {
        let stdin = self.stdin.as_mut().ok_or("stdin already closed")?;
        writeln!(stdin, "{line}")
            .and_then(|_| stdin.flush())
            .map_err(|e| format!("write of `{line}` failed: {e}"))
    }

    fn expect_silence(&self, quiet: Duration, after: &str) -> Result<(), String> {
        match self.lines.recv_timeout(quiet) {
            Ok(line) => Err(format!("unexpected output after `{after}`: `{line}`")),
            Err(RecvTimeoutError::Timeout) => Ok(()),
            Err(RecvTimeoutError::Disconnected) => Err(format!("simulator exited after `{after}`")),
        }
    }

    fn query(&mut self, name: &str) -> Result<String, String> {
        self.send(name)?;
        match self.lines.recv_timeout(self.response_timeout) {
            Ok(line) => Ok(line),
            Err(RecvTimeoutError::Timeout) => Err(format!(
                "no response to `{name}` within {:?}",
                self.response_timeout
            )),
            Err(RecvTimeoutError::Disconnected) => {
                Err(format!("simulator exited before answering `{name}`"))
            }
        }
    }

    fn value(&mut self, name: &str) -> Result<f64, String> {
        let line = self.query(name)?;
        if !well_framed(&line) {
            return Err(format!("malformed response to `{name}`: `{line}`"));
        }
        parse_response(&line).map_err(|e| e.to_string())
    }

    /// Reset followed by `len` observations separated by `next`.
    fn trajectory(&mut self, seed: u64, observable: &str, len: usize) -> Result<Vec<f64>, String> {
        self.send(&format!("reset {seed}"))?;
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            if i > 0 {
                self.send("next")?;
            }
            out.push(self.value(observable)?);
        }
        Ok(out)
    }

    fn close_and_wait(&mut self, timeout: Duration) -> Result<String, String> {
        drop(self.stdin.take());
        let deadline = Instant::now() + timeout;
        loop {
            match self.child.try_wait() {
                Ok(Some(status)) if status.success() => return Ok(format!("exited with {status}")),
                Ok(Some(status)) => return Err(format!("exited with {status}")),
                Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(10)),
                Ok(None) => return Err(format!("still running {timeout:?} after stdin closed")),
                Err(e) => return Err(e.to_string()),
            }
        }
    }
}

impl Drop for RawSession {
    fn drop(&mut self) {
        drop(self.stdin.take());
        if let Ok(None) = self.child.try_wait() {
            let _ = self.child.kill();
        }
        let _ = self.child.wait();
    }
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> CheckOutcome {
    match f() {
        Ok(detail) => CheckOutcome::pass(name, detail),
        Err(detail) => CheckOutcome::fail(name, detail),
    }
}

/// Runs the full transcript suite against `spec`.
pub fn protocol_check(spec: &LaunchSpec, opts: &CheckOptions) -> Vec<CheckOutcome> {
    let mut outcomes = Vec::new();
    let obs = opts.observable.as_str();
    let mut session = match RawSession::start(spec) {
        Ok(s) => {
            outcomes.push(CheckOutcome::pass(
                "launch",
                format!("argv {:?}", spec.argv()),
            ));
            s
        }
        Err(e) => {
            outcomes.push(CheckOutcome::fail("launch", e));
            return outcomes;
        }
    };

    outcomes.push(check("reset-is-silent", || {
        session.send(&format!("reset {}", opts.seed))?;
        session.expect_silence(opts.quiet, "reset")?;
        Ok("no acknowledgement".into())
    }));
    outcomes.push(check("response-framing", || {
        let line = session.query(obs)?;
        if !well_framed(&line) {
            return Err(format!("`{line}` is not `{RESPONSE_PREFIX}<number>`"));
        }
        parse_response(&line).map_err(|e| e.to_string())?;
        session.expect_silence(opts.quiet, obs)?;
        Ok(format!("`{line}`"))
    }));
    outcomes.push(check("next-is-silent", || {
        for _ in 0..3 {
            session.send("next")?;
        }
        session.expect_silence(opts.quiet, "next")?;
        let v = session.value(obs)?;
        Ok(format!("{obs} = {v} after 3 steps"))
    }));
    outcomes.push(check("unknown-observable-sentinel", || {
        let v = session.value(UNKNOWN_OBSERVABLE)?;
        if v == -1.0 {
            Ok("answered -1".into())
        } else {
            Err(format!("answered {v}, expected -1"))
        }
    }));
    outcomes.push(check("reset-determinism", || {
        let a = session.trajectory(opts.seed, obs, 5)?;
        let b = session.trajectory(opts.seed, obs, 5)?;
        if a != b {
            return Err(format!(
                "two runs with seed {} differ: {a:?} vs {b:?}",
                opts.seed
            ));
        }
        let mut other = RawSession::start(spec)?;
        let c = other.trajectory(opts.seed, obs, 5)?;
        if a != c {
            return Err(format!(
                "a fresh process with seed {} differs: {a:?} vs {c:?}",
                opts.seed
            ));
        }
        other.close_and_wait(opts.exit_timeout)?;
        Ok(format!(
            "{} identical values across sessions and processes",
            a.len()
        ))
    }));
    outcomes.push(check("eof-shutdown", || {
        session.close_and_wait(opts.exit_timeout)
    }));
    outcomes.push(check("engine-session", || {
        let mut handle = SimulatorHandle::spawn_external(spec).map_err(|e| e.to_string())?;
        handle.reset(opts.seed).map_err(|e| e.to_string())?;
        for _ in 0..4 {
            handle.advance().map_err(|e| e.to_string())?;
        }
        let v = handle.observe(obs).map_err(|e| e.to_string())?;
        let steps = handle.observe("steps").map_err(|e| e.to_string())?;
        handle.finish_run();
        if steps != 5.0 {
            return Err(format!("step counter is {steps}, expected 5"));
        }
        Ok(format!("{obs} = {v} at step 5"))
    }));
    outcomes
}
