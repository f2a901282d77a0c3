//! Built-in in-process simulators.
//!
//! All models follow the command-loop convention of the external protocol:
//! `reset` reinitializes from the seed and performs the first step, `step`
//! advances by one.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Xoshiro256StarStar;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("unknown model `{0}` (expected counter, bernoulli:p, gaussian:mu,sd or switching)")]
    UnknownModel(String),
    #[error("bad model argument in `{spec}`: {reason}")]
    BadArgument { spec: String, reason: String },
    #[error("model `{model}` has no parameter `{param}`")]
    UnknownParameter { model: String, param: String },
    #[error("parameter `{param}` = {value} out of range: {reason}")]
    OutOfRange {
        param: String,
        value: f64,
        reason: &'static str,
    },
}

/// An in-process simulator.
pub trait Model: Send {
    /// Reinitializes from `seed` and performs the first step.
    fn reset(&mut self, seed: u64);
    fn step(&mut self);
    /// Current value of a named observable, `None` when the name is unknown.
    fn observe(&self, name: &str) -> Option<f64>;
}

/// Server-side answer to an observable request: unknown names yield the
/// `-1` sentinel with a warning.
pub fn builtin_observe(model: &dyn Model, name: &str) -> f64 {
    match model.observe(name) {
        Some(v) => v,
        None => {
            log::warn!("model has no observable `{name}`; returning sentinel -1");
            -1.0
        }
    }
}

/// Mirrors the step counter as observable `VAL`.
#[derive(Debug, Default, Clone)]
pub struct Counter {
    t: u64,
}

impl Model for Counter {
    fn reset(&mut self, _seed: u64) {
        self.t = 1;
    }

    fn step(&mut self) {
        self.t += 1;
    }

    fn observe(&self, name: &str) -> Option<f64> {
        (name == "VAL").then_some(self.t as f64)
    }
}

/// Draws a fresh iid `X` each step.
#[derive(Debug, Clone)]
pub struct Calibration {
    kind: CalibrationKind,
    rng: Xoshiro256StarStar,
    x: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum CalibrationKind {
    Bernoulli { p: f64 },
    Gaussian { mu: f64, sd: f64 },
}

impl Calibration {
    pub fn bernoulli(p: f64) -> Self {
        Self::with_kind(CalibrationKind::Bernoulli { p })
    }

    pub fn gaussian(mu: f64, sd: f64) -> Self {
        Self::with_kind(CalibrationKind::Gaussian { mu, sd })
    }

    fn with_kind(kind: CalibrationKind) -> Self {
        Calibration {
            kind,
            rng: Xoshiro256StarStar::seed_from_u64(0),
            x: 0.0,
        }
    }

    fn draw(&mut self) {
        self.x = match self.kind {
            CalibrationKind::Bernoulli { p } => {
                if self.rng.next_bernoulli(p) {
                    1.0
                } else {
                    0.0
                }
            }
            CalibrationKind::Gaussian { mu, sd } => mu + sd * self.rng.next_standard_normal(),
        };
    }
}

impl Model for Calibration {
    fn reset(&mut self, seed: u64) {
        self.rng = Xoshiro256StarStar::seed_from_u64(seed);
        self.draw();
    }

    fn step(&mut self) {
        self.draw();
    }

    fn observe(&self, name: &str) -> Option<f64> {
        (name == "X").then_some(self.x)
    }
}

/// The five forecasting heuristics, in observable order `SHARE1..SHARE5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heuristic {
    Naive,
    Adaptive,
    WeakTrend,
    StrongTrend,
    AnchorAdjust,
}

impl Heuristic {
    pub const ALL: [Heuristic; 5] = [
        Heuristic::Naive,
        Heuristic::Adaptive,
        Heuristic::WeakTrend,
        Heuristic::StrongTrend,
        Heuristic::AnchorAdjust,
    ];
}

pub const N_HEURISTICS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchingParams {
    /// Intensity of choice.
    pub beta: f64,
    /// Inertia of population shares.
    pub delta_s: f64,
    /// Memory of performance scores.
    pub eta: f64,
    pub omega_ada: f64,
    pub omega_wtr: f64,
    pub omega_str: f64,
    pub omega_aa: f64,
    /// Coefficient of the aggregate expectation-feedback map.
    pub feedback: f64,
    pub noise_sd: f64,
}

impl Default for SwitchingParams {
    fn default() -> Self {
        SwitchingParams {
            beta: 0.4,
            delta_s: 0.7,
            eta: 0.7,
            omega_ada: 0.65,
            omega_wtr: 0.4,
            omega_str: 1.3,
            omega_aa: 0.5,
            feedback: 0.9,
            noise_sd: 0.1,
        }
    }
}

impl SwitchingParams {
    pub const NAMES: [&'static str; 9] = [
        "beta",
        "delta_s",
        "eta",
        "omega_ada",
        "omega_wtr",
        "omega_str",
        "omega_aa",
        "feedback",
        "noise_sd",
    ];

    pub fn set(&mut self, name: &str, value: f64) -> Result<(), ModelError> {
        let slot = match name {
            "beta" => &mut self.beta,
            "delta_s" => &mut self.delta_s,
            "eta" => &mut self.eta,
            "omega_ada" => &mut self.omega_ada,
            "omega_wtr" => &mut self.omega_wtr,
            "omega_str" => &mut self.omega_str,
            "omega_aa" => &mut self.omega_aa,
            "feedback" => &mut self.feedback,
            "noise_sd" => &mut self.noise_sd,
            _ => {
                return Err(ModelError::UnknownParameter {
                    model: "switching".into(),
                    param: name.into(),
                })
            }
        };
        *slot = value;
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let check = |param: &str, value: f64, ok: bool, reason: &'static str| {
            if ok && value.is_finite() {
                Ok(())
            } else {
                Err(ModelError::OutOfRange {
                    param: param.into(),
                    value,
                    reason,
                })
            }
        };
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        check("beta", self.beta, self.beta >= 0.0, "must be >= 0")?;
        check(
            "delta_s",
            self.delta_s,
            unit(self.delta_s),
            "must lie in [0, 1]",
        )?;
        check("eta", self.eta, unit(self.eta), "must lie in [0, 1]")?;
        check(
            "omega_ada",
            self.omega_ada,
            self.omega_ada >= 0.0,
            "must be >= 0",
        )?;
        check(
            "omega_wtr",
            self.omega_wtr,
            self.omega_wtr >= 0.0,
            "must be >= 0",
        )?;
        check(
            "omega_str",
            self.omega_str,
            self.omega_str >= 0.0,
            "must be >= 0",
        )?;
        check(
            "omega_aa",
            self.omega_aa,
            unit(self.omega_aa),
            "must lie in [0, 1]",
        )?;
        check(
            "feedback",
            self.feedback,
            self.feedback > 0.0 && self.feedback < 1.0,
            "must lie in (0, 1)",
        )?;
        check(
            "noise_sd",
            self.noise_sd,
            self.noise_sd > 0.0,
            "must be > 0",
        )?;
        Ok(())
    }
}

/// State of the heuristic-switching expectations model.
#[derive(Debug, Clone)]
pub struct SwitchingState {
    /// Most recent outcome `x_t`.
    pub x_last: f64,
    /// Outcome one step earlier.
    pub x_prev: f64,
    anchor_sum: f64,
    anchor_count: u64,
    /// Previous adaptive forecast.
    pub ada_memory: f64,
    pub scores: [f64; N_HEURISTICS],
    pub shares: [f64; N_HEURISTICS],
    /// Forecasts issued for the most recent step.
    pub forecasts: [f64; N_HEURISTICS],
    /// Shares that weighted the most recent aggregate.
    pub weights_used: [f64; N_HEURISTICS],
    rng: Xoshiro256StarStar,
}

impl SwitchingState {
    /// Uniform shares, zero scores, `x_0 = x_1 = 0`, zero adaptive memory.
    pub fn initial(seed: u64) -> Self {
        let uniform = [1.0 / N_HEURISTICS as f64; N_HEURISTICS];
        SwitchingState {
            x_last: 0.0,
            x_prev: 0.0,
            anchor_sum: 0.0,
            anchor_count: 2,
            ada_memory: 0.0,
            scores: [0.0; N_HEURISTICS],
            shares: uniform,
            forecasts: [0.0; N_HEURISTICS],
            weights_used: uniform,
            rng: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    /// Running mean of every outcome observed so far, initial values included.
    pub fn anchor(&self) -> f64 {
        self.anchor_sum / self.anchor_count as f64
    }

    #[cfg(test)]
    fn set_history(&mut self, x_last: f64, x_prev: f64, anchor: f64) {
        self.x_last = x_last;
        self.x_prev = x_prev;
        self.anchor_sum = anchor;
        self.anchor_count = 1;
    }
}

/// One heuristic's forecast of the next outcome. The adaptive rule reads
/// its memory from the state but does not update it.
pub fn forecast(h: Heuristic, state: &SwitchingState, params: &SwitchingParams) -> f64 {
    let last = state.x_last;
    let trend = state.x_last - state.x_prev;
    match h {
        Heuristic::Naive => last,
        Heuristic::Adaptive => state.ada_memory + params.omega_ada * (last - state.ada_memory),
        Heuristic::WeakTrend => last + params.omega_wtr * trend,
        Heuristic::StrongTrend => last + params.omega_str * trend,
        Heuristic::AnchorAdjust => {
            params.omega_aa * state.anchor() + (1.0 - params.omega_aa) * last + trend
        }
    }
}

/// Exponentially weighted squared-error fitness.
pub fn update_scores(state: &mut SwitchingState, params: &SwitchingParams, realized: f64) {
    for (score, f) in state.scores.iter_mut().zip(state.forecasts) {
        let err = realized - f;
        *score = params.eta * *score - (1.0 - params.eta) * err * err;
    }
}

/// Logit choice over scores blended with the previous shares.
pub fn switch_shares(state: &mut SwitchingState, params: &SwitchingParams) {
    let max_score = state
        .scores
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut logit = [0.0; N_HEURISTICS];
    for (l, s) in logit.iter_mut().zip(state.scores) {
        *l = (params.beta * (s - max_score)).exp();
    }
    let z: f64 = logit.iter().sum();
    for (share, l) in state.shares.iter_mut().zip(logit) {
        *share = params.delta_s * *share + (1.0 - params.delta_s) * (l / z);
    }
    let total: f64 = state.shares.iter().sum();
    for share in state.shares.iter_mut() {
        *share /= total;
    }
}

/// Advances the model by one period.
pub fn switching_step(state: &mut SwitchingState, params: &SwitchingParams) {
    for h in Heuristic::ALL {
        state.forecasts[h as usize] = forecast(h, state, params);
    }
    let expectation: f64 = state
        .shares
        .iter()
        .zip(state.forecasts)
        .map(|(n, f)| n * f)
        .sum();
    let x = params.feedback * expectation + params.noise_sd * state.rng.next_standard_normal();
    state.weights_used = state.shares;
    update_scores(state, params, x);
    switch_shares(state, params);
    state.ada_memory = state.forecasts[Heuristic::Adaptive as usize];
    state.x_prev = state.x_last;
    state.x_last = x;
    state.anchor_sum += x;
    state.anchor_count += 1;
}

/// Expectation-feedback market with heuristic switching.
#[derive(Debug, Clone)]
pub struct SwitchingModel {
    params: SwitchingParams,
    state: SwitchingState,
}

impl SwitchingModel {
    pub fn new(params: SwitchingParams) -> Self {
        SwitchingModel {
            params,
            state: SwitchingState::initial(0),
        }
    }

    pub fn state(&self) -> &SwitchingState {
        &self.state
    }

    /// Share-weighted squared forecast error of the last step.
    pub fn forecast_error(&self) -> f64 {
        let x = self.state.x_last;
        self.state
            .weights_used
            .iter()
            .zip(self.state.forecasts)
            .map(|(n, f)| n * (x - f) * (x - f))
            .sum()
    }
}

impl Model for SwitchingModel {
    fn reset(&mut self, seed: u64) {
        self.state = SwitchingState::initial(seed);
        switching_step(&mut self.state, &self.params);
    }

    fn step(&mut self) {
        switching_step(&mut self.state, &self.params);
    }

    fn observe(&self, name: &str) -> Option<f64> {
        match name {
            "X" => Some(self.state.x_last),
            "FERR" => Some(self.forecast_error()),
            _ => {
                let idx: usize = name.strip_prefix("SHARE")?.parse().ok()?;
                (1..=N_HEURISTICS)
                    .contains(&idx)
                    .then(|| self.state.shares[idx - 1])
            }
        }
    }
}

/// A built-in model selected by name, e.g. `bernoulli:0.5`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BuiltinModel {
    Counter,
    Bernoulli { p: f64 },
    Gaussian { mu: f64, sd: f64 },
    Switching(SwitchingParams),
}

impl BuiltinModel {
    pub fn instantiate(&self) -> Box<dyn Model> {
        match *self {
            BuiltinModel::Counter => Box::new(Counter::default()),
            BuiltinModel::Bernoulli { p } => Box::new(Calibration::bernoulli(p)),
            BuiltinModel::Gaussian { mu, sd } => Box::new(Calibration::gaussian(mu, sd)),
            BuiltinModel::Switching(params) => Box::new(SwitchingModel::new(params)),
        }
    }

    /// Overrides one named parameter, as done by a sweep.
    pub fn set_param(&mut self, name: &str, value: f64) -> Result<(), ModelError> {
        let unknown = |model: &str| ModelError::UnknownParameter {
            model: model.into(),
            param: name.into(),
        };
        match self {
            BuiltinModel::Counter => Err(unknown("counter")),
            BuiltinModel::Bernoulli { p } => match name {
                "p" if (0.0..=1.0).contains(&value) => {
                    *p = value;
                    Ok(())
                }
                "p" => Err(ModelError::OutOfRange {
                    param: "p".into(),
                    value,
                    reason: "must lie in [0, 1]",
                }),
                _ => Err(unknown("bernoulli")),
            },
            BuiltinModel::Gaussian { mu, sd } => match name {
                "mu" if value.is_finite() => {
                    *mu = value;
                    Ok(())
                }
                "sd" if value > 0.0 && value.is_finite() => {
                    *sd = value;
                    Ok(())
                }
                "mu" | "sd" => Err(ModelError::OutOfRange {
                    param: name.into(),
                    value,
                    reason: "mu must be finite, sd positive",
                }),
                _ => Err(unknown("gaussian")),
            },
            BuiltinModel::Switching(params) => params.set(name, value),
        }
    }

    /// Observable names the model answers.
    pub fn observables(&self) -> Vec<String> {
        match self {
            BuiltinModel::Counter => vec!["VAL".into()],
            BuiltinModel::Bernoulli { .. } | BuiltinModel::Gaussian { .. } => vec!["X".into()],
            BuiltinModel::Switching(_) => {
                let mut names = vec!["X".to_string(), "FERR".to_string()];
                names.extend((1..=N_HEURISTICS).map(|i| format!("SHARE{i}")));
                names
            }
        }
    }
}

fn parse_f64(spec: &str, s: &str) -> Result<f64, ModelError> {
    s.trim().parse().map_err(|_| ModelError::BadArgument {
        spec: spec.into(),
        reason: format!("`{s}` is not a number"),
    })
}

impl FromStr for BuiltinModel {
    type Err = ModelError;

    fn from_str(spec: &str) -> Result<Self, Self::Err> {
        let (name, args) = match spec.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (spec, None),
        };
        let bad = |reason: &str| ModelError::BadArgument {
            spec: spec.into(),
            reason: reason.into(),
        };
        match (name, args) {
            ("counter", None) => Ok(BuiltinModel::Counter),
            ("bernoulli", Some(a)) => {
                let mut model = BuiltinModel::Bernoulli { p: 0.5 };
                model.set_param("p", parse_f64(spec, a)?)?;
                Ok(model)
            }
            ("gaussian", Some(a)) => {
                let (mu, sd) = a.split_once(',').ok_or_else(|| bad("expected mu,sd"))?;
                let mut model = BuiltinModel::Gaussian { mu: 0.0, sd: 1.0 };
                model.set_param("mu", parse_f64(spec, mu)?)?;
                model.set_param("sd", parse_f64(spec, sd)?)?;
                Ok(model)
            }
            ("switching", args) => {
                let mut params = SwitchingParams::default();
                for kv in args.into_iter().flat_map(|a| a.split(',')) {
                    if kv.trim().is_empty() {
                        continue;
                    }
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| bad("expected name=value"))?;
                    params.set(k.trim(), parse_f64(spec, v)?)?;
                }
                Ok(BuiltinModel::Switching(params))
            }
            ("counter" | "bernoulli" | "gaussian", _) => Err(bad("wrong number of arguments")),
            _ => Err(ModelError::UnknownModel(spec.into())),
        }
    }
}

impl fmt::Display for BuiltinModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BuiltinModel::Counter => write!(f, "counter"),
            BuiltinModel::Bernoulli { p } => write!(f, "bernoulli:{p}"),
            BuiltinModel::Gaussian { mu, sd } => write!(f, "gaussian:{mu},{sd}"),
            BuiltinModel::Switching(p) => {
                let defaults = SwitchingParams::default();
                let values = [
                    p.beta,
                    p.delta_s,
                    p.eta,
                    p.omega_ada,
                    p.omega_wtr,
                    p.omega_str,
                    p.omega_aa,
                    p.feedback,
                    p.noise_sd,
                ];
                let base = [
                    defaults.beta,
                    defaults.delta_s,
                    defaults.eta,
                    defaults.omega_ada,
                    defaults.omega_wtr,
                    defaults.omega_str,
                    defaults.omega_aa,
                    defaults.feedback,
                    defaults.noise_sd,
                ];
                let overrides: Vec<String> = SwitchingParams::NAMES
                    .iter()
                    .zip(values.iter().zip(base))
                    .filter(|(_, (v, b))| **v != *b)
                    .map(|(n, (v, _))| format!("{n}={v}"))
                    .collect();
                if overrides.is_empty() {
                    write!(f, "switching")
                } else {
                    write!(f, "switching:{}", overrides.join(","))
                }
            }
        }
    }
}

impl TryFrom<String> for BuiltinModel {
    type Error = ModelError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<BuiltinModel> for String {
    fn from(m: BuiltinModel) -> String {
        m.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params() -> SwitchingParams {
        SwitchingParams::default()
    }

    #[test]
    fn naive_forecast() {
        let mut s = SwitchingState::initial(0);
        s.set_history(2.0, 1.0, 0.0);
        assert_eq!(forecast(Heuristic::Naive, &s, &params()), 2.0);
    }

    #[test]
    fn weak_trend_forecast() {
        let mut s = SwitchingState::initial(0);
        s.set_history(2.0, 1.0, 0.0);
        let f = forecast(Heuristic::WeakTrend, &s, &params());
        assert!((f - 2.4).abs() < 1e-12);
    }

    #[test]
    fn strong_trend_and_adaptive_forecasts() {
        let mut s = SwitchingState::initial(0);
        s.set_history(2.0, 1.0, 0.0);
        s.ada_memory = 1.0;
        let p = params();
        assert!((forecast(Heuristic::StrongTrend, &s, &p) - 3.3).abs() < 1e-12);
        assert!((forecast(Heuristic::Adaptive, &s, &p) - 1.65).abs() < 1e-12);
    }

    #[test]
    fn pure_anchor_limit() {
        let mut s = SwitchingState::initial(0);
        s.set_history(3.0, 3.0, 0.75);
        let p = SwitchingParams {
            omega_aa: 1.0,
            ..params()
        };
        assert_eq!(forecast(Heuristic::AnchorAdjust, &s, &p), 0.75);
    }

    #[test]
    fn full_memory_freezes_scores() {
        let mut s = SwitchingState::initial(0);
        s.scores = [-1.0, -2.0, -3.0, -4.0, -5.0];
        s.forecasts = [1.0, 2.0, 3.0, 4.0, 5.0];
        let p = SwitchingParams {
            eta: 1.0,
            ..params()
        };
        update_scores(&mut s, &p, 10.0);
        assert_eq!(s.scores, [-1.0, -2.0, -3.0, -4.0, -5.0]);
    }

    #[test]
    fn zero_memory_uses_latest_error() {
        let mut s = SwitchingState::initial(0);
        s.scores = [7.0; 5];
        s.forecasts = [0.0; 5];
        let p = SwitchingParams {
            eta: 0.0,
            ..params()
        };
        update_scores(&mut s, &p, 2.0);
        assert_eq!(s.scores, [-4.0; 5]);
    }

    #[test]
    fn score_recurrence_baseline_eta() {
        let mut s = SwitchingState::initial(0);
        s.scores = [-1.0; 5];
        s.forecasts = [0.0; 5];
        update_scores(&mut s, &params(), 1.0);
        for u in s.scores {
            assert!((u + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_intensity_gives_uniform_logit() {
        let mut s = SwitchingState::initial(0);
        s.scores = [-1.0, -5.0, 0.0, -2.0, -9.0];
        s.shares = [0.5, 0.1, 0.1, 0.2, 0.1];
        let p = SwitchingParams {
            beta: 0.0,
            delta_s: 0.0,
            ..params()
        };
        switch_shares(&mut s, &p);
        for n in s.shares {
            assert!((n - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn full_inertia_keeps_shares() {
        let mut s = SwitchingState::initial(0);
        s.scores = [-1.0, -5.0, 0.0, -2.0, -9.0];
        s.shares = [0.5, 0.1, 0.1, 0.2, 0.1];
        let before = s.shares;
        let p = SwitchingParams {
            delta_s: 1.0,
            ..params()
        };
        switch_shares(&mut s, &p);
        for (a, b) in s.shares.iter().zip(before) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn large_intensity_selects_best_rule() {
        let mut s = SwitchingState::initial(0);
        s.scores = [-1.0, -0.5, -0.2, -3.0, -0.9];
        let p = SwitchingParams {
            beta: 1e3,
            delta_s: 0.0,
            ..params()
        };
        switch_shares(&mut s, &p);
        assert!((s.shares[2] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn huge_scores_do_not_overflow() {
        let mut s = SwitchingState::initial(0);
        s.scores = [-1e300, -1e300, 0.0, -5e299, -1e10];
        let p = SwitchingParams {
            beta: 10.0,
            delta_s: 0.0,
            ..params()
        };
        switch_shares(&mut s, &p);
        assert!(s.shares.iter().all(|x| x.is_finite()));
        assert!((s.shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_noise_aggregate() {
        let mut s = SwitchingState::initial(0);
        s.set_history(1.5, 1.5, 1.5);
        s.ada_memory = 1.5;
        let p = SwitchingParams {
            noise_sd: 1e-300,
            ..params()
        };
        switching_step(&mut s, &p);
        assert!((s.x_last - 0.9 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn seeded_trajectory_is_reproducible() {
        let run = |seed| {
            let mut m = SwitchingModel::new(params());
            m.reset(seed);
            (0..100)
                .map(|_| {
                    m.step();
                    m.observe("X").unwrap()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn stationary_mean_near_zero() {
        let p = params();
        let mut grand = 0.0;
        for seed in 0..30 {
            let mut m = SwitchingModel::new(p);
            m.reset(seed);
            let mut sum = 0.0;
            for t in 2..=600 {
                m.step();
                if t >= 200 {
                    sum += m.observe("X").unwrap();
                }
            }
            grand += sum / 401.0;
        }
        let mean = grand / 30.0;
        assert!(mean.abs() < 0.05, "{mean}");
    }

    #[test]
    fn score_lower_bound_on_bounded_trajectories() {
        for seed in 0..5 {
            let p = params();
            let mut s = SwitchingState::initial(seed);
            let mut max_sq = 0.0f64;
            for _ in 0..1000 {
                switching_step(&mut s, &p);
                for f in s.forecasts {
                    max_sq = max_sq.max((s.x_last - f).powi(2));
                }
                let bound = -max_sq / (1.0 - p.eta);
                assert!(s.scores.iter().all(|&u| u >= bound - 1e-12));
            }
        }
    }

    #[test]
    fn observables() {
        let mut m = SwitchingModel::new(params());
        m.reset(1);
        m.step();
        assert_eq!(m.observe("SHARE3"), Some(m.state().shares[2]));
        assert_eq!(m.observe("SHARE0"), None);
        assert_eq!(m.observe("SHARE6"), None);
        assert!(m.observe("FERR").unwrap() >= 0.0);
        assert_eq!(builtin_observe(&m, "BOGUS"), -1.0);
    }

    #[test]
    fn bernoulli_support() {
        let mut m = Calibration::bernoulli(0.3);
        m.reset(9);
        for _ in 0..1000 {
            let x = m.observe("X").unwrap();
            assert!(x == 0.0 || x == 1.0);
            m.step();
        }
    }

    #[test]
    fn counter_mirrors_steps() {
        let mut c = Counter::default();
        c.reset(123);
        assert_eq!(c.observe("VAL"), Some(1.0));
        c.step();
        c.step();
        assert_eq!(c.observe("VAL"), Some(3.0));
    }

    #[test]
    fn model_spec_parsing() {
        assert_eq!("counter".parse(), Ok(BuiltinModel::Counter));
        assert_eq!(
            "bernoulli:0.3".parse(),
            Ok(BuiltinModel::Bernoulli { p: 0.3 })
        );
        assert_eq!(
            "gaussian:1,0.5".parse(),
            Ok(BuiltinModel::Gaussian { mu: 1.0, sd: 0.5 })
        );
        let m: BuiltinModel = "switching:beta=0.2,eta=0.5".parse().unwrap();
        assert_eq!(m.to_string(), "switching:beta=0.2,eta=0.5");
        assert_eq!(m.to_string().parse::<BuiltinModel>().unwrap(), m);
        assert!("bernoulli:1.5".parse::<BuiltinModel>().is_err());
        assert!("gaussian:0".parse::<BuiltinModel>().is_err());
        assert!("switching:gamma=1".parse::<BuiltinModel>().is_err());
        assert!("nope".parse::<BuiltinModel>().is_err());
    }

    #[test]
    fn sweep_parameter_override() {
        let mut m: BuiltinModel = "switching".parse().unwrap();
        m.set_param("omega_str", 2.5).unwrap();
        assert!(matches!(m, BuiltinModel::Switching(p) if p.omega_str == 2.5));
        assert!(m.set_param("delta_s", 1.5).is_err());
        assert!(BuiltinModel::Counter.set_param("beta", 1.0).is_err());
    }

    fn arb_params() -> impl Strategy<Value = SwitchingParams> {
        (
            0.0f64..10.0,
            0.0f64..=1.0,
            0.0f64..=1.0,
            0.0f64..1.5,
            0.0f64..1.0,
            0.0f64..3.0,
            0.0f64..=1.0,
            0.05f64..0.99,
            0.01f64..1.0,
        )
            .prop_map(
                |(
                    beta,
                    delta_s,
                    eta,
                    omega_ada,
                    omega_wtr,
                    omega_str,
                    omega_aa,
                    feedback,
                    noise_sd,
                )| {
                    SwitchingParams {
                        beta,
                        delta_s,
                        eta,
                        omega_ada,
                        omega_wtr,
                        omega_str,
                        omega_aa,
                        feedback,
                        noise_sd,
                    }
                },
            )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn shares_stay_on_simplex(p in arb_params(), seed in any::<u64>()) {
            let mut s = SwitchingState::initial(seed);
            for _ in 0..50 {
                switching_step(&mut s, &p);
                let total: f64 = s.shares.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!(s.shares.iter().all(|&n| n >= 0.0));
            }
        }

        #[test]
        fn uniform_without_intensity_or_inertia(p in arb_params(), seed in any::<u64>()) {
            let p = SwitchingParams { beta: 0.0, delta_s: 0.0, ..p };
            let mut s = SwitchingState::initial(seed);
            for _ in 0..50 {
                switching_step(&mut s, &p);
                prop_assert!(s.shares.iter().all(|&n| (n - 0.2).abs() < 1e-15));
            }
        }
    }
}
