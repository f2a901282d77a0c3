use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use super::eval::Value;
use super::{Call, CmpOp, Expr, QueryAst};
use crate::blackbox::STEPS;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("query has no eval directive")]
    NoDirectives,
    #[error("observable name `{0}` is not bound (pass it as NAME=OBSERVABLE)")]
    UnresolvedObservable(String),
    #[error("parametric grid is empty")]
    EmptyGrid,
    #[error("grid value {0} is not a positive step index")]
    NonPositiveStep(i64),
    #[error("directive argument `{0}` must be a literal or a bound name")]
    DynamicArgument(String),
    #[error("observation point (step {step}, `{observable}`) appears twice")]
    DuplicatePoint { step: u64, observable: String },
    #[error("horizon must be positive")]
    ZeroHorizon,
}

/// How a plan point obtains its value from a run.
#[derive(Debug, Clone, PartialEq)]
pub(super) enum Probe {
    /// Read `observable` when the run reaches `step`.
    Direct,
    /// Evaluate the call by small-step expansion.
    Generic(Call, Vec<Value>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanPoint {
    pub step: u64,
    /// Observable name for direct reads, or the instantiated call text.
    pub observable: String,
    pub(super) probe: Probe,
}

impl PlanPoint {
    pub fn is_direct(&self) -> bool {
        matches!(self.probe, Probe::Direct)
    }
}

/// What one run must report, in output order.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPlan {
    points: Vec<PlanPoint>,
    max_step: u64,
    horizon: u64,
}

impl ObservationPlan {
    pub fn points(&self) -> &[PlanPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Last step a run must reach.
    pub fn max_step(&self) -> u64 {
        self.max_step
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    /// Direct reads grouped by step.
    pub(super) fn schedule(&self) -> BTreeMap<u64, Vec<usize>> {
        let mut schedule: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, p) in self.points.iter().enumerate() {
            if p.is_direct() {
                schedule.entry(p.step).or_default().push(i);
            }
        }
        schedule
    }
}

/// Expands the directives into observation points. Directives of the
/// `obsAtStep` shape become direct reads at the requested steps; anything
/// else is evaluated generically and may run up to `horizon`.
pub fn expand_parametric(
    ast: &QueryAst,
    bindings: &BTreeMap<String, String>,
    horizon: u64,
) -> Result<ObservationPlan, PlanError> {
    expand(ast, bindings, horizon, true)
}

/// Like [`expand_parametric`] but evaluates every point generically.
pub fn expand_generic(
    ast: &QueryAst,
    bindings: &BTreeMap<String, String>,
    horizon: u64,
) -> Result<ObservationPlan, PlanError> {
    expand(ast, bindings, horizon, false)
}

fn expand(
    ast: &QueryAst,
    bindings: &BTreeMap<String, String>,
    horizon: u64,
    allow_direct: bool,
) -> Result<ObservationPlan, PlanError> {
    if horizon == 0 {
        return Err(PlanError::ZeroHorizon);
    }
    if ast.directives.is_empty() {
        return Err(PlanError::NoDirectives);
    }
    let mut points = Vec::new();
    for directive in &ast.directives {
        let mut env: HashMap<&str, Value> = bindings
            .iter()
            .map(|(k, v)| (k.as_str(), Value::Str(v.clone())))
            .collect();
        match &directive.parametric {
            Some(grid) => {
                if grid.values().next().is_none() {
                    return Err(PlanError::EmptyGrid);
                }
                for v in grid.values() {
                    if v < 1 {
                        return Err(PlanError::NonPositiveStep(v));
                    }
                    env.insert(grid.var.as_str(), Value::Num(v as f64));
                    points.push(instantiate(
                        ast,
                        &directive.target,
                        &env,
                        v as u64,
                        allow_direct,
                    )?);
                }
            }
            None => points.push(instantiate(
                ast,
                &directive.target,
                &env,
                horizon,
                allow_direct,
            )?),
        }
    }
    let mut last: HashMap<&str, u64> = HashMap::new();
    for p in &points {
        if let Some(&prev) = last.get(p.observable.as_str()) {
            if p.step <= prev {
                return Err(PlanError::DuplicatePoint {
                    step: p.step,
                    observable: p.observable.clone(),
                });
            }
        }
        last.insert(&p.observable, p.step);
    }
    let max_step = if points.iter().all(PlanPoint::is_direct) {
        points.iter().map(|p| p.step).max().unwrap_or(horizon)
    } else {
        horizon
    };
    Ok(ObservationPlan {
        points,
        max_step,
        horizon,
    })
}

fn static_value(expr: &Expr, env: &HashMap<&str, Value>) -> Result<Value, PlanError> {
    match expr {
        Expr::Num(v) => Ok(Value::Num(*v)),
        Expr::Str(s) => Ok(Value::Str(s.clone())),
        Expr::Param(name) => env
            .get(name.as_str())
            .cloned()
            .ok_or_else(|| PlanError::UnresolvedObservable(name.clone())),
        other => Err(PlanError::DynamicArgument(other.to_string())),
    }
}

fn instantiate(
    ast: &QueryAst,
    target: &Call,
    env: &HashMap<&str, Value>,
    label_step: u64,
    allow_direct: bool,
) -> Result<PlanPoint, PlanError> {
    let args = target
        .args
        .iter()
        .map(|a| static_value(a, env))
        .collect::<Result<Vec<_>, _>>()?;
    if allow_direct {
        if let Some((step, observable)) = direct_read(ast, target, &args) {
            return Ok(PlanPoint {
                step,
                observable,
                probe: Probe::Direct,
            });
        }
    }
    let rendered: Vec<String> = args.iter().map(Value::to_string).collect();
    Ok(PlanPoint {
        step: label_step,
        observable: format!("{}({})", target.name, rendered.join(", ")),
        probe: Probe::Generic(target.clone(), args),
    })
}

fn param_index(params: &[String], expr: &Expr) -> Option<usize> {
    match expr {
        Expr::Param(p) => params.iter().position(|q| q == p),
        _ => None,
    }
}

fn is_steps_read(expr: &Expr) -> bool {
    matches!(expr, Expr::Rval(arg) if matches!(&**arg, Expr::Str(s) if s == STEPS))
}

/// Recognizes `f(.., x, .., o, ..) = if rval("steps") == x then rval(o)
/// else # f(same params) fi` and returns the step and observable it reads.
fn direct_read(ast: &QueryAst, target: &Call, args: &[Value]) -> Option<(u64, String)> {
    let def = ast.definition(&target.name)?;
    let Expr::If {
        cond,
        then,
        otherwise,
    } = &def.body
    else {
        return None;
    };
    let Expr::Cmp(CmpOp::Eq, lhs, rhs) = &**cond else {
        return None;
    };
    let step_param = if is_steps_read(lhs) {
        param_index(&def.params, rhs)?
    } else if is_steps_read(rhs) {
        param_index(&def.params, lhs)?
    } else {
        return None;
    };
    let Expr::Rval(obs_expr) = &**then else {
        return None;
    };
    let observable = match &**obs_expr {
        Expr::Str(s) => s.clone(),
        e => match &args[param_index(&def.params, e)?] {
            Value::Str(s) => s.clone(),
            _ => return None,
        },
    };
    let Expr::Next(recur) = &**otherwise else {
        return None;
    };
    let same_args = recur.name == def.name
        && recur.args.len() == def.params.len()
        && recur
            .args
            .iter()
            .zip(&def.params)
            .all(|(a, p)| matches!(a, Expr::Param(q) if q == p));
    if !same_args {
        return None;
    }
    match args[step_param] {
        Value::Num(v) if v >= 1.0 && v.fract() == 0.0 && v <= u64::MAX as f64 => {
            Some((v as u64, observable))
        }
        _ => None,
    }
}
