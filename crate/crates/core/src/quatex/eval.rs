use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use super::plan::{ObservationPlan, Probe};
use super::{Call, CmpOp, Expr, QueryAst};
use crate::blackbox::{SimError, SimulatorHandle};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Simulator(#[from] SimError),
    #[error("query needs step {step} but the horizon is {horizon}")]
    HorizonExceeded { step: u64, horizon: u64 },
    #[error("type error: {0}")]
    Type(String),
    #[error("`#` reached where a value is required, in `{0}`")]
    TemporalInValuePosition(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Num(f64),
    Str(String),
    Bool(bool),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Num(v) => write!(f, "{v}"),
            Value::Str(s) => write!(f, "{s:?}"),
            Value::Bool(b) => write!(f, "{b}"),
        }
    }
}

/// Result of evaluating in one state: a value, or a call deferred to the
/// next state.
enum Outcome {
    Value(Value),
    Next(Call, Vec<Value>),
}

/// Per-step observable cache so one state is never queried twice for the
/// same name.
struct State<'a> {
    sim: &'a mut SimulatorHandle,
    cache: HashMap<String, f64>,
}

impl State<'_> {
    fn read(&mut self, name: &str) -> Result<f64, EvalError> {
        if let Some(&v) = self.cache.get(name) {
            return Ok(v);
        }
        let v = self.sim.observe(name)?;
        self.cache.insert(name.to_string(), v);
        Ok(v)
    }

    fn advance(&mut self) -> Result<(), EvalError> {
        self.cache.clear();
        self.sim.advance()?;
        Ok(())
    }
}

fn compare(op: CmpOp, a: &Value, b: &Value) -> Result<bool, EvalError> {
    use std::cmp::Ordering;
    let ord = match (a, b) {
        (Value::Num(x), Value::Num(y)) => x.partial_cmp(y),
        (Value::Str(x), Value::Str(y)) => Some(x.cmp(y)),
        (Value::Bool(x), Value::Bool(y)) => Some(x.cmp(y)),
        _ => return Err(EvalError::Type(format!("cannot compare {a} with {b}"))),
    };
    Ok(match (op, ord) {
        (CmpOp::Eq, o) => o == Some(Ordering::Equal),
        (CmpOp::Ne, o) => o != Some(Ordering::Equal),
        (_, None) => false,
        (CmpOp::Lt, Some(o)) => o == Ordering::Less,
        (CmpOp::Le, Some(o)) => o != Ordering::Greater,
        (CmpOp::Gt, Some(o)) => o == Ordering::Greater,
        (CmpOp::Ge, Some(o)) => o != Ordering::Less,
    })
}

struct Evaluator<'q> {
    ast: &'q QueryAst,
}

impl Evaluator<'_> {
    fn value(
        &self,
        expr: &Expr,
        env: &HashMap<&str, Value>,
        state: &mut State<'_>,
    ) -> Result<Value, EvalError> {
        match self.eval(expr, env, state)? {
            Outcome::Value(v) => Ok(v),
            Outcome::Next(..) => Err(EvalError::TemporalInValuePosition(expr.to_string())),
        }
    }

    fn eval(
        &self,
        expr: &Expr,
        env: &HashMap<&str, Value>,
        state: &mut State<'_>,
    ) -> Result<Outcome, EvalError> {
        Ok(Outcome::Value(match expr {
            Expr::Num(v) => Value::Num(*v),
            Expr::Str(s) => Value::Str(s.clone()),
            Expr::Param(p) => env
                .get(p.as_str())
                .cloned()
                .ok_or_else(|| EvalError::Type(format!("unbound name `{p}`")))?,
            Expr::Rval(arg) => match self.value(arg, env, state)? {
                Value::Str(name) => Value::Num(state.read(&name)?),
                other => {
                    return Err(EvalError::Type(format!(
                        "rval expects an observable name, got {other}"
                    )))
                }
            },
            Expr::Cmp(op, a, b) => {
                let a = self.value(a, env, state)?;
                let b = self.value(b, env, state)?;
                Value::Bool(compare(*op, &a, &b)?)
            }
            Expr::If {
                cond,
                then,
                otherwise,
            } => {
                return match self.value(cond, env, state)? {
                    Value::Bool(true) => self.eval(then, env, state),
                    Value::Bool(false) => self.eval(otherwise, env, state),
                    other => Err(EvalError::Type(format!(
                        "if condition must be a comparison, got {other}"
                    ))),
                }
            }
            Expr::Next(call) => {
                let args = call
                    .args
                    .iter()
                    .map(|a| self.value(a, env, state))
                    .collect::<Result<Vec<_>, _>>()?;
                return Ok(Outcome::Next(call.clone(), args));
            }
            Expr::Call(call) => {
                let args = call
                    .args
                    .iter()
                    .map(|a| self.value(a, env, state))
                    .collect::<Result<Vec<_>, _>>()?;
                return self.apply(call, args, state);
            }
        }))
    }

    fn apply(
        &self,
        call: &Call,
        args: Vec<Value>,
        state: &mut State<'_>,
    ) -> Result<Outcome, EvalError> {
        let def = self
            .ast
            .definition(&call.name)
            .ok_or_else(|| EvalError::Type(format!("unknown operator `{}`", call.name)))?;
        let env: HashMap<&str, Value> = def.params.iter().map(String::as_str).zip(args).collect();
        self.eval(&def.body, &env, state)
    }
}

fn as_sample(v: Value) -> Result<f64, EvalError> {
    match v {
        Value::Num(x) => Ok(x),
        Value::Bool(b) => Ok(if b { 1.0 } else { 0.0 }),
        Value::Str(s) => Err(EvalError::Type(format!(
            "query evaluated to string {s:?}, expected a number"
        ))),
    }
}

/// Drives one run seeded with `seed` and returns one sample per plan point,
/// in plan order. A single trace serves all points.
pub fn evaluate_run(
    ast: &QueryAst,
    plan: &ObservationPlan,
    sim: &mut SimulatorHandle,
    seed: u64,
) -> Result<Vec<f64>, EvalError> {
    if plan.max_step() > plan.horizon() {
        return Err(EvalError::HorizonExceeded {
            step: plan.max_step(),
            horizon: plan.horizon(),
        });
    }
    let schedule = plan.schedule();
    let last_direct = schedule.keys().next_back().copied().unwrap_or(0);
    let mut samples: Vec<Option<f64>> = vec![None; plan.len()];
    let mut pending: Vec<(usize, Call, Vec<Value>)> = plan
        .points()
        .iter()
        .enumerate()
        .filter_map(|(i, p)| match &p.probe {
            Probe::Generic(call, args) => Some((i, call.clone(), args.clone())),
            Probe::Direct => None,
        })
        .collect();
    let evaluator = Evaluator { ast };

    sim.reset(seed)?;
    let mut state = State {
        sim,
        cache: HashMap::new(),
    };
    let mut step = 1;
    loop {
        if let Some(indices) = schedule.get(&step) {
            for &i in indices {
                samples[i] = Some(state.read(&plan.points()[i].observable)?);
            }
        }
        let mut still_pending = Vec::with_capacity(pending.len());
        for (i, call, args) in pending {
            match evaluator.apply(&call, args, &mut state)? {
                Outcome::Value(v) => samples[i] = Some(as_sample(v)?),
                Outcome::Next(call, args) => still_pending.push((i, call, args)),
            }
        }
        pending = still_pending;
        if pending.is_empty() && step >= last_direct {
            break;
        }
        if step >= plan.max_step() {
            return Err(EvalError::HorizonExceeded {
                step: step + 1,
                horizon: plan.horizon(),
            });
        }
        state.advance()?;
        step += 1;
    }
    state.sim.finish_run();
    Ok(samples
        .into_iter()
        .map(|s| s.expect("every point resolved"))
        .collect())
}
