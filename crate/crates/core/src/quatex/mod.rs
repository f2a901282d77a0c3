//! Transient expectation queries.
//!
//! A query file holds operator definitions and `eval` directives:
//!
//! ```text
//! obsAtStep(x, obs) =
//!   if (s.rval("steps") == x) then s.rval(obs)
//!   else # obsAtStep(x, obs) fi;
//!
//! eval parametric(E[obsAtStep(x, obs)], x, 101, 10, 600);
//! ```
//!
//! `#` defers the wrapped call to the next simulation step. `rval` reads an
//! observable of the current state; `steps` is the engine's step counter.
//! Comparisons are non-associative; parenthesize to nest them.

mod eval;
mod lexer;
mod parser;
mod plan;

use std::fmt;

use thiserror::Error;

pub use eval::{evaluate_run, EvalError};
pub use lexer::{tokenize, Token, TokenKind};
pub use parser::parse;
pub use plan::{expand_generic, expand_parametric, ObservationPlan, PlanError, PlanPoint};

/// 1-based source position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueryError {
    #[error("{pos}: {message}")]
    Lex { pos: Pos, message: String },
    #[error("{pos}: syntax error: found {found}, expected {}", expected.join(" or "))]
    Syntax {
        pos: Pos,
        found: String,
        expected: Vec<String>,
    },
    #[error("{pos}: unknown operator `{name}`")]
    UnknownOperator { pos: Pos, name: String },
    #[error("{pos}: operator `{name}` takes {expected} argument(s), {found} given")]
    ArityMismatch {
        pos: Pos,
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("{pos}: `{name}` is not a parameter of `{definition}`")]
    UnboundName {
        pos: Pos,
        name: String,
        definition: String,
    },
    #[error("{pos}: {message}")]
    Duplicate { pos: Pos, message: String },
    #[error("unguarded recursion: {} (every recursive call needs `#`)", cycle.join(" -> "))]
    UnguardedRecursion { cycle: Vec<String> },
    #[error("{pos}: invalid parametric grid: {message}")]
    InvalidGrid { pos: Pos, message: String },
}

impl QueryError {
    pub fn pos(&self) -> Option<Pos> {
        match self {
            QueryError::Lex { pos, .. }
            | QueryError::Syntax { pos, .. }
            | QueryError::UnknownOperator { pos, .. }
            | QueryError::ArityMismatch { pos, .. }
            | QueryError::UnboundName { pos, .. }
            | QueryError::Duplicate { pos, .. }
            | QueryError::InvalidGrid { pos, .. } => Some(*pos),
            QueryError::UnguardedRecursion { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl fmt::Display for CmpOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Call {
    pub name: String,
    pub args: Vec<Expr>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Str(String),
    /// Formal parameter, or a free name inside a directive.
    Param(String),
    Rval(Box<Expr>),
    Cmp(CmpOp, Box<Expr>, Box<Expr>),
    If {
        cond: Box<Expr>,
        then: Box<Expr>,
        otherwise: Box<Expr>,
    },
    /// `# call`: evaluate `call` in the next state.
    Next(Call),
    Call(Call),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Definition {
    pub name: String,
    pub params: Vec<String>,
    pub body: Expr,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Parametric {
    pub var: String,
    pub lo: i64,
    pub step: i64,
    pub hi: i64,
}

impl Parametric {
    pub fn values(&self) -> impl Iterator<Item = i64> + '_ {
        (self.lo..=self.hi).step_by(self.step as usize)
    }

    pub fn len(&self) -> usize {
        ((self.hi - self.lo) / self.step + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// `eval E[target]`, optionally expanded over an integer grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalDirective {
    pub target: Call,
    pub parametric: Option<Parametric>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueryAst {
    pub definitions: Vec<Definition>,
    pub directives: Vec<EvalDirective>,
}

impl QueryAst {
    pub fn definition(&self, name: &str) -> Option<&Definition> {
        self.definitions.iter().find(|d| d.name == name)
    }
}

/// The query shape of a transient observation: wait for step `x`, then read
/// the observable.
pub const OBS_AT_STEP_QUERY: &str = "obsAtStep(x, obs) =
  if (s.rval(\"steps\") == x) then s.rval(obs)
  else # obsAtStep(x, obs) fi;
";

/// Query text observing `obs` on the grid `lo, lo+step, ..., <= hi`.
pub fn obs_at_step_query(lo: u64, step: u64, hi: u64) -> String {
    format!("{OBS_AT_STEP_QUERY}\neval parametric(E[obsAtStep(x, obs)], x, {lo}, {step}, {hi});\n")
}

fn write_num(f: &mut fmt::Formatter<'_>, v: f64) -> fmt::Result {
    // Debug formatting is the shortest round-tripping representation.
    write!(f, "{v:?}")
}

fn write_str_lit(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    f.write_str("\"")?;
    for c in s.chars() {
        match c {
            '"' => f.write_str("\\\"")?,
            '\\' => f.write_str("\\\\")?,
            '\n' => f.write_str("\\n")?,
            c => write!(f, "{c}")?,
        }
    }
    f.write_str("\"")
}

impl fmt::Display for Call {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.name)?;
        for (i, a) in self.args.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{a}")?;
        }
        f.write_str(")")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write_num(f, *v),
            Expr::Str(s) => write_str_lit(f, s),
            Expr::Param(p) => f.write_str(p),
            Expr::Rval(e) => write!(f, "s.rval({e})"),
            Expr::Cmp(op, a, b) => write!(f, "({a} {op} {b})"),
            Expr::If {
                cond,
                then,
                otherwise,
            } => write!(f, "if {cond} then {then} else {otherwise} fi"),
            Expr::Next(c) => write!(f, "# {c}"),
            Expr::Call(c) => write!(f, "{c}"),
        }
    }
}

impl fmt::Display for Definition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}({}) = {};",
            self.name,
            self.params.join(", "),
            self.body
        )
    }
}

impl fmt::Display for EvalDirective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.parametric {
            Some(p) => write!(
                f,
                "eval parametric(E[{}], {}, {}, {}, {});",
                self.target, p.var, p.lo, p.step, p.hi
            ),
            None => write!(f, "eval E[{}];", self.target),
        }
    }
}

impl fmt::Display for QueryAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.definitions {
            writeln!(f, "{d}")?;
        }
        for d in &self.directives {
            writeln!(f, "{d}")?;
        }
        Ok(())
    }
}
