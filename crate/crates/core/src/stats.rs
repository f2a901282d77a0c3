//! Online moments, Student-t confidence intervals and the per-point
//! stopping rule.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("sample {0} is not finite")]
    NonFinite(f64),
    #[error("probability {0} is outside (0, 1)")]
    ProbabilityOutOfRange(f64),
    #[error("degrees of freedom must be positive")]
    ZeroDof,
    #[error("confidence interval needs at least 2 samples, have {0}")]
    TooFewSamples(u64),
    #[error("invalid stopping policy: {0}")]
    InvalidPolicy(String),
}

/// Welford accumulator for count, mean and sum of squared deviations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStat {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStat {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, x: f64) -> Result<(), StatsError> {
        if !x.is_finite() {
            return Err(StatsError::NonFinite(x));
        }
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn m2(&self) -> f64 {
        self.m2
    }

    /// Unbiased sample variance; zero for fewer than two samples.
    pub fn sample_variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }
}

/// Inverse CDF of Student's t distribution with `dof` degrees of freedom.
pub fn t_quantile(p: f64, dof: u64) -> Result<f64, StatsError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(StatsError::ProbabilityOutOfRange(p));
    }
    if dof == 0 {
        return Err(StatsError::ZeroDof);
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    // Work in the upper half and mirror.
    let (upper, sign) = if p > 0.5 { (p, 1.0) } else { (1.0 - p, -1.0) };
    let nu = dof as f64;
    let t = match dof {
        1 => (std::f64::consts::PI * (upper - 0.5)).tan(),
        2 => {
            let a = 4.0 * upper * (1.0 - upper);
            2.0 * (upper - 0.5) * (2.0 / a).sqrt()
        }
        _ => {
            let guess = cornish_fisher(upper, nu);
            if dof > 1000 {
                guess
            } else {
                newton_refine(upper, nu, guess)
            }
        }
    };
    Ok(sign * t)
}

fn standard_normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Asymptotic expansion of the t quantile around the normal quantile.
fn cornish_fisher(p: f64, nu: f64) -> f64 {
    let z = standard_normal_quantile(p);
    let z2 = z * z;
    let z3 = z2 * z;
    let z5 = z3 * z2;
    let z7 = z5 * z2;
    let z9 = z7 * z2;
    let g1 = (z3 + z) / 4.0;
    let g2 = (5.0 * z5 + 16.0 * z3 + 3.0 * z) / 96.0;
    let g3 = (3.0 * z7 + 19.0 * z5 + 17.0 * z3 - 15.0 * z) / 384.0;
    let g4 = (79.0 * z9 + 776.0 * z7 + 1482.0 * z5 - 1920.0 * z3 - 945.0 * z) / 92160.0;
    z + g1 / nu + g2 / (nu * nu) + g3 / (nu * nu * nu) + g4 / (nu * nu * nu * nu)
}

fn t_cdf_upper(t: f64, nu: f64) -> f64 {
    // P(T <= t) for t >= 0.
    let x = nu / (nu + t * t);
    1.0 - 0.5 * beta_reg(nu / 2.0, 0.5, x)
}

fn t_density(t: f64, nu: f64) -> f64 {
    let log_norm =
        ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * (nu * std::f64::consts::PI).ln();
    (log_norm - (nu + 1.0) / 2.0 * (1.0 + t * t / nu).ln()).exp()
}

fn newton_refine(p: f64, nu: f64, mut t: f64) -> f64 {
    for _ in 0..50 {
        let step = (t_cdf_upper(t, nu) - p) / t_density(t, nu);
        t -= step;
        if step.abs() <= 1e-13 * t.abs().max(1.0) {
            break;
        }
    }
    t
}

/// Two-sided normal critical value `z_{1 - alpha/2}`.
pub fn z_critical(alpha: f64) -> Result<f64, StatsError> {
    let p = 1.0 - alpha / 2.0;
    if !(p > 0.0 && p < 1.0) {
        return Err(StatsError::ProbabilityOutOfRange(p));
    }
    Ok(standard_normal_quantile(p))
}

/// Student-t confidence-interval half-width at level `1 - alpha`.
pub fn half_width(stat: &RunningStat, alpha: f64) -> Result<f64, StatsError> {
    if stat.n < 2 {
        return Err(StatsError::TooFewSamples(stat.n));
    }
    let t = t_quantile(1.0 - alpha / 2.0, stat.n - 1)?;
    Ok(t * stat.sample_variance().sqrt() / (stat.n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingPolicy {
    pub alpha: f64,
    pub delta: f64,
    pub block_size: u64,
    pub max_runs: Option<u64>,
}

impl StoppingPolicy {
    pub fn new(alpha: f64, delta: f64, block_size: u64) -> Result<Self, StatsError> {
        let policy = StoppingPolicy {
            alpha,
            delta,
            block_size,
            max_runs: None,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn with_max_runs(mut self, max_runs: Option<u64>) -> Result<Self, StatsError> {
        self.max_runs = max_runs;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), StatsError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(StatsError::InvalidPolicy(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(StatsError::InvalidPolicy(format!(
                "delta must be positive, got {}",
                self.delta
            )));
        }
        if self.block_size < 2 {
            return Err(StatsError::InvalidPolicy(format!(
                "block size must be at least 2, got {}",
                self.block_size
            )));
        }
        if self.max_runs == Some(0) {
            return Err(StatsError::InvalidPolicy(
                "max runs must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Statistics for one observation point, frozen once its interval is tight
/// enough.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointAccumulator {
    stat: RunningStat,
    frozen: Option<FrozenEstimate>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrozenEstimate {
    pub n: u64,
    pub mean: f64,
    pub half_width: f64,
}

impl PointAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a sample unless the point is already frozen.
    pub fn update(&mut self, x: f64) -> Result<(), StatsError> {
        if self.frozen.is_some() {
            return Ok(());
        }
        self.stat.update(x)
    }

    pub fn stat(&self) -> &RunningStat {
        &self.stat
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    pub fn frozen(&self) -> Option<&FrozenEstimate> {
        self.frozen.as_ref()
    }

    /// Records the current estimate as final. Idempotent.
    pub fn freeze(&mut self, alpha: f64) -> Result<(), StatsError> {
        if self.frozen.is_none() {
            self.frozen = Some(FrozenEstimate {
                n: self.stat.n,
                mean: self.stat.mean,
                half_width: half_width(&self.stat, alpha)?,
            });
        }
        Ok(())
    }
}

/// True iff at least one block has been seen and the interval half-width
/// meets the precision target.
pub fn check_convergence(acc: &PointAccumulator, policy: &StoppingPolicy) -> bool {
    let n = acc.stat.n;
    if n < policy.block_size || n < 2 {
        return false;
    }
    if acc.stat.m2 == 0.0 {
        return true;
    }
    match half_width(&acc.stat, policy.alpha) {
        Ok(hw) => hw <= policy.delta,
        Err(_) => false,
    }
}
