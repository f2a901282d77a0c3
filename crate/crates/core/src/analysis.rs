//! Separation metrics, trade-off classification and the cross-experiment
//! scorecard, computed from persisted campaign results.
//!
//! A *sweep* here is the set of estimated trajectories of one observable
//! across the values of one experiment, indexed by sweep point.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::campaign::{
    read_trajectory_csv, CampaignConfig, CampaignError, Direction, JobStatus, Manifest,
};
use crate::stats::{t_quantile, z_critical, StatsError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("estimates at different steps ({0} vs {1})")]
    StepMismatch(u64, u64),
    #[error("sweep points do not share one grid")]
    GridMismatch,
    #[error("an estimate needs n >= 2 to recover its spread, got {0}")]
    TooFewSamples(u64),
    #[error("tail window is empty")]
    EmptyTail,
    #[error("no sweep points")]
    NoPoints,
    #[error("observable `{0}` is not part of the campaign")]
    MissingObservable(String),
    #[error("trade-off pair needs two distinct observables")]
    BadPair,
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Campaign(#[from] CampaignError),
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointEstimate {
    pub step: u64,
    pub mean: f64,
    pub half_width: f64,
    pub n: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SignificanceTest {
    /// Two-sample z-test on standard deviations recovered from the stored
    /// half-widths.
    #[default]
    ZTest,
    /// Significant iff the two confidence intervals are disjoint.
    CiOverlap,
}

/// Sample standard deviation implied by a Student-t half-width.
pub fn recovered_sd(p: &PointEstimate, alpha: f64) -> Result<f64, AnalysisError> {
    if p.n < 2 {
        return Err(AnalysisError::TooFewSamples(p.n));
    }
    let t = t_quantile(1.0 - alpha / 2.0, p.n - 1)?;
    Ok(p.half_width * (p.n as f64).sqrt() / t)
}

/// Whether two estimates of the same step differ significantly; ties at
/// the threshold are not significant.
pub fn significant_pair(
    a: &PointEstimate,
    b: &PointEstimate,
    alpha: f64,
    test: SignificanceTest,
) -> Result<bool, AnalysisError> {
    if a.step != b.step {
        return Err(AnalysisError::StepMismatch(a.step, b.step));
    }
    let diff = (a.mean - b.mean).abs();
    match test {
        SignificanceTest::ZTest => {
            let sa = recovered_sd(a, alpha)?;
            let sb = recovered_sd(b, alpha)?;
            let se = (sa * sa / a.n as f64 + sb * sb / b.n as f64).sqrt();
            Ok(diff > z_critical(alpha)? * se)
        }
        SignificanceTest::CiOverlap => Ok(diff > a.half_width + b.half_width),
    }
}

/// Number of unordered pairs among `k` sweep points.
pub fn pair_count(k: usize) -> usize {
    k * k.saturating_sub(1) / 2
}

fn grid_len(sweep: &[Vec<PointEstimate>]) -> Result<usize, AnalysisError> {
    let first = sweep.first().ok_or(AnalysisError::NoPoints)?;
    for t in sweep {
        if t.len() != first.len() || t.iter().zip(first).any(|(a, b)| a.step != b.step) {
            return Err(AnalysisError::GridMismatch);
        }
    }
    Ok(first.len())
}

/// Pairwise significance among sweep points at grid index `at`.
pub fn significance_matrix(
    sweep: &[Vec<PointEstimate>],
    at: usize,
    alpha: f64,
    test: SignificanceTest,
) -> Result<Vec<Vec<bool>>, AnalysisError> {
    let g = grid_len(sweep)?;
    if at >= g {
        return Err(AnalysisError::GridMismatch);
    }
    let k = sweep.len();
    let mut m = vec![vec![false; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let s = significant_pair(&sweep[i][at], &sweep[j][at], alpha, test)?;
            m[i][j] = s;
            m[j][i] = s;
        }
    }
    Ok(m)
}

fn significant_pairs_at(
    sweep: &[Vec<PointEstimate>],
    at: usize,
    alpha: f64,
    test: SignificanceTest,
) -> Result<Vec<bool>, AnalysisError> {
    let m = significance_matrix(sweep, at, alpha, test)?;
    let k = sweep.len();
    Ok((0..k)
        .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
        .map(|(i, j)| m[i][j])
        .collect())
}

/// Significant pairs at the last grid step, with the total pair count.
pub fn final_diff_count(
    sweep: &[Vec<PointEstimate>],
    alpha: f64,
    test: SignificanceTest,
) -> Result<(usize, usize), AnalysisError> {
    let g = grid_len(sweep)?;
    if g == 0 {
        return Err(AnalysisError::EmptyTail);
    }
    let pairs = significant_pairs_at(sweep, g - 1, alpha, test)?;
    Ok((
        pairs.iter().filter(|&&s| s).count(),
        pair_count(sweep.len()),
    ))
}

/// Length of the tail window: the last `ceil(fraction * grid_len)` points.
pub fn tail_window(grid_len: usize, fraction: f64) -> Result<usize, AnalysisError> {
    if !(fraction > 0.0 && fraction <= 1.0) || grid_len == 0 {
        return Err(AnalysisError::EmptyTail);
    }
    // The small slack keeps products like 0.3 * 50 from rounding up past 15.
    let w = (fraction * grid_len as f64 - 1e-9).ceil() as usize;
    Ok(w.clamp(1, grid_len))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TailMetrics {
    pub window: usize,
    /// Per sweep point, the mean of its estimates over the tail window.
    pub tail_means: Vec<f64>,
    /// Average over tail steps of the fraction of significant pairs.
    pub tail_diff_share: f64,
    /// Pairs significant on at least half of the tail steps.
    pub tail_majority: usize,
    pub total_pairs: usize,
}

pub fn tail_metrics(
    sweep: &[Vec<PointEstimate>],
    alpha: f64,
    fraction: f64,
    test: SignificanceTest,
) -> Result<TailMetrics, AnalysisError> {
    let g = grid_len(sweep)?;
    let window = tail_window(g, fraction)?;
    let tail = g - window..g;
    let tail_means = sweep
        .iter()
        .map(|t| t[tail.clone()].iter().map(|p| p.mean).sum::<f64>() / window as f64)
        .collect();
    let total_pairs = pair_count(sweep.len());
    let mut hits = vec![0usize; total_pairs];
    let mut share_sum = 0.0;
    for at in tail {
        let pairs = significant_pairs_at(sweep, at, alpha, test)?;
        let k = pairs.iter().filter(|&&s| s).count();
        if total_pairs > 0 {
            share_sum += k as f64 / total_pairs as f64;
        }
        for (h, s) in hits.iter_mut().zip(pairs) {
            *h += s as usize;
        }
    }
    Ok(TailMetrics {
        window,
        tail_means,
        tail_diff_share: share_sum / window as f64,
        tail_majority: hits.iter().filter(|&&h| 2 * h >= window).count(),
        total_pairs,
    })
}

/// Label of a 0-based sweep point, e.g. `p1` for index 0.
pub fn point_label(index: usize) -> String {
    format!("p{}", index + 1)
}

/// Best sweep point by tail mean; ties go to the lower index.
pub fn best_tail_point(
    tail_means: &[f64],
    direction: Direction,
) -> Result<(usize, String, f64), AnalysisError> {
    let mut best = 0;
    for (i, &m) in tail_means.iter().enumerate().skip(1) {
        let better = match direction {
            Direction::LowerIsBetter => m < tail_means[best],
            Direction::HigherIsBetter => m > tail_means[best],
        };
        if better {
            best = i;
        }
    }
    let value = *tail_means.get(best).ok_or(AnalysisError::NoPoints)?;
    Ok((best, point_label(best), value))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tradeoff {
    WinWin,
    Mixed,
    LoseLose,
}

fn strictly_better(value: f64, baseline: f64, direction: Direction) -> bool {
    match direction {
        Direction::HigherIsBetter => value > baseline,
        Direction::LowerIsBetter => value < baseline,
    }
}

/// Directional comparison of a sweep point against the baseline on a pair
/// of observables. Any tie makes the point mixed.
pub fn classify_tradeoff(
    point: [f64; 2],
    baseline: [f64; 2],
    directions: [Direction; 2],
) -> Tradeoff {
    let better = [0, 1].map(|i| strictly_better(point[i], baseline[i], directions[i]));
    let worse = [0, 1].map(|i| strictly_better(baseline[i], point[i], directions[i]));
    if better[0] && better[1] {
        Tradeoff::WinWin
    } else if worse[0] && worse[1] {
        Tradeoff::LoseLose
    } else {
        Tradeoff::Mixed
    }
}

/// Results of a campaign, grouped by experiment and observable.
#[derive(Debug, Clone)]
pub struct CampaignData {
    pub config: CampaignConfig,
    /// `(experiment, observable)` to per-sweep-point trajectories; `None`
    /// where the job did not produce one.
    pub sweeps: BTreeMap<(String, String), Vec<Option<Vec<PointEstimate>>>>,
    /// `(experiment, observable)` to per-sweep-point job status.
    pub statuses: BTreeMap<(String, String), Vec<JobStatus>>,
}

impl CampaignData {
    pub fn load(dir: &Path) -> Result<Self, AnalysisError> {
        let manifest = Manifest::load(dir)?;
        let config = manifest.config.clone();
        let mut sweeps = BTreeMap::new();
        let mut statuses = BTreeMap::new();
        for e in &config.experiments {
            for o in &config.observables {
                let key = (e.id.clone(), o.name.clone());
                sweeps.insert(key.clone(), vec![None; e.values.len()]);
                statuses.insert(key, vec![JobStatus::Skipped; e.values.len()]);
            }
        }
        for job in &manifest.jobs {
            let key = (job.spec.experiment.clone(), job.spec.observable.clone());
            let (Some(sweep), Some(status)) = (sweeps.get_mut(&key), statuses.get_mut(&key)) else {
                return Err(CampaignError::Manifest(format!(
                    "job {} is not in the config",
                    job.spec.ordinal
                ))
                .into());
            };
            let v = job.spec.value_index;
            if v >= sweep.len() {
                return Err(CampaignError::Manifest(format!(
                    "job {} has value index {v} out of range",
                    job.spec.ordinal
                ))
                .into());
            }
            status[v] = job.status;
            if let Some(csv) = &job.csv {
                let rows = read_trajectory_csv(&dir.join(csv))?;
                sweep[v] = Some(
                    rows.into_iter()
                        .map(|r| PointEstimate {
                            step: r.step,
                            mean: r.mean,
                            half_width: r.ci_halfwidth,
                            n: r.n_at_convergence,
                        })
                        .collect(),
                );
            }
        }
        Ok(CampaignData {
            config,
            sweeps,
            statuses,
        })
    }

    /// The available trajectories of a sweep with their sweep-point indices.
    pub fn sweep(
        &self,
        experiment: &str,
        observable: &str,
    ) -> (Vec<usize>, Vec<Vec<PointEstimate>>) {
        let mut idx = Vec::new();
        let mut trajectories = Vec::new();
        if let Some(s) = self
            .sweeps
            .get(&(experiment.to_string(), observable.to_string()))
        {
            for (i, t) in s.iter().enumerate() {
                if let Some(t) = t {
                    idx.push(i);
                    trajectories.push(t.clone());
                }
            }
        }
        (idx, trajectories)
    }

    pub fn is_complete(&self, experiment: &str) -> bool {
        self.statuses
            .iter()
            .filter(|((e, _), _)| e == experiment)
            .all(|(_, s)| s.iter().all(|&st| st == JobStatus::Converged))
    }

    fn direction(&self, observable: &str) -> Result<Direction, AnalysisError> {
        self.config
            .observable(observable)
            .map(|o| o.direction)
            .ok_or_else(|| AnalysisError::MissingObservable(observable.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisOptions {
    pub alpha: f64,
    pub tail_fraction: f64,
    pub test: SignificanceTest,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            alpha: 0.05,
            tail_fraction: 0.3,
            test: SignificanceTest::ZTest,
        }
    }
}

/// Metrics of one experiment-observable sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub experiment: String,
    pub observable: String,
    /// Sweep-point indices present in the results.
    pub points: Vec<usize>,
    pub final_diff: usize,
    pub tail: TailMetrics,
    pub best_index: usize,
    pub best_tail_mean: f64,
    pub mean_nsamples: f64,
}

pub fn summarize_sweep(
    data: &CampaignData,
    experiment: &str,
    observable: &str,
    opts: &AnalysisOptions,
) -> Result<SweepSummary, AnalysisError> {
    let direction = data.direction(observable)?;
    let (points, sweep) = data.sweep(experiment, observable);
    let (final_diff, _) = final_diff_count(&sweep, opts.alpha, opts.test)?;
    let tail = tail_metrics(&sweep, opts.alpha, opts.tail_fraction, opts.test)?;
    let (best, _, best_tail_mean) = best_tail_point(&tail.tail_means, direction)?;
    let all_n: Vec<u64> = sweep.iter().flatten().map(|p| p.n).collect();
    let mean_nsamples = all_n.iter().sum::<u64>() as f64 / all_n.len().max(1) as f64;
    Ok(SweepSummary {
        experiment: experiment.to_string(),
        observable: observable.to_string(),
        best_index: points[best],
        points,
        final_diff,
        tail,
        best_tail_mean,
        mean_nsamples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorecardRow {
    pub experiment: String,
    pub winwin: usize,
    pub mixed: usize,
    pub loselose: usize,
    pub best_obs: String,
    pub best_point: String,
    pub best_tail_mean: f64,
    /// Per observable, in campaign order.
    pub per_observable: Vec<SweepSummary>,
    /// Some job of the experiment failed, was skipped or did not converge.
    pub partial: bool,
}

/// One row per experiment. `pair` names the observables the trade-off
/// labels are computed on.
pub fn build_scorecard(
    data: &CampaignData,
    pair: (&str, &str),
    opts: &AnalysisOptions,
) -> Result<Vec<ScorecardRow>, AnalysisError> {
    if pair.0 == pair.1 {
        return Err(AnalysisError::BadPair);
    }
    let directions = [data.direction(pair.0)?, data.direction(pair.1)?];
    let mut rows = Vec::new();
    for e in &data.config.experiments {
        let mut per_observable = Vec::new();
        for o in &data.config.observables {
            per_observable.push(summarize_sweep(data, &e.id, &o.name, opts)?);
        }
        let tail_mean = |obs: &str, idx: usize| {
            per_observable
                .iter()
                .find(|s| s.observable == obs)
                .and_then(|s| {
                    s.points
                        .iter()
                        .position(|&p| p == idx)
                        .map(|k| s.tail.tail_means[k])
                })
        };
        let (mut winwin, mut mixed, mut loselose) = (0, 0, 0);
        let base = (tail_mean(pair.0, e.baseline), tail_mean(pair.1, e.baseline));
        for v in (0..e.values.len()).filter(|&v| v != e.baseline) {
            let (Some(b0), Some(b1), Some(p0), Some(p1)) =
                (base.0, base.1, tail_mean(pair.0, v), tail_mean(pair.1, v))
            else {
                continue;
            };
            match classify_tradeoff([p0, p1], [b0, b1], directions) {
                Tradeoff::WinWin => winwin += 1,
                Tradeoff::Mixed => mixed += 1,
                Tradeoff::LoseLose => loselose += 1,
            }
        }

        // Best tail signal: the observable whose best point moves furthest
        // from the baseline, measured in units of its precision target.
        let mut best: Option<(f64, &SweepSummary)> = None;
        for s in &per_observable {
            let delta = data
                .config
                .observable(&s.observable)
                .map(|o| o.delta)
                .unwrap_or(1.0);
            let score = match tail_mean(&s.observable, e.baseline) {
                Some(b) => (s.best_tail_mean - b).abs() / delta,
                None => 0.0,
            };
            if best.is_none_or(|(b, _)| score > b) {
                best = Some((score, s));
            }
        }
        let (_, best) = best.expect("at least one observable");
        rows.push(ScorecardRow {
            experiment: e.id.clone(),
            winwin,
            mixed,
            loselose,
            best_obs: best.observable.clone(),
            best_point: point_label(best.best_index),
            best_tail_mean: best.best_tail_mean,
            partial: !data.is_complete(&e.id),
            per_observable,
        });
    }
    Ok(rows)
}

pub fn scorecard_header(observables: &[String]) -> String {
    let mut cols: Vec<String> = [
        "experiment",
        "winwin",
        "mixed",
        "loselose",
        "best_obs",
        "best_point",
        "best_tail_mean",
    ]
    .map(String::from)
    .to_vec();
    for prefix in ["mean_nsamples", "final_diff", "tail_share"] {
        cols.extend(observables.iter().map(|o| format!("{prefix}_{o}")));
    }
    cols.join(",")
}

fn scorecard_fields(row: &ScorecardRow) -> Vec<String> {
    let mut f = vec![
        row.experiment.clone(),
        row.winwin.to_string(),
        row.mixed.to_string(),
        row.loselose.to_string(),
        row.best_obs.clone(),
        row.best_point.clone(),
        row.best_tail_mean.to_string(),
    ];
    f.extend(
        row.per_observable
            .iter()
            .map(|s| s.mean_nsamples.to_string()),
    );
    f.extend(
        row.per_observable
            .iter()
            .map(|s| format!("{}/{}", s.final_diff, s.tail.total_pairs)),
    );
    f.extend(
        row.per_observable
            .iter()
            .map(|s| s.tail.tail_diff_share.to_string()),
    );
    f
}

pub fn scorecard_csv(rows: &[ScorecardRow], observables: &[String]) -> String {
    let mut out = scorecard_header(observables);
    out.push('\n');
    for row in rows {
        out.push_str(&scorecard_fields(row).join(","));
        out.push('\n');
    }
    out
}

/// Renders rows as a left-aligned text table; partial rows are marked `*`.
pub fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&line(
        &widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>(),
    ));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

pub fn scorecard_table(rows: &[ScorecardRow], observables: &[String]) -> String {
    let header: Vec<String> = scorecard_header(observables)
        .split(',')
        .map(String::from)
        .collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut f = scorecard_fields(r);
            if r.partial {
                f[0].push('*');
            }
            f[6] = format!("{:.6}", r.best_tail_mean);
            let k = r.per_observable.len();
            for (i, s) in r.per_observable.iter().enumerate() {
                f[7 + i] = format!("{:.0}", s.mean_nsamples);
                f[7 + 2 * k + i] = format!("{:.3}", s.tail.tail_diff_share);
            }
            f
        })
        .collect();
    let mut out = render_table(&header, &body);
    if rows.iter().any(|r| r.partial) {
        out.push_str("* partial: some jobs failed or did not converge\n");
    }
    out
}

pub const METRICS_HEADER: &str = "experiment,observable,points,final_diff,total_pairs,tail_window,tail_diff_share,tail_majority,best_point,best_tail_mean,mean_nsamples";

pub fn metrics_csv(summaries: &[SweepSummary]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for s in summaries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            s.experiment,
            s.observable,
            s.points.len(),
            s.final_diff,
            s.tail.total_pairs,
            s.tail.window,
            s.tail.tail_diff_share,
            s.tail.tail_majority,
            point_label(s.best_index),
            s.best_tail_mean,
            s.mean_nsamples
        );
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<(), AnalysisError> {
    fs::write(path, contents).map_err(|source| AnalysisError::Write {
        path: path.display().to_string(),
        source,
    })
}

/// Long-format trajectory CSV: one row per sweep point and step.
pub fn trajectories_csv(points: &[usize], sweep: &[Vec<PointEstimate>]) -> String {
    let mut out = String::from("sweep_point,step,mean,lower,upper\n");
    for (&i, t) in points.iter().zip(sweep) {
        for p in t {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                point_label(i),
                p.step,
                p.mean,
                p.mean - p.half_width,
                p.mean + p.half_width
            );
        }
    }
    out
}

/// Per-step significance matrices stacked vertically: one row per
/// (step, sweep point), one 0/1 column per sweep point.
pub fn significance_csv(
    points: &[usize],
    sweep: &[Vec<PointEstimate>],
    alpha: f64,
    test: SignificanceTest,
) -> Result<String, AnalysisError> {
    let g = grid_len(sweep)?;
    let mut out = String::from("step,point");
    for &i in points {
        let _ = write!(out, ",{}", point_label(i));
    }
    out.push('\n');
    for at in 0..g {
        let m = significance_matrix(sweep, at, alpha, test)?;
        for (r, &i) in points.iter().enumerate() {
            let _ = write!(out, "{},{}", sweep[0][at].step, point_label(i));
            for &s in &m[r] {
                out.push_str(if s { ",1" } else { ",0" });
            }
            out.push('\n');
        }
    }
    Ok(out)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Self-contained SVG line chart of mean trajectories with CI bands.
pub fn trajectory_svg(title: &str, points: &[usize], sweep: &[Vec<PointEstimate>]) -> String {
    let (w, h) = (720.0, 400.0);
    let (left, right, top, bottom) = (70.0, 110.0, 40.0, 50.0);
    let all = sweep.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for p in all {
        x0 = x0.min(p.step as f64);
        x1 = x1.max(p.step as f64);
        y0 = y0.min(p.mean - p.half_width);
        y1 = y1.max(p.mean + p.half_width);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let sy = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, xml_escape(title));
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        xml_escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{l} {t} V{b} H{r}" fill="none" stroke="black"/>"#,
        l = left,
        t = top,
        b = h - bottom,
        r = w - right
    );
    for (label, y) in [(y0, sy(y0)), (y1, sy(y1))] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{:.4}</text>"#,
            left - 6.0,
            y + 4.0,
            label
        );
    }
    for (label, x) in [(x0, sx(x0)), (x1, sx(x1))] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            x,
            h - bottom + 18.0,
            label
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#,
        (left + w - right) / 2.0,
        h - 12.0
    );
    for (k, (&i, t)) in points.iter().zip(sweep).enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let upper = t
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.step as f64), sy(p.mean + p.half_width)));
        let lower = t
            .iter()
            .rev()
            .map(|p| format!("{:.2},{:.2}", sx(p.step as f64), sy(p.mean - p.half_width)));
        let band: Vec<String> = upper.chain(lower).collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
            band.join(" ")
        );
        let line: Vec<String> = t
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.step as f64), sy(p.mean)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            line.join(" ")
        );
        let ly = top + 16.0 * k as f64 + 8.0;
        let _ = writeln!(
            s,
            r#"<line x1="{a}" y1="{ly}" x2="{b}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{c}" y="{ty}">{label}</text>"#,
            a = w - right + 10.0,
            b = w - right + 30.0,
            c = w - right + 36.0,
            ty = ly + 4.0,
            label = point_label(i)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes trajectory, significance and SVG files for every
/// experiment-observable sweep into `out_dir`.
pub fn emit_plotdata(
    data: &CampaignData,
    out_dir: &Path,
    opts: &AnalysisOptions,
) -> Result<Vec<PathBuf>, AnalysisError> {
    fs::create_dir_all(out_dir).map_err(|source| AnalysisError::Write {
        path: out_dir.display().to_string(),
        source,
    })?;
    let mut written = Vec::new();
    for e in &data.config.experiments {
        for o in &data.config.observables {
            let (points, sweep) = data.sweep(&e.id, &o.name);
            if sweep.is_empty() {
                continue;
            }
            let stem = format!("{}_{}", e.id, o.name);
            let files = [
                (
                    format!("{stem}_trajectories.csv"),
                    trajectories_csv(&points, &sweep),
                ),
                (
                    format!("{stem}_significance.csv"),
                    significance_csv(&points, &sweep, opts.alpha, opts.test)?,
                ),
                (
                    format!("{stem}.svg"),
                    trajectory_svg(
                        &format!("{} ({}): {}", e.id, e.parameter, o.name),
                        &points,
                        &sweep,
                    ),
                ),
            ];
            for (name, contents) in files {
                let path = out_dir.join(name);
                write_file(&path, &contents)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
