//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use smcsweep::analysis::{
    build_scorecard, final_diff_count, scorecard_csv, tail_metrics, AnalysisOptions, CampaignData,
    PointEstimate, SignificanceTest,
};
use smcsweep::blackbox::SimulatorHandle;
use smcsweep::campaign::{
    run_campaign, CampaignConfig, Direction, Grid, JobStatus, ObservableSpec, RunOptions,
    SimulatorConfig, SweepExperiment,
};
use smcsweep::engine::{run_query, EngineConfig, TrajectoryResult};
use smcsweep::models::{
    switching_step, BuiltinModel, SwitchingParams, SwitchingState, N_HEURISTICS,
};
use smcsweep::quatex::{expand_parametric, obs_at_step_query, parse, ObservationPlan, QueryAst};
use smcsweep::stats::{t_quantile, z_critical, StoppingPolicy};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || {
        format!(
            "took {:.1} s, limit {:.0} s",
            elapsed.as_secs_f64(),
            limit.as_secs_f64()
        )
    })
}

fn plan_for(query: &str, obs: &str, horizon: u64) -> (QueryAst, ObservationPlan) {
    let ast = parse(query).expect("query parses");
    let bindings = BTreeMap::from([("obs".to_string(), obs.to_string())]);
    let plan = expand_parametric(&ast, &bindings, horizon).expect("plan expands");
    (ast, plan)
}

fn estimate(
    model: &BuiltinModel,
    ast: &QueryAst,
    plan: &ObservationPlan,
    policy: StoppingPolicy,
    horizon: u64,
    seed: u64,
    workers: usize,
) -> TrajectoryResult {
    let mut config = EngineConfig::new(policy, horizon);
    config.seed_of_seeds = seed;
    config.workers = workers;
    run_query(
        ast,
        plan,
        |_| Ok(SimulatorHandle::in_process(model.instantiate())),
        &config,
    )
    .expect("engine run")
}

const LISTING_QUERY: &str = "obsAtStep(x, obs) =
  if (s.rval(\"steps\") == x) then s.rval(obs)
  else # obsAtStep(x, obs) fi;

eval parametric(E[obsAtStep(x, obs)], x, 101, 10, 600);
";

fn query_semantics() -> Outcome {
    let started = Instant::now();
    let (ast, plan) = plan_for(LISTING_QUERY, "VAL", 600);
    let r = estimate(
        &BuiltinModel::Counter,
        &ast,
        &plan,
        StoppingPolicy::new(0.05, 0.01, 30).unwrap(),
        600,
        1,
        4,
    );
    let expected: Vec<f64> = (101..=591).step_by(10).map(|s| s as f64).collect();
    let means: Vec<f64> = r.points.iter().map(|p| p.mean).collect();
    ensure(means == expected, || format!("trajectory {means:?}"))?;
    ensure(
        r.points
            .iter()
            .all(|p| p.half_width == 0.0 && p.n == 30 && p.converged),
        || "a point is not frozen at n=30 with zero width".into(),
    )?;
    within(started.elapsed(), Duration::from_secs(5))?;
    Ok(format!(
        "50 exact means, hw 0, n 30, {:.2} s",
        started.elapsed().as_secs_f64()
    ))
}

fn grid_cardinality() -> Outcome {
    let (_, plan) = plan_for(LISTING_QUERY, "X", 600);
    ensure(plan.len() == 50, || format!("{} points", plan.len()))?;
    let steps: Vec<u64> = plan.points().iter().map(|p| p.step).collect();
    ensure(
        steps.first() == Some(&101) && steps.last() == Some(&591),
        || format!("{steps:?}"),
    )?;
    Ok("50 points, 101..=591".into())
}

fn end_value_plan(step: u64) -> (QueryAst, ObservationPlan) {
    plan_for(&obs_at_step_query(step, 1, step), "X", step)
}

fn stopping_calibration() -> Outcome {
    let started = Instant::now();
    let (ast, plan) = end_value_plan(600);
    let model = BuiltinModel::Bernoulli { p: 0.5 };
    let policy = StoppingPolicy::new(0.05, 0.05, 30).unwrap();
    let ns: Vec<u64> = (1..=20)
        .map(|seed| estimate(&model, &ast, &plan, policy, 600, seed, 4).points[0].n)
        .collect();
    let hits = ns.iter().filter(|n| (360..=450).contains(*n)).count();
    ensure(hits >= 16, || {
        format!("only {hits}/20 in [360, 450]: {ns:?}")
    })?;
    within(started.elapsed(), Duration::from_secs(30))?;
    Ok(format!(
        "{hits}/20 in [360, 450], n = {ns:?}, {:.1} s",
        started.elapsed().as_secs_f64()
    ))
}

fn ci_coverage() -> Outcome {
    let started = Instant::now();
    let (ast, plan) = end_value_plan(10);
    let model = BuiltinModel::Bernoulli { p: 0.3 };
    let policy = StoppingPolicy::new(0.05, 0.05, 30).unwrap();
    let covered = (1..=500u64)
        .filter(|&seed| {
            let p = &estimate(&model, &ast, &plan, policy, 10, seed, 1).points[0];
            (p.mean - 0.3).abs() <= p.half_width
        })
        .count();
    let frac = covered as f64 / 500.0;
    ensure((0.92..=0.985).contains(&frac), || {
        format!("coverage {frac}")
    })?;
    within(started.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "coverage {covered}/500 = {frac:.3}, {:.1} s",
        started.elapsed().as_secs_f64()
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let query = dir.path().join("listing.mq");
    fs::write(&query, LISTING_QUERY).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for workers in [1, 4, 8] {
        let out = dir.path().join(format!("w{workers}.csv"));
        let status = Command::new(env!("CARGO_BIN_EXE_smcsweep"))
            .args([
                "run-query",
                "--query",
                query.to_str().unwrap(),
                "--obs",
                "obs=X",
                "--delta",
                "0.03",
                "--sim",
                "switching",
                "--seed-of-seeds",
                "1",
            ])
            .args([
                "--workers",
                &workers.to_string(),
                "--out",
                out.to_str().unwrap(),
            ])
            .status()
            .map_err(|e| e.to_string())?;
        ensure(status.success(), || format!("workers {workers}: {status}"))?;
        outputs.push(fs::read(&out).map_err(|e| e.to_string())?);
    }
    ensure(outputs[0] == outputs[1] && outputs[0] == outputs[2], || {
        "CSV bytes differ across worker counts".into()
    })?;
    Ok(format!(
        "workers 1/4/8 produce identical {}-byte CSVs",
        outputs[0].len()
    ))
}

fn precision_monotonicity() -> Outcome {
    let (ast, plan) = plan_for(&obs_at_step_query(5, 5, 50), "X", 50);
    let model = BuiltinModel::Gaussian { mu: 1.0, sd: 2.0 };
    let mut checked = 0;
    for seed in 1..=10 {
        let coarse = estimate(
            &model,
            &ast,
            &plan,
            StoppingPolicy::new(0.05, 0.2, 30).unwrap(),
            50,
            seed,
            4,
        );
        let fine = estimate(
            &model,
            &ast,
            &plan,
            StoppingPolicy::new(0.05, 0.1, 30).unwrap(),
            50,
            seed,
            4,
        );
        for (c, f) in coarse.points.iter().zip(&fine.points) {
            ensure(f.n >= c.n, || {
                format!(
                    "seed {seed} step {}: n {} at delta/2 < n {} at delta",
                    c.step, f.n, c.n
                )
            })?;
            checked += 1;
        }
    }
    Ok(format!("{checked} point comparisons over 10 seeds"))
}

/// Sweep with standard deviation `sd` and `n` samples everywhere, so the
/// brute-force oracle can use the true spread instead of a recovered one.
fn synthetic_sweep(means: &[Vec<f64>], sd: f64, n: u64) -> Vec<Vec<PointEstimate>> {
    let hw = t_quantile(0.975, n - 1).unwrap() * sd / (n as f64).sqrt();
    means
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(s, &m)| PointEstimate {
                    step: 101 + 10 * s as u64,
                    mean: m,
                    half_width: hw,
                    n,
                })
                .collect()
        })
        .collect()
}

fn oracle_significant(a: f64, b: f64, sd: f64, n: u64) -> bool {
    (a - b).abs() > z_critical(0.05).unwrap() * (2.0 * sd * sd / n as f64).sqrt()
}

fn metric_oracle() -> Outcome {
    let (sd, n, g) = (0.1, 400u64, 50usize);
    let se = (2.0 * sd * sd / n as f64).sqrt();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(2024);
    let trials = 300;
    for trial in 0..trials {
        let k = 2 + (rng.next_u64() % 5) as usize;
        // Each sweep point sits on an integer level per step; distinct levels
        // are 10 standard errors apart, equal levels are identical.
        let levels: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                (0..g)
                    .map(|_| (rng.next_u64() % 3) as f64 * 10.0 * se)
                    .collect()
            })
            .collect();
        let sweep = synthetic_sweep(&levels, sd, n);

        let pairs: Vec<(usize, usize)> = (0..k)
            .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
            .collect();
        let sig = |s: usize, (i, j): (usize, usize)| {
            oracle_significant(levels[i][s], levels[j][s], sd, n)
        };
        let final_k = pairs.iter().filter(|&&p| sig(g - 1, p)).count();
        let (got_k, got_total) =
            final_diff_count(&sweep, 0.05, SignificanceTest::ZTest).map_err(|e| e.to_string())?;
        ensure((got_k, got_total) == (final_k, pairs.len()), || {
            format!(
                "trial {trial}: final diff {got_k}/{got_total}, oracle {final_k}/{}",
                pairs.len()
            )
        })?;

        let window = 15;
        let tail_hits: usize = (g - window..g)
            .map(|s| pairs.iter().filter(|&&p| sig(s, p)).count())
            .sum();
        let majority = pairs
            .iter()
            .filter(|&&p| 2 * (g - window..g).filter(|&s| sig(s, p)).count() >= window)
            .count();
        let m =
            tail_metrics(&sweep, 0.05, 0.3, SignificanceTest::ZTest).map_err(|e| e.to_string())?;
        ensure(m.window == window && m.tail_majority == majority, || {
            format!(
                "trial {trial}: window {} majority {}, oracle {majority}",
                m.window, m.tail_majority
            )
        })?;
        let hits_from_share = m.tail_diff_share * (window * pairs.len()) as f64;
        ensure(
            hits_from_share.round() as usize == tail_hits
                && (hits_from_share - tail_hits as f64).abs() < 1e-9,
            || {
                format!(
                    "trial {trial}: share {} vs oracle {tail_hits}/{}",
                    m.tail_diff_share,
                    window * pairs.len()
                )
            },
        )?;
    }
    let six = synthetic_sweep(&vec![vec![0.0; g]; 6], sd, n);
    let (_, total) =
        final_diff_count(&six, 0.05, SignificanceTest::ZTest).map_err(|e| e.to_string())?;
    ensure(total == 15, || format!("6 points gave {total} pairs"))?;
    Ok(format!(
        "{trials} random sweeps match the brute-force enumeration; 6 points -> 15 pairs"
    ))
}

fn tradeoff_classifier() -> Outcome {
    // GROWTH is higher-is-better, UNEMPL lower-is-better; baseline p1 sits
    // at (0.030, 0.040).
    let growth = [0.030, 0.031, 0.029, 0.031, 0.030, 0.032];
    let unempl = [0.040, 0.030, 0.050, 0.050, 0.030, 0.040];
    // p2 is win-win, p3 lose-lose, p4 mixed, p5 and p6 tie on one side.
    let expected = (1, 3, 1);
    let obs = |name: &str, direction| ObservableSpec {
        name: name.into(),
        delta: 0.001,
        direction,
    };
    let config = CampaignConfig {
        simulator: SimulatorConfig::Builtin(BuiltinModel::Counter),
        horizon: None,
        grid: Grid {
            lo: 101,
            step: 10,
            hi: 591,
        },
        alpha: 0.05,
        block: 30,
        workers: 1,
        seed_of_seeds: 1,
        max_runs: None,
        tail_fraction: 0.3,
        fail_fast: false,
        jobs_parallel: 1,
        observables: vec![
            obs("GROWTH", Direction::HigherIsBetter),
            obs("UNEMPL", Direction::LowerIsBetter),
        ],
        experiments: vec![SweepExperiment {
            id: "E1".into(),
            parameter: "p".into(),
            values: (0..6).map(f64::from).collect(),
            baseline: 0,
            external_id: None,
        }],
    };
    let mut sweeps = BTreeMap::new();
    let mut statuses = BTreeMap::new();
    for (name, means) in [("GROWTH", growth), ("UNEMPL", unempl)] {
        let rows: Vec<Vec<f64>> = means.iter().map(|&m| vec![m; 50]).collect();
        sweeps.insert(
            ("E1".to_string(), name.to_string()),
            synthetic_sweep(&rows, 0.01, 100)
                .into_iter()
                .map(Some)
                .collect(),
        );
        statuses.insert(
            ("E1".to_string(), name.to_string()),
            vec![JobStatus::Converged; 6],
        );
    }
    let data = CampaignData {
        config,
        sweeps,
        statuses,
    };
    let rows = build_scorecard(&data, ("GROWTH", "UNEMPL"), &AnalysisOptions::default())
        .map_err(|e| e.to_string())?;
    let r = &rows[0];
    ensure((r.winwin, r.mixed, r.loselose) == expected, || {
        format!("counts {:?}", (r.winwin, r.mixed, r.loselose))
    })?;
    ensure(r.winwin + r.mixed + r.loselose == 5, || {
        "counts do not sum to |values| - 1".into()
    })?;
    Ok(format!(
        "(win-win, mixed, lose-lose) = {expected:?}, ties mixed, sum 5"
    ))
}

fn switching_structure() -> Outcome {
    let uniform = 1.0 / N_HEURISTICS as f64;
    let p = SwitchingParams {
        beta: 0.0,
        delta_s: 0.0,
        ..SwitchingParams::default()
    };
    let mut s = SwitchingState::initial(3);
    for step in 0..500 {
        switching_step(&mut s, &p);
        ensure(
            s.shares.iter().all(|&x| (x - uniform).abs() <= 1e-12),
            || format!("step {step}: shares {:?}", s.shares),
        )?;
    }
    let p = SwitchingParams {
        delta_s: 1.0,
        beta: 5.0,
        ..SwitchingParams::default()
    };
    let mut s = SwitchingState::initial(4);
    let start = s.shares;
    for step in 0..500 {
        switching_step(&mut s, &p);
        ensure(s.shares == start, || {
            format!("step {step}: shares moved to {:?}", s.shares)
        })?;
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(77);
    let mut unit = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    for i in 0..10_000 {
        let p = SwitchingParams {
            beta: 50.0 * unit(),
            delta_s: unit(),
            eta: unit(),
            omega_ada: 1.5 * unit(),
            omega_wtr: 1.5 * unit(),
            omega_str: 3.0 * unit(),
            omega_aa: unit(),
            feedback: 0.05 + 0.9 * unit(),
            noise_sd: 0.01 + unit(),
        };
        let mut s = SwitchingState::initial(i);
        for _ in 0..20 {
            switching_step(&mut s, &p);
            let sum: f64 = s.shares.iter().sum();
            ensure(
                (sum - 1.0).abs() <= 1e-12 && s.shares.iter().all(|&x| x >= 0.0),
                || format!("parameterization {i}: shares {:?}", s.shares),
            )?;
        }
    }
    Ok(
        "uniform at beta=delta_s=0, frozen at delta_s=1, simplex over 10^4 parameterizations"
            .into(),
    )
}

/// Student-t quantile by Simpson integration of the density plus bisection.
fn t_quantile_oracle(p: f64, dof: f64) -> f64 {
    let ln_norm = statrs::function::gamma::ln_gamma((dof + 1.0) / 2.0)
        - statrs::function::gamma::ln_gamma(dof / 2.0)
        - 0.5 * (dof * std::f64::consts::PI).ln();
    let density = |x: f64| (ln_norm - (dof + 1.0) / 2.0 * (x * x / dof).ln_1p()).exp();
    let cdf = |t: f64| {
        let m = 4000;
        let h = t / m as f64;
        let mut acc = density(0.0) + density(t);
        for i in 1..m {
            acc += density(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        0.5 + acc * h / 3.0
    };
    let (mut lo, mut hi) = (0.0, 64.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn t_quantile_accuracy() -> Outcome {
    let mut worst: f64 = 0.0;
    for dof in [1u64, 29, 100, 1_000_000] {
        let got = t_quantile(0.975, dof).map_err(|e| e.to_string())?;
        let want = t_quantile_oracle(0.975, dof as f64);
        let err = (got - want).abs();
        ensure(err <= 1e-5, || format!("dof {dof}: {got} vs oracle {want}"))?;
        worst = worst.max(err);
    }
    Ok(format!("max error {worst:.2e} over dof 1, 29, 100, 10^6"))
}

fn desk_campaign() -> Outcome {
    let started = Instant::now();
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/desk_campaign.toml");
    let config = CampaignConfig::load(&path).map_err(|e| e.to_string())?;
    ensure(config.max_runs == Some(100_000), || {
        "the desk campaign must cap runs at 10^5".into()
    })?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let outcome =
        run_campaign(&config, dir.path(), RunOptions::default()).map_err(|e| e.to_string())?;
    let m = &outcome.manifest;
    ensure(m.count(JobStatus::Converged) == 36, || {
        format!(
            "{} of {} jobs converged",
            m.count(JobStatus::Converged),
            m.jobs.len()
        )
    })?;
    let csvs = fs::read_dir(dir.path().join("jobs"))
        .map_err(|e| e.to_string())?
        .count();
    ensure(csvs == 36, || format!("{csvs} trajectory CSVs"))?;
    ensure(dir.path().join("manifest.json").exists(), || {
        "manifest missing".into()
    })?;
    for r in &outcome.results {
        let delta = config.observable(&r.spec.observable).unwrap().delta;
        ensure(
            r.trajectory.points.len() == 50
                && r.trajectory.points.iter().all(|p| p.half_width <= delta),
            || format!("job {} violates the half-width target", r.spec.ordinal),
        )?;
    }
    let data = CampaignData::load(dir.path()).map_err(|e| e.to_string())?;
    let rows = build_scorecard(&data, ("X", "FERR"), &AnalysisOptions::default())
        .map_err(|e| e.to_string())?;
    let csv = scorecard_csv(&rows, &["X".to_string(), "FERR".to_string()]);
    ensure(csv.lines().count() == 4, || {
        format!("scorecard has {} lines", csv.lines().count())
    })?;
    ensure(
        rows.iter()
            .all(|r| r.winwin + r.mixed + r.loselose == 5 && !r.partial),
        || "scorecard row counts".into(),
    )?;
    let runs: u64 = m.jobs.iter().map(|j| j.total_runs).sum();
    let max_runs = m.jobs.iter().map(|j| j.total_runs).max().unwrap_or(0);
    within(started.elapsed(), Duration::from_secs(600))?;
    Ok(format!(
        "36 CSVs + manifest + 3 rows, {runs} runs (max {max_runs} per job), {:.1} s",
        started.elapsed().as_secs_f64()
    ))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("query semantics", query_semantics),
        ("grid cardinality", grid_cardinality),
        ("stopping-rule calibration", stopping_calibration),
        ("CI coverage", ci_coverage),
        ("determinism", determinism),
        ("precision monotonicity", precision_monotonicity),
        ("metric oracle equivalence", metric_oracle),
        ("trade-off classifier", tradeoff_classifier),
        ("switching-model structure", switching_structure),
        ("t-quantile accuracy", t_quantile_accuracy),
        ("end-to-end desk campaign", desk_campaign),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
