use serde::Serialize;
use trustfg::metrics::{
    center_distance_matrix, inconsistency_metric, min_distance_matrix, path_clearance_matrix,
    proximity_violations, InconsistencyReport, MinDistanceMatrix, ViolationSegment,
    DEFAULT_ACCEL_TOL,
};
use trustfg::scenario::{
    Component, FactorToggles, MisinfoSpec, RunOutcome, Scenario, ScenarioConfig, SolveSummary,
    TrustReport,
};

use crate::output::{json_bytes, plot_svg, trajectories_csv, write_all_atomic, BoxError};
use crate::Manifest;

/// Misinformation used by `ablate` when the scenario declares none.
const DEFAULT_MISINFO_FRACTION: f64 = 0.4;
const DEFAULT_MISINFO_MAGNITUDE: f64 = 0.5;

fn load(m: &Manifest) -> Result<ScenarioConfig, BoxError> {
    let mut cfg = ScenarioConfig::load(&m.scenario)?;
    for c in &m.disable {
        cfg.factors.set(*c, false);
    }
    if let Some(mode) = m.mode {
        cfg.mode = mode;
    }
    if let Some(seed) = m.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct Metrics {
    mode: trustfg::scenario::Mode,
    factors: FactorToggles,
    seed: u64,
    /// Proximity margin that violations are measured against, m.
    threshold: f64,
    min_distance: MinDistanceMatrix,
    global_min_distance: f64,
    sub_threshold_pairs: Vec<(usize, usize)>,
    center_distance: MinDistanceMatrix,
    path_clearance: MinDistanceMatrix,
    violations: Vec<ViolationSegment>,
    inconsistency: InconsistencyReport,
    trust_scores: Vec<(usize, f64)>,
    solver: SolveSummary,
}

struct Evaluated {
    outcome: RunOutcome,
    metrics: Metrics,
}

fn evaluate(scenario: &Scenario) -> Result<Evaluated, BoxError> {
    let cfg = scenario.config();
    let outcome = scenario.run()?;
    let trajs = &outcome.trajectories;
    let radii = scenario.radii();
    let threshold = cfg.trust_params.eps_proximity;
    let min_distance = min_distance_matrix(trajs, &radii)?;
    let metrics = Metrics {
        mode: cfg.mode,
        factors: cfg.factors,
        seed: cfg.seed,
        threshold,
        global_min_distance: min_distance.global_min(),
        sub_threshold_pairs: min_distance.pairs_below(threshold),
        min_distance,
        center_distance: center_distance_matrix(trajs)?,
        path_clearance: path_clearance_matrix(trajs, &radii)?,
        violations: proximity_violations(trajs, &radii, threshold)?,
        inconsistency: inconsistency_metric(
            trajs,
            cfg.trust_params.consistency_range,
            DEFAULT_ACCEL_TOL,
        )?,
        trust_scores: outcome
            .report
            .agents
            .iter()
            .map(|a| (a.agent_id, a.trust_score))
            .collect(),
        solver: outcome.solve.clone(),
    };
    Ok(Evaluated { outcome, metrics })
}

/// Returns whether the solve converged.
pub fn simulate(m: &Manifest) -> Result<bool, BoxError> {
    let scenario = Scenario::new(load(m)?)?;
    let Evaluated { outcome, metrics } = evaluate(&scenario)?;
    let svg = plot_svg(scenario.grid(), &outcome.trajectories, &metrics.violations);
    write_all_atomic(
        &m.out,
        &[
            ("trajectories.csv", trajectories_csv(&outcome.trajectories)?),
            ("metrics.json", json_bytes(&metrics)?),
            ("plot.svg", svg.into_bytes()),
            ("trust_report.json", json_bytes(&outcome.report)?),
        ],
    )?;
    Ok(metrics.solver.converged)
}

#[derive(Debug, Serialize)]
struct AblationRun {
    name: &'static str,
    factors: FactorToggles,
    converged: bool,
    min_distance: MinDistanceMatrix,
    global_min_distance: f64,
    inconsistency: InconsistencyReport,
    trust: TrustReport,
}

#[derive(Debug, Serialize)]
struct TransparencyEffect {
    agent_id: usize,
    /// Smallest distance from any other agent to the misinforming one.
    min_distance_on: f64,
    min_distance_off: f64,
    ratio: f64,
}

#[derive(Debug, Serialize)]
struct Comparison {
    misinfo: Vec<MisinfoSpec>,
    runs: Vec<AblationRun>,
    transparency: Option<TransparencyEffect>,
}

pub const ABLATION_RUNS: [(&str, Option<Component>); 4] = [
    ("all-on", None),
    ("proximity-off", Some(Component::Proximity)),
    ("consistency-off", Some(Component::Consistency)),
    ("transparency-off", Some(Component::Transparency)),
];

/// Every run shares the same misinformation so that each differs from
/// `all-on` in exactly one toggle.
pub fn ablate(m: &Manifest) -> Result<bool, BoxError> {
    let mut base = load(m)?;
    if base.misinfo.is_empty() {
        let first = base
            .agents
            .iter()
            .map(|a| a.id)
            .min()
            .ok_or("scenario has no agents")?;
        base.misinfo.push(MisinfoSpec {
            agent_id: first,
            fraction: DEFAULT_MISINFO_FRACTION,
            magnitude: DEFAULT_MISINFO_MAGNITUDE,
            seed: base.seed,
        });
    }
    let scenarios = ABLATION_RUNS
        .iter()
        .map(|(_, off)| {
            let mut cfg = base.clone();
            if let Some(c) = off {
                cfg.factors.set(*c, false);
            }
            Scenario::new(cfg)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let results: Vec<Result<Evaluated, String>> = std::thread::scope(|s| {
        let handles: Vec<_> = scenarios
            .iter()
            .map(|sc| s.spawn(move || evaluate(sc).map_err(|e| e.to_string())))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err("ablation run panicked".into()))
            })
            .collect()
    });

    let mut runs = Vec::with_capacity(results.len());
    for ((name, _), r) in ABLATION_RUNS.iter().zip(results) {
        let Evaluated { outcome, metrics } = r?;
        runs.push(AblationRun {
            name,
            factors: metrics.factors,
            converged: metrics.solver.converged,
            global_min_distance: metrics.global_min_distance,
            min_distance: metrics.min_distance,
            inconsistency: metrics.inconsistency,
            trust: outcome.report,
        });
    }

    let liar = base.misinfo[0].agent_id;
    let transparency = match (
        runs[0].min_distance.row_min(liar),
        runs[3].min_distance.row_min(liar),
    ) {
        (Some(on), Some(off)) if runs[0].min_distance.len() > 1 => Some(TransparencyEffect {
            agent_id: liar,
            min_distance_on: on,
            min_distance_off: off,
            ratio: on / off,
        }),
        _ => None,
    };
    let converged = runs.iter().all(|r| r.converged);
    let comparison = Comparison {
        misinfo: base.misinfo.clone(),
        runs,
        transparency,
    };
    write_all_atomic(&m.out, &[("comparison.json", json_bytes(&comparison)?)])?;
    Ok(converged)
}
