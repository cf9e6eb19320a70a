//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, Vector2, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trustfg::gp::{
    constant_velocity_transition, AnchorFactor, GpPriorFactor, GpPriorParams, Trajectory,
};
use trustfg::graph::{
    linearize, numeric_jacobians, total_cost, Factor, FactorGraph, StateVariable, VarKey, STATE_DIM,
};
use trustfg::metrics::{
    inconsistency_metric, min_distance_matrix, proximity_violations, MinDistanceMatrix,
    DEFAULT_ACCEL_TOL,
};
use trustfg::scenario::{
    build_joint_graph, reference_scenario, FactorToggles, MisinfoSpec, Mode, RunOutcome, Scenario,
    ScenarioConfig,
};
use trustfg::solver::{gauss_newton, SolverConfig};
use trustfg::trust::{surface_distance, ConsistencyFactor, ProximityFactor};
use trustfg::world::{build_sdf, GridSdf, ObstacleFactor, OccupancyGrid, RobotShape};

const MISINFORMER: usize = 1;

type Draw = Box<dyn FnMut(&mut ChaCha8Rng) -> Option<(Box<dyn Factor>, Vec<StateVariable>)>>;
type Check = (&'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn solve(cfg: &ScenarioConfig) -> (Scenario, RunOutcome, MinDistanceMatrix) {
    let scenario = Scenario::new(cfg.clone()).expect("valid scenario");
    let out = scenario.run().expect("solve succeeds");
    let m = min_distance_matrix(&out.trajectories, &scenario.radii()).unwrap();
    (scenario, out, m)
}

fn random_state(rng: &mut ChaCha8Rng, span: f64) -> StateVariable {
    StateVariable::new(
        Vector2::new(rng.random_range(-span..span), rng.random_range(-span..span)),
        Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
    )
}

/// Largest Jacobian error relative to the finite-difference magnitude.
fn jacobian_error(f: &dyn Factor, states: &[StateVariable]) -> f64 {
    let analytic = f.evaluate(states).jacobians;
    numeric_jacobians(f, states, 1e-6)
        .iter()
        .zip(&analytic)
        .map(|(n, a)| (a - n).amax() / n.amax().max(1.0))
        .fold(0.0, f64::max)
}

/// Distance of `x` to the nearest lattice line `offset + k·step`.
fn off_lattice(x: f64, offset: f64, step: f64) -> f64 {
    let u = (x - offset) / step;
    (u - u.round()).abs() * step
}

fn criterion_1() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sdf = Scenario::new(reference_scenario()).unwrap().sdf().clone();
    let shape = RobotShape::new(0.1).unwrap();
    let (a0, a1, b0) = (VarKey::new(0, 4), VarKey::new(0, 5), VarKey::new(1, 4));
    let mut worst: Vec<(&str, f64)> = Vec::new();

    let mut run = |name: &'static str, mut draw: Draw| {
        let mut err: f64 = 0.0;
        let mut done = 0;
        while done < 100 {
            if let Some((f, states)) = draw(&mut rng) {
                err = err.max(jacobian_error(f.as_ref(), &states));
                done += 1;
            }
        }
        worst.push((name, err));
    };

    run(
        "gp",
        Box::new(move |rng| {
            let f = GpPriorFactor::new(
                a0,
                a1,
                rng.random_range(0.05..1.0),
                rng.random_range(0.1..5.0),
            )
            .unwrap();
            Some((
                Box::new(f) as Box<dyn Factor>,
                vec![random_state(rng, 3.0), random_state(rng, 3.0)],
            ))
        }),
    );
    run(
        "anchor",
        Box::new(move |rng| {
            let f = AnchorFactor::new(a0, random_state(rng, 3.0), 1e-4, 1e-2).unwrap();
            Some((Box::new(f) as Box<dyn Factor>, vec![random_state(rng, 3.0)]))
        }),
    );
    let obstacle_sdf: Arc<GridSdf> = sdf.clone();
    run(
        "obstacle",
        Box::new(move |rng| {
            let eps = 0.1;
            let s = random_state(rng, 1.3);
            let cs = obstacle_sdf.cell_size();
            let origin = obstacle_sdf.cell_center(0, 0);
            // bilinear interpolation and the hinge are only piecewise smooth
            let d = shape.clearance(&obstacle_sdf, &s.position).distance;
            if (d - eps).abs() < 1e-4
                || off_lattice(s.position.x, origin.x, cs) < 1e-4
                || off_lattice(s.position.y, origin.y, cs) < 1e-4
            {
                return None;
            }
            let f = ObstacleFactor::new(a0, obstacle_sdf.clone(), shape, eps, 0.01).unwrap();
            Some((Box::new(f) as Box<dyn Factor>, vec![s]))
        }),
    );
    run(
        "proximity",
        Box::new(move |rng| {
            let eps = 0.3;
            let (s, u) = (random_state(rng, 0.4), random_state(rng, 0.4));
            if (surface_distance(&s.position, 0.1, &u.position, 0.1) - eps).abs() < 1e-4 {
                return None;
            }
            let f = ProximityFactor::new(a0, b0, [0.1, 0.1], eps, 0.01).unwrap();
            Some((Box::new(f) as Box<dyn Factor>, vec![s, u]))
        }),
    );
    run(
        "consistency",
        Box::new(move |rng| {
            let f = ConsistencyFactor::new(0, 1, 4, rng.random_range(0.05..0.5), 1.0, 4.0).unwrap();
            let states = (0..4).map(|_| random_state(rng, 1.0)).collect();
            Some((Box::new(f) as Box<dyn Factor>, states))
        }),
    );

    let secs = t.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n}={e:.1e}"))
        .collect::<Vec<_>>()
        .join(" ");
    verdict(
        max <= 1e-5 && secs < 10.0,
        format!("max rel err {detail} (<= 1e-5), {secs:.2}s (< 10s)"),
    )
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_grad: f64 = 0.0;
    let mut iterations = Vec::new();
    for _ in 0..10 {
        let mut g = FactorGraph::new();
        let n = rng.random_range(3..25);
        let dt = rng.random_range(0.2..1.0);
        let qc = rng.random_range(0.5..3.0);
        for agent in 0..2 {
            for k in 0..n {
                g.add_variable(VarKey::new(agent, k), random_state(&mut rng, 2.0));
            }
            for k in 0..n - 1 {
                g.add_factor(Box::new(
                    GpPriorFactor::new(VarKey::new(agent, k), VarKey::new(agent, k + 1), dt, qc)
                        .unwrap(),
                ));
            }
            for k in [0, n - 1, rng.random_range(0..n)] {
                let target = random_state(&mut rng, 2.0);
                g.add_factor(Box::new(
                    AnchorFactor::new(VarKey::new(agent, k), target, 0.1, 0.3).unwrap(),
                ));
            }
        }
        let res = gauss_newton(&g, g.variables(), &SolverConfig::default()).unwrap();
        let grad = linearize(&g, &res.solution).unwrap().gradient().norm();
        worst_grad = worst_grad.max(grad);
        iterations.push(res.iterations);
    }
    let pass = iterations.iter().all(|i| *i == 1) && worst_grad <= 1e-10;
    verdict(
        pass,
        format!("iterations {iterations:?} (all 1), max gradient norm {worst_grad:.1e} (<= 1e-10)"),
    )
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = GpPriorParams::default();
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let n = rng.random_range(2..40);
        let dt = rng.random_range(0.05..0.5);
        let start = random_state(&mut rng, 2.0);
        let mut g = FactorGraph::new();
        for k in 0..n {
            g.add_variable(VarKey::new(0, k), random_state(&mut rng, 3.0));
        }
        g.add_factor(Box::new(
            AnchorFactor::new(
                VarKey::new(0, 0),
                start,
                params.anchor_pos_sigma,
                params.anchor_vel_sigma,
            )
            .unwrap(),
        ));
        for k in 0..n - 1 {
            g.add_factor(Box::new(
                GpPriorFactor::new(VarKey::new(0, k), VarKey::new(0, k + 1), dt, params.qc)
                    .unwrap(),
            ));
        }
        let res = gauss_newton(&g, g.variables(), &SolverConfig::default()).unwrap();
        let (phi, _) = constant_velocity_transition(dt, params.qc).unwrap();
        let mut mean: Vector4<f64> = start.to_vector();
        for k in 0..n {
            let got = res.solution.get(&VarKey::new(0, k)).unwrap().position;
            worst = worst.max((got - Vector2::new(mean[0], mean[1])).norm());
            mean = phi * mean;
        }
    }
    verdict(
        worst <= 1e-9,
        format!("max deviation from mean {worst:.1e} m (<= 1e-9)"),
    )
}

fn criterion_4() -> Verdict {
    let t = Instant::now();
    let (_, out, m) = solve(&reference_scenario());
    let secs = t.elapsed().as_secs_f64();
    let min = m.global_min();
    verdict(
        min >= 0.095 && secs < 60.0 && out.solve.converged,
        format!("global min surface distance {min:.4} m (>= 0.095), {secs:.2}s (< 60s)"),
    )
}

fn criterion_5() -> Verdict {
    let mut cfg = reference_scenario();
    cfg.factors = FactorToggles::default().without_trust();
    let (_, _, m) = solve(&cfg);
    let below = m.pairs_below(0.1);
    verdict(
        !below.is_empty(),
        format!(
            "trust off: global min {:.4} m, pairs below 0.1 m {below:?}",
            m.global_min()
        ),
    )
}

fn criterion_6() -> Verdict {
    let cfg = reference_scenario();
    let inconsistency = |cfg: &ScenarioConfig| {
        let (_, out, _) = solve(cfg);
        inconsistency_metric(
            &out.trajectories,
            cfg.trust_params.consistency_range,
            DEFAULT_ACCEL_TOL,
        )
        .unwrap()
        .fraction
    };
    let on = inconsistency(&cfg);
    let mut off_cfg = cfg.clone();
    off_cfg.factors.consistency = false;
    let off = inconsistency(&off_cfg);
    verdict(
        on <= 0.9 * off,
        format!(
            "inconsistency on {on:.4}, off {off:.4}, ratio {:.3} (<= 0.9)",
            on / off
        ),
    )
}

fn criterion_7() -> Verdict {
    let mut cfg = reference_scenario();
    cfg.misinfo = vec![MisinfoSpec {
        agent_id: MISINFORMER,
        fraction: 0.4,
        magnitude: 0.5,
        seed: 7,
    }];
    let (_, _, on) = solve(&cfg);
    cfg.factors.transparency = false;
    let (_, _, off) = solve(&cfg);
    let (d_on, d_off) = (
        on.row_min(MISINFORMER).unwrap(),
        off.row_min(MISINFORMER).unwrap(),
    );
    let ratio = d_on / d_off;
    verdict(
        ratio >= 1.3,
        format!("agent {MISINFORMER} nearest distance on {d_on:.4} m, off {d_off:.4} m, ratio {ratio:.3} (>= 1.3)"),
    )
}

/// Time-synchronized closest approach by stepping both agents together in
/// increments that move neither by more than `res`.
fn sampled_distance(a: &[Vector2<f64>], b: &[Vector2<f64>], res: f64) -> f64 {
    let mut best = f64::INFINITY;
    for k in 0..a.len() - 1 {
        let len = (a[k + 1] - a[k]).norm().max((b[k + 1] - b[k]).norm());
        let steps = (len / res).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let p = a[k] + (a[k + 1] - a[k]) * t;
            let q = b[k] + (b[k + 1] - b[k]) * t;
            best = best.min((p - q).norm());
        }
    }
    best
}

fn brute_force_sdf(grid: &OccupancyGrid) -> Vec<f64> {
    let (w, h) = (grid.width(), grid.height());
    let mut out = vec![0.0; w * h];
    for j in 0..h {
        for i in 0..w {
            let occ = grid.occupied(i, j);
            let mut best = f64::INFINITY;
            for jj in 0..h {
                for ii in 0..w {
                    if grid.occupied(ii, jj) != occ {
                        let (di, dj) = (ii as f64 - i as f64, jj as f64 - j as f64);
                        best = best.min(di * di + dj * dj);
                    }
                }
            }
            let d = best.sqrt() * grid.cell_size();
            out[j * w + i] = if occ { -d } else { d.min(grid.extent().norm()) };
        }
    }
    out
}

fn criterion_8() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(2..12);
        let trajs: Vec<Trajectory> = (0..2)
            .map(|id| {
                let states = (0..n).map(|_| random_state(&mut rng, 1.5)).collect();
                Trajectory::new(id, 0.1, states).unwrap()
            })
            .collect();
        let radii = [rng.random_range(0.0..0.1), rng.random_range(0.0..0.1)];
        let m = min_distance_matrix(&trajs, &radii).unwrap();
        let oracle = (sampled_distance(&trajs[0].positions(), &trajs[1].positions(), 1e-3)
            - radii[0]
            - radii[1])
            .max(0.0);
        worst = worst.max((m.get(0, 1) - oracle).abs());
    }

    let mut mismatches = 0;
    let mut grids = 0;
    for &(w, h, density) in &[
        (1, 1, 0.0),
        (7, 5, 0.3),
        (16, 16, 0.1),
        (33, 20, 0.05),
        (64, 64, 0.02),
        (64, 64, 0.4),
    ] {
        let mut cells: Vec<bool> = (0..w * h).map(|_| rng.random_bool(density)).collect();
        cells[0] = false;
        let grid = OccupancyGrid::new(Vector2::new(-1.0, 0.5), 0.05, w, h, cells).unwrap();
        let sdf = build_sdf(&grid).unwrap();
        let oracle = brute_force_sdf(&grid);
        mismatches += (0..w * h)
            .filter(|idx| sdf.value(idx % w, idx / w) != oracle[*idx])
            .count();
        grids += 1;
    }
    verdict(
        worst <= 1e-3 && mismatches == 0,
        format!("50 pairs max |matrix - oracle| {worst:.1e} m (<= 1e-3); sdf mismatches {mismatches} over {grids} grids (== 0)"),
    )
}

fn criterion_9() -> Verdict {
    let cfg = reference_scenario();
    let (joint_scenario, joint, _) = solve(&cfg);
    let mut dec_cfg = cfg.clone();
    dec_cfg.mode = Mode::Decentralized;
    let (dec_scenario, dec, _) = solve(&dec_cfg);
    let graph = build_joint_graph(&cfg).unwrap();
    let cost = |out: &RunOutcome| {
        let mut values = trustfg::graph::Assignment::new();
        for t in &out.trajectories {
            values.extend(t.to_assignment().iter().map(|(k, s)| (*k, *s)));
        }
        total_cost(&graph, &values).unwrap()
    };
    let (cj, cd) = (cost(&joint), cost(&dec));
    let rel = (cd - cj).abs() / cj;
    let eps = cfg.trust_params.eps_proximity;
    let vj = proximity_violations(&joint.trajectories, &joint_scenario.radii(), eps)
        .unwrap()
        .len();
    let vd = proximity_violations(&dec.trajectories, &dec_scenario.radii(), eps)
        .unwrap()
        .len();
    verdict(
        dec.solve.converged && dec.solve.rounds <= 50 && rel <= 0.15 && vj == 0 && vd == 0,
        format!(
            "{} rounds (<= 50), cost joint {cj:.5} decentralized {cd:.5} rel diff {rel:.4} (<= 0.15), violations {vj}/{vd} (0/0)",
            dec.solve.rounds
        ),
    )
}

fn fingerprint(out: &RunOutcome) -> Vec<u8> {
    let mut bytes = Vec::new();
    for t in &out.trajectories {
        for s in &t.states {
            for v in s.to_vector().iter() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
    }
    bytes.extend(serde_json::to_vec(&out.report).unwrap());
    bytes.extend(serde_json::to_vec(&out.solve).unwrap());
    bytes
}

fn criterion_10() -> Verdict {
    let mut cfg = reference_scenario();
    cfg.misinfo = vec![MisinfoSpec {
        agent_id: MISINFORMER,
        fraction: 0.4,
        magnitude: 0.5,
        seed: 7,
    }];
    let identical = [Mode::Joint, Mode::Decentralized].iter().all(|mode| {
        cfg.mode = *mode;
        fingerprint(&solve(&cfg).1) == fingerprint(&solve(&cfg).1)
    });

    let mut big = reference_scenario();
    big.steps = 50;
    let t = Instant::now();
    let scenario = Scenario::new(big.clone()).unwrap();
    let out = scenario.run_joint().unwrap();
    let secs = t.elapsed().as_secs_f64();
    let unknowns = big.agents.len() * big.steps * STATE_DIM;

    // every nonzero of A lies in a block of a key its factor touches
    let graph = build_joint_graph(&big).unwrap();
    let init = scenario.initial_trajectories().unwrap();
    let mut values = trustfg::graph::Assignment::new();
    for t in &init {
        values.extend(t.to_assignment().iter().map(|(k, s)| (*k, *s)));
    }
    let sys = linearize(&graph, &values).unwrap();
    let mut pattern_ok = sys.bands.len() == graph.factors().len();
    let mut allowed = DMatrix::<bool>::from_element(sys.n_rows(), sys.n_cols(), false);
    for (band, factor) in sys.bands.iter().zip(graph.factors()) {
        let expected: Vec<usize> = factor
            .keys()
            .iter()
            .filter_map(|k| sys.ordering.block_of(k))
            .collect();
        let got: Vec<usize> = band.blocks.iter().map(|(c, _)| *c).collect();
        pattern_ok &= got == expected;
        for c in &expected {
            for r in band.row_offset..band.row_offset + band.rows {
                for col in c * STATE_DIM..(c + 1) * STATE_DIM {
                    allowed[(r, col)] = true;
                }
            }
        }
    }
    let dense = sys.to_dense();
    let spurious = dense
        .iter()
        .zip(allowed.iter())
        .filter(|(v, ok)| **v != 0.0 && !**ok)
        .count();
    verdict(
        identical && secs < 5.0 && out.solve.converged && pattern_ok && spurious == 0,
        format!(
            "repeat runs identical {identical}; joint solve {unknowns} unknowns {secs:.3}s (< 5s); band pattern matches factor keys {pattern_ok}, spurious entries {spurious}"
        ),
    )
}

fn main() {
    let criteria: [Check; 10] = [
        ("jacobians", criterion_1),
        ("linear exactness", criterion_2),
        ("gp prior mean", criterion_3),
        ("intersection safety", criterion_4),
        ("safety ablation", criterion_5),
        ("consistency ablation", criterion_6),
        ("transparency effect", criterion_7),
        ("oracle equivalence", criterion_8),
        ("consensus agreement", criterion_9),
        ("determinism and performance", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        failed += usize::from(!v.pass);
        println!(
            "criterion {:>2} {:<28} {}  {}",
            i + 1,
            name,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
