//! Batch MAP optimization over a [`FactorGraph`].
//!
//! Both solvers linearize the whole graph each iteration and solve the
//! resulting normal equations with the block-profile Cholesky in
//! [`crate::sparse`].

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{linearize, total_cost, Assignment, FactorGraph, LinearSystem};
use crate::sparse::NormalEquations;

/// Damping above which Levenberg-Marquardt gives up.
pub const LM_MAX_LAMBDA: f64 = 1e12;
const LM_MIN_LAMBDA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub abs_cost_tol: f64,
    pub rel_cost_tol: f64,
    /// Stop when `‖Aᵀb‖∞ ≤ gradient_tol · (1 + cost)`.
    pub gradient_tol: f64,
    pub lm_initial_lambda: f64,
    pub lm_lambda_factor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            abs_cost_tol: 1e-9,
            rel_cost_tol: 1e-6,
            gradient_tol: 1e-10,
            lm_initial_lambda: 1e-4,
            lm_lambda_factor: 10.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Parameter(format!(
                    "{name} must be positive, got {v}"
                )))
            }
        };
        if self.max_iterations == 0 {
            return Err(Error::Parameter("max_iterations must be at least 1".into()));
        }
        positive("abs_cost_tol", self.abs_cost_tol)?;
        positive("rel_cost_tol", self.rel_cost_tol)?;
        positive("gradient_tol", self.gradient_tol)?;
        positive("lm_initial_lambda", self.lm_initial_lambda)?;
        if !(self.lm_lambda_factor.is_finite() && self.lm_lambda_factor > 1.0) {
            return Err(Error::Parameter(format!(
                "lm_lambda_factor must exceed 1, got {}",
                self.lm_lambda_factor
            )));
        }
        Ok(())
    }

    fn small_change(&self, before: f64, after: f64) -> bool {
        let change = (before - after).abs();
        change < self.abs_cost_tol || change < self.rel_cost_tol * before.abs()
    }

    fn stationary(&self, sys: &LinearSystem, cost: f64) -> bool {
        sys.n_cols() == 0 || sys.gradient().amax() <= self.gradient_tol * (1.0 + cost)
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub solution: Assignment,
    /// Cost at the initial point followed by the cost after each iteration.
    pub cost_history: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl SolveResult {
    pub fn initial_cost(&self) -> f64 {
        self.cost_history[0]
    }

    pub fn final_cost(&self) -> f64 {
        *self.cost_history.last().unwrap()
    }
}

/// Least-squares step `argmin ‖A δ − b‖²` via the normal equations.
pub fn solve_linear(sys: &LinearSystem) -> Result<DVector<f64>> {
    NormalEquations::from_system(sys).solve(0.0)
}

/// `cost(before) − cost(after)`, summed per factor as `½ (w₀ − w₁)·(w₀ + w₁)`
/// on whitened residuals so that it stays accurate when both costs agree to
/// many digits.
fn cost_decrease(graph: &FactorGraph, before: &Assignment, after: &Assignment) -> Result<f64> {
    let mut total = 0.0;
    for f in graph.factors() {
        let w0 = f.noise().whiten(&f.residual(&before.gather(f.keys())?))?;
        let w1 = f.noise().whiten(&f.residual(&after.gather(f.keys())?))?;
        total += 0.5 * (&w0 - &w1).dot(&(&w0 + &w1));
    }
    Ok(total)
}

fn checked_init(graph: &FactorGraph, init: &Assignment) -> Result<f64> {
    graph.validate()?;
    for key in graph.variables().keys() {
        if !init.contains(key) {
            return Err(Error::UnresolvedVariable(*key));
        }
    }
    total_cost(graph, init)
}

pub fn gauss_newton(
    graph: &FactorGraph,
    init: &Assignment,
    cfg: &SolverConfig,
) -> Result<SolveResult> {
    cfg.validate()?;
    let mut cost = checked_init(graph, init)?;
    let mut values = init.clone();
    let mut history = vec![cost];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        let sys = linearize(graph, &values)?;
        if cfg.stationary(&sys, cost) {
            converged = true;
            break;
        }
        let delta = solve_linear(&sys)?;
        values = sys.retract(&values, &delta);
        let new_cost = total_cost(graph, &values)?;
        iterations += 1;
        history.push(new_cost);
        let done = cfg.small_change(cost, new_cost);
        cost = new_cost;
        if done {
            converged = true;
            break;
        }
    }

    Ok(SolveResult {
        solution: values,
        cost_history: history,
        converged,
        iterations,
    })
}

pub fn levenberg_marquardt(
    graph: &FactorGraph,
    init: &Assignment,
    cfg: &SolverConfig,
) -> Result<SolveResult> {
    cfg.validate()?;
    let mut cost = checked_init(graph, init)?;
    let mut values = init.clone();
    let mut history = vec![cost];
    let mut converged = false;
    let mut iterations = 0;
    let mut lambda = cfg.lm_initial_lambda;

    'outer: while iterations < cfg.max_iterations {
        let sys = linearize(graph, &values)?;
        if cfg.stationary(&sys, cost) {
            converged = true;
            break;
        }
        let normal = NormalEquations::from_system(&sys);
        loop {
            let delta = normal.solve(lambda)?;
            let candidate = sys.retract(&values, &delta);
            let decrease = cost_decrease(graph, &values, &candidate)?;
            if decrease > 0.0 {
                // the two totals can round to the same value near the optimum
                let new_cost = total_cost(graph, &candidate)?.min(cost);
                values = candidate;
                iterations += 1;
                history.push(new_cost);
                lambda = (lambda / cfg.lm_lambda_factor).max(LM_MIN_LAMBDA);
                let done = cfg.small_change(cost, new_cost);
                cost = new_cost;
                if done {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            // no decrease: if even the model promises nothing, we are at the optimum
            let predicted = cost - sys.model_cost(&delta);
            if predicted < cfg.abs_cost_tol || predicted < cfg.rel_cost_tol * cost {
                converged = true;
                break 'outer;
            }
            lambda *= cfg.lm_lambda_factor;
            if lambda > LM_MAX_LAMBDA {
                return Err(Error::Stalled { lambda });
            }
        }
    }

    Ok(SolveResult {
        solution: values,
        cost_history: history,
        converged,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::test_support::LinearUnary;
    use crate::graph::{Factor, FactorEval, FactorKind, NoiseModel, StateVariable, VarKey};
    use nalgebra::{DMatrix, Vector2, Vector4};

    fn x_state(x: f64) -> StateVariable {
        StateVariable::new(Vector2::new(x, 0.0), Vector2::zeros())
    }

    fn anchor(key: VarKey, x: f64, sigma: f64) -> Box<dyn Factor> {
        Box::new(LinearUnary::new(key, Vector4::new(x, 0.0, 0.0, 0.0), sigma))
    }

    /// `max(0, ε − x)` on the first coordinate.
    #[derive(Debug)]
    struct Hinge1d {
        keys: [VarKey; 1],
        eps: f64,
        noise: NoiseModel,
    }

    impl Factor for Hinge1d {
        fn keys(&self) -> &[VarKey] {
            &self.keys
        }
        fn noise(&self) -> &NoiseModel {
            &self.noise
        }
        fn kind(&self) -> FactorKind {
            FactorKind::Obstacle
        }
        fn evaluate(&self, states: &[StateVariable]) -> FactorEval {
            let x = states[0].position.x;
            let mut jac = DMatrix::zeros(1, 4);
            let r = if x < self.eps {
                jac[(0, 0)] = -1.0;
                self.eps - x
            } else {
                0.0
            };
            FactorEval {
                residual: DVector::from_element(1, r),
                jacobians: vec![jac],
            }
        }
    }

    #[test]
    fn single_anchor_one_iteration() {
        let k = VarKey::new(0, 0);
        let mut g = FactorGraph::new();
        g.add_variable(k, x_state(5.0));
        g.add_factor(anchor(k, 1.5, 1.0));
        let res = gauss_newton(&g, g.variables(), &SolverConfig::default()).unwrap();
        assert_eq!(res.iterations, 1);
        assert!(res.converged);
        assert!((res.solution.get(&k).unwrap().position.x - 1.5).abs() < 1e-12);
        assert!(res.final_cost() < 1e-20);
    }

    #[test]
    fn two_anchor_midpoint() {
        let k = VarKey::new(0, 0);
        let mut g = FactorGraph::new();
        g.add_variable(k, x_state(-3.0));
        g.add_factor(anchor(k, 0.0, 0.5));
        g.add_factor(anchor(k, 2.0, 0.5));
        let res = gauss_newton(&g, g.variables(), &SolverConfig::default()).unwrap();
        assert!((res.solution.get(&k).unwrap().position.x - 1.0).abs() < 1e-12);
    }

    fn hinge_graph() -> (FactorGraph, VarKey) {
        let k = VarKey::new(0, 0);
        let mut g = FactorGraph::new();
        g.add_variable(k, x_state(-0.5));
        g.add_factor(Box::new(Hinge1d {
            keys: [k],
            eps: 0.1,
            noise: NoiseModel::isotropic(1, 0.05).unwrap(),
        }));
        g.add_factor(anchor(k, 0.0, 1.0));
        (g, k)
    }

    #[test]
    fn hinge_matches_grid_search() {
        let (g, k) = hinge_graph();
        let cost_at = |x: f64| {
            let mut v = Assignment::new();
            v.insert(k, x_state(x));
            total_cost(&g, &v).unwrap()
        };
        let oracle = (0..=20_000)
            .map(|i| -1.0 + i as f64 * 1e-4)
            .min_by(|a, b| cost_at(*a).total_cmp(&cost_at(*b)))
            .unwrap();
        for res in [
            gauss_newton(&g, g.variables(), &SolverConfig::default()).unwrap(),
            levenberg_marquardt(&g, g.variables(), &SolverConfig::default()).unwrap(),
        ] {
            let x = res.solution.get(&k).unwrap().position.x;
            assert!((x - oracle).abs() < 1e-3, "x={x} oracle={oracle}");
            assert!(res.converged);
        }
    }

    #[test]
    fn lm_matches_gn_on_linear_graph() {
        let mut g = FactorGraph::new();
        let ks: Vec<VarKey> = (0..3).map(|i| VarKey::new(0, i)).collect();
        for (i, k) in ks.iter().enumerate() {
            g.add_variable(*k, x_state(i as f64 * 7.0));
            g.add_factor(anchor(*k, i as f64, 0.3 + i as f64));
            g.add_factor(anchor(*k, -(i as f64), 1.0));
        }
        let cfg = SolverConfig {
            abs_cost_tol: 1e-15,
            rel_cost_tol: 1e-15,
            ..Default::default()
        };
        let gn = gauss_newton(&g, g.variables(), &cfg).unwrap();
        let lm = levenberg_marquardt(&g, g.variables(), &cfg).unwrap();
        for k in &ks {
            let a = gn.solution.get(k).unwrap().to_vector();
            let b = lm.solution.get(k).unwrap().to_vector();
            assert!((a - b).amax() < 1e-8);
        }
        assert!(lm.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn empty_graph_returns_init() {
        let g = FactorGraph::new();
        let res = levenberg_marquardt(&g, &Assignment::new(), &SolverConfig::default()).unwrap();
        assert!(res.converged);
        assert_eq!(res.final_cost(), 0.0);
        assert!(res.solution.is_empty());
    }

    #[test]
    fn unconstrained_key_is_named() {
        let a = VarKey::new(0, 0);
        let b = VarKey::new(0, 1);
        let mut g = FactorGraph::new();
        g.add_variable(a, x_state(1.0));
        g.add_variable(b, x_state(1.0));
        g.add_factor(anchor(a, 0.0, 1.0));
        match gauss_newton(&g, g.variables(), &SolverConfig::default()) {
            Err(Error::RankDeficient { keys }) => assert_eq!(keys, vec![b]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn solve_linear_examples() {
        let k = VarKey::new(0, 0);
        let mut g = FactorGraph::new();
        g.add_variable(k, x_state(0.0));
        g.add_factor(Box::new(LinearUnary::new(
            k,
            Vector4::new(1.0, 2.0, 3.0, 4.0),
            1.0,
        )));
        let sys = linearize(&g, g.variables()).unwrap();
        let d = solve_linear(&sys).unwrap();
        assert_eq!(d.as_slice(), &[1.0, 2.0, 3.0, 4.0]);

        // A = [[1],[1]] per coordinate, b = [0, 2] → δ = 1
        let mut g = FactorGraph::new();
        g.add_variable(k, x_state(0.0));
        g.add_factor(Box::new(LinearUnary::new(
            k,
            Vector4::new(0.0, 0.0, 0.0, 0.0),
            1.0,
        )));
        g.add_factor(Box::new(LinearUnary::new(
            k,
            Vector4::new(2.0, 0.0, 0.0, 0.0),
            1.0,
        )));
        let sys = linearize(&g, g.variables()).unwrap();
        let d = solve_linear(&sys).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn config_validation() {
        let bad = SolverConfig {
            max_iterations: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SolverConfig {
            lm_lambda_factor: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(SolverConfig::default().validate().is_ok());
    }
}
