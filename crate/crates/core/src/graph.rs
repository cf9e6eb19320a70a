//! Factor-graph representation of the joint MAP problem.
//!
//! Every variable is one agent's planar state (position and velocity) at one
//! support time. Factors carry a residual function over the states they touch
//! and a Gaussian noise model; the negative log posterior is the sum of the
//! factors' squared Mahalanobis norms.
//!
//! Linearizing a graph yields a [`LinearSystem`] holding the whitened
//! Jacobian `A` in block-sparse form and the right-hand side `b`, so that a
//! Gauss-Newton step is the minimizer of `‖A δ − b‖²`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::{DMatrix, DVector, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of scalars in one state block: `x, y, vx, vy`.
pub const STATE_DIM: usize = 4;

/// Identifies one state variable: agent and support-time index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VarKey {
    pub agent_id: usize,
    pub time_index: usize,
}

impl VarKey {
    pub const fn new(agent_id: usize, time_index: usize) -> Self {
        Self {
            agent_id,
            time_index,
        }
    }
}

impl fmt::Display for VarKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}:k{}", self.agent_id, self.time_index)
    }
}

/// Planar state at one support time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateVariable {
    pub position: Vector2<f64>,
    pub velocity: Vector2<f64>,
}

impl StateVariable {
    pub fn new(position: Vector2<f64>, velocity: Vector2<f64>) -> Self {
        Self { position, velocity }
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self {
            position: Vector2::new(v[0], v[1]),
            velocity: Vector2::new(v[2], v[3]),
        }
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(
            self.position.x,
            self.position.y,
            self.velocity.x,
            self.velocity.y,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }

    /// Applies a tangent-space increment (a plain vector add for this state).
    pub fn retract(&self, delta: &[f64]) -> Self {
        debug_assert_eq!(delta.len(), STATE_DIM);
        Self {
            position: Vector2::new(self.position.x + delta[0], self.position.y + delta[1]),
            velocity: Vector2::new(self.velocity.x + delta[2], self.velocity.y + delta[3]),
        }
    }
}

/// Gaussian noise model `N(0, Σ)` stored through its Cholesky factor `Σ = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    covariance: DMatrix<f64>,
    sqrt_cov: DMatrix<f64>,
    sqrt_info: DMatrix<f64>,
}

impl NoiseModel {
    pub fn from_covariance(covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() == 0 || covariance.nrows() != covariance.ncols() {
            return Err(Error::NoiseModel(format!(
                "covariance must be square and non-empty, got {}x{}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if covariance.iter().any(|v| !v.is_finite()) {
            return Err(Error::NoiseModel(
                "covariance has non-finite entries".into(),
            ));
        }
        let scale = covariance.amax().max(f64::MIN_POSITIVE);
        if (&covariance - covariance.transpose()).amax() > 1e-12 * scale {
            return Err(Error::NoiseModel("covariance is not symmetric".into()));
        }
        let chol = covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NoiseModel("covariance is not positive definite".into()))?;
        let sqrt_cov = chol.l();
        let n = sqrt_cov.nrows();
        let sqrt_info = sqrt_cov
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| Error::NoiseModel("singular covariance factor".into()))?;
        Ok(Self {
            covariance,
            sqrt_cov,
            sqrt_info,
        })
    }

    pub fn isotropic(dim: usize, sigma: f64) -> Result<Self> {
        Self::diagonal(&vec![sigma; dim])
    }

    pub fn diagonal(sigmas: &[f64]) -> Result<Self> {
        if sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::NoiseModel(format!(
                "standard deviations must be positive, got {sigmas:?}"
            )));
        }
        let variances = DVector::from_iterator(sigmas.len(), sigmas.iter().map(|s| s * s));
        Self::from_covariance(DMatrix::from_diagonal(&variances))
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// `L⁻¹ r`, so that `‖whiten(r)‖² = rᵀ Σ⁻¹ r`.
    pub fn whiten(&self, r: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(r.len())?;
        Ok(&self.sqrt_info * r)
    }

    pub fn unwhiten(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(w.len())?;
        Ok(&self.sqrt_cov * w)
    }

    pub fn whiten_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        &self.sqrt_info * m
    }

    /// `rᵀ Σ⁻¹ r`.
    pub fn squared_mahalanobis(&self, r: &DVector<f64>) -> Result<f64> {
        Ok(self.whiten(r)?.norm_squared())
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::NoiseModel(format!(
                "residual dimension {len} does not match covariance dimension {}",
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Whitened residual of `r` under `noise`.
pub fn whiten(noise: &NoiseModel, r: &DVector<f64>) -> Result<DVector<f64>> {
    noise.whiten(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    GpPrior,
    Anchor,
    Obstacle,
    Proximity,
    Consistency,
}

impl FactorKind {
    pub const ALL: [FactorKind; 5] = [
        FactorKind::GpPrior,
        FactorKind::Anchor,
        FactorKind::Obstacle,
        FactorKind::Proximity,
        FactorKind::Consistency,
    ];
}

/// Residual and per-key Jacobians (`dim × 4` each) of a factor at a point.
#[derive(Debug, Clone)]
pub struct FactorEval {
    pub residual: DVector<f64>,
    pub jacobians: Vec<DMatrix<f64>>,
}

pub trait Factor: fmt::Debug + Send + Sync {
    fn keys(&self) -> &[VarKey];

    fn noise(&self) -> &NoiseModel;

    fn kind(&self) -> FactorKind;

    fn dim(&self) -> usize {
        self.noise().dim()
    }

    /// Residual and Jacobians; `states[i]` is the value of `keys()[i]`.
    fn evaluate(&self, states: &[StateVariable]) -> FactorEval;

    fn residual(&self, states: &[StateVariable]) -> DVector<f64> {
        self.evaluate(states).residual
    }

    /// `½‖r‖²_Σ` at the given states.
    fn cost(&self, states: &[StateVariable]) -> f64 {
        let r = self.residual(states);
        self.noise()
            .squared_mahalanobis(&r)
            .map_or(f64::INFINITY, |m| 0.5 * m)
    }
}

/// A full assignment of states to keys.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment(BTreeMap<VarKey, StateVariable>);

impl Assignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: VarKey, state: StateVariable) -> Option<StateVariable> {
        self.0.insert(key, state)
    }

    pub fn get(&self, key: &VarKey) -> Option<&StateVariable> {
        self.0.get(key)
    }

    pub fn try_get(&self, key: &VarKey) -> Result<&StateVariable> {
        self.0.get(key).ok_or(Error::UnresolvedVariable(*key))
    }

    pub fn contains(&self, key: &VarKey) -> bool {
        self.0.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VarKey, &StateVariable)> {
        self.0.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &VarKey> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// States connected to `keys`, in key order.
    pub fn gather(&self, keys: &[VarKey]) -> Result<Vec<StateVariable>> {
        keys.iter().map(|k| self.try_get(k).copied()).collect()
    }
}

impl FromIterator<(VarKey, StateVariable)> for Assignment {
    fn from_iter<I: IntoIterator<Item = (VarKey, StateVariable)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl Extend<(VarKey, StateVariable)> for Assignment {
    fn extend<I: IntoIterator<Item = (VarKey, StateVariable)>>(&mut self, iter: I) {
        self.0.extend(iter)
    }
}

/// Variables, the subset held constant, and the factors over them.
///
/// Constant variables take part in residual evaluation but get no column in
/// the linear system; this is how a single agent's subproblem holds the other
/// agents' broadcast trajectories fixed.
#[derive(Debug, Default)]
pub struct FactorGraph {
    variables: Assignment,
    fixed: BTreeSet<VarKey>,
    factors: Vec<Box<dyn Factor>>,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_variable(&mut self, key: VarKey, state: StateVariable) {
        self.variables.insert(key, state);
    }

    pub fn add_fixed_variable(&mut self, key: VarKey, state: StateVariable) {
        self.variables.insert(key, state);
        self.fixed.insert(key);
    }

    pub fn add_factor(&mut self, factor: Box<dyn Factor>) {
        self.factors.push(factor);
    }

    pub fn extend_factors<I: IntoIterator<Item = Box<dyn Factor>>>(&mut self, factors: I) {
        self.factors.extend(factors);
    }

    pub fn variables(&self) -> &Assignment {
        &self.variables
    }

    pub fn factors(&self) -> &[Box<dyn Factor>] {
        &self.factors
    }

    pub fn is_fixed(&self, key: &VarKey) -> bool {
        self.fixed.contains(key)
    }

    /// Keys optimized by the solver.
    pub fn free_keys(&self) -> impl Iterator<Item = &VarKey> {
        self.variables.keys().filter(|k| !self.fixed.contains(k))
    }

    pub fn count_kind(&self, kind: FactorKind) -> usize {
        self.factors.iter().filter(|f| f.kind() == kind).count()
    }

    /// Every factor key must resolve to a variable.
    pub fn validate(&self) -> Result<()> {
        for f in &self.factors {
            for k in f.keys() {
                if !self.variables.contains(k) {
                    return Err(Error::UnresolvedVariable(*k));
                }
            }
        }
        Ok(())
    }

    /// Per-factor costs `½‖r_f‖²_Σ` at `values`.
    pub fn factor_costs(&self, values: &Assignment) -> Result<Vec<f64>> {
        self.factors
            .iter()
            .map(|f| {
                let states = values.gather(f.keys())?;
                let r = f.residual(&states);
                Ok(0.5 * f.noise().squared_mahalanobis(&r)?)
            })
            .collect()
    }
}

/// Negative log posterior (up to a constant): `Σ_f ½‖r_f(θ)‖²_Σf`.
pub fn total_cost(graph: &FactorGraph, values: &Assignment) -> Result<f64> {
    Ok(graph.factor_costs(values)?.iter().sum())
}

/// Central-difference Jacobians of the unwhitened residual, one block per key.
pub fn numeric_jacobians(
    factor: &dyn Factor,
    states: &[StateVariable],
    h: f64,
) -> Vec<DMatrix<f64>> {
    let dim = factor.dim();
    (0..states.len())
        .map(|i| {
            let mut jac = DMatrix::zeros(dim, STATE_DIM);
            for c in 0..STATE_DIM {
                let mut step = [0.0; STATE_DIM];
                let mut plus = states.to_vec();
                let mut minus = states.to_vec();
                step[c] = h;
                plus[i] = states[i].retract(&step);
                step[c] = -h;
                minus[i] = states[i].retract(&step);
                let diff = (factor.residual(&plus) - factor.residual(&minus)) / (2.0 * h);
                jac.set_column(c, &diff);
            }
            jac
        })
        .collect()
}

/// Column-block layout of the free variables.
///
/// Keys are ordered time-major (`time_index`, then `agent_id`), which keeps
/// GP chains and same-time inter-agent couplings inside a narrow band.
#[derive(Debug, Clone, PartialEq)]
pub struct Ordering {
    keys: Vec<VarKey>,
    index: BTreeMap<VarKey, usize>,
}

impl Ordering {
    pub fn time_major<'a, I: IntoIterator<Item = &'a VarKey>>(keys: I) -> Self {
        let mut keys: Vec<VarKey> = keys.into_iter().copied().collect();
        keys.sort_by_key(|k| (k.time_index, k.agent_id));
        keys.dedup();
        let index = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        Self { keys, index }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn block_of(&self, key: &VarKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn key_at(&self, block: usize) -> VarKey {
        self.keys[block]
    }

    pub fn keys(&self) -> &[VarKey] {
        &self.keys
    }
}

/// One factor's whitened rows of `A`.
#[derive(Debug, Clone)]
pub struct RowBand {
    pub factor: usize,
    pub row_offset: usize,
    pub rows: usize,
    /// `(column block, rows × 4 whitened Jacobian)`, one per free key of the factor.
    pub blocks: Vec<(usize, DMatrix<f64>)>,
}

/// Whitened Gauss-Newton system `min ‖A δ − b‖²`.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub ordering: Ordering,
    pub bands: Vec<RowBand>,
    pub b: DVector<f64>,
}

impl LinearSystem {
    pub fn n_rows(&self) -> usize {
        self.b.len()
    }

    pub fn n_cols(&self) -> usize {
        self.ordering.len() * STATE_DIM
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n_rows(), self.n_cols());
        for band in &self.bands {
            for (col, block) in &band.blocks {
                let mut view =
                    a.view_mut((band.row_offset, col * STATE_DIM), (band.rows, STATE_DIM));
                view += block;
            }
        }
        a
    }

    /// `A δ` without forming `A` densely.
    pub fn apply(&self, delta: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_rows());
        for band in &self.bands {
            for (col, block) in &band.blocks {
                let x = delta.rows(col * STATE_DIM, STATE_DIM);
                let y = block * x;
                let mut rows = out.rows_mut(band.row_offset, band.rows);
                rows += &y;
            }
        }
        out
    }

    /// `Aᵀ b`, the negative gradient of the quadratic model at `δ = 0`.
    pub fn gradient(&self) -> DVector<f64> {
        self.transpose_apply(&self.b)
    }

    pub fn transpose_apply(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_cols());
        for band in &self.bands {
            let yb = y.rows(band.row_offset, band.rows);
            for (col, block) in &band.blocks {
                let g = block.transpose() * yb;
                let mut rows = out.rows_mut(col * STATE_DIM, STATE_DIM);
                rows += &g;
            }
        }
        out
    }

    /// `½‖A δ − b‖²`.
    pub fn model_cost(&self, delta: &DVector<f64>) -> f64 {
        0.5 * (self.apply(delta) - &self.b).norm_squared()
    }

    /// Column blocks touched by each row band, in band order.
    pub fn block_pattern(&self) -> Vec<Vec<usize>> {
        self.bands
            .iter()
            .map(|b| b.blocks.iter().map(|(c, _)| *c).collect())
            .collect()
    }

    /// Adds a step to the free variables of `values`.
    pub fn retract(&self, values: &Assignment, delta: &DVector<f64>) -> Assignment {
        let mut out = values.clone();
        for (block, key) in self.ordering.keys().iter().enumerate() {
            if let Some(s) = values.get(key) {
                let d = delta.rows(block * STATE_DIM, STATE_DIM);
                out.insert(*key, s.retract(d.as_slice()));
            }
        }
        out
    }
}

/// Whitened Jacobians and residuals of every factor at `values`.
pub fn linearize(graph: &FactorGraph, values: &Assignment) -> Result<LinearSystem> {
    let ordering = Ordering::time_major(graph.free_keys());
    let mut bands = Vec::with_capacity(graph.factors().len());
    let mut rhs: Vec<f64> = Vec::new();
    for (index, factor) in graph.factors().iter().enumerate() {
        let states = values.gather(factor.keys())?;
        let eval = factor.evaluate(&states);
        let finite = eval.residual.iter().all(|v| v.is_finite())
            && eval
                .jacobians
                .iter()
                .all(|j| j.iter().all(|v| v.is_finite()));
        if !finite || eval.jacobians.len() != factor.keys().len() {
            return Err(Error::Linearization {
                index,
                kind: factor.kind(),
            });
        }
        let noise = factor.noise();
        let white_r = noise.whiten(&eval.residual)?;
        let mut blocks: Vec<(usize, DMatrix<f64>)> = Vec::with_capacity(factor.keys().len());
        for (key, jac) in factor.keys().iter().zip(&eval.jacobians) {
            let Some(col) = ordering.block_of(key) else {
                continue;
            };
            let wj = noise.whiten_matrix(jac);
            // a factor may list the same key twice; merge into one block
            if let Some(existing) = blocks.iter_mut().find(|(c, _)| *c == col) {
                existing.1 += wj;
            } else {
                blocks.push((col, wj));
            }
        }
        bands.push(RowBand {
            factor: index,
            row_offset: rhs.len(),
            rows: white_r.len(),
            blocks,
        });
        rhs.extend(white_r.iter().map(|v| -v));
    }
    Ok(LinearSystem {
        ordering,
        bands,
        b: DVector::from_vec(rhs),
    })
}
