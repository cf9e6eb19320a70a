//! Trust-related inter-agent factors.
//!
//! Proximity safety and consistency are optimizable factors coupling two
//! agents' states. Transparency is not a cost: it compares what an agent
//! shares with what others observe and widens the proximity margin for pairs
//! involving agents whose shared plans disagree with observation.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::Trajectory;
use crate::graph::{Factor, FactorEval, FactorKind, NoiseModel, StateVariable, VarKey};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrustParams {
    /// Surface-to-surface safety margin between agents, m.
    pub eps_proximity: f64,
    pub sigma_proximity: f64,
    pub sigma_consistency: f64,
    /// Length scale of the consistency weight `exp(−d/λ)`, m.
    pub consistency_range: f64,
    pub transparency_beta: f64,
    /// Deviation beyond which a shared position counts as a discrepancy, m.
    pub transparency_tol: f64,
}

impl Default for TrustParams {
    fn default() -> Self {
        Self {
            eps_proximity: 0.1,
            sigma_proximity: 0.01,
            sigma_consistency: 4.0,
            consistency_range: 1.0,
            transparency_beta: 2.5,
            transparency_tol: 0.05,
        }
    }
}

impl TrustParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eps_proximity", self.eps_proximity),
            ("sigma_proximity", self.sigma_proximity),
            ("sigma_consistency", self.sigma_consistency),
            ("consistency_range", self.consistency_range),
            ("transparency_beta", self.transparency_beta),
            ("transparency_tol", self.transparency_tol),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Parameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// `ε_t − d` when the surfaces are closer than `ε_t`, else zero.
pub fn proximity_hinge(d: f64, eps: f64) -> f64 {
    if d <= eps {
        eps - d
    } else {
        0.0
    }
}

/// Surface-to-surface distance of two discs.
pub fn surface_distance(a: &Vector2<f64>, ra: f64, b: &Vector2<f64>, rb: f64) -> f64 {
    (a - b).norm() - ra - rb
}

/// Proximity factor between two agents at the same support time.
#[derive(Debug, Clone)]
pub struct ProximityFactor {
    keys: [VarKey; 2],
    radii: [f64; 2],
    eps: f64,
    noise: NoiseModel,
}

impl ProximityFactor {
    pub fn new(a: VarKey, b: VarKey, radii: [f64; 2], eps: f64, sigma: f64) -> Result<Self> {
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::Parameter(format!(
                "proximity margin must be positive, got {eps}"
            )));
        }
        Ok(Self {
            keys: [a, b],
            radii,
            eps,
            noise: NoiseModel::isotropic(1, sigma)?,
        })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }
}

impl Factor for ProximityFactor {
    fn keys(&self) -> &[VarKey] {
        &self.keys
    }

    fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    fn kind(&self) -> FactorKind {
        FactorKind::Proximity
    }

    fn evaluate(&self, states: &[StateVariable]) -> FactorEval {
        let diff = states[0].position - states[1].position;
        let center = diff.norm();
        let d = center - self.radii[0] - self.radii[1];
        let mut ja = DMatrix::zeros(1, 4);
        let mut jb = DMatrix::zeros(1, 4);
        if d < self.eps {
            // coincident centers: any separating direction will do
            let u = if center > 0.0 {
                diff / center
            } else {
                Vector2::new(1.0, 0.0)
            };
            ja[(0, 0)] = -u.x;
            ja[(0, 1)] = -u.y;
            jb[(0, 0)] = u.x;
            jb[(0, 1)] = u.y;
        }
        FactorEval {
            residual: DVector::from_element(1, proximity_hinge(d, self.eps)),
            jacobians: vec![ja, jb],
        }
    }
}

/// `(v_{k+1} − v_k) / dt`.
pub fn acceleration(s_k: &StateVariable, s_next: &StateVariable, dt: f64) -> Vector2<f64> {
    (s_next.velocity - s_k.velocity) / dt
}

/// Acceleration difference of two agents over one step, weighted by
/// `exp(−d/λ)` where `d` is their center distance at the first of the two
/// time indices. Nearby agents are held to similar accelerations; the weight
/// is part of the residual, so the factor also rewards keeping a distance
/// when accelerations must differ.
#[derive(Debug, Clone)]
pub struct ConsistencyFactor {
    keys: [VarKey; 4],
    range: f64,
    dt: f64,
    noise: NoiseModel,
}

impl ConsistencyFactor {
    /// Keys are `(a, k), (a, k+1), (b, k), (b, k+1)`.
    pub fn new(a: usize, b: usize, k: usize, dt: f64, range: f64, sigma: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Parameter(format!("dt must be positive, got {dt}")));
        }
        if !(range.is_finite() && range > 0.0) {
            return Err(Error::Parameter(format!(
                "consistency range must be positive, got {range}"
            )));
        }
        Ok(Self {
            keys: [
                VarKey::new(a, k),
                VarKey::new(a, k + 1),
                VarKey::new(b, k),
                VarKey::new(b, k + 1),
            ],
            range,
            dt,
            noise: NoiseModel::isotropic(2, sigma)?,
        })
    }

    /// Weight at the given pair of positions.
    pub fn weight(&self, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
        (-(a - b).norm() / self.range).exp()
    }
}

impl Factor for ConsistencyFactor {
    fn keys(&self) -> &[VarKey] {
        &self.keys
    }

    fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    fn kind(&self) -> FactorKind {
        FactorKind::Consistency
    }

    fn evaluate(&self, states: &[StateVariable]) -> FactorEval {
        let acc = acceleration(&states[0], &states[1], self.dt)
            - acceleration(&states[2], &states[3], self.dt);
        let diff = states[0].position - states[2].position;
        let d = diff.norm();
        let w = (-d / self.range).exp();
        let c = w / self.dt;
        let block = |sign: f64| {
            let mut j = DMatrix::zeros(2, 4);
            j[(0, 2)] = sign * c;
            j[(1, 3)] = sign * c;
            j
        };
        let mut ja = block(-1.0);
        let mut jb = block(1.0);
        // ∂r/∂p_a = acc · w'(d) · uᵀ; the distance has no gradient at d = 0
        if d > 0.0 {
            let g = acc * (-w / self.range) * (diff / d).transpose();
            ja.view_mut((0, 0), (2, 2)).copy_from(&g);
            jb.view_mut((0, 0), (2, 2)).copy_from(&(-g));
        }
        FactorEval {
            residual: DVector::from_column_slice((acc * w).as_slice()),
            jacobians: vec![ja, block(1.0), jb, block(-1.0)],
        }
    }
}

/// Per-pair proximity margins keyed by `(min agent id, max agent id)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairThresholds(BTreeMap<(usize, usize), f64>);

impl PairThresholds {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, a: usize, b: usize, eps: f64) {
        self.0.insert(pair_key(a, b), eps);
    }

    pub fn get_or(&self, a: usize, b: usize, default: f64) -> f64 {
        self.0.get(&pair_key(a, b)).copied().unwrap_or(default)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize), &f64)> {
        self.0.iter()
    }
}

fn pair_key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// All trajectories must share the step count and time step.
pub fn check_alignment(trajs: &[Trajectory]) -> Result<()> {
    if let Some(first) = trajs.first() {
        for t in &trajs[1..] {
            if t.len() != first.len() {
                return Err(Error::Alignment(format!(
                    "agent {} has {} steps, agent {} has {}",
                    first.agent_id,
                    first.len(),
                    t.agent_id,
                    t.len()
                )));
            }
            if t.dt != first.dt {
                return Err(Error::Alignment(format!(
                    "agent {} has dt {}, agent {} has dt {}",
                    first.agent_id, first.dt, t.agent_id, t.dt
                )));
            }
        }
    }
    Ok(())
}

/// Unordered index pairs `(i, j)`, `i < j`.
pub fn agent_pairs(m: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..m).flat_map(move |i| (i + 1..m).map(move |j| (i, j)))
}

/// One proximity factor per time index and unordered agent pair.
pub fn make_proximity_factors(
    trajs: &[Trajectory],
    radii: &[f64],
    params: &TrustParams,
    thresholds: &PairThresholds,
) -> Result<Vec<Box<dyn Factor>>> {
    check_alignment(trajs)?;
    if radii.len() != trajs.len() {
        return Err(Error::LengthMismatch {
            expected: trajs.len(),
            actual: radii.len(),
        });
    }
    let mut out: Vec<Box<dyn Factor>> = Vec::new();
    let Some(first) = trajs.first() else {
        return Ok(out);
    };
    for k in 0..first.len() {
        for (i, j) in agent_pairs(trajs.len()) {
            let (a, b) = (trajs[i].agent_id, trajs[j].agent_id);
            let eps = thresholds.get_or(a, b, params.eps_proximity);
            out.push(Box::new(ProximityFactor::new(
                VarKey::new(a, k),
                VarKey::new(b, k),
                [radii[i], radii[j]],
                eps,
                params.sigma_proximity,
            )?));
        }
    }
    Ok(out)
}

/// One consistency factor per step `k ∈ [0, N−2]` and unordered agent pair.
pub fn make_consistency_factors(
    trajs: &[Trajectory],
    params: &TrustParams,
) -> Result<Vec<Box<dyn Factor>>> {
    check_alignment(trajs)?;
    let mut out: Vec<Box<dyn Factor>> = Vec::new();
    let Some(first) = trajs.first() else {
        return Ok(out);
    };
    for k in 0..first.len() - 1 {
        for (i, j) in agent_pairs(trajs.len()) {
            out.push(Box::new(ConsistencyFactor::new(
                trajs[i].agent_id,
                trajs[j].agent_id,
                k,
                first.dt,
                params.consistency_range,
                params.sigma_consistency,
            )?));
        }
    }
    Ok(out)
}

/// Fraction of indices whose shared position deviates from the observed one
/// by more than `tol`.
pub fn compute_discrepancy(
    shared: &Trajectory,
    observed: &[Vector2<f64>],
    tol: f64,
) -> Result<f64> {
    if observed.len() != shared.len() {
        return Err(Error::LengthMismatch {
            expected: shared.len(),
            actual: observed.len(),
        });
    }
    let off = shared
        .states
        .iter()
        .zip(observed)
        .filter(|(s, o)| (s.position - *o).norm() > tol)
        .count();
    Ok(off as f64 / shared.len() as f64)
}

/// `ε_t · (1 + β · max(δ_a, δ_b))`.
pub fn inflate_epsilon(eps: f64, delta_a: f64, delta_b: f64, beta: f64) -> f64 {
    eps * (1.0 + beta * delta_a.max(delta_b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairThreshold {
    pub agent_a: usize,
    pub agent_b: usize,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransparencyReport {
    /// `(agent id, discrepancy fraction)`, in agent order.
    pub discrepancy: Vec<(usize, f64)>,
    pub thresholds: Vec<PairThreshold>,
}

impl TransparencyReport {
    /// Discrepancy per agent from `(shared, observed)` trajectories and the
    /// resulting inflated margin for every pair.
    pub fn evaluate(
        shared: &[Trajectory],
        observed: &[Trajectory],
        params: &TrustParams,
    ) -> Result<Self> {
        if shared.len() != observed.len() {
            return Err(Error::LengthMismatch {
                expected: shared.len(),
                actual: observed.len(),
            });
        }
        let discrepancy = shared
            .iter()
            .zip(observed)
            .map(|(s, o)| {
                Ok((
                    s.agent_id,
                    compute_discrepancy(s, &o.positions(), params.transparency_tol)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_discrepancy(discrepancy, params))
    }

    pub fn from_discrepancy(discrepancy: Vec<(usize, f64)>, params: &TrustParams) -> Self {
        let thresholds = agent_pairs(discrepancy.len())
            .map(|(i, j)| {
                let (a, da) = discrepancy[i];
                let (b, db) = discrepancy[j];
                PairThreshold {
                    agent_a: a,
                    agent_b: b,
                    epsilon: inflate_epsilon(
                        params.eps_proximity,
                        da,
                        db,
                        params.transparency_beta,
                    ),
                }
            })
            .collect();
        Self {
            discrepancy,
            thresholds,
        }
    }

    /// Uninflated margins and zero discrepancy for the given agents.
    pub fn neutral(agent_ids: &[usize], params: &TrustParams) -> Self {
        Self::from_discrepancy(agent_ids.iter().map(|a| (*a, 0.0)).collect(), params)
    }

    pub fn pair_thresholds(&self) -> PairThresholds {
        let mut t = PairThresholds::new();
        for p in &self.thresholds {
            t.set(p.agent_a, p.agent_b, p.epsilon);
        }
        t
    }

    pub fn discrepancy_of(&self, agent: usize) -> f64 {
        self.discrepancy
            .iter()
            .find(|(a, _)| *a == agent)
            .map_or(0.0, |(_, d)| *d)
    }
}

/// Per-agent trust summary `1 − min(1, δ_a + v_a)`, where `v_a` is the mean
/// over time steps of the summed relative margin violations
/// `hinge(d, ε') / ε'` against every other agent.
pub fn trust_scores(
    trajs: &[Trajectory],
    radii: &[f64],
    report: &TransparencyReport,
    params: &TrustParams,
) -> Result<Vec<(usize, f64)>> {
    check_alignment(trajs)?;
    let thresholds = report.pair_thresholds();
    let m = trajs.len();
    let mut violation = vec![0.0; m];
    if let Some(first) = trajs.first() {
        let n = first.len();
        for (i, j) in agent_pairs(m) {
            let (a, b) = (trajs[i].agent_id, trajs[j].agent_id);
            let eps = thresholds.get_or(a, b, params.eps_proximity);
            let total: f64 = (0..n)
                .map(|k| {
                    let d = surface_distance(
                        &trajs[i].states[k].position,
                        radii[i],
                        &trajs[j].states[k].position,
                        radii[j],
                    );
                    proximity_hinge(d, eps) / eps
                })
                .sum::<f64>()
                / n as f64;
            violation[i] += total;
            violation[j] += total;
        }
    }
    Ok(trajs
        .iter()
        .zip(violation)
        .map(|(t, v)| {
            let delta = report.discrepancy_of(t.agent_id);
            (t.agent_id, 1.0 - (delta + v).min(1.0))
        })
        .collect())
}
