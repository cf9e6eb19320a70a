//! Gaussian-process trajectory prior.
//!
//! The prior is generated by the white-noise-on-acceleration SDE
//! `ẍ(t) = w(t)`, `w ~ GP(0, qc·δ(t − t'))`, which makes the posterior a
//! Markov chain over support states. Between consecutive states the mean
//! propagates with `Φ(dt)` and the innovation has covariance `Q(dt)`.

use nalgebra::{DMatrix, DVector, Matrix4, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Assignment, Factor, FactorEval, FactorKind, NoiseModel, StateVariable, VarKey};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub agent_id: usize,
    pub dt: f64,
    pub states: Vec<StateVariable>,
}

impl Trajectory {
    pub fn new(agent_id: usize, dt: f64, states: Vec<StateVariable>) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Parameter(format!("dt must be positive, got {dt}")));
        }
        if states.len() < 2 {
            return Err(Error::Parameter(format!(
                "a trajectory needs at least 2 states, got {}",
                states.len()
            )));
        }
        if let Some(i) = states.iter().position(|s| !s.is_finite()) {
            return Err(Error::Parameter(format!("state {i} is not finite")));
        }
        Ok(Self {
            agent_id,
            dt,
            states,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn key(&self, k: usize) -> VarKey {
        VarKey::new(self.agent_id, k)
    }

    pub fn positions(&self) -> Vec<Vector2<f64>> {
        self.states.iter().map(|s| s.position).collect()
    }

    pub fn duration(&self) -> f64 {
        self.dt * (self.len() - 1) as f64
    }

    pub fn to_assignment(&self) -> Assignment {
        self.states
            .iter()
            .enumerate()
            .map(|(k, s)| (self.key(k), *s))
            .collect()
    }

    /// Reads this agent's states back out of a solver assignment.
    pub fn updated_from(&self, values: &Assignment) -> Result<Self> {
        let states = (0..self.len())
            .map(|k| values.try_get(&self.key(k)).copied())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            agent_id: self.agent_id,
            dt: self.dt,
            states,
        })
    }

    /// Largest position change against another trajectory of the same shape.
    pub fn max_position_change(&self, other: &Trajectory) -> f64 {
        self.states
            .iter()
            .zip(&other.states)
            .map(|(a, b)| (a.position - b.position).norm())
            .fold(0.0, f64::max)
    }

    pub fn path_length(&self) -> f64 {
        self.states
            .windows(2)
            .map(|w| (w[1].position - w[0].position).norm())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpPriorParams {
    /// Acceleration white-noise power spectral density, m²/s³.
    pub qc: f64,
    pub anchor_pos_sigma: f64,
    pub anchor_vel_sigma: f64,
}

impl Default for GpPriorParams {
    fn default() -> Self {
        Self {
            qc: 1.0,
            anchor_pos_sigma: 1e-4,
            anchor_vel_sigma: 1e-2,
        }
    }
}

impl GpPriorParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("qc", self.qc),
            ("anchor_pos_sigma", self.anchor_pos_sigma),
            ("anchor_vel_sigma", self.anchor_vel_sigma),
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

/// Transition `Φ(dt)` and process noise `Q(dt)` of the constant-velocity
/// prior, in `(x, y, vx, vy)` order.
pub fn constant_velocity_transition(dt: f64, qc: f64) -> Result<(Matrix4<f64>, Matrix4<f64>)> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Parameter(format!("dt must be positive, got {dt}")));
    }
    if !(qc.is_finite() && qc > 0.0) {
        return Err(Error::Parameter(format!("qc must be positive, got {qc}")));
    }
    let mut phi = Matrix4::identity();
    phi[(0, 2)] = dt;
    phi[(1, 3)] = dt;

    let pp = qc * dt.powi(3) / 3.0;
    let pv = qc * dt * dt / 2.0;
    let vv = qc * dt;
    let mut q = Matrix4::zeros();
    for axis in 0..2 {
        let p = axis;
        let v = axis + 2;
        q[(p, p)] = pp;
        q[(p, v)] = pv;
        q[(v, p)] = pv;
        q[(v, v)] = vv;
    }
    Ok((phi, q))
}

/// Binary factor `r = θ_{k+1} − Φ θ_k` with noise `Q`.
#[derive(Debug, Clone)]
pub struct GpPriorFactor {
    keys: [VarKey; 2],
    phi: Matrix4<f64>,
    noise: NoiseModel,
}

impl GpPriorFactor {
    pub fn new(from: VarKey, to: VarKey, dt: f64, qc: f64) -> Result<Self> {
        let (phi, q) = constant_velocity_transition(dt, qc)?;
        Ok(Self {
            keys: [from, to],
            phi,
            noise: NoiseModel::from_covariance(DMatrix::from_column_slice(4, 4, q.as_slice()))?,
        })
    }
}

impl Factor for GpPriorFactor {
    fn keys(&self) -> &[VarKey] {
        &self.keys
    }

    fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    fn kind(&self) -> FactorKind {
        FactorKind::GpPrior
    }

    fn evaluate(&self, states: &[StateVariable]) -> FactorEval {
        let r = states[1].to_vector() - self.phi * states[0].to_vector();
        FactorEval {
            residual: DVector::from_column_slice(r.as_slice()),
            jacobians: vec![
                DMatrix::from_column_slice(4, 4, (-self.phi).as_slice()),
                DMatrix::identity(4, 4),
            ],
        }
    }
}

/// Unary prior pinning a state to a target position and velocity.
#[derive(Debug, Clone)]
pub struct AnchorFactor {
    keys: [VarKey; 1],
    target: StateVariable,
    noise: NoiseModel,
}

impl AnchorFactor {
    pub fn new(key: VarKey, target: StateVariable, pos_sigma: f64, vel_sigma: f64) -> Result<Self> {
        Ok(Self {
            keys: [key],
            target,
            noise: NoiseModel::diagonal(&[pos_sigma, pos_sigma, vel_sigma, vel_sigma])?,
        })
    }

    pub fn target(&self) -> &StateVariable {
        &self.target
    }
}

impl Factor for AnchorFactor {
    fn keys(&self) -> &[VarKey] {
        &self.keys
    }

    fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    fn kind(&self) -> FactorKind {
        FactorKind::Anchor
    }

    fn evaluate(&self, states: &[StateVariable]) -> FactorEval {
        let r = states[0].to_vector() - self.target.to_vector();
        FactorEval {
            residual: DVector::from_column_slice(r.as_slice()),
            jacobians: vec![DMatrix::identity(4, 4)],
        }
    }
}

/// GP chain plus start/goal anchors for one agent with `n` support states.
pub fn make_gp_prior_factors_anchored(
    agent_id: usize,
    n: usize,
    dt: f64,
    start: StateVariable,
    goal: StateVariable,
    params: &GpPriorParams,
) -> Result<Vec<Box<dyn Factor>>> {
    params.validate()?;
    if n < 2 {
        return Err(Error::Parameter(format!("need at least 2 states, got {n}")));
    }
    let mut factors: Vec<Box<dyn Factor>> = Vec::with_capacity(n + 1);
    for k in 0..n - 1 {
        factors.push(Box::new(GpPriorFactor::new(
            VarKey::new(agent_id, k),
            VarKey::new(agent_id, k + 1),
            dt,
            params.qc,
        )?));
    }
    for (k, target) in [(0, start), (n - 1, goal)] {
        factors.push(Box::new(AnchorFactor::new(
            VarKey::new(agent_id, k),
            target,
            params.anchor_pos_sigma,
            params.anchor_vel_sigma,
        )?));
    }
    Ok(factors)
}

/// GP chain over `traj`, anchored at its own first and last states.
pub fn make_gp_prior_factors(
    traj: &Trajectory,
    params: &GpPriorParams,
) -> Result<Vec<Box<dyn Factor>>> {
    make_gp_prior_factors_anchored(
        traj.agent_id,
        traj.len(),
        traj.dt,
        traj.states[0],
        *traj.states.last().unwrap(),
        params,
    )
}

/// Piecewise-linear resampling of the support positions with spacing at most
/// `resolution`; support points are kept.
pub fn resample_polyline(traj: &Trajectory, resolution: f64) -> Result<Vec<Vector2<f64>>> {
    if !(resolution.is_finite() && resolution > 0.0) {
        return Err(Error::Parameter(format!(
            "resolution must be positive, got {resolution}"
        )));
    }
    Ok(resample_points(&traj.positions(), resolution))
}

pub(crate) fn resample_points(points: &[Vector2<f64>], resolution: f64) -> Vec<Vector2<f64>> {
    let mut out = Vec::with_capacity(points.len());
    if let Some(first) = points.first() {
        out.push(*first);
    }
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let len = (b - a).norm();
        if len == 0.0 {
            continue;
        }
        let pieces = (len / resolution).ceil().max(1.0) as usize;
        for i in 1..pieces {
            out.push(a + (b - a) * (i as f64 / pieces as f64));
        }
        out.push(b);
    }
    out
}
