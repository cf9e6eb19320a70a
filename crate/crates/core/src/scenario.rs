//! Scenario configuration and the two ways of solving it.
//!
//! Joint mode builds one factor graph over every agent and solves it with
//! Levenberg-Marquardt. Decentralized mode runs synchronous rounds in which
//! each agent, in id order, re-plans against the trajectories the others
//! last broadcast, then broadcasts its own.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::Vector2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{make_gp_prior_factors_anchored, GpPriorParams, Trajectory};
use crate::graph::{total_cost, Assignment, FactorGraph, FactorKind, StateVariable};
use crate::solver::{levenberg_marquardt, SolverConfig};
use crate::trust::{
    make_consistency_factors, make_proximity_factors, trust_scores, PairThreshold,
    TransparencyReport, TrustParams,
};
use crate::world::{build_sdf, make_obstacle_factors, GridSdf, OccupancyGrid, RobotShape};

/// Occupancy map, either loaded from a grid file or rasterized from
/// axis-aligned rectangles `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_size: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rects: Vec<[f64; 4]>,
}

impl WorldSpec {
    /// Resolves a relative `grid_file` against `base_dir`.
    pub fn build(&self, base_dir: Option<&Path>) -> Result<OccupancyGrid> {
        let inline = self.origin.is_some()
            || self.cell_size.is_some()
            || self.width.is_some()
            || self.height.is_some()
            || !self.rects.is_empty();
        match (&self.grid_file, inline) {
            (Some(_), true) => Err(Error::config(
                "world",
                "give either grid_file or an inline map, not both",
            )),
            (Some(file), false) => {
                let path = match base_dir {
                    Some(dir) if file.is_relative() => dir.join(file),
                    _ => file.clone(),
                };
                OccupancyGrid::load(&path).map_err(|e| {
                    Error::config("world.grid_file", format!("{}: {e}", path.display()))
                })
            }
            (None, _) => {
                let missing = |name: &str| Error::config(format!("world.{name}"), "missing field");
                let origin = self.origin.ok_or_else(|| missing("origin"))?;
                let cell = self.cell_size.ok_or_else(|| missing("cell_size"))?;
                let width = self.width.ok_or_else(|| missing("width"))?;
                let height = self.height.ok_or_else(|| missing("height"))?;
                OccupancyGrid::from_rects(Vector2::from(origin), cell, width, height, &self.rects)
                    .map_err(|e| Error::config("world", e.to_string()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub id: usize,
    pub start: [f64; 2],
    #[serde(default)]
    pub start_velocity: [f64; 2],
    pub goal: [f64; 2],
    #[serde(default)]
    pub goal_velocity: [f64; 2],
    #[serde(default = "default_radius")]
    pub radius: f64,
}

fn default_radius() -> f64 {
    0.1
}

impl AgentSpec {
    pub fn start_state(&self) -> StateVariable {
        StateVariable::new(self.start.into(), self.start_velocity.into())
    }

    pub fn goal_state(&self) -> StateVariable {
        StateVariable::new(self.goal.into(), self.goal_velocity.into())
    }
}

/// Which optional parts of the model are active. Start and goal anchors are
/// always present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorToggles {
    pub gp: bool,
    pub obstacle: bool,
    pub proximity: bool,
    pub consistency: bool,
    pub transparency: bool,
}

impl Default for FactorToggles {
    fn default() -> Self {
        Self {
            gp: true,
            obstacle: true,
            proximity: true,
            consistency: true,
            transparency: true,
        }
    }
}

/// A switchable model component, as named on the command line and in
/// `factors`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Gp,
    Obstacle,
    Proximity,
    Consistency,
    Transparency,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Gp,
        Component::Obstacle,
        Component::Proximity,
        Component::Consistency,
        Component::Transparency,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Gp => "gp",
            Component::Obstacle => "obstacle",
            Component::Proximity => "proximity",
            Component::Consistency => "consistency",
            Component::Transparency => "transparency",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Component::ALL.iter().map(|c| c.name()).collect();
                format!(
                    "unknown component `{s}`, expected one of {}",
                    names.join(", ")
                )
            })
    }
}

impl FactorToggles {
    pub fn set(&mut self, component: Component, on: bool) {
        match component {
            Component::Gp => self.gp = on,
            Component::Obstacle => self.obstacle = on,
            Component::Proximity => self.proximity = on,
            Component::Consistency => self.consistency = on,
            Component::Transparency => self.transparency = on,
        }
    }

    pub fn without(mut self, component: Component) -> Self {
        self.set(component, false);
        self
    }

    /// Proximity, consistency and transparency off.
    pub fn without_trust(self) -> Self {
        self.without(Component::Proximity)
            .without(Component::Consistency)
            .without(Component::Transparency)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Joint,
    Decentralized,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "joint" => Ok(Mode::Joint),
            "decentralized" => Ok(Mode::Decentralized),
            _ => Err(format!(
                "unknown mode `{s}`, expected joint or decentralized"
            )),
        }
    }
}

/// An agent that shares a corrupted copy of its plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MisinfoSpec {
    pub agent_id: usize,
    /// Share of support states that are misreported.
    pub fraction: f64,
    /// Offset applied to each misreported position, m.
    pub magnitude: f64,
    #[serde(default)]
    pub seed: u64,
}

impl MisinfoSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::Parameter(format!(
                "fraction must lie in [0, 1], got {}",
                self.fraction
            )));
        }
        if !(self.magnitude.is_finite() && self.magnitude > 0.0) {
            return Err(Error::Parameter(format!(
                "magnitude must be positive, got {}",
                self.magnitude
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObstacleParams {
    /// Required clearance between a robot's surface and obstacles, m.
    pub eps: f64,
    pub sigma: f64,
}

impl Default for ObstacleParams {
    fn default() -> Self {
        Self {
            eps: 0.1,
            sigma: 0.01,
        }
    }
}

/// Termination of the decentralized rounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusParams {
    pub max_rounds: usize,
    /// Stop once no trajectory moves more than this in a round, m.
    pub tol: f64,
}

impl Default for ConsensusParams {
    fn default() -> Self {
        Self {
            max_rounds: 50,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub world: WorldSpec,
    pub agents: Vec<AgentSpec>,
    pub steps: usize,
    pub dt: f64,
    #[serde(default)]
    pub factors: FactorToggles,
    #[serde(default)]
    pub trust_params: TrustParams,
    #[serde(default)]
    pub misinfo: Vec<MisinfoSpec>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub gp_params: GpPriorParams,
    #[serde(default)]
    pub obstacle_params: ObstacleParams,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub consensus: ConsensusParams,
    /// Directory that relative paths in the config are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl ScenarioConfig {
    /// Parses JSON text; errors name the offending field.
    pub fn from_json(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(
                if path == "." { String::new() } else { path },
                e.into_inner().to_string(),
            )
        })?;
        cfg.base_dir = base_dir.map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(path.display().to_string(), format!("cannot read file: {e}"))
        })?;
        Self::from_json(&text, path.parent())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks everything except the world map, which needs loading.
    pub fn validate(&self) -> Result<()> {
        fn field(path: &str) -> impl Fn(Error) -> Error + '_ {
            move |e| Error::config(path, e.to_string())
        }
        if self.agents.is_empty() {
            return Err(Error::config("agents", "at least one agent is required"));
        }
        if self.steps < 2 {
            return Err(Error::config(
                "steps",
                format!("must be at least 2, got {}", self.steps),
            ));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::config(
                "dt",
                format!("must be positive, got {}", self.dt),
            ));
        }
        let mut ids = BTreeSet::new();
        for (i, a) in self.agents.iter().enumerate() {
            if !ids.insert(a.id) {
                return Err(Error::config(
                    format!("agents[{i}].id"),
                    format!("duplicate id {}", a.id),
                ));
            }
            if !(a.radius.is_finite() && a.radius > 0.0) {
                return Err(Error::config(
                    format!("agents[{i}].radius"),
                    format!("must be positive, got {}", a.radius),
                ));
            }
            for (name, v) in [
                ("start", a.start),
                ("start_velocity", a.start_velocity),
                ("goal", a.goal),
                ("goal_velocity", a.goal_velocity),
            ] {
                if !v.iter().all(|x| x.is_finite()) {
                    return Err(Error::config(
                        format!("agents[{i}].{name}"),
                        "must be finite",
                    ));
                }
            }
        }
        self.trust_params
            .validate()
            .map_err(field("trust_params"))?;
        self.gp_params.validate().map_err(field("gp_params"))?;
        self.solver.validate().map_err(field("solver"))?;
        let o = self.obstacle_params;
        if !(o.eps.is_finite() && o.eps >= 0.0) {
            return Err(Error::config(
                "obstacle_params.eps",
                format!("must be non-negative, got {}", o.eps),
            ));
        }
        if !(o.sigma.is_finite() && o.sigma > 0.0) {
            return Err(Error::config(
                "obstacle_params.sigma",
                format!("must be positive, got {}", o.sigma),
            ));
        }
        let r = self.consensus;
        if r.max_rounds == 0 {
            return Err(Error::config("consensus.max_rounds", "must be at least 1"));
        }
        if !(r.tol.is_finite() && r.tol > 0.0) {
            return Err(Error::config(
                "consensus.tol",
                format!("must be positive, got {}", r.tol),
            ));
        }
        for (i, m) in self.misinfo.iter().enumerate() {
            m.validate().map_err(field(&format!("misinfo[{i}]")))?;
            if !ids.contains(&m.agent_id) {
                return Err(Error::config(
                    format!("misinfo[{i}].agent_id"),
                    format!("no agent with id {}", m.agent_id),
                ));
            }
        }
        Ok(())
    }
}

/// Side length of the square reference world, m.
pub const REFERENCE_WORLD_SIZE: f64 = 5.0;
/// Half-width of the free cross in the reference world, m.
pub const REFERENCE_CORRIDOR_HALF_WIDTH: f64 = 0.8;
/// Speeds at which the reference agents enter and leave the intersection,
/// m/s. Unequal speeds break the four-fold symmetry of the layout.
pub const REFERENCE_SPEEDS: [f64; 4] = [1.45, 1.2, 1.35, 1.25];

/// Four agents turning left through an unsignalized four-way intersection.
/// The corners of the 5 m square world are blocked, leaving two crossing
/// 1.6 m roads.
pub fn reference_scenario() -> ScenarioConfig {
    let h = REFERENCE_WORLD_SIZE / 2.0;
    let c = REFERENCE_CORRIDOR_HALF_WIDTH;
    let [v1, v2, v3, v4] = REFERENCE_SPEEDS;
    let agent = |id, start, start_velocity, goal, goal_velocity| AgentSpec {
        id,
        start,
        start_velocity,
        goal,
        goal_velocity,
        radius: 0.1,
    };
    ScenarioConfig {
        world: WorldSpec {
            grid_file: None,
            origin: Some([-h, -h]),
            cell_size: Some(0.05),
            width: Some(100),
            height: Some(100),
            rects: vec![
                [-h, -h, -c, -c],
                [c, -h, h, -c],
                [-h, c, -c, h],
                [c, c, h, h],
            ],
        },
        agents: vec![
            agent(1, [0.4, -2.15], [0.0, v1], [-2.15, 0.4], [-v1, 0.0]),
            agent(2, [-0.4, 2.15], [0.0, -v2], [2.15, -0.4], [v2, 0.0]),
            agent(3, [-2.15, -0.4], [v3, 0.0], [0.4, 2.15], [0.0, v3]),
            agent(4, [2.15, 0.4], [-v4, 0.0], [-0.4, -2.15], [0.0, -v4]),
        ],
        steps: 50,
        dt: 0.1,
        factors: FactorToggles::default(),
        trust_params: TrustParams::default(),
        misinfo: Vec::new(),
        mode: Mode::Joint,
        seed: 0,
        gp_params: GpPriorParams::default(),
        obstacle_params: ObstacleParams::default(),
        solver: SolverConfig::default(),
        consensus: ConsensusParams::default(),
        base_dir: None,
    }
}

/// Constant-velocity straight line from `start` to `goal` over `n` states.
pub fn straight_line_init(
    agent_id: usize,
    start: Vector2<f64>,
    goal: Vector2<f64>,
    n: usize,
    dt: f64,
) -> Result<Trajectory> {
    if n < 2 {
        return Err(Error::Parameter(format!("need at least 2 states, got {n}")));
    }
    let velocity = (goal - start) / ((n - 1) as f64 * dt);
    let states = (0..n)
        .map(|k| {
            let f = k as f64 / (n - 1) as f64;
            StateVariable::new(start + (goal - start) * f, velocity)
        })
        .collect();
    Trajectory::new(agent_id, dt, states)
}

/// Indices that `spec` misreports on a trajectory of `n` states.
pub fn misreported_indices(spec: &MisinfoSpec, n: usize) -> Vec<usize> {
    let count = ((spec.fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut idx = index::sample(&mut rng, n, count.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// Copy of `traj` in which a seeded selection of positions is displaced by
/// `spec.magnitude` in a random direction. The same spec always corrupts the
/// same indices in the same directions.
pub fn inject_misinformation(traj: &Trajectory, spec: &MisinfoSpec) -> Result<Trajectory> {
    spec.validate()?;
    let idx = misreported_indices(spec, traj.len());
    // directions come from a second stream so they do not depend on the count
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5DEE_CE66_D1CE_5EED);
    let mut shared = traj.clone();
    for k in idx {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        shared.states[k].position += Vector2::new(angle.cos(), angle.sin()) * spec.magnitude;
    }
    Ok(shared)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentTrust {
    pub agent_id: usize,
    pub discrepancy: f64,
    pub trust_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustReport {
    pub mode: Mode,
    pub transparency_enabled: bool,
    pub agents: Vec<AgentTrust>,
    /// Proximity margin used for every pair.
    pub thresholds: Vec<PairThreshold>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub converged: bool,
    /// Levenberg-Marquardt iterations summed over every solve.
    pub iterations: usize,
    /// Decentralized rounds; zero in joint mode.
    pub rounds: usize,
    /// Joint-graph cost of the initial and final trajectories.
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Decentralized only: sum of every agent's local cost after each round.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub round_costs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trajectories: Vec<Trajectory>,
    pub report: TrustReport,
    pub solve: SolveSummary,
}

/// A validated scenario with its map and signed distance field.
#[derive(Debug, Clone)]
pub struct Scenario {
    config: ScenarioConfig,
    grid: OccupancyGrid,
    sdf: Arc<GridSdf>,
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.world.build(config.base_dir.as_deref())?;
        for (i, a) in config.agents.iter().enumerate() {
            for (name, p) in [("start", a.start), ("goal", a.goal)] {
                if !grid.contains(&p.into()) {
                    return Err(Error::config(
                        format!("agents[{i}].{name}"),
                        format!("({}, {}) lies outside the world", p[0], p[1]),
                    ));
                }
            }
        }
        let sdf = build_sdf(&grid).map_err(|e| Error::config("world", e.to_string()))?;
        Ok(Self {
            config,
            grid,
            sdf: Arc::new(sdf),
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn grid(&self) -> &OccupancyGrid {
        &self.grid
    }

    pub fn sdf(&self) -> &Arc<GridSdf> {
        &self.sdf
    }

    pub fn agent_ids(&self) -> Vec<usize> {
        self.config.agents.iter().map(|a| a.id).collect()
    }

    pub fn radii(&self) -> Vec<f64> {
        self.config.agents.iter().map(|a| a.radius).collect()
    }

    pub fn initial_trajectories(&self) -> Result<Vec<Trajectory>> {
        let c = &self.config;
        c.agents
            .iter()
            .map(|a| straight_line_init(a.id, a.start.into(), a.goal.into(), c.steps, c.dt))
            .collect()
    }

    fn misinfo_for(&self, agent_id: usize) -> Option<MisinfoSpec> {
        self.config
            .misinfo
            .iter()
            .find(|m| m.agent_id == agent_id)
            .map(|m| MisinfoSpec {
                seed: m.seed ^ self.config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15),
                ..*m
            })
    }

    /// What each agent broadcasts when its true plan is `trajs`.
    pub fn shared_trajectories(&self, trajs: &[Trajectory]) -> Result<Vec<Trajectory>> {
        trajs
            .iter()
            .map(|t| match self.misinfo_for(t.agent_id) {
                Some(spec) => inject_misinformation(t, &spec),
                None => Ok(t.clone()),
            })
            .collect()
    }

    /// Discrepancy of each agent's broadcast against its observed trajectory
    /// and the resulting pair margins. Margins stay at their base value when
    /// transparency is off.
    pub fn transparency(&self, truth: &[Trajectory]) -> Result<TransparencyReport> {
        let params = &self.config.trust_params;
        let shared = self.shared_trajectories(truth)?;
        let measured = TransparencyReport::evaluate(&shared, truth, params)?;
        if self.config.factors.transparency {
            Ok(measured)
        } else {
            let neutral = TransparencyReport::neutral(&self.agent_ids(), params);
            Ok(TransparencyReport {
                discrepancy: measured.discrepancy,
                thresholds: neutral.thresholds,
            })
        }
    }

    fn agent_factors(&self, index: usize, graph: &mut FactorGraph) -> Result<()> {
        let c = &self.config;
        let a = &c.agents[index];
        let mut prior = make_gp_prior_factors_anchored(
            a.id,
            c.steps,
            c.dt,
            a.start_state(),
            a.goal_state(),
            &c.gp_params,
        )?;
        if !c.factors.gp {
            prior.retain(|f| f.kind() != FactorKind::GpPrior);
        }
        graph.extend_factors(prior);
        if c.factors.obstacle {
            let template = straight_line_init(a.id, a.start.into(), a.goal.into(), c.steps, c.dt)?;
            graph.extend_factors(make_obstacle_factors(
                &template,
                &self.sdf,
                RobotShape::new(a.radius)?,
                c.obstacle_params.eps,
                c.obstacle_params.sigma,
            )?);
        }
        Ok(())
    }

    fn pair_factors(
        &self,
        pair: &[Trajectory],
        radii: &[f64],
        report: &TransparencyReport,
        graph: &mut FactorGraph,
    ) -> Result<()> {
        let c = &self.config;
        if c.factors.proximity {
            graph.extend_factors(make_proximity_factors(
                pair,
                radii,
                &c.trust_params,
                &report.pair_thresholds(),
            )?);
        }
        if c.factors.consistency {
            graph.extend_factors(make_consistency_factors(pair, &c.trust_params)?);
        }
        Ok(())
    }

    /// Every agent's prior, anchor and obstacle factors plus the enabled
    /// trust factors over all pairs, with variables seeded from `trajs`.
    pub fn joint_graph(
        &self,
        trajs: &[Trajectory],
        report: &TransparencyReport,
    ) -> Result<FactorGraph> {
        let mut graph = FactorGraph::new();
        for t in trajs {
            for (k, s) in t.states.iter().enumerate() {
                graph.add_variable(t.key(k), *s);
            }
        }
        for i in 0..self.config.agents.len() {
            self.agent_factors(i, &mut graph)?;
        }
        let c = &self.config;
        if c.factors.proximity {
            graph.extend_factors(make_proximity_factors(
                trajs,
                &self.radii(),
                &c.trust_params,
                &report.pair_thresholds(),
            )?);
        }
        if c.factors.consistency {
            graph.extend_factors(make_consistency_factors(trajs, &c.trust_params)?);
        }
        Ok(graph)
    }

    /// Joint-graph cost of `trajs`.
    pub fn joint_cost(&self, trajs: &[Trajectory], report: &TransparencyReport) -> Result<f64> {
        let graph = self.joint_graph(trajs, report)?;
        total_cost(&graph, &assignment_of(trajs))
    }

    /// Agent `index`'s own factors plus its trust factors against every
    /// other agent, whose states from `others` enter as fixed variables.
    pub fn local_graph(
        &self,
        index: usize,
        own: &Trajectory,
        others: &[Trajectory],
        report: &TransparencyReport,
    ) -> Result<FactorGraph> {
        let mut graph = FactorGraph::new();
        for (k, s) in own.states.iter().enumerate() {
            graph.add_variable(own.key(k), *s);
        }
        self.agent_factors(index, &mut graph)?;
        let radii = self.radii();
        for (j, other) in others.iter().enumerate() {
            if j == index {
                continue;
            }
            for (k, s) in other.states.iter().enumerate() {
                graph.add_fixed_variable(other.key(k), *s);
            }
            self.pair_factors(
                &[own.clone(), other.clone()],
                &[radii[index], radii[j]],
                report,
                &mut graph,
            )?;
        }
        Ok(graph)
    }

    fn trust_report(
        &self,
        trajs: &[Trajectory],
        transparency: &TransparencyReport,
    ) -> Result<TrustReport> {
        let scores = trust_scores(
            trajs,
            &self.radii(),
            transparency,
            &self.config.trust_params,
        )?;
        Ok(TrustReport {
            mode: self.config.mode,
            transparency_enabled: self.config.factors.transparency,
            agents: scores
                .into_iter()
                .map(|(agent_id, trust_score)| AgentTrust {
                    agent_id,
                    discrepancy: transparency.discrepancy_of(agent_id),
                    trust_score,
                })
                .collect(),
            thresholds: transparency.thresholds.clone(),
        })
    }

    pub fn run(&self) -> Result<RunOutcome> {
        match self.config.mode {
            Mode::Joint => self.run_joint(),
            Mode::Decentralized => self.run_decentralized(),
        }
    }

    /// Transparency preprocessing, then one Levenberg-Marquardt solve of the
    /// joint graph from the straight-line initialization.
    pub fn run_joint(&self) -> Result<RunOutcome> {
        let init = self.initial_trajectories()?;
        let transparency = self.transparency(&init)?;
        let graph = self.joint_graph(&init, &transparency)?;
        let result = levenberg_marquardt(&graph, &assignment_of(&init), &self.config.solver)
            .map_err(|e| e.in_scenario("joint solve"))?;
        let trajectories = init
            .iter()
            .map(|t| t.updated_from(&result.solution))
            .collect::<Result<Vec<_>>>()?;
        Ok(RunOutcome {
            report: self.trust_report(&trajectories, &transparency)?,
            trajectories,
            solve: SolveSummary {
                converged: result.converged,
                iterations: result.iterations,
                rounds: 0,
                initial_cost: result.initial_cost(),
                final_cost: result.final_cost(),
                round_costs: Vec::new(),
            },
        })
    }

    /// Round-based consensus. Within a round agents re-plan in id order,
    /// each against the latest broadcast of the others, and broadcast at
    /// once. Stops when no agent moves more than `run.tol` in a round.
    pub fn run_decentralized(&self) -> Result<RunOutcome> {
        let c = &self.config;
        let mut order: Vec<usize> = (0..c.agents.len()).collect();
        order.sort_by_key(|i| c.agents[*i].id);

        let mut truth = self.initial_trajectories()?;
        let transparency = self.transparency(&truth)?;
        let initial_cost = self.joint_cost(&truth, &transparency)?;
        let mut broadcast = self.shared_trajectories(&truth)?;
        let mut iterations = 0;
        let mut converged = false;
        let mut all_solves_converged = true;
        let mut round_costs = Vec::new();
        let mut rounds = 0;

        for round in 1..=c.consensus.max_rounds {
            rounds = round;
            let mut change: f64 = 0.0;
            for &i in &order {
                let graph = self.local_graph(i, &truth[i], &broadcast, &transparency)?;
                let mut init = truth[i].to_assignment();
                for (key, s) in graph.variables().iter() {
                    if graph.is_fixed(key) {
                        init.insert(*key, *s);
                    }
                }
                let result = levenberg_marquardt(&graph, &init, &c.solver).map_err(|e| {
                    e.in_scenario(format!("round {round}, agent {}", c.agents[i].id))
                })?;
                iterations += result.iterations;
                all_solves_converged &= result.converged;
                let next = truth[i].updated_from(&result.solution)?;
                change = change.max(next.max_position_change(&truth[i]));
                broadcast[i] = match self.misinfo_for(next.agent_id) {
                    Some(spec) => inject_misinformation(&next, &spec)?,
                    None => next.clone(),
                };
                truth[i] = next;
            }
            round_costs.push(self.round_cost(&broadcast, &transparency)?);
            if change < c.consensus.tol {
                converged = true;
                break;
            }
        }

        let final_cost = self.joint_cost(&truth, &transparency)?;
        Ok(RunOutcome {
            report: self.trust_report(&truth, &transparency)?,
            trajectories: truth,
            solve: SolveSummary {
                converged: converged && all_solves_converged,
                iterations,
                rounds,
                initial_cost,
                final_cost,
                round_costs,
            },
        })
    }

    /// Sum of every agent's local cost with all states taken from
    /// `broadcast`, each shared trust factor split evenly between its two
    /// agents. This is the joint cost of the broadcast set.
    pub fn round_cost(&self, broadcast: &[Trajectory], report: &TransparencyReport) -> Result<f64> {
        self.joint_cost(broadcast, report)
    }
}

fn assignment_of(trajs: &[Trajectory]) -> Assignment {
    let mut values = Assignment::new();
    for t in trajs {
        values.extend(t.states.iter().enumerate().map(|(k, s)| (t.key(k), *s)));
    }
    values
}

/// Joint factor graph of `cfg` seeded with the straight-line initialization.
pub fn build_joint_graph(cfg: &ScenarioConfig) -> Result<FactorGraph> {
    let scenario = Scenario::new(cfg.clone())?;
    let init = scenario.initial_trajectories()?;
    let report = scenario.transparency(&init)?;
    scenario.joint_graph(&init, &report)
}

pub fn run_joint(cfg: &ScenarioConfig) -> Result<RunOutcome> {
    Scenario::new(cfg.clone())?.run_joint()
}

pub fn run_decentralized(cfg: &ScenarioConfig) -> Result<RunOutcome> {
    Scenario::new(cfg.clone())?.run_decentralized()
}
