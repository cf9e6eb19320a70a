//! Evaluation of optimized trajectories: pairwise minimum distances,
//! proximity-violation intervals and the acceleration-inconsistency rate.
//!
//! Agents move along their polylines in lockstep, each support interval
//! being traversed linearly in time. Distances between agents are therefore
//! taken between simultaneous positions, minimized in closed form over every
//! interval. Purely geometric path clearance (ignoring time) is reported
//! separately; crossing paths have zero clearance even when the agents pass
//! the crossing at different times.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::Trajectory;
use crate::trust::{acceleration, agent_pairs, check_alignment};

/// Default acceleration-difference tolerance for the inconsistency rate, m/s².
pub const DEFAULT_ACCEL_TOL: f64 = 0.5;

/// Symmetric matrix of pairwise distances, indexed in trajectory order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinDistanceMatrix {
    pub agent_ids: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

impl MinDistanceMatrix {
    fn from_pairs(agent_ids: Vec<usize>, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let m = agent_ids.len();
        let mut values = vec![vec![0.0; m]; m];
        for (i, j) in agent_pairs(m) {
            let d = f(i, j);
            values[i][j] = d;
            values[j][i] = d;
        }
        Self { agent_ids, values }
    }

    pub fn len(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agent_ids.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    fn index_of(&self, agent: usize) -> Option<usize> {
        self.agent_ids.iter().position(|a| *a == agent)
    }

    /// Distance between two agents by id.
    pub fn between(&self, a: usize, b: usize) -> Option<f64> {
        Some(self.values[self.index_of(a)?][self.index_of(b)?])
    }

    /// Smallest off-diagonal entry; infinite with fewer than two agents.
    pub fn global_min(&self) -> f64 {
        agent_pairs(self.len())
            .map(|(i, j)| self.values[i][j])
            .fold(f64::INFINITY, f64::min)
    }

    /// Smallest distance from `agent` to any other agent.
    pub fn row_min(&self, agent: usize) -> Option<f64> {
        let i = self.index_of(agent)?;
        Some(
            (0..self.len())
                .filter(|j| *j != i)
                .map(|j| self.values[i][j])
                .fold(f64::INFINITY, f64::min),
        )
    }

    /// Agent id pairs whose entry is strictly below `threshold`.
    pub fn pairs_below(&self, threshold: f64) -> Vec<(usize, usize)> {
        agent_pairs(self.len())
            .filter(|(i, j)| self.values[*i][*j] < threshold)
            .map(|(i, j)| (self.agent_ids[i], self.agent_ids[j]))
            .collect()
    }
}

/// Minimum distance between segments `[p0, p1]` and `[q0, q1]`.
pub fn segment_distance(
    p0: &Vector2<f64>,
    p1: &Vector2<f64>,
    q0: &Vector2<f64>,
    q1: &Vector2<f64>,
) -> f64 {
    let d1 = p1 - p0;
    let d2 = q1 - q0;
    let r = p0 - q0;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);

    let (s, t) = if a == 0.0 && e == 0.0 {
        (0.0, 0.0)
    } else if a == 0.0 {
        (0.0, (f / e).clamp(0.0, 1.0))
    } else {
        let c = d1.dot(&r);
        if e == 0.0 {
            ((-c / a).clamp(0.0, 1.0), 0.0)
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s = if denom > 0.0 {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t = (b * s + f) / e;
            if t < 0.0 {
                t = 0.0;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t > 1.0 {
                t = 1.0;
                s = ((b - c) / a).clamp(0.0, 1.0);
            }
            (s, t)
        }
    };
    let closest = (p0 + d1 * s) - (q0 + d2 * t);
    if a > 0.0 && e > 0.0 && segments_cross(p0, p1, q0, q1) {
        0.0
    } else {
        closest.norm()
    }
}

fn cross(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

// Proper or touching intersection by orientation signs; the closest-point
// formula alone leaves rounding noise at crossings.
fn segments_cross(
    p0: &Vector2<f64>,
    p1: &Vector2<f64>,
    q0: &Vector2<f64>,
    q1: &Vector2<f64>,
) -> bool {
    let o1 = cross(&(p1 - p0), &(q0 - p0));
    let o2 = cross(&(p1 - p0), &(q1 - p0));
    let o3 = cross(&(q1 - q0), &(p0 - q0));
    let o4 = cross(&(q1 - q0), &(p1 - q0));
    let straddle = |x: f64, y: f64| (x <= 0.0 && y >= 0.0) || (x >= 0.0 && y <= 0.0);
    let collinear = o1 == 0.0 && o2 == 0.0;
    !collinear && straddle(o1, o2) && straddle(o3, o4)
}

/// Closest approach of two points moving linearly from `a0→a1` and `b0→b1`
/// over the same time interval. Returns the distance and the interval
/// fraction at which it occurs.
pub fn synchronized_distance(
    a0: &Vector2<f64>,
    a1: &Vector2<f64>,
    b0: &Vector2<f64>,
    b1: &Vector2<f64>,
) -> (f64, f64) {
    let d0 = a0 - b0;
    let e = (a1 - b1) - d0;
    let ee = e.norm_squared();
    let t = if ee > 0.0 {
        (-d0.dot(&e) / ee).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((d0 + e * t).norm(), t)
}

fn check_radii(trajs: &[Trajectory], radii: &[f64]) -> Result<()> {
    if radii.len() != trajs.len() {
        return Err(Error::LengthMismatch {
            expected: trajs.len(),
            actual: radii.len(),
        });
    }
    Ok(())
}

fn ids(trajs: &[Trajectory]) -> Vec<usize> {
    trajs.iter().map(|t| t.agent_id).collect()
}

/// Closest simultaneous center distance of two aligned trajectories.
pub fn closest_approach(a: &Trajectory, b: &Trajectory) -> f64 {
    a.states
        .windows(2)
        .zip(b.states.windows(2))
        .map(|(wa, wb)| {
            synchronized_distance(
                &wa[0].position,
                &wa[1].position,
                &wb[0].position,
                &wb[1].position,
            )
            .0
        })
        .fold(f64::INFINITY, f64::min)
}

/// Surface-to-surface minimum distance over time between every pair, clamped
/// at zero.
pub fn min_distance_matrix(trajs: &[Trajectory], radii: &[f64]) -> Result<MinDistanceMatrix> {
    check_alignment(trajs)?;
    check_radii(trajs, radii)?;
    Ok(MinDistanceMatrix::from_pairs(ids(trajs), |i, j| {
        (closest_approach(&trajs[i], &trajs[j]) - radii[i] - radii[j]).max(0.0)
    }))
}

/// Center-to-center minimum distance over time between every pair.
pub fn center_distance_matrix(trajs: &[Trajectory]) -> Result<MinDistanceMatrix> {
    check_alignment(trajs)?;
    Ok(MinDistanceMatrix::from_pairs(ids(trajs), |i, j| {
        closest_approach(&trajs[i], &trajs[j])
    }))
}

/// Minimum over all segment pairs of two polylines, ignoring time.
pub fn polyline_distance(a: &[Vector2<f64>], b: &[Vector2<f64>]) -> f64 {
    let seg = |p: &[Vector2<f64>]| -> Vec<(Vector2<f64>, Vector2<f64>)> {
        if p.len() == 1 {
            vec![(p[0], p[0])]
        } else {
            p.windows(2).map(|w| (w[0], w[1])).collect()
        }
    };
    let (sa, sb) = (seg(a), seg(b));
    let mut best = f64::INFINITY;
    for (p0, p1) in &sa {
        for (q0, q1) in &sb {
            best = best.min(segment_distance(p0, p1, q0, q1));
        }
    }
    best
}

/// Surface clearance between the geometric paths of every pair, clamped at
/// zero. Time is ignored.
pub fn path_clearance_matrix(trajs: &[Trajectory], radii: &[f64]) -> Result<MinDistanceMatrix> {
    check_radii(trajs, radii)?;
    let paths: Vec<_> = trajs.iter().map(Trajectory::positions).collect();
    Ok(MinDistanceMatrix::from_pairs(ids(trajs), |i, j| {
        (polyline_distance(&paths[i], &paths[j]) - radii[i] - radii[j]).max(0.0)
    }))
}

/// A maximal time window in which two agents are closer than the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationSegment {
    pub agent_a: usize,
    pub agent_b: usize,
    /// Start and end time, s.
    pub time: [f64; 2],
    /// Arc-length interval on agent a's polyline, m.
    pub arc_a: [f64; 2],
    pub arc_b: [f64; 2],
    /// Smallest surface distance inside the window.
    pub min_distance: f64,
}

fn cumulative_length(t: &Trajectory) -> Vec<f64> {
    let mut out = Vec::with_capacity(t.len());
    let mut s = 0.0;
    out.push(s);
    for w in t.states.windows(2) {
        s += (w[1].position - w[0].position).norm();
        out.push(s);
    }
    out
}

fn arc_at(cum: &[f64], tau: f64) -> f64 {
    let k = (tau.floor() as usize).min(cum.len() - 2);
    let f = tau - k as f64;
    cum[k] + f * (cum[k + 1] - cum[k])
}

/// Sub-interval of `[0, 1]` where `|d0 + t·e| < r`, if any.
fn below_radius(d0: &Vector2<f64>, e: &Vector2<f64>, r: f64) -> Option<(f64, f64)> {
    let a = e.norm_squared();
    let b = 2.0 * d0.dot(e);
    let c = d0.norm_squared() - r * r;
    if a == 0.0 {
        return (c < 0.0).then_some((0.0, 1.0));
    }
    let disc = b * b - 4.0 * a * c;
    if disc <= 0.0 {
        return None;
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let (mut r1, mut r2) = if q != 0.0 { (q / a, c / q) } else { (0.0, 0.0) };
    if r1 > r2 {
        std::mem::swap(&mut r1, &mut r2);
    }
    let (lo, hi) = (r1.max(0.0), r2.min(1.0));
    (lo < hi).then_some((lo, hi))
}

/// Every maximal window in which a pair's surface distance is strictly below
/// `threshold`, with the matching stretches of both polylines.
pub fn proximity_violations(
    trajs: &[Trajectory],
    radii: &[f64],
    threshold: f64,
) -> Result<Vec<ViolationSegment>> {
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(Error::Parameter(format!(
            "threshold must be positive, got {threshold}"
        )));
    }
    check_alignment(trajs)?;
    check_radii(trajs, radii)?;
    let cum: Vec<Vec<f64>> = trajs.iter().map(cumulative_length).collect();
    let mut out = Vec::new();
    for (i, j) in agent_pairs(trajs.len()) {
        let (a, b) = (&trajs[i], &trajs[j]);
        let reach = threshold + radii[i] + radii[j];
        // (start, end, min center distance) in units of steps
        let mut open: Option<(f64, f64, f64)> = None;
        let mut windows = Vec::new();
        for k in 0..a.len() - 1 {
            let (a0, a1) = (a.states[k].position, a.states[k + 1].position);
            let (b0, b1) = (b.states[k].position, b.states[k + 1].position);
            let d0 = a0 - b0;
            let e = (a1 - b1) - d0;
            let Some((lo, hi)) = below_radius(&d0, &e, reach) else {
                continue;
            };
            let (_, t_star) = synchronized_distance(&a0, &a1, &b0, &b1);
            let dmin = (d0 + e * t_star.clamp(lo, hi)).norm();
            let (start, end) = (k as f64 + lo, k as f64 + hi);
            open = match open {
                Some((s, prev_end, m)) if start <= prev_end + 1e-12 => Some((s, end, m.min(dmin))),
                other => {
                    if let Some(w) = other {
                        windows.push(w);
                    }
                    Some((start, end, dmin))
                }
            };
        }
        windows.extend(open);
        for (start, end, dmin) in windows {
            out.push(ViolationSegment {
                agent_a: a.agent_id,
                agent_b: b.agent_id,
                time: [start * a.dt, end * a.dt],
                arc_a: [arc_at(&cum[i], start), arc_at(&cum[i], end)],
                arc_b: [arc_at(&cum[j], start), arc_at(&cum[j], end)],
                min_distance: dmin - radii[i] - radii[j],
            });
        }
    }
    Ok(out)
}

/// Points of `points` between arc lengths `s0` and `s1`, endpoints included.
pub fn polyline_section(points: &[Vector2<f64>], s0: f64, s1: f64) -> Vec<Vector2<f64>> {
    let mut out = Vec::new();
    let mut s = 0.0;
    for w in points.windows(2) {
        let len = (w[1] - w[0]).norm();
        let (lo, hi) = (s, s + len);
        if hi >= s0 && lo <= s1 && len > 0.0 {
            let at = |x: f64| w[0] + (w[1] - w[0]) * ((x - lo) / len).clamp(0.0, 1.0);
            if out.is_empty() {
                out.push(at(s0.max(lo)));
            }
            out.push(at(s1.min(hi)));
        }
        s = hi;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InconsistencyReport {
    /// Share of eligible samples whose acceleration difference exceeds the tolerance.
    pub fraction: f64,
    pub eligible: usize,
    pub exceeding: usize,
    /// No pair was ever within range; `fraction` is then zero.
    pub empty: bool,
}

/// Fraction of `(pair, step)` samples with center distance below `range`
/// whose acceleration difference exceeds `accel_tol`.
pub fn inconsistency_metric(
    trajs: &[Trajectory],
    range: f64,
    accel_tol: f64,
) -> Result<InconsistencyReport> {
    check_alignment(trajs)?;
    let mut eligible = 0;
    let mut exceeding = 0;
    for (i, j) in agent_pairs(trajs.len()) {
        let (a, b) = (&trajs[i], &trajs[j]);
        for k in 0..a.len() - 1 {
            if (a.states[k].position - b.states[k].position).norm() >= range {
                continue;
            }
            eligible += 1;
            let acc_a = acceleration(&a.states[k], &a.states[k + 1], a.dt);
            let acc_b = acceleration(&b.states[k], &b.states[k + 1], b.dt);
            if (acc_a - acc_b).norm() > accel_tol {
                exceeding += 1;
            }
        }
    }
    Ok(InconsistencyReport {
        fraction: if eligible == 0 {
            0.0
        } else {
            exceeding as f64 / eligible as f64
        },
        eligible,
        exceeding,
        empty: eligible == 0,
    })
}
