//! Environment model: occupancy grid, signed distance field and the unary
//! obstacle-avoidance factor.
//!
//! Cells are addressed `(col, row)` with `row = 0` at the lowest `y`. Cell
//! `(i, j)` has its center at `origin + cell_size · (i + ½, j + ½)`.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::Trajectory;
use crate::graph::{Factor, FactorEval, FactorKind, NoiseModel, StateVariable, VarKey};

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    origin: Vector2<f64>,
    cell_size: f64,
    width: usize,
    height: usize,
    cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(
        origin: Vector2<f64>,
        cell_size: f64,
        width: usize,
        height: usize,
        cells: Vec<bool>,
    ) -> Result<Self> {
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(Error::Parameter(format!(
                "cell_size must be positive, got {cell_size}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::Parameter("grid must be non-empty".into()));
        }
        if cells.len() != width * height {
            return Err(Error::LengthMismatch {
                expected: width * height,
                actual: cells.len(),
            });
        }
        if !(origin.x.is_finite() && origin.y.is_finite()) {
            return Err(Error::Parameter("grid origin must be finite".into()));
        }
        Ok(Self {
            origin,
            cell_size,
            width,
            height,
            cells,
        })
    }

    pub fn empty(
        origin: Vector2<f64>,
        cell_size: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        Self::new(
            origin,
            cell_size,
            width,
            height,
            vec![false; width * height],
        )
    }

    /// Marks every cell whose center lies inside one of the axis-aligned
    /// rectangles `[x_min, y_min, x_max, y_max]`.
    pub fn from_rects(
        origin: Vector2<f64>,
        cell_size: f64,
        width: usize,
        height: usize,
        rects: &[[f64; 4]],
    ) -> Result<Self> {
        let mut grid = Self::empty(origin, cell_size, width, height)?;
        for j in 0..height {
            for i in 0..width {
                let c = grid.cell_center(i, j);
                if rects
                    .iter()
                    .any(|r| c.x >= r[0] && c.x <= r[2] && c.y >= r[1] && c.y <= r[3])
                {
                    grid.set(i, j, true);
                }
            }
        }
        Ok(grid)
    }

    pub fn origin(&self) -> Vector2<f64> {
        self.origin
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn extent(&self) -> Vector2<f64> {
        Vector2::new(
            self.width as f64 * self.cell_size,
            self.height as f64 * self.cell_size,
        )
    }

    pub fn occupied(&self, i: usize, j: usize) -> bool {
        self.cells[j * self.width + i]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.cells[j * self.width + i] = value;
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Vector2<f64> {
        self.origin
            + Vector2::new(
                (i as f64 + 0.5) * self.cell_size,
                (j as f64 + 0.5) * self.cell_size,
            )
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        let rel = p - self.origin;
        let ext = self.extent();
        rel.x >= 0.0 && rel.y >= 0.0 && rel.x <= ext.x && rel.y <= ext.y
    }

    /// Cell containing `p`, if inside the grid.
    pub fn cell_of(&self, p: &Vector2<f64>) -> Option<(usize, usize)> {
        if !self.contains(p) {
            return None;
        }
        let rel = (p - self.origin) / self.cell_size;
        let i = (rel.x.floor() as usize).min(self.width - 1);
        let j = (rel.y.floor() as usize).min(self.height - 1);
        Some((i, j))
    }

    /// Parses the plain-text format: a header line
    /// `width height cell_size origin_x origin_y` followed by `height` rows
    /// of `width` characters `0`/`1`, the first row being the top (highest y).
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::GridFormat("missing header line".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::GridFormat(format!(
                "header needs 5 fields `width height cell_size origin_x origin_y`, got {}",
                fields.len()
            )));
        }
        let int = |s: &str, name: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::GridFormat(format!("{name} `{s}` is not an integer")))
        };
        let float = |s: &str, name: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::GridFormat(format!("{name} `{s}` is not a number")))
        };
        let width = int(fields[0], "width")?;
        let height = int(fields[1], "height")?;
        let cell_size = float(fields[2], "cell_size")?;
        let origin = Vector2::new(float(fields[3], "origin_x")?, float(fields[4], "origin_y")?);

        let rows: Vec<&str> = lines.map(str::trim).collect();
        if rows.len() != height {
            return Err(Error::GridFormat(format!(
                "expected {height} rows, got {}",
                rows.len()
            )));
        }
        let mut cells = vec![false; width * height];
        for (line_no, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::GridFormat(format!(
                    "row {} has {} cells, expected {width}",
                    line_no + 1,
                    row.chars().count()
                )));
            }
            let j = height - 1 - line_no;
            for (i, ch) in row.chars().enumerate() {
                cells[j * width + i] = match ch {
                    '0' => false,
                    '1' => true,
                    other => {
                        return Err(Error::GridFormat(format!(
                            "row {} has invalid cell `{other}`",
                            line_no + 1
                        )))
                    }
                };
            }
        }
        Self::new(origin, cell_size, width, height, cells)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{} {} {} {} {}\n",
            self.width, self.height, self.cell_size, self.origin.x, self.origin.y
        );
        for j in (0..self.height).rev() {
            for i in 0..self.width {
                out.push(if self.occupied(i, j) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }
}

/// Squared Euclidean distance transform of a 1D sampled function
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let mut started = false;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        if !started {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            k = 0;
            started = true;
            continue;
        }
        loop {
            let p = v[k];
            let s =
                ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if !started {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Squared distance, in cells, from every cell center to the nearest cell
/// where `target` is true.
fn squared_distance_to(
    width: usize,
    height: usize,
    target: impl Fn(usize, usize) -> bool,
) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; width * height];
    for j in 0..height {
        for i in 0..width {
            if target(i, j) {
                grid[j * width + i] = 0.0;
            }
        }
    }
    // columns
    let mut col = vec![0.0; height];
    let mut col_out = vec![0.0; height];
    for i in 0..width {
        for j in 0..height {
            col[j] = grid[j * width + i];
        }
        edt_1d(&col, &mut col_out);
        for j in 0..height {
            grid[j * width + i] = col_out[j];
        }
    }
    // rows
    let mut row_out = vec![0.0; width];
    for j in 0..height {
        let row = &grid[j * width..(j + 1) * width].to_vec();
        edt_1d(row, &mut row_out);
        grid[j * width..(j + 1) * width].copy_from_slice(&row_out);
    }
    grid
}

/// Signed distances sampled at cell centers; negative inside obstacles.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSdf {
    origin: Vector2<f64>,
    cell_size: f64,
    width: usize,
    height: usize,
    distances: Vec<f64>,
    /// How far outside the grid a query may fall before it is an error.
    margin: f64,
}

/// Result of an SDF query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdfSample {
    pub distance: f64,
    pub gradient: Vector2<f64>,
    /// The query point lay outside the grid and was clamped onto it.
    pub clamped: bool,
}

/// Free cells hold the distance to the nearest obstacle cell center; occupied
/// cells hold minus the distance to the nearest free cell center.
pub fn build_sdf(grid: &OccupancyGrid) -> Result<GridSdf> {
    let (w, h) = (grid.width, grid.height);
    let any_free = grid.cells.iter().any(|c| !c);
    if !any_free {
        return Err(Error::DegenerateMap);
    }
    let diagonal = grid.extent().norm();
    let to_obstacle = squared_distance_to(w, h, |i, j| grid.occupied(i, j));
    let to_free = squared_distance_to(w, h, |i, j| !grid.occupied(i, j));
    let distances = (0..w * h)
        .map(|idx| {
            if grid.cells[idx] {
                -to_free[idx].sqrt() * grid.cell_size
            } else if to_obstacle[idx].is_finite() {
                (to_obstacle[idx].sqrt() * grid.cell_size).min(diagonal)
            } else {
                diagonal
            }
        })
        .collect();
    Ok(GridSdf {
        origin: grid.origin,
        cell_size: grid.cell_size,
        width: w,
        height: h,
        distances,
        margin: 0.5,
    })
}

impl GridSdf {
    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin.max(0.0);
        self
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.distances[j * self.width + i]
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Vector2<f64> {
        self.origin
            + Vector2::new(
                (i as f64 + 0.5) * self.cell_size,
                (j as f64 + 0.5) * self.cell_size,
            )
    }

    fn out_of_grid(&self, p: &Vector2<f64>) -> f64 {
        let lo = self.origin;
        let hi = self.origin
            + Vector2::new(
                self.width as f64 * self.cell_size,
                self.height as f64 * self.cell_size,
            );
        let dx = (lo.x - p.x).max(p.x - hi.x).max(0.0);
        let dy = (lo.y - p.y).max(p.y - hi.y).max(0.0);
        dx.hypot(dy)
    }

    /// Bilinear interpolation of the cell-center values and its gradient.
    ///
    /// Points outside the grid but within the margin are clamped onto it and
    /// flagged; points further out are an error.
    pub fn query(&self, p: &Vector2<f64>) -> Result<SdfSample> {
        if !(p.x.is_finite() && p.y.is_finite()) || self.out_of_grid(p) > self.margin {
            return Err(Error::OutOfBounds { x: p.x, y: p.y });
        }
        Ok(self.query_clamped(p))
    }

    /// Like [`GridSdf::query`] but never fails; far-away points are clamped.
    pub fn query_clamped(&self, p: &Vector2<f64>) -> SdfSample {
        let clamped = self.out_of_grid(p) > 0.0;
        let (gx, ix, ax) = Self::axis(p.x, self.origin.x, self.cell_size, self.width);
        let (gy, iy, ay) = Self::axis(p.y, self.origin.y, self.cell_size, self.height);
        let i1 = (ix + 1).min(self.width - 1);
        let j1 = (iy + 1).min(self.height - 1);
        let f00 = self.value(ix, iy);
        let f10 = self.value(i1, iy);
        let f01 = self.value(ix, j1);
        let f11 = self.value(i1, j1);
        let distance = (1.0 - ax) * (1.0 - ay) * f00
            + ax * (1.0 - ay) * f10
            + (1.0 - ax) * ay * f01
            + ax * ay * f11;
        let ddx = ((1.0 - ay) * (f10 - f00) + ay * (f11 - f01)) / self.cell_size;
        let ddy = ((1.0 - ax) * (f01 - f00) + ax * (f11 - f10)) / self.cell_size;
        SdfSample {
            distance,
            gradient: Vector2::new(if gx { ddx } else { 0.0 }, if gy { ddy } else { 0.0 }),
            clamped,
        }
    }

    /// Interpolation cell along one axis: `(inside center range, lower index, fraction)`.
    fn axis(x: f64, origin: f64, cell: f64, n: usize) -> (bool, usize, f64) {
        let u = (x - origin) / cell - 0.5;
        if n == 1 {
            return (false, 0, 0.0);
        }
        let max = (n - 1) as f64;
        let inside = u > 0.0 && u < max;
        let uc = u.clamp(0.0, max);
        let i0 = (uc.floor() as usize).min(n - 2);
        // snap rounding noise so that cell centers reproduce stored values
        let mut frac = uc - i0 as f64;
        if frac < 1e-9 {
            frac = 0.0;
        } else if frac > 1.0 - 1e-9 {
            frac = 1.0;
        }
        (inside, i0, frac)
    }
}

/// Signed distance and gradient at `p`.
pub fn sdf_query(sdf: &GridSdf, p: &Vector2<f64>) -> Result<SdfSample> {
    sdf.query(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotShape {
    pub radius: f64,
}

impl RobotShape {
    pub fn new(radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::Parameter(format!(
                "radius must be positive, got {radius}"
            )));
        }
        Ok(Self { radius })
    }

    /// Surface clearance of a disc centered at `center`.
    pub fn clearance(&self, sdf: &GridSdf, center: &Vector2<f64>) -> SdfSample {
        let mut s = sdf.query_clamped(center);
        s.distance -= self.radius;
        s
    }
}

/// `ε − d` inside the safety margin, zero outside.
pub fn obstacle_hinge(d: f64, eps: f64) -> f64 {
    if d <= eps {
        eps - d
    } else {
        0.0
    }
}

/// Unary obstacle factor on one support state.
#[derive(Debug, Clone)]
pub struct ObstacleFactor {
    keys: [VarKey; 1],
    sdf: Arc<GridSdf>,
    shape: RobotShape,
    eps: f64,
    noise: NoiseModel,
}

impl ObstacleFactor {
    pub fn new(
        key: VarKey,
        sdf: Arc<GridSdf>,
        shape: RobotShape,
        eps: f64,
        sigma: f64,
    ) -> Result<Self> {
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::Parameter(format!(
                "safety margin must be positive, got {eps}"
            )));
        }
        Ok(Self {
            keys: [key],
            sdf,
            shape,
            eps,
            noise: NoiseModel::isotropic(1, sigma)?,
        })
    }
}

impl Factor for ObstacleFactor {
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
        let c = self.shape.clearance(&self.sdf, &states[0].position);
        let mut jac = DMatrix::zeros(1, 4);
        if c.distance < self.eps {
            jac[(0, 0)] = -c.gradient.x;
            jac[(0, 1)] = -c.gradient.y;
        }
        FactorEval {
            residual: DVector::from_element(1, obstacle_hinge(c.distance, self.eps)),
            jacobians: vec![jac],
        }
    }
}

/// One obstacle factor per support state of `traj`.
pub fn make_obstacle_factors(
    traj: &Trajectory,
    sdf: &Arc<GridSdf>,
    shape: RobotShape,
    eps: f64,
    sigma: f64,
) -> Result<Vec<Box<dyn Factor>>> {
    (0..traj.len())
        .map(|k| {
            ObstacleFactor::new(traj.key(k), Arc::clone(sdf), shape, eps, sigma)
                .map(|f| Box::new(f) as Box<dyn Factor>)
        })
        .collect()
}
