use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use trustfg::gp::Trajectory;
use trustfg::metrics::{polyline_section, ViolationSegment};
use trustfg::world::OccupancyGrid;

pub type BoxError = Box<dyn std::error::Error>;

pub const CSV_HEADER: [&str; 7] = ["agent_id", "step", "t", "x", "y", "vx", "vy"];

/// Scientific notation with 17 significant digits, which round-trips every f64.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn trajectories_csv(trajs: &[Trajectory]) -> Result<Vec<u8>, BoxError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for t in trajs {
        for (k, s) in t.states.iter().enumerate() {
            w.write_record([
                t.agent_id.to_string(),
                k.to_string(),
                num(k as f64 * t.dt),
                num(s.position.x),
                num(s.position.y),
                num(s.velocity.x),
                num(s.velocity.y),
            ])?;
        }
    }
    Ok(w.into_inner().map_err(|e| e.to_string())?)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#17becf", "#e377c2", "#8c564b",
];
const PX_PER_M: f64 = 100.0;

struct Frame {
    x0: f64,
    y1: f64,
}

impl Frame {
    fn point(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x0) * PX_PER_M, (self.y1 - y) * PX_PER_M)
    }

    fn polyline(&self, points: &[nalgebra::Vector2<f64>]) -> String {
        let mut s = String::new();
        for p in points {
            let (x, y) = self.point(p.x, p.y);
            let _ = write!(s, "{x:.2},{y:.2} ");
        }
        s.trim_end().to_string()
    }
}

/// Obstacles in grey, one colored path per agent, violations overdrawn in black.
pub fn plot_svg(
    grid: &OccupancyGrid,
    trajs: &[Trajectory],
    violations: &[ViolationSegment],
) -> String {
    let origin = grid.origin();
    let extent = grid.extent();
    let frame = Frame {
        x0: origin.x,
        y1: origin.y + extent.y,
    };
    let (w, h) = (extent.x * PX_PER_M, extent.y * PX_PER_M);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.2} {h:.2}">"#
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let cs = grid.cell_size();
    let cell_px = cs * PX_PER_M;
    // occupied cells merged into horizontal runs
    for j in 0..grid.height() {
        let mut i = 0;
        while i < grid.width() {
            if !grid.occupied(i, j) {
                i += 1;
                continue;
            }
            let start = i;
            while i < grid.width() && grid.occupied(i, j) {
                i += 1;
            }
            let (x, y) = frame.point(origin.x + start as f64 * cs, origin.y + (j + 1) as f64 * cs);
            let _ = writeln!(
                s,
                r##"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{cell_px:.2}" fill="#808080"/>"##,
                (i - start) as f64 * cell_px
            );
        }
    }
    for (n, t) in trajs.iter().enumerate() {
        let color = PALETTE[n % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<polyline id="agent-{}" points="{}" fill="none" stroke="{color}" stroke-width="3"/>"#,
            t.agent_id,
            frame.polyline(&t.positions())
        );
    }
    for v in violations {
        for (agent, arc) in [(v.agent_a, v.arc_a), (v.agent_b, v.arc_b)] {
            let Some(t) = trajs.iter().find(|t| t.agent_id == agent) else {
                continue;
            };
            let section = polyline_section(&t.positions(), arc[0], arc[1]);
            if section.len() < 2 {
                continue;
            }
            let _ = writeln!(
                s,
                r##"<polyline class="violation" points="{}" fill="none" stroke="#000000" stroke-width="4"/>"##,
                frame.polyline(&section)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn json_bytes<T: serde::Serialize>(value: &T) -> Result<Vec<u8>, BoxError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Stages every file next to its destination, then renames them into place,
/// so a failure before the renames leaves the directory untouched.
pub fn write_all_atomic(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<(), BoxError> {
    std::fs::create_dir_all(dir)?;
    let mut staged = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        staged.push((tmp, dir.join(name)));
    }
    for (tmp, dest) in staged {
        tmp.persist(&dest)?;
    }
    Ok(())
}
