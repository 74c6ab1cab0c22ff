//! Command implementations. Each module exposes `run` (pure computation,
//! returning a report the tests can assert on) and `execute` (run, stage
//! artifacts, flush, print a human summary).

pub mod converge;
pub mod dynamic;
pub mod figure1;
pub mod jko;
pub mod monotonicity;
pub mod stability;

use got_core::dynamic::{GridState, SpaceGrid};
use got_core::graph::{GraphPoint, MetricGraph, Point3};

use crate::config::{config_err, CliResult};

/// Unit vector perpendicular to `dir`: the in-plane normal for planar
/// embeddings, otherwise the axis least aligned with `dir`, orthogonalized.
pub fn perpendicular(dir: Point3, dim: usize) -> Point3 {
    if dim == 2 {
        return [-dir[1], dir[0], 0.0];
    }
    let dots = [dir[0].abs(), dir[1].abs(), dir[2].abs()];
    let axis = if dots[0] <= dots[1] && dots[0] <= dots[2] {
        [1.0, 0.0, 0.0]
    } else if dots[1] <= dots[2] {
        [0.0, 1.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let d = axis[0] * dir[0] + axis[1] * dir[1] + axis[2] * dir[2];
    let mut n = [axis[0] - d * dir[0], axis[1] - d * dir[1], axis[2] - d * dir[2]];
    let len = got_core::graph::norm(n);
    for c in n.iter_mut() {
        *c /= len;
    }
    n
}

pub fn edge_index(g: &MetricGraph, id: &str) -> CliResult<usize> {
    g.edge_index(id).ok_or_else(|| {
        let known: Vec<&str> = g.edges().iter().map(|e| e.id.as_str()).collect();
        config_err(format!("unknown edge '{}'; network has: {}", id, known.join(", ")))
    })
}

/// Unit-mass Gaussian bump on one edge, sampled at cell centers and
/// normalized so Σ ρ dx = 1.
pub fn bump_state(
    space: &SpaceGrid,
    nodes: usize,
    edge: usize,
    center: f64,
    width: f64,
) -> CliResult<GridState> {
    let mut s = GridState::zeros(space, nodes);
    let n = space.cells[edge];
    let dx = space.dx[edge];
    for k in 0..n {
        let x = (k as f64 + 0.5) * dx;
        let t = (x - center) / width;
        s.rho[edge][k] = (-0.5 * t * t).exp();
    }
    let mass: f64 = s.rho[edge].iter().sum::<f64>() * dx;
    if !(mass > 0.0) {
        return Err(config_err(format!(
            "bump at {} (width {}) vanishes on every cell of edge {}",
            center, width, edge
        )));
    }
    for v in s.rho[edge].iter_mut() {
        *v /= mass;
    }
    Ok(s)
}

/// Atomize a grid density: one atom per positive cell, at the cell center,
/// carrying mass ρ·dx. The static oracle for dynamic solves.
pub fn atomize(space: &SpaceGrid, state: &GridState) -> (Vec<GraphPoint>, Vec<f64>) {
    let mut pts = Vec::new();
    let mut w = Vec::new();
    for (e, rho) in state.rho.iter().enumerate() {
        let dx = space.dx[e];
        for (k, &r) in rho.iter().enumerate() {
            if r > 0.0 {
                pts.push(GraphPoint::new(e, (k as f64 + 0.5) * dx));
                w.push(r * dx);
            }
        }
    }
    (pts, w)
}

/// Greatest distance between nodes; the scale factor in the sandwich slack.
pub fn node_diameter(g: &MetricGraph) -> CliResult<f64> {
    let mut d = 0.0f64;
    for a in 0..g.node_count() {
        for b in (a + 1)..g.node_count() {
            let gd = g.distance(g.node_point(a)?, g.node_point(b)?)?;
            if gd.is_finite() {
                d = d.max(gd);
            }
        }
    }
    Ok(d)
}
