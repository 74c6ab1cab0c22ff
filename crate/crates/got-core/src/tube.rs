//! Rasterized epsilon-tubes around an embedded metric graph.
//!
//! The tube is the set of points within `epsilon` of the union of edge
//! polylines. It is discretized on a uniform grid of spacing `h`; a cell
//! belongs to the mask when its center lies inside the tube. Transport
//! costs between points are squared lengths of shortest 8-neighbor
//! (26-neighbor in 3D) paths through the mask, with Euclidean step weights
//! `h` and `sqrt(2) h` (and `sqrt(3) h`). A second weighting sums squared
//! per-step increments instead, matching the stencil
//! `[[2,1,2],[1,0,1],[2,1,2]] * h^2`; it is kept for trajectory rendering.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{dist3, norm, sub, MetricGraph, Point3};

/// Which step weights a grid shortest path uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridWeight {
    /// Euclidean step lengths; path cost approximates curve length.
    Length,
    /// Squared per-step increments (h^2 times the squared-displacement
    /// stencil). Path cost approximates length only up to scaling but
    /// reproduces the pixel-graph construction exactly.
    SquaredStep,
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: Point3,
    b: Point3,
}

fn point_segment_distance(p: Point3, s: &Segment) -> f64 {
    let d = sub(s.b, s.a);
    let len2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    if len2 == 0.0 {
        return dist3(p, s.a);
    }
    let r = sub(p, s.a);
    let t = ((r[0] * d[0] + r[1] * d[1] + r[2] * d[2]) / len2).clamp(0.0, 1.0);
    let q = [s.a[0] + t * d[0], s.a[1] + t * d[1], s.a[2] + t * d[2]];
    dist3(p, q)
}

/// A rasterized tube. Cells are indexed x-fastest: `i + nx*(j + ny*k)`.
#[derive(Debug, Clone)]
pub struct TubeGrid {
    dim: usize,
    origin: Point3,
    h: f64,
    shape: [usize; 3],
    epsilon: f64,
    mask: Vec<bool>,
    segments: Vec<Segment>,
    /// Neighbor steps: (flat index offset, per-axis delta, Euclidean length,
    /// squared increment), both in grid units times `h`.
    steps: Vec<(i64, [i64; 3], f64, f64)>,
}

/// Distances (and predecessor cells) from a source set, over mask cells.
#[derive(Debug, Clone)]
pub struct DistField {
    pub dist: Vec<f64>,
    pub pred: Vec<u32>,
}

pub const NO_PRED: u32 = u32::MAX;

/// Build the tube mask for `epsilon` at grid spacing `h`. Requires
/// `h <= epsilon / 2` and a mask that comes out connected; both failures are
/// resolution errors.
pub fn rasterize(g: &MetricGraph, epsilon: f64, h: f64) -> Result<TubeGrid> {
    if !(epsilon > 0.0) {
        return Err(Error::Domain(format!("epsilon must be positive, got {}", epsilon)));
    }
    if !(h > 0.0) {
        return Err(Error::Domain(format!("grid spacing must be positive, got {}", h)));
    }
    if h > epsilon / 2.0 + 1e-15 {
        return Err(Error::Resolution(format!(
            "grid spacing {} exceeds epsilon/2 = {}",
            h,
            epsilon / 2.0
        )));
    }
    let dim = g
        .embed_dim()
        .ok_or_else(|| Error::Domain("tube rasterization requires an embedded graph".into()))?;
    let mut segments = Vec::new();
    for (ei, e) in g.edges().iter().enumerate() {
        let poly = e
            .embed
            .as_ref()
            .ok_or_else(|| Error::Domain(format!("edge {} has no embedding", ei)))?;
        for w in poly.windows(2) {
            segments.push(Segment { a: w[0], b: w[1] });
        }
    }
    if segments.is_empty() {
        return Err(Error::Domain("graph has no embedded edges".into()));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for s in &segments {
        for p in [s.a, s.b] {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
    }
    let pad = epsilon + 2.0 * h;
    let mut origin = [0.0; 3];
    let mut shape = [1usize; 3];
    for a in 0..dim {
        origin[a] = lo[a] - pad;
        shape[a] = (((hi[a] + pad) - origin[a]) / h).ceil() as usize + 1;
    }
    for a in dim..3 {
        origin[a] = 0.0;
        shape[a] = 1;
    }
    let n = shape[0] * shape[1] * shape[2];
    if n > 50_000_000 {
        return Err(Error::Resolution(format!(
            "grid of {} cells is too large; raise h or shrink the network",
            n
        )));
    }
    let mut grid = TubeGrid {
        dim,
        origin,
        h,
        shape,
        epsilon,
        mask: vec![false; n],
        segments,
        steps: Vec::new(),
    };
    grid.steps = grid.make_steps();
    let segs = grid.segments.clone();
    let (nx, ny) = (shape[0], shape[1]);
    let mask: Vec<bool> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let k = idx / (nx * ny);
            let j = (idx / nx) % ny;
            let i = idx % nx;
            let c = [
                origin[0] + (i as f64 + 0.5) * h,
                origin[1] + (j as f64 + 0.5) * h,
                if shape[2] > 1 { origin[2] + (k as f64 + 0.5) * h } else { 0.0 },
            ];
            segs.iter().any(|s| point_segment_distance(c, s) <= epsilon)
        })
        .collect();
    grid.mask = mask;
    // Connectivity: the mask must be one component under the step stencil.
    let count = grid.mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Resolution("tube mask is empty".into()));
    }
    let start = grid.mask.iter().position(|&m| m).unwrap();
    let mut seen = vec![false; n];
    let mut reached = 1usize;
    seen[start] = true;
    let mut stack = vec![start];
    while let Some(c) = stack.pop() {
        for nb in grid.neighbors(c) {
            let (nc, _, _) = nb;
            if grid.mask[nc] && !seen[nc] {
                seen[nc] = true;
                reached += 1;
                stack.push(nc);
            }
        }
    }
    if reached != count {
        return Err(Error::Resolution(format!(
            "tube mask splits into disconnected parts ({} of {} cells reachable); refine h",
            reached, count
        )));
    }
    Ok(grid)
}

impl TubeGrid {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn origin(&self) -> Point3 {
        self.origin
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn cell_count(&self) -> usize {
        self.mask.len()
    }

    fn make_steps(&self) -> Vec<(i64, [i64; 3], f64, f64)> {
        let mut steps = Vec::new();
        let zrange: &[i64] = if self.dim == 3 { &[-1, 0, 1] } else { &[0] };
        let (nx, ny) = (self.shape[0] as i64, self.shape[1] as i64);
        for &dz in zrange {
            for dy in [-1i64, 0, 1] {
                for dx in [-1i64, 0, 1] {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let sq = (dx * dx + dy * dy + dz * dz) as f64;
                    steps.push((
                        dx + nx * (dy + ny * dz),
                        [dx, dy, dz],
                        self.h * sq.sqrt(),
                        self.h * self.h * sq,
                    ));
                }
            }
        }
        steps
    }

    fn coords(&self, idx: usize) -> [usize; 3] {
        let (nx, ny) = (self.shape[0], self.shape[1]);
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Cell center in ambient coordinates.
    pub fn center(&self, idx: usize) -> Point3 {
        let c = self.coords(idx);
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = if self.shape[a] > 1 || a < self.dim {
                self.origin[a] + (c[a] as f64 + 0.5) * self.h
            } else {
                0.0
            };
        }
        p
    }

    /// Cell containing an ambient point, if inside the grid box.
    pub fn cell_of(&self, p: Point3) -> Option<usize> {
        let mut c = [0usize; 3];
        for a in 0..self.dim {
            let t = (p[a] - self.origin[a]) / self.h;
            if t < 0.0 {
                return None;
            }
            let i = t.floor() as usize;
            if i >= self.shape[a] {
                return None;
            }
            c[a] = i;
        }
        Some(c[0] + self.shape[0] * (c[1] + self.shape[1] * c[2]))
    }

    /// Whether the point's cell belongs to the mask.
    pub fn contains(&self, p: Point3) -> bool {
        self.cell_of(p).map(|c| self.mask[c]).unwrap_or(false)
    }

    fn neighbors(&self, idx: usize) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        let c = self.coords(idx);
        self.steps.iter().filter_map(move |&(off, d, len, sq)| {
            let ni = c[0] as i64 + d[0];
            let nj = c[1] as i64 + d[1];
            let nk = c[2] as i64 + d[2];
            if ni < 0
                || nj < 0
                || nk < 0
                || ni >= self.shape[0] as i64
                || nj >= self.shape[1] as i64
                || nk >= self.shape[2] as i64
            {
                None
            } else {
                Some(((idx as i64 + off) as usize, len, sq))
            }
        })
    }

    /// Dijkstra over mask cells from one source cell. Ties resolve by cell
    /// index (heap key), and predecessors only change on strict
    /// improvement, so results are deterministic.
    pub fn dijkstra(&self, source: usize, weight: GridWeight) -> DistField {
        let mut dist = vec![f64::INFINITY; self.mask.len()];
        let mut pred = vec![NO_PRED; self.mask.len()];
        if !self.mask[source] {
            return DistField { dist, pred };
        }
        let mut heap: BinaryHeap<Reverse<(crate::graph::HeapF64, usize)>> = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(Reverse((crate::graph::HeapF64(0.0), source)));
        while let Some(Reverse((crate::graph::HeapF64(d), c))) = heap.pop() {
            if d > dist[c] {
                continue;
            }
            for (nc, len, sq) in self.neighbors(c) {
                if !self.mask[nc] {
                    continue;
                }
                let w = match weight {
                    GridWeight::Length => len,
                    GridWeight::SquaredStep => sq,
                };
                let nd = d + w;
                if nd < dist[nc] {
                    dist[nc] = nd;
                    pred[nc] = c as u32;
                    heap.push(Reverse((crate::graph::HeapF64(nd), nc)));
                }
            }
        }
        DistField { dist, pred }
    }

    /// Squared shortest-path length between two ambient points through the
    /// mask; infinite when either point misses the mask or no path exists.
    /// The sweep always starts from the lower cell index, so swapping the
    /// arguments returns the bit-identical value.
    pub fn tube_cost(&self, x: Point3, y: Point3) -> f64 {
        let (Some(cx), Some(cy)) = (self.cell_of(x), self.cell_of(y)) else {
            return f64::INFINITY;
        };
        if !self.mask[cx] || !self.mask[cy] {
            return f64::INFINITY;
        }
        if cx == cy {
            return 0.0;
        }
        let (from, to) = if cx <= cy { (cx, cy) } else { (cy, cx) };
        let field = self.dijkstra(from, GridWeight::Length);
        let l = field.dist[to];
        l * l
    }

    /// Shortest-path cost under the squared-increment stencil; the
    /// pixel-graph analogue of [`TubeGrid::tube_cost`].
    pub fn pixel_cost(&self, x: Point3, y: Point3) -> f64 {
        let (Some(cx), Some(cy)) = (self.cell_of(x), self.cell_of(y)) else {
            return f64::INFINITY;
        };
        if !self.mask[cx] || !self.mask[cy] {
            return f64::INFINITY;
        }
        if cx == cy {
            return 0.0;
        }
        let (from, to) = if cx <= cy { (cx, cy) } else { (cy, cx) };
        let field = self.dijkstra(from, GridWeight::SquaredStep);
        field.dist[to]
    }

    /// Pairwise costs from `xs` to `ys`: squared lengths for
    /// [`GridWeight::Length`], summed squared steps for
    /// [`GridWeight::SquaredStep`]. One sweep per source, rows in parallel.
    pub fn cost_matrix(
        &self,
        xs: &[Point3],
        ys: &[Point3],
        weight: GridWeight,
    ) -> Result<ndarray::Array2<f64>> {
        let targets: Vec<Option<usize>> = ys
            .iter()
            .map(|&y| self.cell_of(y).filter(|&c| self.mask[c]))
            .collect();
        let rows: Vec<Vec<f64>> = xs
            .par_iter()
            .map(|&x| {
                let Some(cx) = self.cell_of(x).filter(|&c| self.mask[c]) else {
                    return vec![f64::INFINITY; ys.len()];
                };
                let field = self.dijkstra(cx, weight);
                targets
                    .iter()
                    .map(|t| match t {
                        None => f64::INFINITY,
                        Some(cy) => match weight {
                            GridWeight::Length => {
                                let l = field.dist[*cy];
                                l * l
                            }
                            GridWeight::SquaredStep => field.dist[*cy],
                        },
                    })
                    .collect()
            })
            .collect();
        let mut out = ndarray::Array2::zeros((xs.len(), ys.len()));
        for (i, row) in rows.into_iter().enumerate() {
            for (j, v) in row.into_iter().enumerate() {
                out[[i, j]] = v;
            }
        }
        Ok(out)
    }

    /// Export the 2D mask as a binary PGM (P5), one byte per cell, row 0 at
    /// the top.
    pub fn mask_pgm(&self) -> Result<Vec<u8>> {
        if self.dim != 2 {
            return Err(Error::Domain("PGM export is 2D only".into()));
        }
        let (nx, ny) = (self.shape[0], self.shape[1]);
        let mut out = format!("P5\n{} {}\n255\n", nx, ny).into_bytes();
        for j in (0..ny).rev() {
            for i in 0..nx {
                out.push(if self.mask[i + nx * j] { 255 } else { 0 });
            }
        }
        Ok(out)
    }
}

/// One transported trajectory: the grid geodesic carrying `mass` from
/// source atom `source` to target atom `target`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub source: usize,
    pub target: usize,
    pub mass: f64,
    pub cells: Vec<usize>,
    pub points: Vec<Point3>,
}

/// Geodesic polylines for every positive-mass coupling entry. One Dijkstra
/// sweep per distinct source; predecessor chains give the cell paths.
pub fn extract_trajectories(
    tube: &TubeGrid,
    xs: &[Point3],
    ys: &[Point3],
    entries: &[(usize, usize, f64)],
    weight: GridWeight,
) -> Result<Vec<Trajectory>> {
    let mut by_source: Vec<Vec<(usize, f64)>> = vec![Vec::new(); xs.len()];
    for &(i, j, m) in entries {
        if i >= xs.len() || j >= ys.len() {
            return Err(Error::Domain(format!(
                "coupling entry ({}, {}) outside measure supports",
                i, j
            )));
        }
        if m > 0.0 {
            by_source[i].push((j, m));
        }
    }
    let sources_used: Vec<usize> = (0..xs.len()).filter(|&i| !by_source[i].is_empty()).collect();
    let fields: Vec<(usize, DistField)> = sources_used
        .par_iter()
        .map(|&i| {
            let c = tube
                .cell_of(xs[i])
                .filter(|&c| tube.mask()[c])
                .ok_or_else(|| Error::Domain(format!("source atom {} is outside the mask", i)))?;
            Ok((i, tube.dijkstra(c, weight)))
        })
        .collect::<Result<_>>()?;
    let mut trajectories = Vec::new();
    for (i, field) in fields {
        for &(j, m) in &by_source[i] {
            let cy = tube
                .cell_of(ys[j])
                .filter(|&c| tube.mask()[c])
                .ok_or_else(|| Error::Domain(format!("target atom {} is outside the mask", j)))?;
            if field.dist[cy].is_infinite() {
                return Err(Error::Domain(format!(
                    "no path between atoms {} and {}",
                    i, j
                )));
            }
            let mut cells = vec![cy];
            let mut c = cy;
            while field.pred[c] != NO_PRED {
                c = field.pred[c] as usize;
                cells.push(c);
            }
            cells.reverse();
            let points = cells.iter().map(|&c| tube.center(c)).collect();
            trajectories.push(Trajectory {
                source: i,
                target: j,
                mass: m,
                cells,
                points,
            });
        }
    }
    Ok(trajectories)
}

/// Outcome of the cost-gradient check at a point pair.
#[derive(Debug, Clone)]
pub enum GradientCheck {
    /// Unique-direction geodesic: both gradients and their gap.
    Ok {
        numeric: Point3,
        analytic: Point3,
        discrepancy: f64,
    },
    /// Multiple near-optimal initial directions: the cost is not reliably
    /// differentiable here, so no gradient is reported.
    Inconclusive { reason: String },
}

/// Compare the finite-difference gradient of `x -> tube_cost(x, y)` with
/// `-2 L gamma'(0)` read off the discrete geodesic. `fd_step` is the
/// half-width of the central difference.
pub fn cost_gradient_check(
    tube: &TubeGrid,
    x: Point3,
    y: Point3,
    fd_step: f64,
) -> Result<GradientCheck> {
    if fd_step < tube.h() {
        return Err(Error::Domain(format!(
            "fd_step {} below grid spacing {}",
            fd_step,
            tube.h()
        )));
    }
    let cx = tube
        .cell_of(x)
        .filter(|&c| tube.mask()[c])
        .ok_or_else(|| Error::Domain("x is outside the tube mask".into()))?;
    let cy = tube
        .cell_of(y)
        .filter(|&c| tube.mask()[c])
        .ok_or_else(|| Error::Domain("y is outside the tube mask".into()))?;
    if cx == cy {
        return Err(Error::Domain("x and y share a cell".into()));
    }
    // Anchor the stencil at the cell center so every sample lands mid-cell;
    // anchoring at x itself can straddle cell boundaries and skew the ±
    // offsets by a whole row.
    let anchor = tube.center(cx);
    // All FD sample points must stay inside the mask.
    let mut fd_cells = Vec::new();
    for a in 0..tube.dim() {
        for s in [-1.0, 1.0] {
            let mut p = anchor;
            p[a] += s * fd_step;
            let c = tube
                .cell_of(p)
                .filter(|&c| tube.mask()[c])
                .ok_or_else(|| {
                    Error::Domain("finite-difference stencil leaves the tube mask".into())
                })?;
            fd_cells.push(c);
        }
    }
    // One sweep from y serves the cost evaluations at x and all FD points.
    let field = tube.dijkstra(cy, GridWeight::Length);
    let l = field.dist[cx];
    if l.is_infinite() {
        return Err(Error::Domain("x and y are not connected in the mask".into()));
    }

    // Greedy descent toward y along the distance field = the geodesic from
    // x. Deterministic: first strict improvement in stencil order.
    let path_from = |start: usize| -> Vec<usize> {
        let mut cells = vec![start];
        let mut c = start;
        let mut guard = 0;
        while c != cy && guard < tube.cell_count() {
            guard += 1;
            let mut best: Option<(f64, usize)> = None;
            for (nc, len, _) in tube.neighbors(c) {
                if !tube.mask()[nc] {
                    continue;
                }
                let through = field.dist[nc] + len;
                if best.map(|(b, _)| through < b - 1e-15).unwrap_or(true) {
                    best = Some((through, nc));
                }
            }
            match best {
                Some((_, nc)) => {
                    cells.push(nc);
                    c = nc;
                }
                None => break,
            }
        }
        cells
    };
    // Direction after arclength `probe_len`, smoothing out staircase noise.
    let probe_len = (2.0 * tube.epsilon()).min(l / 3.0).max(2.0 * tube.h());
    let direction_of = |cells: &[usize]| -> Point3 {
        let start = tube.center(cells[0]);
        let mut acc = 0.0;
        let mut endpoint = tube.center(*cells.last().unwrap());
        for w in cells.windows(2) {
            acc += dist3(tube.center(w[0]), tube.center(w[1]));
            if acc >= probe_len {
                endpoint = tube.center(w[1]);
                break;
            }
        }
        let d = sub(endpoint, start);
        let n = norm(d);
        if n == 0.0 {
            [0.0; 3]
        } else {
            [d[0] / n, d[1] / n, d[2] / n]
        }
    };
    let main_path = path_from(cx);
    let main_dir = direction_of(&main_path);

    // Branching probe: any near-optimal first step whose onward geodesic
    // heads in a materially different direction means several geodesics tie
    // and the gradient formula loses its hypothesis.
    let tol_branch = 4.0 * tube.h() * (1.0 + l);
    for (nc, len, _) in tube.neighbors(cx) {
        if !tube.mask()[nc] || field.dist[nc].is_infinite() {
            continue;
        }
        let through = len + field.dist[nc];
        if through > l + tol_branch {
            continue;
        }
        let mut cells = vec![cx];
        cells.extend(path_from(nc));
        let dir = direction_of(&cells);
        let cosang = dir[0] * main_dir[0] + dir[1] * main_dir[1] + dir[2] * main_dir[2];
        if cosang < 0.5 {
            return Ok(GradientCheck::Inconclusive {
                reason: format!(
                    "second near-optimal initial direction found (cos angle {:.3})",
                    cosang
                ),
            });
        }
    }

    let mut numeric = [0.0; 3];
    for a in 0..tube.dim() {
        let lp = field.dist[fd_cells[2 * a + 1]];
        let lm = field.dist[fd_cells[2 * a]];
        // Denominator from realized centers, which absorbs snapping.
        let den = tube.center(fd_cells[2 * a + 1])[a] - tube.center(fd_cells[2 * a])[a];
        numeric[a] = (lp * lp - lm * lm) / den;
    }
    // Constant-speed parametrization on [0,1] has speed L, so the initial
    // velocity is L times the unit direction.
    let analytic = [
        -2.0 * l * main_dir[0],
        -2.0 * l * main_dir[1],
        -2.0 * l * main_dir[2],
    ];
    let discrepancy = (0..3)
        .map(|a| (numeric[a] - analytic[a]).abs())
        .fold(0.0f64, f64::max);
    Ok(GradientCheck::Ok {
        numeric,
        analytic,
        discrepancy,
    })
}

/// Uniform sample in the grid bounding box (used by rejection sampling).
impl TubeGrid {
    pub(crate) fn sample_bbox(&self, rng: &mut impl Rng) -> Point3 {
        let mut p = [0.0; 3];
        for a in 0..self.dim {
            let span = self.shape[a] as f64 * self.h;
            p[a] = self.origin[a] + rng.gen_range(0.0..span);
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Edge;

    fn segment_graph() -> MetricGraph {
        MetricGraph::new(
            vec!["a".into(), "b".into()],
            vec![Edge {
                id: "ab".into(),
                tail: 0,
                head: 1,
                length: 1.0,
                embed: Some(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]),
            }],
        )
        .unwrap()
    }

    fn l_bend_graph() -> MetricGraph {
        // Unit horizontal then unit vertical segment.
        MetricGraph::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![
                Edge {
                    id: "ab".into(),
                    tail: 0,
                    head: 1,
                    length: 1.0,
                    embed: Some(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]),
                },
                Edge {
                    id: "bc".into(),
                    tail: 1,
                    head: 2,
                    length: 1.0,
                    embed: Some(vec![[1.0, 0.0, 0.0], [1.0, 1.0, 0.0]]),
                },
            ],
        )
        .unwrap()
    }

    fn ring_graph() -> MetricGraph {
        // A square ring of side 1 centered at the origin.
        let corners = [
            [-0.5, -0.5, 0.0],
            [0.5, -0.5, 0.0],
            [0.5, 0.5, 0.0],
            [-0.5, 0.5, 0.0],
        ];
        let nodes = (0..4).map(|i| format!("n{}", i)).collect();
        let edges = (0..4)
            .map(|i| Edge {
                id: format!("e{}", i),
                tail: i,
                head: (i + 1) % 4,
                length: 1.0,
                embed: Some(vec![corners[i], corners[(i + 1) % 4]]),
            })
            .collect();
        MetricGraph::new(nodes, edges).unwrap()
    }

    #[test]
    fn mask_count_matches_area_oracle_for_unit_segment() {
        let (eps, h) = (0.1, 0.025);
        let g = segment_graph();
        let tube = rasterize(&g, eps, h).unwrap();
        // Oracle: count lattice centers inside the stadium shape by its
        // closed form (rectangle plus two half-disks), independent of the
        // rasterizer's point-to-segment routine.
        let mut oracle = 0usize;
        let o = tube.origin();
        let s = tube.shape();
        for j in 0..s[1] {
            for i in 0..s[0] {
                let x = o[0] + (i as f64 + 0.5) * h;
                let y = o[1] + (j as f64 + 0.5) * h;
                let inside = (0.0..=1.0).contains(&x) && y.abs() <= eps
                    || (x * x + y * y).sqrt() <= eps
                    || ((x - 1.0) * (x - 1.0) + y * y).sqrt() <= eps;
                if inside {
                    oracle += 1;
                }
            }
        }
        let got = tube.mask_count();
        let rel = (got as f64 - oracle as f64).abs() / oracle as f64;
        assert!(
            rel <= 0.05,
            "mask count {} vs oracle {} differs by {:.1}%",
            got,
            oracle,
            100.0 * rel
        );
        // The rectangle body alone contributes about (1/h) * (2 eps / h)
        // cells.
        assert!(got >= 320, "expected at least the 320 interior cells, got {}", got);
    }

    #[test]
    fn rasterize_rejects_coarse_grids() {
        let g = segment_graph();
        assert!(matches!(
            rasterize(&g, 0.1, 0.06),
            Err(Error::Resolution(_))
        ));
    }

    #[test]
    fn straight_pipe_cost_matches_squared_distance() {
        let g = segment_graph();
        for h in [0.0125, 0.025] {
            let tube = rasterize(&g, 0.1, h).unwrap();
            let x = [0.1, 0.0, 0.0];
            let y = [0.9, 0.0, 0.0];
            let c = tube.tube_cost(x, y);
            let tol = 2.0 * h * 0.8 + h * h;
            assert!(
                (c - 0.64).abs() <= tol,
                "h={}: cost {} vs 0.64 (tol {})",
                h,
                c,
                tol
            );
        }
    }

    #[test]
    fn tube_cost_is_exactly_symmetric_and_zero_on_diagonal() {
        let g = l_bend_graph();
        let tube = rasterize(&g, 0.1, 0.025).unwrap();
        let pts = [
            [0.2, 0.0, 0.0],
            [0.9, 0.05, 0.0],
            [1.0, 0.8, 0.0],
            [0.55, -0.03, 0.0],
        ];
        for &x in &pts {
            assert_eq!(tube.tube_cost(x, x), 0.0);
            for &y in &pts {
                let a = tube.tube_cost(x, y);
                let b = tube.tube_cost(y, x);
                assert_eq!(a, b, "symmetry must be exact");
            }
        }
    }

    #[test]
    fn points_outside_mask_cost_infinity() {
        let g = segment_graph();
        let tube = rasterize(&g, 0.1, 0.025).unwrap();
        let inside = [0.5, 0.0, 0.0];
        let outside = [0.5, 0.35, 0.0];
        assert!(tube.tube_cost(inside, outside).is_infinite());
        assert!(tube.tube_cost(outside, inside).is_infinite());
    }

    #[test]
    fn l_bend_cost_stable_under_refinement() {
        let g = l_bend_graph();
        let x = [0.2, 0.0, 0.0];
        let y = [1.0, 0.8, 0.0];
        let coarse = rasterize(&g, 0.1, 0.02).unwrap().tube_cost(x, y);
        let fine = rasterize(&g, 0.1, 0.005).unwrap().tube_cost(x, y);
        let rel = (coarse - fine).abs() / fine;
        assert!(
            rel <= 0.03,
            "coarse {} vs 4x refined {} differ by {:.2}%",
            coarse,
            fine,
            100.0 * rel
        );
    }

    #[test]
    fn diagonal_pipe_cost_matches_squared_distance() {
        // 45-degree segment: diagonal steps make the grid metric exact up
        // to endpoint snapping.
        let g = MetricGraph::new(
            vec!["a".into(), "b".into()],
            vec![Edge {
                id: "ab".into(),
                tail: 0,
                head: 1,
                length: std::f64::consts::SQRT_2,
                embed: Some(vec![[0.0, 0.0, 0.0], [1.0, 1.0, 0.0]]),
            }],
        )
        .unwrap();
        let tube = rasterize(&g, 0.1, 0.0125).unwrap();
        let x = [0.2, 0.2, 0.0];
        let y = [0.8, 0.8, 0.0];
        let c = tube.tube_cost(x, y);
        let exact = 0.72;
        let tol = 3.0 * tube.h() + tube.h() * tube.h();
        assert!((c - exact).abs() <= tol, "cost {} vs {} (tol {})", c, exact, tol);
    }

    #[test]
    fn pixel_cost_uses_squared_step_stencil() {
        let g = segment_graph();
        let tube = rasterize(&g, 0.1, 0.025).unwrap();
        let h = tube.h();
        let x = [0.5, 0.0, 0.0];
        let cx = tube.cell_of(x).unwrap();
        // A single axis step costs h^2, a diagonal step 2 h^2.
        let right = tube.center(cx + 1);
        assert!((tube.pixel_cost(x, right) - h * h).abs() < 1e-12);
        let diag = tube.center(cx + 1 + tube.shape()[0]);
        assert!((tube.pixel_cost(x, diag) - 2.0 * h * h).abs() < 1e-12);
        assert_eq!(tube.pixel_cost(x, tube.center(cx)), 0.0);
    }

    #[test]
    fn sqrt_cost_satisfies_triangle_inequality_with_grid_slack() {
        let g = l_bend_graph();
        let tube = rasterize(&g, 0.12, 0.03).unwrap();
        let pts = [
            [0.1, 0.0, 0.0],
            [0.6, 0.04, 0.0],
            [1.02, 0.5, 0.0],
            [0.98, 0.95, 0.0],
        ];
        for &x in &pts {
            for &y in &pts {
                for &z in &pts {
                    let dxy = tube.tube_cost(x, y).sqrt();
                    let dxz = tube.tube_cost(x, z).sqrt();
                    let dzy = tube.tube_cost(z, y).sqrt();
                    assert!(
                        dxy <= dxz + dzy + 2.0 * tube.h(),
                        "triangle slack violated: {} > {} + {} + 2h",
                        dxy,
                        dxz,
                        dzy
                    );
                }
            }
        }
    }

    #[test]
    fn trajectories_follow_predecessors_and_share_junction_corridor() {
        // Y-shaped network; both targets sit past the junction, so the two
        // trajectories must share stem cells.
        let g = MetricGraph::new(
            vec!["a".into(), "j".into(), "b".into(), "c".into()],
            vec![
                Edge {
                    id: "stem".into(),
                    tail: 0,
                    head: 1,
                    length: 1.0,
                    embed: Some(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]),
                },
                Edge {
                    id: "arm1".into(),
                    tail: 1,
                    head: 2,
                    length: 0.7,
                    embed: Some(vec![
                        [1.0, 0.0, 0.0],
                        [1.0 + 0.7 / std::f64::consts::SQRT_2, 0.7 / std::f64::consts::SQRT_2, 0.0],
                    ]),
                },
                Edge {
                    id: "arm2".into(),
                    tail: 1,
                    head: 3,
                    length: 0.7,
                    embed: Some(vec![
                        [1.0, 0.0, 0.0],
                        [1.0 + 0.7 / std::f64::consts::SQRT_2, -0.7 / std::f64::consts::SQRT_2, 0.0],
                    ]),
                },
            ],
        )
        .unwrap();
        let tube = rasterize(&g, 0.1, 0.025).unwrap();
        let xs = [[0.1, 0.0, 0.0], [0.15, 0.02, 0.0]];
        let tip1 = [1.0 + 0.6 / std::f64::consts::SQRT_2, 0.6 / std::f64::consts::SQRT_2, 0.0];
        let tip2 = [1.0 + 0.6 / std::f64::consts::SQRT_2, -0.6 / std::f64::consts::SQRT_2, 0.0];
        let ys = [tip1, tip2];
        let entries = [(0usize, 0usize, 0.5), (1usize, 1usize, 0.5)];
        let trajs = extract_trajectories(&tube, &xs, &ys, &entries, GridWeight::Length).unwrap();
        assert_eq!(trajs.len(), 2);
        for t in &trajs {
            for &c in &t.cells {
                assert!(tube.mask()[c], "trajectory leaves the mask");
            }
            // Endpoints at the atoms' cells.
            assert_eq!(t.cells[0], tube.cell_of(xs[t.source]).unwrap());
            assert_eq!(*t.cells.last().unwrap(), tube.cell_of(ys[t.target]).unwrap());
        }
        let shared: Vec<usize> = trajs[0]
            .cells
            .iter()
            .filter(|c| trajs[1].cells.contains(c))
            .copied()
            .collect();
        assert!(
            !shared.is_empty(),
            "stem-to-arm trajectories should share corridor cells"
        );
    }

    #[test]
    fn gradient_check_straight_pipe() {
        let g = segment_graph();
        let tube = rasterize(&g, 0.1, 0.0125).unwrap();
        let h = tube.h();
        let x = [0.2, 0.0, 0.0];
        let y = [0.8, 0.0, 0.0];
        match cost_gradient_check(&tube, x, y, 4.0 * h).unwrap() {
            GradientCheck::Ok {
                numeric,
                analytic,
                discrepancy,
            } => {
                assert!(
                    (analytic[0] + 1.2).abs() <= 10.0 * h,
                    "analytic {:?}",
                    analytic
                );
                assert!(
                    (numeric[0] + 1.2).abs() <= 10.0 * h,
                    "numeric {:?}",
                    numeric
                );
                assert!(discrepancy <= 10.0 * h, "discrepancy {}", discrepancy);
            }
            GradientCheck::Inconclusive { reason } => {
                panic!("straight pipe flagged as branching: {}", reason)
            }
        }
    }

    #[test]
    fn gradient_check_l_bend_within_tolerance() {
        let g = l_bend_graph();
        let tube = rasterize(&g, 0.1, 0.0125).unwrap();
        let h = tube.h();
        // Corner-cutting pair: the geodesic is the straight 45-degree
        // segment through the corner region, and a vertical pair up the
        // riser. Both have unique geodesics with on-lattice directions.
        let pairs = [
            ([0.9, 0.0, 0.0], [1.0, 0.1, 0.0]),
            ([1.0, 0.2, 0.0], [1.0, 0.8, 0.0]),
        ];
        for (x, y) in pairs {
            match cost_gradient_check(&tube, x, y, 4.0 * h).unwrap() {
                GradientCheck::Ok { discrepancy, .. } => {
                    assert!(
                        discrepancy <= 10.0 * h,
                        "pair {:?}->{:?}: discrepancy {} > 10h",
                        x,
                        y,
                        discrepancy
                    );
                }
                GradientCheck::Inconclusive { reason } => {
                    panic!("L-bend pair {:?}->{:?} flagged as branching: {}", x, y, reason)
                }
            }
        }
    }

    #[test]
    fn gradient_check_flags_ring_antipodes() {
        let g = ring_graph();
        // Wide enough that the 4h finite-difference stencil stays inside.
        let tube = rasterize(&g, 0.12, 0.02).unwrap();
        // Antipodal pair on the ring: two equal-length routes.
        let x = [0.0, -0.5, 0.0];
        let y = [0.0, 0.5, 0.0];
        match cost_gradient_check(&tube, x, y, 4.0 * tube.h()).unwrap() {
            GradientCheck::Inconclusive { .. } => {}
            GradientCheck::Ok { .. } => panic!("antipodal ring pair must be inconclusive"),
        }
    }

    #[test]
    fn mask_pgm_has_one_byte_per_cell() {
        let g = segment_graph();
        let tube = rasterize(&g, 0.1, 0.05).unwrap();
        let pgm = tube.mask_pgm().unwrap();
        let header_end = pgm
            .windows(4)
            .position(|w| w == b"255\n")
            .map(|p| p + 4)
            .unwrap();
        assert_eq!(pgm.len() - header_end, tube.cell_count());
    }
}
