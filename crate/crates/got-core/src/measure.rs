//! Discrete (atomic) measures on a metric graph or in ambient space, and
//! the projection/lifting maps between the two supports.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{dist3, GraphPoint, MetricGraph, Point3};
use crate::tube::TubeGrid;

/// Where an atom lives. A measure's atoms must all share one kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Location {
    Graph(GraphPoint),
    Ambient(Point3),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub location: Location,
    pub weight: f64,
}

/// A probability measure with finitely many atoms. Weights are nonnegative
/// and sum to 1 within 1e-9.
#[derive(Debug, Clone)]
pub struct DiscreteMeasure {
    atoms: Vec<Atom>,
}

impl DiscreteMeasure {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::Domain("measure needs at least one atom".into()));
        }
        let ambient = matches!(atoms[0].location, Location::Ambient(_));
        let mut total = 0.0;
        for a in &atoms {
            if matches!(a.location, Location::Ambient(_)) != ambient {
                return Err(Error::Domain(
                    "measure mixes graph and ambient atoms".into(),
                ));
            }
            if !(a.weight >= 0.0) {
                return Err(Error::Domain(format!("negative atom weight {}", a.weight)));
            }
            total += a.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!(
                "atom weights sum to {}, expected 1",
                total
            )));
        }
        Ok(DiscreteMeasure { atoms })
    }

    /// Uniform weights over the given locations.
    pub fn uniform(locations: Vec<Location>) -> Result<Self> {
        let n = locations.len();
        if n == 0 {
            return Err(Error::Domain("measure needs at least one atom".into()));
        }
        let w = 1.0 / n as f64;
        Self::new(
            locations
                .into_iter()
                .map(|location| Atom {
                    location,
                    weight: w,
                })
                .collect(),
        )
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.weight).collect()
    }

    pub fn is_ambient(&self) -> bool {
        matches!(self.atoms[0].location, Location::Ambient(_))
    }

    pub fn graph_points(&self) -> Result<Vec<GraphPoint>> {
        self.atoms
            .iter()
            .map(|a| match a.location {
                Location::Graph(p) => Ok(p),
                Location::Ambient(_) => {
                    Err(Error::Domain("expected graph atoms, found ambient".into()))
                }
            })
            .collect()
    }

    pub fn ambient_points(&self) -> Result<Vec<Point3>> {
        self.atoms
            .iter()
            .map(|a| match a.location {
                Location::Ambient(p) => Ok(p),
                Location::Graph(_) => {
                    Err(Error::Domain("expected ambient atoms, found graph".into()))
                }
            })
            .collect()
    }

    /// Apply a location map and merge atoms that land on exactly equal
    /// locations. Total mass is preserved by construction.
    pub fn pushforward(&self, f: impl Fn(&Location) -> Location) -> DiscreteMeasure {
        let mut out: Vec<Atom> = Vec::with_capacity(self.atoms.len());
        for a in &self.atoms {
            let loc = f(&a.location);
            match out.iter_mut().find(|b| b.location == loc) {
                Some(b) => b.weight += a.weight,
                None => out.push(Atom {
                    location: loc,
                    weight: a.weight,
                }),
            }
        }
        DiscreteMeasure { atoms: out }
    }
}

/// Closest graph point to an ambient position, over all embedded edge
/// polylines. Ties go to the lowest edge index, then the lowest coordinate.
pub fn project_to_graph(g: &MetricGraph, point: Point3) -> Result<GraphPoint> {
    if g.embed_dim().is_none() {
        return Err(Error::Domain(
            "projection requires an embedded graph".into(),
        ));
    }
    let mut best: Option<(f64, GraphPoint)> = None;
    for (ei, edge) in g.edges().iter().enumerate() {
        let poly = edge
            .embed
            .as_ref()
            .ok_or_else(|| Error::Domain(format!("edge {} has no embedding", ei)))?;
        let poly_len: f64 = poly.windows(2).map(|w| dist3(w[0], w[1])).sum();
        let mut arc = 0.0;
        for w in poly.windows(2) {
            let seg = dist3(w[0], w[1]);
            if seg > 0.0 {
                let d = [
                    (w[1][0] - w[0][0]) / seg,
                    (w[1][1] - w[0][1]) / seg,
                    (w[1][2] - w[0][2]) / seg,
                ];
                let rel = [
                    point[0] - w[0][0],
                    point[1] - w[0][1],
                    point[2] - w[0][2],
                ];
                let t = (rel[0] * d[0] + rel[1] * d[1] + rel[2] * d[2]).clamp(0.0, seg);
                let q = [
                    w[0][0] + t * d[0],
                    w[0][1] + t * d[1],
                    w[0][2] + t * d[2],
                ];
                let dd = dist3(point, q);
                // Convert polyline arclength to the edge coordinate scale.
                let coord =
                    ((arc + t) * edge.length / poly_len).clamp(0.0, edge.length);
                let cand = GraphPoint::new(ei, coord);
                let better = match &best {
                    None => true,
                    Some((bd, bp)) => {
                        dd < bd - 0.0
                            || (dd == *bd
                                && (ei < bp.edge || (ei == bp.edge && coord < bp.coord)))
                    }
                };
                if better {
                    best = Some((dd, cand));
                }
            }
            arc += seg;
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::Domain("graph has no positive-length embedded edge".into()))
}

/// Project every atom of an ambient measure onto the graph, merging atoms
/// that land on the same point.
pub fn project_measure(g: &MetricGraph, m: &DiscreteMeasure) -> Result<DiscreteMeasure> {
    let pts = m.ambient_points()?;
    let projected: Vec<GraphPoint> = pts
        .iter()
        .map(|&p| project_to_graph(g, p))
        .collect::<Result<_>>()?;
    let mut out: Vec<Atom> = Vec::with_capacity(m.len());
    for (a, gp) in m.atoms().iter().zip(projected) {
        let loc = Location::Graph(gp);
        match out.iter_mut().find(|b| b.location == loc) {
            Some(b) => b.weight += a.weight,
            None => out.push(Atom {
                location: loc,
                weight: a.weight,
            }),
        }
    }
    DiscreteMeasure::new(out)
}

/// Map a graph measure to ambient space through the embedding.
pub fn lift_to_ambient(g: &MetricGraph, m: &DiscreteMeasure) -> Result<DiscreteMeasure> {
    let pts = m.graph_points()?;
    let mut atoms = Vec::with_capacity(m.len());
    for (a, gp) in m.atoms().iter().zip(pts) {
        atoms.push(Atom {
            location: Location::Ambient(g.embed_point(gp)?),
            weight: a.weight,
        });
    }
    DiscreteMeasure::new(atoms)
}

/// How [`sample_tube_measure`] distributes atoms.
#[derive(Debug, Clone, Copy)]
pub enum SampleProfile {
    /// Uniform over the tube mask (rejection sampling in the bounding box).
    Uniform,
    /// Uniform along the graph, then offset perpendicular to the local edge
    /// direction by up to `offset_frac * epsilon`. Keeps atoms close to the
    /// lifted graph while staying strictly inside the tube.
    GraphBiased { offset_frac: f64 },
}

/// Draw `n` atoms of weight 1/n inside the tube mask. Deterministic per
/// seed; ChaCha keeps the stream identical across platforms.
pub fn sample_tube_measure(
    g: &MetricGraph,
    tube: &TubeGrid,
    n: usize,
    seed: u64,
    profile: SampleProfile,
) -> Result<DiscreteMeasure> {
    if n == 0 {
        return Err(Error::Domain("cannot sample 0 atoms".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::with_capacity(n);
    let max_tries = 10_000 * n.max(100);
    let mut tries = 0;
    while pts.len() < n {
        tries += 1;
        if tries > max_tries {
            return Err(Error::Domain(
                "rejection sampling failed to hit the tube mask".into(),
            ));
        }
        let candidate = match profile {
            SampleProfile::Uniform => tube.sample_bbox(&mut rng),
            SampleProfile::GraphBiased { offset_frac } => {
                let gp = sample_graph_point(g, &mut rng)?;
                let base = g.embed_point(gp)?;
                let dir = edge_direction(g, gp)?;
                let r = offset_frac * tube.epsilon() * rng.gen_range(-1.0..1.0);
                offset_perpendicular(base, dir, r, tube.dim(), &mut rng)
            }
        };
        if tube.contains(candidate) {
            pts.push(Location::Ambient(candidate));
        }
    }
    DiscreteMeasure::uniform(pts)
}

/// Uniform-by-arclength random point on the graph.
pub fn sample_graph_point(g: &MetricGraph, rng: &mut impl Rng) -> Result<GraphPoint> {
    sample_graph_point_on(g, &(0..g.edge_count()).collect::<Vec<_>>(), rng)
}

/// Uniform-by-arclength random point restricted to the given edges.
pub fn sample_graph_point_on(
    g: &MetricGraph,
    edges: &[usize],
    rng: &mut impl Rng,
) -> Result<GraphPoint> {
    let total: f64 = edges.iter().map(|&e| g.edge(e).length).sum();
    if total <= 0.0 {
        return Err(Error::Domain("edge set has zero total length".into()));
    }
    let mut t = rng.gen_range(0.0..total);
    for &e in edges {
        let l = g.edge(e).length;
        if t <= l {
            return Ok(GraphPoint::new(e, t));
        }
        t -= l;
    }
    Ok(GraphPoint::new(
        *edges.last().unwrap(),
        g.edge(*edges.last().unwrap()).length,
    ))
}

/// Unit tangent of the edge at a graph point (from its embedding).
pub fn edge_direction(g: &MetricGraph, p: GraphPoint) -> Result<Point3> {
    let ed = g.edge(p.edge);
    let poly = ed
        .embed
        .as_ref()
        .ok_or_else(|| Error::Domain(format!("edge {} has no embedding", p.edge)))?;
    let poly_len: f64 = poly.windows(2).map(|w| dist3(w[0], w[1])).sum();
    let mut target = p.coord * poly_len / ed.length;
    for w in poly.windows(2) {
        let seg = dist3(w[0], w[1]);
        if (target <= seg && seg > 0.0) || std::ptr::eq(w.as_ptr(), poly[poly.len() - 2..].as_ptr())
        {
            if seg > 0.0 {
                return Ok([
                    (w[1][0] - w[0][0]) / seg,
                    (w[1][1] - w[0][1]) / seg,
                    (w[1][2] - w[0][2]) / seg,
                ]);
            }
        }
        target -= seg;
    }
    Err(Error::Domain("degenerate polyline".into()))
}

fn offset_perpendicular(
    base: Point3,
    dir: Point3,
    r: f64,
    dim: usize,
    rng: &mut impl Rng,
) -> Point3 {
    let normal = if dim == 2 {
        [-dir[1], dir[0], 0.0]
    } else {
        // Random unit vector orthogonal to dir.
        loop {
            let v = [
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let dot = v[0] * dir[0] + v[1] * dir[1] + v[2] * dir[2];
            let w = [v[0] - dot * dir[0], v[1] - dot * dir[1], v[2] - dot * dir[2]];
            let n = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
            if n > 1e-6 {
                break [w[0] / n, w[1] / n, w[2] / n];
            }
        }
    };
    [
        base[0] + r * normal[0],
        base[1] + r * normal[1],
        base[2] + r * normal[2],
    ]
}
