//! Metric graphs: finite edge sets glued at nodes, each edge carrying an
//! interval `[0, length]` with the tail at coordinate 0 and the head at
//! `length`. Distances are path lengths through the glued structure.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

/// Ambient coordinates, padded with trailing zeros when the embedding
/// dimension is 2. Padding keeps Euclidean arithmetic dimension-agnostic.
pub type Point3 = [f64; 3];

pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn norm(a: Point3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub fn dist3(a: Point3, b: Point3) -> f64 {
    norm(sub(a, b))
}

/// One edge of a metric graph. `embed`, when present, is a polyline in
/// ambient space from the tail's position to the head's; its arclength is
/// expected to match `length` (checked by [`MetricGraph::validate`]).
#[derive(Debug, Clone)]
pub struct Edge {
    pub id: String,
    pub tail: usize,
    pub head: usize,
    pub length: f64,
    pub embed: Option<Vec<Point3>>,
}

/// Which end of an edge a node sits at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Tail,
    Head,
}

impl Side {
    /// Boundary orientation sign: outward flux at the head counts +, at the
    /// tail -.
    pub fn sign(self) -> f64 {
        match self {
            Side::Tail => -1.0,
            Side::Head => 1.0,
        }
    }
}

/// A position on a metric graph: a point at `coord` along edge `edge`.
/// Coordinates 0 and `length` denote the tail and head nodes, so points on
/// different edges can denote the same glued node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphPoint {
    pub edge: usize,
    pub coord: f64,
}

impl GraphPoint {
    pub fn new(edge: usize, coord: f64) -> Self {
        GraphPoint { edge, coord }
    }
}

/// Canonical form of a [`GraphPoint`]: either a glued node or a point
/// strictly inside one edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Site {
    Node(usize),
    Interior { edge: usize, coord: f64 },
}

/// A shortest path as an ordered list of waypoints. Consecutive waypoints
/// either share an edge or the earlier one canonicalizes to a node of the
/// later one's edge, so the length is recoverable from the waypoints alone.
#[derive(Debug, Clone)]
pub struct GraphPath {
    pub waypoints: Vec<GraphPoint>,
    pub length: f64,
}

impl GraphPath {
    /// Recompute the length from the waypoints. Used by tests to confirm the
    /// stored length is consistent.
    pub fn recompute_length(&self, g: &MetricGraph) -> Result<f64> {
        let mut total = 0.0;
        for pair in self.waypoints.windows(2) {
            total += segment_length(g, pair[0], pair[1])?;
        }
        Ok(total)
    }
}

/// Length of the single-edge segment between two adjacent waypoints.
fn segment_length(g: &MetricGraph, a: GraphPoint, b: GraphPoint) -> Result<f64> {
    if a.edge == b.edge {
        return Ok((a.coord - b.coord).abs());
    }
    // Different edges: one endpoint must be a node incident to the other's
    // edge; measure within that edge.
    let on_edge = |p: GraphPoint, e: usize| -> Option<f64> {
        match g.site(p).ok()? {
            Site::Node(v) => {
                let ed = &g.edges[e];
                if ed.tail == v {
                    Some(0.0)
                } else if ed.head == v {
                    Some(ed.length)
                } else {
                    None
                }
            }
            Site::Interior { edge, coord } if edge == e => Some(coord),
            _ => None,
        }
    };
    if let Some(ca) = on_edge(a, b.edge) {
        return Ok((ca - b.coord).abs());
    }
    if let Some(cb) = on_edge(b, a.edge) {
        return Ok((a.coord - cb).abs());
    }
    Err(Error::Domain(format!(
        "waypoints on edges {} and {} share no edge",
        a.edge, b.edge
    )))
}

/// One problem found by [`MetricGraph::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Issue {
    Disconnected { components: usize },
    NonPositiveLength { edge: usize },
    ReversedDuplicate { edge: usize, of: usize },
    EmbedLengthMismatch { edge: usize, polyline: f64, declared: f64 },
    EmbedDimMismatch { edge: usize },
    EmbedNodeMismatch { node: usize, gap: f64 },
    MissingEmbed { edge: usize },
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}

/// A finite metric graph. Node names are only labels; all APIs use indices.
#[derive(Debug, Clone)]
pub struct MetricGraph {
    nodes: Vec<String>,
    edges: Vec<Edge>,
    /// Per node: incident (edge, side) pairs. A self-loop contributes both
    /// sides.
    incidence: Vec<Vec<(usize, Side)>>,
    /// Embedding dimension (2 or 3) if any edge has a polyline.
    embed_dim: Option<usize>,
}

/// Relative tolerance for snapping edge coordinates to endpoints.
const SNAP: f64 = 1e-12;

impl MetricGraph {
    pub fn new(nodes: Vec<String>, edges: Vec<Edge>) -> Result<Self> {
        let n = nodes.len();
        let mut embed_dim = None;
        for (i, e) in edges.iter().enumerate() {
            if e.tail >= n || e.head >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge {} ({}) references node out of range",
                    i, e.id
                )));
            }
            if !e.length.is_finite() {
                return Err(Error::InvalidGraph(format!(
                    "edge {} ({}) has non-finite length",
                    i, e.id
                )));
            }
            if let Some(poly) = &e.embed {
                if poly.len() < 2 {
                    return Err(Error::InvalidGraph(format!(
                        "edge {} ({}) polyline needs at least 2 points",
                        i, e.id
                    )));
                }
                let d = if poly.iter().all(|p| p[2] == 0.0) { 2 } else { 3 };
                let d = embed_dim.get_or_insert(d);
                if *d == 2 && poly.iter().any(|p| p[2] != 0.0) {
                    *d = 3;
                }
            }
        }
        let mut incidence = vec![Vec::new(); n];
        for (i, e) in edges.iter().enumerate() {
            incidence[e.tail].push((i, Side::Tail));
            incidence[e.head].push((i, Side::Head));
        }
        Ok(MetricGraph {
            nodes,
            edges,
            incidence,
            embed_dim,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node_name(&self, v: usize) -> &str {
        &self.nodes[v]
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n == name)
    }

    pub fn edge(&self, e: usize) -> &Edge {
        &self.edges[e]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge_index(&self, id: &str) -> Option<usize> {
        self.edges.iter().position(|e| e.id == id)
    }

    pub fn incident(&self, v: usize) -> &[(usize, Side)] {
        &self.incidence[v]
    }

    pub fn embed_dim(&self) -> Option<usize> {
        self.embed_dim
    }

    pub fn endpoint(&self, e: usize, side: Side) -> usize {
        match side {
            Side::Tail => self.edges[e].tail,
            Side::Head => self.edges[e].head,
        }
    }

    /// Boundary orientation of node `v` on edge `e`: +1 at the head, -1 at
    /// the tail, 0 if not an endpoint. For a self-loop the two ends cancel,
    /// so 0 is returned; boundary terms of loops must be handled per side.
    pub fn orientation(&self, v: usize, e: usize) -> i8 {
        let ed = &self.edges[e];
        match (ed.tail == v, ed.head == v) {
            (true, true) => 0,
            (true, false) => -1,
            (false, true) => 1,
            (false, false) => 0,
        }
    }

    /// Total edge length.
    pub fn total_length(&self) -> f64 {
        self.edges.iter().map(|e| e.length).sum()
    }

    /// Canonicalize a point: endpoints collapse to their node.
    pub fn site(&self, p: GraphPoint) -> Result<Site> {
        if p.edge >= self.edges.len() {
            return Err(Error::InvalidGraph(format!(
                "graph point references edge {} of {}",
                p.edge,
                self.edges.len()
            )));
        }
        let ed = &self.edges[p.edge];
        let tol = SNAP * ed.length.max(1.0);
        if !p.coord.is_finite() || p.coord < -tol || p.coord > ed.length + tol {
            return Err(Error::InvalidPoint {
                edge: p.edge,
                coord: p.coord,
                len: ed.length,
            });
        }
        if p.coord <= tol {
            Ok(Site::Node(ed.tail))
        } else if p.coord >= ed.length - tol {
            Ok(Site::Node(ed.head))
        } else {
            Ok(Site::Interior {
                edge: p.edge,
                coord: p.coord,
            })
        }
    }

    /// A `GraphPoint` denoting node `v` (on some incident edge).
    pub fn node_point(&self, v: usize) -> Result<GraphPoint> {
        let (e, side) = *self
            .incidence
            .get(v)
            .and_then(|inc| inc.first())
            .ok_or_else(|| Error::InvalidGraph(format!("node {} has no incident edge", v)))?;
        let coord = match side {
            Side::Tail => 0.0,
            Side::Head => self.edges[e].length,
        };
        Ok(GraphPoint::new(e, coord))
    }

    /// Structural soundness report: connectivity, positive lengths, no
    /// reversed duplicate edges, embedding consistency.
    pub fn validate(&self) -> ValidationReport {
        let mut issues = Vec::new();
        for (i, e) in self.edges.iter().enumerate() {
            if e.length <= 0.0 {
                issues.push(Issue::NonPositiveLength { edge: i });
            }
            for (j, f) in self.edges.iter().enumerate().take(i) {
                if e.tail == f.head && e.head == f.tail && e.tail != e.head {
                    issues.push(Issue::ReversedDuplicate { edge: i, of: j });
                }
            }
        }
        // Connectivity over nodes touched by edges (isolated nodes also count
        // as components: they are unreachable points of the glued space).
        if !self.nodes.is_empty() {
            let mut seen = vec![false; self.nodes.len()];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(v) = stack.pop() {
                for &(e, side) in &self.incidence[v] {
                    let w = self.endpoint(
                        e,
                        match side {
                            Side::Tail => Side::Head,
                            Side::Head => Side::Tail,
                        },
                    );
                    if !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
            let components = {
                let mut c = 1;
                for v in 0..self.nodes.len() {
                    if !seen[v] {
                        c += 1;
                        // Flood from v so each component counts once.
                        let mut stack = vec![v];
                        seen[v] = true;
                        while let Some(u) = stack.pop() {
                            for &(e, side) in &self.incidence[u] {
                                let w = self.endpoint(
                                    e,
                                    match side {
                                        Side::Tail => Side::Head,
                                        Side::Head => Side::Tail,
                                    },
                                );
                                if !seen[w] {
                                    seen[w] = true;
                                    stack.push(w);
                                }
                            }
                        }
                    }
                }
                c
            };
            if components > 1 {
                issues.push(Issue::Disconnected { components });
            }
        }
        // Embedding checks.
        let any_embed = self.edges.iter().any(|e| e.embed.is_some());
        if any_embed {
            let mut node_pos: Vec<Option<Point3>> = vec![None; self.nodes.len()];
            for (i, e) in self.edges.iter().enumerate() {
                match &e.embed {
                    None => issues.push(Issue::MissingEmbed { edge: i }),
                    Some(poly) => {
                        let len: f64 = poly.windows(2).map(|w| dist3(w[0], w[1])).sum();
                        if (len - e.length).abs() > 1e-9 * e.length.max(1.0) {
                            issues.push(Issue::EmbedLengthMismatch {
                                edge: i,
                                polyline: len,
                                declared: e.length,
                            });
                        }
                        if self.embed_dim == Some(2) && poly.iter().any(|p| p[2] != 0.0) {
                            issues.push(Issue::EmbedDimMismatch { edge: i });
                        }
                        for (v, p) in [(e.tail, poly[0]), (e.head, *poly.last().unwrap())] {
                            match node_pos[v] {
                                None => node_pos[v] = Some(p),
                                Some(q) => {
                                    let gap = dist3(p, q);
                                    if gap > 1e-9 {
                                        issues.push(Issue::EmbedNodeMismatch { node: v, gap });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        ValidationReport { issues }
    }

    /// Ambient position of a graph point (requires embeddings).
    pub fn embed_point(&self, p: GraphPoint) -> Result<Point3> {
        let site = self.site(p)?;
        let (e, coord) = match site {
            Site::Interior { edge, coord } => (edge, coord),
            Site::Node(_) => (p.edge, p.coord.clamp(0.0, self.edges[p.edge].length)),
        };
        let ed = &self.edges[e];
        let poly = ed
            .embed
            .as_ref()
            .ok_or_else(|| Error::Domain(format!("edge {} has no embedding", e)))?;
        let poly_len: f64 = poly.windows(2).map(|w| dist3(w[0], w[1])).sum();
        // Map the edge coordinate to polyline arclength. The two lengths
        // agree for valid graphs; the ratio guards against drift.
        let mut target = coord * poly_len / ed.length;
        for w in poly.windows(2) {
            let seg = dist3(w[0], w[1]);
            if target <= seg || seg == 0.0 {
                let t = if seg == 0.0 { 0.0 } else { target / seg };
                return Ok([
                    w[0][0] + t * (w[1][0] - w[0][0]),
                    w[0][1] + t * (w[1][1] - w[0][1]),
                    w[0][2] + t * (w[1][2] - w[0][2]),
                ]);
            }
            target -= seg;
        }
        Ok(*poly.last().unwrap())
    }

    /// Node-to-node shortest path lengths from multiple seeded starts.
    /// `seeds` are (node, initial offset) pairs. Returns one distance per
    /// node (infinity when unreachable).
    fn dijkstra_nodes(&self, seeds: &[(usize, f64)]) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.nodes.len()];
        let mut heap: BinaryHeap<Reverse<(HeapF64, usize)>> = BinaryHeap::new();
        for &(v, d) in seeds {
            if d < dist[v] {
                dist[v] = d;
                heap.push(Reverse((HeapF64(d), v)));
            }
        }
        while let Some(Reverse((HeapF64(d), v))) = heap.pop() {
            if d > dist[v] {
                continue;
            }
            for &(e, side) in &self.incidence[v] {
                let w = self.endpoint(
                    e,
                    match side {
                        Side::Tail => Side::Head,
                        Side::Head => Side::Tail,
                    },
                );
                let nd = d + self.edges[e].length;
                if nd < dist[w] {
                    dist[w] = nd;
                    heap.push(Reverse((HeapF64(nd), w)));
                }
            }
        }
        dist
    }

    /// Seeds for a Dijkstra sweep starting from an arbitrary point: the
    /// incident node(s) with the within-edge offsets.
    fn seeds(&self, s: Site) -> Vec<(usize, f64)> {
        match s {
            Site::Node(v) => vec![(v, 0.0)],
            Site::Interior { edge, coord } => {
                let ed = &self.edges[edge];
                vec![(ed.tail, coord), (ed.head, ed.length - coord)]
            }
        }
    }

    /// Shortest path length between two points of the glued space. Returns
    /// infinity for points in different components.
    pub fn distance(&self, x: GraphPoint, y: GraphPoint) -> Result<f64> {
        let sx = self.site(x)?;
        let sy = self.site(y)?;
        if sx == sy {
            return Ok(0.0);
        }
        // Sweep from the canonically smaller site so the two argument orders
        // run the identical float computation: symmetry holds bit for bit.
        let key = |s: Site| match s {
            Site::Node(v) => (0u8, v, 0.0),
            Site::Interior { edge, coord } => (1u8, edge, coord),
        };
        let (sa, sb) = if key(sy) < key(sx) { (sy, sx) } else { (sx, sy) };
        let mut best = f64::INFINITY;
        if let (Site::Interior { edge: ex, coord: cx }, Site::Interior { edge: ey, coord: cy }) =
            (sa, sb)
        {
            if ex == ey {
                best = (cx - cy).abs();
            }
        }
        let nd = self.dijkstra_nodes(&self.seeds(sa));
        for (v, off) in self.seeds(sb) {
            best = best.min(nd[v] + off);
        }
        Ok(best)
    }

    /// Distances from each of `xs` to each of `ys` (row = source). One node
    /// sweep per source; rows are independent.
    pub fn distance_matrix(&self, xs: &[GraphPoint], ys: &[GraphPoint]) -> Result<ndarray::Array2<f64>> {
        let sy: Vec<Site> = ys.iter().map(|&y| self.site(y)).collect::<Result<_>>()?;
        let mut out = ndarray::Array2::zeros((xs.len(), ys.len()));
        for (i, &x) in xs.iter().enumerate() {
            let sx = self.site(x)?;
            let nd = self.dijkstra_nodes(&self.seeds(sx));
            for (j, &syj) in sy.iter().enumerate() {
                let mut best = f64::INFINITY;
                if sx == syj {
                    best = 0.0;
                } else {
                    if let (
                        Site::Interior { edge: ex, coord: cx },
                        Site::Interior { edge: ey, coord: cy },
                    ) = (sx, syj)
                    {
                        if ex == ey {
                            best = (cx - cy).abs();
                        }
                    }
                    for (v, off) in self.seeds(syj) {
                        best = best.min(nd[v] + off);
                    }
                }
                out[[i, j]] = best;
            }
        }
        Ok(out)
    }

    /// Shortest path with waypoints. Among equal-length paths the
    /// lexicographically smallest edge-index sequence is returned, which
    /// pins the result on symmetric graphs.
    pub fn shortest_path(&self, x: GraphPoint, y: GraphPoint) -> Result<GraphPath> {
        let sx = self.site(x)?;
        let sy = self.site(y)?;
        if sx == sy {
            return Ok(GraphPath {
                waypoints: Vec::new(),
                length: 0.0,
            });
        }
        // Dijkstra over nodes where the key is (length, edge sequence); the
        // secondary lexicographic key only breaks exact ties. Sequences stay
        // short on the graph sizes this crate targets.
        type Key = (HeapF64, Vec<usize>);
        let mut best: Vec<Option<Key>> = vec![None; self.nodes.len()];
        let mut heap: BinaryHeap<Reverse<(HeapF64, Vec<usize>, usize)>> = BinaryHeap::new();
        match sx {
            Site::Node(v) => heap.push(Reverse((HeapF64(0.0), Vec::new(), v))),
            Site::Interior { edge, coord } => {
                let ed = &self.edges[edge];
                heap.push(Reverse((HeapF64(coord), vec![edge], ed.tail)));
                heap.push(Reverse((HeapF64(ed.length - coord), vec![edge], ed.head)));
            }
        }
        while let Some(Reverse((d, seq, v))) = heap.pop() {
            if best[v].is_some() {
                continue;
            }
            best[v] = Some((d, seq.clone()));
            for &(e, side) in &self.incidence[v] {
                let w = self.endpoint(
                    e,
                    match side {
                        Side::Tail => Side::Head,
                        Side::Head => Side::Tail,
                    },
                );
                if best[w].is_none() {
                    let mut nseq = seq.clone();
                    nseq.push(e);
                    heap.push(Reverse((HeapF64(d.0 + self.edges[e].length), nseq, w)));
                }
            }
        }
        // Candidate completions: direct same-edge segment and arrivals
        // through each endpoint of y's edge.
        let mut candidates: Vec<(f64, Vec<usize>, Option<usize>)> = Vec::new();
        if let (Site::Interior { edge: ex, coord: cx }, Site::Interior { edge: ey, coord: cy }) =
            (sx, sy)
        {
            if ex == ey {
                candidates.push(((cx - cy).abs(), vec![ex], None));
            }
        }
        match sy {
            Site::Node(v) => {
                if let Some((d, seq)) = &best[v] {
                    candidates.push((d.0, seq.clone(), Some(v)));
                }
            }
            Site::Interior { edge, coord } => {
                let ed = &self.edges[edge];
                for (v, off) in [(ed.tail, coord), (ed.head, ed.length - coord)] {
                    if let Some((d, seq)) = &best[v] {
                        let mut s = seq.clone();
                        s.push(edge);
                        candidates.push((d.0 + off, s, Some(v)));
                    }
                }
            }
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        let (length, seq, via) = candidates
            .into_iter()
            .next()
            .ok_or_else(|| Error::Domain("no path: points lie in different components".into()))?;
        if !length.is_finite() {
            return Err(Error::Domain(
                "no path: points lie in different components".into(),
            ));
        }
        Ok(GraphPath {
            waypoints: self.waypoints_for(sx, sy, x, y, &seq, via, length),
            length,
        })
    }

    /// Reconstruct waypoints from an edge sequence. Node transitions appear
    /// once, expressed on the edge that reaches them.
    #[allow(clippy::too_many_arguments)]
    fn waypoints_for(
        &self,
        sx: Site,
        sy: Site,
        x: GraphPoint,
        y: GraphPoint,
        seq: &[usize],
        via: Option<usize>,
        total: f64,
    ) -> Vec<GraphPoint> {
        let mut wps = vec![x];
        let Some(via) = via else {
            // Single-edge segment.
            wps.push(y);
            return wps;
        };
        // The node chain covers `seq` minus x's leading edge (interior x)
        // and y's trailing edge (interior y).
        let lead = matches!(sx, Site::Interior { .. }) as usize;
        let trail = matches!(sy, Site::Interior { .. }) as usize;
        let mid = &seq[lead..seq.len() - trail];
        let tail_off = match sy {
            Site::Node(_) => 0.0,
            Site::Interior { edge, coord } => {
                let ed = &self.edges[edge];
                if via == ed.tail {
                    coord
                } else {
                    ed.length - coord
                }
            }
        };
        // Feasibility plus traversed length of the mid chain from a start
        // node; must land on `via`.
        let walk = |start: usize| -> Option<f64> {
            let mut v = start;
            let mut len = 0.0;
            for &e in mid {
                let ed = &self.edges[e];
                if ed.tail == v {
                    v = ed.head;
                } else if ed.head == v {
                    v = ed.tail;
                } else {
                    return None;
                }
                len += ed.length;
            }
            (v == via).then_some(len)
        };
        let mut at = match sx {
            Site::Node(v) => v,
            Site::Interior { edge, coord } => {
                // Exit side of x's edge: the one whose chain is feasible and
                // whose lengths add up to the path length. The length test
                // disambiguates self-loops, where both sides reach the same
                // node at different cost.
                let ed = &self.edges[edge];
                let sides = [
                    (ed.tail, 0.0, coord),
                    (ed.head, ed.length, ed.length - coord),
                ];
                let mut pick = None;
                for (cand, c0, seg0) in sides {
                    if let Some(mid_len) = walk(cand) {
                        if (seg0 + mid_len + tail_off - total).abs() <= 1e-9 * (1.0 + total) {
                            pick = Some((cand, c0));
                            break;
                        }
                        if pick.is_none() {
                            pick = Some((cand, c0));
                        }
                    }
                }
                let (start, c0) = pick.unwrap_or((ed.tail, 0.0));
                wps.push(GraphPoint::new(edge, c0));
                start
            }
        };
        for &e in mid {
            let ed = &self.edges[e];
            let (next, coord) = if ed.tail == at {
                (ed.head, ed.length)
            } else {
                (ed.tail, 0.0)
            };
            wps.push(GraphPoint::new(e, coord));
            at = next;
        }
        match sy {
            Site::Node(_) => {
                // The last pushed waypoint already sits at the target node if
                // the sequence was nonempty; make the endpoint explicit on
                // y's own representation.
                if wps.last() != Some(&y) {
                    wps.push(y);
                }
            }
            Site::Interior { .. } => wps.push(y),
        }
        wps
    }

    /// Number of distinct geodesics between two points: simple paths whose
    /// length is within `tol` of the minimum. Node-simple enumeration is
    /// exact here because any point revisit forces a positive-length detour.
    pub fn geodesic_multiplicity(&self, x: GraphPoint, y: GraphPoint, tol: f64) -> Result<usize> {
        let sx = self.site(x)?;
        let sy = self.site(y)?;
        if sx == sy {
            return Ok(1);
        }
        let dmin = self.distance(x, y)?;
        if !dmin.is_finite() {
            return Err(Error::Domain(
                "no path: points lie in different components".into(),
            ));
        }
        let budget = dmin + tol;
        let mut count = 0usize;

        // Interior endpoints block full traversals of their own edge (the
        // curve would pass through the endpoint itself).
        let x_int = match sx {
            Site::Interior { edge, coord } => Some((edge, coord)),
            Site::Node(_) => None,
        };
        let y_int = match sy {
            Site::Interior { edge, coord } => Some((edge, coord)),
            Site::Node(_) => None,
        };

        // Direct same-edge segment.
        if let (Some((ex, cx)), Some((ey, cy))) = (x_int, y_int) {
            if ex == ey && (cx - cy).abs() <= budget {
                count += 1;
            }
        }

        // DFS over node-simple walks. `x_exit` is the side x left through
        // when x is interior (used to rule out overlapping same-edge
        // arrivals).
        struct Dfs<'a> {
            g: &'a MetricGraph,
            budget: f64,
            x_int: Option<(usize, f64)>,
            y_int: Option<(usize, f64)>,
            y_node: Option<usize>,
            count: usize,
        }
        impl Dfs<'_> {
            fn visit(&mut self, v: usize, len: f64, visited: &mut Vec<bool>, x_exit: Option<Side>) {
                if len > self.budget {
                    return;
                }
                if Some(v) == self.y_node {
                    self.count += 1;
                    return; // cannot leave and return: v is now visited
                }
                if let Some((ey, cy)) = self.y_int {
                    let ed = &self.g.edges[ey];
                    for (side, off) in [(Side::Tail, cy), (Side::Head, ed.length - cy)] {
                        if self.g.endpoint(ey, side) != v {
                            continue;
                        }
                        if len + off > self.budget {
                            continue;
                        }
                        // Same-edge arrival must not overlap x's exit segment.
                        if let Some((ex, cx)) = self.x_int {
                            if ex == ey {
                                let ok = match (x_exit, side) {
                                    (Some(Side::Tail), Side::Head) => cx <= cy,
                                    (Some(Side::Head), Side::Tail) => cy <= cx,
                                    _ => false,
                                };
                                if !ok {
                                    continue;
                                }
                            }
                        }
                        self.count += 1;
                    }
                }
                visited[v] = true;
                for &(e, side) in &self.g.incidence[v] {
                    if Some(e) == self.x_int.map(|(ex, _)| ex)
                        || Some(e) == self.y_int.map(|(ey, _)| ey)
                    {
                        continue; // full traversal would pass through x or y
                    }
                    let w = self.g.endpoint(
                        e,
                        match side {
                            Side::Tail => Side::Head,
                            Side::Head => Side::Tail,
                        },
                    );
                    if visited[w] {
                        continue;
                    }
                    self.visit(w, len + self.g.edges[e].length, visited, x_exit);
                }
                visited[v] = false;
            }
        }
        let y_node = match sy {
            Site::Node(v) => Some(v),
            _ => None,
        };
        let mut dfs = Dfs {
            g: self,
            budget,
            x_int,
            y_int,
            y_node,
            count: 0,
        };
        let mut visited = vec![false; self.nodes.len()];
        match sx {
            Site::Node(v) => dfs.visit(v, 0.0, &mut visited, None),
            Site::Interior { edge, coord } => {
                let ed = &self.edges[edge];
                dfs.visit(ed.tail, coord, &mut visited, Some(Side::Tail));
                dfs.visit(ed.head, ed.length - coord, &mut visited, Some(Side::Head));
            }
        }
        count += dfs.count;
        Ok(count)
    }
}

/// f64 wrapper giving a total order for heap keys. NaN sorts last; the
/// algorithms never insert NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct HeapF64(pub f64);

impl Eq for HeapF64 {}

impl PartialOrd for HeapF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Unit-length path graph a - b - c - ... with given per-edge lengths.
    fn path_graph(lengths: &[f64]) -> MetricGraph {
        let nodes = (0..=lengths.len()).map(|i| format!("n{}", i)).collect();
        let edges = lengths
            .iter()
            .enumerate()
            .map(|(i, &l)| Edge {
                id: format!("e{}", i),
                tail: i,
                head: i + 1,
                length: l,
                embed: None,
            })
            .collect();
        MetricGraph::new(nodes, edges).unwrap()
    }

    fn triangle() -> MetricGraph {
        let nodes = vec!["a".into(), "b".into(), "c".into()];
        let edges = vec![
            Edge { id: "ab".into(), tail: 0, head: 1, length: 1.0, embed: None },
            Edge { id: "bc".into(), tail: 1, head: 2, length: 1.0, embed: None },
            Edge { id: "ca".into(), tail: 2, head: 0, length: 1.0, embed: None },
        ];
        MetricGraph::new(nodes, edges).unwrap()
    }

    #[test]
    fn same_edge_distance_is_coordinate_gap() {
        let g = path_graph(&[1.0]);
        let d = g
            .distance(GraphPoint::new(0, 0.2), GraphPoint::new(0, 0.9))
            .unwrap();
        assert!((d - 0.7).abs() < 1e-12, "got {}", d);
    }

    #[test]
    fn two_edge_distance_crosses_node() {
        let g = path_graph(&[1.0, 1.0]);
        // 0.3 from the shared node on edge 0, 0.4 from it on edge 1.
        let x = GraphPoint::new(0, 0.7);
        let y = GraphPoint::new(1, 0.4);
        let d = g.distance(x, y).unwrap();
        assert!((d - 0.7).abs() < 1e-12, "got {}", d);
        // The spec-level phrasing: distances from the node add up.
        let xb = GraphPoint::new(0, 1.0 - 0.3);
        let yb = GraphPoint::new(1, 0.4);
        assert!((g.distance(xb, yb).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn two_edge_distance_with_offsets_point_three_and_four() {
        // x sits 0.3 into edge 0 measured from the junction, y 0.4 into
        // edge 1: total 1.1 when both edges have unit length.
        let g = path_graph(&[1.0, 1.0]);
        let x = GraphPoint::new(0, 0.3);
        let y = GraphPoint::new(1, 0.4);
        let d = g.distance(x, y).unwrap();
        assert!((d - 1.1).abs() < 1e-12, "got {}", d);
    }

    #[test]
    fn triangle_node_distance() {
        let g = triangle();
        let a = g.node_point(0).unwrap();
        let b = GraphPoint::new(0, 1.0); // node b via edge ab's head
        let d = g.distance(a, b).unwrap();
        assert!((d - 1.0).abs() < 1e-12, "got {}", d);
    }

    #[test]
    fn endpoint_coordinates_compare_equal_to_nodes() {
        let g = triangle();
        // Node b reached as head of "ab" and as tail of "bc".
        let p1 = GraphPoint::new(0, 1.0);
        let p2 = GraphPoint::new(1, 0.0);
        assert_eq!(g.site(p1).unwrap(), g.site(p2).unwrap());
        assert_eq!(g.distance(p1, p2).unwrap(), 0.0);
    }

    #[test]
    fn loop_distance_takes_shorter_arc() {
        // Single self-loop of length 1 at node a.
        let g = MetricGraph::new(
            vec!["a".into()],
            vec![Edge { id: "loop".into(), tail: 0, head: 0, length: 1.0, embed: None }],
        )
        .unwrap();
        let x = GraphPoint::new(0, 0.1);
        let y = GraphPoint::new(0, 0.9);
        // Around through the node: 0.1 + 0.1 beats the direct 0.8.
        let d = g.distance(x, y).unwrap();
        assert!((d - 0.2).abs() < 1e-12, "got {}", d);
    }

    #[test]
    fn cycle_same_edge_around_route() {
        // Two nodes joined by a long edge (points live here) and a short one.
        let g = MetricGraph::new(
            vec!["a".into(), "b".into()],
            vec![
                Edge { id: "long".into(), tail: 0, head: 1, length: 1.0, embed: None },
                Edge { id: "short".into(), tail: 0, head: 1, length: 0.3, embed: None },
            ],
        )
        .unwrap();
        let x = GraphPoint::new(0, 0.2);
        let y = GraphPoint::new(0, 0.9);
        // Direct 0.7 vs around 0.2 + 0.3 + 0.1 = 0.6.
        let d = g.distance(x, y).unwrap();
        assert!((d - 0.6).abs() < 1e-12, "got {}", d);
    }

    #[test]
    fn invalid_coordinate_rejected() {
        let g = path_graph(&[1.0]);
        let err = g.distance(GraphPoint::new(0, 1.5), GraphPoint::new(0, 0.5));
        assert!(matches!(err, Err(Error::InvalidPoint { .. })));
        let err = g.distance(GraphPoint::new(0, -0.2), GraphPoint::new(0, 0.5));
        assert!(matches!(err, Err(Error::InvalidPoint { .. })));
    }

    #[test]
    fn disconnected_pair_reports_infinite_distance() {
        let g = MetricGraph::new(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            vec![
                Edge { id: "ab".into(), tail: 0, head: 1, length: 1.0, embed: None },
                Edge { id: "cd".into(), tail: 2, head: 3, length: 1.0, embed: None },
            ],
        )
        .unwrap();
        let d = g
            .distance(GraphPoint::new(0, 0.5), GraphPoint::new(1, 0.5))
            .unwrap();
        assert!(d.is_infinite());
        assert!(!g.validate().is_valid());
        assert!(g
            .validate()
            .issues
            .iter()
            .any(|i| matches!(i, Issue::Disconnected { components: 2 })));
    }

    #[test]
    fn validation_flags_reversed_duplicate_and_bad_length() {
        let g = MetricGraph::new(
            vec!["a".into(), "b".into()],
            vec![
                Edge { id: "ab".into(), tail: 0, head: 1, length: 1.0, embed: None },
                Edge { id: "ba".into(), tail: 1, head: 0, length: 2.0, embed: None },
                Edge { id: "zero".into(), tail: 0, head: 1, length: 0.0, embed: None },
            ],
        )
        .unwrap();
        let report = g.validate();
        assert!(report
            .issues
            .iter()
            .any(|i| matches!(i, Issue::ReversedDuplicate { edge: 1, of: 0 })));
        assert!(report
            .issues
            .iter()
            .any(|i| matches!(i, Issue::NonPositiveLength { edge: 2 })));
    }

    #[test]
    fn shortest_path_waypoints_and_length_roundtrip() {
        let g = path_graph(&[1.0, 1.0]);
        let x = GraphPoint::new(0, 0.3);
        let y = GraphPoint::new(1, 0.4);
        let p = g.shortest_path(x, y).unwrap();
        assert!((p.length - 1.1).abs() < 1e-12);
        assert_eq!(p.waypoints.len(), 3, "expected x, node, y: {:?}", p.waypoints);
        let re = p.recompute_length(&g).unwrap();
        assert!((re - p.length).abs() <= 1e-12);
    }

    #[test]
    fn shortest_path_of_equal_points_is_empty() {
        let g = path_graph(&[1.0]);
        let p = g
            .shortest_path(GraphPoint::new(0, 0.4), GraphPoint::new(0, 0.4))
            .unwrap();
        assert!(p.waypoints.is_empty());
        assert_eq!(p.length, 0.0);
    }

    #[test]
    fn shortest_path_tie_break_prefers_low_edge_indices() {
        // Square with two equal-length routes between opposite corners.
        let g = MetricGraph::new(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            vec![
                Edge { id: "ab".into(), tail: 0, head: 1, length: 1.0, embed: None },
                Edge { id: "bc".into(), tail: 1, head: 2, length: 1.0, embed: None },
                Edge { id: "ad".into(), tail: 0, head: 3, length: 1.0, embed: None },
                Edge { id: "dc".into(), tail: 3, head: 2, length: 1.0, embed: None },
            ],
        )
        .unwrap();
        let a = g.node_point(0).unwrap();
        let c = GraphPoint::new(1, 1.0);
        let p = g.shortest_path(a, c).unwrap();
        assert!((p.length - 2.0).abs() < 1e-12);
        // Both routes cost 2; edges [0, 1] beat [2, 3] lexicographically, so
        // the path must run through node b.
        assert!(p.waypoints.iter().any(|w| w.edge == 0));
        assert!(p.waypoints.iter().all(|w| w.edge != 2 && w.edge != 3));
    }

    #[test]
    fn multiplicity_counts_parallel_routes() {
        let g = MetricGraph::new(
            vec!["a".into(), "b".into()],
            vec![
                Edge { id: "top".into(), tail: 0, head: 1, length: 1.0, embed: None },
                Edge { id: "bottom".into(), tail: 0, head: 1, length: 1.0, embed: None },
            ],
        )
        .unwrap();
        let a = g.node_point(0).unwrap();
        let b = GraphPoint::new(0, 1.0);
        assert_eq!(g.geodesic_multiplicity(a, b, 1e-9).unwrap(), 2);
    }

    #[test]
    fn multiplicity_single_edge_interior_is_one() {
        let g = path_graph(&[1.0]);
        let m = g
            .geodesic_multiplicity(GraphPoint::new(0, 0.2), GraphPoint::new(0, 0.8), 1e-9)
            .unwrap();
        assert_eq!(m, 1);
    }

    #[test]
    fn multiplicity_y_junction_fixed_endpoint_is_one() {
        // Y graph: stem plus two arms; from a stem point to one arm tip
        // there is a single geodesic.
        let g = MetricGraph::new(
            vec!["a".into(), "j".into(), "b".into(), "c".into()],
            vec![
                Edge { id: "stem".into(), tail: 0, head: 1, length: 1.0, embed: None },
                Edge { id: "arm1".into(), tail: 1, head: 2, length: 0.7, embed: None },
                Edge { id: "arm2".into(), tail: 1, head: 3, length: 0.7, embed: None },
            ],
        )
        .unwrap();
        let x = GraphPoint::new(0, 0.5);
        let tip = GraphPoint::new(1, 0.7);
        assert_eq!(g.geodesic_multiplicity(x, tip, 1e-9).unwrap(), 1);
    }

    #[test]
    fn multiplicity_cycle_antipodal_is_two() {
        let g = triangle();
        // Midpoint of ab to node c: routes through a and through b, both 1.5.
        let x = GraphPoint::new(0, 0.5);
        let c = GraphPoint::new(1, 1.0);
        assert_eq!(g.geodesic_multiplicity(x, c, 1e-9).unwrap(), 2);
    }

    /// Independent oracle: enumerate all node-simple routes recursively over
    /// an adjacency-list representation built directly from the edge list,
    /// taking the minimum length. Usable for graphs with few edges.
    fn brute_force_distance(g: &MetricGraph, x: GraphPoint, y: GraphPoint) -> f64 {
        let sx = g.site(x).unwrap();
        let sy = g.site(y).unwrap();
        if sx == sy {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        if let (Site::Interior { edge: ex, coord: cx }, Site::Interior { edge: ey, coord: cy }) =
            (sx, sy)
        {
            if ex == ey {
                best = (cx - cy).abs();
            }
        }
        // Walks of bounded edge count; with at most 6 edges a shortest walk
        // repeats no edge more than twice, so depth 12 over-covers.
        fn explore(
            g: &MetricGraph,
            v: usize,
            len: f64,
            depth: usize,
            sy: Site,
            best: &mut f64,
        ) {
            if len >= *best {
                return;
            }
            match sy {
                Site::Node(t) if v == t => {
                    *best = len;
                    return;
                }
                Site::Interior { edge, coord } => {
                    let ed = g.edge(edge);
                    if ed.tail == v {
                        *best = best.min(len + coord);
                    }
                    if ed.head == v {
                        *best = best.min(len + ed.length - coord);
                    }
                }
                _ => {}
            }
            if depth == 0 {
                return;
            }
            for &(e, side) in g.incident(v) {
                let w = g.endpoint(
                    e,
                    match side {
                        Side::Tail => Side::Head,
                        Side::Head => Side::Tail,
                    },
                );
                explore(g, w, len + g.edge(e).length, depth - 1, sy, best);
            }
        }
        let starts: Vec<(usize, f64)> = match sx {
            Site::Node(v) => vec![(v, 0.0)],
            Site::Interior { edge, coord } => {
                let ed = g.edge(edge);
                vec![(ed.tail, coord), (ed.head, ed.length - coord)]
            }
        };
        for (v, off) in starts {
            explore(g, v, off, 12, sy, &mut best);
        }
        best
    }

    fn rng_points(g: &MetricGraph, n: usize, seed: u64) -> Vec<GraphPoint> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let e = rng.gen_range(0..g.edge_count());
                let c = rng.gen_range(0.0..=g.edge(e).length);
                GraphPoint::new(e, c)
            })
            .collect()
    }

    #[test]
    fn distance_matches_brute_force_enumeration_on_small_graphs() {
        // A 6-edge graph with a cycle and a dangling arm.
        let g = MetricGraph::new(
            vec!["a".into(), "b".into(), "c".into(), "d".into(), "e".into()],
            vec![
                Edge { id: "ab".into(), tail: 0, head: 1, length: 0.8, embed: None },
                Edge { id: "bc".into(), tail: 1, head: 2, length: 1.3, embed: None },
                Edge { id: "ca".into(), tail: 2, head: 0, length: 0.6, embed: None },
                Edge { id: "bd".into(), tail: 1, head: 3, length: 0.5, embed: None },
                Edge { id: "de".into(), tail: 3, head: 4, length: 0.9, embed: None },
                Edge { id: "ce".into(), tail: 2, head: 4, length: 0.4, embed: None },
            ],
        )
        .unwrap();
        let pts = rng_points(&g, 40, 7);
        for &x in &pts {
            for &y in &pts {
                let fast = g.distance(x, y).unwrap();
                let brute = brute_force_distance(&g, x, y);
                assert!(
                    (fast - brute).abs() <= 1e-9,
                    "distance mismatch at {:?} -> {:?}: {} vs {}",
                    x,
                    y,
                    fast,
                    brute
                );
            }
        }
    }

    #[test]
    fn metric_axioms_hold_on_random_triples() {
        let g = MetricGraph::new(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            vec![
                Edge { id: "ab".into(), tail: 0, head: 1, length: 1.0, embed: None },
                Edge { id: "bc".into(), tail: 1, head: 2, length: 0.7, embed: None },
                Edge { id: "cd".into(), tail: 2, head: 3, length: 1.2, embed: None },
                Edge { id: "db".into(), tail: 3, head: 1, length: 0.4, embed: None },
                Edge { id: "ac".into(), tail: 0, head: 2, length: 2.0, embed: None },
            ],
        )
        .unwrap();
        let pts = rng_points(&g, 3000, 11);
        for tri in pts.chunks_exact(3) {
            let (x, y, z) = (tri[0], tri[1], tri[2]);
            let dxy = g.distance(x, y).unwrap();
            let dyx = g.distance(y, x).unwrap();
            assert_eq!(dxy, dyx, "symmetry must be exact");
            let dxz = g.distance(x, z).unwrap();
            let dzy = g.distance(z, y).unwrap();
            assert!(
                dxy <= dxz + dzy + 1e-9,
                "triangle inequality violated: {} > {} + {}",
                dxy,
                dxz,
                dzy
            );
            assert!(dxy >= 0.0);
        }
    }

    #[test]
    fn path_length_recompute_matches_on_random_pairs() {
        let g = MetricGraph::new(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            vec![
                Edge { id: "ab".into(), tail: 0, head: 1, length: 1.0, embed: None },
                Edge { id: "bc".into(), tail: 1, head: 2, length: 0.7, embed: None },
                Edge { id: "cd".into(), tail: 2, head: 3, length: 1.2, embed: None },
                Edge { id: "db".into(), tail: 3, head: 1, length: 0.4, embed: None },
            ],
        )
        .unwrap();
        let pts = rng_points(&g, 60, 13);
        for &x in &pts {
            for &y in &pts {
                let p = g.shortest_path(x, y).unwrap();
                let d = g.distance(x, y).unwrap();
                assert!((p.length - d).abs() <= 1e-12, "path length vs distance");
                let re = p.recompute_length(&g).unwrap();
                assert!(
                    (re - p.length).abs() <= 1e-12,
                    "recompute {} vs stored {}",
                    re,
                    p.length
                );
            }
        }
    }

    #[test]
    fn embedding_maps_coords_to_ambient_positions() {
        let g = MetricGraph::new(
            vec!["a".into(), "b".into()],
            vec![Edge {
                id: "ab".into(),
                tail: 0,
                head: 1,
                length: 2.0,
                embed: Some(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]]),
            }],
        )
        .unwrap();
        assert!(g.validate().is_valid());
        let p = g.embed_point(GraphPoint::new(0, 1.5)).unwrap();
        assert!(dist3(p, [1.0, 0.5, 0.0]) < 1e-12);
        assert_eq!(g.embed_dim(), Some(2));
    }
}
