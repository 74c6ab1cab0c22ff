//! Exact discrete optimal transport between atomic measures.
//!
//! The solver is successive shortest paths on the bipartite transportation
//! network with Johnson potentials, so every solve returns the primal plan
//! together with dual potentials certifying optimality. Infinite costs are
//! replaced by a large sentinel inside the solver and restored afterwards;
//! a plan that needs such an arc reports infeasibility instead.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Edge, MetricGraph};
use crate::measure::DiscreteMeasure;
use crate::tube::{GridWeight, TubeGrid};

pub type CostMatrix = Array2<f64>;

/// Sparse transport plan; `value` is the total cost under the matrix it was
/// solved against.
#[derive(Debug, Clone)]
pub struct Coupling {
    pub entries: Vec<(usize, usize, f64)>,
    pub value: f64,
}

impl Coupling {
    /// Row and column sums.
    pub fn marginals(&self, n: usize, m: usize) -> (Vec<f64>, Vec<f64>) {
        let mut row = vec![0.0; n];
        let mut col = vec![0.0; m];
        for &(i, j, mass) in &self.entries {
            row[i] += mass;
            col[j] += mass;
        }
        (row, col)
    }
}

/// Dual potentials with the realized primal−dual gap.
#[derive(Debug, Clone)]
pub struct DualCertificate {
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct OtSolution {
    pub coupling: Coupling,
    pub dual: DualCertificate,
}

/// Ground cost used to assemble a matrix between two measures.
pub enum GroundCost<'a> {
    /// Graph shortest-path distance to the power p.
    GraphPow(&'a MetricGraph, f64),
    /// Euclidean distance to the power p (ambient atoms).
    EuclideanPow(f64),
    /// Squared grid-geodesic length through the tube mask.
    TubeAction(&'a TubeGrid),
    /// Squared-increment stencil through the tube mask.
    PixelAction(&'a TubeGrid),
}

pub fn build_cost_matrix(
    src: &DiscreteMeasure,
    dst: &DiscreteMeasure,
    cost: &GroundCost,
) -> Result<CostMatrix> {
    match cost {
        GroundCost::GraphPow(g, p) => {
            let xs = src.graph_points()?;
            let ys = dst.graph_points()?;
            let mut c = g.distance_matrix(&xs, &ys)?;
            c.mapv_inplace(|d| d.powf(*p));
            Ok(c)
        }
        GroundCost::EuclideanPow(p) => {
            let xs = src.ambient_points()?;
            let ys = dst.ambient_points()?;
            let mut c = Array2::zeros((xs.len(), ys.len()));
            for (i, x) in xs.iter().enumerate() {
                for (j, y) in ys.iter().enumerate() {
                    c[[i, j]] = crate::graph::dist3(*x, *y).powf(*p);
                }
            }
            Ok(c)
        }
        GroundCost::TubeAction(tube) => {
            tube.cost_matrix(&src.ambient_points()?, &dst.ambient_points()?, GridWeight::Length)
        }
        GroundCost::PixelAction(tube) => tube.cost_matrix(
            &src.ambient_points()?,
            &dst.ambient_points()?,
            GridWeight::SquaredStep,
        ),
    }
}

/// Exact transportation solve. Weights must each sum to the same total
/// (within 1e-9); costs may contain +infinity but not NaN.
pub fn solve_ot(c: &CostMatrix, src: &[f64], dst: &[f64]) -> Result<OtSolution> {
    let (n, m) = c.dim();
    if src.len() != n || dst.len() != m {
        return Err(Error::Domain(format!(
            "cost matrix {}x{} does not match {} sources / {} targets",
            n,
            m,
            src.len(),
            dst.len()
        )));
    }
    let sa: f64 = src.iter().sum();
    let sb: f64 = dst.iter().sum();
    if (sa - sb).abs() > 1e-9 * (1.0 + sa.abs()) {
        return Err(Error::Infeasible(format!(
            "source mass {} and target mass {} differ",
            sa, sb
        )));
    }
    let mut cmax: f64 = 1.0;
    for (idx, &v) in c.indexed_iter() {
        if v.is_nan() {
            return Err(Error::Domain(format!("cost at {:?} is NaN", idx)));
        }
        if v.is_finite() {
            cmax = cmax.max(v.abs());
        }
    }
    for i in 0..n {
        if src[i] > 0.0 && (0..m).all(|j| c[[i, j]].is_infinite()) {
            return Err(Error::Infeasible(format!(
                "source atom {} has no finite-cost target",
                i
            )));
        }
    }
    for j in 0..m {
        if dst[j] > 0.0 && (0..n).all(|i| c[[i, j]].is_infinite()) {
            return Err(Error::Infeasible(format!(
                "target atom {} has no finite-cost source",
                j
            )));
        }
    }
    let sentinel = 1e12 * cmax;
    let cs = c.mapv(|v| if v.is_finite() { v } else { sentinel });

    // Successive shortest paths over nodes 0..n (sources) and n..n+m
    // (sinks). Potentials keep all reduced costs nonnegative, so each
    // augmentation is a plain Dijkstra; dense selection is fine at the
    // support sizes this crate targets.
    let mut flow: Array2<f64> = Array2::zeros((n, m));
    let mut pot = vec![0.0f64; n + m];
    let mut res_a = src.to_vec();
    let mut res_b = dst.to_vec();
    let nn = n + m;
    let guard = 20 * nn * nn + 1000;
    let mut iters = 0usize;
    // Subtraction drift can strand mass far below any meaningful weight;
    // residuals under this floor count as settled.
    let eps = 1e-13 * (1.0 + sa.abs());
    while res_a.iter().any(|&r| r > eps) {
        iters += 1;
        if iters > guard {
            return Err(Error::NoConvergence(format!(
                "transport solve exceeded {} augmentations",
                guard
            )));
        }
        let mut dist = vec![f64::INFINITY; nn];
        let mut done = vec![false; nn];
        // parent = (node, target column/row info implied by side)
        let mut parent = vec![usize::MAX; nn];
        for i in 0..n {
            if res_a[i] > eps {
                dist[i] = 0.0;
            }
        }
        let mut target = None;
        loop {
            let mut u = usize::MAX;
            let mut du = f64::INFINITY;
            for v in 0..nn {
                if !done[v] && dist[v] < du {
                    du = dist[v];
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u >= n && res_b[u - n] > eps {
                target = Some(u);
                break;
            }
            if u < n {
                for j in 0..m {
                    let v = n + j;
                    if done[v] {
                        continue;
                    }
                    let rc = (cs[[u, j]] + pot[u] - pot[v]).max(0.0);
                    if du + rc < dist[v] {
                        dist[v] = du + rc;
                        parent[v] = u;
                    }
                }
            } else {
                let j = u - n;
                for i in 0..n {
                    if done[i] || flow[[i, j]] <= 0.0 {
                        continue;
                    }
                    let rc = (pot[u] - pot[i] - cs[[i, j]]).max(0.0);
                    if du + rc < dist[i] {
                        dist[i] = du + rc;
                        parent[i] = u;
                    }
                }
            }
        }
        let Some(t) = target else {
            let i = res_a.iter().position(|&r| r > eps).unwrap();
            return Err(Error::Infeasible(format!(
                "source atom {} cannot reach any remaining target",
                i
            )));
        };
        // Clamp at the target distance; nodes beyond it (including
        // unreached ones) advance by exactly dt, which keeps every residual
        // reduced cost nonnegative.
        let dt = dist[t];
        for v in 0..nn {
            pot[v] += dist[v].min(dt);
        }
        // Walk back to the path's source, collecting the bottleneck.
        let mut path = vec![t];
        let mut v = t;
        while parent[v] != usize::MAX {
            v = parent[v];
            path.push(v);
        }
        path.reverse();
        let s = path[0];
        let mut delta = res_a[s].min(res_b[t - n]);
        for w in path.windows(2) {
            if w[0] >= n {
                // Backward arc sink -> source carries existing flow.
                delta = delta.min(flow[[w[1], w[0] - n]]);
            }
        }
        for w in path.windows(2) {
            if w[0] < n {
                flow[[w[0], w[1] - n]] += delta;
            } else {
                let cell = &mut flow[[w[1], w[0] - n]];
                *cell = if *cell == delta { 0.0 } else { *cell - delta };
            }
        }
        res_a[s] = if res_a[s] == delta { 0.0 } else { res_a[s] - delta };
        let rb = &mut res_b[t - n];
        *rb = if *rb == delta { 0.0 } else { *rb - delta };
    }

    let mut entries = Vec::new();
    let mut value = 0.0;
    for i in 0..n {
        for j in 0..m {
            let f = flow[[i, j]];
            if f > 0.0 {
                if c[[i, j]].is_infinite() {
                    return Err(Error::Infeasible(format!(
                        "optimal routing forces mass through the infinite-cost pair ({}, {})",
                        i, j
                    )));
                }
                entries.push((i, j, f));
                value += f * c[[i, j]];
            }
        }
    }
    let phi: Vec<f64> = (0..n).map(|i| -pot[i]).collect();
    let psi: Vec<f64> = (0..m).map(|j| pot[n + j]).collect();
    let dual_value: f64 = src.iter().zip(&phi).map(|(a, p)| a * p).sum::<f64>()
        + dst.iter().zip(&psi).map(|(b, p)| b * p).sum::<f64>();
    let gap = value - dual_value;
    Ok(OtSolution {
        coupling: Coupling { entries, value },
        dual: DualCertificate { phi, psi, gap },
    })
}

/// p-Wasserstein distance between graph measures: (OT value)^{1/p} under
/// graph-distance^p costs.
pub fn wasserstein_p(
    g: &MetricGraph,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    p: f64,
) -> Result<f64> {
    if p < 1.0 {
        return Err(Error::Domain(format!("exponent p must be >= 1, got {}", p)));
    }
    let c = build_cost_matrix(mu, nu, &GroundCost::GraphPow(g, p))?;
    let sol = solve_ot(&c, &mu.weights(), &nu.weights())?;
    Ok(sol.coupling.value.max(0.0).powf(1.0 / p))
}

/// Reference value: exhaustive minimum over permutation matchings for
/// uniform equal-count instances. Factorial-time; intended for supports of
/// at most about eight atoms.
pub fn permutation_oracle(c: &CostMatrix) -> Result<f64> {
    let (n, m) = c.dim();
    if n != m {
        return Err(Error::Domain(format!(
            "permutation oracle needs a square matrix, got {}x{}",
            n, m
        )));
    }
    if n > 9 {
        return Err(Error::Domain(format!(
            "permutation oracle limited to 9 atoms, got {}",
            n
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    // Heap's algorithm, iterative.
    let mut stack = vec![0usize; n];
    let eval = |perm: &[usize]| -> f64 {
        perm.iter()
            .enumerate()
            .map(|(i, &j)| c[[i, j]])
            .sum::<f64>()
            / n as f64
    };
    best = best.min(eval(&perm));
    let mut i = 1;
    while i < n {
        if stack[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(stack[i], i);
            }
            best = best.min(eval(&perm));
            stack[i] += 1;
            i = 1;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    Ok(best)
}

/// Result of a cyclical-monotonicity scan over a coupling's support.
#[derive(Debug, Clone)]
pub struct MonotonicityReport {
    pub cycles_checked: usize,
    pub violations: usize,
    /// Largest (Σ c(x_i,y_i) − Σ c(x_i,y_{i+1})) / k over checked cycles;
    /// positive means a violation of that margin per pair.
    pub worst_margin: f64,
    pub exhaustive: bool,
}

/// Check c-cyclical monotonicity of a plan's support: for cycles
/// (i_1,j_1)..(i_k,j_k), Σ c(i_t,j_t) ≤ Σ c(i_t,j_{t+1}) + delta.
/// Exhaustive over all cycle lengths 2..=max_cycle when the support has at
/// most 8 entries, sampled (`trials` random cycles, seeded) otherwise.
pub fn check_cyclical_monotonicity(
    pi: &Coupling,
    c: &CostMatrix,
    max_cycle: usize,
    trials: usize,
    delta: f64,
    seed: u64,
) -> MonotonicityReport {
    let spt: Vec<(usize, usize)> = pi
        .entries
        .iter()
        .filter(|&&(_, _, mass)| mass > 1e-12)
        .map(|&(i, j, _)| (i, j))
        .collect();
    let s = spt.len();
    let mut report = MonotonicityReport {
        cycles_checked: 0,
        violations: 0,
        worst_margin: 0.0,
        exhaustive: s <= 8,
    };
    if s < 2 {
        return report;
    }
    let consider = |cycle: &[usize], report: &mut MonotonicityReport| {
        let k = cycle.len();
        let mut lhs = 0.0;
        let mut rhs = 0.0;
        for t in 0..k {
            let (i, j) = spt[cycle[t]];
            let (_, jn) = spt[cycle[(t + 1) % k]];
            lhs += c[[i, j]];
            rhs += c[[i, jn]];
        }
        let margin = (lhs - rhs) / k as f64;
        report.cycles_checked += 1;
        if margin > report.worst_margin {
            report.worst_margin = margin;
        }
        if lhs > rhs + delta {
            report.violations += 1;
        }
    };
    if report.exhaustive {
        // All cycles of length 2..=min(max_cycle, s): subsets via ordered
        // tuples with the smallest element first, which quotients out
        // rotations.
        let kmax = max_cycle.min(s);
        let mut tuple: Vec<usize> = Vec::new();
        let mut used = vec![false; s];
        fn rec(
            spt_len: usize,
            k: usize,
            tuple: &mut Vec<usize>,
            used: &mut Vec<bool>,
            consider: &mut dyn FnMut(&[usize]),
        ) {
            if tuple.len() == k {
                consider(tuple);
                return;
            }
            let first = tuple[0];
            for cand in (first + 1)..spt_len {
                if !used[cand] {
                    used[cand] = true;
                    tuple.push(cand);
                    rec(spt_len, k, tuple, used, consider);
                    tuple.pop();
                    used[cand] = false;
                }
            }
        }
        for k in 2..=kmax {
            for first in 0..s {
                tuple.clear();
                tuple.push(first);
                used.iter_mut().for_each(|u| *u = false);
                used[first] = true;
                rec(s, k, &mut tuple, &mut used, &mut |cyc| {
                    consider(cyc, &mut report)
                });
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..trials {
            let k = rng.gen_range(2..=max_cycle.min(s));
            // Sample k distinct support indices.
            let mut cycle = Vec::with_capacity(k);
            while cycle.len() < k {
                let cand = rng.gen_range(0..s);
                if !cycle.contains(&cand) {
                    cycle.push(cand);
                }
            }
            consider(&cycle, &mut report);
        }
    }
    report
}

/// Which edges to change before re-solving.
#[derive(Debug, Clone, Default)]
pub struct GraphEdit {
    pub remove: Vec<usize>,
    pub add: Vec<Edge>,
}

#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub ot_before: f64,
    pub ot_after: f64,
    /// max over the two found optimal plans of ∫ |c̃ − c| dπ; a guaranteed
    /// upper bound for |Δ OT| regardless of optimizer uniqueness.
    pub bound_pi: f64,
    /// ‖c̃ − c‖∞ over the atom-pair grid.
    pub bound_inf: f64,
}

/// Solve the same marginals under the original and edited graph costs and
/// report the stability bounds. Atoms must avoid removed edges; the edited
/// graph must stay connected wherever atoms need routes.
pub fn stability_experiment(
    g: &MetricGraph,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    edit: &GraphEdit,
    p: f64,
) -> Result<StabilityReport> {
    for r in &edit.remove {
        if *r >= g.edge_count() {
            return Err(Error::Domain(format!("removed edge {} out of range", r)));
        }
    }
    // Old edge index -> new index under the removal set.
    let mut remap = vec![usize::MAX; g.edge_count()];
    let mut kept = Vec::new();
    for e in 0..g.edge_count() {
        if !edit.remove.contains(&e) {
            remap[e] = kept.len();
            kept.push(g.edge(e).clone());
        }
    }
    for e in &edit.add {
        kept.push(e.clone());
    }
    let edited = MetricGraph::new(
        (0..g.node_count()).map(|v| g.node_name(v).to_string()).collect(),
        kept,
    )?;
    let relabel = |meas: &DiscreteMeasure, which: &str| -> Result<DiscreteMeasure> {
        let pts = meas.graph_points()?;
        let mut out = Vec::with_capacity(pts.len());
        for gp in &pts {
            if remap[gp.edge] == usize::MAX {
                return Err(Error::Domain(format!(
                    "{} atom sits on removed edge {}",
                    which, gp.edge
                )));
            }
            out.push(crate::graph::GraphPoint::new(remap[gp.edge], gp.coord));
        }
        DiscreteMeasure::new(
            out.into_iter()
                .zip(meas.weights())
                .map(|(gp, w)| crate::measure::Atom {
                    location: crate::measure::Location::Graph(gp),
                    weight: w,
                })
                .collect(),
        )
    };
    let mu2 = relabel(mu, "source")?;
    let nu2 = relabel(nu, "target")?;

    let c = build_cost_matrix(mu, nu, &GroundCost::GraphPow(g, p))?;
    let ct = build_cost_matrix(&mu2, &nu2, &GroundCost::GraphPow(&edited, p))?;
    if ct.iter().any(|v| v.is_infinite()) {
        return Err(Error::Domain(
            "edit disconnects some atom pair; stability bounds need finite costs".into(),
        ));
    }
    let before = solve_ot(&c, &mu.weights(), &nu.weights())?;
    let after = solve_ot(&ct, &mu2.weights(), &nu2.weights())?;
    let plan_bound = |plan: &Coupling| -> f64 {
        plan.entries
            .iter()
            .map(|&(i, j, mass)| mass * (ct[[i, j]] - c[[i, j]]).abs())
            .sum()
    };
    let bound_pi = plan_bound(&before.coupling).max(plan_bound(&after.coupling));
    let bound_inf = c
        .iter()
        .zip(ct.iter())
        .map(|(a, b)| (b - a).abs())
        .fold(0.0f64, f64::max);
    Ok(StabilityReport {
        ot_before: before.coupling.value,
        ot_after: after.coupling.value,
        bound_pi,
        bound_inf,
    })
}
