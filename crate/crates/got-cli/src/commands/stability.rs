//! Transport stability under edge deletions: solve the same marginals on
//! the original and edited network, and check that the change in value is
//! controlled by the witness-plan bound, which the sup-norm bound controls
//! in turn. Every solve is re-verified by the exhaustive permutation
//! oracle, so the chain of inequalities rests on certified values.

use std::path::Path;

use got_core::graph::{Edge, GraphPoint, MetricGraph};
use got_core::measure::{sample_graph_point_on, DiscreteMeasure, Location};
use got_core::statot::{
    build_cost_matrix, permutation_oracle, stability_experiment, GraphEdit, GroundCost,
};
use got_core::Error;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{config_err, CliError, CliResult, StabilityConfig};
use crate::report::{json_pretty, num, Artifacts, Csv};

#[derive(Debug, Clone, Serialize)]
pub struct StabilityRow {
    /// Removed edge ids, comma-joined.
    pub removed: String,
    pub ot_before: f64,
    pub ot_after: f64,
    pub delta: f64,
    /// ∫ |c̃ − c| dπ, maximized over the two optimal plans found.
    pub bound_pi: f64,
    /// ‖c̃ − c‖∞ over the atom-pair grid.
    pub bound_inf: f64,
    /// Brute-force values agree and delta ≤ bound_pi ≤ bound_inf.
    pub verified: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReportOut {
    pub rows: Vec<StabilityRow>,
    pub all_verified: bool,
}

/// True when every node still reaches every other after dropping `skip`.
fn connected_without(g: &MetricGraph, skip: usize) -> bool {
    let n = g.node_count();
    if n == 0 {
        return true;
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut reached = 1;
    while let Some(v) = stack.pop() {
        for &(e, _) in g.incident(v) {
            if e == skip {
                continue;
            }
            let other = if g.edge(e).tail == v { g.edge(e).head } else { g.edge(e).tail };
            if !seen[other] {
                seen[other] = true;
                reached += 1;
                stack.push(other);
            }
        }
    }
    reached == n
}

/// Rebuild the graph without the removed edges and relabel atom edge
/// indices to match; the independent counterpart of the solver's own edit.
fn edited_graph(
    g: &MetricGraph,
    remove: &[usize],
    pts: &[GraphPoint],
) -> CliResult<(MetricGraph, Vec<GraphPoint>)> {
    let mut remap = vec![usize::MAX; g.edge_count()];
    let mut kept: Vec<Edge> = Vec::new();
    for e in 0..g.edge_count() {
        if !remove.contains(&e) {
            remap[e] = kept.len();
            kept.push(g.edge(e).clone());
        }
    }
    let edited = MetricGraph::new(
        (0..g.node_count()).map(|v| g.node_name(v).to_string()).collect(),
        kept,
    )?;
    let moved = pts
        .iter()
        .map(|gp| {
            if remap[gp.edge] == usize::MAX {
                Err(CliError::Run(Error::Domain(format!(
                    "atom sits on removed edge {}",
                    g.edge(gp.edge).id
                ))))
            } else {
                Ok(GraphPoint::new(remap[gp.edge], gp.coord))
            }
        })
        .collect::<CliResult<_>>()?;
    Ok((edited, moved))
}

fn graph_measure(pts: &[GraphPoint]) -> CliResult<DiscreteMeasure> {
    Ok(DiscreteMeasure::uniform(
        pts.iter().map(|&gp| Location::Graph(gp)).collect(),
    )?)
}

fn run_one(
    g: &MetricGraph,
    remove: &[usize],
    mu_pts: &[GraphPoint],
    nu_pts: &[GraphPoint],
    p: f64,
) -> CliResult<StabilityRow> {
    let ids: Vec<&str> = remove.iter().map(|&e| g.edge(e).id.as_str()).collect();
    let label = ids.join(",");
    let mu = graph_measure(mu_pts)?;
    let nu = graph_measure(nu_pts)?;
    let edit = GraphEdit { remove: remove.to_vec(), add: vec![] };
    let report = stability_experiment(g, &mu, &nu, &edit, p).map_err(|e| {
        CliError::Run(Error::Domain(format!("edit removing [{}]: {}", label, e)))
    })?;

    // Independent verification: brute-force both values.
    let c_before = build_cost_matrix(&mu, &nu, &GroundCost::GraphPow(g, p))?;
    let oracle_before = permutation_oracle(&c_before)?;
    let (edited, mu_moved) = edited_graph(g, remove, mu_pts)?;
    let (_, nu_moved) = edited_graph(g, remove, nu_pts)?;
    let mu_e = graph_measure(&mu_moved)?;
    let nu_e = graph_measure(&nu_moved)?;
    let c_after = build_cost_matrix(&mu_e, &nu_e, &GroundCost::GraphPow(&edited, p))?;
    let oracle_after = permutation_oracle(&c_after)?;

    let delta = (report.ot_after - report.ot_before).abs();
    let tol = 1e-8;
    let verified = (report.ot_before - oracle_before).abs() <= tol * (1.0 + oracle_before.abs())
        && (report.ot_after - oracle_after).abs() <= tol * (1.0 + oracle_after.abs())
        && delta <= report.bound_pi + tol
        && report.bound_pi <= report.bound_inf + tol;
    Ok(StabilityRow {
        removed: label,
        ot_before: report.ot_before,
        ot_after: report.ot_after,
        delta,
        bound_pi: report.bound_pi,
        bound_inf: report.bound_inf,
        verified,
    })
}

pub fn run(cfg: &StabilityConfig, g: &MetricGraph) -> CliResult<StabilityReportOut> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();

    let experiments: Vec<Vec<usize>> = if let Some(edits) = &cfg.edits {
        edits
            .iter()
            .map(|edit| {
                edit.remove
                    .iter()
                    .map(|id| {
                        g.edge_index(id).ok_or_else(|| {
                            config_err(format!("edit removes unknown edge '{}'", id))
                        })
                    })
                    .collect()
            })
            .collect::<CliResult<_>>()?
    } else {
        let removable: Vec<usize> =
            (0..g.edge_count()).filter(|&e| connected_without(g, e)).collect();
        if removable.is_empty() {
            return Err(CliError::Run(Error::Domain(
                "every edge is a bridge; no single deletion keeps the network connected".into(),
            )));
        }
        (0..cfg.experiments)
            .map(|_| vec![removable[rng.gen_range(0..removable.len())]])
            .collect()
    };

    for remove in &experiments {
        // Atoms avoid the removed edges; both problems share the support.
        let kept: Vec<usize> =
            (0..g.edge_count()).filter(|e| !remove.contains(e)).collect();
        if kept.is_empty() {
            return Err(config_err("an edit removes every edge"));
        }
        let draw = |rng: &mut ChaCha8Rng| -> CliResult<Vec<GraphPoint>> {
            (0..cfg.atoms)
                .map(|_| Ok(sample_graph_point_on(g, &kept, rng)?))
                .collect()
        };
        let mu_pts = draw(&mut rng)?;
        let nu_pts = draw(&mut rng)?;
        rows.push(run_one(g, remove, &mu_pts, &nu_pts, cfg.p)?);
    }

    let all_verified = rows.iter().all(|r| r.verified);
    Ok(StabilityReportOut { rows, all_verified })
}

pub fn execute(cfg: &StabilityConfig, base_dir: &Path, out: &Path) -> CliResult<StabilityReportOut> {
    cfg.validate()?;
    let g = cfg.network.materialize(base_dir)?;
    let report = run(cfg, &g)?;

    let mut csv = Csv::new("stability");
    csv.meta("seed", cfg.seed)
        .meta("atoms", cfg.atoms)
        .meta("p", cfg.p)
        .header(&["removed", "ot_before", "ot_after", "delta", "bound_pi", "bound_inf", "verified"]);
    for r in &report.rows {
        csv.row(&[
            r.removed.clone(),
            num(r.ot_before),
            num(r.ot_after),
            num(r.delta),
            num(r.bound_pi),
            num(r.bound_inf),
            r.verified.to_string(),
        ]);
    }
    let mut arts = Artifacts::new();
    arts.add("stability.csv", csv.into_bytes());
    arts.add("summary.json", json_pretty(&report));
    arts.flush(out)?;

    for r in &report.rows {
        println!(
            "remove [{}]: |ΔOT| = {:.6} ≤ witness {:.6} ≤ sup {:.6} ({})",
            r.removed,
            r.delta,
            r.bound_pi,
            r.bound_inf,
            if r.verified { "verified" } else { "VIOLATED" }
        );
    }
    println!(
        "{}/{} experiments verified",
        report.rows.iter().filter(|r| r.verified).count(),
        report.rows.len()
    );
    Ok(report)
}
