//! Tube-versus-graph transport convergence. One fixed atom sample is reused
//! across the epsilon list — only the transverse offsets scale with the
//! tube width — so the reported gaps isolate the cost convergence instead
//! of sampling noise.

use std::path::Path;

use got_core::graph::{GraphPoint, MetricGraph, Point3};
use got_core::measure::{
    edge_direction, project_measure, sample_graph_point, DiscreteMeasure, Location,
};
use got_core::statot::{build_cost_matrix, solve_ot, GroundCost};
use got_core::tube::{rasterize, TubeGrid};
use got_core::Error;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::commands::{node_diameter, perpendicular};
use crate::config::{CliError, CliResult, ConvergeConfig};
use crate::report::{num, Artifacts, Csv};

/// Stream-splitting constant so calibration and evaluation pairs never
/// overlap the atom sample.
const CALIBRATION_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
const EVALUATION_STREAM: u64 = 0x517c_c1b7_2722_0a95;

#[derive(Debug, Clone, Serialize)]
pub struct ConvergeRow {
    pub epsilon: f64,
    pub h: f64,
    pub ot_eps: f64,
    pub ot_zero: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SandwichRow {
    pub epsilon: f64,
    pub checked: usize,
    pub held: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergeReport {
    pub rows: Vec<ConvergeRow>,
    /// Least-squares slope of log gap against log epsilon.
    pub slope: f64,
    /// Fitted lower-sandwich constant, in cost units per epsilon².
    pub khat: f64,
    pub diameter: f64,
    pub sandwich: Vec<SandwichRow>,
}

/// A base atom: a point on the graph plus a signed transverse fraction;
/// at tube width ε the atom sits `frac·ε` off the lifted centerline.
struct BaseAtom {
    gp: GraphPoint,
    frac: f64,
}

/// Draw `n` base atoms on the given edges, confined to a band of each
/// edge's length, with edges weighted by their in-band length.
fn draw_base(
    g: &MetricGraph,
    rng: &mut ChaCha8Rng,
    n: usize,
    max_frac: f64,
    edges: &[usize],
    band: [f64; 2],
) -> CliResult<Vec<BaseAtom>> {
    let weights: Vec<f64> = edges.iter().map(|&e| g.edge(e).length * (band[1] - band[0])).collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(crate::config::config_err("sampling band has zero total length"));
    }
    (0..n)
        .map(|_| {
            let mut t = rng.gen_range(0.0..total);
            let mut edge = *edges.last().unwrap();
            for (&e, &w) in edges.iter().zip(&weights) {
                if t <= w {
                    edge = e;
                    break;
                }
                t -= w;
            }
            let len = g.edge(edge).length;
            let coord = rng.gen_range(band[0] * len..band[1] * len);
            let frac = rng.gen_range(-1.0..1.0) * max_frac;
            Ok(BaseAtom { gp: GraphPoint::new(edge, coord), frac })
        })
        .collect()
}

fn edge_set(g: &MetricGraph, ids: &Option<Vec<String>>) -> CliResult<Vec<usize>> {
    match ids {
        None => Ok((0..g.edge_count()).collect()),
        Some(list) => {
            if list.is_empty() {
                return Err(crate::config::config_err("edge list must not be empty"));
            }
            list.iter().map(|id| crate::commands::edge_index(g, id)).collect()
        }
    }
}

fn place(g: &MetricGraph, tube: &TubeGrid, atom: &BaseAtom, epsilon: f64) -> CliResult<Point3> {
    let base = g.embed_point(atom.gp)?;
    let dir = edge_direction(g, atom.gp)?;
    let n = perpendicular(dir, tube.dim());
    let pos = [
        base[0] + atom.frac * epsilon * n[0],
        base[1] + atom.frac * epsilon * n[1],
        base[2] + atom.frac * epsilon * n[2],
    ];
    if !tube.contains(pos) {
        return Err(CliError::Run(Error::Resolution(format!(
            "atom at offset {:.3}ε fell outside the mask; refine grid_div",
            atom.frac
        ))));
    }
    Ok(pos)
}

fn ambient_measure(points: Vec<Point3>) -> CliResult<DiscreteMeasure> {
    Ok(DiscreteMeasure::uniform(
        points.into_iter().map(Location::Ambient).collect(),
    )?)
}

/// Draw a lifted point pair: two graph points embedded exactly on the
/// centerline, paired with their graph distance.
fn draw_pair(g: &MetricGraph, rng: &mut ChaCha8Rng) -> CliResult<(Point3, Point3, f64)> {
    let x = sample_graph_point(g, rng)?;
    let y = sample_graph_point(g, rng)?;
    Ok((g.embed_point(x)?, g.embed_point(y)?, g.distance(x, y)?))
}

pub fn run(cfg: &ConvergeConfig, g: &MetricGraph) -> CliResult<ConvergeReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let src_edges = edge_set(g, &cfg.source_edges)?;
    let dst_edges = edge_set(g, &cfg.target_edges)?;
    let base_src = draw_base(g, &mut rng, cfg.atoms, cfg.offset_frac, &src_edges, cfg.source_band)?;
    let base_dst = draw_base(g, &mut rng, cfg.atoms, cfg.offset_frac, &dst_edges, cfg.target_band)?;
    let diameter = node_diameter(g)?;

    // Pass 1: tubes and the transport table.
    let mut tubes = Vec::with_capacity(cfg.epsilons.len());
    let mut rows = Vec::with_capacity(cfg.epsilons.len());
    for &eps in &cfg.epsilons {
        let h = eps / cfg.grid_div as f64;
        let tube = rasterize(g, eps, h)?;
        let xs: Vec<Point3> =
            base_src.iter().map(|a| place(g, &tube, a, eps)).collect::<CliResult<_>>()?;
        let ys: Vec<Point3> =
            base_dst.iter().map(|a| place(g, &tube, a, eps)).collect::<CliResult<_>>()?;
        let mu = ambient_measure(xs)?;
        let nu = ambient_measure(ys)?;
        let w_mu = mu.weights();
        let w_nu = nu.weights();
        let c_eps = build_cost_matrix(&mu, &nu, &GroundCost::TubeAction(&tube))?;
        let ot_eps = solve_ot(&c_eps, &w_mu, &w_nu)?.coupling.value;
        let mu0 = project_measure(g, &mu)?;
        let nu0 = project_measure(g, &nu)?;
        let c0 = build_cost_matrix(&mu0, &nu0, &GroundCost::GraphPow(g, cfg.p))?;
        let ot_zero = solve_ot(&c0, &w_mu, &w_nu)?.coupling.value;
        rows.push(ConvergeRow { epsilon: eps, h, ot_eps, ot_zero, gap: (ot_eps - ot_zero).abs() });
        tubes.push(tube);
    }

    // Log-log slope of the gap against epsilon.
    let slope = fit_slope(
        &cfg.epsilons.iter().map(|e| e.ln()).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.gap.max(1e-300).ln()).collect::<Vec<_>>(),
    );

    // Pass 2: fit the lower-sandwich constant on calibration pairs, then
    // check both sandwich inequalities on fresh evaluation pairs.
    let mut khat = 0.0;
    let mut sandwich = Vec::new();
    if cfg.pairs > 0 {
        let mut cal_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ CALIBRATION_STREAM);
        let mut worst_ratio = 0.0f64;
        for (tube, &eps) in tubes.iter().zip(&cfg.epsilons) {
            let h = eps / cfg.grid_div as f64;
            let slack = 4.0 * h * diameter;
            let pairs: Vec<(Point3, Point3, f64)> = (0..2 * cfg.pairs)
                .map(|_| draw_pair(g, &mut cal_rng))
                .collect::<CliResult<_>>()?;
            let deficits: Vec<f64> = pairs
                .par_iter()
                .map(|&(x, y, gd)| gd.powf(cfg.p) - tube.tube_cost(x, y) - slack)
                .collect();
            for d in deficits {
                worst_ratio = worst_ratio.max(d / (eps * eps));
            }
        }
        khat = 1.25 * worst_ratio.max(0.0);

        let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ EVALUATION_STREAM);
        for (tube, &eps) in tubes.iter().zip(&cfg.epsilons) {
            let h = eps / cfg.grid_div as f64;
            let slack = 4.0 * h * diameter;
            let pairs: Vec<(Point3, Point3, f64)> =
                (0..cfg.pairs).map(|_| draw_pair(g, &mut eval_rng)).collect::<CliResult<_>>()?;
            let held = pairs
                .par_iter()
                .filter(|&&(x, y, gd)| {
                    let c0 = gd.powf(cfg.p);
                    let ce = tube.tube_cost(x, y);
                    c0 - khat * eps * eps - slack <= ce && ce <= c0 + 2.0 * eps * eps + slack
                })
                .count();
            sandwich.push(SandwichRow {
                epsilon: eps,
                checked: cfg.pairs,
                held,
                fraction: held as f64 / cfg.pairs as f64,
            });
        }
    }

    Ok(ConvergeReport { rows, slope, khat, diameter, sandwich })
}

fn fit_slope(u: &[f64], v: &[f64]) -> f64 {
    let n = u.len() as f64;
    if u.len() < 2 {
        return f64::NAN;
    }
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let cov: f64 = u.iter().zip(v).map(|(a, b)| (a - mu) * (b - mv)).sum();
    let var: f64 = u.iter().map(|a| (a - mu) * (a - mu)).sum();
    cov / var
}

pub fn execute(cfg: &ConvergeConfig, base_dir: &Path, out: &Path) -> CliResult<ConvergeReport> {
    let g = materialize(cfg, base_dir)?;
    let report = run(cfg, &g)?;

    let mut table = Csv::new("converge");
    table
        .meta("seed", cfg.seed)
        .meta("atoms", cfg.atoms)
        .meta("grid_div", cfg.grid_div)
        .meta("p", cfg.p)
        .meta("slope", num(report.slope))
        .header(&["epsilon", "h", "ot_eps", "ot_zero", "gap"]);
    for r in &report.rows {
        table.row(&[num(r.epsilon), num(r.h), num(r.ot_eps), num(r.ot_zero), num(r.gap)]);
    }

    let mut arts = Artifacts::new();
    arts.add("converge.csv", table.into_bytes());

    if !report.sandwich.is_empty() {
        let mut sw = Csv::new("converge");
        sw.meta("seed", cfg.seed)
            .meta("khat", num(report.khat))
            .meta("diameter", num(report.diameter))
            .header(&["epsilon", "checked", "held", "fraction"]);
        for r in &report.sandwich {
            sw.row(&[num(r.epsilon), r.checked.to_string(), r.held.to_string(), num(r.fraction)]);
        }
        arts.add("sandwich.csv", sw.into_bytes());
    }

    arts.add("summary.json", crate::report::json_pretty(&report));
    arts.flush(out)?;

    println!("epsilon        h       OT_eps     OT_0       |gap|");
    for r in &report.rows {
        println!(
            "{:<8} {:<8} {:<10.6} {:<10.6} {:<10.3e}",
            r.epsilon, r.h, r.ot_eps, r.ot_zero, r.gap
        );
    }
    println!("log-log slope: {:.3}", report.slope);
    if !report.sandwich.is_empty() {
        println!("fitted K: {:.4} (diameter {:.3})", report.khat, report.diameter);
        for s in &report.sandwich {
            println!(
                "sandwich eps={}: {}/{} pairs inside bounds ({:.1}%)",
                s.epsilon,
                s.held,
                s.checked,
                100.0 * s.fraction
            );
        }
    }
    Ok(report)
}

pub fn materialize(cfg: &ConvergeConfig, base_dir: &Path) -> CliResult<got_core::graph::MetricGraph> {
    cfg.validate()?;
    let g = cfg.network.materialize(base_dir)?;
    if g.embed_dim().is_none() {
        return Err(crate::config::config_err(
            "convergence studies need an embedded network",
        ));
    }
    Ok(g)
}
