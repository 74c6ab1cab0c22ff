//! Assignment figure on a rasterized network: a source cluster matched to
//! target clusters through the tube mask, with the matched trajectories
//! drawn over the mask. The SVG is a derived artifact; the CSV carries the
//! plotted numbers.

use std::path::Path;

use got_core::graph::{MetricGraph, Point3};
use got_core::measure::{edge_direction, sample_graph_point_on, DiscreteMeasure, Location};
use got_core::statot::{build_cost_matrix, solve_ot, GroundCost};
use got_core::tube::{extract_trajectories, rasterize, GridWeight, Trajectory, TubeGrid};
use got_core::Error;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::commands::{edge_index, perpendicular};
use crate::config::{CliError, CliResult, Figure1Config};
use crate::report::{json_pretty, num, Artifacts, Csv};
use crate::svg::{Svg, PALETTE};

/// Transverse sampling stays inside this fraction of the tube half-width.
const MAX_OFFSET_FRAC: f64 = 0.8;

#[derive(Debug, Clone, Serialize)]
pub struct Figure1Report {
    pub trajectories: usize,
    pub assignment_value: f64,
    /// Every trajectory cell lies in the mask.
    pub contained: bool,
    /// Largest number of trajectories sharing one interior cell.
    pub max_shared: usize,
}

pub struct Figure1Output {
    pub report: Figure1Report,
    pub tube: TubeGrid,
    pub sources: Vec<Point3>,
    pub targets: Vec<Point3>,
    pub trajectories: Vec<Trajectory>,
}

/// Rejection-sample `n` points confined to a band of the given edges,
/// offset transversally inside the tube.
fn sample_cluster(
    g: &MetricGraph,
    tube: &TubeGrid,
    edges: &[usize],
    band: [f64; 2],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> CliResult<Vec<Point3>> {
    let mut out = Vec::with_capacity(n);
    let mut tries = 0usize;
    while out.len() < n {
        tries += 1;
        if tries > 10_000 * n.max(10) {
            return Err(CliError::Run(Error::Resolution(
                "cluster sampling kept falling outside the mask".into(),
            )));
        }
        let gp = sample_graph_point_on(g, edges, rng)?;
        let len = g.edge(gp.edge).length;
        let t = gp.coord / len;
        if t < band[0] || t > band[1] {
            continue;
        }
        let base = g.embed_point(gp)?;
        let dir = edge_direction(g, gp)?;
        let nvec = perpendicular(dir, tube.dim());
        let off = rng.gen_range(-1.0..1.0) * MAX_OFFSET_FRAC * tube.epsilon();
        let pos = [base[0] + off * nvec[0], base[1] + off * nvec[1], base[2] + off * nvec[2]];
        if tube.contains(pos) {
            out.push(pos);
        }
    }
    Ok(out)
}

pub fn run(cfg: &Figure1Config, g: &MetricGraph) -> CliResult<Figure1Output> {
    let h = cfg.epsilon / cfg.grid_div as f64;
    let tube = rasterize(g, cfg.epsilon, h)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let source_edges: Vec<usize> =
        cfg.source_edges.iter().map(|id| edge_index(g, id)).collect::<CliResult<_>>()?;
    let sources = sample_cluster(g, &tube, &source_edges, cfg.source_band, cfg.sources, &mut rng)?;
    let mut targets = Vec::with_capacity(cfg.sources);
    for (id, &count) in cfg.target_edges.iter().zip(&cfg.targets) {
        let e = edge_index(g, id)?;
        targets.extend(sample_cluster(g, &tube, &[e], cfg.target_band, count, &mut rng)?);
    }

    let mu = DiscreteMeasure::uniform(sources.iter().map(|&p| Location::Ambient(p)).collect())?;
    let nu = DiscreteMeasure::uniform(targets.iter().map(|&p| Location::Ambient(p)).collect())?;
    let cost = build_cost_matrix(&mu, &nu, &GroundCost::PixelAction(&tube))?;
    let sol = solve_ot(&cost, &mu.weights(), &nu.weights())?;

    let trajectories = extract_trajectories(
        &tube,
        &sources,
        &targets,
        &sol.coupling.entries,
        GridWeight::SquaredStep,
    )?;

    let contained = trajectories
        .iter()
        .all(|t| t.cells.iter().all(|&c| tube.mask()[c]));
    // Count trajectories per cell over interior vertices only, so shared
    // corridors do not ride on coincident endpoints.
    let mut per_cell = vec![0usize; tube.cell_count()];
    for t in &trajectories {
        if t.cells.len() > 2 {
            for &c in &t.cells[1..t.cells.len() - 1] {
                per_cell[c] += 1;
            }
        }
    }
    let max_shared = per_cell.iter().copied().max().unwrap_or(0);

    Ok(Figure1Output {
        report: Figure1Report {
            trajectories: trajectories.len(),
            assignment_value: sol.coupling.value,
            contained,
            max_shared,
        },
        tube,
        sources,
        targets,
        trajectories,
    })
}

fn trajectories_csv(cfg: &Figure1Config, out: &Figure1Output) -> Vec<u8> {
    let mut csv = Csv::new("figure1");
    csv.meta("seed", cfg.seed)
        .meta("epsilon", num(cfg.epsilon))
        .meta("h", num(out.tube.h()))
        .meta("assignment_value", num(out.report.assignment_value))
        .header(&["trajectory", "source", "target", "mass", "vertex", "x", "y", "z"]);
    for (ti, t) in out.trajectories.iter().enumerate() {
        for (vi, p) in t.points.iter().enumerate() {
            csv.row(&[
                ti.to_string(),
                t.source.to_string(),
                t.target.to_string(),
                num(t.mass),
                vi.to_string(),
                num(p[0]),
                num(p[1]),
                num(p[2]),
            ]);
        }
    }
    csv.into_bytes()
}

fn figure_svg(out: &Figure1Output) -> String {
    let tube = &out.tube;
    let h = tube.h();
    let [nx, ny, _] = tube.shape();
    let origin = tube.origin();
    let mut svg = Svg::new(origin[0], origin[1], nx as f64 * h, ny as f64 * h, 720.0);
    // Mask background, one square per masked cell.
    for j in 0..ny {
        for i in 0..nx {
            let idx = j * nx + i;
            if tube.mask()[idx] {
                svg.rect(
                    origin[0] + i as f64 * h,
                    origin[1] + j as f64 * h,
                    h,
                    h,
                    "#e3e7ea",
                );
            }
        }
    }
    for (ti, t) in out.trajectories.iter().enumerate() {
        let pts: Vec<(f64, f64)> = t.points.iter().map(|p| (p[0], p[1])).collect();
        svg.polyline(&pts, PALETTE[ti % PALETTE.len()], 0.6 * h, 0.55);
    }
    for p in &out.sources {
        svg.circle(p[0], p[1], 0.8 * h, "#13304d");
    }
    for p in &out.targets {
        svg.circle(p[0], p[1], 0.8 * h, "#7a1f1f");
    }
    svg.finish()
}

pub fn execute(cfg: &Figure1Config, base_dir: &Path, out_dir: &Path) -> CliResult<Figure1Report> {
    cfg.validate()?;
    let g = cfg.network.materialize(base_dir)?;
    if g.embed_dim() != Some(2) {
        return Err(crate::config::config_err(
            "the assignment figure needs a planar embedded network",
        ));
    }
    let out = run(cfg, &g)?;

    let mut arts = Artifacts::new();
    arts.add("trajectories.csv", trajectories_csv(cfg, &out));
    arts.add("figure1.svg", figure_svg(&out).into_bytes());
    arts.add("summary.json", json_pretty(&out.report));
    arts.flush(out_dir)?;

    println!(
        "{} trajectories, assignment value {:.6}; mask-contained: {}; max shared interior cell: {}",
        out.report.trajectories,
        out.report.assignment_value,
        out.report.contained,
        out.report.max_shared
    );
    Ok(out.report)
}
