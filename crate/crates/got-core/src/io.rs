//! Versioned JSON file formats: `mgraph/1` for metric graphs, `measure/1`
//! for atomic measures, `otresult/1` for transport solutions. Readers check
//! the version tag first and re-run the domain validation of the target
//! type, so a file that parses is also structurally sound.

use crate::error::{Error, Result};
use crate::graph::{Edge, MetricGraph, Point3};
use crate::measure::{Atom, DiscreteMeasure, Location};
use crate::statot::{Coupling, DualCertificate, MonotonicityReport, OtSolution};
use serde::{Deserialize, Serialize};

const GRAPH_TAG: &str = "mgraph/1";
const MEASURE_TAG: &str = "measure/1";
const OTRESULT_TAG: &str = "otresult/1";

fn parse<'a, T: Deserialize<'a>>(text: &'a str, what: &str) -> Result<T> {
    serde_json::from_str(text)
        .map_err(|e| Error::Format(format!("{}: {} (line {}, column {})", what, e, e.line(), e.column())))
}

fn check_tag(found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Format(format!(
            "expected format \"{}\", found \"{}\"",
            expected, found
        )));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct EdgeFile {
    id: String,
    tail: usize,
    head: usize,
    length: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embed: Option<Vec<Point3>>,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    format: String,
    nodes: Vec<String>,
    edges: Vec<EdgeFile>,
}

/// Serialize a graph as `mgraph/1` JSON.
pub fn write_graph(g: &MetricGraph) -> String {
    let file = GraphFile {
        format: GRAPH_TAG.into(),
        nodes: (0..g.node_count()).map(|v| g.node_name(v).to_string()).collect(),
        edges: g
            .edges()
            .iter()
            .map(|e| EdgeFile {
                id: e.id.clone(),
                tail: e.tail,
                head: e.head,
                length: e.length,
                embed: e.embed.clone(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("graph serialization cannot fail")
}

/// Parse `mgraph/1` JSON and validate the graph structure.
pub fn read_graph(text: &str) -> Result<MetricGraph> {
    let file: GraphFile = parse(text, "graph file")?;
    check_tag(&file.format, GRAPH_TAG)?;
    MetricGraph::new(
        file.nodes,
        file.edges
            .into_iter()
            .map(|e| Edge {
                id: e.id,
                tail: e.tail,
                head: e.head,
                length: e.length,
                embed: e.embed,
            })
            .collect(),
    )
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum AtomFile {
    Graph { edge: usize, coord: f64, weight: f64 },
    Ambient { point: Point3, weight: f64 },
}

#[derive(Serialize, Deserialize)]
struct MeasureFile {
    format: String,
    kind: String,
    atoms: Vec<AtomFile>,
}

/// Serialize a measure as `measure/1` JSON.
pub fn write_measure(m: &DiscreteMeasure) -> String {
    let file = MeasureFile {
        format: MEASURE_TAG.into(),
        kind: if m.is_ambient() { "ambient".into() } else { "graph".into() },
        atoms: m
            .atoms()
            .iter()
            .map(|a| match a.location {
                Location::Graph(p) => AtomFile::Graph {
                    edge: p.edge,
                    coord: p.coord,
                    weight: a.weight,
                },
                Location::Ambient(p) => AtomFile::Ambient { point: p, weight: a.weight },
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("measure serialization cannot fail")
}

/// Parse `measure/1` JSON; the declared kind must match every atom.
pub fn read_measure(text: &str) -> Result<DiscreteMeasure> {
    let file: MeasureFile = parse(text, "measure file")?;
    check_tag(&file.format, MEASURE_TAG)?;
    if file.kind != "graph" && file.kind != "ambient" {
        return Err(Error::Format(format!(
            "measure kind must be \"graph\" or \"ambient\", found \"{}\"",
            file.kind
        )));
    }
    let atoms = file
        .atoms
        .into_iter()
        .map(|a| match a {
            AtomFile::Graph { edge, coord, weight } => {
                if file.kind != "graph" {
                    return Err(Error::Format("graph atom in an ambient measure".into()));
                }
                Ok(Atom {
                    location: Location::Graph(crate::graph::GraphPoint::new(edge, coord)),
                    weight,
                })
            }
            AtomFile::Ambient { point, weight } => {
                if file.kind != "ambient" {
                    return Err(Error::Format("ambient atom in a graph measure".into()));
                }
                Ok(Atom { location: Location::Ambient(point), weight })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    DiscreteMeasure::new(atoms)
}

#[derive(Serialize, Deserialize)]
struct MonotonicityFile {
    cycles_checked: usize,
    violations: usize,
    worst_margin: f64,
    exhaustive: bool,
}

#[derive(Serialize, Deserialize)]
struct OtResultFile {
    format: String,
    value: f64,
    /// Sparse coupling entries (row, column, mass).
    coupling: Vec<(usize, usize, f64)>,
    phi: Vec<f64>,
    psi: Vec<f64>,
    gap: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    monotonicity: Option<MonotonicityFile>,
}

/// Serialize a transport solution (and optionally its monotonicity scan)
/// as `otresult/1` JSON.
pub fn write_ot_result(sol: &OtSolution, monotonicity: Option<&MonotonicityReport>) -> String {
    let file = OtResultFile {
        format: OTRESULT_TAG.into(),
        value: sol.coupling.value,
        coupling: sol.coupling.entries.clone(),
        phi: sol.dual.phi.clone(),
        psi: sol.dual.psi.clone(),
        gap: sol.dual.gap,
        monotonicity: monotonicity.map(|r| MonotonicityFile {
            cycles_checked: r.cycles_checked,
            violations: r.violations,
            worst_margin: r.worst_margin,
            exhaustive: r.exhaustive,
        }),
    };
    serde_json::to_string_pretty(&file).expect("result serialization cannot fail")
}

/// Parse `otresult/1` JSON.
pub fn read_ot_result(text: &str) -> Result<(OtSolution, Option<MonotonicityReport>)> {
    let file: OtResultFile = parse(text, "transport result file")?;
    check_tag(&file.format, OTRESULT_TAG)?;
    let sol = OtSolution {
        coupling: Coupling { entries: file.coupling, value: file.value },
        dual: DualCertificate { phi: file.phi, psi: file.psi, gap: file.gap },
    };
    let report = file.monotonicity.map(|m| MonotonicityReport {
        cycles_checked: m.cycles_checked,
        violations: m.violations,
        worst_margin: m.worst_margin,
        exhaustive: m.exhaustive,
    });
    Ok((sol, report))
}
