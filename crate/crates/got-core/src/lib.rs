//! Optimal transport on metric graphs and their epsilon-tube thickenings.
//!
//! A metric graph is a set of edges, each carrying an interval `[0, len]`,
//! glued at shared nodes. This crate provides:
//!
//! * [`graph`]: the graph type, its path metric, shortest paths, and
//!   geodesic multiplicity.
//! * [`measure`]: discrete (atomic) measures on graphs or ambient space,
//!   projection/lifting between the two, and seeded tube sampling.
//! * [`statot`]: exact discrete optimal transport with dual certificates,
//!   cyclical-monotonicity checking, and cost-perturbation stability bounds.
//! * [`tube`]: rasterized epsilon-neighborhoods of an embedded graph and
//!   shortest-path (squared-length) costs on the pixel grid.
//! * [`dynamic`]: continuity-equation transport on edge grids, the
//!   action (Benamou-Brenier style) minimizer, and a drift-diffusion
//!   simulator with node reservoirs.
//! * [`flow`]: energy functionals and JKO minimizing-movement schemes.
//! * [`io`]: versioned JSON file formats for graphs, measures, and
//!   transport results.

pub mod dynamic;
pub mod error;
pub mod flow;
pub mod graph;
pub mod io;
pub mod measure;
pub mod statot;
pub mod tube;

pub use error::{Error, Result};
