//! Config loading and validation. One JSON file per experiment; the file's
//! `command` field must match the invoked subcommand. Parse errors carry
//! the file path and line/column; semantic errors name the offending field.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use got_core::graph::MetricGraph;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::networks;

/// Harness error split by exit code: a bad configuration (exit 2) versus a
/// failure while running a well-formed experiment (exit 3).
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Run(got_core::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {}", msg),
            CliError::Run(e) => write!(f, "run error: {}", e),
        }
    }
}

impl std::error::Error for CliError {}

impl From<got_core::Error> for CliError {
    fn from(e: got_core::Error) -> Self {
        CliError::Run(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Exit code for the process: 2 for config problems, 3 for run failures.
pub fn exit_code(e: &CliError) -> i32 {
    match e {
        CliError::Config(_) => 2,
        CliError::Run(_) => 3,
    }
}

fn parse_json<T: DeserializeOwned>(text: &str, path: &Path) -> CliResult<T> {
    // serde_json's Display already includes "at line L column C".
    serde_json::from_str(text).map_err(|e| config_err(format!("{}: {}", path.display(), e)))
}

#[derive(Deserialize)]
struct Probe {
    command: String,
}

/// Read a config file, check its `command` tag against the invoked
/// subcommand, then parse the full schema.
pub fn load_config<T: DeserializeOwned>(path: &Path, expect: &str) -> CliResult<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read {}: {}", path.display(), e)))?;
    let probe: Probe = parse_json(&text, path)?;
    if probe.command != expect {
        return Err(config_err(format!(
            "{} declares command '{}' but '{}' was invoked",
            path.display(),
            probe.command,
            expect
        )));
    }
    parse_json(&text, path)
}

/// Where a command finds its network: a named built-in or a graph file
/// (resolved relative to the config file's directory).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    #[serde(default)]
    pub builtin: Option<String>,
    #[serde(default)]
    pub file: Option<PathBuf>,
}

impl NetworkSpec {
    pub fn materialize(&self, base_dir: &Path) -> CliResult<MetricGraph> {
        match (&self.builtin, &self.file) {
            (Some(name), None) => networks::builtin(name).ok_or_else(|| {
                config_err(format!(
                    "unknown builtin network '{}'; available: {}",
                    name,
                    networks::BUILTIN_NAMES.join(", ")
                ))
            }),
            (None, Some(file)) => {
                let path = if file.is_absolute() { file.clone() } else { base_dir.join(file) };
                let text = fs::read_to_string(&path)
                    .map_err(|e| config_err(format!("cannot read {}: {}", path.display(), e)))?;
                got_core::io::read_graph(&text)
                    .map_err(|e| config_err(format!("{}: {}", path.display(), e)))
            }
            _ => Err(config_err(
                "network needs exactly one of 'builtin' or 'file'",
            )),
        }
    }
}

/// Output directory: CLI flag beats config field beats "out".
pub fn out_dir(cfg_out: &Option<PathBuf>, cli_out: &Option<PathBuf>) -> PathBuf {
    cli_out
        .clone()
        .or_else(|| cfg_out.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn default_grid_div() -> usize {
    8
}
fn default_atoms_converge() -> usize {
    40
}
fn default_p() -> f64 {
    2.0
}
fn default_pairs() -> usize {
    200
}
fn default_offset_frac() -> f64 {
    0.85
}

/// Tube-versus-graph convergence study over a decreasing epsilon list.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergeConfig {
    pub command: String,
    pub network: NetworkSpec,
    pub epsilons: Vec<f64>,
    /// Grid spacing is epsilon / grid_div at every tube width.
    #[serde(default = "default_grid_div")]
    pub grid_div: usize,
    /// Atoms per marginal.
    #[serde(default = "default_atoms_converge")]
    pub atoms: usize,
    #[serde(default = "default_p")]
    pub p: f64,
    pub seed: u64,
    /// Cost-sandwich pairs checked per epsilon (0 skips the check).
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    /// Atoms sit at most this fraction of epsilon off the lifted centerline.
    #[serde(default = "default_offset_frac")]
    pub offset_frac: f64,
    /// Edges carrying the source atoms (all edges when omitted).
    #[serde(default)]
    pub source_edges: Option<Vec<String>>,
    /// Band of each source edge's length (as fractions) atoms may occupy.
    #[serde(default = "default_full_band")]
    pub source_band: [f64; 2],
    #[serde(default)]
    pub target_edges: Option<Vec<String>>,
    #[serde(default = "default_full_band")]
    pub target_band: [f64; 2],
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_full_band() -> [f64; 2] {
    [0.0, 1.0]
}

impl ConvergeConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.epsilons.is_empty() {
            return Err(config_err("epsilons must not be empty"));
        }
        if self.epsilons.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(config_err("epsilons must be finite and positive"));
        }
        if self.epsilons.windows(2).any(|w| w[1] >= w[0]) {
            return Err(config_err("epsilons must be strictly decreasing"));
        }
        if self.grid_div < 2 {
            return Err(config_err("grid_div must be at least 2"));
        }
        if self.atoms == 0 {
            return Err(config_err("atoms must be positive"));
        }
        if self.p != 2.0 {
            return Err(config_err(
                "tube action costs are squared lengths; only p = 2 is supported",
            ));
        }
        if !(0.0..0.95).contains(&self.offset_frac) {
            return Err(config_err("offset_frac must lie in [0, 0.95)"));
        }
        // A cell containing a point at offset_frac·ε sits within
        // offset_frac·ε + h·√2/2 of the centerline; keep that below ε so
        // every sampled atom lands in a masked cell.
        if self.offset_frac + std::f64::consts::SQRT_2 / (2.0 * self.grid_div as f64) >= 1.0 {
            return Err(config_err(format!(
                "offset_frac {} with grid_div {} can place atoms outside the mask; \
                 need offset_frac + sqrt(2)/(2 grid_div) < 1",
                self.offset_frac, self.grid_div
            )));
        }
        for band in [self.source_band, self.target_band] {
            if !(0.0..=1.0).contains(&band[0]) || !(0.0..=1.0).contains(&band[1]) || band[0] >= band[1] {
                return Err(config_err("bands must satisfy 0 <= lo < hi <= 1"));
            }
        }
        Ok(())
    }
}

fn default_fig_epsilon() -> f64 {
    0.08
}
fn default_fig_grid_div() -> usize {
    4
}
fn default_sources() -> usize {
    50
}
fn default_source_edges() -> Vec<String> {
    vec!["stem".into()]
}
fn default_source_band() -> [f64; 2] {
    [0.0, 0.3]
}
fn default_target_edges() -> Vec<String> {
    vec!["up".into(), "down".into()]
}
fn default_target_counts() -> Vec<usize> {
    vec![25, 25]
}
fn default_target_band() -> [f64; 2] {
    [0.7, 1.0]
}

/// Assignment figure on a rasterized network: clustered sources matched to
/// clustered targets, trajectories drawn over the mask.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Figure1Config {
    pub command: String,
    pub network: NetworkSpec,
    #[serde(default = "default_fig_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_fig_grid_div")]
    pub grid_div: usize,
    #[serde(default = "default_sources")]
    pub sources: usize,
    /// Edges carrying the source cluster and the band of each edge's length
    /// (as fractions) the cluster occupies.
    #[serde(default = "default_source_edges")]
    pub source_edges: Vec<String>,
    #[serde(default = "default_source_band")]
    pub source_band: [f64; 2],
    #[serde(default = "default_target_edges")]
    pub target_edges: Vec<String>,
    /// Atoms per target edge; must sum to `sources`.
    #[serde(default = "default_target_counts")]
    pub targets: Vec<usize>,
    #[serde(default = "default_target_band")]
    pub target_band: [f64; 2],
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl Figure1Config {
    pub fn validate(&self) -> CliResult<()> {
        if !(self.epsilon > 0.0) {
            return Err(config_err("epsilon must be positive"));
        }
        if self.grid_div < 2 {
            return Err(config_err("grid_div must be at least 2"));
        }
        if self.sources == 0 {
            return Err(config_err("sources must be positive"));
        }
        if self.source_edges.is_empty() || self.target_edges.is_empty() {
            return Err(config_err("source_edges and target_edges must not be empty"));
        }
        if self.targets.len() != self.target_edges.len() {
            return Err(config_err(
                "targets must list one atom count per target edge",
            ));
        }
        if self.targets.iter().sum::<usize>() != self.sources {
            return Err(config_err("target counts must sum to the source count"));
        }
        for band in [self.source_band, self.target_band] {
            if !(0.0..=1.0).contains(&band[0]) || !(0.0..=1.0).contains(&band[1]) || band[0] >= band[1] {
                return Err(config_err("bands must satisfy 0 <= lo < hi <= 1"));
            }
        }
        Ok(())
    }
}

fn default_atoms_stability() -> usize {
    6
}
fn default_experiments() -> usize {
    20
}

/// One graph edit: edges to delete, by id.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditSpec {
    pub remove: Vec<String>,
}

/// Cost-stability experiments under edge deletions.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityConfig {
    pub command: String,
    pub network: NetworkSpec,
    #[serde(default = "default_p")]
    pub p: f64,
    /// Atoms per marginal; at most 7 so the permutation oracle can verify
    /// every solve.
    #[serde(default = "default_atoms_stability")]
    pub atoms: usize,
    /// Randomized single-edge deletions when no explicit edit list is given.
    #[serde(default = "default_experiments")]
    pub experiments: usize,
    #[serde(default)]
    pub edits: Option<Vec<EditSpec>>,
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl StabilityConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.p < 1.0 {
            return Err(config_err("p must be at least 1"));
        }
        if self.atoms == 0 || self.atoms > 7 {
            return Err(config_err(
                "atoms must lie in 1..=7 (the permutation oracle verifies each solve)",
            ));
        }
        if self.edits.is_none() && self.experiments == 0 {
            return Err(config_err("need experiments > 0 or an explicit edit list"));
        }
        if let Some(edits) = &self.edits {
            if edits.iter().any(|e| e.remove.is_empty()) {
                return Err(config_err("every edit must remove at least one edge"));
            }
        }
        Ok(())
    }
}

fn default_instances() -> usize {
    50
}
fn default_atoms_mono() -> usize {
    4
}
fn default_delta() -> f64 {
    1e-8
}
fn default_max_cycle() -> usize {
    8
}
fn default_true() -> bool {
    true
}

/// Cyclical-monotonicity audits of freshly solved instances.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonotonicityConfig {
    pub command: String,
    pub network: NetworkSpec,
    #[serde(default = "default_instances")]
    pub instances: usize,
    /// Atoms per marginal; 4 keeps plan supports within exhaustive range.
    #[serde(default = "default_atoms_mono")]
    pub atoms: usize,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_max_cycle")]
    pub max_cycle: usize,
    /// Also audit a deliberately crossing plan and report its margin.
    #[serde(default = "default_true")]
    pub planted: bool,
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl MonotonicityConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.instances == 0 {
            return Err(config_err("instances must be positive"));
        }
        if self.atoms == 0 {
            return Err(config_err("atoms must be positive"));
        }
        if self.p < 1.0 {
            return Err(config_err("p must be at least 1"));
        }
        if !(self.delta > 0.0) {
            return Err(config_err("delta must be positive"));
        }
        if self.max_cycle < 2 {
            return Err(config_err("max_cycle must be at least 2"));
        }
        Ok(())
    }
}

/// A unit-mass Gaussian bump on one edge, sampled at cell centers.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpSpec {
    pub edge: String,
    /// Center as edge coordinate (arc length from the tail).
    pub center: f64,
    pub width: f64,
}

impl BumpSpec {
    pub fn validate(&self, what: &str) -> CliResult<()> {
        if !(self.width > 0.0) {
            return Err(config_err(format!("{}: width must be positive", what)));
        }
        if !self.center.is_finite() || self.center < 0.0 {
            return Err(config_err(format!("{}: center must be nonnegative", what)));
        }
        Ok(())
    }
}

/// Optional overrides of the action-solver options.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default)]
    pub max_iters: Option<usize>,
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub obj_rtol: Option<f64>,
    #[serde(default)]
    pub penalty: Option<f64>,
    #[serde(default)]
    pub adapt: Option<bool>,
}

impl SolverSpec {
    pub fn build(&self) -> got_core::dynamic::SolverOpts {
        let mut opts = got_core::dynamic::SolverOpts::default();
        if let Some(v) = self.max_iters {
            opts.max_iters = v;
        }
        if let Some(v) = self.tol {
            opts.tol = v;
        }
        if let Some(v) = self.obj_rtol {
            opts.obj_rtol = v;
        }
        if let Some(v) = self.penalty {
            opts.penalty = v;
        }
        if let Some(v) = self.adapt {
            opts.adapt = v;
        }
        opts
    }
}

fn default_variant() -> String {
    "kirchhoff".into()
}

/// One dynamic-transport solve between two bump states.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicConfig {
    pub command: String,
    pub network: NetworkSpec,
    /// Cells per edge.
    pub cells: usize,
    pub time_steps: usize,
    #[serde(default = "default_p")]
    pub p: f64,
    /// One of kirchhoff, reservoir_net, reservoir_per_edge.
    #[serde(default = "default_variant")]
    pub variant: String,
    pub source: BumpSpec,
    pub target: BumpSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl DynamicConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.cells < 2 {
            return Err(config_err("cells must be at least 2"));
        }
        if self.time_steps < 2 {
            return Err(config_err("time_steps must be at least 2"));
        }
        if self.p < 1.0 {
            return Err(config_err("p must be at least 1"));
        }
        self.variant_enum()?;
        self.source.validate("source")?;
        self.target.validate("target")?;
        Ok(())
    }

    pub fn variant_enum(&self) -> CliResult<got_core::dynamic::ActionVariant> {
        match self.variant.as_str() {
            "kirchhoff" => Ok(got_core::dynamic::ActionVariant::Kirchhoff),
            "reservoir_net" => Ok(got_core::dynamic::ActionVariant::ReservoirNet),
            "reservoir_per_edge" => Ok(got_core::dynamic::ActionVariant::ReservoirPerEdge),
            other => Err(config_err(format!(
                "unknown variant '{}'; expected kirchhoff, reservoir_net, or reservoir_per_edge",
                other
            ))),
        }
    }
}

/// Pressure law p(ρ) = coeff · ρ^exponent.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PressureSpec {
    pub coeff: f64,
    pub exponent: f64,
}

fn default_diameter() -> f64 {
    0.5
}
fn default_friction() -> f64 {
    1.0
}
fn default_gravity() -> f64 {
    9.81
}

/// Per-edge gas-pipe parameters for the pipe energy.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipeSpec {
    #[serde(default = "default_diameter")]
    pub diameter: f64,
    #[serde(default = "default_friction")]
    pub friction: f64,
    #[serde(default)]
    pub incline: f64,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    #[serde(default)]
    pub offset: f64,
    pub pressure: PressureSpec,
}

/// Which energy drives the flow.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnergyConfig {
    /// ∫ ρ ln ρ − ρ (zero potential, no interaction).
    LogEntropy {},
    /// Per-edge pipe energies; one entry per edge.
    Pipes { pipes: Vec<PipeSpec> },
}

/// Minimizing-movement flow driven by a configured energy.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JkoConfig {
    pub command: String,
    pub network: NetworkSpec,
    pub cells: usize,
    pub tau: f64,
    pub flow_steps: usize,
    #[serde(default = "default_p")]
    pub p: f64,
    pub energy: EnergyConfig,
    pub initial: BumpSpec,
    #[serde(default)]
    pub time_steps: Option<usize>,
    #[serde(default)]
    pub max_outer: Option<usize>,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl JkoConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.cells < 2 {
            return Err(config_err("cells must be at least 2"));
        }
        if !(self.tau > 0.0) {
            return Err(config_err("tau must be positive"));
        }
        if self.p < 1.0 {
            return Err(config_err("p must be at least 1"));
        }
        self.initial.validate("initial")?;
        if let EnergyConfig::Pipes { pipes } = &self.energy {
            if pipes.is_empty() {
                return Err(config_err("pipes must not be empty"));
            }
            for (i, pipe) in pipes.iter().enumerate() {
                if !(pipe.diameter > 0.0) || !(pipe.friction > 0.0) {
                    return Err(config_err(format!(
                        "pipe {}: diameter and friction must be positive",
                        i
                    )));
                }
                if pipe.pressure.coeff < 0.0 || pipe.pressure.exponent < 1.0 {
                    return Err(config_err(format!(
                        "pipe {}: pressure needs coeff >= 0 and exponent >= 1",
                        i
                    )));
                }
            }
        }
        if let Some(v) = self.time_steps {
            if v < 2 {
                return Err(config_err("time_steps must be at least 2"));
            }
        }
        Ok(())
    }
}
