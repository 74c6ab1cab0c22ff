//! Energy functionals on edge-grid densities and the minimizing-movement
//! (JKO) time discretization of their Wasserstein gradient flows.
//!
//! One flow step solves
//!
//! ```text
//!   argmin over rho  of  W_p(rho, prev)^p / (p tau^(p-1)) + E(rho)
//! ```
//!
//! with the transport term evaluated by [`dynamic::minimize_action`] and the
//! outer minimization done by projected gradient descent over the terminal
//! density (unit-mass simplex with cell-width weights). The contract is
//! descent, not global optimality: the returned state never has a larger
//! objective than `prev`, so the energy log of a flow is non-increasing.

use crate::dynamic::{
    minimize_action, relative_entropy, ActionSpec, ActionVariant, GridState, SolverOpts,
    SpaceGrid,
};
use crate::error::{Error, Result};
use crate::graph::MetricGraph;
use ndarray::Array2;

/// Power-law pressure p(ρ) = coeff·ρ^exponent with exponent ≥ 1.
#[derive(Debug, Clone, Copy)]
pub struct PressureLaw {
    pub coeff: f64,
    pub exponent: f64,
}

impl PressureLaw {
    pub fn new(coeff: f64, exponent: f64) -> Result<Self> {
        if !(coeff >= 0.0) || !(exponent >= 1.0) {
            return Err(Error::Domain(format!(
                "pressure law needs coeff >= 0 and exponent >= 1, got {}·ρ^{}",
                coeff, exponent
            )));
        }
        Ok(PressureLaw { coeff, exponent })
    }
}

/// Per-pipe parameters of the third-order isothermal gas-flow energy:
/// entropy density from the pressure law via F'' = (2·diameter/friction)·
/// p'(ρ)/ρ, a gravity tilt along inclined pipes, and a linear offset.
#[derive(Debug, Clone, Copy)]
pub struct PipeParams {
    pub diameter: f64,
    pub friction: f64,
    /// Inclination angle in radians; enters through its sine.
    pub incline: f64,
    pub gravity: f64,
    /// Constant added per unit of density (absorbs integration constants).
    pub offset: f64,
    pub pressure: PressureLaw,
}

impl PipeParams {
    /// Level pipe with p(ρ) = ρ² and unit diameter/friction, so the entropy
    /// density is exactly ρ².
    pub fn quadratic() -> Self {
        PipeParams {
            diameter: 0.5,
            friction: 1.0,
            incline: 0.0,
            gravity: 1.0,
            offset: 0.0,
            pressure: PressureLaw { coeff: 1.0, exponent: 2.0 },
        }
    }
}

/// Entropy density F(ρ) of a pipe, the double antiderivative of
/// F''(ρ) = (2D/λ)·p'(ρ)/ρ normalized by F(0) = 0 and F'(0) = 0 when that
/// limit is finite (exponent > 1), else F'(1) = 0 (isothermal case; the
/// linear shift is absorbed by `offset` at fixed total mass).
pub fn iso3_entropy_density(rho: f64, pipe: &PipeParams) -> Result<f64> {
    if rho < 0.0 {
        return Err(Error::Domain(format!("density must be nonnegative, got {}", rho)));
    }
    let kappa = pipe.pressure.exponent;
    let c = pipe.pressure.coeff;
    if !(c >= 0.0) || !(kappa >= 1.0) {
        return Err(Error::Domain(format!(
            "pressure law needs coeff >= 0 and exponent >= 1, got {}·ρ^{}",
            c, kappa
        )));
    }
    if pipe.diameter <= 0.0 || pipe.friction <= 0.0 {
        return Err(Error::Domain("pipe diameter and friction must be positive".into()));
    }
    let scale = 2.0 * pipe.diameter / pipe.friction;
    if rho == 0.0 {
        return Ok(0.0);
    }
    if kappa > 1.0 {
        Ok(scale * c * rho.powf(kappa) / (kappa - 1.0))
    } else {
        Ok(scale * c * (rho * rho.ln() - rho))
    }
}

/// F'(ρ) under the same normalization; used by the descent direction.
fn iso3_entropy_slope(rho: f64, pipe: &PipeParams) -> f64 {
    let kappa = pipe.pressure.exponent;
    let c = pipe.pressure.coeff;
    let scale = 2.0 * pipe.diameter / pipe.friction;
    if kappa > 1.0 {
        scale * c * kappa * rho.powf(kappa - 1.0) / (kappa - 1.0)
    } else {
        scale * c * rho.max(GRAD_FLOOR).ln()
    }
}

/// Symmetric interaction kernel sampled on the cell midpoints of a grid,
/// stored as a dense matrix over the flattened cell index.
#[derive(Debug, Clone)]
pub struct InteractionKernel {
    values: Array2<f64>,
}

impl InteractionKernel {
    /// Wrap an explicit matrix; it must be square and symmetric.
    pub fn from_matrix(values: Array2<f64>) -> Result<Self> {
        let (r, c) = values.dim();
        if r != c {
            return Err(Error::Domain(format!("kernel matrix is {}x{}, not square", r, c)));
        }
        let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..r {
            for j in 0..i {
                if (values[(i, j)] - values[(j, i)]).abs() > 1e-12 * (1.0 + scale) {
                    return Err(Error::Domain(format!(
                        "kernel is not symmetric at ({}, {}): {} vs {}",
                        i, j, values[(i, j)], values[(j, i)]
                    )));
                }
            }
        }
        Ok(InteractionKernel { values })
    }

    /// Sample `f((edge, arclength), (edge, arclength))` on all cell-midpoint
    /// pairs; `f` must be symmetric in its arguments.
    pub fn from_fn<F>(space: &SpaceGrid, f: F) -> Result<Self>
    where
        F: Fn((usize, f64), (usize, f64)) -> f64,
    {
        let mut points = Vec::new();
        for (e, &n) in space.cells.iter().enumerate() {
            for k in 0..n {
                points.push((e, (k as f64 + 0.5) * space.dx[e]));
            }
        }
        let n = points.len();
        let mut values = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                values[(i, j)] = f(points[i], points[j]);
            }
        }
        Self::from_matrix(values)
    }

    fn dim(&self) -> usize {
        self.values.dim().0
    }
}

/// Which energy functional drives the flow.
#[derive(Debug, Clone)]
pub enum EnergySpec {
    /// Relative entropy of the state (cell masses and node masses) against
    /// a fixed reference state.
    RelativeEntropy { reference: GridState },
    /// Per-pipe gas-flow energy Σ_e ∫ F_e(ρ) + (2·D·g/λ)·sin(incline)·x·ρ +
    /// offset·ρ dx, one parameter set per edge. Node masses do not enter.
    Pipes { pipes: Vec<PipeParams> },
    /// Log entropy ∫ ρ ln ρ − ρ plus a cell-sampled potential ∫ V ρ and an
    /// optional pairwise interaction ½·ΣΣ W·m·m over cell masses.
    LogEntropy {
        potential: Vec<Vec<f64>>,
        interaction: Option<InteractionKernel>,
    },
}

/// Floor used when evaluating logarithmic descent directions at empty
/// cells; the energies themselves are evaluated exactly.
const GRAD_FLOOR: f64 = 1e-12;

fn x_log_x_minus_x(v: f64) -> f64 {
    if v <= 0.0 {
        0.0
    } else {
        v * v.ln() - v
    }
}

fn check_energy_shapes(space: &SpaceGrid, spec: &EnergySpec, state: &GridState) -> Result<()> {
    if state.rho.iter().flatten().any(|&r| r < 0.0) || state.gamma.iter().any(|&v| v < 0.0) {
        return Err(Error::Domain("state densities must be nonnegative".into()));
    }
    match spec {
        EnergySpec::RelativeEntropy { reference } => {
            if reference.rho.len() != state.rho.len()
                || reference
                    .rho
                    .iter()
                    .zip(&state.rho)
                    .any(|(a, b)| a.len() != b.len())
                || reference.gamma.len() != state.gamma.len()
            {
                return Err(Error::Domain("reference shape does not match the state".into()));
            }
        }
        EnergySpec::Pipes { pipes } => {
            if pipes.len() != space.cells.len() {
                return Err(Error::Domain(format!(
                    "{} pipe parameter sets for {} edges",
                    pipes.len(),
                    space.cells.len()
                )));
            }
        }
        EnergySpec::LogEntropy { potential, interaction } => {
            if potential.len() != space.cells.len()
                || potential
                    .iter()
                    .zip(&space.cells)
                    .any(|(pe, &n)| pe.len() != n)
            {
                return Err(Error::Domain("potential shape does not match the grid".into()));
            }
            if let Some(kernel) = interaction {
                let n: usize = space.cells.iter().sum();
                if kernel.dim() != n {
                    return Err(Error::Domain(format!(
                        "kernel is over {} cells but the grid has {}",
                        kernel.dim(),
                        n
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Evaluate the energy functional on a grid state.
pub fn energy(space: &SpaceGrid, spec: &EnergySpec, state: &GridState) -> Result<f64> {
    check_energy_shapes(space, spec, state)?;
    match spec {
        EnergySpec::RelativeEntropy { reference } => {
            Ok(relative_entropy(state, reference, space))
        }
        EnergySpec::Pipes { pipes } => {
            let mut total = 0.0;
            for (e, pipe) in pipes.iter().enumerate() {
                let dx = space.dx[e];
                let tilt =
                    2.0 * pipe.diameter * pipe.gravity / pipe.friction * pipe.incline.sin();
                for (k, &r) in state.rho[e].iter().enumerate() {
                    let x = (k as f64 + 0.5) * dx;
                    total +=
                        dx * (iso3_entropy_density(r, pipe)? + tilt * x * r + pipe.offset * r);
                }
            }
            Ok(total)
        }
        EnergySpec::LogEntropy { potential, interaction } => {
            let mut total = 0.0;
            for e in 0..space.cells.len() {
                let dx = space.dx[e];
                for (k, &r) in state.rho[e].iter().enumerate() {
                    total += dx * (x_log_x_minus_x(r) + potential[e][k] * r);
                }
            }
            for &v in &state.gamma {
                total += x_log_x_minus_x(v);
            }
            if let Some(kernel) = interaction {
                let masses: Vec<f64> = state
                    .rho
                    .iter()
                    .zip(&space.dx)
                    .flat_map(|(re, &dx)| re.iter().map(move |&r| r * dx))
                    .collect();
                let mut inter = 0.0;
                for (i, &mi) in masses.iter().enumerate() {
                    for (j, &mj) in masses.iter().enumerate() {
                        inter += kernel.values[(i, j)] * mi * mj;
                    }
                }
                total += 0.5 * inter;
            }
            Ok(total)
        }
    }
}

/// Pointwise variational derivative δE/δρ per cell (per unit mass).
fn variational_derivative(
    space: &SpaceGrid,
    spec: &EnergySpec,
    state: &GridState,
) -> Vec<Vec<f64>> {
    let mut u: Vec<Vec<f64>> = space.cells.iter().map(|&n| vec![0.0; n]).collect();
    match spec {
        EnergySpec::RelativeEntropy { reference } => {
            for e in 0..space.cells.len() {
                for k in 0..space.cells[e] {
                    let refv = reference.rho[e][k];
                    u[e][k] = if refv <= 0.0 {
                        0.0
                    } else {
                        (state.rho[e][k].max(GRAD_FLOOR) / refv).ln()
                    };
                }
            }
        }
        EnergySpec::Pipes { pipes } => {
            for (e, pipe) in pipes.iter().enumerate() {
                let dx = space.dx[e];
                let tilt =
                    2.0 * pipe.diameter * pipe.gravity / pipe.friction * pipe.incline.sin();
                for k in 0..space.cells[e] {
                    let x = (k as f64 + 0.5) * dx;
                    u[e][k] = iso3_entropy_slope(state.rho[e][k], pipe) + tilt * x + pipe.offset;
                }
            }
        }
        EnergySpec::LogEntropy { potential, interaction } => {
            for e in 0..space.cells.len() {
                for k in 0..space.cells[e] {
                    u[e][k] = state.rho[e][k].max(GRAD_FLOOR).ln() + potential[e][k];
                }
            }
            if let Some(kernel) = interaction {
                let masses: Vec<f64> = state
                    .rho
                    .iter()
                    .zip(&space.dx)
                    .flat_map(|(re, &dx)| re.iter().map(move |&r| r * dx))
                    .collect();
                let mut idx = 0;
                for ue in u.iter_mut() {
                    for uv in ue.iter_mut() {
                        *uv += masses
                            .iter()
                            .enumerate()
                            .map(|(j, &mj)| kernel.values[(idx, j)] * mj)
                            .sum::<f64>();
                        idx += 1;
                    }
                }
            }
        }
    }
    u
}

/// One explicit conservative micro-step along the flux −ρ·∂x u with
/// donor-cell upwinding and flux-balanced nodes. Advances `state` in place
/// by at most `dt_max`, throttled so no face moves more than a quarter of
/// its donor cell per step; returns the time actually advanced (0 when `u`
/// drives no flux).
fn micro_step(g: &MetricGraph, space: &SpaceGrid, state: &mut GridState, u: &[Vec<f64>], dt_max: f64) -> f64 {
    let ne = space.cells.len();
    // Face fluxes, positive toward the edge head.
    let mut face_flux: Vec<Vec<f64>> = Vec::with_capacity(ne);
    let mut max_rate = 0.0f64;
    for e in 0..ne {
        let n = space.cells[e];
        let dx = space.dx[e];
        let mut fe = vec![0.0; n + 1];
        for f in 1..n {
            let vel = -(u[e][f] - u[e][f - 1]) / dx;
            let donor = if vel > 0.0 { f - 1 } else { f };
            fe[f] = vel * state.rho[e][donor];
            max_rate = max_rate.max(vel.abs() / dx);
        }
        face_flux.push(fe);
    }
    // Node fluxes: mass-weighted node potential, donor-limited sending,
    // received mass split among the pulled edges; the split keeps the net
    // node flux exactly zero.
    for v in 0..g.node_count() {
        let ends = g.incident(v);
        if ends.len() < 2 {
            continue;
        }
        let boundary = |e: usize, side: crate::graph::Side| -> (f64, f64) {
            let k = match side {
                crate::graph::Side::Tail => 0,
                crate::graph::Side::Head => space.cells[e] - 1,
            };
            (state.rho[e][k], u[e][k])
        };
        let mut weight = 0.0;
        let mut mean = 0.0;
        for &(e, side) in ends {
            let (rho_b, u_b) = boundary(e, side);
            weight += rho_b;
            mean += rho_b * u_b;
        }
        if weight <= 0.0 {
            continue;
        }
        let phi = mean / weight;
        let mut sent = 0.0;
        let mut pull = 0.0;
        for &(e, side) in ends {
            let (rho_b, u_b) = boundary(e, side);
            if u_b > phi {
                sent += rho_b * (u_b - phi);
                max_rate = max_rate.max((u_b - phi) / space.dx[e]);
            } else {
                pull += phi - u_b;
            }
        }
        if sent <= 0.0 || pull <= 0.0 {
            continue;
        }
        for &(e, side) in ends {
            let (rho_b, u_b) = boundary(e, side);
            // Flux into the edge across this end.
            let inflow = if u_b > phi {
                -rho_b * (u_b - phi)
            } else {
                sent * (phi - u_b) / pull
            };
            match side {
                crate::graph::Side::Tail => face_flux[e][0] = inflow,
                crate::graph::Side::Head => {
                    let n = space.cells[e];
                    face_flux[e][n] = -inflow;
                }
            }
        }
    }
    if max_rate <= 0.0 {
        return 0.0;
    }
    let alpha = (0.25 / max_rate).min(dt_max);
    for e in 0..ne {
        let dx = space.dx[e];
        for k in 0..space.cells[e] {
            state.rho[e][k] =
                (state.rho[e][k] - alpha / dx * (face_flux[e][k + 1] - face_flux[e][k])).max(0.0);
        }
    }
    alpha
}

/// Integrate the descent flow of potential `spec` plus the frozen per-mass
/// pull `w_pot` for `duration`, re-evaluating the energy part each
/// micro-step. Returns None when the start is already stationary.
fn flow_forward(
    g: &MetricGraph,
    space: &SpaceGrid,
    spec: &EnergySpec,
    w_pot: &[Vec<f64>],
    start: &GridState,
    duration: f64,
) -> Option<GridState> {
    const MAX_MICRO: usize = 20_000;
    let mut state = start.clone();
    let mut t = 0.0;
    let mut moved = false;
    for _ in 0..MAX_MICRO {
        if t >= duration {
            break;
        }
        let mut u = variational_derivative(space, spec, &state);
        for (ue, we) in u.iter_mut().zip(w_pot) {
            for (uv, &wv) in ue.iter_mut().zip(we) {
                *uv += wv;
            }
        }
        let advanced = micro_step(g, space, &mut state, &u, duration - t);
        if advanced <= 0.0 {
            break;
        }
        moved = true;
        t += advanced;
    }
    if !moved {
        return None;
    }
    // The stencil conserves mass up to the positivity clips; pin the total
    // so the transport solver's endpoint check always passes.
    let target = start.total_mass(space);
    let got = state.total_mass(space);
    if got > 0.0 {
        let s = target / got;
        for r in state.rho.iter_mut().flatten() {
            *r *= s;
        }
    }
    Some(state)
}

/// Options for one minimizing-movement step.
#[derive(Debug, Clone)]
pub struct JkoOpts {
    /// Time steps of the inner action grid.
    pub time_steps: usize,
    /// Outer descent iterations.
    pub max_outer: usize,
    /// Initial step as a fraction of the transport stability bound, in
    /// (0, 1]; adapted between iterations.
    pub init_step: f64,
    /// Backtracking halvings per outer iteration.
    pub backtracks: usize,
    pub solver: SolverOpts,
}

impl Default for JkoOpts {
    fn default() -> Self {
        JkoOpts {
            time_steps: 8,
            max_outer: 6,
            init_step: 1.0,
            backtracks: 8,
            solver: SolverOpts::default(),
        }
    }
}

/// Result of one flow step: the new state, its energy, the transport
/// distance W_p(prev, new) paid for the move, and the JKO objective value.
#[derive(Debug, Clone)]
pub struct FlowStep {
    pub state: GridState,
    pub energy: f64,
    pub transport: f64,
    pub objective: f64,
}

/// One minimizing-movement step: approximately minimize
/// W_p(ρ, prev)^p / (p·τ^(p−1)) + E(ρ) by descent from `prev` along
/// transport steps (candidates move mass, they never teleport it), with
/// backtracking on the exactly evaluated objective. Only strict decreases
/// are accepted, so the result never has a larger objective than `prev`.
/// Node masses stay fixed (transport uses the zero-node-mass variant), so
/// states with nonzero node mass are rejected.
pub fn jko_step(
    g: &MetricGraph,
    space: &SpaceGrid,
    prev: &GridState,
    tau: f64,
    p: f64,
    spec: &EnergySpec,
    opts: &JkoOpts,
) -> Result<FlowStep> {
    if tau <= 0.0 {
        return Err(Error::Domain(format!("step length must be positive, got {}", tau)));
    }
    if prev.gamma.iter().any(|&v| v != 0.0) {
        return Err(Error::Domain(
            "flow states carry no node mass; gamma must be zero".into(),
        ));
    }
    let energy_prev = energy(space, spec, prev)?;
    if !energy_prev.is_finite() {
        return Err(Error::Domain("initial state has infinite energy".into()));
    }
    let grid = crate::dynamic::DynGrid::new(space.clone(), opts.time_steps)?;
    let aspec = ActionSpec { p, variant: ActionVariant::Kirchhoff };
    let scale = 1.0 / (p * tau.powf(p - 1.0));

    let mut current = prev.clone();
    let mut f_current = energy_prev;
    let mut transport = 0.0;
    // d(action)/d(terminal ρ) at `current`; zero at prev, where the
    // transport term has its minimum.
    let mut w_grad: Vec<Vec<f64>> = space.cells.iter().map(|&n| vec![0.0; n]).collect();
    let mut frac = opts.init_step.clamp(f64::MIN_POSITIVE, 1.0);
    let mut last_err: Option<Error> = None;
    let mut evaluated = false;

    for _ in 0..opts.max_outer {
        // Per-mass pull of the transport term, converted from cell-density
        // units; frozen along each candidate's integration arc.
        let w_pot: Vec<Vec<f64>> = w_grad
            .iter()
            .enumerate()
            .map(|(e, we)| we.iter().map(|&w| scale * w / space.dx[e]).collect())
            .collect();
        let mut accepted = false;
        for _ in 0..opts.backtracks {
            let cand = match flow_forward(g, space, spec, &w_pot, &current, frac * tau) {
                Some(c) => c,
                None => break,
            };
            match minimize_action(g, &grid, prev, &cand, &aspec, &opts.solver) {
                Ok(sol) => {
                    evaluated = true;
                    let f_cand = scale * sol.action + energy(space, spec, &cand)?;
                    if f_cand < f_current {
                        current = cand;
                        f_current = f_cand;
                        transport = sol.value;
                        w_grad = sol.terminal_gradient;
                        accepted = true;
                        frac = (frac * 1.5).min(1.0);
                        break;
                    }
                }
                // A candidate whose transport cost cannot be certified is
                // rejected like any other failed trial.
                Err(e @ Error::NoConvergence(_)) => last_err = Some(e),
                Err(e) => return Err(e),
            }
            frac *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    if !evaluated {
        if let Some(e) = last_err {
            return Err(e);
        }
    }
    let e_new = energy(space, spec, &current)?;
    Ok(FlowStep {
        state: current,
        energy: e_new,
        transport,
        objective: f_current,
    })
}

/// One row of the flow's energy log.
#[derive(Debug, Clone, Copy)]
pub struct FlowLogEntry {
    pub step: usize,
    pub energy: f64,
    /// Transport distance paid between the previous and this state.
    pub transport: f64,
    pub mass: f64,
}

/// A trajectory of grid states with its energy log.
#[derive(Debug, Clone)]
pub struct FlowResult {
    pub states: Vec<GridState>,
    pub log: Vec<FlowLogEntry>,
}

/// Run `steps` minimizing-movement steps from `initial`. The energy column
/// of the log is non-increasing and the mass column constant, both up to
/// inner-solver tolerance.
#[allow(clippy::too_many_arguments)]
pub fn run_flow(
    g: &MetricGraph,
    space: &SpaceGrid,
    initial: &GridState,
    tau: f64,
    steps: usize,
    p: f64,
    spec: &EnergySpec,
    opts: &JkoOpts,
) -> Result<FlowResult> {
    let mut states = vec![initial.clone()];
    let mut log = vec![FlowLogEntry {
        step: 0,
        energy: energy(space, spec, initial)?,
        transport: 0.0,
        mass: initial.total_mass(space),
    }];
    for s in 1..=steps {
        let out = jko_step(g, space, states.last().unwrap(), tau, p, spec, opts)?;
        log.push(FlowLogEntry {
            step: s,
            energy: out.energy,
            transport: out.transport,
            mass: out.state.total_mass(space),
        });
        states.push(out.state);
    }
    Ok(FlowResult { states, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamic::{simulate_drift_diffusion, ExchangeRates};
    use crate::graph::Edge;
    use approx::assert_abs_diff_eq;

    fn single_edge() -> MetricGraph {
        MetricGraph::new(
            vec!["a".into(), "b".into()],
            vec![Edge { id: "ab".into(), tail: 0, head: 1, length: 1.0, embed: None }],
        )
        .unwrap()
    }

    fn two_edge_path() -> MetricGraph {
        MetricGraph::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![
                Edge { id: "ab".into(), tail: 0, head: 1, length: 1.0, embed: None },
                Edge { id: "bc".into(), tail: 1, head: 2, length: 1.0, embed: None },
            ],
        )
        .unwrap()
    }

    /// Normalized truncated-Gaussian bump on edge `e`.
    fn bump(space: &SpaceGrid, e: usize, center: f64, width: f64, nodes: usize) -> GridState {
        let mut s = GridState::zeros(space, nodes);
        let dx = space.dx[e];
        for k in 0..space.cells[e] {
            let x = (k as f64 + 0.5) * dx;
            let t = (x - center) / width;
            s.rho[e][k] = (-0.5 * t * t).exp();
        }
        let m = s.total_mass(space);
        for r in s.rho.iter_mut().flatten() {
            *r /= m;
        }
        s
    }

    #[test]
    fn pressure_law_rejects_bad_parameters() {
        assert!(PressureLaw::new(1.0, 0.5).is_err());
        assert!(PressureLaw::new(-1.0, 2.0).is_err());
        assert!(PressureLaw::new(0.0, 1.0).is_ok());
        let pipe = PipeParams {
            pressure: PressureLaw { coeff: 1.0, exponent: 0.5 },
            ..PipeParams::quadratic()
        };
        assert!(matches!(iso3_entropy_density(1.0, &pipe), Err(Error::Domain(_))));
        assert!(matches!(
            iso3_entropy_density(-0.1, &PipeParams::quadratic()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn entropy_density_closed_forms() {
        // p(ρ) = ρ² with 2D/λ = 1 integrates twice to exactly ρ².
        let quad = PipeParams::quadratic();
        assert_abs_diff_eq!(iso3_entropy_density(0.7, &quad).unwrap(), 0.49, epsilon = 1e-15);
        assert_eq!(iso3_entropy_density(0.0, &quad).unwrap(), 0.0);
        // Isothermal case: ρ ln ρ − ρ under the F'(1) = 0 normalization.
        let iso = PipeParams {
            pressure: PressureLaw { coeff: 1.0, exponent: 1.0 },
            ..PipeParams::quadratic()
        };
        assert_abs_diff_eq!(
            iso3_entropy_density(0.5, &iso).unwrap(),
            0.5 * 0.5f64.ln() - 0.5,
            epsilon = 1e-15
        );
        assert_eq!(iso3_entropy_density(0.0, &iso).unwrap(), 0.0);
    }

    #[test]
    fn entropy_density_curvature_matches_pressure_law() {
        // Second finite difference of F reproduces (2D/λ)·p'(ρ)/ρ.
        let cases = [
            (1.0, 1.0, 0.5, 1.0),
            (0.7, 1.5, 1.0, 2.0),
            (1.0, 2.0, 1.0, 1.0),
            (2.0, 3.0, 0.3, 0.8),
        ];
        for &(c, kappa, diameter, friction) in &cases {
            let pipe = PipeParams {
                diameter,
                friction,
                pressure: PressureLaw { coeff: c, exponent: kappa },
                ..PipeParams::quadratic()
            };
            let h = 1e-4;
            for i in 0..20 {
                let rho = 0.1 + 1.9 * i as f64 / 19.0;
                let f = |r: f64| iso3_entropy_density(r, &pipe).unwrap();
                let fd = (f(rho + h) - 2.0 * f(rho) + f(rho - h)) / (h * h);
                let exact =
                    2.0 * diameter / friction * c * kappa * rho.powf(kappa - 1.0) / rho;
                assert!(
                    (fd - exact).abs() <= 1e-4 * exact.abs(),
                    "F'' mismatch at ρ={} κ={}: {} vs {}",
                    rho,
                    kappa,
                    fd,
                    exact
                );
            }
        }
        // Isothermal curvature at ρ = 0.5 with 2D/λ = 1 is 1/ρ = 2.
        let iso = PipeParams {
            pressure: PressureLaw { coeff: 1.0, exponent: 1.0 },
            ..PipeParams::quadratic()
        };
        let h = 1e-4;
        let f = |r: f64| iso3_entropy_density(r, &iso).unwrap();
        let fd = (f(0.5 + h) - 2.0 * f(0.5) + f(0.5 - h)) / (h * h);
        assert_abs_diff_eq!(fd, 2.0, epsilon = 2e-4);
    }

    #[test]
    fn energy_examples() {
        let g = single_edge();
        let space = SpaceGrid::uniform(&g, 16).unwrap();
        // Relative entropy vanishes exactly at the reference.
        let state = bump(&space, 0, 0.5, 0.2, g.node_count());
        let spec = EnergySpec::RelativeEntropy { reference: state.clone() };
        assert_eq!(energy(&space, &spec, &state).unwrap(), 0.0);

        // Uniform density on a level unit pipe with F(ρ) = ρ²: ∫ρ̄² = ρ̄².
        let mut uniform = GridState::zeros(&space, g.node_count());
        for r in uniform.rho[0].iter_mut() {
            *r = 0.8;
        }
        let pipes = EnergySpec::Pipes { pipes: vec![PipeParams::quadratic()] };
        assert_abs_diff_eq!(energy(&space, &pipes, &uniform).unwrap(), 0.64, epsilon = 1e-12);
        // The midpoint rule is exact for the linear tilt term: a vertical
        // pipe with 2Dg/λ = 1 adds ∫ x ρ̄ dx = ρ̄/2.
        let tilted = EnergySpec::Pipes {
            pipes: vec![PipeParams {
                incline: std::f64::consts::FRAC_PI_2,
                ..PipeParams::quadratic()
            }],
        };
        assert_abs_diff_eq!(energy(&space, &tilted, &uniform).unwrap(), 1.04, epsilon = 1e-12);
        // The closed form is grid-independent for constant densities.
        let fine = SpaceGrid::uniform(&g, 64).unwrap();
        let mut uniform_fine = GridState::zeros(&fine, g.node_count());
        for r in uniform_fine.rho[0].iter_mut() {
            *r = 0.8;
        }
        assert_abs_diff_eq!(
            energy(&fine, &pipes, &uniform_fine).unwrap(),
            0.64,
            epsilon = 1e-12
        );

        // A zero interaction kernel contributes nothing.
        let n: usize = space.cells.iter().sum();
        let zero = InteractionKernel::from_matrix(Array2::zeros((n, n))).unwrap();
        let plain = EnergySpec::LogEntropy { potential: vec![vec![0.0; 16]], interaction: None };
        let with_zero = EnergySpec::LogEntropy {
            potential: vec![vec![0.0; 16]],
            interaction: Some(zero),
        };
        assert_eq!(
            energy(&space, &plain, &state).unwrap(),
            energy(&space, &with_zero, &state).unwrap()
        );
        // A constant kernel integrates to ½·c·mass².
        let flat = InteractionKernel::from_fn(&space, |_, _| 3.0).unwrap();
        let with_flat = EnergySpec::LogEntropy {
            potential: vec![vec![0.0; 16]],
            interaction: Some(flat),
        };
        assert_abs_diff_eq!(
            energy(&space, &with_flat, &state).unwrap() - energy(&space, &plain, &state).unwrap(),
            1.5,
            epsilon = 1e-10
        );

        let mut negative = state.clone();
        negative.rho[0][3] = -0.1;
        assert!(matches!(energy(&space, &plain, &negative), Err(Error::Domain(_))));
    }

    #[test]
    fn interaction_kernel_requires_symmetry() {
        let mut m = Array2::zeros((3, 3));
        m[(0, 1)] = 1.0;
        assert!(matches!(InteractionKernel::from_matrix(m), Err(Error::Domain(_))));
        let g = single_edge();
        let space = SpaceGrid::uniform(&g, 4).unwrap();
        assert!(InteractionKernel::from_fn(&space, |(_, x), (_, y)| (x - y).abs()).is_ok());
        assert!(InteractionKernel::from_fn(&space, |(_, x), (_, y)| x - y).is_err());
    }

    #[test]
    fn constant_energy_returns_prev() {
        let g = single_edge();
        let space = SpaceGrid::uniform(&g, 12).unwrap();
        let prev = bump(&space, 0, 0.4, 0.15, g.node_count());
        // Zero pressure coefficient, level pipe, no offset: E ≡ 0.
        let spec = EnergySpec::Pipes {
            pipes: vec![PipeParams {
                pressure: PressureLaw { coeff: 0.0, exponent: 2.0 },
                ..PipeParams::quadratic()
            }],
        };
        let out = jko_step(&g, &space, &prev, 0.1, 2.0, &spec, &JkoOpts::default()).unwrap();
        assert_eq!(out.state, prev);
        assert_eq!(out.transport, 0.0);
        assert_eq!(out.objective, 0.0);
    }

    #[test]
    fn log_entropy_step_moves_toward_uniform() {
        let g = single_edge();
        let space = SpaceGrid::uniform(&g, 16).unwrap();
        let prev = bump(&space, 0, 0.5, 0.12, g.node_count());
        let spec = EnergySpec::LogEntropy { potential: vec![vec![0.0; 16]], interaction: None };
        let e_prev = energy(&space, &spec, &prev).unwrap();
        let out = jko_step(&g, &space, &prev, 0.05, 2.0, &spec, &JkoOpts::default()).unwrap();
        assert!(out.energy < e_prev, "energy {} should drop below {}", out.energy, e_prev);
        // The JKO objective at prev is E(prev) since the transport term
        // vanishes there; descent must beat it.
        assert!(out.objective <= e_prev + 1e-6);
        let dist_to_uniform = |s: &GridState| -> f64 {
            s.rho[0].iter().map(|&r| (r - 1.0).abs()).sum::<f64>() / 16.0
        };
        assert!(dist_to_uniform(&out.state) < dist_to_uniform(&prev));
        assert_abs_diff_eq!(out.state.total_mass(&space), 1.0, epsilon = 1e-10);
        assert!(out.state.rho.iter().flatten().all(|&r| r >= 0.0));
    }

    #[test]
    fn heat_flow_matches_explicit_diffusion() {
        // The gradient flow of ∫ρ ln ρ − ρ in the quadratic transport
        // distance is the heat equation; the explicit simulator is the
        // oracle.
        let g = single_edge();
        let space = SpaceGrid::uniform(&g, 16).unwrap();
        let init = bump(&space, 0, 0.5, 0.12, g.node_count());
        let horizon = 0.05;
        let spec = EnergySpec::LogEntropy { potential: vec![vec![0.0; 16]], interaction: None };
        let opts = JkoOpts { max_outer: 10, ..JkoOpts::default() };
        let flow = run_flow(&g, &space, &init, horizon / 4.0, 4, 2.0, &spec, &opts).unwrap();

        let pde = simulate_drift_diffusion(
            &g,
            &space,
            &ExchangeRates::zeros(1),
            &[1.0],
            None,
            horizon / 64.0,
            64,
            &init,
        )
        .unwrap();
        let target = &pde.last().unwrap().rho[0];
        let got = &flow.states.last().unwrap().rho[0];
        let l1: f64 = got
            .iter()
            .zip(target)
            .map(|(&a, &b)| (a - b).abs() * space.dx[0])
            .sum();
        assert!(l1 <= 0.05, "L1 gap to the diffusion oracle is {}", l1);
        for pair in flow.log.windows(2) {
            assert!(pair[1].energy <= pair[0].energy + 1e-6);
            assert_abs_diff_eq!(pair[1].mass, 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn cubic_flow_on_two_edges_is_monotone() {
        let g = two_edge_path();
        let space = SpaceGrid::uniform(&g, 10).unwrap();
        let init = bump(&space, 0, 0.6, 0.2, g.node_count());
        let spec = EnergySpec::Pipes {
            pipes: vec![PipeParams::quadratic(), PipeParams::quadratic()],
        };
        let opts = JkoOpts { time_steps: 6, max_outer: 4, ..JkoOpts::default() };
        let flow = run_flow(&g, &space, &init, 0.05, 10, 3.0, &spec, &opts).unwrap();
        assert_eq!(flow.states.len(), 11);
        for pair in flow.log.windows(2) {
            assert!(
                pair[1].energy <= pair[0].energy + 1e-6,
                "energy rose: {} -> {}",
                pair[0].energy,
                pair[1].energy
            );
            assert_abs_diff_eq!(pair[1].mass, 1.0, epsilon = 1e-8);
        }
        for s in &flow.states {
            assert!(s.rho.iter().flatten().all(|&r| r >= 0.0));
        }
    }

    #[test]
    fn cubic_flow_approaches_constant_density() {
        // With a level pipe and v = 0 the steady state of the cubic flow
        // has ∂x p(ρ) = 0, i.e. constant density.
        let g = single_edge();
        let space = SpaceGrid::uniform(&g, 12).unwrap();
        let init = bump(&space, 0, 0.5, 0.15, g.node_count());
        let spec = EnergySpec::Pipes { pipes: vec![PipeParams::quadratic()] };
        let opts = JkoOpts { time_steps: 6, max_outer: 4, ..JkoOpts::default() };
        let flow = run_flow(&g, &space, &init, 0.1, 10, 3.0, &spec, &opts).unwrap();
        let spread = |s: &GridState| -> f64 {
            s.rho[0]
                .iter()
                .fold(0.0f64, |m, &r| m.max((r - 1.0).abs()))
        };
        let before = spread(&flow.states[0]);
        let after = spread(flow.states.last().unwrap());
        assert!(
            after < 0.5 * before,
            "density spread only moved {} -> {}",
            before,
            after
        );
    }

    #[test]
    fn zero_step_flow_returns_initial() {
        let g = single_edge();
        let space = SpaceGrid::uniform(&g, 8).unwrap();
        let init = bump(&space, 0, 0.5, 0.2, g.node_count());
        let spec = EnergySpec::LogEntropy { potential: vec![vec![0.0; 8]], interaction: None };
        let flow =
            run_flow(&g, &space, &init, 0.1, 0, 2.0, &spec, &JkoOpts::default()).unwrap();
        assert_eq!(flow.states.len(), 1);
        assert_eq!(flow.states[0], init);
        assert_eq!(flow.log.len(), 1);
        assert_eq!(flow.log[0].transport, 0.0);
    }
}
