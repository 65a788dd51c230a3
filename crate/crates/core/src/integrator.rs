//! Third-order TVD Runge-Kutta stepping with a single limited update per step.
//!
//! The three stage fluxes are combined into the effective flux
//! `G* = G0/6 + G1/6 + 2 G2/3`, which the limiter blends with the
//! first-order flux of the step's initial state.

use serde::{Deserialize, Serialize};

use crate::bp::{self, DomainMode, InvariantBox, LimiterInput, LimiterStats};
use crate::error::{Error, Result};
use crate::fo_scheme;
use crate::mesh::{self, Boundary, MovingState, PositionUpdate};
use crate::model::{ConservedCell, ModelSpec, Primitive};
use crate::weno;

pub const DEFAULT_CFL: f64 = 0.6;
pub const STEP_SAFETY: f64 = 0.99;
/// Below this fraction of the CFL step the BP bound triggers a first-order step.
pub const RESCUE_RATIO: f64 = 1e-2;
/// Below this fraction of the CFL step a run is declared stalled.
pub const STALL_RATIO: f64 = 1e-12;
const SPEED_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepPlan {
    pub d_tau: f64,
    pub lambda: f64,
    pub d_xi: f64,
    pub cfl: f64,
    pub cfl_bound: f64,
    /// First-order BP bound, when boxes were given.
    pub bp_bound: Option<f64>,
}

impl StepPlan {
    /// Same plan with a different step, e.g. the shared step of a network.
    pub fn with_d_tau(&self, d_tau: f64) -> StepPlan {
        StepPlan { d_tau, lambda: d_tau / self.d_xi, ..*self }
    }

    /// The BP bound is so far below the CFL step that a first-order step is taken instead.
    pub fn needs_rescue(&self) -> bool {
        self.bp_bound.is_some_and(|b| b < RESCUE_RATIO * self.cfl_bound)
    }
}

/// `min_j cfl d_xi / (max|lambda| + |c|)` with `c = v`.
pub fn cfl_dtau(model: &ModelSpec, prims: &[Primitive], d_xi: f64, cfl: f64) -> f64 {
    prims
        .iter()
        .map(|p| cfl * d_xi / (model.max_speed(p) + p.v.abs()).max(SPEED_FLOOR))
        .fold(f64::INFINITY, f64::min)
}

/// Step size for the next step.
///
/// With `boxes` the first-order bound-preserving bounds enter the minimum;
/// without them only the CFL condition applies. `remaining` truncates the
/// step onto the final time.
pub fn plan_step(
    state: &MovingState,
    model: &ModelSpec,
    boundary: &Boundary,
    d_xi: f64,
    cfl: f64,
    boxes: Option<&[InvariantBox]>,
    remaining: f64,
) -> Result<StepPlan> {
    if state.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let prims = state.primitives(model)?;
    let cfl_bound = cfl_dtau(model, &prims, d_xi, cfl);
    let bp_bound = match boxes {
        Some(boxes) => {
            let v = fo_scheme::speeds_with_right_ghost(&prims, boundary);
            Some(fo_scheme::bp_max_dtau_from(model, state, &prims, &v, d_xi, boxes))
        }
        None => None,
    };
    let bound = bp_bound.map_or(cfl_bound, |b| b.min(cfl_bound));
    let d_tau = (STEP_SAFETY * bound).min(remaining);
    Ok(StepPlan { d_tau, lambda: d_tau / d_xi, d_xi, cfl, cfl_bound, bp_bound })
}

fn right_index(n: usize, j: usize, periodic: bool) -> usize {
    if periodic && j + 1 == n {
        0
    } else {
        j + 1
    }
}

/// `U - lambda (F_{j+1/2} - F_{j-1/2})` node by node.
fn euler_update(cells: &[ConservedCell], flux: &[[f64; 3]], lambda: f64, periodic: bool) -> Vec<ConservedCell> {
    let n = cells.len();
    cells
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let (l, r) = (flux[j], flux[right_index(n, j, periodic)]);
            ConservedCell::new(
                c.j_phi - lambda * (r[0] - l[0]),
                c.j_y - lambda * (r[1] - l[1]),
                c.jac - lambda * (r[2] - l[2]),
            )
        })
        .collect()
}

/// Relative widening of the step-start invariant hull used to tame stage states.
const STAGE_HULL_MARGIN: f64 = 0.05;

/// Ranges of `v` and `k` over a set of primitives, widened by `STAGE_HULL_MARGIN`.
#[derive(Debug, Clone, Copy)]
struct StageHull {
    v: (f64, f64),
    k: (f64, f64),
}

impl StageHull {
    fn of(prims: &[Primitive]) -> Self {
        let range = |f: fn(&Primitive) -> f64| {
            let (lo, hi) = prims.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            let pad = STAGE_HULL_MARGIN * (hi - lo) + 1e-12 * lo.abs().max(hi.abs()).max(1.0);
            (lo - pad, hi + pad)
        };
        Self { v: range(|p| p.v), k: range(|p| p.k) }
    }
}

/// Stage primitives. Stage states are unlimited, so near vacuum their
/// invariants can be meaningless: they are clamped into the step-start hull,
/// and a stage with non-positive `J` reuses the step-start primitive.
fn stage_primitives(model: &ModelSpec, cells: &[ConservedCell], base: &[Primitive], hull: &StageHull) -> Vec<Primitive> {
    cells
        .iter()
        .zip(base)
        .map(|(c, b)| match model.primitive_for_flux(c) {
            Ok(p) => Primitive { phi: p.phi, v: p.v.clamp(hull.v.0, hull.v.1), k: p.k.clamp(hull.k.0, hull.k.1) },
            Err(_) => *b,
        })
        .collect()
}

fn stage_fluxes(model: &ModelSpec, cells: &[ConservedCell], prims: Vec<Primitive>, boundary: &Boundary) -> (Vec<[f64; 3]>, Vec<f64>) {
    let speeds = prims.iter().map(|p| p.v).collect();
    let (ext_cells, ext_prims) = mesh::extend_states(cells, &prims, boundary);
    (weno::weno5_from_extended(model, &ext_cells, &ext_prims), speeds)
}

/// Effective flux and first-order flux of one step, plus the stage speeds.
#[derive(Debug, Clone)]
pub struct StepFluxes {
    pub high: Vec<[f64; 3]>,
    pub low: Vec<[f64; 3]>,
    pub stage_speeds: [Vec<f64>; 3],
}

pub fn step_fluxes(state: &MovingState, model: &ModelSpec, boundary: &Boundary, lambda: f64) -> Result<StepFluxes> {
    let periodic = boundary.is_periodic();
    let u0 = &state.cells;
    let p0: Vec<Primitive> = u0.iter().map(|c| model.primitive_for_flux(c)).collect::<Result<_>>()?;
    let hull = StageHull::of(&p0);
    let (f0, c0) = stage_fluxes(model, u0, p0.clone(), boundary);
    let u1 = euler_update(u0, &f0, lambda, periodic);
    let (f1, c1) = stage_fluxes(model, &u1, stage_primitives(model, &u1, &p0, &hull), boundary);
    let f01: Vec<[f64; 3]> = f0.iter().zip(&f1).map(|(a, b)| [0, 1, 2].map(|i| a[i] + b[i])).collect();
    let u2 = euler_update(u0, &f01, 0.25 * lambda, periodic);
    let (f2, c2) = stage_fluxes(model, &u2, stage_primitives(model, &u2, &p0, &hull), boundary);
    let high = (0..f0.len())
        .map(|i| [0, 1, 2].map(|m| f0[i][m] / 6.0 + f1[i][m] / 6.0 + 2.0 * f2[i][m] / 3.0))
        .collect();
    let prims = state.primitives(model)?;
    let low = fo_scheme::first_order_fluxes(&fo_scheme::speeds_with_right_ghost(&prims, boundary));
    Ok(StepFluxes { high, low, stage_speeds: [c0, c1, c2] })
}

/// Result of one step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: MovingState,
    pub theta: Vec<f64>,
    pub limiter: LimiterStats,
    /// Nodes moved by the position repair.
    pub repaired_nodes: usize,
}

/// One RK3 step. With `boxes` the update is limited into them; without, `theta = 1`.
pub fn rk3_step(
    state: &MovingState,
    model: &ModelSpec,
    boundary: &Boundary,
    plan: &StepPlan,
    boxes: Option<&[InvariantBox]>,
    positions: PositionUpdate,
) -> Result<StepOutcome> {
    let periodic = boundary.is_periodic();
    let fl = step_fluxes(state, model, boundary, plan.lambda)?;
    let n = state.len();
    let (theta, limiter) = match boxes {
        Some(boxes) => {
            let input = LimiterInput {
                model,
                cells: &state.cells,
                high: &fl.high,
                low: &fl.low,
                lambda: plan.lambda,
                boxes,
                periodic,
            };
            let field = bp::select_theta(&input)?;
            (field.theta, field.stats)
        }
        None => (vec![1.0; n + 1], LimiterStats::default()),
    };
    let input = LimiterInput {
        model,
        cells: &state.cells,
        high: &fl.high,
        low: &fl.low,
        lambda: plan.lambda,
        boxes: &[],
        periodic,
    };
    let cells = input.apply(&theta);
    let mut x_pos = state.x_pos.clone();
    match positions {
        PositionUpdate::Rk3 => {
            // Node speeds follow the limiter: where either adjacent interface is
            // limited the RK3 combination is blended back toward v^n.
            let [c0, c1, c2] = &fl.stage_speeds;
            for (j, x) in x_pos.iter_mut().enumerate() {
                let w = theta[j].min(theta[j + 1]);
                let high = (c0[j] + c1[j] + 4.0 * c2[j]) / 6.0;
                *x += plan.d_tau * (w * high + (1.0 - w) * c0[j]);
            }
        }
        PositionUpdate::ForwardEuler => mesh::advance_positions(&mut x_pos, &[&fl.stage_speeds[0]], plan.d_tau),
    }
    let jac: Vec<f64> = cells.iter().map(|c| c.jac).collect();
    let repaired = mesh::repair_positions(&mut x_pos, &jac, plan.d_xi);
    let next = MovingState { cells, x_pos, tau: state.tau + plan.d_tau, step_index: state.step_index + 1 };
    Ok(StepOutcome { state: next, theta, limiter, repaired_nodes: repaired })
}

/// Plain first-order step: every `theta = 0`, positions moved with `v^n`.
pub fn first_order_step(state: &MovingState, model: &ModelSpec, boundary: &Boundary, plan: &StepPlan) -> Result<StepOutcome> {
    let prims = state.primitives(model)?;
    let v = fo_scheme::speeds_with_right_ghost(&prims, boundary);
    let next = fo_scheme::fo_step_unchecked(state, &v, plan.d_xi, plan.d_tau);
    let interfaces = if boundary.is_periodic() { state.len() } else { state.len() + 1 };
    let limiter = LimiterStats { limited_interfaces: interfaces, ..LimiterStats::default() };
    Ok(StepOutcome { state: next, theta: vec![0.0; state.len() + 1], limiter, repaired_nodes: 0 })
}

/// First node whose density is not positive, if any.
pub fn check_density(state: &MovingState) -> Result<()> {
    for (node, c) in state.cells.iter().enumerate() {
        if !(c.j_phi > 0.0) {
            return Err(Error::NegativeDensity { node, value: c.j_phi, step: state.step_index });
        }
        if !(c.jac > 0.0) {
            return Err(Error::domain("jac", c.jac));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub cfl: f64,
    pub limiter: bool,
    pub positions: PositionUpdate,
    pub global: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { cfl: DEFAULT_CFL, limiter: true, positions: PositionUpdate::Rk3, global: false }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub steps: usize,
    pub interfaces: usize,
    pub limited_interfaces: usize,
    pub step3_iterations: usize,
    pub fallbacks: usize,
    pub repaired_nodes: usize,
    /// Steps taken with the first-order scheme because the BP bound collapsed.
    pub rescue_steps: usize,
}

impl RunStats {
    pub fn theta_lt1_fraction(&self) -> f64 {
        if self.interfaces == 0 {
            0.0
        } else {
            self.limited_interfaces as f64 / self.interfaces as f64
        }
    }
}

/// What one accepted step looked like, for monitors.
#[derive(Debug, Clone)]
pub struct StepRecord<'a> {
    pub previous: &'a MovingState,
    pub state: &'a MovingState,
    /// Boxes the step was limited into; `None` for unlimited steps.
    pub boxes: Option<&'a [InvariantBox]>,
    pub d_tau: f64,
    pub limiter: LimiterStats,
}

/// Boxes and plan of a step that has not been taken yet.
#[derive(Debug, Clone)]
pub struct PreparedStep {
    pub plan: StepPlan,
    pub boxes: Option<Vec<InvariantBox>>,
}

/// Single-domain solver.
#[derive(Debug, Clone)]
pub struct Solver {
    pub model: ModelSpec,
    pub boundary: Boundary,
    pub d_xi: f64,
    pub options: SolverOptions,
    pub mode: DomainMode,
    pub state: MovingState,
    pub stats: RunStats,
}

impl Solver {
    pub fn new(model: ModelSpec, boundary: Boundary, d_xi: f64, state: MovingState, options: SolverOptions) -> Result<Self> {
        let mode = DomainMode::seeded(options.global, &state, &model, &boundary)?;
        Ok(Self { model, boundary, d_xi, options, mode, state, stats: RunStats::default() })
    }

    /// Widen the local-mode envelope, e.g. with the range of the continuous initial data between nodes.
    pub fn widen_envelope(&mut self, data: &InvariantBox) {
        if let DomainMode::Local { envelope } = self.mode {
            self.mode = DomainMode::Local { envelope: envelope.hull(data) };
        }
    }

    /// Boxes and step plan for the next step, not beyond `t_final`.
    pub fn prepare(&mut self, t_final: f64) -> Result<PreparedStep> {
        let boxes = if self.options.limiter {
            Some(bp::boxes_for_step(&mut self.mode, &self.state, &self.model, &self.boundary)?)
        } else {
            None
        };
        let plan = plan_step(
            &self.state,
            &self.model,
            &self.boundary,
            self.d_xi,
            self.options.cfl,
            boxes.as_deref(),
            t_final - self.state.tau,
        )?;
        Ok(PreparedStep { plan, boxes })
    }

    /// Take a prepared step. Returns the step size and the boxes used, if limited.
    pub fn advance(&mut self, prepared: PreparedStep, t_final: f64) -> Result<(f64, Option<Vec<InvariantBox>>, LimiterStats)> {
        let PreparedStep { plan, boxes } = prepared;
        if plan.d_tau < STALL_RATIO * plan.cfl_bound && plan.d_tau < t_final - self.state.tau {
            return Err(Error::Stalled { tau: self.state.tau, d_tau: plan.d_tau });
        }
        let out = if plan.needs_rescue() {
            self.stats.rescue_steps += 1;
            first_order_step(&self.state, &self.model, &self.boundary, &plan)?
        } else {
            rk3_step(&self.state, &self.model, &self.boundary, &plan, boxes.as_deref(), self.options.positions)?
        };
        if !self.options.limiter {
            check_density(&out.state)?;
        }
        self.stats.steps += 1;
        self.stats.interfaces += if self.boundary.is_periodic() { self.state.len() } else { self.state.len() + 1 };
        self.stats.limited_interfaces += out.limiter.limited_interfaces;
        self.stats.step3_iterations += out.limiter.step3_iterations;
        self.stats.fallbacks += out.limiter.fallbacks;
        self.stats.repaired_nodes += out.repaired_nodes;
        if t_final - out.state.tau <= end_tolerance(t_final) {
            let mut s = out.state;
            s.tau = t_final;
            self.state = s;
        } else {
            self.state = out.state;
        }
        Ok((plan.d_tau, boxes, out.limiter))
    }

    /// Advance one step, not beyond `t_final`. Returns the boxes used, if limited.
    pub fn step(&mut self, t_final: f64) -> Result<(f64, Option<Vec<InvariantBox>>, LimiterStats)> {
        let prepared = self.prepare(t_final)?;
        self.advance(prepared, t_final)
    }

    /// Step to `t_final`, calling `observer` after each accepted step.
    pub fn run_to<F>(&mut self, t_final: f64, mut observer: F) -> Result<()>
    where
        F: FnMut(&StepRecord) -> Result<()>,
    {
        while t_final - self.state.tau > end_tolerance(t_final) {
            let previous = self.state.clone();
            let (d_tau, boxes, limiter) = self.step(t_final)?;
            observer(&StepRecord { previous: &previous, state: &self.state, boxes: boxes.as_deref(), d_tau, limiter })?;
        }
        Ok(())
    }
}

pub fn end_tolerance(t_final: f64) -> f64 {
    1e-13 * t_final.abs().max(1.0)
}
