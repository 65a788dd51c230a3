//! Experiment catalog, bound monitors, convergence and conservation studies,
//! and the fixed-mesh counterexample.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bp::{self, InvariantBox, VERIFY_TOL};
use crate::error::{Error, Result};
use crate::fo_scheme;
use crate::integrator::{self, RunStats, Solver, SolverOptions, DEFAULT_CFL};
pub use crate::mesh::lagrange_eval;
use crate::mesh::{init_state, Boundary, Grid1D, MovingState, PositionUpdate};
use crate::model::{ConservedCell, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialCondition {
    /// `phi = 0.5`, `v = 0.1 + 0.4 cos(2 pi xi)`.
    SmoothCosine,
    /// `(0.6, 0.6)` on `[-0.2, 0.2]`, `(0.5, 0.6)` elsewhere.
    PeriodicPulse,
    /// Constant density with a modulated speed bump on `(0.5, 3.5)`.
    SedimentationWave,
    Riemann { phi_l: f64, v_l: f64, phi_r: f64, v_r: f64 },
    /// Contact at `-0.05` followed by a 1-wave at `0.05`.
    ThreeState,
}

impl InitialCondition {
    pub fn eval(&self, xi: f64) -> (f64, f64) {
        use std::f64::consts::PI;
        match *self {
            InitialCondition::SmoothCosine => (0.5, 0.1 + 0.4 * (2.0 * PI * xi).cos()),
            InitialCondition::PeriodicPulse => {
                if (-0.2..=0.2).contains(&xi) {
                    (0.6, 0.6)
                } else {
                    (0.5, 0.6)
                }
            }
            InitialCondition::SedimentationWave => {
                let v = if xi <= 0.5 || xi >= 3.5 {
                    0.1
                } else {
                    let s = (3.5 - xi) * (xi - 0.5);
                    0.1 + 0.01 * s * (10.0 * PI * s).sin()
                };
                (0.4, v)
            }
            InitialCondition::Riemann { phi_l, v_l, phi_r, v_r } => {
                if xi < 0.0 {
                    (phi_l, v_l)
                } else {
                    (phi_r, v_r)
                }
            }
            InitialCondition::ThreeState => {
                if xi < -0.05 {
                    (0.4762, 0.092)
                } else if xi <= 0.05 {
                    (0.2, 0.092)
                } else {
                    (0.4, 0.036)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshKind {
    #[default]
    Moving,
    /// Eulerian first-order Lax-Friedrichs on a fixed grid.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    #[default]
    High,
    /// First-order moving-mesh scheme at the certified step.
    First,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub model: ModelSpec,
    pub initial: InitialCondition,
    pub xi_left: f64,
    pub xi_right: f64,
    pub periodic: bool,
    pub n: usize,
    pub cfl: f64,
    pub t_final: f64,
    pub global: bool,
    pub limiter: bool,
    pub mesh: MeshKind,
    pub order: Order,
    pub positions: PositionUpdate,
    /// With `Some(n0)`, runs finer than `n0` shrink the CFL number by
    /// `(n0 / n)^(2/3)`, so `d_tau ~ d_xi^(5/3)` and the third-order time error
    /// stays below the fifth-order spatial error under refinement.
    #[serde(default)]
    pub time_refinement: Option<usize>,
}

impl ExperimentSpec {
    fn base(name: &str, model: ModelSpec, initial: InitialCondition, domain: (f64, f64), periodic: bool, t_final: f64) -> Self {
        Self {
            name: name.to_string(),
            model,
            initial,
            xi_left: domain.0,
            xi_right: domain.1,
            periodic,
            n: 500,
            cfl: DEFAULT_CFL,
            t_final,
            global: false,
            limiter: true,
            mesh: MeshKind::Moving,
            order: Order::High,
            positions: PositionUpdate::Rk3,
            time_refinement: None,
        }
    }

    pub fn with_time_refinement(mut self, base_n: Option<usize>) -> Self {
        self.time_refinement = base_n;
        self
    }

    /// CFL number after the optional time refinement.
    pub fn effective_cfl(&self) -> f64 {
        match self.time_refinement {
            Some(base) if self.n > base => self.cfl * (base as f64 / self.n as f64).powf(2.0 / 3.0),
            _ => self.cfl,
        }
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn with_limiter(mut self, on: bool) -> Self {
        self.limiter = on;
        self
    }

    pub fn with_global(mut self, on: bool) -> Self {
        self.global = on;
        self
    }

    /// Padded `(v, k)` range of the initial condition sampled at `DATA_SAMPLES` points per cell.
    pub fn data_box(&self) -> Result<InvariantBox> {
        let total = self.n * DATA_SAMPLES;
        let h = (self.xi_right - self.xi_left) / total as f64;
        let (mut v, mut k) = (Vec::with_capacity(total + 1), Vec::with_capacity(total + 1));
        for i in 0..=total {
            let (phi, vi) = self.initial.eval(self.xi_left + i as f64 * h);
            v.push(vi);
            k.push(self.model.k_from_phi_v(phi, vi)?);
        }
        Ok(bp::nodal_box(&v, &k))
    }

    pub fn grid(&self) -> Result<Grid1D> {
        Grid1D::new(self.xi_left, self.xi_right, self.n)
    }

    pub fn boundary(&self) -> Boundary {
        if self.periodic {
            Boundary::Periodic { period: self.xi_right - self.xi_left }
        } else {
            Boundary::Outflow
        }
    }

    pub fn initial_state(&self) -> Result<MovingState> {
        let ic = self.initial;
        init_state(&self.grid()?, &self.model, |x| ic.eval(x).0, |x| ic.eval(x).1)
    }
}

/// Initial-condition samples per cell for [`ExperimentSpec::data_box`].
pub const DATA_SAMPLES: usize = 16;

/// Names accepted by [`catalog`].
pub const CATALOG: [&str; 9] = ["smooth", "pulse", "settling", "riemann1", "riemann2", "riemann3", "riemann4", "riemann5", "three_state"];

/// Single-road experiments by name.
pub fn catalog(name: &str) -> Result<ExperimentSpec> {
    let riemann = |phi_l, v_l, phi_r, v_r| InitialCondition::Riemann { phi_l, v_l, phi_r, v_r };
    let arz = |gamma: f64, v_ref: f64| ModelSpec::arz(gamma, v_ref);
    let sed = ModelSpec::Sedimentation;
    let unit = (-1.0, 1.0);
    Ok(match name {
        "smooth" => ExperimentSpec::base(name, arz(0.0, 0.4)?, InitialCondition::SmoothCosine, (0.0, 1.0), true, 0.1).with_n(320),
        "pulse" => ExperimentSpec::base(name, arz(2.0, 1.0)?, InitialCondition::PeriodicPulse, (-2.0, 2.0), true, 1.0),
        "settling" => ExperimentSpec::base(name, sed, InitialCondition::SedimentationWave, (0.0, 4.0), false, 1.0),
        "riemann1" => ExperimentSpec::base(name, arz(2.0, 1.0)?, riemann(0.8, 0.4, 0.1, 0.4), unit, false, 1.0),
        "riemann2" => ExperimentSpec::base(name, arz(1.0, 1.0)?, riemann(0.5, 0.1, 1e-8, 0.4), unit, false, 1.0),
        "riemann3" => ExperimentSpec::base(name, arz(0.0, 1.0)?, riemann(0.8, 0.4, 1e-10, 0.4), unit, false, 1.0),
        "riemann4" => ExperimentSpec::base(name, sed, riemann(0.55, 0.0405, 0.1, 0.0405), unit, false, 1.0),
        "riemann5" => ExperimentSpec::base(name, sed, riemann(0.8, 0.024, 0.1, 0.243), unit, false, 1.0),
        "three_state" => ExperimentSpec::base(name, arz(3.0, 3.0)?, InitialCondition::ThreeState, unit, false, 1.0),
        other => return Err(Error::Config(format!("unknown experiment '{other}'; known: {}", CATALOG.join(", ")))),
    })
}

/// Machine-readable run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub n: usize,
    pub t_final: f64,
    pub t_reached: f64,
    pub steps: usize,
    pub max_v_violation: f64,
    pub max_k_violation: f64,
    pub min_phi: f64,
    pub max_phi: f64,
    pub min_jac: f64,
    pub err_jphi: f64,
    pub err_jy: f64,
    pub theta_lt1_fraction: f64,
    pub step3_iterations: usize,
    pub step3_fallbacks: usize,
    pub rescue_steps: usize,
    pub repaired_nodes: usize,
    /// First time `v` rose above the initial global `v_max`.
    pub first_vmax_exceedance: Option<f64>,
    /// First time `v` rose above the local `v_max` of the previous state (unlimited runs only).
    pub first_local_vmax_exceedance: Option<f64>,
    pub wall_time_s: f64,
    pub failure: Option<String>,
    pub bounds_ok: bool,
}

/// Running extrema of the bound monitors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundMonitor {
    pub max_v_violation: f64,
    pub max_k_violation: f64,
    pub min_phi: f64,
    pub max_phi: f64,
    pub min_jac: f64,
    pub first_vmax_exceedance: Option<f64>,
}

impl Default for BoundMonitor {
    fn default() -> Self {
        Self {
            max_v_violation: 0.0,
            max_k_violation: 0.0,
            min_phi: f64::INFINITY,
            max_phi: f64::NEG_INFINITY,
            min_jac: f64::INFINITY,
            first_vmax_exceedance: None,
        }
    }
}

impl BoundMonitor {
    /// Record `cells` against `boxes` (one per node) or a single `reference` box.
    pub fn observe(&mut self, model: &ModelSpec, cells: &[ConservedCell], boxes: &[InvariantBox], tau: f64) {
        for (j, c) in cells.iter().enumerate() {
            let b = if boxes.len() == 1 { &boxes[0] } else { &boxes[j] };
            let phi = c.phi();
            self.min_phi = self.min_phi.min(phi);
            self.max_phi = self.max_phi.max(phi);
            self.min_jac = self.min_jac.min(c.jac);
            if let Ok(p) = model.primitive_from_conserved(c) {
                let dv = (p.v - b.v_max).max(b.v_min - p.v).max(0.0);
                let dk = (p.k - b.k_max).max(b.k_min - p.k).max(0.0);
                self.max_v_violation = self.max_v_violation.max(dv);
                self.max_k_violation = self.max_k_violation.max(dk);
                if p.v > b.v_max && self.first_vmax_exceedance.is_none() {
                    self.first_vmax_exceedance = Some(tau);
                }
            } else {
                self.max_v_violation = f64::INFINITY;
            }
        }
    }

    pub fn ok(&self) -> bool {
        self.min_phi > 0.0
            && self.max_phi < 1.0
            && self.min_jac > 0.0
            && self.max_v_violation <= VERIFY_TOL
            && self.max_k_violation <= VERIFY_TOL
    }
}

/// Output of a single-road run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub initial: MovingState,
    pub state: MovingState,
    pub summary: Summary,
}

/// Hull of the local boxes of `state`.
pub fn initial_box(state: &MovingState, model: &ModelSpec, boundary: &Boundary) -> Result<InvariantBox> {
    let boxes = bp::local_boxes(state, model, boundary)?;
    Ok(boxes[1..].iter().fold(boxes[0], |a, b| a.hull(b)))
}

/// Run one experiment to its final time. Solver failures are reported in the
/// summary rather than returned, so that breakdowns can be inspected.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunResult> {
    match spec.mesh {
        MeshKind::Fixed => run_fixed(spec),
        MeshKind::Moving => match spec.order {
            Order::High => run_moving(spec),
            Order::First => run_first_order(spec),
        },
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    spec: &ExperimentSpec,
    initial: MovingState,
    state: MovingState,
    stats: RunStats,
    monitor: BoundMonitor,
    local_exceedance: Option<f64>,
    failure: Option<String>,
    started: Instant,
) -> RunResult {
    let periodic = spec.periodic;
    let (err_jphi, err_jy) = conservation_report(&initial, &state);
    let (err_jphi, err_jy) = if periodic { (err_jphi, err_jy) } else { (f64::NAN, f64::NAN) };
    let bounds_ok = failure.is_none() && monitor.ok();
    let summary = Summary {
        name: spec.name.clone(),
        n: spec.n,
        t_final: spec.t_final,
        t_reached: state.tau,
        steps: stats.steps,
        max_v_violation: monitor.max_v_violation,
        max_k_violation: monitor.max_k_violation,
        min_phi: monitor.min_phi,
        max_phi: monitor.max_phi,
        min_jac: monitor.min_jac,
        err_jphi,
        err_jy,
        theta_lt1_fraction: stats.theta_lt1_fraction(),
        step3_iterations: stats.step3_iterations,
        step3_fallbacks: stats.fallbacks,
        rescue_steps: stats.rescue_steps,
        repaired_nodes: stats.repaired_nodes,
        first_vmax_exceedance: monitor.first_vmax_exceedance,
        first_local_vmax_exceedance: local_exceedance,
        wall_time_s: started.elapsed().as_secs_f64(),
        failure,
        bounds_ok,
    };
    RunResult { initial, state, summary }
}

fn run_moving(spec: &ExperimentSpec) -> Result<RunResult> {
    let started = Instant::now();
    let grid = spec.grid()?;
    let boundary = spec.boundary();
    let initial = spec.initial_state()?;
    let reference = initial_box(&initial, &spec.model, &boundary)?;
    let options = SolverOptions { cfl: spec.effective_cfl(), limiter: spec.limiter, positions: spec.positions, global: spec.global };
    let mut solver = Solver::new(spec.model, boundary, grid.d_xi, initial.clone(), options)?;
    solver.widen_envelope(&spec.data_box()?);
    let mut monitor = BoundMonitor::default();
    monitor.observe(&spec.model, &initial.cells, &[reference], 0.0);
    let model = spec.model;
    let mut local_exceedance = None;
    let outcome = solver.run_to(spec.t_final, |rec| {
        match rec.boxes {
            Some(boxes) => monitor.observe(&model, &rec.state.cells, boxes, rec.state.tau),
            None => {
                monitor.observe(&model, &rec.state.cells, &[reference], rec.state.tau);
                if local_exceedance.is_none() {
                    let local = bp::local_boxes(rec.previous, &model, &boundary)?;
                    let mut probe = BoundMonitor::default();
                    probe.observe(&model, &rec.state.cells, &local, rec.state.tau);
                    local_exceedance = probe.first_vmax_exceedance;
                }
            }
        }
        Ok(())
    });
    let failure = outcome.err().map(|e| e.to_string());
    Ok(finish(spec, initial, solver.state, solver.stats, monitor, local_exceedance, failure, started))
}

fn run_first_order(spec: &ExperimentSpec) -> Result<RunResult> {
    let started = Instant::now();
    let grid = spec.grid()?;
    let boundary = spec.boundary();
    let initial = spec.initial_state()?;
    let mut state = initial.clone();
    let mut stats = RunStats::default();
    let mut monitor = BoundMonitor::default();
    let mut failure = None;
    while spec.t_final - state.tau > 1e-13 * spec.t_final.max(1.0) {
        let step = (|| -> Result<MovingState> {
            let boxes = bp::local_boxes(&state, &spec.model, &boundary)?;
            let plan = integrator::plan_step(&state, &spec.model, &boundary, grid.d_xi, spec.effective_cfl(), Some(&boxes), spec.t_final - state.tau)?;
            let next = fo_scheme::fo_step(&state, &spec.model, &boundary, grid.d_xi, plan.d_tau, &boxes)?;
            monitor.observe(&spec.model, &next.cells, &boxes, next.tau);
            Ok(next)
        })();
        match step {
            Ok(next) => {
                state = next;
                stats.steps += 1;
            }
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        }
    }
    Ok(finish(spec, initial, state, stats, monitor, None, failure, started))
}

/// `|sum (J phi)^end - sum (J phi)^0|` and the same for `J y`.
pub fn conservation_report(initial: &MovingState, last: &MovingState) -> (f64, f64) {
    ((last.sum_j_phi() - initial.sum_j_phi()).abs(), (last.sum_j_y() - initial.sum_j_y()).abs())
}

/// Eulerian first-order Lax-Friedrichs scheme for `U = (phi, y)` on a fixed grid.
#[derive(Debug, Clone)]
pub struct FixedMeshLlf {
    pub model: ModelSpec,
    pub phi: Vec<f64>,
    pub y: Vec<f64>,
    pub dx: f64,
    pub periodic: bool,
}

impl FixedMeshLlf {
    pub fn new(model: ModelSpec, grid: &Grid1D, ic: impl Fn(f64) -> (f64, f64), periodic: bool) -> Result<Self> {
        let mut phi = Vec::with_capacity(grid.n_cells);
        let mut y = Vec::with_capacity(grid.n_cells);
        for xi in grid.nodes() {
            let (p, v) = ic(xi);
            phi.push(p);
            y.push(p * model.k_from_phi_v(p, v)?);
        }
        Ok(Self { model, phi, y, dx: grid.d_xi, periodic })
    }

    pub fn velocities(&self) -> Result<Vec<f64>> {
        self.phi.iter().zip(&self.y).map(|(p, y)| self.model.velocity(*p, y / p)).collect()
    }

    /// One step at `cfl` times the largest stable step.
    pub fn step(&mut self, cfl: f64) -> Result<f64> {
        let n = self.phi.len();
        let v = self.velocities()?;
        let speed: Vec<f64> = (0..n)
            .map(|j| self.model.max_speed(&crate::model::Primitive { phi: self.phi[j], v: v[j], k: self.y[j] / self.phi[j] }))
            .collect();
        let alpha_max = speed.iter().fold(1e-14f64, |a, b| a.max(*b));
        let dt = cfl * self.dx / alpha_max;
        let idx = |j: isize| -> usize {
            if self.periodic {
                j.rem_euclid(n as isize) as usize
            } else {
                j.clamp(0, n as isize - 1) as usize
            }
        };
        let flux = |l: usize, r: usize| -> [f64; 2] {
            let a = speed[l].max(speed[r]);
            [
                0.5 * (v[l] * self.phi[l] + v[r] * self.phi[r]) - 0.5 * a * (self.phi[r] - self.phi[l]),
                0.5 * (v[l] * self.y[l] + v[r] * self.y[r]) - 0.5 * a * (self.y[r] - self.y[l]),
            ]
        };
        let fluxes: Vec<[f64; 2]> = (0..=n as isize).map(|i| flux(idx(i - 1), idx(i))).collect();
        let lam = dt / self.dx;
        for j in 0..n {
            self.phi[j] -= lam * (fluxes[j + 1][0] - fluxes[j][0]);
            self.y[j] -= lam * (fluxes[j + 1][1] - fluxes[j][1]);
        }
        Ok(dt)
    }
}

fn run_fixed(spec: &ExperimentSpec) -> Result<RunResult> {
    let started = Instant::now();
    let grid = spec.grid()?;
    let initial = spec.initial_state()?;
    let reference = initial_box(&initial, &spec.model, &spec.boundary())?;
    let ic = spec.initial;
    let mut llf = FixedMeshLlf::new(spec.model, &grid, |x| ic.eval(x), spec.periodic)?;
    let mut monitor = BoundMonitor::default();
    let mut stats = RunStats::default();
    let mut tau = 0.0;
    let mut failure = None;
    let to_state = |llf: &FixedMeshLlf, tau: f64, steps: usize| MovingState {
        cells: llf.phi.iter().zip(&llf.y).map(|(p, y)| ConservedCell::new(*p, *y, 1.0)).collect(),
        x_pos: grid.nodes().collect(),
        tau,
        step_index: steps,
    };
    while spec.t_final - tau > 1e-13 * spec.t_final.max(1.0) {
        match llf.step(spec.cfl) {
            Ok(dt) => {
                tau += dt;
                stats.steps += 1;
                let s = to_state(&llf, tau, stats.steps);
                monitor.observe(&spec.model, &s.cells, &[reference], tau);
            }
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        }
    }
    let state = to_state(&llf, tau, stats.steps);
    Ok(finish(spec, initial, state, stats, monitor, None, failure, started))
}

/// Largest `v - v_ref` over nodes; `0` when nothing exceeds.
///
/// `v_ref` is the largest initial speed as evaluated from the stored state.
fn overshoot(v: &[f64], v_ref: f64) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x - v_ref))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpossibilityCase {
    pub label: String,
    pub cells: usize,
    pub steps: usize,
    pub fixed_overshoot: f64,
    pub moving_overshoot: f64,
}

/// Equal-speed Riemann data on a fixed and on a moving grid, first order.
pub fn impossibility_case(label: &str, model: ModelSpec, phi_l: f64, phi_r: f64, v: f64, cells: usize, steps: usize) -> Result<ImpossibilityCase> {
    let grid = Grid1D::new(-1.0, 1.0, cells)?;
    let ic = move |x: f64| if x < 0.0 { (phi_l, v) } else { (phi_r, v) };
    let mut fixed = FixedMeshLlf::new(model, &grid, ic, false)?;
    let v_fixed = fixed.velocities()?.into_iter().fold(f64::NEG_INFINITY, f64::max);
    let mut fixed_overshoot = 0.0f64;
    for _ in 0..steps {
        fixed.step(0.9)?;
        fixed_overshoot = fixed_overshoot.max(overshoot(&fixed.velocities()?, v_fixed));
    }

    let boundary = Boundary::Outflow;
    let mut state = init_state(&grid, &model, |x| ic(x).0, |x| ic(x).1)?;
    let v_moving = state.primitives(&model)?.iter().map(|p| p.v).fold(f64::NEG_INFINITY, f64::max);
    let mut moving_overshoot = 0.0f64;
    for _ in 0..steps {
        let boxes = bp::local_boxes(&state, &model, &boundary)?;
        let plan = integrator::plan_step(&state, &model, &boundary, grid.d_xi, 0.9, Some(&boxes), f64::INFINITY)?;
        state = fo_scheme::fo_step(&state, &model, &boundary, grid.d_xi, plan.d_tau, &boxes)?;
        let v_now: Vec<f64> = state.primitives(&model)?.iter().map(|p| p.v).collect();
        moving_overshoot = moving_overshoot.max(overshoot(&v_now, v_moving));
    }
    Ok(ImpossibilityCase { label: label.to_string(), cells, steps, fixed_overshoot, moving_overshoot })
}

/// The ARZ and sedimentation counterexamples, plus the one-cell degenerate case.
pub fn impossibility_demo() -> Result<Vec<ImpossibilityCase>> {
    let arz = ModelSpec::ArzPower { gamma: 2.0, v_ref: 1.0 };
    Ok(vec![
        impossibility_case("arz", arz, 0.8, 0.1, 0.4, 100, 10)?,
        impossibility_case("arz_one_cell", arz, 0.8, 0.1, 0.4, 1, 10)?,
        impossibility_case("sedimentation", ModelSpec::Sedimentation, 0.55, 0.1, 0.0405, 100, 10)?,
    ])
}


/// Sorted reference samples, padded with periodic images when `period` is set.
pub fn reference_samples(x: &[f64], f: &[f64], period: Option<f64>) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = x.iter().copied().zip(f.iter().copied()).collect();
    if let Some(p) = period {
        let n = pts.len();
        let pad = 6.min(n);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend(pts[n - pad..].iter().map(|(a, b)| (a - p, *b)));
        ext.extend_from_slice(&pts);
        ext.extend(pts[..pad].iter().map(|(a, b)| (a + p, *b)));
        pts = ext;
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts
}

/// Interpolate the reference at `x` from its `m` nearest samples.
pub fn interpolate_nearest(reference: &[(f64, f64)], x: f64, m: usize) -> f64 {
    let n = reference.len();
    let m = m.min(n);
    let mut hi = reference.partition_point(|p| p.0 < x);
    let mut lo = hi;
    while hi - lo < m {
        let take_left = if lo == 0 {
            false
        } else if hi == n {
            true
        } else {
            (x - reference[lo - 1].0) <= (reference[hi].0 - x)
        };
        if take_left {
            lo -= 1;
        } else {
            hi += 1;
        }
    }
    lagrange_eval(&reference[lo..hi], x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorNorms {
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub n: usize,
    /// Plain sums over nodes.
    pub unweighted: ErrorNorms,
    /// Sums weighted by the grid spacing.
    pub weighted: ErrorNorms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub field: String,
    pub reference_n: usize,
    pub rows: Vec<ErrorRow>,
    pub wall_time_s: f64,
}

impl ErrorReport {
    /// `log2(e_N / e_2N)` for consecutive rows, per norm selector.
    pub fn orders(&self, norm: impl Fn(&ErrorRow) -> f64) -> Vec<f64> {
        self.rows.windows(2).map(|w| (norm(&w[0]) / norm(&w[1])).log2()).collect()
    }
}

/// Errors of `k` at the final nodes of `state` against a reference state.
pub fn error_row(model: &ModelSpec, state: &MovingState, reference: &MovingState, period: Option<f64>, d_xi: f64) -> Result<ErrorRow> {
    let k_ref: Vec<f64> = reference.primitives(model)?.iter().map(|p| p.k).collect();
    let samples = reference_samples(&reference.x_pos, &k_ref, period);
    let prims = state.primitives(model)?;
    let (mut s1, mut s2, mut inf) = (0.0f64, 0.0f64, 0.0f64);
    for (x, p) in state.x_pos.iter().zip(&prims) {
        let e = (interpolate_nearest(&samples, *x, 6) - p.k).abs();
        s1 += e;
        s2 += e * e;
        inf = inf.max(e);
    }
    Ok(ErrorRow {
        n: state.len(),
        unweighted: ErrorNorms { l1: s1, l2: s2.sqrt(), linf: inf },
        weighted: ErrorNorms { l1: s1 * d_xi, l2: (s2 * d_xi).sqrt(), linf: inf },
    })
}

/// Refinement study of `spec` over `ns` against a run at `reference_n`.
pub fn convergence_study(spec: &ExperimentSpec, ns: &[usize], reference_n: usize) -> Result<ErrorReport> {
    let started = Instant::now();
    let period = spec.periodic.then_some(spec.xi_right - spec.xi_left);
    let mut all: Vec<usize> = ns.to_vec();
    all.push(reference_n);
    let runs = all
        .par_iter()
        .map(|&n| run_checked(&spec.clone().with_n(n)))
        .collect::<Result<Vec<_>>>()?;
    let (reference, coarse) = runs.split_last().expect("reference run");
    let mut rows = Vec::with_capacity(ns.len());
    for (&n, run) in ns.iter().zip(coarse) {
        rows.push(error_row(&spec.model, &run.state, &reference.state, period, spec.clone().with_n(n).grid()?.d_xi)?);
    }
    Ok(ErrorReport { field: "k".into(), reference_n, rows, wall_time_s: started.elapsed().as_secs_f64() })
}

/// Run and turn a recorded failure into an error.
pub fn run_checked(spec: &ExperimentSpec) -> Result<RunResult> {
    let r = run_experiment(spec)?;
    match &r.summary.failure {
        Some(f) => Err(Error::Config(format!("{} (N = {}) failed: {f}", spec.name, spec.n))),
        None => Ok(r),
    }
}

/// Write the final snapshot and the JSON summary into `dir`.
pub fn write_artifacts(dir: &Path, model: &ModelSpec, result: &RunResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let stem = format!("{}_n{}", result.summary.name, result.summary.n);
    result.initial.write_csv(model, &dir.join(format!("{stem}_t0.csv")))?;
    if result.state.cells.iter().all(|c| c.jac > 0.0 && c.is_finite()) {
        result.state.write_csv(model, &dir.join(format!("{stem}_final.csv")))?;
    }
    write_json(&dir.join(format!("{stem}_summary.json")), &result.summary)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lagrange_reproduces_quintics() {
        let f = |x: f64| 1.0 - 2.0 * x + 0.5 * x.powi(3) - 0.1 * x.powi(5);
        let xs: Vec<f64> = (0..40).map(|i| i as f64 * 0.025 + 0.003 * (i as f64).sin()).collect();
        let ys: Vec<f64> = xs.iter().map(|x| f(*x)).collect();
        let samples = reference_samples(&xs, &ys, None);
        for x in [0.01, 0.3, 0.51, 0.97] {
            assert!((interpolate_nearest(&samples, x, 6) - f(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn periodic_images_cover_the_ends() {
        let xs: Vec<f64> = (0..20).map(|i| (i as f64 + 0.5) / 20.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (2.0 * std::f64::consts::PI * x).sin()).collect();
        let s = reference_samples(&xs, &ys, Some(1.0));
        assert_eq!(s.len(), 32);
        let v = interpolate_nearest(&s, 0.001, 6);
        assert!((v - (2.0 * std::f64::consts::PI * 0.001).sin()).abs() < 1e-4);
    }

    #[test]
    fn zero_steps_conserve_exactly() {
        let s = catalog("smooth").unwrap().with_n(20).initial_state().unwrap();
        assert_eq!(conservation_report(&s, &s), (0.0, 0.0));
    }

    #[test]
    fn catalog_is_complete() {
        for name in CATALOG {
            let spec = catalog(name).unwrap().with_n(16);
            spec.initial_state().unwrap();
        }
        assert!(catalog("nope").is_err());
    }

    #[test]
    fn impossibility_demo_shapes() {
        let cases = impossibility_demo().unwrap();
        assert!(cases[0].fixed_overshoot > 1e-6);
        assert_eq!(cases[0].moving_overshoot, 0.0);
        assert_eq!(cases[1].fixed_overshoot, 0.0);
        assert!(cases[2].fixed_overshoot > 1e-6);
        assert_eq!(cases[2].moving_overshoot, 0.0);
    }

    #[test]
    fn runs_are_deterministic() {
        let spec = catalog("riemann1").unwrap().with_n(120);
        let csv = |spec: &ExperimentSpec| {
            let r = run_experiment(spec).unwrap();
            let mut out = Vec::new();
            r.state.write_csv_to(&spec.model, &mut out).unwrap();
            (out, r.summary.steps)
        };
        assert_eq!(csv(&spec), csv(&spec));
    }

    #[test]
    fn summaries_carry_the_monitor_fields() {
        let r = run_experiment(&catalog("riemann3").unwrap().with_n(60)).unwrap();
        let json = serde_json::to_value(&r.summary).unwrap();
        for key in ["max_v_violation", "min_phi", "max_phi", "err_jphi", "theta_lt1_fraction", "step3_fallbacks"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }
}
