//! ARZ road networks.
//!
//! Every road carries its own moving-mesh solver on a window of nodes that
//! slides with the traffic: nodes leaving through the exit are dropped and
//! new nodes are taken in at the entry with the coupled ghost state. Roads
//! only talk to each other through the ghost states produced by a
//! [`CouplingRule`] from the endpoint traces, and all roads share one step.

use std::collections::HashMap;
use std::fmt::Debug;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bp::{self, InvariantBox};
use crate::error::{Error, Result};
use crate::harness::{BoundMonitor, DATA_SAMPLES};
use crate::integrator::{self, PreparedStep, Solver, SolverOptions, DEFAULT_CFL};
use crate::mesh::{init_state, lagrange_eval, Boundary, GhostState, Grid1D, MovingState};
use crate::model::ModelSpec;

/// Floor applied to interpolated endpoint values.
pub const TRACE_FLOOR: f64 = 1e-10;
/// Nodes used by the endpoint interpolation.
pub const TRACE_NODES: usize = 5;
/// Most nodes a road takes in at its entry in one step.
pub const MAX_INSERTS: usize = 4;
/// Jacobian of material entering through a junction: reference spacing.
pub const INFLOW_JAC: f64 = 1.0;
const ROOT_ITERS: usize = 100;

/// Scalar profile over the road coordinate `xi` in `[0, length]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    Constant { value: f64 },
    /// `base`, overridden by `value` on each closed interval `[from, to]`.
    Intervals { base: f64, pieces: Vec<Piece> },
    /// `mean + amplitude sin(2 pi xi / length)`.
    Sine { mean: f64, amplitude: f64 },
    /// `offset + slope phi`; only meaningful for speeds.
    AffineInPhi { offset: f64, slope: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub from: f64,
    pub to: f64,
    pub value: f64,
}

impl Profile {
    /// Value at `xi`; `phi` is the density there, used by `AffineInPhi`.
    pub fn eval(&self, xi: f64, length: f64, phi: f64) -> f64 {
        match self {
            Profile::Constant { value } => *value,
            Profile::Intervals { base, pieces } => {
                pieces.iter().rev().find(|p| xi >= p.from && xi <= p.to).map_or(*base, |p| p.value)
            }
            Profile::Sine { mean, amplitude } => mean + amplitude * (2.0 * std::f64::consts::PI * xi / length).sin(),
            Profile::AffineInPhi { offset, slope } => offset + slope * phi,
        }
    }
}

fn default_length() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadConfig {
    pub id: usize,
    #[serde(default = "default_length")]
    pub length: f64,
    /// Nodes on this road; defaults to the network's `n`.
    #[serde(default)]
    pub n: Option<usize>,
    pub phi: Profile,
    pub v: Profile,
    /// Close the road on itself instead of attaching it to junctions.
    #[serde(default)]
    pub periodic: bool,
}

impl RoadConfig {
    /// Padded `(v, k)` range of the initial profiles, sampled between the nodes.
    pub fn data_box(&self, model: &ModelSpec, n: usize) -> Result<InvariantBox> {
        let total = n * DATA_SAMPLES;
        let (mut v, mut k) = (Vec::with_capacity(total + 1), Vec::with_capacity(total + 1));
        for i in 0..=total {
            let xi = self.length * i as f64 / total as f64;
            let phi = self.phi.eval(xi, self.length, f64::NAN);
            let vi = self.v.eval(xi, self.length, phi);
            v.push(vi);
            k.push(model.k_from_phi_v(phi, vi)?);
        }
        Ok(bp::nodal_box(&v, &k))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JunctionConfig {
    pub id: usize,
    #[serde(default)]
    pub incoming: Vec<usize>,
    #[serde(default)]
    pub outgoing: Vec<usize>,
    /// Row `i` splits incoming road `i` over the outgoing roads; equal split when absent.
    #[serde(default)]
    pub distribution: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub name: String,
    pub gamma: f64,
    pub v_ref: f64,
    pub t_final: f64,
    pub n: usize,
    #[serde(default)]
    pub cfl: Option<f64>,
    #[serde(default)]
    pub global: bool,
    #[serde(default = "default_true")]
    pub limiter: bool,
    pub roads: Vec<RoadConfig>,
    #[serde(default)]
    pub junctions: Vec<JunctionConfig>,
}

/// Names of the bundled network configurations.
pub const BUILTIN: [&str; 3] = ["diverge", "merge", "ladder"];

impl NetworkConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Bundled configuration by name.
    pub fn builtin(name: &str) -> Result<Self> {
        let text = match name {
            "diverge" => include_str!("../configs/diverge.toml"),
            "merge" => include_str!("../configs/merge.toml"),
            "ladder" => include_str!("../configs/ladder.toml"),
            other => return Err(Error::Config(format!("unknown network '{other}'; known: {}", BUILTIN.join(", ")))),
        };
        Self::from_toml(text)
    }

    /// Same network with every road at `n` nodes.
    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        for r in &mut self.roads {
            r.n = None;
        }
        self
    }

    pub fn model(&self) -> Result<ModelSpec> {
        ModelSpec::arz(self.gamma, self.v_ref)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum End {
    Entry,
    Exit,
}

/// Interpolated state at a road end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub phi: f64,
    pub v: f64,
    pub jac: f64,
}

impl Trace {
    pub fn ghost(&self, model: &ModelSpec) -> Result<GhostState> {
        GhostState::from_primitive(model, self.phi, self.v, self.jac)
    }

    pub fn k(&self, model: &ModelSpec) -> Result<f64> {
        model.k_from_phi_v(self.phi, self.v)
    }
}

#[derive(Debug, Clone)]
pub struct Road {
    pub id: usize,
    pub x_entry: f64,
    pub x_exit: f64,
    pub periodic: bool,
    pub solver: Solver,
    pub monitor: BoundMonitor,
    pub ledger: MassLedger,
}

/// Mass bookkeeping of one road, `sum J phi d_xi` over its nodes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MassLedger {
    pub initial: f64,
    pub inserted: f64,
    pub dropped: f64,
    pub inserted_nodes: usize,
    pub dropped_nodes: usize,
}

impl Road {
    pub fn new(id: usize, grid: &Grid1D, model: ModelSpec, state: MovingState, options: SolverOptions, periodic: bool) -> Result<Self> {
        let boundary = if periodic { Boundary::Periodic { period: grid.length() } } else { Boundary::Outflow };
        let solver = Solver::new(model, boundary, grid.d_xi, state, options)?;
        let ledger = MassLedger { initial: solver.state.sum_j_phi() * grid.d_xi, ..MassLedger::default() };
        Ok(Self {
            id,
            x_entry: grid.xi_left,
            x_exit: grid.xi_right,
            periodic,
            solver,
            monitor: BoundMonitor::default(),
            ledger,
        })
    }

    pub fn state(&self) -> &MovingState {
        &self.solver.state
    }

    pub fn mass(&self) -> f64 {
        self.solver.state.sum_j_phi() * self.solver.d_xi
    }

    /// Drop nodes past the exit and take in up to [`MAX_INSERTS`] nodes at the entry.
    fn slide_window(&mut self, entry: &GhostState) {
        let d_xi = self.solver.d_xi;
        let s = &mut self.solver.state;
        while s.len() > TRACE_NODES && s.x_pos[s.len() - 1] > self.x_exit {
            let c = s.cells.pop().expect("non-empty");
            s.x_pos.pop();
            self.ledger.dropped += c.j_phi * d_xi;
            self.ledger.dropped_nodes += 1;
        }
        for _ in 0..MAX_INSERTS {
            let x_new = s.x_pos[0] - d_xi * entry.cell.jac;
            if !(x_new >= self.x_entry) {
                break;
            }
            s.x_pos.insert(0, x_new);
            s.cells.insert(0, entry.cell);
            self.ledger.inserted += entry.cell.j_phi * d_xi;
            self.ledger.inserted_nodes += 1;
        }
    }
}

/// State at one end of `road`, interpolated with a quartic through the five
/// nodes inside the road that are closest to that end, each value floored at
/// [`TRACE_FLOOR`] and the density kept below one.
pub fn boundary_trace(road: &Road, model: &ModelSpec, end: End) -> Result<Trace> {
    let s = road.state();
    let inside: Vec<usize> = (0..s.len()).filter(|&j| s.x_pos[j] >= road.x_entry && s.x_pos[j] <= road.x_exit).collect();
    if inside.len() < TRACE_NODES {
        return Err(Error::InsufficientNodes { needed: TRACE_NODES, found: inside.len() });
    }
    let (picked, x_end) = match end {
        End::Entry => (&inside[..TRACE_NODES], road.x_entry),
        End::Exit => (&inside[inside.len() - TRACE_NODES..], road.x_exit),
    };
    let prims = s.primitives(model)?;
    let at = |f: &dyn Fn(usize) -> f64| {
        let pts: Vec<(f64, f64)> = picked.iter().map(|&j| (s.x_pos[j], f(j))).collect();
        lagrange_eval(&pts, x_end)
    };
    // max/min rather than clamp: a NaN trace falls back to the floor
    #[allow(clippy::manual_clamp)]
    let phi = at(&|j| prims[j].phi).max(TRACE_FLOOR).min(1.0 - TRACE_FLOOR);
    let v = at(&|j| prims[j].v).max(TRACE_FLOOR);
    let jac = at(&|j| s.cells[j].jac).max(TRACE_FLOOR);
    Ok(Trace { phi, v, jac })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Junction {
    pub id: usize,
    /// Road indices (not ids) of `delta^-` and `delta^+`.
    pub incoming: Vec<usize>,
    pub outgoing: Vec<usize>,
    /// `distribution[i][j]`: share of incoming road `i` sent to outgoing road `j`.
    pub distribution: Vec<Vec<f64>>,
}

const ROW_SUM_TOL: f64 = 1e-12;

impl Junction {
    pub fn new(id: usize, incoming: Vec<usize>, outgoing: Vec<usize>, distribution: Option<Vec<Vec<f64>>>) -> Result<Self> {
        let bad = |msg: String| Err(Error::Config(format!("junction {id}: {msg}")));
        let distribution = match distribution {
            Some(d) => d,
            None if outgoing.is_empty() => vec![Vec::new(); incoming.len()],
            None => vec![vec![1.0 / outgoing.len() as f64; outgoing.len()]; incoming.len()],
        };
        if distribution.len() != incoming.len() {
            return bad(format!("{} distribution rows for {} incoming roads", distribution.len(), incoming.len()));
        }
        for (i, row) in distribution.iter().enumerate() {
            if row.len() != outgoing.len() {
                return bad(format!("row {i} has {} entries for {} outgoing roads", row.len(), outgoing.len()));
            }
            if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return bad(format!("row {i} has a fraction outside [0, 1]"));
            }
            if !outgoing.is_empty() && (row.iter().sum::<f64>() - 1.0).abs() > ROW_SUM_TOL {
                return bad(format!("row {i} does not sum to 1"));
            }
        }
        Ok(Self { id, incoming, outgoing, distribution })
    }
}

/// Ghost states and fluxes produced at one junction.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingOutcome {
    /// Exit ghosts of the incoming roads.
    pub incoming_ghosts: Vec<GhostState>,
    /// Entry ghosts of the outgoing roads.
    pub outgoing_ghosts: Vec<GhostState>,
    /// `q[i][j]`, the flux from incoming road `i` to outgoing road `j`.
    pub q: Vec<Vec<f64>>,
}

impl CouplingOutcome {
    pub fn q_minus(&self, i: usize) -> f64 {
        self.q[i].iter().sum()
    }

    pub fn q_plus(&self, j: usize) -> f64 {
        self.q.iter().map(|row| row[j]).sum()
    }

    /// `sum_i q_i^- - sum_j q_j^+`.
    pub fn imbalance(&self) -> f64 {
        let out: f64 = (0..self.outgoing_ghosts.len()).map(|j| self.q_plus(j)).sum();
        let inc: f64 = (0..self.incoming_ghosts.len()).map(|i| self.q_minus(i)).sum();
        inc - out
    }
}

/// Maps the traces around a junction to ghost states.
pub trait CouplingRule: Debug + Send + Sync {
    fn couple(&self, model: &ModelSpec, junction: &Junction, incoming: &[Trace], outgoing: &[Trace]) -> Result<CouplingOutcome>;
}

/// Demand-proportional distribution with flux-weighted mixing of `k`.
///
/// Incoming road `i` offers its demand `d_i = phi v` at the exit trace, split
/// by the distribution matrix. An outgoing road receives the state on the
/// free-flow branch of the mixed `k` that carries the summed flux; a sum above
/// the capacity of that branch is scaled down to the capacity. Incoming roads
/// see their own trace as exit ghost.
#[derive(Debug, Clone, Copy, Default)]
pub struct DemandRule;

/// Free-flow density with invariant `k` carrying flux `q`, or the critical
/// density when `q` is at or above capacity. The flag reports the cap.
pub fn inflow_density(model: &ModelSpec, k: f64, q: f64) -> (f64, bool) {
    let crit = model.critical_density(k);
    if q >= model.flux_of(crit, k) {
        return (crit, true);
    }
    let (mut lo, mut hi) = (0.0, crit);
    for _ in 0..ROOT_ITERS {
        let mid = 0.5 * (lo + hi);
        if model.flux_of(mid, k) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    ((0.5 * (lo + hi)).max(TRACE_FLOOR), false)
}

impl CouplingRule for DemandRule {
    fn couple(&self, model: &ModelSpec, junction: &Junction, incoming: &[Trace], outgoing: &[Trace]) -> Result<CouplingOutcome> {
        let mut q: Vec<Vec<f64>> = incoming
            .iter()
            .zip(&junction.distribution)
            .map(|(t, row)| row.iter().map(|a| a * t.phi * t.v).collect())
            .collect();
        let k_in: Vec<f64> = incoming.iter().map(|t| t.k(model)).collect::<Result<_>>()?;
        let mut outgoing_ghosts = Vec::with_capacity(outgoing.len());
        for (j, trace) in outgoing.iter().enumerate() {
            let total: f64 = q.iter().map(|row| row[j]).sum();
            if !(total > 0.0) {
                outgoing_ghosts.push(trace.ghost(model)?);
                continue;
            }
            let k = q.iter().zip(&k_in).map(|(row, k)| row[j] * k).sum::<f64>() / total;
            let (phi, capped) = inflow_density(model, k, total);
            if capped {
                let scale = model.flux_of(phi, k) / total;
                q.iter_mut().for_each(|row| row[j] *= scale);
            }
            let v = model.velocity(phi, k)?;
            outgoing_ghosts.push(GhostState::from_primitive(model, phi, v, INFLOW_JAC)?);
        }
        let incoming_ghosts = incoming.iter().map(|t| t.ghost(model)).collect::<Result<_>>()?;
        Ok(CouplingOutcome { incoming_ghosts, outgoing_ghosts, q })
    }
}

#[derive(Debug)]
pub struct RoadNetwork {
    pub name: String,
    pub model: ModelSpec,
    pub roads: Vec<Road>,
    pub junctions: Vec<Junction>,
    pub rule: Box<dyn CouplingRule>,
    pub tau: f64,
    pub steps: usize,
    /// Largest junction flux imbalance seen so far.
    pub max_imbalance: f64,
}

impl RoadNetwork {
    pub fn from_config(cfg: &NetworkConfig) -> Result<Self> {
        let model = cfg.model()?;
        let options = SolverOptions {
            cfl: cfg.cfl.unwrap_or(DEFAULT_CFL),
            limiter: cfg.limiter,
            global: cfg.global,
            ..SolverOptions::default()
        };
        let mut index = HashMap::new();
        let mut roads = Vec::with_capacity(cfg.roads.len());
        for rc in &cfg.roads {
            if index.insert(rc.id, roads.len()).is_some() {
                return Err(Error::Config(format!("duplicate road id {}", rc.id)));
            }
            let grid = Grid1D::new(0.0, rc.length, rc.n.unwrap_or(cfg.n))?;
            let state = init_state(
                &grid,
                &model,
                |xi| rc.phi.eval(xi, rc.length, f64::NAN),
                |xi| rc.v.eval(xi, rc.length, rc.phi.eval(xi, rc.length, f64::NAN)),
            )
            .map_err(|e| road_error(rc.id, e))?;
            let mut road = Road::new(rc.id, &grid, model, state, options, rc.periodic).map_err(|e| road_error(rc.id, e))?;
            road.solver.widen_envelope(&rc.data_box(&model, grid.n_cells)?);
            roads.push(road);
        }
        let lookup = |ids: &[usize], jid: usize| -> Result<Vec<usize>> {
            ids.iter()
                .map(|id| index.get(id).copied().ok_or_else(|| Error::Config(format!("junction {jid}: unknown road {id}"))))
                .collect()
        };
        let mut junctions = Vec::with_capacity(cfg.junctions.len());
        let (mut entry_used, mut exit_used) = (vec![false; roads.len()], vec![false; roads.len()]);
        for jc in &cfg.junctions {
            let incoming = lookup(&jc.incoming, jc.id)?;
            let outgoing = lookup(&jc.outgoing, jc.id)?;
            for &r in &incoming {
                if std::mem::replace(&mut exit_used[r], true) || roads[r].periodic {
                    return Err(Error::Config(format!("junction {}: exit of road {} already attached", jc.id, roads[r].id)));
                }
            }
            for &r in &outgoing {
                if std::mem::replace(&mut entry_used[r], true) || roads[r].periodic {
                    return Err(Error::Config(format!("junction {}: entry of road {} already attached", jc.id, roads[r].id)));
                }
            }
            junctions.push(Junction::new(jc.id, incoming, outgoing, jc.distribution.clone())?);
        }
        Ok(Self { name: cfg.name.clone(), model, roads, junctions, rule: Box::new(DemandRule), tau: 0.0, steps: 0, max_imbalance: 0.0 })
    }

    /// `(entry, exit)` ghosts of every open road. Ends without a junction
    /// extend their end node; junction ends get the coupling output.
    pub fn couple(&self) -> Result<Vec<Option<(GhostState, GhostState)>>> {
        let model = &self.model;
        let mut traces = vec![None; self.roads.len()];
        for junction in &self.junctions {
            for &r in junction.incoming.iter().chain(&junction.outgoing) {
                if traces[r].is_none() {
                    let road = &self.roads[r];
                    let entry = boundary_trace(road, model, End::Entry).map_err(|e| road_error(road.id, e))?;
                    let exit = boundary_trace(road, model, End::Exit).map_err(|e| road_error(road.id, e))?;
                    traces[r] = Some((entry, exit));
                }
            }
        }
        let mut ghosts: Vec<Option<(GhostState, GhostState)>> = self
            .roads
            .iter()
            .map(|road| {
                if road.periodic {
                    return Ok(None);
                }
                let s = road.state();
                let end = |j: usize| -> Result<GhostState> { Ok(GhostState { cell: s.cells[j], prim: model.primitive_from_conserved(&s.cells[j])? }) };
                Ok(Some((end(0)?, end(s.len() - 1)?)))
            })
            .map(|g: Result<_>| g)
            .collect::<Result<_>>()?;
        for junction in &self.junctions {
            let trace_of = |r: usize| traces[r].expect("open road");
            let incoming: Vec<Trace> = junction.incoming.iter().map(|&r| trace_of(r).1).collect();
            let outgoing: Vec<Trace> = junction.outgoing.iter().map(|&r| trace_of(r).0).collect();
            let out = self.rule.couple(model, junction, &incoming, &outgoing)?;
            for (&r, g) in junction.incoming.iter().zip(&out.incoming_ghosts) {
                if let Some(pair) = ghosts[r].as_mut() {
                    pair.1 = *g;
                }
            }
            for (&r, g) in junction.outgoing.iter().zip(&out.outgoing_ghosts) {
                if let Some(pair) = ghosts[r].as_mut() {
                    pair.0 = *g;
                }
            }
        }
        Ok(ghosts)
    }

    /// Junction fluxes at the current state.
    pub fn junction_fluxes(&self) -> Result<Vec<CouplingOutcome>> {
        let model = &self.model;
        self.junctions
            .iter()
            .map(|junction| {
                let incoming = junction.incoming.iter().map(|&r| boundary_trace(&self.roads[r], model, End::Exit)).collect::<Result<Vec<_>>>()?;
                let outgoing = junction.outgoing.iter().map(|&r| boundary_trace(&self.roads[r], model, End::Entry)).collect::<Result<Vec<_>>>()?;
                self.rule.couple(model, junction, &incoming, &outgoing)
            })
            .collect()
    }

    /// One shared step, not beyond `t_final`. Returns the step size.
    pub fn step(&mut self, t_final: f64) -> Result<f64> {
        for out in self.junction_fluxes()? {
            self.max_imbalance = self.max_imbalance.max(out.imbalance().abs());
        }
        let ghosts = self.couple()?;
        let prepared: Vec<PreparedStep> = self
            .roads
            .par_iter_mut()
            .zip(ghosts.par_iter())
            .map(|(road, g)| {
                if let Some((left, right)) = g {
                    road.solver.boundary = Boundary::Coupled { left: *left, right: *right };
                }
                road.solver.prepare(t_final).map_err(|e| road_error(road.id, e))
            })
            .collect::<Result<_>>()?;
        let d_tau = prepared.iter().map(|p| p.plan.d_tau).fold(f64::INFINITY, f64::min);
        let model = self.model;
        self.roads
            .par_iter_mut()
            .zip(prepared.into_par_iter())
            .zip(ghosts.par_iter())
            .try_for_each(|((road, mut p), g)| {
                p.plan = p.plan.with_d_tau(d_tau);
                let (_, boxes, _) = road.solver.advance(p, t_final).map_err(|e| road_error(road.id, e))?;
                if let Some(boxes) = boxes {
                    road.monitor.observe(&model, &road.solver.state.cells, &boxes, road.solver.state.tau);
                }
                if let Some((left, _)) = g {
                    road.slide_window(left);
                }
                Ok::<(), Error>(())
            })?;
        self.tau = self.roads[0].solver.state.tau;
        self.steps += 1;
        Ok(d_tau)
    }

    pub fn run_to(&mut self, t_final: f64) -> Result<()> {
        while t_final - self.tau > integrator::end_tolerance(t_final) {
            self.step(t_final)?;
        }
        Ok(())
    }

    pub fn summary(&self, failure: Option<String>, wall_time_s: f64) -> Result<NetworkSummary> {
        let roads = self
            .roads
            .iter()
            .map(|road| {
                let prims = road.state().primitives(&self.model).unwrap_or_default();
                let range = |f: &dyn Fn(usize) -> f64| {
                    (0..prims.len()).map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)))
                };
                RoadSummary {
                    id: road.id,
                    nodes: road.state().len(),
                    phi: range(&|j| prims[j].phi),
                    v: range(&|j| prims[j].v),
                    k: range(&|j| prims[j].k),
                    max_v_violation: road.monitor.max_v_violation,
                    max_k_violation: road.monitor.max_k_violation,
                    min_phi_seen: road.monitor.min_phi,
                    fallbacks: road.solver.stats.fallbacks,
                    mass: road.mass(),
                    ledger: road.ledger,
                    bounds_ok: road.monitor.ok(),
                }
            })
            .collect::<Vec<_>>();
        let bounds_ok = failure.is_none() && roads.iter().all(|r| r.bounds_ok);
        Ok(NetworkSummary {
            name: self.name.clone(),
            t_reached: self.tau,
            steps: self.steps,
            max_junction_imbalance: self.max_imbalance,
            roads,
            wall_time_s,
            failure,
            bounds_ok,
        })
    }

    /// Largest velocity and largest local-box `v_max` over the nodes of road
    /// `id` with `|x - center| <= half_width`.
    pub fn velocity_probe(&self, id: usize, center: f64, half_width: f64) -> Result<VelocityProbe> {
        let road = self
            .roads
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::Config(format!("unknown road {id}")))?;
        let s = road.state();
        let prims = s.primitives(&self.model)?;
        let boxes = bp::local_boxes(s, &self.model, &road.solver.boundary)?;
        let mut probe = VelocityProbe { max_v: f64::NEG_INFINITY, max_box_v: f64::NEG_INFINITY, max_excess: 0.0, nodes: 0 };
        for j in (0..s.len()).filter(|&j| (s.x_pos[j] - center).abs() <= half_width) {
            probe.max_v = probe.max_v.max(prims[j].v);
            probe.max_box_v = probe.max_box_v.max(boxes[j].v_max);
            probe.max_excess = probe.max_excess.max(prims[j].v - boxes[j].v_max);
            probe.nodes += 1;
        }
        Ok(probe)
    }

    /// Per-road CSV snapshots.
    pub fn write_snapshots(&self, dir: &Path, label: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for road in &self.roads {
            road.state().write_csv(&self.model, &dir.join(format!("{}_road{}_{label}.csv", self.name, road.id)))?;
        }
        Ok(())
    }
}

/// Advance `net` by one shared step.
pub fn network_step(net: &mut RoadNetwork, t_final: f64) -> Result<f64> {
    net.step(t_final)
}

fn road_error(road: usize, e: Error) -> Error {
    match e {
        Error::Road { .. } => e,
        other => Error::Road { road, source: Box::new(other) },
    }
}


#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityProbe {
    pub max_v: f64,
    pub max_box_v: f64,
    /// Largest `v - v_max` of the node's own local box; non-positive when in bounds.
    pub max_excess: f64,
    pub nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSummary {
    pub id: usize,
    pub nodes: usize,
    pub phi: (f64, f64),
    pub v: (f64, f64),
    pub k: (f64, f64),
    pub max_v_violation: f64,
    pub max_k_violation: f64,
    pub min_phi_seen: f64,
    pub fallbacks: usize,
    pub mass: f64,
    pub ledger: MassLedger,
    pub bounds_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSummary {
    pub name: String,
    pub t_reached: f64,
    pub steps: usize,
    pub max_junction_imbalance: f64,
    pub roads: Vec<RoadSummary>,
    pub wall_time_s: f64,
    pub failure: Option<String>,
    pub bounds_ok: bool,
}

/// Run a configuration to its final time. Solver errors end the run and are
/// reported in the summary rather than returned.
pub fn run_network(cfg: &NetworkConfig) -> Result<(RoadNetwork, NetworkSummary)> {
    let started = std::time::Instant::now();
    let mut net = RoadNetwork::from_config(cfg)?;
    let failure = net.run_to(cfg.t_final).err().map(|e| e.to_string());
    let summary = net.summary(failure, started.elapsed().as_secs_f64())?;
    Ok((net, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ARZ1: ModelSpec = ModelSpec::ArzPower { gamma: 1.0, v_ref: 1.0 };

    fn road_with(n: usize, phi: impl Fn(f64) -> f64, v: impl Fn(f64) -> f64) -> Road {
        let grid = Grid1D::new(0.0, 1.0, n).unwrap();
        let state = init_state(&grid, &ARZ1, phi, v).unwrap();
        Road::new(1, &grid, ARZ1, state, SolverOptions::default(), false).unwrap()
    }

    #[test]
    fn trace_reproduces_quartics_and_floors() {
        let road = road_with(40, |x| 0.2 + 0.1 * x * x * x * x - 0.05 * x, |_| 0.5);
        let exit = boundary_trace(&road, &ARZ1, End::Exit).unwrap();
        assert!((exit.phi - 0.25).abs() < 1e-12);
        let entry = boundary_trace(&road, &ARZ1, End::Entry).unwrap();
        assert!((entry.phi - 0.2).abs() < 1e-12);
        assert!((entry.v - 0.5).abs() < 1e-14 && (entry.jac - 1.0).abs() < 1e-14);
        // Linear data reaching 1e-3 half a cell before the end extrapolates below zero.
        let steep = road_with(10, |x| 1e-3 + 0.4 * (0.95 - x).max(0.0), |_| 0.5);
        let t = boundary_trace(&steep, &ARZ1, End::Exit).unwrap();
        assert_eq!(t.phi, TRACE_FLOOR);
    }

    #[test]
    fn trace_needs_five_nodes() {
        let road = road_with(4, |_| 0.3, |_| 0.5);
        assert!(matches!(boundary_trace(&road, &ARZ1, End::Entry), Err(Error::InsufficientNodes { needed: 5, found: 4 })));
    }

    fn trace(phi: f64, v: f64) -> Trace {
        Trace { phi, v, jac: 1.0 }
    }

    #[test]
    fn diverging_split_is_equal() {
        let j = Junction::new(1, vec![0], vec![1, 2], None).unwrap();
        let out = DemandRule.couple(&ARZ1, &j, &[trace(0.5, 0.5)], &[trace(0.5, 0.5), trace(0.5, 0.5)]).unwrap();
        assert_eq!(out.q_plus(0), 0.125);
        assert_eq!(out.q_plus(1), 0.125);
        assert_eq!(out.imbalance(), 0.0);
        // phi (1 - phi) = 1/8 on the free-flow branch.
        let g = out.outgoing_ghosts[0].prim;
        assert!((g.phi - (1.0 - 0.5f64.sqrt()) / 2.0).abs() < 1e-12);
        assert!((g.k - 1.0).abs() < 1e-12);
        assert_eq!(out.incoming_ghosts[0].prim.phi, 0.5);
    }

    #[test]
    fn merging_keeps_k_and_caps_at_capacity() {
        let j = Junction::new(1, vec![0, 1], vec![2], None).unwrap();
        let out = DemandRule.couple(&ARZ1, &j, &[trace(0.4, 0.4), trace(0.4, 0.4)], &[trace(0.4, 0.4)]).unwrap();
        let g = out.outgoing_ghosts[0].prim;
        assert!((g.k - 0.8).abs() < 1e-12);
        // Demand 0.32 exceeds the capacity 0.16 of k = 0.8, reached at phi = 0.4.
        assert!((g.phi - 0.4).abs() < 1e-9);
        assert!((out.q_plus(0) - 0.16).abs() < 1e-9);
        assert!(out.imbalance().abs() < 1e-15);
    }

    #[test]
    fn zero_demand_keeps_outgoing_trace() {
        let j = Junction::new(1, vec![0], vec![1], None).unwrap();
        let out = DemandRule.couple(&ARZ1, &j, &[trace(1e-300, 0.5)], &[trace(0.3, 0.2)]).unwrap();
        let g = out.outgoing_ghosts[0].prim;
        assert!(g.phi > 1e-300);
        let none = Junction::new(2, vec![0], vec![1], Some(vec![vec![0.0]]));
        assert!(none.is_err());
        let zero = Junction { distribution: vec![vec![0.0]], ..j };
        let out = DemandRule.couple(&ARZ1, &zero, &[trace(0.5, 0.5)], &[trace(0.3, 0.2)]).unwrap();
        assert_eq!(out.outgoing_ghosts[0].prim.phi, 0.3);
        assert_eq!(out.outgoing_ghosts[0].prim.v, 0.2);
    }

    #[test]
    fn malformed_distribution_is_rejected() {
        assert!(Junction::new(1, vec![0], vec![1, 2], Some(vec![vec![0.5, 0.6]])).is_err());
        assert!(Junction::new(1, vec![0], vec![1, 2], Some(vec![vec![1.5, -0.5]])).is_err());
        assert!(Junction::new(1, vec![0, 1], vec![2], Some(vec![vec![1.0]])).is_err());
    }

    #[test]
    fn window_slides_with_traffic() {
        let mut road = road_with(20, |_| 0.3, |_| 0.5);
        let ghost = GhostState::from_primitive(&ARZ1, 0.3, 0.5, 1.0).unwrap();
        road.solver.boundary = Boundary::Coupled { left: ghost, right: ghost };
        let before = road.mass();
        for _ in 0..20 {
            road.solver.step(10.0).unwrap();
            road.slide_window(&ghost);
        }
        let s = road.state();
        assert!(s.x_pos.windows(2).all(|w| w[1] > w[0]));
        assert!(s.x_pos[0] >= 0.0 && s.x_pos[0] < 0.05 + 1e-12);
        assert!(*s.x_pos.last().unwrap() <= 1.0);
        assert!(road.ledger.inserted_nodes > 0 && road.ledger.dropped_nodes > 0);
        // A constant state stays constant, so mass only moves through the window.
        let l = road.ledger;
        assert!((road.mass() - (before + l.inserted - l.dropped)).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn junction_fluxes_balance(
            incoming in prop::collection::vec((0.05f64..0.9, 0.05f64..0.9), 1..4),
            outgoing in prop::collection::vec((0.05f64..0.9, 0.05f64..0.9), 1..4),
            weights in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 3),
        ) {
            let model = ModelSpec::ArzPower { gamma: 2.0, v_ref: 1.0 };
            let distribution: Vec<Vec<f64>> = weights[..incoming.len()]
                .iter()
                .map(|row| {
                    let row = &row[..outgoing.len()];
                    let total: f64 = row.iter().sum();
                    let mut out: Vec<f64> = row.iter().map(|w| w / total).collect();
                    let head: f64 = out[1..].iter().sum();
                    out[0] = 1.0 - head;
                    out
                })
                .collect();
            let junction = Junction::new(1, (0..incoming.len()).collect(), (incoming.len()..incoming.len() + outgoing.len()).collect(), Some(distribution)).unwrap();
            let trace = |&(phi, v): &(f64, f64)| Trace { phi, v, jac: 1.0 };
            let inc: Vec<Trace> = incoming.iter().map(trace).collect();
            let out: Vec<Trace> = outgoing.iter().map(trace).collect();
            let res = DemandRule.couple(&model, &junction, &inc, &out).unwrap();
            let total: f64 = (0..inc.len()).map(|i| res.q_minus(i)).sum();
            prop_assert!(res.imbalance().abs() <= 8.0 * f64::EPSILON * total.max(f64::MIN_POSITIVE));
            for (j, g) in res.outgoing_ghosts.iter().enumerate() {
                prop_assert!((g.prim.phi * g.prim.v - res.q_plus(j)).abs() <= 1e-10, "ghost {j} carries {} not {}", g.prim.phi * g.prim.v, res.q_plus(j));
            }
        }
    }

    /// A single periodic road without junctions advances exactly like the plain solver.
    #[test]
    fn single_road_network_reduces_to_solver() {
        let cfg = NetworkConfig::from_toml(
            r#"
            name = "ring"
            gamma = 2.0
            v_ref = 1.0
            t_final = 0.3
            n = 64

            [[roads]]
            id = 7
            periodic = true
            phi = { kind = "sine", mean = 0.5, amplitude = 0.2 }
            v = { kind = "sine", mean = 0.4, amplitude = 0.1 }
            "#,
        )
        .unwrap();
        let mut net = RoadNetwork::from_config(&cfg).unwrap();
        net.run_to(cfg.t_final).unwrap();

        let model = cfg.model().unwrap();
        let rc = &cfg.roads[0];
        let grid = Grid1D::new(0.0, 1.0, cfg.n).unwrap();
        let state = init_state(&grid, &model, |x| rc.phi.eval(x, 1.0, f64::NAN), |x| rc.v.eval(x, 1.0, rc.phi.eval(x, 1.0, f64::NAN))).unwrap();
        let mut solver = Solver::new(model, Boundary::Periodic { period: 1.0 }, grid.d_xi, state, SolverOptions::default()).unwrap();
        solver.widen_envelope(&rc.data_box(&model, cfg.n).unwrap());
        solver.run_to(cfg.t_final, |_| Ok(())).unwrap();

        let road = &net.roads[0];
        assert_eq!(road.state().cells, solver.state.cells);
        assert_eq!(road.state().x_pos, solver.state.x_pos);
        assert_eq!(net.steps, solver.stats.steps);
    }
}
