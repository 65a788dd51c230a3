//! Invariant-domain estimates and the parametrized bound-preserving limiter.
//!
//! The limited update of node `j` is affine in its two interface parameters,
//! `U(theta_-, theta_+) = U_FO - lambda (theta_+ A_+ - theta_- A_-)` with
//! `A = G_high - G_low`. Step 1 handles the linear constraints, Step 2 the
//! lower speed bound (a convex superlevel set in `theta`), Step 3 the upper
//! speed bound, whose feasible set is the complement of a convex region.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Boundary, MovingState};
use crate::model::{ConservedCell, ModelSpec};

pub const EPS_PAD: f64 = 1e-12;
pub const EPS_J: f64 = 1e-10;
/// Denominator guard of the Step 1 decoupling.
pub const EPS_1: f64 = 1e-13;
/// Minimum spacing of stencil positions.
pub const STENCIL_TOL: f64 = 1e-14;
/// Tolerance of the post-limiting bound check on `v` and `k`.
pub const VERIFY_TOL: f64 = 1e-10;
const BISECTION_ITERS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvariantBox {
    pub v_min: f64,
    pub v_max: f64,
    pub k_min: f64,
    pub k_max: f64,
    pub eps_pad: f64,
    pub eps_j: f64,
}

impl InvariantBox {
    pub fn new(v_min: f64, v_max: f64, k_min: f64, k_max: f64) -> Self {
        Self { v_min, v_max, k_min, k_max, eps_pad: EPS_PAD, eps_j: EPS_J }
    }

    pub fn hull(&self, other: &InvariantBox) -> InvariantBox {
        InvariantBox {
            v_min: self.v_min.min(other.v_min),
            v_max: self.v_max.max(other.v_max),
            k_min: self.k_min.min(other.k_min),
            k_max: self.k_max.max(other.k_max),
            eps_pad: self.eps_pad,
            eps_j: self.eps_j,
        }
    }

    /// `self` clipped to `outer`, never empty.
    pub fn clip_to(&self, outer: &InvariantBox) -> InvariantBox {
        let v_min = self.v_min.max(outer.v_min).min(self.v_max);
        let k_min = self.k_min.max(outer.k_min).min(self.k_max);
        InvariantBox {
            v_min,
            v_max: self.v_max.min(outer.v_max).max(v_min),
            k_min,
            k_max: self.k_max.min(outer.k_max).max(k_min),
            eps_pad: self.eps_pad,
            eps_j: self.eps_j,
        }
    }

    /// Admissibility of `cell`: `J > 0`, `0 < phi < 1`, and `(v, k)` inside the box up to `tol`.
    pub fn admits(&self, model: &ModelSpec, cell: &ConservedCell, tol: f64) -> bool {
        if !(cell.jac > 0.0 && cell.j_phi > 0.0 && cell.j_phi < cell.jac) {
            return false;
        }
        match model.primitive_from_conserved(cell) {
            Ok(p) => {
                p.v >= self.v_min - tol && p.v <= self.v_max + tol && p.k >= self.k_min - tol && p.k <= self.k_max + tol
            }
            Err(_) => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainMode {
    /// Local boxes clipped to `envelope`, the running hull of nodal data; local domains never leave the global one.
    Local { envelope: InvariantBox },
    Global { current: InvariantBox },
}

impl DomainMode {
    /// Mode seeded from the initial state: global boxes from the hull of local boxes, the local envelope from nodal data.
    pub fn seeded(global: bool, state: &MovingState, model: &ModelSpec, boundary: &Boundary) -> Result<DomainMode> {
        let pairs = stencil_boxes(state, model, boundary)?;
        let pick = |b: &(InvariantBox, InvariantBox)| if global { b.0 } else { b.1 };
        let hull = pairs[1..].iter().fold(pick(&pairs[0]), |acc, b| acc.hull(&pick(b)));
        Ok(if global { DomainMode::Global { current: hull } } else { DomainMode::Local { envelope: hull } })
    }
}

/// Range of the quadratic interpolant of `f` over `[x0, x2]`.
fn quadratic_range(x: [f64; 3], f: [f64; 3]) -> (f64, f64) {
    let d01 = (f[1] - f[0]) / (x[1] - x[0]);
    let d12 = (f[2] - f[1]) / (x[2] - x[1]);
    let a = (d12 - d01) / (x[2] - x[0]);
    let mut lo = f[0].min(f[1]).min(f[2]);
    let mut hi = f[0].max(f[1]).max(f[2]);
    if a != 0.0 {
        let xs = 0.5 * (x[0] + x[1]) - d01 / (2.0 * a);
        if xs > x[0] && xs < x[2] {
            let fs = f[0] + d01 * (xs - x[0]) + a * (xs - x[0]) * (xs - x[1]);
            lo = lo.min(fs);
            hi = hi.max(fs);
        }
    }
    (lo, hi)
}

fn padded_box(v: (f64, f64), k: (f64, f64), nodal_v_min: f64) -> InvariantBox {
    let v_min = if nodal_v_min < 0.0 { v.0 - EPS_PAD } else { (v.0 - EPS_PAD).max(0.0) };
    InvariantBox::new(v_min, v.1 + EPS_PAD, k.0 - EPS_PAD, k.1 + EPS_PAD)
}

fn nodal_range(f: &[f64]) -> (f64, f64) {
    f.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)))
}

/// Box from stencil data; `v_min` is clamped at 0 unless the nodal speeds are negative.
pub fn box_from_stencil(x: [f64; 3], v: [f64; 3], k: [f64; 3]) -> InvariantBox {
    padded_box(quadratic_range(x, v), quadratic_range(x, k), nodal_range(&v).0)
}

/// Box spanned by the stencil's nodal values only, padded like [`box_from_stencil`].
pub fn nodal_box(v: &[f64], k: &[f64]) -> InvariantBox {
    let vr = nodal_range(v);
    padded_box(vr, nodal_range(k), vr.0)
}

/// Quadratic and nodal boxes per node over `{j-1, j, j+1}`.
///
/// Coupled ends place the ghost state at the mirrored neighbour position.
fn stencil_boxes(state: &MovingState, model: &ModelSpec, boundary: &Boundary) -> Result<Vec<(InvariantBox, InvariantBox)>> {
    let prims = state.primitives(model)?;
    let n = state.len();
    if n == 0 {
        return Err(Error::EmptyGrid);
    }
    let x = &state.x_pos;
    let mut out = Vec::with_capacity(n);
    if n < 3 && !boundary.is_periodic() {
        let mut v: Vec<f64> = prims.iter().map(|p| p.v).collect();
        let mut k: Vec<f64> = prims.iter().map(|p| p.k).collect();
        if let Boundary::Coupled { left, right } = boundary {
            v.extend([left.prim.v, right.prim.v]);
            k.extend([left.prim.k, right.prim.k]);
        }
        let b = nodal_box(&v, &k);
        return Ok(vec![(b, b); n]);
    }
    for j in 0..n {
        let (xs, v, k) = match boundary {
            Boundary::Periodic { period } => {
                let l = (j + n - 1) % n;
                let r = (j + 1) % n;
                let xl = if j == 0 { x[l] - period } else { x[l] };
                let xr = if j == n - 1 { x[r] + period } else { x[r] };
                ([xl, x[j], xr], [l, j, r].map(|i| prims[i].v), [l, j, r].map(|i| prims[i].k))
            }
            Boundary::Coupled { left, .. } if j == 0 => {
                let xs = [2.0 * x[0] - x[1], x[0], x[1]];
                (xs, [left.prim.v, prims[0].v, prims[1].v], [left.prim.k, prims[0].k, prims[1].k])
            }
            Boundary::Coupled { right, .. } if j == n - 1 => {
                let xs = [x[j - 1], x[j], 2.0 * x[j] - x[j - 1]];
                (xs, [prims[j - 1].v, prims[j].v, right.prim.v], [prims[j - 1].k, prims[j].k, right.prim.k])
            }
            _ => {
                let c = j.clamp(1, n - 2);
                let idx = [c - 1, c, c + 1];
                (idx.map(|i| x[i]), idx.map(|i| prims[i].v), idx.map(|i| prims[i].k))
            }
        };
        if !(xs[1] - xs[0] > STENCIL_TOL && xs[2] - xs[1] > STENCIL_TOL) {
            return Err(Error::DegenerateStencil { node: j });
        }
        out.push((box_from_stencil(xs, v, k), nodal_box(&v, &k)));
    }
    Ok(out)
}

/// Per-node local invariant boxes from quadratic interpolation over `{j-1, j, j+1}`.
///
/// Outflow end nodes use the one-sided stencil of the three nearest nodes.
pub fn local_boxes(state: &MovingState, model: &ModelSpec, boundary: &Boundary) -> Result<Vec<InvariantBox>> {
    Ok(stencil_boxes(state, model, boundary)?.into_iter().map(|(q, _)| q).collect())
}

/// Hull of the current global box with the two edge boxes.
pub fn global_box_update(mode: DomainMode, first: &InvariantBox, last: &InvariantBox) -> DomainMode {
    match mode {
        DomainMode::Global { current } => DomainMode::Global { current: current.hull(first).hull(last) },
        DomainMode::Local { envelope } => DomainMode::Local { envelope: envelope.hull(first).hull(last) },
    }
}

/// Global mode seeded with the hull of all local boxes.
pub fn initial_global_mode(boxes: &[InvariantBox]) -> DomainMode {
    let current = boxes[1..].iter().fold(boxes[0], |acc, b| acc.hull(b));
    DomainMode::Global { current }
}

/// Boxes the limiter must respect this step; updates the global box in place.
pub fn boxes_for_step(
    mode: &mut DomainMode,
    state: &MovingState,
    model: &ModelSpec,
    boundary: &Boundary,
) -> Result<Vec<InvariantBox>> {
    let pairs = stencil_boxes(state, model, boundary)?;
    let (first, last) = (&pairs[0], &pairs[pairs.len() - 1]);
    *mode = match *mode {
        DomainMode::Global { .. } => global_box_update(*mode, &first.0, &last.0),
        DomainMode::Local { .. } => global_box_update(*mode, &first.1, &last.1),
    };
    match *mode {
        // Only the interpolant's bulge past the envelope is cut; nodal data always stays admissible.
        DomainMode::Local { envelope } => Ok(pairs.iter().map(|(q, nodal)| q.clip_to(&envelope).hull(nodal)).collect()),
        DomainMode::Global { current } => Ok(vec![current; pairs.len()]),
    }
}

/// `theta (high - low) + low`, exact at `theta = 0` and `theta = 1`.
#[inline]
pub fn limited_flux(theta: f64, high: &[f64; 3], low: &[f64; 3]) -> [f64; 3] {
    if theta == 1.0 {
        *high
    } else if theta == 0.0 {
        *low
    } else {
        [0, 1, 2].map(|i| theta * (high[i] - low[i]) + low[i])
    }
}

/// The update of one node as a function of its two interface parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellUpdate {
    pub state: ConservedCell,
    pub high_minus: [f64; 3],
    pub low_minus: [f64; 3],
    pub high_plus: [f64; 3],
    pub low_plus: [f64; 3],
    pub lambda: f64,
}

impl CellUpdate {
    pub fn eval(&self, theta_minus: f64, theta_plus: f64) -> ConservedCell {
        let gm = limited_flux(theta_minus, &self.high_minus, &self.low_minus);
        let gp = limited_flux(theta_plus, &self.high_plus, &self.low_plus);
        let s = &self.state;
        ConservedCell::new(
            s.j_phi - self.lambda * (gp[0] - gm[0]),
            s.j_y - self.lambda * (gp[1] - gm[1]),
            s.jac - self.lambda * (gp[2] - gm[2]),
        )
    }

    pub fn first_order(&self) -> ConservedCell {
        self.eval(0.0, 0.0)
    }

    fn dir_minus(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.high_minus[i] - self.low_minus[i])
    }

    fn dir_plus(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.high_plus[i] - self.low_plus[i])
    }

    /// `grad_theta h(U(theta); s)` by the chain rule through the affine map.
    pub fn h_theta_gradient(&self, model: &ModelSpec, theta: (f64, f64), s: f64) -> (f64, f64) {
        let g = model.h_gradient(&self.eval(theta.0, theta.1), s);
        let (am, ap) = (self.dir_minus(), self.dir_plus());
        let dot = |a: [f64; 3]| g[0] * a[0] + g[1] * a[1] + g[2] * a[2];
        (self.lambda * dot(am), -self.lambda * dot(ap))
    }

    pub fn h_at(&self, model: &ModelSpec, theta: (f64, f64), s: f64) -> f64 {
        model.h_unchecked(&self.eval(theta.0, theta.1), s)
    }
}

/// `Gamma` and the two `G-dagger` vectors of the five linear constraints.
pub fn step1_data(cu: &CellUpdate, bounds: &InvariantBox) -> ([f64; 5], [f64; 5], [f64; 5]) {
    let fo = cu.first_order();
    let s = &cu.state;
    let gamma = [
        fo.jac - bounds.eps_j,
        fo.jac - s.j_phi,
        s.j_phi,
        s.j_y - bounds.k_min * s.j_phi,
        bounds.k_max * s.j_phi - s.j_y,
    ];
    let dagger = |a: [f64; 3]| {
        [a[2], a[2] - a[0], a[0], a[1] - bounds.k_min * a[0], bounds.k_max * a[0] - a[1]]
    };
    (gamma, dagger(cu.dir_minus()), dagger(cu.dir_plus()))
}

fn decouple(gamma: f64, gm: f64, gp: f64, lambda: f64) -> (f64, f64) {
    match (gm >= 0.0, gp <= 0.0) {
        (true, true) => (1.0, 1.0),
        (true, false) => (1.0, (gamma / (lambda * gp + EPS_1)).min(1.0)),
        (false, true) => ((gamma / (-lambda * gm + EPS_1)).min(1.0), 1.0),
        (false, false) => {
            if gamma - lambda * (gp - gm) >= 0.0 {
                (1.0, 1.0)
            } else {
                let t = (gamma / (lambda * gp - lambda * gm + EPS_1)).min(1.0);
                (t, t)
            }
        }
    }
}

/// Largest rectangle `[0, L-] x [0, L+]` on which all five linear constraints hold.
pub fn step1_linear(gamma: &[f64; 5], dagger_minus: &[f64; 5], dagger_plus: &[f64; 5], lambda: f64) -> Result<(f64, f64)> {
    let mut out = (1.0f64, 1.0f64);
    for i in 0..5 {
        if gamma[i] < -EPS_1 || gamma[i].is_nan() {
            return Err(Error::LimiterFailure { node: 0, reason: format!("Gamma[{}] = {:e} < 0", i + 1, gamma[i]) });
        }
        let (m, p) = decouple(gamma[i].max(0.0), dagger_minus[i], dagger_plus[i], lambda);
        out = (out.0.min(m), out.1.min(p));
    }
    Ok(out)
}

/// Largest `r` in `[0, 1]` with `ok(r)`, assuming `ok(0)`.
fn largest_feasible(ok: impl Fn(f64) -> bool) -> f64 {
    if ok(1.0) {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Shrink the Step 1 rectangle so that `v >= v_min` holds on it.
pub fn step2_vmin(cu: &CellUpdate, model: &ModelSpec, lam1: (f64, f64), v_min: f64) -> Result<(f64, f64)> {
    let ok = |t: (f64, f64)| cu.h_at(model, t, v_min) >= 0.0;
    let h0 = cu.h_at(model, (0.0, 0.0), v_min);
    let scale = cu.state.j_phi.abs() + cu.state.j_y.abs();
    if h0 < -1e-12 * scale || h0.is_nan() {
        return Err(Error::LimiterFailure { node: 0, reason: format!("first-order update violates v_min (h = {h0:e})") });
    }
    let vertices = [(lam1.0, 0.0), lam1, (0.0, lam1.1)];
    let r = vertices.map(|a| if h0 < 0.0 { 0.0 } else { largest_feasible(|t| ok((t * a.0, t * a.1))) });
    Ok((r[0].min(r[1]) * lam1.0, r[1].min(r[2]) * lam1.1))
}

/// Which branch of the Step 3 reduction produced the rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Step3Case {
    /// The current pair already satisfies `v <= v_max`.
    Feasible,
    /// Both tangent slopes positive; the ray point is the corner.
    Radial,
    /// `theta_-` reduced using the supporting line at the ray point only.
    ReduceMinus,
    /// `theta_-` reduced using a second supporting line.
    ReduceMinusRefined,
    ReducePlus,
    ReducePlusRefined,
    /// Even the first-order update violates the bound.
    Origin,
}

fn clip(poly: &[(f64, f64)], g: (f64, f64), c: f64) -> Vec<(f64, f64)> {
    // keep g . p >= c
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        let fp = g.0 * p.0 + g.1 * p.1 - c;
        let fq = g.0 * q.0 + g.1 * q.1 - c;
        if fp >= 0.0 {
            out.push(p);
        }
        if (fp >= 0.0) != (fq >= 0.0) {
            let t = fp / (fp - fq);
            out.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
        }
    }
    out
}

fn area(poly: &[(f64, f64)]) -> f64 {
    let mut a = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        a += p.0 * q.1 - q.0 * p.1;
    }
    0.5 * a.abs()
}

/// True if `[0, x] x [0, y]` lies in the union of the half-planes `g . p <= c`.
fn rectangle_certified(x: f64, y: f64, lines: &[((f64, f64), f64)]) -> bool {
    let rect = x * y;
    if rect <= 0.0 {
        return lines.iter().any(|(g, c)| (g.0 * x).max(0.0) + (g.1 * y).max(0.0) <= *c);
    }
    let mut poly = vec![(0.0, 0.0), (x, 0.0), (x, y), (0.0, y)];
    for (g, c) in lines {
        poly = clip(&poly, *g, *c);
        if poly.len() < 3 {
            return true;
        }
    }
    area(&poly) <= 1e-14 * rect
}

/// Step 3 for one node: a rectangle below `a` on which `v <= v_max`.
pub fn step3_cell(cu: &CellUpdate, model: &ModelSpec, v_max: f64, a: (f64, f64)) -> ((f64, f64), Step3Case) {
    let viol = |t: (f64, f64)| !(cu.h_at(model, t, v_max) <= 0.0);
    if !viol(a) {
        return (a, Step3Case::Feasible);
    }
    if viol((0.0, 0.0)) {
        return ((0.0, 0.0), Step3Case::Origin);
    }
    let t1 = largest_feasible(|t| !viol((t * a.0, t * a.1)));
    let b1 = (t1 * a.0, t1 * a.1);
    let g = cu.h_theta_gradient(model, b1, v_max);
    if !(g.0.is_finite() && g.1.is_finite()) || (g.0 > 0.0 && g.1 > 0.0) || (g.0 <= 0.0 && g.1 <= 0.0) {
        return (b1, Step3Case::Radial);
    }
    // Local frame (p, q): p is the coordinate being reduced.
    let swap = g.0 <= 0.0;
    let to_theta = |p: f64, q: f64| if swap { (q, p) } else { (p, q) };
    let to_local = |t: (f64, f64)| if swap { (t.1, t.0) } else { t };
    let a_l = to_local(a);
    let b1_l = to_local(b1);
    let g_l = to_local(g);
    let c1 = g_l.0 * b1_l.0 + g_l.1 * b1_l.1;
    let l1 = (g_l, c1);
    let x_half = (c1 / g_l.0).clamp(0.0, a_l.0);
    let mut best = x_half;
    let mut refined = false;

    let viol_l = |p: f64, q: f64| viol(to_theta(p, q));
    let grad_l = |p: f64, q: f64| to_local(cu.h_theta_gradient(model, to_theta(p, q), v_max));
    let intersect = |la: ((f64, f64), f64), lb: ((f64, f64), f64)| -> Option<(f64, f64)> {
        let det = la.0 .0 * lb.0 .1 - la.0 .1 * lb.0 .0;
        if det.abs() < 1e-300 {
            return None;
        }
        Some(((la.1 * lb.0 .1 - la.0 .1 * lb.1) / det, (la.0 .0 * lb.1 - la.1 * lb.0 .0) / det))
    };

    let b2 = (b1_l.0, 0.0);
    type Line = ((f64, f64), f64);
    let mut candidate: Option<(f64, Line)> = None;
    if viol_l(b2.0, b2.1) {
        let t3 = largest_feasible(|t| !viol_l(t * b2.0, 0.0));
        let b3 = (t3 * b2.0, 0.0);
        let g3 = grad_l(b3.0, b3.1);
        let l2 = (g3, g3.0 * b3.0 + g3.1 * b3.1);
        if let Some(b4) = intersect(l1, l2) {
            candidate = Some((b4.0, l2));
        }
    } else {
        // search the segment b2 -> b1 for a violating point, then bisect back to b2
        let probe = (1..64).map(|i| i as f64 / 64.0).find(|s| viol_l(b2.0, s * b1_l.1));
        if let Some(s) = probe {
            let t3 = largest_feasible(|t| !viol_l(b2.0, t * s * b1_l.1));
            let b3 = (b2.0, t3 * s * b1_l.1);
            let g3 = grad_l(b3.0, b3.1);
            let l2 = (g3, g3.0 * b3.0 + g3.1 * b3.1);
            if let Some(bs) = intersect(l1, l2) {
                if !viol_l(bs.0, bs.1) && bs.0 <= b1_l.0 {
                    candidate = Some((bs.0, l2));
                }
            }
        }
    }
    if let Some((x, l2)) = candidate {
        let x = x.min(a_l.0);
        if x > best && x.is_finite() && rectangle_certified(x, a_l.1, &[l1, l2]) {
            best = x;
            refined = true;
        }
    }
    let case = match (swap, refined) {
        (false, false) => Step3Case::ReduceMinus,
        (false, true) => Step3Case::ReduceMinusRefined,
        (true, false) => Step3Case::ReducePlus,
        (true, true) => Step3Case::ReducePlusRefined,
    };
    (to_theta(best, a_l.1), case)
}

/// Inputs of [`select_theta`]: interface fluxes are indexed `0..=N`, interface
/// `i` lying left of node `i`. On periodic domains interfaces `0` and `N`
/// coincide and share one parameter.
#[derive(Debug, Clone, Copy)]
pub struct LimiterInput<'a> {
    pub model: &'a ModelSpec,
    pub cells: &'a [ConservedCell],
    pub high: &'a [[f64; 3]],
    pub low: &'a [[f64; 3]],
    pub lambda: f64,
    pub boxes: &'a [InvariantBox],
    pub periodic: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LimiterStats {
    pub limited_interfaces: usize,
    pub step3_iterations: usize,
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaField {
    pub theta: Vec<f64>,
    pub lambda1: Vec<(f64, f64)>,
    pub lambda2: Vec<(f64, f64)>,
    pub lambda3: Vec<(f64, f64)>,
    pub stats: LimiterStats,
}

impl<'a> LimiterInput<'a> {
    pub fn n(&self) -> usize {
        self.cells.len()
    }

    pub fn left(&self, j: usize) -> usize {
        j
    }

    pub fn right(&self, j: usize) -> usize {
        if self.periodic && j + 1 == self.n() {
            0
        } else {
            j + 1
        }
    }

    pub fn cell_update(&self, j: usize) -> CellUpdate {
        let (l, r) = (self.left(j), self.right(j));
        CellUpdate {
            state: self.cells[j],
            high_minus: self.high[l],
            low_minus: self.low[l],
            high_plus: self.high[r],
            low_plus: self.low[r],
            lambda: self.lambda,
        }
    }

    /// Update of every node under the interface parameters `theta`.
    pub fn apply(&self, theta: &[f64]) -> Vec<ConservedCell> {
        (0..self.n()).map(|j| self.cell_update(j).eval(theta[self.left(j)], theta[self.right(j)])).collect()
    }

    fn neighbours(&self, j: usize) -> [Option<usize>; 2] {
        let n = self.n();
        if self.periodic {
            [Some((j + n - 1) % n), Some((j + 1) % n)]
        } else {
            [j.checked_sub(1), if j + 1 < n { Some(j + 1) } else { None }]
        }
    }
}

/// Limiter parameters per interface such that every updated node lies in its box.
pub fn select_theta(input: &LimiterInput) -> Result<ThetaField> {
    let n = input.n();
    let model = input.model;
    let with_node = |j: usize| move |e: Error| match e {
        Error::LimiterFailure { reason, .. } => Error::LimiterFailure { node: j, reason },
        other => other,
    };

    // The unlimited update is itself a certificate; the decoupled rectangles
    // below can be stricter than needed when a box is tight.
    let ones = vec![1.0f64; n + 1];
    let unlimited = input.apply(&ones);
    if unlimited.iter().zip(input.boxes).all(|(u, b)| u.jac > b.eps_j && b.admits(model, u, 0.0)) {
        let full = vec![(1.0, 1.0); n];
        return Ok(ThetaField { theta: ones, lambda1: full.clone(), lambda2: full.clone(), lambda3: full, stats: LimiterStats::default() });
    }

    let mut lambda1 = Vec::with_capacity(n);
    let mut lambda2 = Vec::with_capacity(n);
    let mut theta = vec![1.0f64; n + 1];
    for j in 0..n {
        let cu = input.cell_update(j);
        let b = &input.boxes[j];
        let (gamma, dm, dp) = step1_data(&cu, b);
        let l1 = step1_linear(&gamma, &dm, &dp, input.lambda).map_err(with_node(j))?;
        let l2 = step2_vmin(&cu, model, l1, b.v_min).map_err(with_node(j))?;
        let (l, r) = (input.left(j), input.right(j));
        theta[l] = theta[l].min(l2.0);
        theta[r] = theta[r].min(l2.1);
        lambda1.push(l1);
        lambda2.push(l2);
    }

    let mut stats = LimiterStats::default();
    let violates = |theta: &[f64], j: usize| {
        let cu = input.cell_update(j);
        !(cu.h_at(model, (theta[input.left(j)], theta[input.right(j)]), input.boxes[j].v_max) <= 0.0)
    };
    let mut queue: VecDeque<usize> = (0..n).filter(|&j| violates(&theta, j)).collect();
    let mut queued = vec![false; n];
    for &j in &queue {
        queued[j] = true;
    }
    let cap = 10 * n;
    while let Some(j) = queue.pop_front() {
        queued[j] = false;
        if !violates(&theta, j) {
            continue;
        }
        if stats.step3_iterations >= cap {
            queue.push_front(j);
            queued[j] = true;
            break;
        }
        stats.step3_iterations += 1;
        let (l, r) = (input.left(j), input.right(j));
        let cu = input.cell_update(j);
        let ((tm, tp), _) = step3_cell(&cu, model, input.boxes[j].v_max, (theta[l], theta[r]));
        theta[l] = theta[l].min(tm);
        theta[r] = theta[r].min(tp);
        for nb in input.neighbours(j).into_iter().flatten().chain(std::iter::once(j)) {
            if !queued[nb] && violates(&theta, nb) {
                queued[nb] = true;
                queue.push_back(nb);
            }
        }
    }

    // Fallback: first-order flux at every interface of a node still out of bounds.
    for _ in 0..=n + 1 {
        let bad: Vec<usize> = (0..n)
            .filter(|&j| {
                let cu = input.cell_update(j);
                let u = cu.eval(theta[input.left(j)], theta[input.right(j)]);
                !input.boxes[j].admits(model, &u, VERIFY_TOL) || violates(&theta, j)
            })
            .collect();
        if bad.is_empty() {
            break;
        }
        for &j in &bad {
            let (l, r) = (input.left(j), input.right(j));
            if theta[l] != 0.0 || theta[r] != 0.0 {
                stats.fallbacks += 1;
            }
            theta[l] = 0.0;
            theta[r] = 0.0;
        }
    }
    for j in 0..n {
        let cu = input.cell_update(j);
        let u = cu.eval(theta[input.left(j)], theta[input.right(j)]);
        if !input.boxes[j].admits(model, &u, VERIFY_TOL) {
            return Err(Error::LimiterFailure { node: j, reason: format!("first-order update out of bounds: {u:?}") });
        }
    }
    if input.periodic {
        theta[n] = theta[0];
    }
    let interior = if input.periodic { n } else { n + 1 };
    stats.limited_interfaces = theta[..interior].iter().filter(|t| **t < 1.0).count();
    let lambda3 = (0..n).map(|j| (theta[input.left(j)], theta[input.right(j)])).collect();
    Ok(ThetaField { theta, lambda1, lambda2, lambda3, stats })
}
