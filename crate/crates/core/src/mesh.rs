//! Computational grid, moving physical positions and the nodal state.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ConservedCell, ModelSpec, Primitive};

/// Halo width needed by the five-point WENO stencils.
pub const GHOSTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub xi_left: f64,
    pub xi_right: f64,
    pub n_cells: usize,
    pub d_xi: f64,
}

impl Grid1D {
    pub fn new(xi_left: f64, xi_right: f64, n_cells: usize) -> Result<Self> {
        if n_cells == 0 {
            return Err(Error::EmptyGrid);
        }
        if !(xi_right > xi_left) {
            return Err(Error::Config(format!("empty interval [{xi_left}, {xi_right}]")));
        }
        Ok(Self { xi_left, xi_right, n_cells, d_xi: (xi_right - xi_left) / n_cells as f64 })
    }

    /// Node coordinate `xi_j`, 0-based.
    pub fn node(&self, j: usize) -> f64 {
        self.xi_left + (j as f64 + 0.5) * self.d_xi
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_cells).map(|j| self.node(j))
    }

    pub fn length(&self) -> f64 {
        self.xi_right - self.xi_left
    }
}

/// How values beyond the first and last node are formed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Boundary {
    /// Periodic wrap; ghost positions are shifted by the physical period.
    Periodic { period: f64 },
    /// Zeroth-order extrapolation of the state (and hence of `v`).
    Outflow,
    /// Constant ghost states on both ends, supplied by junction coupling.
    Coupled { left: GhostState, right: GhostState },
}

/// A ghost node's conserved triple together with its primitive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GhostState {
    pub cell: ConservedCell,
    pub prim: Primitive,
}

impl GhostState {
    pub fn from_primitive(model: &ModelSpec, phi: f64, v: f64, jac: f64) -> Result<Self> {
        let cell = model.conserved_from_primitive(phi, v, jac)?;
        Ok(Self { cell, prim: Primitive { phi, v, k: cell.k() } })
    }
}

impl Boundary {
    pub fn is_periodic(&self) -> bool {
        matches!(self, Boundary::Periodic { .. })
    }
}

/// Which time integrator moves the node positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionUpdate {
    /// Same stage combination as the state (`x += dt/6 (c0 + c1 + 4 c2)`).
    #[default]
    Rk3,
    /// `x^{n+1} = x^n + c^n dt`, using the step's initial speeds only.
    ForwardEuler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovingState {
    pub cells: Vec<ConservedCell>,
    pub x_pos: Vec<f64>,
    pub tau: f64,
    pub step_index: usize,
}

impl MovingState {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn primitives(&self, model: &ModelSpec) -> Result<Vec<Primitive>> {
        self.cells.iter().map(|c| model.primitive_from_conserved(c)).collect()
    }

    /// Stage-safe primitives (see [`ModelSpec::primitive_for_flux`]).
    pub fn flux_primitives(&self, model: &ModelSpec) -> Result<Vec<Primitive>> {
        self.cells.iter().map(|c| model.primitive_for_flux(c)).collect()
    }

    pub fn sum_j_phi(&self) -> f64 {
        compensated_sum(self.cells.iter().map(|c| c.j_phi))
    }

    pub fn sum_j_y(&self) -> f64 {
        compensated_sum(self.cells.iter().map(|c| c.j_y))
    }

    pub fn sum_jac(&self) -> f64 {
        compensated_sum(self.cells.iter().map(|c| c.jac))
    }

    /// Write `x, phi, v, k, J` per node.
    pub fn write_csv(&self, model: &ModelSpec, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv_to(model, &mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_csv_to<W: Write>(&self, model: &ModelSpec, out: &mut W) -> Result<()> {
        writeln!(out, "x,phi,v,k,J")?;
        for (c, x) in self.cells.iter().zip(&self.x_pos) {
            let p = model.primitive_for_flux(c)?;
            writeln!(out, "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}", x, c.phi(), p.v, p.k, c.jac)?;
        }
        Ok(())
    }
}

/// Build the initial state with `J = 1` and `x_j = xi_j`.
pub fn init_state<F, G>(grid: &Grid1D, model: &ModelSpec, phi0: F, v0: G) -> Result<MovingState>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    let mut cells = Vec::with_capacity(grid.n_cells);
    for (j, xi) in grid.nodes().enumerate() {
        let (phi, v) = (phi0(xi), v0(xi));
        if !(phi > 0.0 && phi < 1.0) || !v.is_finite() {
            return Err(Error::InvalidInitialData {
                node: j,
                reason: format!("phi = {phi}, v = {v}"),
            });
        }
        cells.push(model.conserved_from_primitive(phi, v, 1.0)?);
    }
    Ok(MovingState { cells, x_pos: grid.nodes().collect(), tau: 0.0, step_index: 0 })
}

/// Advance node positions with the stage speeds of one step.
///
/// `stage_speeds` holds one speed vector per stage: one for forward Euler,
/// three for the RK3 combination.
pub fn advance_positions(x_pos: &mut [f64], stage_speeds: &[&[f64]], d_tau: f64) {
    match stage_speeds {
        [c0] => {
            for (x, c) in x_pos.iter_mut().zip(c0.iter()) {
                *x += d_tau * c;
            }
        }
        [c0, c1, c2] => {
            for (j, x) in x_pos.iter_mut().enumerate() {
                *x += d_tau / 6.0 * (c0[j] + c1[j] + 4.0 * c2[j]);
            }
        }
        _ => panic!("advance_positions expects 1 or 3 stage speed vectors"),
    }
}

/// Neumaier summation, so that conservation checks measure the scheme and not the sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for x in values {
        let t = sum + x;
        carry += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + carry
}

/// Fraction of the Jacobian-consistent spacing below which a node gap is repaired.
pub const REPAIR_RATIO: f64 = 0.5;

/// Re-lay runs of nodes whose gaps fell below `REPAIR_RATIO` of
/// `d_xi (J_j + J_{j+1}) / 2`.
///
/// Each run is widened until its end nodes are far enough apart and the
/// interior is redistributed in proportion to the consistent spacings, so
/// positions come out strictly increasing whenever `jac > 0`. Returns the
/// number of moved nodes.
pub fn repair_positions(x_pos: &mut [f64], jac: &[f64], d_xi: f64) -> usize {
    let n = x_pos.len();
    if n < 2 {
        return 0;
    }
    let target: Vec<f64> = jac.windows(2).map(|w| 0.5 * d_xi * (w[0] + w[1])).collect();
    let bad = |x: &[f64], j: usize| x[j + 1] - x[j] < REPAIR_RATIO * target[j];
    let mut moved = 0;
    let mut j = 0;
    while j + 1 < n {
        if !bad(x_pos, j) {
            j += 1;
            continue;
        }
        let (mut lo, mut hi) = (j, j + 1);
        while hi + 1 < n && bad(x_pos, hi) {
            hi += 1;
        }
        loop {
            let need: f64 = target[lo..hi].iter().sum();
            if x_pos[hi] - x_pos[lo] >= REPAIR_RATIO * need || (lo == 0 && hi == n - 1) {
                break;
            }
            lo = lo.saturating_sub(1);
            hi = (hi + 1).min(n - 1);
        }
        let need: f64 = target[lo..hi].iter().sum();
        let span = x_pos[hi] - x_pos[lo];
        // Hold both ends when they leave room; otherwise lay out from the left end.
        let hold_right = span >= REPAIR_RATIO * need;
        let scale = if hold_right { span / need } else { 1.0 };
        let end = if hold_right { hi - 1 } else { hi };
        let mut acc = x_pos[lo];
        for m in lo + 1..=end {
            acc += scale * target[m - 1];
            x_pos[m] = acc;
        }
        moved += end - lo;
        j = hi;
    }
    moved
}

/// Copy `values` into a buffer with `GHOSTS` halo entries on each side.
///
/// Coupled ends fall back to constant extension here; [`extend_states`] fills their ghosts.
pub fn extend<T: Copy>(values: &[T], boundary: &Boundary) -> Vec<T> {
    let n = values.len();
    let mut out = Vec::with_capacity(n + 2 * GHOSTS);
    for g in 0..GHOSTS {
        let idx = match boundary {
            Boundary::Periodic { .. } => (n * GHOSTS + g - GHOSTS) % n,
            _ => 0,
        };
        out.push(values[idx]);
    }
    out.extend_from_slice(values);
    for g in 0..GHOSTS {
        let idx = match boundary {
            Boundary::Periodic { .. } => g % n,
            _ => n - 1,
        };
        out.push(values[idx]);
    }
    out
}

/// Haloed cells and primitives; coupled ends take their ghost states.
pub fn extend_states(cells: &[ConservedCell], prims: &[Primitive], boundary: &Boundary) -> (Vec<ConservedCell>, Vec<Primitive>) {
    let mut c = extend(cells, boundary);
    let mut p = extend(prims, boundary);
    if let Boundary::Coupled { left, right } = boundary {
        let m = c.len();
        for g in 0..GHOSTS {
            c[g] = left.cell;
            p[g] = left.prim;
            c[m - 1 - g] = right.cell;
            p[m - 1 - g] = right.prim;
        }
    }
    (c, p)
}

/// Value at `x` of the Lagrange polynomial through `pts`.
pub fn lagrange_eval(pts: &[(f64, f64)], x: f64) -> f64 {
    let mut sum = 0.0;
    for (i, (xi, yi)) in pts.iter().enumerate() {
        let mut w = 1.0;
        for (m, (xm, _)) in pts.iter().enumerate() {
            if m != i {
                w *= (x - xm) / (xi - xm);
            }
        }
        sum += w * yi;
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_keeps_small_terms() {
        assert_eq!(compensated_sum([1e16, 1.0, -1e16]), 1.0);
        assert_eq!(compensated_sum([0.1; 10]), 1.0);
    }

    #[test]
    fn repair_leaves_consistent_positions_alone() {
        let mut x = vec![0.05, 0.15, 0.25, 0.35];
        assert_eq!(repair_positions(&mut x, &[1.0; 4], 0.1), 0);
        assert_eq!(x, vec![0.05, 0.15, 0.25, 0.35]);
    }

    #[test]
    fn repair_untangles_crossed_nodes() {
        let mut x = vec![0.0, 0.1, 0.2, 0.31, 0.29, 0.5, 0.6, 0.7];
        let jac = [1.0, 1.0, 1.0, 0.5, 1.5, 1.0, 1.0, 1.0];
        let moved = repair_positions(&mut x, &jac, 0.1);
        assert!(moved > 0);
        assert!(x.windows(2).all(|w| w[1] > w[0]));
        assert_eq!((x[0], x[7]), (0.0, 0.7));
    }

    #[test]
    fn grid_nodes() {
        let g = Grid1D::new(0.0, 1.0, 4).unwrap();
        assert_eq!(g.d_xi, 0.25);
        assert_eq!(g.node(0), 0.125);
        assert_eq!(g.node(3), 0.875);
        assert!(Grid1D::new(0.0, 1.0, 0).is_err());
    }

    #[test]
    fn init_example_51() {
        let model = ModelSpec::ArzLog { v_ref: 0.4 };
        let g = Grid1D::new(0.0, 1.0, 20).unwrap();
        let s = init_state(&g, &model, |_| 0.5, |x| 0.1 + 0.4 * (2.0 * std::f64::consts::PI * x).cos())
            .unwrap();
        assert!(s.cells.iter().all(|c| c.j_phi == 0.5 && c.jac == 1.0));
        assert_eq!(s.x_pos, g.nodes().collect::<Vec<_>>());
    }

    #[test]
    fn init_near_vacuum_and_constant() {
        let model = ModelSpec::ArzPower { gamma: 1.0, v_ref: 1.0 };
        let g = Grid1D::new(-1.0, 1.0, 10).unwrap();
        let s = init_state(&g, &model, |x| if x < 0.0 { 0.5 } else { 1e-8 }, |x| if x < 0.0 { 0.1 } else { 0.4 })
            .unwrap();
        assert!(s.cells.iter().all(|c| c.j_phi > 0.0));
        let c = init_state(&g, &model, |_| 0.3, |_| 0.2).unwrap();
        assert!(c.cells.windows(2).all(|w| w[0] == w[1]));
        assert!(init_state(&g, &model, |_| 1.2, |_| 0.2).is_err());
    }

    #[test]
    fn positions_constant_speed() {
        let mut x = vec![0.0, 1.0, 2.0];
        let v = [0.5; 3];
        advance_positions(&mut x, &[&v, &v, &v], 0.1);
        for (a, b) in x.iter().zip([0.05, 1.05, 2.05]) {
            assert!((a - b).abs() < 1e-15);
        }
        let mut y = vec![0.0, 1.0];
        let zero = [0.0; 2];
        advance_positions(&mut y, &[&zero, &zero, &zero], 0.1);
        assert_eq!(y, vec![0.0, 1.0]);
    }

    #[test]
    fn extend_periodic_and_outflow() {
        let v = [1, 2, 3, 4, 5];
        assert_eq!(extend(&v, &Boundary::Periodic { period: 1.0 }), vec![3, 4, 5, 1, 2, 3, 4, 5, 1, 2, 3]);
        assert_eq!(extend(&v, &Boundary::Outflow), vec![1, 1, 1, 1, 2, 3, 4, 5, 5, 5, 5]);
    }

    #[test]
    fn csv_header() {
        let model = ModelSpec::Sedimentation;
        let g = Grid1D::new(0.0, 1.0, 2).unwrap();
        let s = init_state(&g, &model, |_| 0.4, |_| 0.1).unwrap();
        let mut buf = Vec::new();
        s.write_csv_to(&model, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,phi,v,k,J\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
