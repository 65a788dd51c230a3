//! Component-wise WENO5 interface fluxes with local Lax-Friedrichs splitting.

use crate::error::Result;
use crate::mesh::{self, Boundary, MovingState, GHOSTS};
use crate::model::{ConservedCell, ModelSpec, Primitive};

const EPS_W: f64 = 1e-6;
const LINEAR_WEIGHTS: [f64; 3] = [0.1, 0.6, 0.3];

/// Curvilinear flux `((v - c) phi, (v - c) y, -c)`.
pub fn pointwise_flux(model: &ModelSpec, cell: &ConservedCell, c: f64) -> Result<[f64; 3]> {
    let p = model.primitive_from_conserved(cell)?;
    let w = p.v - c;
    Ok([w * cell.phi(), w * p.phi * p.k, -c])
}

/// Flux with the mesh moving at the local flow speed.
#[inline]
fn moving_flux(p: &Primitive) -> [f64; 3] {
    [0.0, 0.0, -p.v]
}

#[inline]
fn as_array(c: &ConservedCell) -> [f64; 3] {
    [c.j_phi, c.j_y, c.jac]
}

/// Left-biased fifth-order reconstruction at the right edge of `s[2]`.
#[inline]
fn reconstruct(s: [f64; 5]) -> f64 {
    let [a, b, c, d, e] = s;
    let q0 = (2.0 * a - 7.0 * b + 11.0 * c) / 6.0;
    let q1 = (-b + 5.0 * c + 2.0 * d) / 6.0;
    let q2 = (2.0 * c + 5.0 * d - e) / 6.0;
    let b0 = 13.0 / 12.0 * (a - 2.0 * b + c).powi(2) + 0.25 * (a - 4.0 * b + 3.0 * c).powi(2);
    let b1 = 13.0 / 12.0 * (b - 2.0 * c + d).powi(2) + 0.25 * (b - d).powi(2);
    let b2 = 13.0 / 12.0 * (c - 2.0 * d + e).powi(2) + 0.25 * (3.0 * c - 4.0 * d + e).powi(2);
    let w0 = LINEAR_WEIGHTS[0] / (EPS_W + b0).powi(2);
    let w1 = LINEAR_WEIGHTS[1] / (EPS_W + b1).powi(2);
    let w2 = LINEAR_WEIGHTS[2] / (EPS_W + b2).powi(2);
    (w0 * q0 + w1 * q1 + w2 * q2) / (w0 + w1 + w2)
}

/// WENO5 fluxes from halo-extended data.
///
/// `cells` and `prims` carry `GHOSTS` entries on each side; the result has
/// one flux per interface, `N + 1` in total, interface `i` lying left of
/// interior node `i`.
pub fn weno5_from_extended(model: &ModelSpec, cells: &[ConservedCell], prims: &[Primitive]) -> Vec<[f64; 3]> {
    debug_assert_eq!(cells.len(), prims.len());
    let n = cells.len() - 2 * GHOSTS;
    let u: Vec<[f64; 3]> = cells.iter().map(as_array).collect();
    let f: Vec<[f64; 3]> = prims.iter().map(moving_flux).collect();
    let speed: Vec<f64> = prims.iter().map(|p| model.max_speed(p)).collect();

    (0..=n)
        .map(|i| {
            let us = &u[i..i + 6];
            let fs = &f[i..i + 6];
            if us.iter().all(|x| *x == us[0]) && fs.iter().all(|x| *x == fs[0]) {
                return fs[0];
            }
            let alpha = speed[i..i + 6].iter().fold(0.0f64, |m, s| m.max(*s));
            let mut out = [0.0; 3];
            for (comp, o) in out.iter_mut().enumerate() {
                let plus = |m: usize| 0.5 * (fs[m][comp] + alpha * us[m][comp]);
                let minus = |m: usize| 0.5 * (fs[m][comp] - alpha * us[m][comp]);
                let fp = reconstruct([plus(0), plus(1), plus(2), plus(3), plus(4)]);
                let fm = reconstruct([minus(5), minus(4), minus(3), minus(2), minus(1)]);
                *o = fp + fm;
            }
            out
        })
        .collect()
}

/// WENO5 interface fluxes of a state with halo data from `boundary`.
pub fn weno5_interface_fluxes(state: &MovingState, model: &ModelSpec, boundary: &Boundary) -> Result<Vec<[f64; 3]>> {
    let prims = state.flux_primitives(model)?;
    let (cells, prims) = mesh::extend_states(&state.cells, &prims, boundary);
    Ok(weno5_from_extended(model, &cells, &prims))
}
