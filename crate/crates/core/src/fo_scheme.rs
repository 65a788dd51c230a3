//! First-order bound-preserving scheme on the moving mesh.
//!
//! With the mesh speed equal to the flow speed, `(J phi)` and `(J y)` are
//! frozen per node and only the Jacobian moves:
//! `J_j <- J_j + lambda (v_{j+1} - v_j)`. The interface flux is
//! `g_{j+1/2} = (0, 0, -v_{j+1})`.

use crate::bp::InvariantBox;
use crate::error::{Error, Result};
use crate::mesh::{self, Boundary, MovingState};
use crate::model::{ModelSpec, Primitive};

/// Per-interface first-order flux; interface `i` sits left of node `i`.
///
/// `v_ext` is the nodal speed with one extra entry at the end holding the
/// speed right of the last node.
pub fn first_order_fluxes(v_ext: &[f64]) -> Vec<[f64; 3]> {
    v_ext.iter().map(|&v| [0.0, 0.0, -v]).collect()
}

/// Nodal speeds plus the right-boundary value required by the last interface.
pub fn speeds_with_right_ghost(prims: &[Primitive], boundary: &Boundary) -> Vec<f64> {
    let mut v: Vec<f64> = prims.iter().map(|p| p.v).collect();
    let ghost = match boundary {
        Boundary::Periodic { .. } => v[0],
        Boundary::Outflow => v[v.len() - 1],
        Boundary::Coupled { right, .. } => right.prim.v,
    };
    v.push(ghost);
    v
}

/// Certified step bounds `(dtau*, dtau**)` of one node.
///
/// `v_here` and `v_next` are the speeds at the node and at its right
/// neighbour. Either bound is `+inf` when the node does not constrain it.
#[allow(clippy::too_many_arguments)]
pub fn node_dtau_bounds(
    model: &ModelSpec,
    jac: f64,
    phi: f64,
    k: f64,
    v_here: f64,
    v_next: f64,
    d_xi: f64,
    bounds: &InvariantBox,
) -> (f64, f64) {
    let star = if v_here > v_next {
        d_xi / (v_here - v_next) * (jac - bounds.eps_j).min(jac * (1.0 - phi))
    } else {
        f64::INFINITY
    };

    let expanding = v_here < v_next;
    let compressing = v_here > v_next;
    let mut star2 = f64::INFINITY;
    if expanding {
        let applies = match model {
            ModelSpec::ArzLog { .. } => true,
            _ => k > bounds.v_max,
        };
        if applies {
            if let Ok(check) = model.bound_inverse_density(k, bounds.v_max) {
                if check > 0.0 {
                    star2 = d_xi * jac * (phi - check) / (check * (v_next - v_here));
                }
            }
        }
    } else if compressing {
        let hat = match model {
            ModelSpec::Sedimentation if bounds.v_min <= 0.0 => None,
            _ => model.bound_inverse_density(k, bounds.v_min).ok(),
        };
        if let Some(hat) = hat {
            if hat > 0.0 {
                star2 = d_xi * jac * (hat - phi) / (hat * (v_here - v_next));
            }
        }
    }
    (star.max(0.0), star2.max(0.0))
}

/// Largest step for which the first-order update keeps every node in its box.
pub fn bp_max_dtau(
    state: &MovingState,
    model: &ModelSpec,
    boundary: &Boundary,
    d_xi: f64,
    boxes: &[InvariantBox],
) -> Result<f64> {
    let prims = state.primitives(model)?;
    let v = speeds_with_right_ghost(&prims, boundary);
    Ok(bp_max_dtau_from(model, state, &prims, &v, d_xi, boxes))
}

pub(crate) fn bp_max_dtau_from(
    model: &ModelSpec,
    state: &MovingState,
    prims: &[Primitive],
    v_ext: &[f64],
    d_xi: f64,
    boxes: &[InvariantBox],
) -> f64 {
    let mut best = f64::INFINITY;
    for (j, (c, p)) in state.cells.iter().zip(prims).enumerate() {
        let (a, b) = node_dtau_bounds(model, c.jac, p.phi, p.k, v_ext[j], v_ext[j + 1], d_xi, &boxes[j]);
        best = best.min(a).min(b);
    }
    best
}

/// One first-order step. Fails if `d_tau` is not below the certified bound.
pub fn fo_step(
    state: &MovingState,
    model: &ModelSpec,
    boundary: &Boundary,
    d_xi: f64,
    d_tau: f64,
    boxes: &[InvariantBox],
) -> Result<MovingState> {
    let prims = state.primitives(model)?;
    let v = speeds_with_right_ghost(&prims, boundary);
    let bound = bp_max_dtau_from(model, state, &prims, &v, d_xi, boxes);
    if !(d_tau < bound) {
        return Err(Error::StepTooLarge { d_tau, bound });
    }
    Ok(fo_step_unchecked(state, &v, d_xi, d_tau))
}

/// First-order update without the step-size certificate.
pub fn fo_step_unchecked(state: &MovingState, v_ext: &[f64], d_xi: f64, d_tau: f64) -> MovingState {
    let lambda = d_tau / d_xi;
    let flux = first_order_fluxes(v_ext);
    let mut next = state.clone();
    for (j, c) in next.cells.iter_mut().enumerate() {
        c.jac -= lambda * (flux[j + 1][2] - flux[j][2]);
    }
    mesh::advance_positions(&mut next.x_pos, &[&v_ext[..state.len()]], d_tau);
    next.tau += d_tau;
    next.step_index += 1;
    next
}
