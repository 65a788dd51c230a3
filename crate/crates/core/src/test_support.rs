//! Shared generators for the property tests.

use std::f64::consts::PI;

use proptest::prelude::*;

use crate::mesh::{init_state, Grid1D, MovingState};
use crate::model::{ConservedCell, ModelSpec};

pub fn model_strategy() -> impl Strategy<Value = ModelSpec> {
    prop_oneof![
        (0.5f64..3.0, 0.5f64..2.0).prop_map(|(gamma, v_ref)| ModelSpec::ArzPower { gamma, v_ref }),
        (0.2f64..2.0).prop_map(|v_ref| ModelSpec::ArzLog { v_ref }),
        Just(ModelSpec::Sedimentation),
    ]
}

pub fn arz_strategy() -> impl Strategy<Value = ModelSpec> {
    prop_oneof![
        (0.5f64..3.0, 0.5f64..2.0).prop_map(|(gamma, v_ref)| ModelSpec::ArzPower { gamma, v_ref }),
        (0.2f64..2.0).prop_map(|v_ref| ModelSpec::ArzLog { v_ref }),
    ]
}

/// A valid conserved cell of `model` from `(phi, v, J)`.
pub fn cell(model: &ModelSpec, phi: f64, v: f64, jac: f64) -> ConservedCell {
    model.conserved_from_primitive(phi, v, jac).unwrap()
}

/// Smooth periodic state on `[0, 1)`.
pub fn smooth_state(model: &ModelSpec, n: usize, phi: (f64, f64, f64), v: (f64, f64, f64)) -> (Grid1D, MovingState) {
    let grid = Grid1D::new(0.0, 1.0, n).unwrap();
    let state = init_state(
        &grid,
        model,
        |x| phi.0 + phi.1 * (2.0 * PI * x + phi.2).sin(),
        |x| v.0 + v.1 * (2.0 * PI * x + v.2).cos(),
    )
    .unwrap();
    (grid, state)
}

/// True if no node would outrun the slowest node even when packed to `phi = 1`,
/// so first-order compression cannot saturate the density.
pub fn jam_free(model: &ModelSpec, state: &MovingState) -> bool {
    let prims = state.primitives(model).unwrap();
    let v_min = prims.iter().map(|p| p.v).fold(f64::INFINITY, f64::min);
    prims.iter().all(|p| {
        let packed = match model {
            ModelSpec::Sedimentation => 0.0,
            _ => p.k - model.pressure_unchecked(1.0),
        };
        packed < v_min
    })
}

pub fn smooth_params() -> impl Strategy<Value = ((f64, f64, f64), (f64, f64, f64))> {
    ((0.3f64..0.6, 0.0f64..0.2, 0.0f64..6.3), (0.2f64..0.5, 0.0f64..0.15, 0.0f64..6.3))
}
