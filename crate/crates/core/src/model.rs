//! Temple-class model physics.
//!
//! Both models share the conservative form `U_t + (v U)_x = 0` with
//! `U = (phi, y)` and the Riemann invariants `k = y / phi` and `v`. They
//! differ only in how `v` depends on `(phi, k)`:
//!
//! * ARZ traffic: `v = k - p(phi)`, with `p = (v_ref / gamma) phi^gamma` for
//!   `gamma > 0` or `p = v_ref ln(phi)` for `gamma = 0`.
//! * Sedimentation: `v = k p(phi)` with `p = (1 - phi)^2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Admissible band used when a stage value has to be evaluated outside `(0, 1)`.
pub const PHI_EVAL_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// ARZ with power-law pressure, `gamma > 0`.
    ArzPower { gamma: f64, v_ref: f64 },
    /// ARZ with logarithmic pressure (`gamma = 0`).
    ArzLog { v_ref: f64 },
    Sedimentation,
}

/// Curvilinear conserved triple `(J phi, J y, J)` at one node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConservedCell {
    pub j_phi: f64,
    pub j_y: f64,
    pub jac: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub phi: f64,
    pub v: f64,
    pub k: f64,
}

impl ConservedCell {
    pub fn new(j_phi: f64, j_y: f64, jac: f64) -> Self {
        Self { j_phi, j_y, jac }
    }

    pub fn phi(&self) -> f64 {
        self.j_phi / self.jac
    }

    pub fn k(&self) -> f64 {
        self.j_y / self.j_phi
    }

    pub fn is_finite(&self) -> bool {
        self.j_phi.is_finite() && self.j_y.is_finite() && self.jac.is_finite()
    }
}

impl ModelSpec {
    /// ARZ model for a given `gamma`; `gamma == 0` selects the logarithmic pressure.
    pub fn arz(gamma: f64, v_ref: f64) -> Result<Self> {
        if !(v_ref > 0.0) {
            return Err(Error::Config(format!("v_ref must be positive, got {v_ref}")));
        }
        if gamma == 0.0 {
            Ok(ModelSpec::ArzLog { v_ref })
        } else if gamma > 0.0 {
            Ok(ModelSpec::ArzPower { gamma, v_ref })
        } else {
            Err(Error::Config(format!("gamma must be non-negative, got {gamma}")))
        }
    }

    pub fn is_arz(&self) -> bool {
        !matches!(self, ModelSpec::Sedimentation)
    }

    fn check_phi(phi: f64) -> Result<()> {
        if phi > 0.0 && phi < 1.0 {
            Ok(())
        } else {
            Err(Error::domain("phi", phi))
        }
    }

    pub fn pressure(&self, phi: f64) -> Result<f64> {
        Self::check_phi(phi)?;
        Ok(self.pressure_unchecked(phi))
    }

    /// `p(phi)` without the domain guard. Callers must ensure `phi > 0`.
    #[inline]
    pub fn pressure_unchecked(&self, phi: f64) -> f64 {
        match *self {
            ModelSpec::ArzPower { gamma, v_ref } => v_ref / gamma * phi.powf(gamma),
            ModelSpec::ArzLog { v_ref } => v_ref * phi.ln(),
            ModelSpec::Sedimentation => (1.0 - phi) * (1.0 - phi),
        }
    }

    /// `p'(phi)`.
    #[inline]
    pub fn pressure_derivative(&self, phi: f64) -> f64 {
        match *self {
            ModelSpec::ArzPower { gamma, v_ref } => v_ref * phi.powf(gamma - 1.0),
            ModelSpec::ArzLog { v_ref } => v_ref / phi,
            ModelSpec::Sedimentation => -2.0 * (1.0 - phi),
        }
    }

    #[inline]
    fn velocity_unchecked(&self, phi: f64, k: f64) -> f64 {
        match self {
            ModelSpec::Sedimentation => k * self.pressure_unchecked(phi),
            _ => k - self.pressure_unchecked(phi),
        }
    }

    pub fn velocity(&self, phi: f64, k: f64) -> Result<f64> {
        Self::check_phi(phi)?;
        Ok(self.velocity_unchecked(phi, k))
    }

    /// The invariant `k` of the state with density `phi` and speed `v`.
    pub fn k_from_phi_v(&self, phi: f64, v: f64) -> Result<f64> {
        let p = self.pressure(phi)?;
        match self {
            ModelSpec::Sedimentation => Ok(v / p),
            _ => Ok(v + p),
        }
    }

    pub fn conserved_from_primitive(&self, phi: f64, v: f64, jac: f64) -> Result<ConservedCell> {
        let k = self.k_from_phi_v(phi, v)?;
        let j_phi = jac * phi;
        Ok(ConservedCell::new(j_phi, j_phi * k, jac))
    }

    pub fn primitive_from_conserved(&self, c: &ConservedCell) -> Result<Primitive> {
        if !(c.jac > 0.0) {
            return Err(Error::domain("jac", c.jac));
        }
        if !(c.j_phi > 0.0) {
            return Err(Error::domain("j_phi", c.j_phi));
        }
        let phi = c.j_phi / c.jac;
        let k = c.j_y / c.j_phi;
        let v = self.velocity(phi, k)?;
        Ok(Primitive { phi, v, k })
    }

    /// Primitive values of a possibly inadmissible RK stage state.
    ///
    /// `phi` is clamped into `[PHI_EVAL_FLOOR, 1 - PHI_EVAL_FLOOR]` before the
    /// constitutive law is evaluated; `k` is computed against the clamped
    /// density so that admissible states are reproduced exactly.
    pub fn primitive_for_flux(&self, c: &ConservedCell) -> Result<Primitive> {
        if !(c.jac > 0.0) || !c.is_finite() {
            return Err(Error::domain("jac", c.jac));
        }
        let raw = c.j_phi / c.jac;
        let phi = raw.clamp(PHI_EVAL_FLOOR, 1.0 - PHI_EVAL_FLOOR);
        let k = if phi == raw { c.j_y / c.j_phi } else { c.j_y / (phi * c.jac) };
        Ok(Primitive { phi, v: self.velocity_unchecked(phi, k), k })
    }

    /// `y` on the iso-velocity curve `v = s`.
    pub fn eta(&self, phi: f64, s: f64) -> Result<f64> {
        let p = self.pressure(phi)?;
        Ok(match self {
            ModelSpec::Sedimentation => phi * s / p,
            _ => phi * (s + p),
        })
    }

    /// Constraint function `h(U; s)`; `h >= 0` iff `v(U) >= s`.
    pub fn h_constraint(&self, c: &ConservedCell, s: f64) -> Result<f64> {
        if !(c.jac > 0.0) {
            return Err(Error::domain("jac", c.jac));
        }
        if !(c.j_phi > 0.0) {
            return Err(Error::domain("j_phi", c.j_phi));
        }
        Ok(self.h_unchecked(c, s))
    }

    #[inline]
    pub(crate) fn h_unchecked(&self, c: &ConservedCell, s: f64) -> f64 {
        let phi = c.j_phi / c.jac;
        match self {
            ModelSpec::Sedimentation => c.j_y * self.pressure_unchecked(phi) - c.j_phi * s,
            _ => c.j_y - c.j_phi * (s + self.pressure_unchecked(phi)),
        }
    }

    /// Gradient of `h(.; s)` with respect to `(J phi, J y, J)`.
    #[inline]
    pub(crate) fn h_gradient(&self, c: &ConservedCell, s: f64) -> [f64; 3] {
        let phi = c.j_phi / c.jac;
        let p = self.pressure_unchecked(phi);
        let dp = self.pressure_derivative(phi);
        match self {
            ModelSpec::Sedimentation => {
                let y = c.j_y / c.jac;
                [y * dp - s, p, -y * phi * dp]
            }
            _ => [-s - p - phi * dp, 1.0, phi * phi * dp],
        }
    }

    /// Characteristic speeds `(lambda_1, lambda_2)` of `U_t + (v U)_x = 0`.
    pub fn eigen_speeds(&self, p: &Primitive) -> (f64, f64) {
        let dp = self.pressure_derivative(p.phi);
        let l1 = match self {
            ModelSpec::Sedimentation => p.v + p.phi * p.k * dp,
            _ => p.v - p.phi * dp,
        };
        (l1, p.v)
    }

    /// Largest characteristic speed magnitude.
    pub fn max_speed(&self, p: &Primitive) -> f64 {
        let (l1, l2) = self.eigen_speeds(p);
        l1.abs().max(l2.abs())
    }

    /// Density of the state with invariant `k` that sits on the curve `v = s`.
    pub fn bound_inverse_density(&self, k: f64, s: f64) -> Result<f64> {
        match *self {
            ModelSpec::ArzPower { gamma, v_ref } => {
                let arg = gamma / v_ref * (k - s);
                if arg < 0.0 {
                    return Err(Error::domain("k - s", k - s));
                }
                Ok(arg.powf(1.0 / gamma))
            }
            ModelSpec::ArzLog { v_ref } => Ok(((k - s) / v_ref).exp()),
            ModelSpec::Sedimentation => {
                if !(k > 0.0) {
                    return Err(Error::domain("k", k));
                }
                let ratio = s / k;
                if ratio < 0.0 {
                    return Err(Error::domain("s / k", ratio));
                }
                Ok(1.0 - ratio.sqrt())
            }
        }
    }

    /// Flux `phi v` of the state `(phi, k)`.
    pub(crate) fn flux_of(&self, phi: f64, k: f64) -> f64 {
        phi * self.velocity_unchecked(phi, k)
    }

    /// Density maximising `phi v(phi, k)` along the curve of constant `k`.
    pub(crate) fn critical_density(&self, k: f64) -> f64 {
        // d/dphi [phi v] = v + phi dv/dphi is decreasing on (0, 1) for both models.
        let slope = |phi: f64| -> f64 {
            let v = self.velocity_unchecked(phi, k);
            let dv = match self {
                ModelSpec::Sedimentation => k * self.pressure_derivative(phi),
                _ => -self.pressure_derivative(phi),
            };
            v + phi * dv
        };
        let hi_phi = 1.0 - PHI_EVAL_FLOOR;
        if slope(hi_phi) >= 0.0 {
            return hi_phi;
        }
        let (mut lo, mut hi) = (PHI_EVAL_FLOOR, hi_phi);
        if slope(lo) <= 0.0 {
            return lo;
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if slope(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}
