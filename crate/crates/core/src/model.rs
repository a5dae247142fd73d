//! Vector field, nullclines, Jacobian and organizing-center constants.
//!
//! The model is
//!
//! ```text
//! V' = V - V^3/3 - n^2 + I
//! n' = eps * (n_inf(V - V0) + n0 - n),   n_inf(x) = 2 / (1 + exp(-5x))
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Critical current at which the V-nullcline self-intersects.
pub const I_STAR: f64 = 2.0 / 3.0;
/// Sigmoid numerator (upper saturation of `n_inf`).
pub const SIGMOID_MAX: f64 = 2.0;
/// Sigmoid gain.
pub const SIGMOID_GAIN: f64 = 5.0;
/// Voltage window used by every scan.
pub const V_WINDOW: (f64, f64) = (-4.0, 3.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("epsilon must be positive and finite, got {0}")]
    Epsilon(f64),
    #[error("parameter `{0}` is not finite")]
    NotFinite(&'static str),
}

/// The quadruple (eps, I_app, V0, n0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub epsilon: f64,
    pub i_app: f64,
    pub v0: f64,
    pub n0: f64,
}

impl ModelParams {
    pub fn new(epsilon: f64, i_app: f64, v0: f64, n0: f64) -> Result<Self, ParamError> {
        let p = ModelParams { epsilon, i_app, v0, n0 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        for (name, x) in [("i_app", self.i_app), ("v0", self.v0), ("n0", self.n0)] {
            if !x.is_finite() {
                return Err(ParamError::NotFinite(name));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(ParamError::Epsilon(self.epsilon));
        }
        Ok(())
    }

    pub fn with_current(&self, i_app: f64) -> Self {
        ModelParams { i_app, ..*self }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        ModelParams { epsilon, ..*self }
    }

    /// Lower and upper edge of the invariant strip n in (n0, n0 + 2).
    pub fn strip(&self) -> (f64, f64) {
        (self.n0, self.n0 + SIGMOID_MAX)
    }

    pub fn strip_midpoint(&self) -> f64 {
        self.n0 + 0.5 * SIGMOID_MAX
    }

    pub fn delta0(&self) -> f64 {
        delta0(self)
    }

    pub fn k(&self) -> f64 {
        k_slope(self.v0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseState {
    pub v: f64,
    pub n: f64,
}

impl PhaseState {
    pub const fn new(v: f64, n: f64) -> Self {
        PhaseState { v, n }
    }

    pub fn dist(&self, other: &PhaseState) -> f64 {
        (self.v - other.v).hypot(self.n - other.n)
    }

    pub fn is_finite(&self) -> bool {
        self.v.is_finite() && self.n.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrganizingCenter {
    pub i_star: f64,
    pub tc_point: PhaseState,
    pub v0_star: f64,
    pub pitchfork_n0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interaction {
    Competitive,
    Cooperative,
    Degenerate,
}

/// Values of n on the V-nullcline at a given V.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NullclineValues {
    Empty,
    Pinch,
    Pair(f64, f64),
}

impl NullclineValues {
    pub fn to_vec(self) -> Vec<f64> {
        match self {
            NullclineValues::Empty => vec![],
            NullclineValues::Pinch => vec![0.0],
            NullclineValues::Pair(a, b) => vec![a, b],
        }
    }
}

pub type Mat2 = [[f64; 2]; 2];

pub fn n_inf(x: f64) -> f64 {
    SIGMOID_MAX / (1.0 + (-SIGMOID_GAIN * x).exp())
}

pub fn n_inf_prime(x: f64) -> f64 {
    // written in terms of exp(-5|x|) to avoid overflow on either tail
    let e = (-SIGMOID_GAIN * x.abs()).exp();
    SIGMOID_MAX * SIGMOID_GAIN * e / ((1.0 + e) * (1.0 + e))
}

pub fn n_inf_second(x: f64) -> f64 {
    let s = n_inf(x) / SIGMOID_MAX;
    // d/dx [M g s (1 - s)] = M g^2 s (1 - s)(1 - 2s)
    SIGMOID_MAX * SIGMOID_GAIN * SIGMOID_GAIN * s * (1.0 - s) * (1.0 - 2.0 * s)
}

/// Right-hand side of the cubic fast equation with n frozen.
pub fn fast_rate(v: f64, n: f64, i_app: f64) -> f64 {
    v - v * v * v / 3.0 - n * n + i_app
}

pub fn vector_field(p: &ModelParams, s: &PhaseState) -> (f64, f64) {
    let dv = fast_rate(s.v, s.n, p.i_app);
    let dn = p.epsilon * (n_inf(s.v - p.v0) + p.n0 - s.n);
    (dv, dn)
}

pub fn jacobian(p: &ModelParams, s: &PhaseState) -> Mat2 {
    [
        [1.0 - s.v * s.v, -2.0 * s.n],
        [p.epsilon * n_inf_prime(s.v - p.v0), -p.epsilon],
    ]
}

pub fn v_nullcline(v: f64, i_app: f64) -> NullclineValues {
    let a = v - v * v * v / 3.0 + i_app;
    // absorb rounding so that the pinch (-1, 2/3) is reported exactly
    let a = if a.abs() <= 4.0 * f64::EPSILON * (v.abs().powi(3) + i_app.abs() + 1.0) { 0.0 } else { a };
    if a > 0.0 {
        let r = a.sqrt();
        NullclineValues::Pair(-r, r)
    } else if a == 0.0 {
        NullclineValues::Pinch
    } else {
        NullclineValues::Empty
    }
}

pub fn n_nullcline(v: f64, p: &ModelParams) -> f64 {
    n_inf(v - p.v0) + p.n0
}

pub fn interaction_sign(_p: &ModelParams, s: &PhaseState) -> Interaction {
    interaction_of(s.n)
}

pub(crate) fn interaction_of(n: f64) -> Interaction {
    if n > 0.0 {
        Interaction::Competitive
    } else if n < 0.0 {
        Interaction::Cooperative
    } else {
        Interaction::Degenerate
    }
}

pub fn n0_star(v0: f64) -> f64 {
    -n_inf(-1.0 - v0)
}

pub fn k_slope(v0: f64) -> f64 {
    n_inf_prime(-1.0 - v0)
}

/// The unique V0 > -1 with `k_slope(V0) = 1`, by bisection.
pub fn v0_star() -> f64 {
    // k is strictly decreasing on (-1, inf): 2.5 at -1, -> 0 as V0 grows
    let (mut lo, mut hi) = (-1.0, 1.0);
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if k_slope(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn delta0(p: &ModelParams) -> f64 {
    p.n0 + n_inf(-1.0 - p.v0)
}

pub fn organizing_center() -> OrganizingCenter {
    let v0s = v0_star();
    OrganizingCenter {
        i_star: I_STAR,
        tc_point: PhaseState::new(-1.0, 0.0),
        v0_star: v0s,
        pitchfork_n0: n0_star(v0s),
    }
}

pub(crate) fn det2(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

pub(crate) fn trace2(m: &Mat2) -> f64 {
    m[0][0] + m[1][1]
}

pub(crate) fn frob2(m: &Mat2) -> f64 {
    (m[0][0].powi(2) + m[0][1].powi(2) + m[1][0].powi(2) + m[1][1].powi(2)).sqrt()
}
