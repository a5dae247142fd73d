//! Affine coordinates centred on the transcritical point and the scalar
//! centre-manifold dynamics.
//!
//! `v = V + 1`, `w = n - delta0`, `u = v - w / k(V0)`.

use serde::{Deserialize, Serialize};

use crate::model::{delta0, k_slope, ModelParams, PhaseState, I_STAR};

/// Tolerance used when reporting a residual as vanishing.
pub const VANISH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalCoords {
    pub v: f64,
    pub u: f64,
    pub w_tilde: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegeneracyReport {
    /// Value, v-derivative and delta0-derivative of the centre dynamics at v = 0.
    pub residuals: [f64; 3],
    pub coeff_quadratic: f64,
    pub coeff_cross: f64,
    pub pitchfork_extra: f64,
}

impl DegeneracyReport {
    pub fn is_transcritical(&self) -> bool {
        self.residuals.iter().all(|r| r.abs() < VANISH_TOL)
    }

    pub fn is_pitchfork(&self) -> bool {
        self.is_transcritical() && self.pitchfork_extra.abs() < VANISH_TOL
    }
}

pub fn to_normal(p: &ModelParams, s: &PhaseState) -> NormalCoords {
    let k = k_slope(p.v0);
    let v = s.v + 1.0;
    let w_tilde = s.n - delta0(p);
    NormalCoords { v, u: v - w_tilde / k, w_tilde }
}

/// Inverse of [`to_normal`]; `w_tilde` is recomputed from `v` and `u`.
pub fn from_normal(p: &ModelParams, c: &NormalCoords) -> PhaseState {
    let k = k_slope(p.v0);
    PhaseState::new(c.v - 1.0, k * (c.v - c.u) + delta0(p))
}

/// Builds coordinates from `(v, u)` alone.
pub fn normal_from_vu(p: &ModelParams, v: f64, u: f64) -> NormalCoords {
    NormalCoords { v, u, w_tilde: k_slope(p.v0) * (v - u) }
}

pub fn v_dot_normal(p: &ModelParams, c: &NormalCoords) -> f64 {
    let k = k_slope(p.v0);
    let d0 = delta0(p);
    let w = k * (c.v - c.u) + d0;
    c.v * c.v * (3.0 - c.v) / 3.0 - w * w + p.i_app - I_STAR
}

pub fn center_dynamics(p: &ModelParams, v: f64) -> f64 {
    let k = k_slope(p.v0);
    let d0 = delta0(p);
    (1.0 - k * k) * v * v - v * v * v / 3.0 - 2.0 * k * v * d0 - d0 * d0 + p.i_app - I_STAR
}

/// Real roots of the centre dynamics, sorted ascending.
pub fn center_roots(p: &ModelParams) -> Vec<f64> {
    let k = k_slope(p.v0);
    let d0 = delta0(p);
    // -v^3/3 + (1-k^2) v^2 - 2k d0 v + (I - I* - d0^2) = 0, times -3
    real_cubic_roots(
        1.0,
        -3.0 * (1.0 - k * k),
        6.0 * k * d0,
        -3.0 * (p.i_app - I_STAR - d0 * d0),
    )
}

pub fn degeneracy_report(p: &ModelParams) -> DegeneracyReport {
    let k = k_slope(p.v0);
    let d0 = delta0(p);
    DegeneracyReport {
        residuals: [-d0 * d0 + p.i_app - I_STAR, -2.0 * k * d0, -2.0 * d0],
        coeff_quadratic: 2.0 * (1.0 - k * k),
        coeff_cross: 2.0 * k,
        pitchfork_extra: 1.0 - k * k,
    }
}

/// Real roots of `a x^3 + b x^2 + c x + d` (a != 0), ascending, with
/// multiplicity collapsed.
pub(crate) fn real_cubic_roots(a: f64, b: f64, c: f64, d: f64) -> Vec<f64> {
    let (b, c, d) = (b / a, c / a, d / a);
    // depressed cubic t^3 + pt + q with x = t - b/3
    let p = c - b * b / 3.0;
    let q = 2.0 * b * b * b / 27.0 - b * c / 3.0 + d;
    let shift = -b / 3.0;
    let disc = (q / 2.0).powi(2) + (p / 3.0).powi(3);
    let scale = 1.0 + (q / 2.0).powi(2).max((p / 3.0).abs().powi(3));
    let mut roots = if disc.abs() <= 1e-14 * scale {
        if p.abs() < 1e-14 {
            vec![shift]
        } else {
            let t = (q / 2.0).cbrt();
            vec![-2.0 * t + shift, t + shift]
        }
    } else if disc > 0.0 {
        let sq = disc.sqrt();
        vec![(-q / 2.0 + sq).cbrt() + (-q / 2.0 - sq).cbrt() + shift]
    } else {
        let r = (-p / 3.0).sqrt();
        let phi = (-q / (2.0 * r * r * r)).clamp(-1.0, 1.0).acos();
        (0..3)
            .map(|j| 2.0 * r * ((phi + 2.0 * std::f64::consts::PI * j as f64) / 3.0).cos() + shift)
            .collect()
    };
    // one Newton step against cancellation
    for x in roots.iter_mut() {
        let f = ((*x + b) * *x + c) * *x + d;
        let df = (3.0 * *x + 2.0 * b) * *x + c;
        if df.abs() > 1e-12 {
            *x -= f / df;
        }
    }
    roots.sort_by(|x, y| x.partial_cmp(y).unwrap());
    roots.dedup_by(|x, y| (*x - *y).abs() < 1e-12);
    roots
}
