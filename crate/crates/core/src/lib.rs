//! Mirrored FitzHugh-Nagumo excitability model.
//!
//! The V-nullcline `n^2 = V - V^3/3 + I` is the classical N-shape reflected
//! across `n = 0`; at `I = 2/3` it self-intersects at `(-1, 0)`, a
//! transcritical organizing centre whose unfolding in `(V0, n0)` produces five
//! excitability regions.

pub mod classify;
pub mod continuation;
pub mod dynamics;
pub mod equilibria;
pub mod gspt;
pub mod model;
pub mod normalform;

pub use model::{ModelParams, PhaseState, I_STAR};
