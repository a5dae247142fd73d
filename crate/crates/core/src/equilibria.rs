//! Equilibria at fixed parameters, their linear type and nullcline branch,
//! and saddle invariant-manifold arcs.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{integrate, DynamicsError, IntegratorOptions, Trajectory};
use crate::model::{
    det2, fast_rate, frob2, interaction_of, jacobian, n_inf_prime, n_inf_second, n_nullcline, trace2,
    vector_field, Interaction, Mat2, ModelParams, PhaseState, V_WINDOW,
};

pub const GRID_POINTS: usize = 4000;
pub const DEFAULT_SEED_OFFSET: f64 = 1e-6;
const BISECT_TOL: f64 = 1e-12;
const MERGE_TOL: f64 = 1e-8;
const TANGENT_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EquilibriumError {
    #[error("state ({v}, {n}) is not an equilibrium (residual {residual:e})")]
    NotAnEquilibrium { v: f64, n: f64, residual: f64 },
    #[error("manifold seeds require a saddle, got {0:?}")]
    NotASaddle(EquilibriumKind),
    #[error("seed offset {0} outside [1e-8, 1e-3]")]
    BadOffset(f64),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquilibriumKind {
    StableNode,
    StableFocus,
    UnstableNode,
    UnstableFocus,
    Saddle,
    Degenerate,
}

impl EquilibriumKind {
    pub fn is_stable(self) -> bool {
        matches!(self, EquilibriumKind::StableNode | EquilibriumKind::StableFocus)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    LowerLeft,
    LowerRight,
    UpperLeft,
    UpperMiddle,
    UpperRight,
    Pinch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub state: PhaseState,
    pub eigenvalues: [Complex64; 2],
    pub kind: EquilibriumKind,
    pub branch: Branch,
    pub interaction: Interaction,
}

impl Equilibrium {
    pub fn is_stable(&self) -> bool {
        self.kind.is_stable()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedDirection {
    UnstablePlus,
    UnstableMinus,
    StablePlus,
    StableMinus,
}

impl SeedDirection {
    pub fn is_stable(self) -> bool {
        matches!(self, SeedDirection::StablePlus | SeedDirection::StableMinus)
    }
}

/// Start point for a saddle-manifold arc. "Plus" is the eigenvector
/// orientation with positive V-component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSeed {
    pub base: Equilibrium,
    pub direction: SeedDirection,
    pub offset: f64,
}

impl ManifoldSeed {
    pub fn new(base: Equilibrium, direction: SeedDirection, offset: f64) -> Result<Self, EquilibriumError> {
        if base.kind != EquilibriumKind::Saddle {
            return Err(EquilibriumError::NotASaddle(base.kind));
        }
        if !(1e-8..=1e-3).contains(&offset) {
            return Err(EquilibriumError::BadOffset(offset));
        }
        Ok(ManifoldSeed { base, direction, offset })
    }

    pub fn start(&self, p: &ModelParams) -> PhaseState {
        let (u, s) = saddle_directions(p, &self.base.state);
        let d = match self.direction {
            SeedDirection::UnstablePlus => u,
            SeedDirection::UnstableMinus => [-u[0], -u[1]],
            SeedDirection::StablePlus => s,
            SeedDirection::StableMinus => [-s[0], -s[1]],
        };
        PhaseState::new(self.base.state.v + self.offset * d[0], self.base.state.n + self.offset * d[1])
    }
}

/// g(V): V-rate along the n-nullcline graph; its zeros are the equilibria.
pub fn graph_rate(p: &ModelParams, v: f64) -> f64 {
    fast_rate(v, n_nullcline(v, p), p.i_app)
}

pub fn graph_rate_prime(p: &ModelParams, v: f64) -> f64 {
    1.0 - v * v - 2.0 * n_nullcline(v, p) * n_inf_prime(v - p.v0)
}

pub fn graph_rate_second(p: &ModelParams, v: f64) -> f64 {
    let x = v - p.v0;
    -2.0 * v - 2.0 * n_inf_prime(x).powi(2) - 2.0 * n_nullcline(v, p) * n_inf_second(x)
}

fn bisect(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let mut fa = f(a);
    if fa == 0.0 {
        return a;
    }
    if f(b) == 0.0 {
        return b;
    }
    while (b - a).abs() > tol {
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm == 0.0 {
            return m;
        }
        if (fm > 0.0) == (fa > 0.0) {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Zeros of `f` on [a, b] located by sign-change scan on `cells` cells plus
/// tangential zeros at the extrema of `f`.
pub(crate) fn scan_roots(
    f: &dyn Fn(f64) -> f64,
    df: &dyn Fn(f64) -> f64,
    d2f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    cells: usize,
) -> Vec<f64> {
    let mut roots = Vec::new();
    let h = (b - a) / cells as f64;
    for i in 0..cells {
        let lo = a + h * i as f64;
        let hi = if i + 1 == cells { b } else { a + h * (i + 1) as f64 };
        // split at an inflection so that f' is monotone on each piece
        let mut cuts = vec![lo];
        if (d2f(lo) > 0.0) != (d2f(hi) > 0.0) {
            cuts.push(bisect(d2f, lo, hi, BISECT_TOL));
        }
        cuts.push(hi);
        let mut pts = vec![lo];
        for w in cuts.windows(2) {
            if (df(w[0]) > 0.0) != (df(w[1]) > 0.0) {
                pts.push(bisect(df, w[0], w[1], BISECT_TOL));
            }
            pts.push(w[1]);
        }
        // f is monotone between consecutive points
        for w in pts.windows(2) {
            let (fa, fb) = (f(w[0]), f(w[1]));
            if fa == 0.0 {
                roots.push(w[0]);
            } else if fa * fb < 0.0 {
                roots.push(bisect(f, w[0], w[1], BISECT_TOL));
            }
        }
        for &x in &pts[1..pts.len() - 1] {
            if f(x).abs() < TANGENT_TOL {
                roots.push(x);
            }
        }
        if i + 1 == cells && f(hi) == 0.0 {
            roots.push(hi);
        }
    }
    roots.sort_by(|x, y| x.partial_cmp(y).unwrap());
    roots.dedup_by(|x, y| (*x - *y).abs() < MERGE_TOL);
    roots
}

fn newton_polish(p: &ModelParams, s: PhaseState) -> PhaseState {
    let (f0, f1) = vector_field(p, &s);
    let j = jacobian(p, &s);
    let det = det2(&j);
    if det.abs() < 1e-14 {
        return s;
    }
    let dv = (-f0 * j[1][1] + f1 * j[0][1]) / det;
    let dn = (-j[0][0] * f1 + j[1][0] * f0) / det;
    let cand = PhaseState::new(s.v + dv, s.n + dn);
    let r = |x: &PhaseState| {
        let (a, b) = vector_field(p, x);
        a.hypot(b)
    };
    if r(&cand) < r(&s) {
        cand
    } else {
        s
    }
}

pub fn find_equilibria(p: &ModelParams) -> Vec<Equilibrium> {
    let f = |v: f64| graph_rate(p, v);
    let df = |v: f64| graph_rate_prime(p, v);
    let d2f = |v: f64| graph_rate_second(p, v);
    let roots = scan_roots(&f, &df, &d2f, V_WINDOW.0, V_WINDOW.1, GRID_POINTS);
    let mut out: Vec<Equilibrium> = Vec::with_capacity(roots.len());
    for v in roots {
        let s = newton_polish(p, PhaseState::new(v, n_nullcline(v, p)));
        if out.last().map(|e| e.state.dist(&s) < MERGE_TOL).unwrap_or(false) {
            continue;
        }
        out.push(classify_unchecked(p, s));
    }
    out
}

pub fn residual(p: &ModelParams, s: &PhaseState) -> f64 {
    let (a, b) = vector_field(p, s);
    a.hypot(b)
}

pub fn classify_equilibrium(p: &ModelParams, state: &PhaseState) -> Result<Equilibrium, EquilibriumError> {
    let r = residual(p, state);
    if !(r < 1e-8) {
        return Err(EquilibriumError::NotAnEquilibrium { v: state.v, n: state.n, residual: r });
    }
    Ok(classify_unchecked(p, *state))
}

pub fn eigenvalues(j: &Mat2) -> [Complex64; 2] {
    let tr = trace2(j);
    let det = det2(j);
    let disc = tr * tr - 4.0 * det;
    if disc >= 0.0 {
        let sq = disc.sqrt();
        // stable evaluation of the smaller-magnitude root
        let big = -0.5 * (-tr - tr.signum() * sq);
        let (l1, l2) = if big != 0.0 { (big, det / big) } else { (0.5 * (tr - sq), 0.5 * (tr + sq)) };
        let (a, b) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        [Complex64::new(a, 0.0), Complex64::new(b, 0.0)]
    } else {
        let im = 0.5 * (-disc).sqrt();
        [Complex64::new(0.5 * tr, -im), Complex64::new(0.5 * tr, im)]
    }
}

pub fn kind_from_jacobian(j: &Mat2) -> EquilibriumKind {
    let norm = frob2(j);
    let det = det2(j);
    let tr = trace2(j);
    if det.abs() <= 1e-9 * norm * norm {
        return EquilibriumKind::Degenerate;
    }
    if det < 0.0 {
        return EquilibriumKind::Saddle;
    }
    if tr.abs() <= 1e-9 * norm {
        return EquilibriumKind::Degenerate;
    }
    let node = tr * tr - 4.0 * det >= 0.0;
    match (tr < 0.0, node) {
        (true, true) => EquilibriumKind::StableNode,
        (true, false) => EquilibriumKind::StableFocus,
        (false, true) => EquilibriumKind::UnstableNode,
        (false, false) => EquilibriumKind::UnstableFocus,
    }
}

pub fn branch_of(s: &PhaseState) -> Branch {
    if (s.v + 1.0).abs() < 1e-7 && s.n.abs() < 1e-7 {
        Branch::Pinch
    } else if s.n < 0.0 {
        if s.v < -1.0 {
            Branch::LowerLeft
        } else {
            Branch::LowerRight
        }
    } else if s.v < -1.0 {
        Branch::UpperLeft
    } else if s.v <= 1.0 {
        Branch::UpperMiddle
    } else {
        Branch::UpperRight
    }
}

fn classify_unchecked(p: &ModelParams, state: PhaseState) -> Equilibrium {
    let j = jacobian(p, &state);
    Equilibrium {
        state,
        eigenvalues: eigenvalues(&j),
        kind: kind_from_jacobian(&j),
        branch: branch_of(&state),
        interaction: interaction_of(state.n),
    }
}

/// Unit eigenvectors (unstable, stable) of a saddle, oriented with positive V-component.
pub fn saddle_directions(p: &ModelParams, s: &PhaseState) -> ([f64; 2], [f64; 2]) {
    let j = jacobian(p, s);
    let ev = eigenvalues(&j);
    let vec_for = |lam: f64| {
        let a = [-j[0][1], j[0][0] - lam];
        let b = [lam - j[1][1], j[1][0]];
        let pick = if a[0].hypot(a[1]) >= b[0].hypot(b[1]) { a } else { b };
        let norm = pick[0].hypot(pick[1]);
        let mut d = [pick[0] / norm, pick[1] / norm];
        if d[0] < 0.0 || (d[0] == 0.0 && d[1] < 0.0) {
            d = [-d[0], -d[1]];
        }
        d
    };
    (vec_for(ev[1].re), vec_for(ev[0].re))
}

/// Integrates an invariant-manifold arc: forward for unstable seeds, in
/// reverse time for stable seeds (the `backward` flag of `opts` is set here).
pub fn manifold_arc(
    p: &ModelParams,
    seed: &ManifoldSeed,
    opts: &IntegratorOptions,
) -> Result<Trajectory, EquilibriumError> {
    let mut o = opts.clone();
    o.backward = seed.direction.is_stable();
    Ok(integrate(p, &seed.start(p), &o)?)
}

pub fn stable_equilibria(eqs: &[Equilibrium]) -> Vec<Equilibrium> {
    eqs.iter().filter(|e| e.is_stable()).copied().collect()
}

/// The hyperpolarized stable equilibrium (lowest V among the stable ones).
pub fn resting_state(p: &ModelParams) -> Option<Equilibrium> {
    find_equilibria(p).into_iter().find(|e| e.is_stable())
}

/// The saddle closest to the transcritical point (-1, 0).
pub fn principal_saddle(eqs: &[Equilibrium]) -> Option<Equilibrium> {
    let tc = PhaseState::new(-1.0, 0.0);
    eqs.iter()
        .filter(|e| e.kind == EquilibriumKind::Saddle)
        .min_by(|a, b| a.state.dist(&tc).partial_cmp(&b.state.dist(&tc)).unwrap())
        .copied()
}
