//! One-parameter analysis in the applied current.
//!
//! The n-nullcline is a graph over V, so the whole equilibrium set is the
//! curve `I(V) = (n_inf(V - V0) + n0)^2 + V^3/3 - V`; folds and Hopf points are
//! located on it directly. Limit cycles are found by simulation and the
//! saddle-homoclinic current by shooting on a horizontal section.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    integrate, CrossingDirection, DynamicsError, EventKind, IntegratorOptions, Section, Target, Termination,
    Trajectory,
};
use crate::equilibria::{
    classify_equilibrium, find_equilibria, manifold_arc, principal_saddle, resting_state, saddle_directions,
    Equilibrium, EquilibriumError, EquilibriumKind, ManifoldSeed, SeedDirection, DEFAULT_SEED_OFFSET,
};
use crate::model::{
    delta0, k_slope, n_inf_prime, n_inf_second, n_nullcline, ModelParams, PhaseState, I_STAR, V_WINDOW,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContinuationError {
    #[error("no periodic or stationary behaviour within {budget} time units ({spikes} spikes)")]
    AmbiguousCycle { budget: f64, spikes: usize },
    #[error("no saddle at I = {0}")]
    NoSaddle(f64),
    #[error("{arc} arc does not cross the section at I = {i_app} ({fate:?})")]
    NoCrossing { arc: &'static str, i_app: f64, fate: ArcFate },
    #[error("homoclinic bracket [{lo}, {hi}] invalid: {reason}")]
    BracketInvalid { lo: f64, hi: f64, reason: String },
    #[error("gap sign undetermined at I = {0}")]
    SignUndetermined(f64),
    #[error("no resting state at I = {0}")]
    NoRest(f64),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BifurcationKind {
    #[serde(rename = "SN")]
    SaddleNode,
    #[serde(rename = "SNIC")]
    Snic,
    Hopf,
    #[serde(rename = "TC")]
    Transcritical,
    #[serde(rename = "homoclinic")]
    Homoclinic,
    #[serde(rename = "pitchfork")]
    Pitchfork,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateTag {
    /// The fold ends the stable segment lying at lower V.
    Down,
    /// The fold ends the stable segment lying at higher V.
    Up,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criticality {
    Subcritical,
    Supercritical,
    Undetermined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct BifurcationMeta {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snic: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state_tag: Option<StateTag>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub criticality: Option<Criticality>,
    /// For Hopf points: |Im lambda| at the bifurcation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frequency: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BifurcationPoint {
    pub kind: BifurcationKind,
    pub i_crit: f64,
    pub location: PhaseState,
    pub residual: f64,
    pub meta: BifurcationMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchPoint {
    pub i_app: f64,
    pub equilibrium: Equilibrium,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumBranch {
    pub points: Vec<BranchPoint>,
    pub folds: Vec<BifurcationPoint>,
    pub hopfs: Vec<BifurcationPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitCycle {
    pub i_app: f64,
    pub period: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub closure: f64,
    pub orbit: Trajectory,
}

impl LimitCycle {
    pub fn frequency(&self) -> f64 {
        1.0 / self.period
    }

    pub fn distance_to(&self, s: &PhaseState) -> f64 {
        self.orbit.samples.iter().map(|x| x.state().dist(s)).fold(f64::INFINITY, f64::min)
    }
}

/// I(V) on the equilibrium curve.
pub fn current_on_branch(p: &ModelParams, v: f64) -> f64 {
    n_nullcline(v, p).powi(2) + v * v * v / 3.0 - v
}

pub fn d_current_dv(p: &ModelParams, v: f64) -> f64 {
    2.0 * n_nullcline(v, p) * n_inf_prime(v - p.v0) + v * v - 1.0
}

pub fn d2_current_dv2(p: &ModelParams, v: f64) -> f64 {
    let x = v - p.v0;
    2.0 * n_inf_prime(x).powi(2) + 2.0 * n_nullcline(v, p) * n_inf_second(x) + 2.0 * v
}

fn bisect(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let fa0 = f(a);
    let mut pos_a = fa0 > 0.0;
    if fa0 == 0.0 {
        return a;
    }
    while (b - a).abs() > 1e-12 {
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm == 0.0 {
            return m;
        }
        if (fm > 0.0) == pos_a {
            a = m;
            pos_a = fm > 0.0;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

fn branch_state(p: &ModelParams, v: f64) -> (ModelParams, PhaseState) {
    (p.with_current(current_on_branch(p, v)), PhaseState::new(v, n_nullcline(v, p)))
}

fn fold_at(p: &ModelParams, v: f64) -> BifurcationPoint {
    let (pv, s) = branch_state(p, v);
    let side = |dv: f64| {
        let (pp, ss) = branch_state(p, v + dv);
        classify_equilibrium(&pp, &ss).map(|e| e.is_stable()).unwrap_or(false)
    };
    let state_tag = match (side(-1e-4), side(1e-4)) {
        (true, false) => Some(StateTag::Down),
        (false, true) => Some(StateTag::Up),
        _ => None,
    };
    BifurcationPoint {
        kind: BifurcationKind::SaddleNode,
        i_crit: pv.i_app,
        location: s,
        residual: d_current_dv(p, v).abs(),
        meta: BifurcationMeta { state_tag, ..Default::default() },
    }
}

fn hopf_at(p: &ModelParams, v: f64) -> BifurcationPoint {
    let (pv, s) = branch_state(p, v);
    let freq = classify_equilibrium(&pv, &s).map(|e| e.eigenvalues[1].im.abs()).ok();
    BifurcationPoint {
        kind: BifurcationKind::Hopf,
        i_crit: pv.i_app,
        location: s,
        residual: (1.0 - v * v - p.epsilon).abs(),
        meta: BifurcationMeta { frequency: freq, ..Default::default() },
    }
}

/// Voltages where dI/dV changes sign on a uniform grid, bisected to 1e-12.
pub fn fold_voltages(p: &ModelParams, v_range: (f64, f64), resolution: usize) -> Vec<f64> {
    let n = resolution.max(2);
    let didv = |v: f64| d_current_dv(p, v);
    let mut out = Vec::new();
    let mut a = v_range.0;
    let mut fa = didv(a);
    for i in 1..n {
        let b = v_range.0 + (v_range.1 - v_range.0) * i as f64 / (n - 1) as f64;
        let fb = didv(b);
        if (fa > 0.0) != (fb > 0.0) {
            out.push(bisect(didv, a, b));
        }
        a = b;
        fa = fb;
    }
    out
}

/// Tabulates the equilibrium curve and locates folds and Hopf points on it.
pub fn equilibrium_branch(p_base: &ModelParams, v_range: (f64, f64), resolution: usize) -> EquilibriumBranch {
    let n = resolution.max(2);
    let vs: Vec<f64> = (0..n).map(|i| v_range.0 + (v_range.1 - v_range.0) * i as f64 / (n - 1) as f64).collect();
    let mut points = Vec::with_capacity(n);
    for &v in &vs {
        let (pv, s) = branch_state(p_base, v);
        if let Ok(e) = classify_equilibrium(&pv, &s) {
            points.push(BranchPoint { i_app: pv.i_app, equilibrium: e });
        }
    }
    let mut folds = Vec::new();
    let mut hopfs = Vec::new();
    let didv = |v: f64| d_current_dv(p_base, v);
    let tr = |v: f64| 1.0 - v * v - p_base.epsilon;
    for w in vs.windows(2) {
        let (a, b) = (w[0], w[1]);
        if (didv(a) > 0.0) != (didv(b) > 0.0) {
            folds.push(fold_at(p_base, bisect(didv, a, b)));
        }
        if (tr(a) > 0.0) != (tr(b) > 0.0) {
            let v = bisect(tr, a, b);
            // det J = eps * dI/dV
            if didv(v) > 0.0 {
                hopfs.push(hopf_at(p_base, v));
            }
        }
    }
    EquilibriumBranch { points, folds, hopfs }
}

/// Fold at which the resting state (stable, lowest V at the current of
/// `p`) disappears as I increases, if it does before V reaches the window edge.
pub fn rest_fold(p: &ModelParams) -> Option<BifurcationPoint> {
    let rest = resting_state(p)?;
    let didv = |v: f64| d_current_dv(p, v);
    let h = 1e-3;
    let mut v = rest.state.v;
    while v < V_WINDOW.1 {
        let next = v + h;
        if didv(next) <= 0.0 {
            return Some(fold_at(p, bisect(didv, v, next)));
        }
        v = next;
    }
    None
}

/// Hopf point on the resting branch above the rest current, if any comes before a fold.
pub fn rest_hopf(p: &ModelParams) -> Option<BifurcationPoint> {
    let rest = resting_state(p)?;
    let didv = |v: f64| d_current_dv(p, v);
    let tr = |v: f64| 1.0 - v * v - p.epsilon;
    let h = 1e-3;
    let mut v = rest.state.v;
    while v < V_WINDOW.1 {
        let next = v + h;
        if didv(next) <= 0.0 {
            return None;
        }
        if (tr(v) > 0.0) != (tr(next) > 0.0) {
            return Some(hopf_at(p, bisect(tr, v, next)));
        }
        v = next;
    }
    None
}

// ---------------------------------------------------------------------------
// Long-run behaviour and limit cycles

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettleOptions {
    /// Integration budget in slow time units (multiples of 1/eps).
    pub slow_units: f64,
    pub max_step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub periodic_count: usize,
    pub periodic_rtol: f64,
    /// Classify a non-spiking, unsettled end state by its nearest stable equilibrium.
    pub nearest_fallback: bool,
}

impl Default for SettleOptions {
    fn default() -> Self {
        SettleOptions {
            slow_units: 50.0,
            max_step: 0.5,
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            periodic_count: 4,
            periodic_rtol: 1e-4,
            nearest_fallback: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LongRun {
    Equilibrium { state: PhaseState, settled: bool },
    Cycle { cycle: LimitCycle },
    Ambiguous { spikes: usize },
}

impl LongRun {
    /// Coarse identity used to compare outcomes.
    pub fn same_attractor(&self, other: &LongRun) -> bool {
        match (self, other) {
            (LongRun::Equilibrium { state: a, .. }, LongRun::Equilibrium { state: b, .. }) => a.dist(b) < 1e-6,
            (LongRun::Cycle { cycle: a }, LongRun::Cycle { cycle: b }) => {
                (a.period - b.period).abs() < 1e-3 * a.period
            }
            _ => false,
        }
    }
}

/// Default launch state: V = -2.5 at the strip midpoint.
pub fn standard_launch(p: &ModelParams) -> PhaseState {
    PhaseState::new(-2.5, p.strip_midpoint())
}

pub fn settle(p: &ModelParams, launch: &PhaseState, so: &SettleOptions) -> Result<LongRun, ContinuationError> {
    let eqs = find_equilibria(p);
    let stable: Vec<Equilibrium> = eqs.iter().filter(|e| e.is_stable()).copied().collect();
    let targets: Vec<Target> = stable
        .iter()
        .map(|e| {
            let dmin = eqs
                .iter()
                .filter(|o| o.state != e.state)
                .map(|o| o.state.dist(&e.state))
                .fold(f64::INFINITY, f64::min);
            Target { state: e.state, radius: (0.25 * dmin).min(1e-5) }
        })
        .collect();
    let budget = so.slow_units / p.epsilon;
    let opts = IntegratorOptions {
        rel_tol: so.rel_tol,
        abs_tol: so.abs_tol,
        max_step: so.max_step,
        t_end: budget,
        periodic_stop: Some((so.periodic_count, so.periodic_rtol)),
        targets,
        sample_stride: 64,
        ..Default::default()
    };
    let tr = integrate(p, launch, &opts)?;
    let spikes = tr.spike_times();
    match tr.termination {
        Termination::Converged => {
            let end = tr.last_state();
            match tr.converged_target() {
                Some(Some(i)) => Ok(LongRun::Equilibrium { state: stable[i].state, settled: true }),
                _ => {
                    let near = eqs
                        .iter()
                        .min_by(|a, b| a.state.dist(&end).partial_cmp(&b.state.dist(&end)).unwrap())
                        .filter(|e| e.is_stable() && e.state.dist(&end) < 1e-4);
                    match near {
                        Some(e) => Ok(LongRun::Equilibrium { state: e.state, settled: true }),
                        None => Ok(LongRun::Ambiguous { spikes: spikes.len() }),
                    }
                }
            }
        }
        Termination::Periodic => {
            let ev = tr.events.iter().rev().find(|e| e.kind == EventKind::Spike).unwrap();
            let period = spikes[spikes.len() - 1] - spikes[spikes.len() - 2];
            Ok(LongRun::Cycle { cycle: close_orbit(p, ev.state, period, so)? })
        }
        Termination::WindowExit => Err(ContinuationError::Dynamics(DynamicsError::InvalidOptions(format!(
            "trajectory left the voltage window at I = {}",
            p.i_app
        )))),
        _ => {
            let late = spikes.iter().filter(|&&t| t > 0.5 * budget).count();
            if so.nearest_fallback && late == 0 && !stable.is_empty() {
                let end = tr.last_state();
                let e = stable
                    .iter()
                    .min_by(|a, b| a.state.dist(&end).partial_cmp(&b.state.dist(&end)).unwrap())
                    .unwrap();
                Ok(LongRun::Equilibrium { state: e.state, settled: false })
            } else {
                Ok(LongRun::Ambiguous { spikes: spikes.len() })
            }
        }
    }
}

/// Integrates one period from a spike state, repeating until the orbit closes.
fn close_orbit(p: &ModelParams, start: PhaseState, period: f64, so: &SettleOptions) -> Result<LimitCycle, ContinuationError> {
    let mut s0 = start;
    let mut best: Option<LimitCycle> = None;
    for _ in 0..8 {
        let opts = IntegratorOptions {
            rel_tol: so.rel_tol.min(1e-9),
            abs_tol: so.abs_tol.min(1e-11),
            max_step: 0.1,
            t_end: period * 1.5,
            max_spikes: Some(2),
            detect_convergence: false,
            ..Default::default()
        };
        // the start sits on the threshold, so a crossing at t ~ 0 is possible and ignored
        let tr = integrate(p, &s0, &opts)?;
        let Some(ev) = tr.events.iter().find(|e| e.kind == EventKind::Spike && e.t > 0.25 * period).copied() else {
            break;
        };
        let closure = ev.state.dist(&s0);
        let (v_min, v_max) = tr
            .samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x.v), b.max(x.v)));
        let cyc = LimitCycle { i_app: p.i_app, period: ev.t, v_min, v_max, closure, orbit: tr };
        let done = closure < 1e-6;
        if best.as_ref().map(|b| closure < b.closure).unwrap_or(true) {
            best = Some(cyc);
        }
        if done {
            break;
        }
        s0 = ev.state;
    }
    best.ok_or(ContinuationError::AmbiguousCycle { budget: period, spikes: 0 })
}

pub fn find_limit_cycle(p: &ModelParams) -> Result<Option<LimitCycle>, ContinuationError> {
    find_limit_cycle_from(p, &standard_launch(p), &SettleOptions::default())
}

pub fn find_limit_cycle_from(
    p: &ModelParams,
    launch: &PhaseState,
    so: &SettleOptions,
) -> Result<Option<LimitCycle>, ContinuationError> {
    match settle(p, launch, so)? {
        LongRun::Equilibrium { .. } => Ok(None),
        LongRun::Cycle { cycle } => Ok(Some(cycle)),
        LongRun::Ambiguous { spikes } => {
            Err(ContinuationError::AmbiguousCycle { budget: so.slow_units / p.epsilon, spikes })
        }
    }
}

/// A fold is a SNIC when, just past it, a stable cycle passes within 0.05 of the fold point.
pub fn detect_snic(p: &ModelParams, fold: &BifurcationPoint) -> bool {
    let pp = p.with_current(fold.i_crit + 1e-3);
    let so = SettleOptions { slow_units: 150.0, ..Default::default() };
    match find_limit_cycle_from(&pp, &standard_launch(&pp), &so) {
        Ok(Some(c)) => c.distance_to(&fold.location) < 0.05,
        _ => false,
    }
}

// ---------------------------------------------------------------------------
// Section gap and saddle-homoclinic shooting

/// Section n = rho restricted to a V-window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectionSpec {
    pub rho: f64,
    pub v_window: (f64, f64),
}

impl Default for SectionSpec {
    fn default() -> Self {
        // rho must sit between the saddle (n ~ -0.07 for the reference
        // Region IV point) and the pinch; -0.1 lies below the saddle there
        SectionSpec { rho: -0.03, v_window: (-2.5, 0.5) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectionGap {
    pub rho: f64,
    pub q_a: f64,
    pub q_r: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArcFate {
    /// The unstable arc converged to a stable equilibrium.
    ReturnedToRest,
    /// The unstable arc fired a second spike.
    Escaped,
    /// The stable arc (in reverse time) left the window or ran out of budget.
    Lost,
    Undetermined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapSign {
    Negative,
    Positive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapProbe {
    pub i_app: f64,
    pub saddle: PhaseState,
    pub q_a: Option<f64>,
    pub q_r: Option<f64>,
    pub fate: ArcFate,
    pub sign: Option<GapSign>,
}

impl GapProbe {
    pub fn gap(&self) -> Option<f64> {
        Some(self.q_a? - self.q_r?)
    }
}

fn arc_options(p: &ModelParams) -> IntegratorOptions {
    IntegratorOptions {
        rel_tol: 1e-11,
        abs_tol: 1e-13,
        max_step: 0.1,
        t_end: 200.0 / p.epsilon,
        sample_stride: 16,
        ..Default::default()
    }
}

/// Unstable arc leaving the saddle toward larger V, run until it fires a
/// second spike or settles.
pub fn unstable_arc(p: &ModelParams, saddle: &Equilibrium, sec: &SectionSpec, offset: f64) -> Result<Trajectory, ContinuationError> {
    let eqs = find_equilibria(p);
    let mut o = arc_options(p);
    o.section = Some(Section {
        rho: sec.rho,
        v_window: sec.v_window,
        direction: CrossingDirection::Either,
        after_spike: true,
        terminal: false,
    });
    o.max_spikes = Some(2);
    // the passage past a nearly-formed fold is slow
    o.t_end = 1000.0 / p.epsilon;
    o.targets = eqs
        .iter()
        .filter(|e| e.is_stable())
        .map(|e| Target { state: e.state, radius: (0.25 * e.state.dist(&saddle.state)).min(1e-6) })
        .collect();
    let seed = ManifoldSeed::new(*saddle, SeedDirection::UnstablePlus, offset)?;
    Ok(manifold_arc(p, &seed, &o)?)
}

/// Stable arc of the saddle on the side of increasing n, in reverse time,
/// stopped at its first section crossing.
pub fn stable_arc(p: &ModelParams, saddle: &Equilibrium, sec: &SectionSpec, offset: f64) -> Result<Trajectory, ContinuationError> {
    let (_, s) = saddle_directions(p, &saddle.state);
    let dir = if s[1] > 0.0 { SeedDirection::StablePlus } else { SeedDirection::StableMinus };
    let mut o = arc_options(p);
    o.t_end = 100.0 / p.epsilon;
    o.section = Some(Section {
        rho: sec.rho,
        v_window: sec.v_window,
        direction: CrossingDirection::Either,
        after_spike: false,
        terminal: true,
    });
    let seed = ManifoldSeed::new(*saddle, dir, offset)?;
    Ok(manifold_arc(p, &seed, &o)?)
}

pub fn probe_gap(p: &ModelParams, sec: &SectionSpec) -> Result<GapProbe, ContinuationError> {
    probe_gap_with_offset(p, sec, DEFAULT_SEED_OFFSET)
}

pub fn probe_gap_with_offset(p: &ModelParams, sec: &SectionSpec, offset: f64) -> Result<GapProbe, ContinuationError> {
    let eqs = find_equilibria(p);
    let saddle = principal_saddle(&eqs).ok_or(ContinuationError::NoSaddle(p.i_app))?;
    let u = unstable_arc(p, &saddle, sec, offset)?;
    let q_a = u.section_crossings().first().map(|e| e.state.v);
    let fate = match u.termination {
        Termination::SpikeLimit => ArcFate::Escaped,
        Termination::Converged => ArcFate::ReturnedToRest,
        _ => ArcFate::Undetermined,
    };
    let s = stable_arc(p, &saddle, sec, offset)?;
    let q_r = s.section_crossings().first().map(|e| e.state.v);
    let sign = match (q_a, q_r) {
        (Some(a), Some(r)) => Some(if a - r >= 0.0 { GapSign::Positive } else { GapSign::Negative }),
        _ => match fate {
            ArcFate::Escaped => Some(GapSign::Positive),
            ArcFate::ReturnedToRest => Some(GapSign::Negative),
            _ => None,
        },
    };
    Ok(GapProbe { i_app: p.i_app, saddle: saddle.state, q_a, q_r, fate, sign })
}

pub fn section_gap(p: &ModelParams, rho: f64, v_window: (f64, f64)) -> Result<SectionGap, ContinuationError> {
    let probe = probe_gap(p, &SectionSpec { rho, v_window })?;
    match (probe.q_a, probe.q_r) {
        (Some(q_a), Some(q_r)) => Ok(SectionGap { rho, q_a, q_r, gap: q_a - q_r }),
        (None, _) => Err(ContinuationError::NoCrossing { arc: "unstable", i_app: p.i_app, fate: probe.fate }),
        (_, None) => Err(ContinuationError::NoCrossing { arc: "stable", i_app: p.i_app, fate: ArcFate::Lost }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomoclinicResult {
    pub point: BifurcationPoint,
    pub bracket: (f64, f64),
    pub gap: Option<f64>,
    /// Distance from the end of the assembled loop to the saddle.
    pub loop_closure: f64,
    #[serde(skip)]
    pub near_loop: Option<Trajectory>,
}

/// Default bracket [I* - 0.05, I_SN - 1e-6] where I_SN is the resting-state fold.
pub fn default_homoclinic_bracket(p: &ModelParams) -> Option<(f64, f64)> {
    let fold = rest_fold(&p.with_current(I_STAR))?;
    Some((I_STAR - 0.05, fold.i_crit - 1e-6))
}

fn sign_at(p: &ModelParams, i: f64, sec: &SectionSpec) -> Option<GapSign> {
    probe_gap(&p.with_current(i), sec).ok().and_then(|g| g.sign)
}

pub fn find_homoclinic(
    p_base: &ModelParams,
    bracket: Option<(f64, f64)>,
    sec: &SectionSpec,
) -> Result<HomoclinicResult, ContinuationError> {
    let (lo0, hi0) = match bracket.or_else(|| default_homoclinic_bracket(p_base)) {
        Some(b) => b,
        None => {
            return Err(ContinuationError::BracketInvalid {
                lo: f64::NAN,
                hi: f64::NAN,
                reason: "no resting-state fold".into(),
            })
        }
    };
    // validate monotonicity on 5 samples; shrink to the first -/+ transition
    let xs: Vec<f64> = (0..5).map(|j| lo0 + (hi0 - lo0) * j as f64 / 4.0).collect();
    let signs: Vec<Option<GapSign>> = xs.par_iter().map(|&i| sign_at(p_base, i, sec)).collect();
    let mut lohi = None;
    for j in 0..4 {
        if signs[j] == Some(GapSign::Negative) && signs[j + 1] == Some(GapSign::Positive) {
            lohi = Some((xs[j], xs[j + 1]));
            break;
        }
    }
    let (mut lo, mut hi) = lohi.ok_or_else(|| ContinuationError::BracketInvalid {
        lo: lo0,
        hi: hi0,
        reason: format!("no sign change in sampled signs {signs:?}"),
    })?;
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        match sign_at(p_base, mid, sec) {
            Some(GapSign::Negative) => lo = mid,
            Some(GapSign::Positive) => hi = mid,
            None => return Err(ContinuationError::SignUndetermined(mid)),
        }
    }
    let i_crit = 0.5 * (lo + hi);
    let p = p_base.with_current(i_crit);
    let probe = probe_gap(&p, sec)?;
    let eqs = find_equilibria(&p);
    let saddle = principal_saddle(&eqs).ok_or(ContinuationError::NoSaddle(i_crit))?;
    let near_loop = assemble_loop(&p, &saddle, sec)?;
    let loop_closure = near_loop.last_state().dist(&saddle.state);
    let gap = probe.gap();
    Ok(HomoclinicResult {
        point: BifurcationPoint {
            kind: BifurcationKind::Homoclinic,
            i_crit,
            location: saddle.state,
            residual: gap.map(f64::abs).unwrap_or(hi - lo),
            meta: BifurcationMeta::default(),
        },
        bracket: (lo0, hi0),
        gap,
        loop_closure,
        near_loop: Some(near_loop),
    })
}

/// Near-closed loop: the unstable arc up to its section crossing, then the
/// stable arc from its crossing back into the saddle. The junction jump on the
/// section is the gap.
pub fn assemble_loop(p: &ModelParams, saddle: &Equilibrium, sec: &SectionSpec) -> Result<Trajectory, ContinuationError> {
    let mut u = unstable_arc(p, saddle, sec, DEFAULT_SEED_OFFSET)?;
    let s = stable_arc(p, saddle, sec, DEFAULT_SEED_OFFSET)?;
    let (Some(ca), Some(cr)) = (u.section_crossings().first().copied(), s.section_crossings().first().copied()) else {
        return Err(ContinuationError::NoCrossing { arc: "loop", i_app: p.i_app, fate: ArcFate::Undetermined });
    };
    u.samples.retain(|x| x.t < ca.t);
    u.events.retain(|e| e.t <= ca.t);
    let (dv, dn) = crate::model::vector_field(p, &ca.state);
    u.samples.push(crate::dynamics::Sample { t: ca.t, v: ca.state.v, n: ca.state.n, dv, dn });
    for x in s.samples.iter().rev().filter(|x| x.t <= cr.t) {
        let (dv, dn) = crate::model::vector_field(p, &x.state());
        u.samples.push(crate::dynamics::Sample { t: ca.t + (cr.t - x.t), v: x.v, n: x.n, dv, dn });
    }
    u.termination = Termination::Section;
    Ok(u)
}

// ---------------------------------------------------------------------------
// Diagram

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleSample {
    pub i_app: f64,
    pub period: f64,
    pub v_min: f64,
    pub v_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagramOptions {
    pub v_range: (f64, f64),
    pub branch_resolution: usize,
    pub cycle_samples: usize,
    pub section: SectionSpec,
    pub locate_homoclinic: bool,
}

impl Default for DiagramOptions {
    fn default() -> Self {
        DiagramOptions {
            v_range: V_WINDOW,
            branch_resolution: 2001,
            cycle_samples: 41,
            section: SectionSpec::default(),
            locate_homoclinic: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BifurcationDiagram {
    pub params: ModelParams,
    pub i_range: (f64, f64),
    pub branch: EquilibriumBranch,
    pub cycle_grid: Vec<f64>,
    pub cycles: Vec<CycleSample>,
    /// Grid currents where the cycle search was inconclusive.
    pub ambiguous: Vec<f64>,
    pub points: Vec<BifurcationPoint>,
}

impl BifurcationDiagram {
    pub fn points_of(&self, kind: BifurcationKind) -> Vec<BifurcationPoint> {
        self.points.iter().filter(|b| b.kind == kind).copied().collect()
    }

    pub fn folds(&self) -> Vec<BifurcationPoint> {
        self.points
            .iter()
            .filter(|b| matches!(b.kind, BifurcationKind::SaddleNode | BifurcationKind::Snic))
            .copied()
            .collect()
    }

    /// Stable equilibria claimed at current `i`.
    pub fn stable_states_at(&self, i: f64) -> Vec<Equilibrium> {
        find_equilibria(&self.params.with_current(i)).into_iter().filter(|e| e.is_stable()).collect()
    }

    /// Whether the cycle branch covers `i`: the grid currents on both sides carry a cycle.
    pub fn cycle_at(&self, i: f64) -> bool {
        let has = |x: f64| self.cycles.iter().any(|c| c.i_app == x);
        let g = &self.cycle_grid;
        match g.iter().position(|&x| x >= i) {
            Some(0) => has(g[0]) && (g[0] == i),
            Some(j) => has(g[j]) && (g[j] == i || has(g[j - 1])),
            None => false,
        }
    }

    /// CSV tables keyed by file stem: equilibrium branch, cycle branch, special points.
    pub fn csv_tables(&self) -> Vec<(&'static str, String)> {
        let mut eq = String::from("i_app,V,n,kind,stable\n");
        for bp in &self.branch.points {
            let e = &bp.equilibrium;
            eq.push_str(&format!(
                "{:.17e},{:.17e},{:.17e},{:?},{}\n",
                bp.i_app, e.state.v, e.state.n, e.kind, e.is_stable()
            ));
        }
        let mut cy = String::from("i_app,period,v_min,v_max\n");
        for c in &self.cycles {
            cy.push_str(&format!("{:.17e},{:.17e},{:.17e},{:.17e}\n", c.i_app, c.period, c.v_min, c.v_max));
        }
        let mut pts = String::from("kind,i_crit,V,n,residual\n");
        for b in &self.points {
            let kind = serde_json::to_value(b.kind).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
            pts.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.3e}\n",
                kind, b.i_crit, b.location.v, b.location.n, b.residual
            ));
        }
        vec![("equilibria", eq), ("cycles", cy), ("points", pts)]
    }
}

pub fn hopf_criticality(p_base: &ModelParams, hopf: &BifurcationPoint) -> Criticality {
    let delta = 2e-3;
    // stable side: where the equilibrium near the Hopf point is stable
    let stable_below = {
        let pp = p_base.with_current(hopf.i_crit - delta);
        find_equilibria(&pp)
            .into_iter()
            .min_by(|a, b| a.state.dist(&hopf.location).partial_cmp(&b.state.dist(&hopf.location)).unwrap())
            .map(|e| e.is_stable())
            .unwrap_or(false)
    };
    let (i_stable, i_unstable) =
        if stable_below { (hopf.i_crit - delta, hopf.i_crit + delta) } else { (hopf.i_crit + delta, hopf.i_crit - delta) };
    let so = SettleOptions::default();
    let coexist = {
        let pp = p_base.with_current(i_stable);
        matches!(find_limit_cycle_from(&pp, &standard_launch(&pp), &so), Ok(Some(_)))
    };
    if coexist {
        return Criticality::Subcritical;
    }
    let pp = p_base.with_current(i_unstable);
    let near = PhaseState::new(hopf.location.v + 1e-3, hopf.location.n);
    let o = IntegratorOptions {
        t_end: 40.0 / pp.epsilon,
        sample_stride: 8,
        detect_convergence: false,
        ..Default::default()
    };
    match integrate(&pp, &near, &o) {
        Ok(tr) => {
            let tail: Vec<f64> = tr.samples.iter().skip(tr.samples.len() / 2).map(|s| s.v).collect();
            let hi = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = tail.iter().cloned().fold(f64::INFINITY, f64::min);
            let amp = hi - lo;
            if amp < 0.2 && amp > 1e-6 {
                Criticality::Supercritical
            } else {
                Criticality::Undetermined
            }
        }
        Err(_) => Criticality::Undetermined,
    }
}

pub fn bifurcation_diagram(p_base: &ModelParams, i_range: (f64, f64), opts: &DiagramOptions) -> BifurcationDiagram {
    let (lo, hi) = i_range;
    let inside = |i: f64| i >= lo && i <= hi;
    let mut branch = equilibrium_branch(p_base, opts.v_range, opts.branch_resolution);
    branch.points.retain(|bp| inside(bp.i_app));
    branch.folds.retain(|b| inside(b.i_crit));
    branch.hopfs.retain(|b| inside(b.i_crit));

    let grid: Vec<f64> = (0..opts.cycle_samples.max(2))
        .map(|j| lo + (hi - lo) * j as f64 / (opts.cycle_samples.max(2) - 1) as f64)
        .collect();
    let so = SettleOptions::default();
    let results: Vec<(f64, Result<Option<LimitCycle>, ContinuationError>)> = grid
        .par_iter()
        .map(|&i| {
            let pp = p_base.with_current(i);
            (i, find_limit_cycle_from(&pp, &standard_launch(&pp), &so))
        })
        .collect();
    let mut cycles = Vec::new();
    let mut ambiguous = Vec::new();
    for (i, r) in results {
        match r {
            Ok(Some(c)) => cycles.push(CycleSample { i_app: i, period: c.period, v_min: c.v_min, v_max: c.v_max }),
            Ok(None) => {}
            Err(_) => ambiguous.push(i),
        }
    }

    let mut points: Vec<BifurcationPoint> = branch
        .folds
        .par_iter()
        .map(|f| {
            let mut f = *f;
            let snic = detect_snic(p_base, &f);
            f.meta.snic = Some(snic);
            if snic {
                f.kind = BifurcationKind::Snic;
            }
            f
        })
        .collect();
    points.extend(branch.hopfs.par_iter().map(|h| {
        let mut h = *h;
        h.meta.criticality = Some(hopf_criticality(p_base, &h));
        h
    }).collect::<Vec<_>>());
    if delta0(p_base).abs() < 1e-9 && inside(I_STAR) {
        let kind = if (1.0 - k_slope(p_base.v0).powi(2)).abs() < 1e-9 {
            BifurcationKind::Pitchfork
        } else {
            BifurcationKind::Transcritical
        };
        points.push(BifurcationPoint {
            kind,
            i_crit: I_STAR,
            location: PhaseState::new(-1.0, 0.0),
            residual: delta0(p_base).abs(),
            meta: BifurcationMeta::default(),
        });
    }
    if opts.locate_homoclinic {
        let rest = resting_state(&p_base.with_current(I_STAR));
        let cooperative_saddle = principal_saddle(&find_equilibria(&p_base.with_current(I_STAR)))
            .map(|s| s.state.n < 0.0 && s.kind == EquilibriumKind::Saddle)
            .unwrap_or(false);
        if rest.map(|r| r.state.n < 0.0).unwrap_or(false) && cooperative_saddle {
            if let Ok(h) = find_homoclinic(p_base, None, &opts.section) {
                if inside(h.point.i_crit) {
                    points.push(h.point);
                }
            }
        }
    }
    points.sort_by(|a, b| a.i_crit.partial_cmp(&b.i_crit).unwrap());
    BifurcationDiagram { params: *p_base, i_range, branch, cycle_grid: grid, cycles, ambiguous, points }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagramCheck {
    pub i_app: f64,
    pub claimed_stable: usize,
    pub claimed_cycle: bool,
    pub equilibria_hold: bool,
    pub launch_outcome_claimed: bool,
}

impl DiagramCheck {
    pub fn agrees(&self) -> bool {
        self.equilibria_hold && self.launch_outcome_claimed
    }
}

/// Compares the diagram's stability claims with long-run simulation at the given currents.
pub fn validate_diagram(diagram: &BifurcationDiagram, currents: &[f64]) -> Vec<DiagramCheck> {
    currents
        .par_iter()
        .map(|&i| {
            let p = diagram.params.with_current(i);
            let stable = diagram.stable_states_at(i);
            let claimed_cycle = diagram.cycle_at(i);
            let so = SettleOptions { nearest_fallback: true, slow_units: 100.0, ..Default::default() };
            let equilibria_hold = stable.iter().all(|e| {
                let kick = PhaseState::new(e.state.v + 1e-4, e.state.n);
                match settle(&p, &kick, &so) {
                    Ok(LongRun::Equilibrium { state, .. }) => state.dist(&e.state) < 1e-6,
                    _ => false,
                }
            });
            let launch_outcome_claimed = match settle(&p, &standard_launch(&p), &so) {
                Ok(LongRun::Equilibrium { state, .. }) => stable.iter().any(|e| e.state.dist(&state) < 1e-6),
                Ok(LongRun::Cycle { .. }) => claimed_cycle,
                _ => false,
            };
            DiagramCheck { i_app: i, claimed_stable: stable.len(), claimed_cycle, equilibria_hold, launch_outcome_claimed }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::n_nullcline;

    fn pars(eps: f64, i: f64, v0: f64, n0: f64) -> ModelParams {
        ModelParams::new(eps, i, v0, n0).unwrap()
    }

    fn region_iv() -> ModelParams {
        pars(0.02, I_STAR, -0.3, -0.1586)
    }

    #[test]
    fn branch_derivative_matches_fd() {
        let p = region_iv();
        for i in 0..200 {
            let v = -3.5 + 6.0 * i as f64 / 200.0;
            let h = 1e-6;
            let fd = (current_on_branch(&p, v + h) - current_on_branch(&p, v - h)) / (2.0 * h);
            assert!((fd - d_current_dv(&p, v)).abs() < 1e-7, "v={v}");
            let fd2 = (d_current_dv(&p, v + h) - d_current_dv(&p, v - h)) / (2.0 * h);
            assert!((fd2 - d2_current_dv2(&p, v)).abs() < 1e-6);
        }
    }

    #[test]
    fn branch_points_are_equilibria() {
        let p = region_iv();
        let b = equilibrium_branch(&p, V_WINDOW, 1001);
        for bp in &b.points {
            let pp = p.with_current(bp.i_app);
            assert!(crate::equilibria::residual(&pp, &bp.equilibrium.state) < 1e-10);
        }
        for f in &b.folds {
            assert!(d_current_dv(&p, f.location.v).abs() < 1e-9);
            assert!(d2_current_dv2(&p, f.location.v).abs() > 1e-6);
            assert!(f.residual < 1e-8);
        }
        for h in &b.hopfs {
            let pp = p.with_current(h.i_crit);
            let e = classify_equilibrium(&pp, &h.location).unwrap();
            assert!(e.eigenvalues[0].re.abs() < 1e-8 && e.eigenvalues[0].im.abs() > 0.0);
        }
    }

    #[test]
    fn region_iv_fold_above_i_star() {
        let f = rest_fold(&region_iv()).unwrap();
        assert!(f.i_crit > I_STAR);
        assert!((f.i_crit - 0.6774207).abs() < 1e-6);
        assert!(f.location.n < 0.0);
        assert_eq!(f.meta.state_tag, Some(StateTag::Down));
    }

    #[test]
    fn region_v_folds_straddle_i_star() {
        let p = pars(0.02, I_STAR, -1.5, -1.8682);
        let b = equilibrium_branch(&p, V_WINDOW, 4001);
        let down = b.folds.iter().find(|f| f.meta.state_tag == Some(StateTag::Down) && f.location.v < -1.5).unwrap();
        let up = b.folds.iter().find(|f| f.meta.state_tag == Some(StateTag::Up) && f.location.v > 0.5).unwrap();
        assert!(up.i_crit < I_STAR && I_STAR < down.i_crit);
        assert!((down.i_crit - 2.29268).abs() < 1e-4);
        assert!((up.i_crit + 0.64930).abs() < 1e-4);
    }

    #[test]
    fn hopf_location_is_analytic() {
        // tr J = 1 - V^2 - eps vanishes at V = +-sqrt(1 - eps)
        let p = pars(0.02, I_STAR, -1.5, -0.8);
        let h = rest_hopf(&p).unwrap();
        assert!((h.location.v + (1.0f64 - 0.02).sqrt()).abs() < 1e-10);
        assert!(h.i_crit > I_STAR);
        assert!((h.location.n - n_nullcline(h.location.v, &p)).abs() < 1e-14);
    }

    #[test]
    fn cycle_present_in_bistable_window_and_absent_below() {
        let p = region_iv();
        let c = find_limit_cycle(&p.with_current(0.673)).unwrap().unwrap();
        assert!(c.period > 0.0 && c.closure < 1e-5);
        assert!(c.v_max > 1.5 && c.v_min < -1.5);
        assert!(find_limit_cycle(&p.with_current(0.66)).unwrap().is_none());
    }

    #[test]
    fn relaxation_period_scales_with_one_over_eps() {
        let a = find_limit_cycle(&pars(0.02, 0.75, -0.3, -0.1586)).unwrap().unwrap();
        let b = find_limit_cycle(&pars(0.01, 0.75, -0.3, -0.1586)).unwrap().unwrap();
        let r = b.period / a.period;
        assert!((1.6..=2.4).contains(&r), "ratio {r}");
    }

    #[test]
    fn snic_discrimination() {
        let p1 = pars(0.02, I_STAR, 0.0, 0.03);
        let f1 = rest_fold(&p1).unwrap();
        assert!(detect_snic(&p1, &f1));
        let p4 = region_iv();
        let f4 = rest_fold(&p4).unwrap();
        assert!(!detect_snic(&p4, &f4));
        let p5 = pars(0.02, I_STAR, -1.5, -1.8682);
        let b = equilibrium_branch(&p5, V_WINDOW, 4001);
        let up = b.folds.iter().find(|f| f.meta.state_tag == Some(StateTag::Up)).unwrap();
        assert!(!detect_snic(&p5, up));
    }

    #[test]
    fn gap_signs_around_connection() {
        let p = region_iv();
        let sec = SectionSpec::default();
        let below = probe_gap(&p.with_current(0.666), &sec).unwrap();
        let above = probe_gap(&p.with_current(0.6692), &sec).unwrap();
        assert_eq!(below.sign, Some(GapSign::Negative));
        assert_eq!(above.sign, Some(GapSign::Positive));
        assert!(below.gap().unwrap() < 0.0 && above.gap().unwrap() > 0.0);
    }

    #[test]
    fn bracket_invalid_for_region_i() {
        let p = pars(0.02, I_STAR, 0.0, 0.03);
        let f = rest_fold(&p).unwrap();
        let r = find_homoclinic(&p, Some((I_STAR + 1e-6, f.i_crit - 1e-6)), &SectionSpec::default());
        assert!(matches!(r, Err(ContinuationError::BracketInvalid { .. })), "{r:?}");
    }

    #[test]
    fn homoclinic_in_region_iv() {
        let h = find_homoclinic(&region_iv(), None, &SectionSpec::default()).unwrap();
        assert!((h.point.i_crit - 0.6685534).abs() < 2e-6, "{}", h.point.i_crit);
        assert!(h.point.i_crit < rest_fold(&region_iv()).unwrap().i_crit);
        assert!(h.gap.unwrap().abs() < 1e-4);
        assert!(h.loop_closure < 1e-4, "closure {}", h.loop_closure);
        let lp = h.near_loop.unwrap();
        assert!(lp.samples.windows(2).all(|w| w[1].t >= w[0].t));
        assert!(lp.spike_times().len() == 1);
    }

    #[test]
    fn diagram_agrees_with_simulation() {
        let p = region_iv();
        let opts = DiagramOptions { cycle_samples: 21, ..Default::default() };
        let d = bifurcation_diagram(&p, (0.6, 0.75), &opts);
        assert!(!d.points_of(BifurcationKind::Homoclinic).is_empty());
        assert_eq!(d.points_of(BifurcationKind::Transcritical).len(), 0);
        let currents: Vec<f64> = (0..10).map(|j| 0.605 + 0.014 * j as f64).collect();
        for c in validate_diagram(&d, &currents) {
            assert!(c.agrees(), "{c:?}");
        }
    }
}
