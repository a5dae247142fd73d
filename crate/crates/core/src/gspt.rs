//! Singular limit: critical manifold, layer and reduced flows, and the
//! epsilon-scaling experiments.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{bistable_range, latency_curve, LatencyCurve, LogLogFit};
use crate::continuation::{
    find_homoclinic, probe_gap, rest_fold, section_gap, ContinuationError, GapSign, SectionSpec,
};
use crate::dynamics::{run_steps, DynamicsError, Event, EventKind, Flow, Sample, Termination, Trajectory};
use crate::model::{fast_rate, n_inf, ModelParams, PhaseState, I_STAR, V_WINDOW};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GsptError {
    #[error("state ({v}, {n}) is not on the critical manifold (residual {residual:e})")]
    NotOnManifold { v: f64, n: f64, residual: f64 },
    #[error("epsilon list must be strictly decreasing and positive")]
    BadEpsilons,
    #[error(transparent)]
    Continuation(#[from] ContinuationError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Roots of the layer cubic at fixed n, labelled by the V-interval they live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerBranch {
    /// V < -1, attracting.
    Left,
    /// -1 < V < 1, repelling.
    Middle,
    /// V > 1, attracting.
    Right,
}

impl LayerBranch {
    pub fn of(v: f64) -> LayerBranch {
        if v < -1.0 {
            LayerBranch::Left
        } else if v > 1.0 {
            LayerBranch::Right
        } else {
            LayerBranch::Middle
        }
    }

    pub fn is_attracting(self) -> bool {
        self != LayerBranch::Middle
    }

    fn interval(self) -> (f64, f64) {
        match self {
            LayerBranch::Left => (-1e3, -1.0),
            LayerBranch::Middle => (-1.0, 1.0),
            LayerBranch::Right => (1.0, 1e3),
        }
    }
}

/// Root of V - V^3/3 + I - n^2 on `branch`, if the branch exists at this n.
pub fn branch_root(i_app: f64, n: f64, branch: LayerBranch) -> Option<f64> {
    let q = |v: f64| fast_rate(v, n, i_app);
    let (mut a, mut b) = branch.interval();
    let (qa, qb) = (q(a), q(b));
    if qa == 0.0 {
        return Some(a);
    }
    if qb == 0.0 {
        return Some(b);
    }
    if (qa > 0.0) == (qb > 0.0) {
        return None;
    }
    let up = qa < 0.0;
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if (q(m) < 0.0) == up {
            a = m;
        } else {
            b = m;
        }
        if b - a < 1e-15 * (1.0 + m.abs()) {
            break;
        }
    }
    Some(0.5 * (a + b))
}

/// Distance in V from `s` to the nearest attracting root at the same n.
pub fn distance_to_attracting(i_app: f64, s: &PhaseState) -> Option<f64> {
    [LayerBranch::Left, LayerBranch::Right]
        .iter()
        .filter_map(|&b| branch_root(i_app, s.n, b))
        .map(|v| (v - s.v).abs())
        .min_by(|a, b| a.partial_cmp(b).unwrap())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalManifold {
    pub i_app: f64,
    /// n > 0, |V| > 1.
    pub s_a_plus: Vec<PhaseState>,
    /// n > 0, |V| < 1.
    pub s_r_plus: Vec<PhaseState>,
    /// n < 0, |V| > 1.
    pub s_a_minus: Vec<PhaseState>,
    /// n < 0, |V| < 1.
    pub s_r_minus: Vec<PhaseState>,
    /// Folds of the layer problem at V = 1 (one per sheet).
    pub folds: Vec<PhaseState>,
    /// Self-intersection at (-1, 0), present only at I = I*.
    pub pinch: Option<PhaseState>,
}

impl CriticalManifold {
    pub fn new(i_app: f64, samples: usize) -> CriticalManifold {
        let mut m = CriticalManifold {
            i_app,
            s_a_plus: Vec::new(),
            s_r_plus: Vec::new(),
            s_a_minus: Vec::new(),
            s_r_minus: Vec::new(),
            folds: Vec::new(),
            pinch: None,
        };
        let n = samples.max(2);
        for k in 0..n {
            let v = V_WINDOW.0 + (V_WINDOW.1 - V_WINDOW.0) * k as f64 / (n - 1) as f64;
            let r = v - v * v * v / 3.0 + i_app;
            if r < 0.0 {
                continue;
            }
            let nn = r.sqrt();
            let attracting = 1.0 - v * v < 0.0;
            if nn == 0.0 {
                continue;
            }
            let (plus, minus) = if attracting {
                (&mut m.s_a_plus, &mut m.s_a_minus)
            } else {
                (&mut m.s_r_plus, &mut m.s_r_minus)
            };
            plus.push(PhaseState::new(v, nn));
            minus.push(PhaseState::new(v, -nn));
        }
        let rf = 2.0 / 3.0 + i_app;
        if rf > 0.0 {
            m.folds = vec![PhaseState::new(1.0, rf.sqrt()), PhaseState::new(1.0, -rf.sqrt())];
        }
        if (i_app - I_STAR).abs() < 1e-12 {
            m.pinch = Some(PhaseState::new(-1.0, 0.0));
        }
        m
    }

    pub fn all(&self) -> impl Iterator<Item = (&PhaseState, bool)> {
        self.s_a_plus
            .iter()
            .chain(&self.s_a_minus)
            .map(|s| (s, true))
            .chain(self.s_r_plus.iter().chain(&self.s_r_minus).map(|s| (s, false)))
    }
}

fn push(samples: &mut Vec<Sample>, t: f64, y: [f64; 2], f: [f64; 2]) {
    samples.push(Sample { t, v: y[0], n: y[1], dv: f[0], dn: f[1] });
}

/// Fast flow with n frozen, run until |V'| < 1e-11, the window is left or t_end.
pub fn layer_flow(i_app: f64, s0: &PhaseState, t_end: f64) -> Result<Trajectory, GsptError> {
    let n = s0.n;
    let f = move |y: &[f64; 2]| [fast_rate(y[0], n, i_app), 0.0];
    let mut samples = Vec::new();
    let mut events = Vec::new();
    let y0 = [s0.v, s0.n];
    push(&mut samples, 0.0, y0, f(&y0));
    let mut termination = Termination::TEnd;
    if f(&y0)[0].abs() < 1e-11 {
        termination = Termination::Converged;
    } else {
        run_steps(f, 0.0, y0, t_end, 1e-10, 1e-12, 0.1, |st| {
            push(&mut samples, st.t1(), st.y1, st.f1);
            if st.y1[0] < -6.0 || st.y1[0] > 5.0 {
                termination = Termination::WindowExit;
                events.push(Event {
                    t: st.t1(),
                    state: PhaseState::new(st.y1[0], n),
                    segment: 0,
                    kind: EventKind::WindowExit,
                });
                return Flow::Stop;
            }
            if st.f1[0].abs() < 1e-11 {
                termination = Termination::Converged;
                events.push(Event {
                    t: st.t1(),
                    state: PhaseState::new(st.y1[0], n),
                    segment: 0,
                    kind: EventKind::Converged { target: None },
                });
                return Flow::Stop;
            }
            Flow::Continue
        })?;
    }
    Ok(Trajectory { samples, events, termination, backward: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SingularPoint {
    /// Layer fold at V = +-1 away from the self-intersection.
    Fold,
    /// The self-intersection (-1, 0) at I = I*.
    Pinch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReducedEnd {
    Equilibrium { state: PhaseState },
    SingularDrop { state: PhaseState, at: SingularPoint },
    TEnd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedTrajectory {
    pub branch: LayerBranch,
    /// (slow time, state) pairs.
    pub samples: Vec<(f64, PhaseState)>,
    pub end: ReducedEnd,
}

/// n where `branch` ends: the V = -1 or V = 1 tangency of the cubic at fixed n.
fn branch_edges(i_app: f64, branch: LayerBranch) -> Vec<(f64, f64)> {
    // (n^2 at the edge, V at the edge)
    match branch {
        LayerBranch::Left => vec![(i_app - 2.0 / 3.0, -1.0)],
        LayerBranch::Right => vec![(i_app + 2.0 / 3.0, 1.0)],
        LayerBranch::Middle => vec![(i_app - 2.0 / 3.0, -1.0), (i_app + 2.0 / 3.0, 1.0)],
    }
}

/// Slow flow on the critical manifold in slow time (epsilon of `p` is unused).
pub fn reduced_flow(p: &ModelParams, s0: &PhaseState, t_end: f64) -> Result<ReducedTrajectory, GsptError> {
    let i = p.i_app;
    let residual = fast_rate(s0.v, s0.n, i).abs();
    if residual > 1e-8 {
        return Err(GsptError::NotOnManifold { v: s0.v, n: s0.n, residual });
    }
    let branch = LayerBranch::of(s0.v);
    let edges = branch_edges(i, branch);
    // V on the branch, clamped to the edge value once the branch has ended
    let v_of = |n: f64| -> f64 {
        branch_root(i, n, branch).unwrap_or_else(|| {
            let mut best = (f64::INFINITY, 0.0);
            for &(n2, ve) in edges.iter() {
                let d = (n * n - n2).abs();
                if d < best.0 {
                    best = (d, ve);
                }
            }
            best.1
        })
    };
    let (v0, n0) = (p.v0, p.n0);
    let f = |y: &[f64; 2]| [n_inf(v_of(y[0]) - v0) + n0 - y[0], 0.0];
    // signed distance to the branch domain boundary, positive inside
    let inside = |n: f64| -> f64 {
        match branch {
            LayerBranch::Left => n * n - edges[0].0,
            LayerBranch::Right => edges[0].0 - n * n,
            LayerBranch::Middle => (n * n - edges[0].0).min(edges[1].0 - n * n),
        }
    };
    let mut samples = vec![(0.0, *s0)];
    let mut end = ReducedEnd::TEnd;
    let y0 = [s0.n, 0.0];
    if f(&y0)[0].abs() < 1e-12 {
        return Ok(ReducedTrajectory { branch, samples, end: ReducedEnd::Equilibrium { state: *s0 } });
    }
    run_steps(f, 0.0, y0, t_end, 1e-10, 1e-12, 0.05, |st| {
        if inside(st.y1[0]) < 0.0 || branch_root(i, st.y1[0], branch).is_none() {
            let t = st.locate(|y| inside(y[0]));
            let n = st.dense(t)[0];
            let v = v_of(n);
            let at = if (v + 1.0).abs() < 1e-6 && n.abs() < 1e-6 { SingularPoint::Pinch } else { SingularPoint::Fold };
            let state = PhaseState::new(v, n);
            samples.push((t, state));
            end = ReducedEnd::SingularDrop { state, at };
            return Flow::Stop;
        }
        let n = st.y1[0];
        let state = PhaseState::new(v_of(n), n);
        samples.push((st.t1(), state));
        if st.f1[0].abs() < 1e-11 {
            end = ReducedEnd::Equilibrium { state };
            return Flow::Stop;
        }
        Flow::Continue
    })?;
    Ok(ReducedTrajectory { branch, samples, end })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SingularSegment {
    Layer { from: PhaseState, to: PhaseState, branch: LayerBranch },
    Reduced { from: PhaseState, branch: LayerBranch, end: ReducedEnd },
}

/// Alternates layer jumps and reduced drifts from `s0` for at most `max_segments` pieces.
pub fn singular_orbit(p: &ModelParams, s0: &PhaseState, max_segments: usize) -> Result<Vec<SingularSegment>, GsptError> {
    let mut out = Vec::new();
    let mut s = *s0;
    while out.len() < max_segments {
        let layer = layer_flow(p.i_app, &s, 1e4)?;
        if layer.termination != Termination::Converged {
            break;
        }
        let to = layer.last_state();
        out.push(SingularSegment::Layer { from: s, to, branch: LayerBranch::of(to.v) });
        if out.len() >= max_segments {
            break;
        }
        let red = reduced_flow(p, &to, 1e3)?;
        out.push(SingularSegment::Reduced { from: to, branch: red.branch, end: red.end });
        match red.end {
            ReducedEnd::SingularDrop { state, .. } => {
                // step past the edge so the branch just left no longer exists
                let drift = n_inf(state.v - p.v0) + p.n0 - state.n;
                let jump = if state.v > 0.0 { -1e-6 } else { 1e-6 };
                s = PhaseState::new(state.v + jump, state.n + 1e-7 * drift.signum());
            }
            _ => break,
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Scaling experiments

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub epsilon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyFit {
    pub variable: String,
    /// Ascending powers.
    pub coefficients: Vec<f64>,
    pub rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingStudy {
    pub quantity: String,
    pub v0: f64,
    pub n0: f64,
    pub epsilons: Vec<f64>,
    pub rows: Vec<ScalingRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub poly_fit: Option<PolyFit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loglog: Option<LogLogFit>,
    /// Relative change between the two smallest-epsilon values, where meaningful.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_relative_change: Option<f64>,
    /// max/min of the values, where meaningful.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    pub failures: Vec<(f64, String)>,
}

impl ScalingStudy {
    fn new(quantity: &str, v0: f64, n0: f64, epsilons: &[f64]) -> ScalingStudy {
        ScalingStudy {
            quantity: quantity.into(),
            v0,
            n0,
            epsilons: epsilons.to_vec(),
            rows: Vec::new(),
            poly_fit: None,
            loglog: None,
            last_relative_change: None,
            ratio: None,
            failures: Vec::new(),
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.value).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epsilon,delta,value\n");
        for r in &self.rows {
            let d = r.delta.map(|d| format!("{d:.17e}")).unwrap_or_default();
            s.push_str(&format!("{:.17e},{},{:.17e}\n", r.epsilon, d, r.value));
        }
        s
    }
}

fn check_epsilons(eps: &[f64]) -> Result<(), GsptError> {
    if eps.is_empty() || eps.iter().any(|&e| !(e > 0.0 && e.is_finite())) || eps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(GsptError::BadEpsilons);
    }
    Ok(())
}

pub const DEFAULT_EPSILONS: [f64; 4] = [0.05, 0.02, 0.01, 0.005];

fn params(v0: f64, n0: f64, epsilon: f64) -> Result<ModelParams, GsptError> {
    ModelParams::new(epsilon, I_STAR, v0, n0)
        .map_err(|e| GsptError::Dynamics(DynamicsError::InvalidOptions(e.to_string())))
}

/// I_c = I_SH - I*.
pub fn compute_ic(v0: f64, n0: f64, epsilon: f64) -> Result<f64, GsptError> {
    let p = params(v0, n0, epsilon)?;
    Ok(find_homoclinic(&p, None, &SectionSpec::default())?.point.i_crit - I_STAR)
}

/// Least-squares polynomial of the given degree, by SVD.
pub fn poly_fit(xs: &[f64], ys: &[f64], degree: usize) -> Option<(Vec<f64>, f64)> {
    if xs.len() < degree + 1 {
        return None;
    }
    let a = DMatrix::from_fn(xs.len(), degree + 1, |r, c| xs[r].powi(c as i32));
    let b = DVector::from_column_slice(ys);
    let sol = a.clone().svd(true, true).solve(&b, 1e-14).ok()?;
    let res = &a * &sol - &b;
    Some((sol.iter().copied().collect(), (res.norm_squared() / xs.len() as f64).sqrt()))
}

pub fn ic_sweep(v0: f64, n0: f64, epsilons: &[f64]) -> Result<ScalingStudy, GsptError> {
    check_epsilons(epsilons)?;
    let mut st = ScalingStudy::new("I_c", v0, n0, epsilons);
    let results: Vec<Result<f64, GsptError>> = epsilons.par_iter().map(|&e| compute_ic(v0, n0, e)).collect();
    for (&e, r) in epsilons.iter().zip(results) {
        match r {
            Ok(ic) => st.rows.push(ScalingRow { epsilon: e, delta: None, value: ic }),
            Err(err) => st.failures.push((e, err.to_string())),
        }
    }
    let xs: Vec<f64> = st.rows.iter().map(|r| r.epsilon.sqrt()).collect();
    let ys = st.values();
    st.poly_fit =
        poly_fit(&xs, &ys, 2).map(|(c, rms)| PolyFit { variable: "sqrt(epsilon)".into(), coefficients: c, rms });
    Ok(st)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapMonotonicity {
    pub samples: Vec<(f64, f64)>,
    pub strictly_increasing: bool,
    pub sign_changes: usize,
}

pub fn gap_monotonicity_check(
    p: &ModelParams,
    i_window: (f64, f64),
    k_points: usize,
    sec: &SectionSpec,
) -> Result<GapMonotonicity, GsptError> {
    let k = k_points.max(2);
    let currents: Vec<f64> = (0..k).map(|j| i_window.0 + (i_window.1 - i_window.0) * j as f64 / (k - 1) as f64).collect();
    let samples: Vec<(f64, f64)> = currents
        .par_iter()
        .map(|&i| section_gap(&p.with_current(i), sec.rho, sec.v_window).map(|g| (i, g.gap)))
        .collect::<Result<_, _>>()?;
    let strictly_increasing = samples.windows(2).all(|w| w[1].1 > w[0].1);
    let sign_changes = samples.windows(2).filter(|w| (w[0].1 > 0.0) != (w[1].1 > 0.0)).count();
    Ok(GapMonotonicity { samples, strictly_increasing, sign_changes })
}

/// Bistable width per epsilon on a grid spanning the Region's expected range.
pub fn bistability_persistence(
    v0: f64,
    n0: f64,
    epsilons: &[f64],
    i_grid: &[f64],
) -> Result<ScalingStudy, GsptError> {
    check_epsilons(epsilons)?;
    let mut st = ScalingStudy::new("bistable_width", v0, n0, epsilons);
    for &e in epsilons {
        let p = params(v0, n0, e)?;
        let r = bistable_range(&p, i_grid);
        st.rows.push(ScalingRow { epsilon: e, delta: None, value: r.width() });
    }
    let w = st.values();
    if w.len() >= 2 {
        let (a, b) = (w[w.len() - 2], w[w.len() - 1]);
        if a > 0.0 {
            st.last_relative_change = Some((b - a).abs() / a);
        }
    }
    Ok(st)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsenceRow {
    pub epsilon: f64,
    pub bracket: (f64, f64),
    pub bracket_invalid: bool,
    pub gap_signs: Vec<(f64, Option<GapSign>)>,
    pub constant_sign: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsenceReport {
    pub v0: f64,
    pub n0: f64,
    pub rows: Vec<AbsenceRow>,
}

impl AbsenceReport {
    /// No connection at any epsilon.
    pub fn absent(&self) -> bool {
        self.rows.iter().all(|r| r.bracket_invalid && r.constant_sign)
    }
}

/// Looks for a saddle-homoclinic current in (I*, I_fold) at each epsilon.
pub fn homoclinic_absence_check(v0: f64, n0: f64, epsilons: &[f64], samples: usize) -> Result<AbsenceReport, GsptError> {
    check_epsilons(epsilons)?;
    let sec = SectionSpec::default();
    let rows = epsilons
        .iter()
        .map(|&e| {
            let p = params(v0, n0, e)?;
            let hi = rest_fold(&p).map(|f| f.i_crit).unwrap_or(I_STAR + 0.05);
            let bracket = (I_STAR + 1e-6, hi - 1e-6);
            let found = find_homoclinic(&p, Some(bracket), &sec);
            let bracket_invalid = matches!(found, Err(ContinuationError::BracketInvalid { .. }));
            let k = samples.max(2);
            let gap_signs: Vec<(f64, Option<GapSign>)> = (0..k)
                .into_par_iter()
                .map(|j| {
                    let i = bracket.0 + (bracket.1 - bracket.0) * j as f64 / (k - 1) as f64;
                    (i, probe_gap(&p.with_current(i), &sec).ok().and_then(|g| g.sign))
                })
                .collect();
            let known: Vec<GapSign> = gap_signs.iter().filter_map(|g| g.1).collect();
            let constant_sign = known.windows(2).all(|w| w[0] == w[1]);
            Ok(AbsenceRow { epsilon: e, bracket, bracket_invalid, gap_signs, constant_sign })
        })
        .collect::<Result<Vec<_>, GsptError>>()?;
    Ok(AbsenceReport { v0, n0, rows })
}

/// Latency versus distance above the resting fold, from rest at I*.
pub fn latency_scaling(v0: f64, n0: f64, epsilon: f64, deltas: &[f64]) -> Result<(ScalingStudy, LatencyCurve), GsptError> {
    let p = params(v0, n0, epsilon)?;
    let fold = rest_fold(&p).ok_or(ContinuationError::NoRest(I_STAR))?;
    let curve = latency_curve(&p, fold.i_crit, deltas).map_err(|e| match e {
        crate::classify::ClassifyError::Dynamics(d) => GsptError::Dynamics(d),
        crate::classify::ClassifyError::Continuation(c) => GsptError::Continuation(c),
        other => GsptError::Dynamics(DynamicsError::InvalidOptions(other.to_string())),
    })?;
    let mut st = ScalingStudy::new("latency", v0, n0, &[epsilon]);
    for (d, l) in &curve.points {
        st.rows.push(ScalingRow { epsilon, delta: Some(*d), value: l.time().unwrap_or(f64::INFINITY) });
    }
    st.loglog = curve.fit;
    st.ratio = curve.ratio;
    Ok((st, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibria::find_equilibria;

    fn pars(eps: f64, i: f64, v0: f64, n0: f64) -> ModelParams {
        ModelParams::new(eps, i, v0, n0).unwrap()
    }

    #[test]
    fn manifold_samples_satisfy_cubic_and_sign_rule() {
        for i in [0.5, I_STAR, 0.9] {
            let m = CriticalManifold::new(i, 2001);
            for (s, attracting) in m.all() {
                assert!(fast_rate(s.v, s.n, i).abs() < 1e-12);
                assert_eq!(attracting, 1.0 - s.v * s.v < 0.0);
            }
            for f in &m.folds {
                assert!(fast_rate(f.v, f.n, i).abs() < 1e-12);
            }
        }
        assert!(CriticalManifold::new(I_STAR, 11).pinch.is_some());
        assert!(CriticalManifold::new(0.7, 11).pinch.is_none());
    }

    #[test]
    fn layer_flow_cases() {
        let i = 0.5;
        let n = 0.3;
        let left = branch_root(i, n, LayerBranch::Left).unwrap();
        let mid = branch_root(i, n, LayerBranch::Middle).unwrap();
        let right = branch_root(i, n, LayerBranch::Right).unwrap();
        let tr = layer_flow(i, &PhaseState::new(left - 0.5, n), 1e3).unwrap();
        assert_eq!(tr.termination, Termination::Converged);
        assert!((tr.last_state().v - left).abs() < 1e-9);
        assert!(fast_rate(tr.last_state().v, n, i).abs() < 1e-9);
        let still = layer_flow(i, &PhaseState::new(right, n), 10.0).unwrap();
        assert_eq!(still.termination, Termination::Converged);
        assert_eq!(still.samples.len(), 1);
        let away = layer_flow(i, &PhaseState::new(mid + 1e-4, n), 1e3).unwrap();
        assert!((away.last_state().v - right).abs() < 1e-9);
    }

    #[test]
    fn reduced_flow_reaches_rest_on_lower_left() {
        let p = pars(0.02, I_STAR, -0.3, -0.1586);
        let rest = crate::equilibria::resting_state(&p).unwrap();
        assert_eq!(LayerBranch::of(rest.state.v), LayerBranch::Left);
        let v = rest.state.v - 0.3;
        let n = -(v - v * v * v / 3.0 + I_STAR).sqrt();
        let r = reduced_flow(&p, &PhaseState::new(v, n), 1e3).unwrap();
        match r.end {
            ReducedEnd::Equilibrium { state } => assert!(state.dist(&rest.state) < 1e-6, "{state:?}"),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn reduced_flow_drops_at_fold() {
        let p = pars(0.02, I_STAR, -0.3, -0.1586);
        let v = 1.5;
        let n = (v - v * v * v / 3.0 + I_STAR).sqrt();
        let r = reduced_flow(&p, &PhaseState::new(v, n), 1e3).unwrap();
        match r.end {
            ReducedEnd::SingularDrop { state, at } => {
                assert_eq!(at, SingularPoint::Fold);
                assert!((state.v - 1.0).abs() < 1e-4 && (state.n - (4.0f64 / 3.0).sqrt()).abs() < 1e-8);
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn reduced_equilibria_are_full_equilibria() {
        for (v0, n0) in [(-0.3, -0.1586), (0.0, 0.03), (-1.5, 0.5)] {
            let p = pars(0.3, I_STAR - 0.05, v0, n0);
            for e in find_equilibria(&p) {
                let b = LayerBranch::of(e.state.v);
                let v = branch_root(p.i_app, e.state.n, b).unwrap();
                assert!((v - e.state.v).abs() < 1e-9);
                let rate = n_inf(v - v0) + n0 - e.state.n;
                assert!(rate.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn singular_itinerary_below_i_star() {
        let p = pars(0.02, I_STAR - 0.01, -0.3, -0.1586);
        let rest = crate::equilibria::resting_state(&p).unwrap();
        let s0 = PhaseState::new(rest.state.v + 1.0, rest.state.n);
        let it = singular_orbit(&p, &s0, 8).unwrap();
        let kinds: Vec<String> = it
            .iter()
            .map(|s| match s {
                SingularSegment::Layer { branch, .. } => format!("layer:{branch:?}"),
                SingularSegment::Reduced { branch, end, .. } => format!(
                    "reduced:{branch:?}:{}",
                    match end {
                        ReducedEnd::Equilibrium { .. } => "eq",
                        ReducedEnd::SingularDrop { .. } => "drop",
                        ReducedEnd::TEnd => "tend",
                    }
                ),
            })
            .collect();
        assert_eq!(kinds, ["layer:Right", "reduced:Right:drop", "layer:Left", "reduced:Left:eq"], "{kinds:?}");
    }

    #[test]
    fn fenichel_closeness_on_sliding_phases() {
        let eps = 0.005;
        let p = pars(eps, 0.7, -0.3, -0.1586);
        let o = crate::dynamics::IntegratorOptions { t_end: 3.0 / eps, detect_convergence: false, ..Default::default() };
        let tr = crate::dynamics::integrate(&p, &PhaseState::new(-2.0, 0.5), &o).unwrap();
        let mut checked = 0;
        for s in tr.samples.iter().filter(|s| s.t > 1.0 / eps && s.dv.abs() < 0.05 && s.v.abs() > 1.2) {
            let d = distance_to_attracting(p.i_app, &s.state()).unwrap();
            assert!(d < 10.0 * eps, "t {} d {d}", s.t);
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn poly_fit_exact_quadratic() {
        let xs = [0.1, 0.2, 0.3, 0.5];
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 - 2.0 * x + 0.5 * x * x).collect();
        let (c, rms) = poly_fit(&xs, &ys, 2).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-10 && (c[1] + 2.0).abs() < 1e-10 && (c[2] - 0.5).abs() < 1e-10);
        assert!(rms < 1e-12);
    }

    #[test]
    fn epsilon_lists_validated() {
        assert_eq!(check_epsilons(&[0.01, 0.02]), Err(GsptError::BadEpsilons));
        assert_eq!(check_epsilons(&[0.02, -0.01]), Err(GsptError::BadEpsilons));
        assert!(check_epsilons(&DEFAULT_EPSILONS).is_ok());
    }

    #[test]
    fn compute_ic_is_homoclinic_offset() {
        let ic = compute_ic(-0.3, -0.1586, 0.02).unwrap();
        let p = pars(0.02, I_STAR, -0.3, -0.1586);
        let h = find_homoclinic(&p, None, &SectionSpec::default()).unwrap();
        assert_eq!(ic, h.point.i_crit - I_STAR);
    }
}
