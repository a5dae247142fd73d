//! Region labels, the (V0, n0) chart and the electrophysiological signature battery.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::continuation::{
    current_on_branch, find_limit_cycle, find_limit_cycle_from, fold_voltages, rest_fold, rest_hopf, settle,
    standard_launch, BifurcationPoint, ContinuationError, LongRun, SettleOptions,
};
use crate::dynamics::{integrate, integrate_protocol, DynamicsError, EventKind, IntegratorOptions, StimulusProtocol, Target};
use crate::equilibria::{find_equilibria, principal_saddle, resting_state, Equilibrium, EquilibriumKind};
use crate::model::{
    delta0, n0_star, n_inf, n_inf_prime, v0_star, ModelParams, PhaseState, I_STAR, V_WINDOW,
};

/// Upper end of the current scan used to tell Type III from Type II.
pub const TYPE_III_CEILING: f64 = 2.0;
pub const TYPE_III_POINTS: usize = 64;
pub const BOUNDARY_TOL: f64 = 1e-6;
pub const ADP_MIN_BUMP: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifyError {
    #[error("unclassifiable census at I*: {0:?}")]
    Unclassifiable(Vec<EquilibriumKind>),
    #[error("no stable resting state at I = {0}")]
    NoRest(f64),
    #[error("no spike elicited at I = {0}")]
    NoSpike(f64),
    #[error(transparent)]
    Continuation(#[from] ContinuationError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    I,
    II,
    III,
    IV,
    V,
    #[serde(rename = "boundary")]
    Boundary,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::I => "I",
            Region::II => "II",
            Region::III => "III",
            Region::IV => "IV",
            Region::V => "V",
            Region::Boundary => "boundary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleScan {
    pub ceiling: f64,
    pub points: usize,
    /// Lowest scanned current with a stable cycle (or an inconclusive run).
    pub first_cycle: Option<f64>,
    pub ambiguous: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionEvidence {
    pub census: Vec<EquilibriumKind>,
    pub equilibria: Vec<PhaseState>,
    pub delta0: f64,
    /// Estimated n0-distance to the nearest fold tangency at I*.
    pub tangency_distance: Option<f64>,
    pub fold_currents: Vec<f64>,
    /// First loss of stability of the resting branch above I*.
    pub rest_loss: Option<BifurcationPoint>,
    pub cycle_scan: Option<CycleScan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionLabel {
    pub region: Region,
    pub evidence: RegionEvidence,
}

/// n0-distance to the nearest fold tangency at I* in the same V0 column.
fn tangency_distance(v0: f64, n0: f64) -> Option<f64> {
    [1.0, -1.0]
        .iter()
        .flat_map(|&sign| tangency_points(v0, sign))
        .map(|(_, nt)| (n0 - nt).abs())
        .min_by(|a, b| a.partial_cmp(b).unwrap())
}

fn type_iii_scan(p: &ModelParams) -> CycleScan {
    let mut scan = CycleScan { ceiling: TYPE_III_CEILING, points: TYPE_III_POINTS, first_cycle: None, ambiguous: 0 };
    for j in 1..=TYPE_III_POINTS {
        let i = I_STAR + TYPE_III_CEILING * j as f64 / TYPE_III_POINTS as f64;
        match find_limit_cycle(&p.with_current(i)) {
            Ok(None) => continue,
            Ok(Some(_)) => {}
            Err(_) => scan.ambiguous += 1,
        }
        scan.first_cycle = Some(i);
        break;
    }
    scan
}

/// Labels a point of the (V0, n0) plane from the equilibrium census at I*
/// and the fate of the resting state for larger currents.
pub fn region_at(v0: f64, n0: f64, epsilon: f64) -> Result<RegionLabel, ClassifyError> {
    let p = ModelParams::new(epsilon, I_STAR, v0, n0).map_err(|e| {
        ClassifyError::Dynamics(DynamicsError::InvalidOptions(e.to_string()))
    })?;
    let eqs = find_equilibria(&p);
    let folds = fold_voltages(&p, V_WINDOW, 4000);
    let mut ev = RegionEvidence {
        census: eqs.iter().map(|e| e.kind).collect(),
        equilibria: eqs.iter().map(|e| e.state).collect(),
        delta0: delta0(&p),
        tangency_distance: tangency_distance(v0, n0),
        fold_currents: folds.iter().map(|&v| current_on_branch(&p, v)).collect(),
        rest_loss: None,
        cycle_scan: None,
    };
    let label = |region, ev| Ok(RegionLabel { region, evidence: ev });
    if ev.delta0.abs() < BOUNDARY_TOL || ev.tangency_distance.map(|d| d < BOUNDARY_TOL).unwrap_or(false) {
        return label(Region::Boundary, ev);
    }
    let stable: Vec<&Equilibrium> = eqs.iter().filter(|e| e.is_stable()).collect();
    let saddles: Vec<&Equilibrium> = eqs.iter().filter(|e| e.kind == EquilibriumKind::Saddle).collect();
    match (eqs.len(), stable.len(), saddles.len()) {
        (1, 1, 0) => {
            ev.rest_loss = rest_hopf(&p).or_else(|| rest_fold(&p));
            if ev.rest_loss.map(|b| b.i_crit <= I_STAR + TYPE_III_CEILING).unwrap_or(false) {
                return label(Region::II, ev);
            }
            let scan = type_iii_scan(&p);
            let region = if scan.first_cycle.is_some() { Region::II } else { Region::III };
            ev.cycle_scan = Some(scan);
            label(region, ev)
        }
        (3, 2, 1) => label(Region::V, ev),
        (3, 1, 1) => {
            let rest = stable[0];
            let saddle = saddles[0];
            if rest.state.n < 0.0 && saddle.state.n < 0.0 {
                ev.rest_loss = rest_fold(&p);
                label(Region::IV, ev)
            } else if rest.state.n > 0.0 && saddle.state.n > 0.0 {
                ev.rest_loss = rest_fold(&p);
                label(Region::I, ev)
            } else {
                Err(ClassifyError::Unclassifiable(ev.census))
            }
        }
        _ => Err(ClassifyError::Unclassifiable(ev.census)),
    }
}

// ---------------------------------------------------------------------------
// Chart

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChartOptions {
    pub v0_range: (f64, f64),
    pub n0_range: (f64, f64),
    pub grid: (usize, usize),
    pub epsilon: f64,
}

impl Default for ChartOptions {
    fn default() -> Self {
        ChartOptions { v0_range: (-2.0, 0.2), n0_range: (-2.2, 0.8), grid: (120, 120), epsilon: 0.02 }
    }
}

impl ChartOptions {
    pub fn v0_at(&self, i: usize) -> f64 {
        self.v0_range.0 + (self.v0_range.1 - self.v0_range.0) * (i as f64 + 0.5) / self.grid.0 as f64
    }

    pub fn n0_at(&self, j: usize) -> f64 {
        self.n0_range.0 + (self.n0_range.1 - self.n0_range.0) * (j as f64 + 0.5) / self.grid.1 as f64
    }

    pub fn cell_size(&self) -> (f64, f64) {
        (
            (self.v0_range.1 - self.v0_range.0) / self.grid.0 as f64,
            (self.n0_range.1 - self.n0_range.0) / self.grid.1 as f64,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartCell {
    pub i: usize,
    pub j: usize,
    pub v0: f64,
    pub n0: f64,
    /// `None` for an unclassifiable census.
    pub region: Option<Region>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryCurve {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chart {
    pub options: ChartOptions,
    /// Row-major: all V0 columns of the first n0 row, then the next row.
    pub cells: Vec<ChartCell>,
    pub tc_line: Vec<(f64, f64)>,
    pub sn_curves: Vec<BoundaryCurve>,
    pub pitchfork: (f64, f64),
}

impl Chart {
    pub fn cell(&self, i: usize, j: usize) -> &ChartCell {
        &self.cells[j * self.options.grid.0 + i]
    }

    pub fn labels(&self) -> std::collections::BTreeSet<Region> {
        self.cells.iter().filter_map(|c| c.region).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("v0,n0,region\n");
        for c in &self.cells {
            let r = c.region.map(Region::as_str).unwrap_or("unclassified");
            s.push_str(&format!("{:.17e},{:.17e},{}\n", c.v0, c.n0, r));
        }
        s
    }
}

/// sqrt(V - V^3/3 + I*) written so that the kink at V = -1 is explicit.
fn upper_sheet(v: f64) -> f64 {
    (v + 1.0).abs() * ((2.0 - v) / 3.0).sqrt()
}

fn upper_sheet_prime(v: f64) -> f64 {
    let r = ((2.0 - v) / 3.0).sqrt();
    let d = r - (v + 1.0) / (6.0 * r);
    if v >= -1.0 {
        d
    } else {
        -d
    }
}

/// n0 at which the V-nullcline sheet `sign` meets the n-nullcline at V (I = I*).
pub fn sheet_n0(v: f64, v0: f64, sign: f64) -> f64 {
    sign * upper_sheet(v) - n_inf(v - v0)
}

/// Critical points of `sheet_n0` in V: tangencies of the two nullclines at I*.
pub fn tangency_points(v0: f64, sign: f64) -> Vec<(f64, f64)> {
    let dh = |v: f64| sign * upper_sheet_prime(v) - n_inf_prime(v - v0);
    let mut out = Vec::new();
    for (lo, hi) in [(V_WINDOW.0, -1.0 - 1e-9), (-1.0 + 1e-9, 2.0 - 1e-9)] {
        let n = 2000;
        let mut a = lo;
        let mut fa = dh(a);
        for k in 1..=n {
            let b = lo + (hi - lo) * k as f64 / n as f64;
            let fb = dh(b);
            if (fa > 0.0) != (fb > 0.0) {
                let (mut x, mut y) = (a, b);
                while y - x > 1e-13 {
                    let m = 0.5 * (x + y);
                    if (dh(m) > 0.0) == (fa > 0.0) {
                        x = m;
                    } else {
                        y = m;
                    }
                }
                let v = 0.5 * (x + y);
                out.push((v, sheet_n0(v, v0, sign)));
            }
            a = b;
            fa = fb;
        }
    }
    out
}

fn sn_curves(opts: &ChartOptions, columns: usize) -> Vec<BoundaryCurve> {
    let mut curves: Vec<BoundaryCurve> = Vec::new();
    for (sign, tag) in [(1.0, "upper"), (-1.0, "lower")] {
        for (side, lo, hi) in [("left", f64::NEG_INFINITY, -1.0), ("right", -1.0, f64::INFINITY)] {
            let mut open: Vec<BoundaryCurve> = Vec::new();
            let mut prev_count = usize::MAX;
            for c in 0..columns {
                let v0 = opts.v0_range.0 + (opts.v0_range.1 - opts.v0_range.0) * c as f64 / (columns - 1) as f64;
                let pts: Vec<(f64, f64)> =
                    tangency_points(v0, sign).into_iter().filter(|&(v, _)| v > lo && v < hi).collect();
                if pts.len() != prev_count {
                    curves.append(&mut open);
                    open = (0..pts.len())
                        .map(|k| BoundaryCurve { name: format!("sn_{tag}_{side}_{k}"), points: Vec::new() })
                        .collect();
                    prev_count = pts.len();
                }
                for (k, &(_, n0)) in pts.iter().enumerate() {
                    open[k].points.push((v0, n0));
                }
            }
            curves.append(&mut open);
        }
    }
    curves.retain(|c| c.points.len() > 1);
    curves
}

/// Labels every grid cell and overlays the transcritical line and the fold
/// tangency curves.
pub fn chart(opts: &ChartOptions) -> Chart {
    let (nv, nn) = opts.grid;
    let idx: Vec<(usize, usize)> = (0..nn).flat_map(|j| (0..nv).map(move |i| (i, j))).collect();
    let cells: Vec<ChartCell> = idx
        .par_iter()
        .map(|&(i, j)| {
            let (v0, n0) = (opts.v0_at(i), opts.n0_at(j));
            let region = region_at(v0, n0, opts.epsilon).ok().map(|l| l.region);
            ChartCell { i, j, v0, n0, region }
        })
        .collect();
    let columns = 4 * nv + 1;
    let tc_line = (0..columns)
        .map(|c| {
            let v0 = opts.v0_range.0 + (opts.v0_range.1 - opts.v0_range.0) * c as f64 / (columns - 1) as f64;
            (v0, n0_star(v0))
        })
        .collect();
    let vs = v0_star();
    Chart {
        options: opts.clone(),
        cells,
        tc_line,
        sn_curves: sn_curves(opts, columns),
        pitchfork: (vs, n0_star(vs)),
    }
}

// ---------------------------------------------------------------------------
// Signatures

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Latency {
    Finite { time: f64 },
    Infinite { budget: f64 },
}

impl Latency {
    pub fn time(&self) -> Option<f64> {
        match self {
            Latency::Finite { time } => Some(*time),
            Latency::Infinite { .. } => None,
        }
    }
}

/// Time to the first spike after switching the current from that of `p_rest`
/// to `i_step`, starting at rest.
pub fn measure_latency(p_rest: &ModelParams, i_step: f64) -> Result<Latency, ClassifyError> {
    let rest = resting_state(p_rest).ok_or(ClassifyError::NoRest(p_rest.i_app))?;
    let p = p_rest.with_current(i_step);
    let budget = 100.0 / p.epsilon;
    let o = IntegratorOptions {
        t_end: budget,
        max_spikes: Some(1),
        detect_convergence: false,
        sample_stride: 256,
        ..Default::default()
    };
    let tr = integrate(&p, &rest.state, &o)?;
    Ok(match tr.spike_times().first() {
        Some(&t) => Latency::Finite { time: t },
        None => Latency::Infinite { budget },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log10 units.
    pub rms: f64,
}

/// Least-squares line through (log10 x, log10 y).
pub fn loglog_fit(points: &[(f64, f64)]) -> Option<LogLogFit> {
    let pts: Vec<(f64, f64)> =
        points.iter().filter(|(x, y)| *x > 0.0 && *y > 0.0).map(|(x, y)| (x.log10(), y.log10())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rms = (pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum::<f64>() / n).sqrt();
    Some(LogLogFit { slope, intercept, rms })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyCurve {
    pub rest_current: f64,
    pub fold_current: f64,
    pub points: Vec<(f64, Latency)>,
    pub fit: Option<LogLogFit>,
    /// max/min finite latency.
    pub ratio: Option<f64>,
}

/// Latency at `i_fold + delta` for each delta, from rest at the current of `p_rest`.
pub fn latency_curve(p_rest: &ModelParams, i_fold: f64, deltas: &[f64]) -> Result<LatencyCurve, ClassifyError> {
    let points: Vec<(f64, Latency)> = deltas
        .par_iter()
        .map(|&d| measure_latency(p_rest, i_fold + d).map(|l| (d, l)))
        .collect::<Result<_, _>>()?;
    let finite: Vec<(f64, f64)> = points.iter().filter_map(|(d, l)| l.time().map(|t| (*d, t))).collect();
    let ratio = if finite.is_empty() {
        None
    } else {
        let hi = finite.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let lo = finite.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        Some(hi / lo)
    };
    Ok(LatencyCurve { rest_current: p_rest.i_app, fold_current: i_fold, fit: loglog_fit(&finite), ratio, points })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdpRecord {
    pub present: bool,
    pub trough_v: Option<f64>,
    pub bump_height: f64,
    /// Bump survives perturbing the post-spike state by 1e-3 in each direction.
    pub robust: bool,
    pub kick: f64,
}

struct Tail {
    trough: Option<f64>,
    bump: f64,
}

fn tail_bump(vs: &[f64]) -> Tail {
    let mut best = Tail { trough: None, bump: 0.0 };
    let mut trough: Option<f64> = None;
    for w in vs.windows(3) {
        if w[1] < w[0] && w[1] <= w[2] {
            trough = Some(w[1]);
        }
        if w[1] > w[0] && w[1] >= w[2] {
            if let Some(t) = trough {
                if w[1] - t > best.bump {
                    best = Tail { trough: Some(t), bump: w[1] - t };
                }
            }
        }
    }
    best
}

fn settle_tail(p: &ModelParams, s0: &PhaseState, rest: &Equilibrium) -> Result<Vec<f64>, ClassifyError> {
    let o = IntegratorOptions {
        t_end: 200.0 / p.epsilon,
        max_step: 0.05,
        targets: vec![Target { state: rest.state, radius: 1e-7 }],
        ..Default::default()
    };
    let tr = integrate(p, s0, &o)?;
    Ok(tr.samples.iter().map(|s| s.v).collect())
}

/// Fires one spike from rest and looks for a non-monotone sub-threshold tail.
pub fn detect_adp(p: &ModelParams) -> Result<AdpRecord, ClassifyError> {
    let rest = resting_state(p).ok_or(ClassifyError::NoRest(p.i_app))?;
    let o = IntegratorOptions {
        t_end: 200.0 / p.epsilon,
        max_step: 0.05,
        targets: vec![Target { state: rest.state, radius: 1e-7 }],
        ..Default::default()
    };
    for kick in [0.25, 0.5, 1.0, 1.5] {
        let s0 = PhaseState::new(rest.state.v + kick, rest.state.n);
        if s0.v >= o.spike_threshold {
            break;
        }
        let tr = integrate(p, &s0, &o)?;
        let Some(t_spike) = tr.spike_times().first().copied() else { continue };
        let Some(k) = tr.samples.iter().position(|s| s.t > t_spike && s.v < 0.0) else { continue };
        let post = tr.samples[k].state();
        let vs: Vec<f64> = tr.samples[k..].iter().map(|s| s.v).collect();
        let tail = tail_bump(&vs);
        let mut robust = true;
        for (dv, dn) in [(1e-3, 0.0), (-1e-3, 0.0), (0.0, 1e-3), (0.0, -1e-3)] {
            let s = PhaseState::new(post.v + dv, post.n + dn);
            if tail_bump(&settle_tail(p, &s, &rest)?).bump <= ADP_MIN_BUMP {
                robust = false;
            }
        }
        let present = tail.bump > ADP_MIN_BUMP;
        return Ok(AdpRecord { present, trough_v: tail.trough, bump_height: tail.bump, robust: present && robust, kick });
    }
    Err(ClassifyError::NoSpike(p.i_app))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BistabilitySample {
    pub i_app: f64,
    pub bistable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BistableReport {
    pub range: Option<(f64, f64)>,
    pub samples: Vec<BistabilitySample>,
}

impl BistableReport {
    pub fn width(&self) -> f64 {
        self.range.map(|(a, b)| b - a).unwrap_or(0.0)
    }
}

/// Far-side launch: next to a second stable equilibrium when there is one,
/// else across the saddle's stable manifold, else high on the upper branch.
pub fn far_launch(p: &ModelParams, eqs: &[Equilibrium]) -> PhaseState {
    // near a fold the fixed offset from the saddle can fall back into the rest's basin
    if let Some(other) = eqs.iter().filter(|e| e.is_stable()).nth(1) {
        return PhaseState::new(other.state.v + 1e-4, other.state.n);
    }
    match principal_saddle(eqs) {
        Some(s) => PhaseState::new(s.state.v + 0.3, s.state.n),
        None => PhaseState::new(2.0, p.strip_midpoint()),
    }
}

/// Two launches reach different attractors at current `i`.
pub fn is_bistable(p_base: &ModelParams, i: f64) -> bool {
    let p = p_base.with_current(i);
    let eqs = find_equilibria(&p);
    let Some(rest) = eqs.iter().find(|e| e.is_stable()) else { return false };
    let so = SettleOptions { nearest_fallback: true, ..Default::default() };
    let a = LongRun::Equilibrium { state: rest.state, settled: true };
    match settle(&p, &far_launch(&p, &eqs), &so) {
        Ok(b @ LongRun::Equilibrium { .. }) | Ok(b @ LongRun::Cycle { .. }) => !a.same_attractor(&b),
        _ => false,
    }
}

/// Longest run of bistable grid currents, with its ends refined by bisection to 1e-6.
pub fn bistable_range(p_base: &ModelParams, i_grid: &[f64]) -> BistableReport {
    let flags: Vec<bool> = i_grid.par_iter().map(|&i| is_bistable(p_base, i)).collect();
    let samples: Vec<BistabilitySample> =
        i_grid.iter().zip(&flags).map(|(&i_app, &bistable)| BistabilitySample { i_app, bistable }).collect();
    let mut best: Option<(usize, usize)> = None;
    let mut j = 0;
    while j < flags.len() {
        if flags[j] {
            let start = j;
            while j + 1 < flags.len() && flags[j + 1] {
                j += 1;
            }
            if best.map(|(a, b)| j - start > b - a).unwrap_or(true) {
                best = Some((start, j));
            }
        }
        j += 1;
    }
    let refine = |mut inside: f64, mut outside: f64| {
        while (inside - outside).abs() > 1e-6 {
            let m = 0.5 * (inside + outside);
            if is_bistable(p_base, m) {
                inside = m;
            } else {
                outside = m;
            }
        }
        0.5 * (inside + outside)
    };
    let range = best.map(|(a, b)| {
        let lo = if a > 0 { refine(i_grid[a], i_grid[a - 1]) } else { i_grid[a] };
        let hi = if b + 1 < i_grid.len() { refine(i_grid[b], i_grid[b + 1]) } else { i_grid[b] };
        (lo, hi)
    });
    BistableReport { range, samples }
}

/// Firing frequency from the standard launch; 0 where the long run is an equilibrium.
/// Inconclusive runs are reported as NaN.
pub fn fi_curve(p_base: &ModelParams, i_grid: &[f64]) -> Vec<(f64, f64)> {
    fi_curve_with(p_base, i_grid, &SettleOptions::default())
}

pub fn fi_curve_with(p_base: &ModelParams, i_grid: &[f64], so: &SettleOptions) -> Vec<(f64, f64)> {
    i_grid
        .par_iter()
        .map(|&i| {
            let p = p_base.with_current(i);
            let f = match find_limit_cycle_from(&p, &standard_launch(&p), so) {
                Ok(Some(c)) => c.frequency(),
                Ok(None) => 0.0,
                Err(_) => f64::NAN,
            };
            (i, f)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubthresholdRecord {
    pub damped_oscillation: bool,
    /// |Im lambda| / 2 pi of the resting state.
    pub natural_frequency: Option<f64>,
    /// From the zero crossings of V - V_rest after a small kick.
    pub fitted_frequency: Option<f64>,
    pub sign_alternations: usize,
}

pub fn subthreshold_response(p: &ModelParams) -> Result<SubthresholdRecord, ClassifyError> {
    let rest = resting_state(p).ok_or(ClassifyError::NoRest(p.i_app))?;
    if rest.kind != EquilibriumKind::StableFocus {
        return Ok(SubthresholdRecord {
            damped_oscillation: false,
            natural_frequency: None,
            fitted_frequency: None,
            sign_alternations: 0,
        });
    }
    let natural = rest.eigenvalues[0].im.abs() / (2.0 * std::f64::consts::PI);
    let o = IntegratorOptions {
        t_end: 20.0 / natural.max(1e-6),
        max_step: 0.05,
        rel_tol: 1e-10,
        abs_tol: 1e-14,
        detect_convergence: false,
        ..Default::default()
    };
    let tr = integrate(p, &PhaseState::new(rest.state.v + 1e-4, rest.state.n), &o)?;
    let mut crossings = Vec::new();
    for w in tr.samples.windows(2) {
        let (a, b) = (w[0].v - rest.state.v, w[1].v - rest.state.v);
        if a != 0.0 && (a > 0.0) != (b > 0.0) {
            crossings.push(w[0].t + (w[1].t - w[0].t) * a / (a - b));
        }
    }
    let fitted = if crossings.len() >= 3 {
        let k = crossings.len() - 1;
        Some(k as f64 / (2.0 * (crossings[k] - crossings[0])))
    } else {
        None
    };
    Ok(SubthresholdRecord {
        damped_oscillation: crossings.len() >= 2,
        natural_frequency: Some(natural),
        fitted_frequency: fitted,
        sign_alternations: crossings.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeRecord {
    pub delta_i: f64,
    pub steps: usize,
    pub dwell: f64,
    pub step_spikes: usize,
    pub staircase_spikes: usize,
}

/// Spikes fired by an abrupt step of `delta_i` versus the same increment
/// delivered as a staircase of `steps` small steps.
pub fn slope_detection(p_rest: &ModelParams, delta_i: f64, steps: usize) -> Result<SlopeRecord, ClassifyError> {
    let rest = resting_state(p_rest).ok_or(ClassifyError::NoRest(p_rest.i_app))?;
    let dwell = 10.0 / p_rest.epsilon;
    let hold = 1.0;
    let o = IntegratorOptions { sample_stride: 64, ..Default::default() };
    let step = StimulusProtocol::step(p_rest.i_app, delta_i, hold, dwell * steps as f64);
    let stair = StimulusProtocol::staircase(p_rest.i_app, delta_i, steps, hold, dwell);
    let count = |proto: &StimulusProtocol| -> Result<usize, ClassifyError> {
        let tr = integrate_protocol(p_rest, &rest.state, proto, &o)?;
        Ok(tr.events.iter().filter(|e| e.kind == EventKind::Spike).count())
    };
    Ok(SlopeRecord { delta_i, steps, dwell, step_spikes: count(&step)?, staircase_spikes: count(&stair)? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignatureOptions {
    pub latency_deltas: Vec<f64>,
    pub i_grid: Vec<f64>,
    pub slope_delta: f64,
    pub slope_steps: usize,
}

impl Default for SignatureOptions {
    fn default() -> Self {
        SignatureOptions {
            latency_deltas: vec![1e-4, 1e-3, 1e-2, 1e-1],
            i_grid: (0..=40).map(|j| I_STAR - 0.2 + 0.025 * j as f64).collect(),
            slope_delta: 1.5,
            slope_steps: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureReport {
    pub params: ModelParams,
    pub options: SignatureOptions,
    pub latency: Option<LatencyCurve>,
    pub adp: Option<AdpRecord>,
    pub bistable: BistableReport,
    pub fi_curve: Vec<(f64, f64)>,
    pub subthreshold: Option<SubthresholdRecord>,
    pub slope_detection: Option<SlopeRecord>,
    /// Battery items that could not be run, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Runs the whole battery at `p` (rest taken at the current of `p`).
pub fn signatures(p: &ModelParams, opts: &SignatureOptions) -> SignatureReport {
    let mut skipped = Vec::new();
    let latency = match rest_fold(p) {
        Some(f) => match latency_curve(p, f.i_crit, &opts.latency_deltas) {
            Ok(c) => Some(c),
            Err(e) => {
                skipped.push(("latency".into(), e.to_string()));
                None
            }
        },
        None => {
            skipped.push(("latency".into(), "resting state has no fold".into()));
            None
        }
    };
    let adp = detect_adp(p).map_err(|e| skipped.push(("adp".into(), e.to_string()))).ok();
    let subthreshold = subthreshold_response(p).map_err(|e| skipped.push(("subthreshold".into(), e.to_string()))).ok();
    let slope = slope_detection(p, opts.slope_delta, opts.slope_steps)
        .map_err(|e| skipped.push(("slope_detection".into(), e.to_string())))
        .ok();
    SignatureReport {
        params: *p,
        options: opts.clone(),
        latency,
        adp,
        bistable: bistable_range(p, &opts.i_grid),
        fi_curve: fi_curve(p, &opts.i_grid),
        subthreshold,
        slope_detection: slope,
        skipped,
    }
}
