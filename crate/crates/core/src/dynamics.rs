//! Adaptive Dormand-Prince 5(4) integration with dense output and event
//! location (spikes, section crossings, convergence, window exit).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{vector_field, ModelParams, PhaseState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("non-finite state at t = {0}")]
    NonFinite(f64),
    #[error("invalid integrator options: {0}")]
    InvalidOptions(String),
    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CrossingDirection {
    Up,
    Down,
    #[default]
    Either,
}

/// Horizontal section n = rho restricted to a V-window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Section {
    pub rho: f64,
    pub v_window: (f64, f64),
    #[serde(default)]
    pub direction: CrossingDirection,
    /// Only count crossings after a completed spike (threshold crossed, then re-armed).
    #[serde(default)]
    pub after_spike: bool,
    /// Stop at the first counted crossing.
    #[serde(default)]
    pub terminal: bool,
}

/// A point whose small neighbourhood ends the integration when entered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub state: PhaseState,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
    pub t_end: f64,
    pub spike_threshold: f64,
    pub section: Option<Section>,
    /// Stop after this many spikes.
    pub max_spikes: Option<usize>,
    /// Stop once this many successive inter-spike intervals agree to the given relative tolerance.
    pub periodic_stop: Option<(usize, f64)>,
    /// Stationarity test (speed and displacement over one slow time unit).
    pub detect_convergence: bool,
    pub convergence_tol: f64,
    #[serde(skip)]
    pub targets: Vec<Target>,
    /// Integrate the time-reversed field; sample times are then elapsed reverse time.
    pub backward: bool,
    pub v_bounds: (f64, f64),
    /// Keep every `sample_stride`-th accepted step (the last state is always kept).
    pub sample_stride: usize,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        IntegratorOptions {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            max_step: 0.1,
            t_end: 100.0,
            spike_threshold: 1.0,
            section: None,
            max_spikes: None,
            periodic_stop: None,
            detect_convergence: true,
            convergence_tol: 1e-9,
            targets: Vec::new(),
            backward: false,
            v_bounds: (-6.0, 5.0),
            sample_stride: 1,
        }
    }
}

impl IntegratorOptions {
    pub fn with_t_end(mut self, t_end: f64) -> Self {
        self.t_end = t_end;
        self
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |m: &str| Err(DynamicsError::InvalidOptions(m.to_string()));
        if !(self.rel_tol > 0.0 && self.rel_tol <= 1e-2) {
            return bad("rel_tol must lie in (0, 1e-2]");
        }
        if !(self.abs_tol > 0.0 && self.abs_tol <= 1e-2) {
            return bad("abs_tol must lie in (0, 1e-2]");
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return bad("t_end must be positive");
        }
        if !(self.max_step > 0.0) {
            return bad("max_step must be positive");
        }
        if self.sample_stride == 0 {
            return bad("sample_stride must be at least 1");
        }
        Ok(())
    }
}

/// Piecewise-constant applied current.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StimulusProtocol {
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub duration: f64,
    pub i_app: f64,
}

impl StimulusProtocol {
    pub fn constant(duration: f64, i_app: f64) -> Self {
        StimulusProtocol { segments: vec![Segment { duration, i_app }] }
    }

    /// `hold` at `i0`, then a jump to `i0 + di` held for `after`.
    pub fn step(i0: f64, di: f64, hold: f64, after: f64) -> Self {
        StimulusProtocol {
            segments: vec![
                Segment { duration: hold, i_app: i0 },
                Segment { duration: after, i_app: i0 + di },
            ],
        }
    }

    /// `hold` at `i0`, then `steps` increments of `di / steps`, each lasting `dwell`.
    pub fn staircase(i0: f64, di: f64, steps: usize, hold: f64, dwell: f64) -> Self {
        let mut segments = vec![Segment { duration: hold, i_app: i0 }];
        for j in 1..=steps {
            segments.push(Segment { duration: dwell, i_app: i0 + di * j as f64 / steps as f64 });
        }
        StimulusProtocol { segments }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if self.segments.is_empty() {
            return Err(DynamicsError::InvalidProtocol("no segments".into()));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.duration > 0.0 && s.duration.is_finite()) {
                return Err(DynamicsError::InvalidProtocol(format!(
                    "segment {i} has non-positive duration {}",
                    s.duration
                )));
            }
            if !s.i_app.is_finite() {
                return Err(DynamicsError::InvalidProtocol(format!("segment {i} current not finite")));
            }
        }
        Ok(())
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub v: f64,
    pub n: f64,
    pub dv: f64,
    pub dn: f64,
}

impl Sample {
    pub fn state(&self) -> PhaseState {
        PhaseState::new(self.v, self.n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Spike,
    SectionCross { direction: CrossingDirection },
    /// `target` is the index into `IntegratorOptions::targets`, or `None` for the stationarity test.
    Converged { target: Option<usize> },
    WindowExit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub state: PhaseState,
    pub segment: usize,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    TEnd,
    Converged,
    WindowExit,
    Section,
    SpikeLimit,
    Periodic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub events: Vec<Event>,
    pub termination: Termination,
    pub backward: bool,
}

impl Trajectory {
    pub fn last_state(&self) -> PhaseState {
        self.samples.last().map(Sample::state).expect("trajectory is never empty")
    }

    pub fn t_final(&self) -> f64 {
        self.samples.last().map(|s| s.t).unwrap_or(0.0)
    }

    pub fn spike_times(&self) -> Vec<f64> {
        self.events.iter().filter(|e| e.kind == EventKind::Spike).map(|e| e.t).collect()
    }

    pub fn events_of(&self, pred: impl Fn(&EventKind) -> bool) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| pred(&e.kind))
    }

    pub fn section_crossings(&self) -> Vec<Event> {
        self.events_of(|k| matches!(k, EventKind::SectionCross { .. })).copied().collect()
    }

    pub fn converged_target(&self) -> Option<Option<usize>> {
        self.events.iter().find_map(|e| match e.kind {
            EventKind::Converged { target } => Some(target),
            _ => None,
        })
    }

    /// CSV with columns t, V, n at 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.samples.len() * 72 + 8);
        out.push_str("t,V,n\n");
        for s in &self.samples {
            out.push_str(&format!("{:.16e},{:.16e},{:.16e}\n", s.t, s.v, s.n));
        }
        out
    }
}

// Dormand-Prince 5(4) tableau (autonomous fields, so the nodes c_i are not needed).
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

/// One accepted step with its continuous extension.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Step {
    pub t0: f64,
    pub h: f64,
    pub y0: [f64; 2],
    pub y1: [f64; 2],
    pub f1: [f64; 2],
    r: [[f64; 2]; 5],
}

impl Step {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    pub fn dense(&self, t: f64) -> [f64; 2] {
        let th = ((t - self.t0) / self.h).clamp(0.0, 1.0);
        let th1 = 1.0 - th;
        let mut y = [0.0; 2];
        for i in 0..2 {
            let r = &self.r;
            y[i] = r[0][i] + th * (r[1][i] + th1 * (r[2][i] + th * (r[3][i] + th1 * r[4][i])));
        }
        y
    }

    /// Root of `g` along the dense output, assuming a sign change between the step ends.
    pub fn locate(&self, g: impl Fn(&[f64; 2]) -> f64) -> f64 {
        let (mut a, mut b) = (self.t0, self.t1());
        let (mut ga, mut gb) = (g(&self.y0), g(&self.y1));
        // Illinois false position, falling back to bisection
        let mut side = 0i8;
        for _ in 0..200 {
            if (b - a).abs() < 1e-12 * (1.0 + b.abs()) {
                break;
            }
            let mut m = if ga != gb { (a * gb - b * ga) / (gb - ga) } else { 0.5 * (a + b) };
            if !(m > a.min(b) && m < a.max(b)) {
                m = 0.5 * (a + b);
            }
            let gm = g(&self.dense(m));
            if gm == 0.0 {
                return m;
            }
            if (gm > 0.0) == (ga > 0.0) {
                a = m;
                ga = gm;
                if side == -1 {
                    gb *= 0.5;
                }
                side = -1;
            } else {
                b = m;
                gb = gm;
                if side == 1 {
                    ga *= 0.5;
                }
                side = 1;
            }
        }
        if ga.abs() < gb.abs() {
            a
        } else {
            b
        }
    }
}

pub(crate) enum Flow {
    Continue,
    Stop,
}

/// Generic adaptive stepper over a planar field. `observer` sees each
/// accepted step and decides whether to continue.
pub(crate) fn run_steps<F, O>(
    f: F,
    t0: f64,
    y0: [f64; 2],
    t_end: f64,
    rel_tol: f64,
    abs_tol: f64,
    max_step: f64,
    mut observer: O,
) -> Result<(), DynamicsError>
where
    F: Fn(&[f64; 2]) -> [f64; 2],
    O: FnMut(&Step) -> Flow,
{
    let mut t = t0;
    let mut y = y0;
    let mut k1 = f(&y);
    if !(k1[0].is_finite() && k1[1].is_finite()) {
        return Err(DynamicsError::NonFinite(t));
    }
    let scale0 = |i: usize| abs_tol + rel_tol * y0[i].abs();
    let d0 = ((y0[0] / scale0(0)).powi(2) + (y0[1] / scale0(1)).powi(2)).sqrt() / 2f64.sqrt();
    let d1 = ((k1[0] / scale0(0)).powi(2) + (k1[1] / scale0(1)).powi(2)).sqrt() / 2f64.sqrt();
    let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h = h.min(max_step).min(t_end - t0).max(1e-10);
    let mut last_rejected = false;
    let mut k = [[0.0f64; 2]; 7];
    while t < t_end {
        if t + h > t_end {
            h = t_end - t;
        }
        k[0] = k1;
        for s in 1..7 {
            let mut ys = y;
            for (j, kj) in k.iter().enumerate().take(s) {
                let a = A[s][j];
                if a != 0.0 {
                    ys[0] += h * a * kj[0];
                    ys[1] += h * a * kj[1];
                }
            }
            k[s] = f(&ys);
        }
        let mut y1 = y;
        for (j, kj) in k.iter().enumerate().take(6) {
            let a = A[6][j];
            y1[0] += h * a * kj[0];
            y1[1] += h * a * kj[1];
        }
        // k[6] was evaluated at y1 (FSAL)
        let mut err = 0.0;
        for i in 0..2 {
            let e: f64 = (0..7).map(|j| E[j] * k[j][i]).sum::<f64>() * h;
            let sc = abs_tol + rel_tol * y[i].abs().max(y1[i].abs());
            err += (e / sc).powi(2);
        }
        let err = (err / 2.0).sqrt();
        if !err.is_finite() || !(y1[0].is_finite() && y1[1].is_finite()) {
            h *= 0.1;
            last_rejected = true;
            if h < 1e-13 * (1.0 + t.abs()) {
                return Err(DynamicsError::NonFinite(t));
            }
            continue;
        }
        if err <= 1.0 {
            let mut r = [[0.0; 2]; 5];
            for i in 0..2 {
                r[0][i] = y[i];
                r[1][i] = y1[i] - y[i];
                r[2][i] = h * k[0][i] - r[1][i];
                r[3][i] = r[1][i] - h * k[6][i] - r[2][i];
                r[4][i] = h * (0..7).map(|j| D[j] * k[j][i]).sum::<f64>();
            }
            let step = Step { t0: t, h, y0: y, y1, f1: k[6], r };
            t += h;
            y = y1;
            k1 = k[6];
            if let Flow::Stop = observer(&step) {
                return Ok(());
            }
            let mut fac = if err == 0.0 { 5.0 } else { 0.9 * err.powf(-0.2) };
            fac = fac.clamp(0.2, 5.0);
            if last_rejected {
                fac = fac.min(1.0);
            }
            h = (h * fac).min(max_step);
            last_rejected = false;
        } else {
            let fac = (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
            h *= fac;
            last_rejected = true;
            if h < 1e-12 * (1.0 + t.abs()) {
                return Err(DynamicsError::StepUnderflow { t, h });
            }
        }
    }
    Ok(())
}

/// Event memory carried across protocol segments.
#[derive(Debug, Clone)]
struct Memory {
    armed: bool,
    spikes: usize,
    section_armed: bool,
    spike_times: Vec<f64>,
}

fn periodic(times: &[f64], count: usize, rtol: f64) -> bool {
    if times.len() < count + 1 {
        return false;
    }
    let isi: Vec<f64> = times[times.len() - count - 1..].windows(2).map(|w| w[1] - w[0]).collect();
    let last = *isi.last().unwrap();
    isi.iter().all(|x| (x - last).abs() <= rtol * last)
}

struct SegmentOutcome {
    state: [f64; 2],
    t: f64,
    stop: Option<Termination>,
}

fn field_for(p: &ModelParams, backward: bool) -> impl Fn(&[f64; 2]) -> [f64; 2] + '_ {
    let sign = if backward { -1.0 } else { 1.0 };
    move |y: &[f64; 2]| {
        let (a, b) = vector_field(p, &PhaseState::new(y[0], y[1]));
        [sign * a, sign * b]
    }
}

fn push_sample(samples: &mut Vec<Sample>, t: f64, y: [f64; 2], f: [f64; 2]) {
    if let Some(last) = samples.last_mut() {
        if t <= last.t {
            *last = Sample { t: last.t, v: y[0], n: y[1], dv: f[0], dn: f[1] };
            return;
        }
    }
    samples.push(Sample { t, v: y[0], n: y[1], dv: f[0], dn: f[1] });
}

#[allow(clippy::too_many_arguments)]
fn run_segment(
    p: &ModelParams,
    y0: [f64; 2],
    t0: f64,
    duration: f64,
    segment: usize,
    opts: &IntegratorOptions,
    mem: &mut Memory,
    samples: &mut Vec<Sample>,
    events: &mut Vec<Event>,
) -> Result<SegmentOutcome, DynamicsError> {
    let f = field_for(p, opts.backward);
    let thr = opts.spike_threshold;
    let rearm = thr - 0.5;
    let slow_unit = 1.0 / p.epsilon;
    let mut checkpoint: Option<(f64, [f64; 2])> = None;
    let speed = |g: &[f64; 2]| g[0].hypot(g[1]);
    let f0 = f(&y0);
    if opts.detect_convergence && speed(&f0) < opts.convergence_tol {
        checkpoint = Some((t0, y0));
    }
    if samples.is_empty() {
        push_sample(samples, t0, y0, f0);
    }
    for (i, tg) in opts.targets.iter().enumerate() {
        if PhaseState::new(y0[0], y0[1]).dist(&tg.state) < tg.radius {
            let ev = Event { t: t0, state: tg.state, segment, kind: EventKind::Converged { target: Some(i) } };
            events.push(Event { state: PhaseState::new(y0[0], y0[1]), ..ev });
            return Ok(SegmentOutcome { state: y0, t: t0, stop: Some(Termination::Converged) });
        }
    }
    let mut stop: Option<(f64, [f64; 2], Termination)> = None;
    let mut steps = 0usize;
    let mut last_y = y0;
    let t_end = t0 + duration;
    run_steps(&f, t0, y0, t_end, opts.rel_tol, opts.abs_tol, opts.max_step, |st| {
        steps += 1;
        let mut candidates: Vec<(f64, EventKind, Option<Termination>)> = Vec::new();
        // window exit
        let (lo, hi) = opts.v_bounds;
        if st.y1[0] < lo || st.y1[0] > hi {
            let b = if st.y1[0] < lo { lo } else { hi };
            let te = if (st.y0[0] - b).signum() != (st.y1[0] - b).signum() {
                st.locate(|y| y[0] - b)
            } else {
                st.t1()
            };
            candidates.push((te, EventKind::WindowExit, Some(Termination::WindowExit)));
        }
        // spikes, possibly with a re-arm inside the step
        let mut armed = mem.armed;
        let mut section_armed = mem.section_armed;
        if armed && st.y1[0] >= thr && st.y0[0] < thr {
            let te = st.locate(|y| y[0] - thr);
            let limit = opts.max_spikes.map(|m| mem.spikes + 1 >= m).unwrap_or(false);
            candidates.push((te, EventKind::Spike, limit.then_some(Termination::SpikeLimit)));
            armed = false;
        }
        if !armed && st.y1[0] < rearm {
            armed = true;
            if mem.spikes > 0 || candidates.iter().any(|c| c.1 == EventKind::Spike) {
                section_armed = true;
            }
        }
        // section
        if let Some(sec) = &opts.section {
            let counts = !sec.after_spike || (mem.section_armed || section_armed);
            let g0 = st.y0[1] - sec.rho;
            let g1 = st.y1[1] - sec.rho;
            if counts && g0 != 0.0 && ((g0 > 0.0) != (g1 > 0.0) || g1 == 0.0) {
                let dir = if g1 > g0 { CrossingDirection::Up } else { CrossingDirection::Down };
                let want = sec.direction == CrossingDirection::Either || sec.direction == dir;
                if want {
                    let te = st.locate(|y| y[1] - sec.rho);
                    let v = st.dense(te)[0];
                    if v >= sec.v_window.0 && v <= sec.v_window.1 {
                        candidates.push((
                            te,
                            EventKind::SectionCross { direction: dir },
                            sec.terminal.then_some(Termination::Section),
                        ));
                    }
                }
            }
        }
        candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for (te, kind, term) in candidates {
            let ys = st.dense(te);
            let mut term = term;
            if kind == EventKind::Spike {
                mem.spikes += 1;
                mem.spike_times.push(te);
                if let Some((count, rtol)) = opts.periodic_stop {
                    if term.is_none() && periodic(&mem.spike_times, count, rtol) {
                        term = Some(Termination::Periodic);
                    }
                }
            }
            events.push(Event { t: te, state: PhaseState::new(ys[0], ys[1]), segment, kind });
            if let Some(term) = term {
                stop = Some((te, ys, term));
                return Flow::Stop;
            }
        }
        mem.armed = armed;
        mem.section_armed = section_armed;
        last_y = st.y1;
        if steps % opts.sample_stride == 0 {
            push_sample(samples, st.t1(), st.y1, st.f1);
        }
        // targets
        for (i, tg) in opts.targets.iter().enumerate() {
            if PhaseState::new(st.y1[0], st.y1[1]).dist(&tg.state) < tg.radius {
                events.push(Event {
                    t: st.t1(),
                    state: PhaseState::new(st.y1[0], st.y1[1]),
                    segment,
                    kind: EventKind::Converged { target: Some(i) },
                });
                stop = Some((st.t1(), st.y1, Termination::Converged));
                return Flow::Stop;
            }
        }
        // stationarity
        if opts.detect_convergence {
            if speed(&st.f1) < opts.convergence_tol {
                match checkpoint {
                    None => checkpoint = Some((st.t1(), st.y1)),
                    Some((tc, yc)) if st.t1() - tc >= slow_unit => {
                        let disp = (st.y1[0] - yc[0]).hypot(st.y1[1] - yc[1]);
                        if disp < opts.convergence_tol {
                            events.push(Event {
                                t: tc,
                                state: PhaseState::new(yc[0], yc[1]),
                                segment,
                                kind: EventKind::Converged { target: None },
                            });
                            stop = Some((st.t1(), st.y1, Termination::Converged));
                            return Flow::Stop;
                        }
                        checkpoint = Some((st.t1(), st.y1));
                    }
                    _ => {}
                }
            } else {
                checkpoint = None;
            }
        }
        Flow::Continue
    })?;
    match stop {
        Some((te, ys, term)) => {
            push_sample(samples, te, ys, f(&ys));
            Ok(SegmentOutcome { state: ys, t: te, stop: Some(term) })
        }
        None => Ok(SegmentOutcome { state: last_y, t: t_end, stop: None }),
    }
}

fn initial_memory(s0: &PhaseState, opts: &IntegratorOptions) -> Memory {
    Memory { armed: s0.v < opts.spike_threshold, spikes: 0, section_armed: false, spike_times: Vec::new() }
}

pub fn integrate(
    p: &ModelParams,
    s0: &PhaseState,
    opts: &IntegratorOptions,
) -> Result<Trajectory, DynamicsError> {
    opts.validate()?;
    if !s0.is_finite() {
        return Err(DynamicsError::NonFinite(0.0));
    }
    let mut mem = initial_memory(s0, opts);
    let mut samples = Vec::new();
    let mut events = Vec::new();
    let out = run_segment(
        p,
        [s0.v, s0.n],
        0.0,
        opts.t_end,
        0,
        opts,
        &mut mem,
        &mut samples,
        &mut events,
    )?;
    finish_samples(p, opts, &mut samples, &out);
    Ok(Trajectory {
        samples,
        events,
        termination: out.stop.unwrap_or(Termination::TEnd),
        backward: opts.backward,
    })
}

fn finish_samples(p: &ModelParams, opts: &IntegratorOptions, samples: &mut Vec<Sample>, out: &SegmentOutcome) {
    // with a stride the final accepted step may be missing; it is the outcome state
    let last = samples.last().copied().unwrap();
    if out.t > last.t {
        let f = field_for(p, opts.backward);
        push_sample(samples, out.t, out.state, f(&out.state));
    }
}

/// Integrates a piecewise-constant current protocol. `opts.t_end` is ignored;
/// the protocol's total duration applies. Convergence ends only the active
/// segment (the next segment changes the current).
pub fn integrate_protocol(
    p: &ModelParams,
    s0: &PhaseState,
    proto: &StimulusProtocol,
    opts: &IntegratorOptions,
) -> Result<Trajectory, DynamicsError> {
    proto.validate()?;
    let mut o = opts.clone();
    o.t_end = proto.total_duration();
    o.validate()?;
    let mut mem = initial_memory(s0, &o);
    let mut samples = Vec::new();
    let mut events = Vec::new();
    let mut y = [s0.v, s0.n];
    let mut t = 0.0;
    let mut termination = Termination::TEnd;
    let nseg = proto.segments.len();
    for (i, seg) in proto.segments.iter().enumerate() {
        let ps = p.with_current(seg.i_app);
        // target neighbourhoods only make sense at a fixed current
        let out = run_segment(&ps, y, t, seg.duration, i, &o, &mut mem, &mut samples, &mut events)?;
        finish_samples(&ps, &o, &mut samples, &out);
        y = out.state;
        let seg_end = t + seg.duration;
        match out.stop {
            Some(Termination::Converged) if i + 1 < nseg => {
                let f = field_for(&ps, o.backward);
                push_sample(&mut samples, seg_end, y, f(&y));
                t = seg_end;
            }
            Some(term) => {
                termination = term;
                break;
            }
            None => t = seg_end,
        }
    }
    Ok(Trajectory { samples, events, termination, backward: o.backward })
}

/// Upward threshold crossings with hysteresis, located by cubic Hermite
/// interpolation between stored samples.
pub fn detect_spikes(traj: &Trajectory, threshold: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let Some(first) = traj.samples.first() else { return out };
    let mut armed = first.v < threshold;
    for w in traj.samples.windows(2) {
        let (a, b) = (w[0], w[1]);
        if armed && a.v < threshold && b.v >= threshold {
            out.push(hermite_root(&a, &b, threshold));
            armed = false;
        }
        if !armed && b.v < threshold - 0.5 {
            armed = true;
        }
    }
    out
}

fn hermite_root(a: &Sample, b: &Sample, level: f64) -> f64 {
    let h = b.t - a.t;
    let val = |th: f64| {
        let h00 = 2.0 * th.powi(3) - 3.0 * th.powi(2) + 1.0;
        let h10 = th.powi(3) - 2.0 * th.powi(2) + th;
        let h01 = -2.0 * th.powi(3) + 3.0 * th.powi(2);
        let h11 = th.powi(3) - th.powi(2);
        h00 * a.v + h10 * h * a.dv + h01 * b.v + h11 * h * b.dv - level
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if val(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    a.t + 0.5 * (lo + hi) * h
}
