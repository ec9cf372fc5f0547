//! Switched-mode time-domain integration. The continuous states are the
//! GFM rotor pair (δ12, ω12) and the PLL pair (δ13, x_PLL); the algebraic
//! layer supplies P_FM and the PLL error voltage u_q at every evaluation
//! point under the currently active control combination. Combination
//! switches are located by bisection on the active monitor functions, and
//! fault application/clearing swap the reduced network at exact times.
//!
//! Angles are kept unwrapped so loss of synchronism shows up as monotone
//! growth rather than 2π jumps.

use crate::algebraic::{
    classify_combination, implicit_partials, solve_mode_state, AlgebraicError, AlgebraicState,
};
use crate::devices::{Combination, GflMode, GfmMode, SatInjection, SystemParams};
use crate::network::{FaultStage, NetworkError, NetworkModel, ReducedNetwork, Stage};
use std::fmt;
use thiserror::Error;

/// Event localization: bisect until the monitor magnitude is below this.
const EVENT_G_TOL: f64 = 1e-9;
const EVENT_MAX_BISECT: usize = 200;
/// Mode switches allowed within one base step before declaring chattering.
pub const DEFAULT_CHATTER_BOUND: usize = 100;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("network construction failed: {0}")]
    Network(#[from] NetworkError),
    #[error("algebraic failure at t={t:.6}: {source}")]
    Algebraic { t: f64, source: AlgebraicError },
    #[error("chattering: {count} mode switches within one base step near t={t:.6}")]
    Chattering { t: f64, count: usize },
    #[error("state became non-finite at t={t:.6}")]
    NotFinite { t: f64 },
    #[error("event localization stalled at t={t:.6}")]
    EventStalled { t: f64 },
}

/// Which monitor (or schedule entry) produced an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventCondition {
    /// GFM current monitor: limit hit (NC side) or demand released (CS side).
    GfmCurrent,
    /// GFL voltage crossed the low ride-through threshold.
    GflLowVoltage,
    /// GFL voltage crossed the high ride-through threshold.
    GflHighVoltage,
    /// Scheduled fault application (network swap).
    FaultApply,
    /// Scheduled fault clearing (network swap).
    FaultClear,
}

impl fmt::Display for EventCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EventCondition::GfmCurrent => "gfm-current",
            EventCondition::GflLowVoltage => "gfl-low-voltage",
            EventCondition::GflHighVoltage => "gfl-high-voltage",
            EventCondition::FaultApply => "fault-apply",
            EventCondition::FaultClear => "fault-clear",
        };
        f.write_str(s)
    }
}

/// Continuous state vector: [δ12, ω12, δ13, x_PLL].
pub type StateVec = [f64; 4];

/// One recorded integration sample (taken at exact multiples of the base
/// step, plus the initial point).
#[derive(Debug, Clone)]
pub struct Sample {
    pub t: f64,
    pub y: StateVec,
    pub n: Combination,
    pub u_fm: f64,
    pub u_fl: f64,
    pub u_fl_q: f64,
    pub i_fl: f64,
    pub phi_fl: f64,
    pub p_fm: f64,
    pub i_fm_proxy: f64,
    /// PLL speed dδ13/dt = K_p·u_q + x_PLL.
    pub d13_dot: f64,
    /// Cross-damping force on the PLL loop driven by GFM motion.
    pub f_fl_d12: f64,
    /// Self-damping force on the PLL loop.
    pub f_fl_d13: f64,
    /// GFM terminal voltage phase, grid frame (wrapped to (−π, π]).
    pub theta_pcc_gfm: f64,
}

impl Sample {
    pub fn delta12(&self) -> f64 {
        self.y[0]
    }
    pub fn omega12(&self) -> f64 {
        self.y[1]
    }
    pub fn delta13(&self) -> f64 {
        self.y[2]
    }
    pub fn x_pll(&self) -> f64 {
        self.y[3]
    }
    /// Potential force on the GFM swing loop (positive restores ω12 < 0).
    pub fn f_fm_p(&self, p: &SystemParams) -> f64 {
        self.p_fm - p.gfm.p_ref
    }
    /// Damping force on the GFM swing loop.
    pub fn f_fm_d(&self, p: &SystemParams) -> f64 {
        -p.gfm.d_fm * self.omega12()
    }
    /// Potential force on the PLL loop.
    pub fn f_fl_p(&self, p: &SystemParams) -> f64 {
        -p.gfl.k_i_pll * self.u_fl_q
    }
}

/// A combination switch or network swap, with both-side algebraic context.
#[derive(Debug, Clone)]
pub struct EventRecord {
    pub t: f64,
    pub n_old: Combination,
    pub n_new: Combination,
    pub condition: EventCondition,
    /// Continuous state at the event (continuous across the switch).
    pub y: StateVec,
    /// Monitor value at the accepted event state; `None` for scheduled
    /// network swaps and for branch-disappearance switches, where no
    /// monitor value crosses zero.
    pub g_value: Option<f64>,
    pub alg_pre: AlgebraicState,
    pub alg_post: AlgebraicState,
}

/// Why an integration ended before the requested horizon.
#[derive(Debug, Clone)]
pub struct Truncation {
    pub t: f64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    pub samples: Vec<Sample>,
    pub events: Vec<EventRecord>,
    /// Set when the quasi-static model broke down before `t_end`; samples
    /// cover only the completed base steps.
    pub truncation: Option<Truncation>,
}

impl Trajectory {
    /// Index of the first sample at or after `t`.
    pub fn sample_at_or_after(&self, t: f64) -> usize {
        self.samples.partition_point(|s| s.t < t)
    }
}

/// Integration options. `dt` is both the RK4 base step and the sampling
/// interval; samples land at exact multiples k·dt.
#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub dt: f64,
    pub t_end: f64,
    pub chatter_bound: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            dt: 1e-4,
            t_end: 3.0,
            chatter_bound: DEFAULT_CHATTER_BOUND,
        }
    }
}

/// Right-hand side of the continuous dynamics given the algebraic solution
/// at the same point.
pub fn rhs(y: StateVec, alg: &AlgebraicState, p: &SystemParams) -> StateVec {
    let omega12 = y[1];
    let x_pll = y[3];
    let u_q = alg.u_fl_q;
    [
        omega12,
        (p.gfm.p_ref - alg.p_fm - p.gfm.d_fm * omega12) / p.gfm.j_fm,
        p.gfl.k_p_pll * u_q + x_pll,
        p.gfl.k_i_pll * u_q,
    ]
}

/// Frozen-mode solve at a state vector's angle pair.
fn solve_frozen(
    y: StateVec,
    n: Combination,
    sat: Option<SatInjection>,
    net: &ReducedNetwork,
    p: &SystemParams,
    warm: Option<&AlgebraicState>,
) -> Result<AlgebraicState, AlgebraicError> {
    solve_mode_state(y[0], y[2], n.gfm_mode(), n.gfl_mode(), net, p, sat, warm)
}

/// One RK4 step of length h under a frozen combination. Returns the end
/// state and the last stage's algebraic solution (for warm starting).
fn rk4_step(
    y: StateVec,
    h: f64,
    n: Combination,
    sat: Option<SatInjection>,
    net: &ReducedNetwork,
    p: &SystemParams,
    warm: Option<&AlgebraicState>,
) -> Result<(StateVec, AlgebraicState), AlgebraicError> {
    let add = |a: StateVec, k: StateVec, s: f64| -> StateVec {
        [
            a[0] + s * k[0],
            a[1] + s * k[1],
            a[2] + s * k[2],
            a[3] + s * k[3],
        ]
    };
    let a1 = solve_frozen(y, n, sat, net, p, warm)?;
    let k1 = rhs(y, &a1, p);
    let y2 = add(y, k1, 0.5 * h);
    let a2 = solve_frozen(y2, n, sat, net, p, Some(&a1))?;
    let k2 = rhs(y2, &a2, p);
    let y3 = add(y, k2, 0.5 * h);
    let a3 = solve_frozen(y3, n, sat, net, p, Some(&a2))?;
    let k3 = rhs(y3, &a3, p);
    let y4 = add(y, k3, h);
    let a4 = solve_frozen(y4, n, sat, net, p, Some(&a3))?;
    let k4 = rhs(y4, &a4, p);
    let y_end = [
        y[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        y[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        y[2] + h / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
        y[3] + h / 6.0 * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3]),
    ];
    Ok((y_end, a4))
}

/// Monitors that keep the current combination valid.
#[derive(Clone, Copy)]
struct Monitor {
    condition: EventCondition,
}

impl Monitor {
    fn active_for(n: Combination) -> Vec<Monitor> {
        let mut v = vec![Monitor {
            condition: EventCondition::GfmCurrent,
        }];
        match n.gfl_mode() {
            GflMode::Lvrt => v.push(Monitor {
                condition: EventCondition::GflLowVoltage,
            }),
            GflMode::Hvrt => v.push(Monitor {
                condition: EventCondition::GflHighVoltage,
            }),
            GflMode::Nc => {
                v.push(Monitor {
                    condition: EventCondition::GflLowVoltage,
                });
                v.push(Monitor {
                    condition: EventCondition::GflHighVoltage,
                });
            }
        }
        v
    }

    /// Signed monitor value at a frozen-mode solution.
    fn value(&self, s: &AlgebraicState, p: &SystemParams) -> f64 {
        match self.condition {
            EventCondition::GfmCurrent => s.i_fm_proxy - p.gfm.i_max,
            EventCondition::GflLowVoltage => s.u_fl - p.gfl.u_lv,
            EventCondition::GflHighVoltage => s.u_fl - p.gfl.u_hv,
            _ => f64::NAN,
        }
    }

    /// Whether the value breaks the combination's validity.
    fn violated(&self, g: f64, n: Combination) -> bool {
        match (self.condition, n.gfm_mode(), n.gfl_mode()) {
            (EventCondition::GfmCurrent, GfmMode::Nc, _) => g > 0.0,
            (EventCondition::GfmCurrent, GfmMode::Cs, _) => g <= 0.0,
            (EventCondition::GflLowVoltage, _, GflMode::Lvrt) => g >= 0.0,
            (EventCondition::GflLowVoltage, _, _) => g < 0.0,
            (EventCondition::GflHighVoltage, _, GflMode::Hvrt) => g <= 0.0,
            (EventCondition::GflHighVoltage, _, _) => g > 0.0,
            _ => false,
        }
    }
}

struct Probe {
    y: StateVec,
    /// End-point frozen solve; `None` when the branch has disappeared.
    alg: Option<AlgebraicState>,
}

/// The violated monitor with the smallest magnitude at a probe state.
fn firing_monitor(
    monitors: &[Monitor],
    alg: &AlgebraicState,
    p: &SystemParams,
    n: Combination,
) -> Option<(EventCondition, f64)> {
    monitors
        .iter()
        .filter_map(|m| {
            let g = m.value(alg, p);
            m.violated(g, n).then_some((m.condition, g))
        })
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
}

/// Infer the event condition from the mode difference when no monitor value
/// is available (branch disappearance).
fn mode_diff_condition(n_old: Combination, n_new: Combination) -> EventCondition {
    if n_old.gfm_mode() != n_new.gfm_mode() {
        return EventCondition::GfmCurrent;
    }
    match (n_old.gfl_mode(), n_new.gfl_mode()) {
        (GflMode::Lvrt, _) | (_, GflMode::Lvrt) => EventCondition::GflLowVoltage,
        _ => EventCondition::GflHighVoltage,
    }
}

fn make_sample(
    t: f64,
    y: StateVec,
    alg: &AlgebraicState,
    net: &ReducedNetwork,
    p: &SystemParams,
) -> Sample {
    // Per-sample damping forces on the PLL loop; NaN where the sensitivity
    // solve is unavailable (singular active Jacobian at a region boundary).
    let (f_fl_d12, f_fl_d13) = match implicit_partials(alg, net, p) {
        Ok(pr) => {
            let omega12 = y[1];
            let omega13 = p.gfl.k_p_pll * alg.u_fl_q + y[3];
            (
                p.gfl.k_p_pll * pr.du_q[0] * omega12,
                p.gfl.k_p_pll * pr.du_q[1] * omega13,
            )
        }
        Err(_) => (f64::NAN, f64::NAN),
    };
    Sample {
        t,
        y,
        n: alg.n,
        u_fm: alg.u_fm,
        u_fl: alg.u_fl,
        u_fl_q: alg.u_fl_q,
        i_fl: alg.i_fl,
        phi_fl: alg.phi_fl,
        p_fm: alg.p_fm,
        i_fm_proxy: alg.i_fm_proxy,
        d13_dot: p.gfl.k_p_pll * alg.u_fl_q + y[3],
        f_fl_d12,
        f_fl_d13,
        theta_pcc_gfm: alg.u_pcc_gfm.arg(),
    }
}

fn net_of(nets: &[ReducedNetwork; 3], stage: Stage) -> &ReducedNetwork {
    match stage {
        Stage::Prefault => &nets[0],
        Stage::Fault => &nets[1],
        Stage::Postfault => &nets[2],
    }
}

struct Integrator<'a> {
    p: &'a SystemParams,
    boundaries: Vec<(f64, Stage, EventCondition)>,
    next_boundary: usize,
    chatter_bound: usize,
    stage: Stage,
    t: f64,
    y: StateVec,
    n: Combination,
    sat: Option<SatInjection>,
    events: Vec<EventRecord>,
}

impl Integrator<'_> {
    /// Process due scheduled network swaps at the current time.
    fn process_due_boundaries(&mut self, nets: &[ReducedNetwork; 3]) -> Result<(), DynamicsError> {
        while self.next_boundary < self.boundaries.len() {
            let (bt, bstage, bcond) = self.boundaries[self.next_boundary];
            if self.t + 1e-12 * (1.0 + bt.abs()) < bt {
                break;
            }
            let t = self.t;
            let alg_pre = solve_frozen(
                self.y,
                self.n,
                self.sat,
                net_of(nets, self.stage),
                self.p,
                None,
            )
            .map_err(|source| DynamicsError::Algebraic { t, source })?;
            self.stage = bstage;
            let keep_sat = (self.n.gfm_mode() == GfmMode::Cs)
                .then_some(self.sat)
                .flatten();
            let out = classify_combination(
                self.y[0],
                self.y[2],
                net_of(nets, self.stage),
                self.p,
                keep_sat,
                Some(self.n),
            )
            .map_err(|source| DynamicsError::Algebraic { t, source })?;
            self.events.push(EventRecord {
                t: bt,
                n_old: self.n,
                n_new: out.n,
                condition: bcond,
                y: self.y,
                g_value: None,
                alg_pre,
                alg_post: out.state,
            });
            self.n = out.n;
            self.sat = out.sat_used;
            self.next_boundary += 1;
        }
        Ok(())
    }

    /// Advance from the current time to `t_next`, handling scheduled swaps
    /// and monitor-triggered switches inside the span.
    fn advance_to(&mut self, nets: &[ReducedNetwork; 3], t_next: f64) -> Result<(), DynamicsError> {
        let mut switches = 0usize;
        loop {
            self.process_due_boundaries(nets)?;
            if self.t >= t_next - 1e-12 * (1.0 + t_next) {
                self.t = t_next;
                return Ok(());
            }
            let mut target = t_next;
            if self.next_boundary < self.boundaries.len() {
                let bt = self.boundaries[self.next_boundary].0;
                if bt > self.t && bt < target {
                    target = bt;
                }
            }
            let h = target - self.t;
            let net = net_of(nets, self.stage);
            let p = self.p;
            let n = self.n;
            let sat = self.sat;
            let monitors = Monitor::active_for(n);
            let y_start = self.y;
            let probe = move |theta: f64| -> Option<Probe> {
                let (yp, warm) = match rk4_step(y_start, theta * h, n, sat, net, p, None) {
                    Ok(v) => v,
                    Err(_) => return None,
                };
                let alg = solve_frozen(yp, n, sat, net, p, Some(&warm)).ok();
                Some(Probe { y: yp, alg })
            };

            let full = probe(1.0);
            let end_ok = matches!(
                &full,
                Some(Probe { alg: Some(alg), .. })
                    if monitors.iter().all(|m| !m.violated(m.value(alg, p), n))
            );
            if end_ok {
                self.y = full.unwrap().y;
                self.t = target;
                if !self.y.iter().all(|v| v.is_finite()) {
                    return Err(DynamicsError::NotFinite { t: self.t });
                }
                continue;
            }

            // A monitor fires (or the branch disappears) inside (t, target].
            // Bisect, accepting the violated side so the subsequent
            // classification cannot fall back to the expiring combination.
            let is_bad = |pr: &Option<Probe>| -> bool {
                match pr {
                    Some(Probe { alg: Some(alg), .. }) => {
                        monitors.iter().any(|m| m.violated(m.value(alg, p), n))
                    }
                    _ => true,
                }
            };
            let firing = |pr: &Option<Probe>| -> Option<(EventCondition, f64)> {
                pr.as_ref()
                    .and_then(|x| x.alg.as_ref())
                    .and_then(|alg| firing_monitor(&monitors, alg, p, n))
            };
            let mut lo = 0.0f64;
            let mut hi = 1.0f64;
            let mut hi_probe = full;
            let mut achieved = firing(&hi_probe);
            for _ in 0..EVENT_MAX_BISECT {
                if let Some((_, g)) = achieved {
                    if g.abs() < EVENT_G_TOL {
                        break;
                    }
                }
                if hi - lo < 1e-16 {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                let pm = probe(mid);
                if is_bad(&pm) {
                    hi = mid;
                    achieved = firing(&pm);
                    hi_probe = pm;
                } else {
                    lo = mid;
                }
            }
            // Need a usable state on the violated side; if the RK4
            // arithmetic itself failed at hi, retreat slightly.
            let mut event_probe = hi_probe;
            let mut retreats = 0;
            while event_probe.is_none() && retreats < 8 {
                hi = lo + 0.875 * (hi - lo);
                event_probe = probe(hi);
                retreats += 1;
            }
            let Some(event_probe) = event_probe else {
                return Err(DynamicsError::EventStalled { t: self.t });
            };
            let t_event = self.t + hi * h;
            let y_event = event_probe.y;

            // Classify at the event state. An ongoing saturated dwell keeps
            // its frozen injection; entering saturation derives a fresh one.
            let keep_sat = (n.gfm_mode() == GfmMode::Cs).then_some(sat).flatten();
            let out = classify_combination(y_event[0], y_event[2], net, p, keep_sat, Some(n))
                .map_err(|source| DynamicsError::Algebraic {
                    t: t_event,
                    source,
                })?;

            if out.n != n {
                let (condition, g_value) = match (&event_probe.alg, achieved) {
                    (Some(_), Some((cond, g))) => (cond, Some(g)),
                    _ => (mode_diff_condition(n, out.n), None),
                };
                let alg_pre = event_probe.alg.clone().unwrap_or_else(|| out.state.clone());
                self.events.push(EventRecord {
                    t: t_event,
                    n_old: n,
                    n_new: out.n,
                    condition,
                    y: y_event,
                    g_value,
                    alg_pre,
                    alg_post: out.state.clone(),
                });
                self.n = out.n;
                self.sat = out.sat_used;
            }
            // When classification keeps the combination (competing branch
            // not consistent), hysteresis holds the dwell and integration
            // simply continues from just past the crossing.
            self.y = y_event;
            self.t = t_event;
            switches += 1;
            if switches > self.chatter_bound {
                return Err(DynamicsError::Chattering {
                    t: self.t,
                    count: switches,
                });
            }
        }
    }
}

/// Integrate the switched system through the fault schedule.
///
/// `y0` is [δ12, ω12, δ13, x_PLL] at t = 0. The initial combination is
/// classified on the stage active at t = 0 (a fault scheduled at exactly
/// t = 0 is applied as the first event, so its record is preserved).
/// A mid-run algebraic breakdown truncates the trajectory and is reported
/// in `Trajectory::truncation` rather than failing the call.
pub fn integrate(
    model: &NetworkModel,
    fault: &FaultStage,
    p: &SystemParams,
    y0: StateVec,
    opts: &SimOptions,
) -> Result<Trajectory, DynamicsError> {
    fault.validate(model)?;
    let nets = [
        ReducedNetwork::build(model, &fault.at_stage(Stage::Prefault))?,
        ReducedNetwork::build(model, &fault.at_stage(Stage::Fault))?,
        ReducedNetwork::build(model, &fault.at_stage(Stage::Postfault))?,
    ];
    let dt = opts.dt;
    assert!(dt > 0.0 && opts.t_end > 0.0, "nonpositive step or horizon");
    let n_steps = (opts.t_end / dt).round() as usize;

    // Scheduled swaps inside the horizon. A start at exactly 0 is kept as
    // an event so the 2→4 transition is recorded, not silently absorbed.
    let mut boundaries: Vec<(f64, Stage, EventCondition)> = Vec::new();
    if fault.t_start >= 0.0 && fault.t_start <= opts.t_end {
        boundaries.push((fault.t_start, Stage::Fault, EventCondition::FaultApply));
        if fault.t_clear <= opts.t_end {
            boundaries.push((fault.t_clear, Stage::Postfault, EventCondition::FaultClear));
        }
    }

    let mut intg = Integrator {
        p,
        boundaries,
        next_boundary: 0,
        chatter_bound: opts.chatter_bound,
        stage: Stage::Prefault,
        t: 0.0,
        y: y0,
        n: Combination::new(2).unwrap(),
        sat: None,
        events: Vec::new(),
    };
    let init = classify_combination(y0[0], y0[2], net_of(&nets, intg.stage), p, None, None)
        .map_err(|source| DynamicsError::Algebraic { t: 0.0, source })?;
    intg.n = init.n;
    intg.sat = init.sat_used;

    let mut samples: Vec<Sample> = Vec::with_capacity(n_steps + 1);
    samples.push(make_sample(0.0, y0, &init.state, net_of(&nets, intg.stage), p));

    let mut truncation = None;
    for k in 0..n_steps {
        let t_next = (k + 1) as f64 * dt;
        match intg.advance_to(&nets, t_next) {
            Ok(()) => {}
            Err(DynamicsError::Algebraic { t, source }) => {
                truncation = Some(Truncation {
                    t,
                    reason: source.to_string(),
                });
                break;
            }
            Err(e) => return Err(e),
        }
        let net = net_of(&nets, intg.stage);
        match solve_frozen(intg.y, intg.n, intg.sat, net, p, None) {
            Ok(alg) => samples.push(make_sample(intg.t, intg.y, &alg, net, p)),
            Err(source) => {
                truncation = Some(Truncation {
                    t: intg.t,
                    reason: source.to_string(),
                });
                break;
            }
        }
    }

    Ok(Trajectory {
        dt,
        samples,
        events: intg.events,
        truncation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devices::SatAnglePolicy;
    use crate::testkit;
    use approx::assert_abs_diff_eq;

    fn no_fault() -> FaultStage {
        FaultStage {
            stage: Stage::Prefault,
            bus: 4,
            resistance_ohm: 1.0,
            t_start: 1e9,
            t_clear: 2e9,
        }
    }

    fn short_fault(t_start: f64, t_clear: f64) -> FaultStage {
        FaultStage {
            stage: Stage::Prefault,
            bus: 4,
            resistance_ohm: 1.0,
            t_start,
            t_clear,
        }
    }

    /// Polish the reference equilibrium to machine precision so drift tests
    /// measure the integrator, not the fixture rounding.
    fn polished_sep(sys: &testkit::TestSystem) -> (f64, f64) {
        let p = &sys.params;
        let (mut d12, mut d13) = sys.sep1;
        for _ in 0..50 {
            let f = |a: f64, b: f64| {
                let s = solve_mode_state(
                    a,
                    b,
                    GfmMode::Nc,
                    GflMode::Nc,
                    &sys.pre,
                    p,
                    None,
                    None,
                )
                .unwrap();
                [s.p_fm - p.gfm.p_ref, s.u_fl_q]
            };
            let r = f(d12, d13);
            if r[0].abs().max(r[1].abs()) < 1e-13 {
                break;
            }
            let h = 1e-7;
            let rx = f(d12 + h, d13);
            let ry = f(d12, d13 + h);
            let j = [
                [(rx[0] - r[0]) / h, (ry[0] - r[0]) / h],
                [(rx[1] - r[1]) / h, (ry[1] - r[1]) / h],
            ];
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            d12 -= (r[0] * j[1][1] - r[1] * j[0][1]) / det;
            d13 -= (j[0][0] * r[1] - j[1][0] * r[0]) / det;
        }
        (d12, d13)
    }

    #[test]
    fn rhs_hand_case_and_equilibrium_rest() {
        let sys = testkit::system();
        let p = &sys.params;
        let (d12, d13) = polished_sep(&sys);
        let alg = solve_mode_state(d12, d13, GfmMode::Nc, GflMode::Nc, &sys.pre, p, None, None)
            .unwrap();
        let dot = rhs([d12, 0.0, d13, 0.0], &alg, p);
        for d in dot {
            assert_abs_diff_eq!(d, 0.0, epsilon = 1e-9);
        }
        // Hand-checked swing acceleration.
        let mut fake = alg.clone();
        fake.p_fm = 1.0;
        fake.u_fl_q = 0.0;
        let dot = rhs([0.0, 0.2, 0.0, 0.0], &fake, p);
        assert_abs_diff_eq!(dot[1], (1.68 - 1.0 - 0.2) / 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(dot[0], 0.2, epsilon = 1e-15);
    }

    #[test]
    fn equilibrium_is_preserved_without_fault() {
        let sys = testkit::system();
        let (d12, d13) = polished_sep(&sys);
        let opts = SimOptions {
            dt: 1e-3,
            t_end: 5.0,
            ..Default::default()
        };
        let tr = integrate(
            &testkit::star_model(),
            &no_fault(),
            &sys.params,
            [d12, 0.0, d13, 0.0],
            &opts,
        )
        .unwrap();
        assert!(tr.truncation.is_none());
        assert!(tr.events.is_empty());
        let max_drift = tr
            .samples
            .iter()
            .map(|s| (s.delta12() - d12).abs().max((s.delta13() - d13).abs()))
            .fold(0.0, f64::max);
        assert!(max_drift < 1e-8, "equilibrium drift {max_drift:.3e}");
        assert!(tr.samples.iter().all(|s| s.n.index() == 2));
    }

    #[test]
    fn samples_fall_on_exact_grid_times() {
        let sys = testkit::system();
        let (d12, d13) = polished_sep(&sys);
        let opts = SimOptions {
            dt: 1e-3,
            t_end: 0.05,
            ..Default::default()
        };
        let tr = integrate(
            &testkit::star_model(),
            &short_fault(0.011, 0.024),
            &sys.params,
            [d12, 0.0, d13, 0.0],
            &opts,
        )
        .unwrap();
        assert_eq!(tr.samples.len(), 51);
        for (k, s) in tr.samples.iter().enumerate() {
            assert_eq!(s.t.to_bits(), (k as f64 * 1e-3).to_bits());
        }
    }

    #[test]
    fn trajectory_derivatives_match_states_between_events() {
        let sys = testkit::system();
        let (d12, d13) = polished_sep(&sys);
        let opts = SimOptions {
            dt: 1e-4,
            t_end: 0.2,
            ..Default::default()
        };
        let tr = integrate(
            &testkit::star_model(),
            &no_fault(),
            &sys.params,
            [d12 + 0.3, 0.0, d13 + 0.2, 0.0],
            &opts,
        )
        .unwrap();
        assert!(tr.truncation.is_none());
        let dt = tr.dt;
        let mut checked = 0;
        for i in 1..tr.samples.len() - 1 {
            let (a, b, c) = (&tr.samples[i - 1], &tr.samples[i], &tr.samples[i + 1]);
            if tr
                .events
                .iter()
                .any(|e| e.t > a.t - dt && e.t < c.t + dt)
            {
                continue;
            }
            let fd12 = (c.delta12() - a.delta12()) / (2.0 * dt);
            assert_abs_diff_eq!(fd12, b.omega12(), epsilon = 1e-6);
            let fd13 = (c.delta13() - a.delta13()) / (2.0 * dt);
            assert_abs_diff_eq!(fd13, b.d13_dot, epsilon = 1e-6);
            // First-order PLL realization carries the second-order form:
            // d(δ̇13)/dt = K_i·u_q + K_p·(du_q/dt).
            let fdot13 = (c.d13_dot - a.d13_dot) / (2.0 * dt);
            let duq = (c.u_fl_q - a.u_fl_q) / (2.0 * dt);
            let rhs2 = sys.params.gfl.k_i_pll * b.u_fl_q + sys.params.gfl.k_p_pll * duq;
            assert_abs_diff_eq!(fdot13, rhs2, epsilon = 5e-4 * (1.0 + rhs2.abs()));
            checked += 1;
        }
        assert!(checked > 1000);
    }

    #[test]
    fn fault_at_zero_records_entry_into_saturation() {
        let sys = testkit::system();
        let mut p = sys.params;
        p.gfm.phi_sa_policy = SatAnglePolicy::Fixed;
        p.gfm.i_sa = 1.0;
        p.gfm.phi_sa = 0.0;
        let (d12, d13) = polished_sep(&sys);
        let opts = SimOptions {
            dt: 1e-4,
            t_end: 0.35,
            ..Default::default()
        };
        let tr = integrate(
            &testkit::star_model(),
            &short_fault(0.0, 0.2),
            &p,
            [d12, 0.0, d13, 0.0],
            &opts,
        )
        .unwrap();
        assert!(tr.truncation.is_none(), "truncated: {:?}", tr.truncation);
        // First event is the scheduled application, switching 2 → 4.
        let first = &tr.events[0];
        assert_eq!(first.condition, EventCondition::FaultApply);
        assert_eq!(first.t, 0.0);
        assert_eq!(first.n_old.index(), 2);
        assert_eq!(first.n_new.index(), 4);
        // Mid-fault sample rides in CS+LVRT.
        let mid = &tr.samples[tr.sample_at_or_after(0.1)];
        assert_eq!(mid.n.index(), 4);
        assert!(mid.u_fl < p.gfl.u_lv);
        assert!(mid.i_fm_proxy > p.gfm.i_max);
        // Clearing is recorded, and afterwards the system desaturates.
        assert!(tr
            .events
            .iter()
            .any(|e| e.condition == EventCondition::FaultClear));
        let last = tr.samples.last().unwrap();
        assert_eq!(last.n.index(), 2, "short fault should recover to NC+NC");
        // Monitor-localized events sit on their switching surfaces.
        for e in &tr.events {
            if let Some(g) = e.g_value {
                assert!(
                    g.abs() < 1e-9,
                    "event at t={} condition {} has |g|={:.3e}",
                    e.t,
                    e.condition,
                    g.abs()
                );
            }
        }
        // Events strictly ordered.
        for w in tr.events.windows(2) {
            assert!(w[0].t <= w[1].t);
        }
    }

    #[test]
    fn halving_dt_moves_events_less_than_coarse_step() {
        let sys = testkit::system();
        let mut p = sys.params;
        p.gfm.phi_sa_policy = SatAnglePolicy::Fixed;
        p.gfm.i_sa = 1.0;
        p.gfm.phi_sa = 0.0;
        // Saturation boundary close to the equilibrium demand, plus a
        // velocity kick: the swing crosses the current monitor in both
        // directions without any stage swap involved.
        p.gfm.i_max = 1.75;
        let (d12, d13) = polished_sep(&sys);
        let run = |dt: f64| {
            integrate(
                &testkit::star_model(),
                &no_fault(),
                &p,
                [d12, 1.2, d13, 0.0],
                &SimOptions {
                    dt,
                    t_end: 0.5,
                    ..Default::default()
                },
            )
            .unwrap()
        };
        let coarse = run(2e-4);
        let fine = run(1e-4);
        let coarse_ev: Vec<_> = coarse
            .events
            .iter()
            .filter(|e| e.g_value.is_some())
            .collect();
        let fine_ev: Vec<_> = fine.events.iter().filter(|e| e.g_value.is_some()).collect();
        assert!(!coarse_ev.is_empty(), "scenario must produce monitor events");
        assert_eq!(coarse_ev.len(), fine_ev.len());
        for (a, b) in coarse_ev.iter().zip(&fine_ev) {
            assert_eq!(a.condition, b.condition);
            assert!(
                (a.t - b.t).abs() < 10.0 * 1e-4,
                "event moved {} -> {}",
                a.t,
                b.t
            );
        }
    }

    #[test]
    fn interevent_segments_show_fourth_order_convergence() {
        let sys = testkit::system();
        let (d12, d13) = polished_sep(&sys);
        let y0 = [d12 + 0.25, 0.0, d13 + 0.15, 0.0];
        // Smooth segment: no fault, no events; integrate the same span at
        // dt and dt/2 and compare endpoints.
        let run = |dt: f64| {
            integrate(
                &testkit::star_model(),
                &no_fault(),
                &sys.params,
                y0,
                &SimOptions {
                    dt,
                    t_end: 0.1,
                    ..Default::default()
                },
            )
            .unwrap()
        };
        let a = run(2e-4);
        let b = run(1e-4);
        assert!(a.events.is_empty() && b.events.is_empty());
        let ya = a.samples.last().unwrap().y;
        let yb = b.samples.last().unwrap().y;
        let diff = ya
            .iter()
            .zip(&yb)
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6, "endpoint difference {diff:.3e}");
    }
}
