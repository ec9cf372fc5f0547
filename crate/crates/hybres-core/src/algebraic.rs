//! Quasi-static electrical solution at a frozen angle pair (δ12, δ13):
//! per-mode implicit solves, the six-way self-consistency classifier, the
//! implicit-function sensitivities consumed by the damping analysis, and
//! grid sweeps of the consistent-combination map.
//!
//! Angle conventions: δ12 is the GFM source angle and δ13 the PLL d-axis
//! angle, both relative to the grid phasor. φ_FL is measured in the PLL
//! frame, φ_sa in the GFM frame.

use crate::devices::{
    gfl_injection_with_slope, gfl_mode_of, Combination, GflMode, GfmMode, SatAnglePolicy,
    SatInjection, SystemParams,
};
use crate::network::{ReducedNetwork, C, GFL, GFM, GRID};
use crate::par::map_cells;
use std::f64::consts::{FRAC_PI_2, PI};
use thiserror::Error;

/// Newton settings shared by every implicit solve in this module.
const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 50;
const NEWTON_MAX_HALVINGS: usize = 30;
/// A solved state must satisfy its defining residuals below this bound.
const STATE_RESIDUAL_BOUND: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum AlgebraicError {
    #[error("voltage quadratic has no real root (discriminant {discriminant:.3e})")]
    NoRealRoot { discriminant: f64 },
    #[error("voltage quadratic root is nonpositive ({root:.3e})")]
    NonphysicalRoot { root: f64 },
    #[error("droop equation degenerate: reduced self-admittance has zero imaginary part")]
    DegenerateDroop,
    #[error("newton failed to converge for gfm={gfm:?}, gfl={gfl:?} at ({d12:.4}, {d13:.4})")]
    NewtonDiverged {
        gfm: GfmMode,
        gfl: GflMode,
        d12: f64,
        d13: f64,
    },
    #[error("singular jacobian in implicit sensitivity solve")]
    SingularJacobian,
    #[error("no self-consistent control combination at ({d12:.4}, {d13:.4})")]
    NoCombination {
        d12: f64,
        d13: f64,
        reports: Vec<CombinationReport>,
    },
}

/// Per-combination outcome used in no-solution diagnostics.
#[derive(Debug, Clone)]
pub struct CombinationReport {
    pub n: u8,
    pub solved: bool,
    pub self_consistent: bool,
    pub detail: String,
}

/// Complete electrical solution at one angle pair under one combination.
#[derive(Debug, Clone)]
pub struct AlgebraicState {
    pub delta12: f64,
    pub delta13: f64,
    pub n: Combination,
    /// GFM terminal voltage magnitude.
    pub u_fm: f64,
    /// GFL terminal voltage magnitude.
    pub u_fl: f64,
    /// GFL terminal voltage q-axis component in the PLL frame.
    pub u_fl_q: f64,
    pub i_fl: f64,
    pub phi_fl: f64,
    /// Saturation indicator: the GFM terminal current demand. In NC this is
    /// the solved terminal current magnitude; in CS it is the demand of the
    /// shadow NC solution (+inf when no shadow solution exists), so the
    /// saturated condition reads `i_fm_proxy > i_max` in both directions.
    pub i_fm_proxy: f64,
    pub p_fm: f64,
    pub q_fm: f64,
    /// GFM terminal voltage phasor, grid frame.
    pub u_pcc_gfm: C,
    /// GFM terminal current phasor, grid frame (the injected phasor in CS).
    pub i_gfm: C,
    /// GFL terminal voltage phasor, grid frame.
    pub u_pcc_gfl: C,
    /// Frozen saturated injection backing this state when the GFM is in CS.
    pub sat: Option<SatInjection>,
}

/// Sensitivities of the implicit solution with respect to (δ12, δ13),
/// index 0 = δ12, index 1 = δ13.
#[derive(Debug, Clone, Copy)]
pub struct Partials {
    /// GFM voltage sensitivity; `None` in CS where the voltage is an output
    /// of fixed injections rather than a solved unknown.
    pub du_fm: Option<[f64; 2]>,
    pub di_fl: [f64; 2],
    pub dphi_fl: [f64; 2],
    /// Total derivative of the PLL q-axis voltage, all implicit chains
    /// included; the damping coefficients are −K_p times these.
    pub du_q: [f64; 2],
}

/// Result of the self-consistency classification at one point.
#[derive(Debug, Clone)]
pub struct ClassifyOutcome {
    pub n: Combination,
    pub state: AlgebraicState,
    /// How many combinations were simultaneously self-consistent.
    pub multiplicity: u8,
    pub consistent: Vec<Combination>,
    /// The frozen injection used when `n` is a CS combination.
    pub sat_used: Option<SatInjection>,
}

/// Positive branch of U² + aU + b = 0.
pub(crate) fn positive_quadratic_root(a: f64, b: f64) -> Result<f64, AlgebraicError> {
    let disc = a * a - 4.0 * b;
    if disc < 0.0 {
        return Err(AlgebraicError::NoRealRoot { discriminant: disc });
    }
    let root = 0.5 * (-a + disc.sqrt());
    if root <= 0.0 {
        return Err(AlgebraicError::NonphysicalRoot { root });
    }
    Ok(root)
}

/// Droop quadratic coefficients: with the GFM held on its reactive droop,
/// the terminal voltage magnitude satisfies U² + aU + b = 0 where only `a`
/// depends on the GFL injection and the angles.
fn droop_coefficients(
    net: &ReducedNetwork,
    d12: f64,
    d13: f64,
    i_fl: f64,
    phi_fl: f64,
    p: &SystemParams,
) -> Result<(f64, f64), AlgebraicError> {
    let m = &net.m_nc;
    let denom = -m[1][1].im;
    if denom == 0.0 {
        return Err(AlgebraicError::DegenerateDroop);
    }
    let x1 = C::new(net.u_sys, 0.0);
    let x3 = C::from_polar(i_fl, d13 + phi_fl);
    let w = m[1][0] * x1 + m[1][2] * x3;
    let c = (C::from_polar(1.0, d12) * w.conj()).im;
    let a = (c + 1.0 / p.gfm.k_q) / denom;
    let b = -(p.gfm.k_q * p.gfm.q_ref + p.gfm.u_fm0) / (p.gfm.k_q * denom);
    Ok((a, b))
}

/// GFM terminal voltage under reactive droop for a fixed GFL injection.
/// With the droop gain at zero the voltage is pinned at the setpoint.
pub fn solve_u_fm_quadratic(
    i_fl: f64,
    phi_fl: f64,
    d12: f64,
    d13: f64,
    net: &ReducedNetwork,
    p: &SystemParams,
) -> Result<f64, AlgebraicError> {
    if p.gfm.k_q == 0.0 {
        return Ok(p.gfm.u_fm0);
    }
    let (a, b) = droop_coefficients(net, d12, d13, i_fl, phi_fl, p)?;
    positive_quadratic_root(a, b)
}

/// Bus-level outputs shared by both partitions.
#[derive(Debug, Clone, Copy)]
struct BusOutputs {
    u3: C,
    u_pcc_gfm: C,
    i_gfm: C,
    p: f64,
    q: f64,
    u_fm: f64,
    u_fl: f64,
    u_q: f64,
}

fn nc_outputs(net: &ReducedNetwork, d12: f64, d13: f64, u_fm: f64, i_fl: f64, phi_fl: f64) -> BusOutputs {
    let m = &net.m_nc;
    let x1 = C::new(net.u_sys, 0.0);
    let x2 = C::from_polar(u_fm, d12);
    let x3 = C::from_polar(i_fl, d13 + phi_fl);
    let i2 = m[1][0] * x1 + m[1][1] * x2 + m[1][2] * x3;
    let u3 = m[2][0] * x1 + m[2][1] * x2 + m[2][2] * x3;
    let s2 = x2 * i2.conj();
    BusOutputs {
        u3,
        u_pcc_gfm: x2,
        i_gfm: i2,
        p: s2.re,
        q: s2.im,
        u_fm,
        u_fl: u3.norm(),
        u_q: (u3 * C::from_polar(1.0, -d13)).im,
    }
}

fn cs_outputs(
    net: &ReducedNetwork,
    d12: f64,
    d13: f64,
    sat: SatInjection,
    i_fl: f64,
    phi_fl: f64,
) -> BusOutputs {
    let m = &net.m_cs;
    let x1 = C::new(net.u_sys, 0.0);
    let x2 = C::from_polar(sat.i_sa, d12 + sat.phi_sa);
    let x3 = C::from_polar(i_fl, d13 + phi_fl);
    let u2 = m[1][0] * x1 + m[1][1] * x2 + m[1][2] * x3;
    let u3 = m[2][0] * x1 + m[2][1] * x2 + m[2][2] * x3;
    let s2 = u2 * x2.conj();
    BusOutputs {
        u3,
        u_pcc_gfm: u2,
        i_gfm: x2,
        p: s2.re,
        q: s2.im,
        u_fm: u2.norm(),
        u_fl: u3.norm(),
        u_q: (u3 * C::from_polar(1.0, -d13)).im,
    }
}

/// One evaluation of the ride-through residual system at z = (I_FL, φ_FL),
/// with enough cached structure to assemble the Newton and sensitivity
/// Jacobians without re-solving.
struct RtEval {
    r: [f64; 2],
    jac: [[f64; 2]; 2],
    out: BusOutputs,
    /// Active-branch injection slopes (dI/dU, dφ/dU) at the evaluated U_FL.
    inj_slope: [f64; 2],
    /// d U_FM / d z_k (NC only; zero in CS).
    du_fm_dz: [f64; 2],
}

struct RtProblem<'a> {
    net: &'a ReducedNetwork,
    p: &'a SystemParams,
    d12: f64,
    d13: f64,
    gfm_mode: GfmMode,
    gfl_mode: GflMode,
    sat: Option<SatInjection>,
}

impl RtProblem<'_> {
    fn eval(&self, z: [f64; 2]) -> Result<RtEval, AlgebraicError> {
        let (i_fl, phi_fl) = (z[0], z[1]);
        let d12 = self.d12;
        let d13 = self.d13;
        let e_j12 = C::from_polar(1.0, d12);
        let x3 = C::from_polar(i_fl, d13 + phi_fl);
        let dx3_di = C::from_polar(1.0, d13 + phi_fl);
        let dx3_dphi = C::new(0.0, 1.0) * x3;

        let (out, du_fl_dz, du_fm_dz) = match self.gfm_mode {
            GfmMode::Nc => {
                let m = &self.net.m_nc;
                let (a, _b) = if self.p.gfm.k_q == 0.0 {
                    (0.0, 0.0)
                } else {
                    droop_coefficients(self.net, d12, d13, i_fl, phi_fl, self.p)?
                };
                let u_fm = solve_u_fm_quadratic(i_fl, phi_fl, d12, d13, self.net, self.p)?;
                let out = nc_outputs(self.net, d12, d13, u_fm, i_fl, phi_fl);
                // dU/dz through the quadratic: 2U U' + a'U + a U' = 0.
                let denom_droop = -m[1][1].im;
                let du_fm_dz = if self.p.gfm.k_q == 0.0 {
                    [0.0, 0.0]
                } else {
                    let da_di = (e_j12 * (m[1][2] * dx3_di).conj()).im / denom_droop;
                    let da_dphi = (e_j12 * (m[1][2] * dx3_dphi).conj()).im / denom_droop;
                    let scale = -u_fm / (2.0 * u_fm + a);
                    [scale * da_di, scale * da_dphi]
                };
                let du3_dz = [
                    m[2][1] * e_j12 * du_fm_dz[0] + m[2][2] * dx3_di,
                    m[2][1] * e_j12 * du_fm_dz[1] + m[2][2] * dx3_dphi,
                ];
                let du_fl_dz = [
                    (out.u3.conj() * du3_dz[0]).re / out.u_fl.max(1e-300),
                    (out.u3.conj() * du3_dz[1]).re / out.u_fl.max(1e-300),
                ];
                (out, du_fl_dz, du_fm_dz)
            }
            GfmMode::Cs => {
                let m = &self.net.m_cs;
                let sat = self.sat.expect("CS solve requires a frozen injection");
                let out = cs_outputs(self.net, d12, d13, sat, i_fl, phi_fl);
                let du3_dz = [m[2][2] * dx3_di, m[2][2] * dx3_dphi];
                let du_fl_dz = [
                    (out.u3.conj() * du3_dz[0]).re / out.u_fl.max(1e-300),
                    (out.u3.conj() * du3_dz[1]).re / out.u_fl.max(1e-300),
                ];
                (out, du_fl_dz, [0.0, 0.0])
            }
        };

        let (i_inj, phi_inj, di_du, dphi_du) =
            gfl_injection_with_slope(out.u_fl, self.gfl_mode, &self.p.gfl);
        let r = [i_fl - i_inj, phi_fl - phi_inj];
        let jac = [
            [1.0 - di_du * du_fl_dz[0], -di_du * du_fl_dz[1]],
            [-dphi_du * du_fl_dz[0], 1.0 - dphi_du * du_fl_dz[1]],
        ];
        Ok(RtEval {
            r,
            jac,
            out,
            inj_slope: [di_du, dphi_du],
            du_fm_dz,
        })
    }
}

fn norm_inf2(r: [f64; 2]) -> f64 {
    r[0].abs().max(r[1].abs())
}

fn solve_2x2(jac: [[f64; 2]; 2], rhs: [f64; 2]) -> Option<[f64; 2]> {
    let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
    let scale = norm_inf2(jac[0]).max(norm_inf2(jac[1])).max(1e-300);
    if det.abs() < 1e-14 * scale * scale {
        return None;
    }
    Some([
        (rhs[0] * jac[1][1] - rhs[1] * jac[0][1]) / det,
        (jac[0][0] * rhs[1] - jac[1][0] * rhs[0]) / det,
    ])
}

/// Damped Newton over the fixed multistart list; the first start that
/// converges wins, which keeps the solve deterministic.
fn newton_rt(problem: &RtProblem, warm: Option<[f64; 2]>) -> Result<(RtEval, [f64; 2]), AlgebraicError> {
    let p = problem.p;
    let mut starts: Vec<[f64; 2]> = Vec::with_capacity(3);
    if let Some(w) = warm {
        starts.push(w);
    }
    starts.push([p.gfl.i_0, p.gfl.phi_0]);
    match problem.gfl_mode {
        GflMode::Lvrt => starts.push([p.gfl.i_max, -FRAC_PI_2]),
        GflMode::Hvrt => starts.push([p.gfl.i_max, FRAC_PI_2]),
        GflMode::Nc => {}
    }
    for start in starts {
        let Ok(mut eval) = problem.eval(start) else {
            continue;
        };
        let mut z = start;
        let mut converged = false;
        for _ in 0..NEWTON_MAX_ITER {
            if norm_inf2(eval.r) < NEWTON_TOL {
                converged = true;
                break;
            }
            let Some(dz) = solve_2x2(eval.jac, [-eval.r[0], -eval.r[1]]) else {
                break;
            };
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..NEWTON_MAX_HALVINGS {
                let zt = [z[0] + step * dz[0], z[1] + step * dz[1]];
                if let Ok(et) = problem.eval(zt) {
                    if norm_inf2(et.r) < norm_inf2(eval.r) {
                        z = zt;
                        eval = et;
                        accepted = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if converged && norm_inf2(eval.r) < STATE_RESIDUAL_BOUND {
            return Ok((eval, z));
        }
    }
    Err(AlgebraicError::NewtonDiverged {
        gfm: problem.gfm_mode,
        gfl: problem.gfl_mode,
        d12: problem.d12,
        d13: problem.d13,
    })
}

fn state_from_outputs(
    d12: f64,
    d13: f64,
    n: Combination,
    out: BusOutputs,
    i_fl: f64,
    phi_fl: f64,
    i_fm_proxy: f64,
    sat: Option<SatInjection>,
) -> AlgebraicState {
    AlgebraicState {
        delta12: d12,
        delta13: d13,
        n,
        u_fm: out.u_fm,
        u_fl: out.u_fl,
        u_fl_q: out.u_q,
        i_fl,
        phi_fl,
        i_fm_proxy,
        p_fm: out.p,
        q_fm: out.q,
        u_pcc_gfm: out.u_pcc_gfm,
        i_gfm: out.i_gfm,
        u_pcc_gfl: out.u3,
        sat,
    }
}

fn solve_mode_state_inner(
    d12: f64,
    d13: f64,
    gfm_mode: GfmMode,
    gfl_mode: GflMode,
    net: &ReducedNetwork,
    p: &SystemParams,
    sat: Option<SatInjection>,
    warm: Option<&AlgebraicState>,
    cs_proxy: Option<f64>,
) -> Result<AlgebraicState, AlgebraicError> {
    let n = Combination::of_modes(gfm_mode, gfl_mode);
    match (gfm_mode, gfl_mode) {
        (GfmMode::Nc, GflMode::Nc) => {
            // Both injections explicit: the system collapses to the scalar
            // voltage quadratic.
            let (i_fl, phi_fl) = (p.gfl.i_0, p.gfl.phi_0);
            let u_fm = solve_u_fm_quadratic(i_fl, phi_fl, d12, d13, net, p)?;
            let out = nc_outputs(net, d12, d13, u_fm, i_fl, phi_fl);
            let proxy = out.i_gfm.norm();
            Ok(state_from_outputs(d12, d13, n, out, i_fl, phi_fl, proxy, None))
        }
        (GfmMode::Cs, GflMode::Nc) => {
            // Fully explicit: both injections fixed, zero iterations.
            let sat = sat.expect("CS solve requires a frozen injection");
            let (i_fl, phi_fl) = (p.gfl.i_0, p.gfl.phi_0);
            let out = cs_outputs(net, d12, d13, sat, i_fl, phi_fl);
            let proxy = match cs_proxy {
                Some(v) => v,
                None => shadow_nc_demand(d12, d13, net, p),
            };
            Ok(state_from_outputs(d12, d13, n, out, i_fl, phi_fl, proxy, Some(sat)))
        }
        (gm, _) => {
            let problem = RtProblem {
                net,
                p,
                d12,
                d13,
                gfm_mode: gm,
                gfl_mode,
                sat,
            };
            let warm_z = warm.map(|s| [s.i_fl, s.phi_fl]);
            let (eval, z) = newton_rt(&problem, warm_z)?;
            let proxy = match gm {
                GfmMode::Nc => eval.out.i_gfm.norm(),
                GfmMode::Cs => match cs_proxy {
                    Some(v) => v,
                    None => shadow_nc_demand(d12, d13, net, p),
                },
            };
            let sat_out = (gm == GfmMode::Cs).then(|| sat.unwrap());
            Ok(state_from_outputs(d12, d13, n, eval.out, z[0], z[1], proxy, sat_out))
        }
    }
}

/// Solve the quasi-static system under a fixed mode pair. CS modes require
/// the frozen injection `sat`. `warm` seeds the Newton multistart.
pub fn solve_mode_state(
    d12: f64,
    d13: f64,
    gfm_mode: GfmMode,
    gfl_mode: GflMode,
    net: &ReducedNetwork,
    p: &SystemParams,
    sat: Option<SatInjection>,
    warm: Option<&AlgebraicState>,
) -> Result<AlgebraicState, AlgebraicError> {
    solve_mode_state_inner(d12, d13, gfm_mode, gfl_mode, net, p, sat, warm, None)
}

/// Convenience wrapper taking a combination number.
pub fn solve_combination(
    d12: f64,
    d13: f64,
    n: Combination,
    net: &ReducedNetwork,
    p: &SystemParams,
    sat: Option<SatInjection>,
    warm: Option<&AlgebraicState>,
) -> Result<AlgebraicState, AlgebraicError> {
    solve_mode_state(d12, d13, n.gfm_mode(), n.gfl_mode(), net, p, sat, warm)
}

/// Minimum GFM terminal current demand over the GFL-self-consistent NC
/// solutions at this point; +inf when none exists. While the GFM is
/// saturated this is the desaturation indicator: NC is feasible again once
/// the demand drops to the current limit.
pub fn shadow_nc_demand(d12: f64, d13: f64, net: &ReducedNetwork, p: &SystemParams) -> f64 {
    shadow_nc_scan(d12, d13, net, p).0
}

/// Demand plus the GFM-frame current angle of the minimizing NC solution
/// (used to seed the hold-angle saturated injection).
fn shadow_nc_scan(
    d12: f64,
    d13: f64,
    net: &ReducedNetwork,
    p: &SystemParams,
) -> (f64, Option<f64>) {
    let mut demand = f64::INFINITY;
    let mut angle = None;
    for gfl_mode in [GflMode::Lvrt, GflMode::Nc, GflMode::Hvrt] {
        let Ok(s) = solve_mode_state_inner(d12, d13, GfmMode::Nc, gfl_mode, net, p, None, None, None)
        else {
            continue;
        };
        if gfl_mode_of(s.u_fl, &p.gfl) != gfl_mode {
            continue;
        }
        let i2 = s.i_gfm.norm();
        if i2 < demand {
            demand = i2;
            angle = Some(s.i_gfm.arg() - d12);
        }
    }
    (demand, angle)
}

/// Derive the frozen saturated injection for an NC→CS transition at this
/// point, per the configured angle policy.
pub fn derive_sat_injection(d12: f64, d13: f64, net: &ReducedNetwork, p: &SystemParams) -> SatInjection {
    let phi_sa = match p.gfm.phi_sa_policy {
        SatAnglePolicy::Fixed => p.gfm.phi_sa,
        SatAnglePolicy::Hold => shadow_nc_scan(d12, d13, net, p).1.unwrap_or(p.gfm.phi_sa),
    };
    SatInjection {
        i_sa: p.gfm.i_sa,
        phi_sa,
    }
}

/// Find the self-consistent control combination at (δ12, δ13).
///
/// NC pairings are tried first; a pairing is accepted when the GFL voltage
/// lands in its own mode window and, for NC, the GFM current demand stays
/// within the limit. CS pairings are only eligible when no NC pairing is
/// consistent, using `sat` if supplied (an ongoing saturated dwell) or an
/// injection derived from the local overdemand otherwise. Ties go to `prev`
/// (hysteresis), then to the lowest combination number.
pub fn classify_combination(
    d12: f64,
    d13: f64,
    net: &ReducedNetwork,
    p: &SystemParams,
    sat: Option<SatInjection>,
    prev: Option<Combination>,
) -> Result<ClassifyOutcome, AlgebraicError> {
    let mut consistent: Vec<(Combination, AlgebraicState)> = Vec::new();
    let mut reports: Vec<CombinationReport> = Vec::with_capacity(6);
    let mut min_demand = f64::INFINITY;
    let mut min_demand_angle: Option<f64> = None;

    for gfl_mode in [GflMode::Lvrt, GflMode::Nc, GflMode::Hvrt] {
        let n = Combination::of_modes(GfmMode::Nc, gfl_mode);
        match solve_mode_state_inner(d12, d13, GfmMode::Nc, gfl_mode, net, p, None, None, None) {
            Ok(s) => {
                let gfl_ok = gfl_mode_of(s.u_fl, &p.gfl) == gfl_mode;
                let demand = s.i_fm_proxy;
                if gfl_ok && demand < min_demand {
                    min_demand = demand;
                    min_demand_angle = Some(s.i_gfm.arg() - d12);
                }
                let gfm_ok = demand <= p.gfm.i_max;
                reports.push(CombinationReport {
                    n: n.index(),
                    solved: true,
                    self_consistent: gfl_ok && gfm_ok,
                    detail: format!(
                        "u_fl={:.6} (window match: {gfl_ok}), current demand={:.6} vs limit {:.6}",
                        s.u_fl, demand, p.gfm.i_max
                    ),
                });
                if gfl_ok && gfm_ok {
                    consistent.push((n, s));
                }
            }
            Err(e) => reports.push(CombinationReport {
                n: n.index(),
                solved: false,
                self_consistent: false,
                detail: e.to_string(),
            }),
        }
    }

    let mut sat_used = None;
    if consistent.is_empty() {
        let sat_inj = sat.unwrap_or_else(|| {
            let phi_sa = match p.gfm.phi_sa_policy {
                SatAnglePolicy::Fixed => p.gfm.phi_sa,
                SatAnglePolicy::Hold => min_demand_angle.unwrap_or(p.gfm.phi_sa),
            };
            SatInjection {
                i_sa: p.gfm.i_sa,
                phi_sa,
            }
        });
        sat_used = Some(sat_inj);
        for gfl_mode in [GflMode::Lvrt, GflMode::Nc, GflMode::Hvrt] {
            let n = Combination::of_modes(GfmMode::Cs, gfl_mode);
            match solve_mode_state_inner(
                d12,
                d13,
                GfmMode::Cs,
                gfl_mode,
                net,
                p,
                Some(sat_inj),
                None,
                Some(min_demand),
            ) {
                Ok(s) => {
                    let gfl_ok = gfl_mode_of(s.u_fl, &p.gfl) == gfl_mode;
                    reports.push(CombinationReport {
                        n: n.index(),
                        solved: true,
                        self_consistent: gfl_ok,
                        detail: format!(
                            "u_fl={:.6} (window match: {gfl_ok}), shadow demand={:.6}",
                            s.u_fl, min_demand
                        ),
                    });
                    if gfl_ok {
                        consistent.push((n, s));
                    }
                }
                Err(e) => reports.push(CombinationReport {
                    n: n.index(),
                    solved: false,
                    self_consistent: false,
                    detail: e.to_string(),
                }),
            }
        }
    } else {
        for gfl_mode in [GflMode::Lvrt, GflMode::Nc, GflMode::Hvrt] {
            reports.push(CombinationReport {
                n: Combination::of_modes(GfmMode::Cs, gfl_mode).index(),
                solved: false,
                self_consistent: false,
                detail: "not attempted: an NC pairing is consistent".to_string(),
            });
        }
    }

    if consistent.is_empty() {
        return Err(AlgebraicError::NoCombination { d12, d13, reports });
    }
    let multiplicity = consistent.len() as u8;
    let all: Vec<Combination> = consistent.iter().map(|(n, _)| *n).collect();
    let pick = prev
        .and_then(|pn| consistent.iter().position(|(n, _)| *n == pn))
        .unwrap_or(0);
    let (n, state) = consistent.swap_remove(pick);
    Ok(ClassifyOutcome {
        n,
        state,
        multiplicity,
        consistent: all,
        sat_used: if n.gfm_mode() == GfmMode::Cs { sat_used } else { None },
    })
}

/// Sensitivities of the solved state with respect to the two angles, via
/// the implicit-function theorem on the active residual system.
pub fn implicit_partials(
    state: &AlgebraicState,
    net: &ReducedNetwork,
    p: &SystemParams,
) -> Result<Partials, AlgebraicError> {
    let d12 = state.delta12;
    let d13 = state.delta13;
    let gfm_mode = state.n.gfm_mode();
    let gfl_mode = state.n.gfl_mode();
    let e_j12 = C::from_polar(1.0, d12);
    let e_mj13 = C::from_polar(1.0, -d13);
    let x3 = C::from_polar(state.i_fl, d13 + state.phi_fl);
    let jc = C::new(0.0, 1.0);

    // Explicit angle derivatives of the third-bus voltage phasor and, in
    // NC, of the droop coefficient, all at frozen unknowns.
    let (du3_dd_expl, du_fm_dd_expl, chain) = match gfm_mode {
        GfmMode::Nc => {
            let m = &net.m_nc;
            let x2 = C::from_polar(state.u_fm, d12);
            let (du_fm_dd, a) = if p.gfm.k_q == 0.0 {
                ([0.0, 0.0], 0.0)
            } else {
                let denom = -m[1][1].im;
                let w = m[1][0] * C::new(net.u_sys, 0.0) + m[1][2] * x3;
                let a = ((e_j12 * w.conj()).im + 1.0 / p.gfm.k_q) / denom;
                let da_d12 = (jc * e_j12 * w.conj()).im / denom;
                let da_d13 = (e_j12 * (m[1][2] * jc * x3).conj()).im / denom;
                let scale = -state.u_fm / (2.0 * state.u_fm + a);
                ([scale * da_d12, scale * da_d13], a)
            };
            let du3_d12 = m[2][1] * (e_j12 * du_fm_dd[0] + jc * x2);
            let du3_d13 = m[2][1] * e_j12 * du_fm_dd[1] + m[2][2] * jc * x3;
            ([du3_d12, du3_d13], du_fm_dd, Some(a))
        }
        GfmMode::Cs => {
            let m = &net.m_cs;
            let sat = state.sat.expect("CS state carries its frozen injection");
            let x2 = C::from_polar(sat.i_sa, d12 + sat.phi_sa);
            let du3_d12 = m[2][1] * jc * x2;
            let du3_d13 = m[2][2] * jc * x3;
            ([du3_d12, du3_d13], [0.0, 0.0], None)
        }
    };

    // Implicit chain through the ride-through unknowns, when present.
    let (dz_dd, du3_dz, du_fm_dz) = match gfl_mode {
        GflMode::Nc => ([[0.0; 2]; 2], [C::new(0.0, 0.0); 2], [0.0; 2]),
        _ => {
            let problem = RtProblem {
                net,
                p,
                d12,
                d13,
                gfm_mode,
                gfl_mode,
                sat: state.sat,
            };
            let eval = problem.eval([state.i_fl, state.phi_fl])?;
            if norm_inf2(eval.r) > STATE_RESIDUAL_BOUND {
                return Err(AlgebraicError::SingularJacobian);
            }
            // ∂r/∂δ_k at frozen z: the residual depends on the angles only
            // through U_FL.
            let du_fl_dd = [
                (state.u_pcc_gfl.conj() * du3_dd_expl[0]).re / state.u_fl.max(1e-300),
                (state.u_pcc_gfl.conj() * du3_dd_expl[1]).re / state.u_fl.max(1e-300),
            ];
            let mut dz = [[0.0; 2]; 2];
            for k in 0..2 {
                let rhs = [
                    eval.inj_slope[0] * du_fl_dd[k],
                    eval.inj_slope[1] * du_fl_dd[k],
                ];
                let col = solve_2x2(eval.jac, rhs).ok_or(AlgebraicError::SingularJacobian)?;
                dz[0][k] = col[0];
                dz[1][k] = col[1];
            }
            let dx3_di = C::from_polar(1.0, d13 + state.phi_fl);
            let dx3_dphi = jc * x3;
            let du3_dz = match gfm_mode {
                GfmMode::Nc => {
                    let m = &net.m_nc;
                    [
                        m[2][1] * e_j12 * eval.du_fm_dz[0] + m[2][2] * dx3_di,
                        m[2][1] * e_j12 * eval.du_fm_dz[1] + m[2][2] * dx3_dphi,
                    ]
                }
                GfmMode::Cs => {
                    let m = &net.m_cs;
                    [m[2][2] * dx3_di, m[2][2] * dx3_dphi]
                }
            };
            (dz, du3_dz, eval.du_fm_dz)
        }
    };

    let di_fl = [dz_dd[0][0], dz_dd[0][1]];
    let dphi_fl = [dz_dd[1][0], dz_dd[1][1]];

    // Totals: explicit part plus the chain through (I_FL, φ_FL).
    let mut du_q = [0.0; 2];
    for k in 0..2 {
        let mut du3_total = du3_dd_expl[k] + du3_dz[0] * dz_dd[0][k] + du3_dz[1] * dz_dd[1][k];
        if k == 1 {
            du3_total -= jc * state.u_pcc_gfl;
        }
        du_q[k] = (du3_total * e_mj13).im;
    }

    let du_fm = match gfm_mode {
        GfmMode::Nc => {
            let _ = chain;
            Some([
                du_fm_dd_expl[0] + du_fm_dz[0] * dz_dd[0][0] + du_fm_dz[1] * dz_dd[1][0],
                du_fm_dd_expl[1] + du_fm_dz[0] * dz_dd[0][1] + du_fm_dz[1] * dz_dd[1][1],
            ])
        }
        GfmMode::Cs => None,
    };

    Ok(Partials {
        du_fm,
        di_fl,
        dphi_fl,
        du_q,
    })
}

/// Rectangular sweep grid over the angle plane.
#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    pub d12_min: f64,
    pub d12_max: f64,
    pub d13_min: f64,
    pub d13_max: f64,
    pub n12: usize,
    pub n13: usize,
}

impl GridSpec {
    /// Square grid over [−π, π]² at the given per-axis resolution.
    pub fn square(n: usize) -> GridSpec {
        GridSpec {
            d12_min: -PI,
            d12_max: PI,
            d13_min: -PI,
            d13_max: PI,
            n12: n,
            n13: n,
        }
    }

    pub fn d12_at(&self, i: usize) -> f64 {
        if self.n12 <= 1 {
            return self.d12_min;
        }
        self.d12_min + (self.d12_max - self.d12_min) * i as f64 / (self.n12 - 1) as f64
    }

    pub fn d13_at(&self, j: usize) -> f64 {
        if self.n13 <= 1 {
            return self.d13_min;
        }
        self.d13_min + (self.d13_max - self.d13_min) * j as f64 / (self.n13 - 1) as f64
    }

    pub fn cells(&self) -> usize {
        self.n12 * self.n13
    }

    /// Row-major index with δ13 varying fastest.
    pub fn idx(&self, i12: usize, j13: usize) -> usize {
        i12 * self.n13 + j13
    }
}

/// Consistent-combination map over an angle grid. Cell value 0 marks a
/// point with no self-consistent combination.
#[derive(Debug, Clone)]
pub struct RegionMap {
    pub grid: GridSpec,
    pub n: Vec<u8>,
    pub multiplicity: Vec<u8>,
    pub p_fm: Vec<f64>,
    pub u_q: Vec<f64>,
    /// Straight segments (δ12a, δ13a, δ12b, δ13b) separating cells of
    /// different combination, for rendering.
    pub boundary_segments: Vec<[f64; 4]>,
}

/// Sweep the grid, classifying every cell independently (no hysteresis
/// between cells, so the map is a pure function of the scenario).
pub fn compute_region_map(grid: GridSpec, net: &ReducedNetwork, p: &SystemParams) -> RegionMap {
    struct Cell {
        n: u8,
        mult: u8,
        p_fm: f64,
        u_q: f64,
    }
    let cells: Vec<Cell> = map_cells(grid.cells(), |idx| {
        let i12 = idx / grid.n13;
        let j13 = idx % grid.n13;
        let d12 = grid.d12_at(i12);
        let d13 = grid.d13_at(j13);
        match classify_combination(d12, d13, net, p, None, None) {
            Ok(out) => Cell {
                n: out.n.index(),
                mult: out.multiplicity,
                p_fm: out.state.p_fm,
                u_q: out.state.u_fl_q,
            },
            Err(_) => Cell {
                n: 0,
                mult: 0,
                p_fm: f64::NAN,
                u_q: f64::NAN,
            },
        }
    });
    let n: Vec<u8> = cells.iter().map(|c| c.n).collect();
    let multiplicity: Vec<u8> = cells.iter().map(|c| c.mult).collect();
    let p_fm: Vec<f64> = cells.iter().map(|c| c.p_fm).collect();
    let u_q: Vec<f64> = cells.iter().map(|c| c.u_q).collect();

    let mut boundary_segments = Vec::new();
    let half12 = if grid.n12 > 1 {
        0.5 * (grid.d12_max - grid.d12_min) / (grid.n12 - 1) as f64
    } else {
        0.0
    };
    let half13 = if grid.n13 > 1 {
        0.5 * (grid.d13_max - grid.d13_min) / (grid.n13 - 1) as f64
    } else {
        0.0
    };
    for i in 0..grid.n12 {
        for jj in 0..grid.n13 {
            let here = n[grid.idx(i, jj)];
            if i + 1 < grid.n12 && n[grid.idx(i + 1, jj)] != here {
                let xm = 0.5 * (grid.d12_at(i) + grid.d12_at(i + 1));
                let y = grid.d13_at(jj);
                boundary_segments.push([xm, y - half13, xm, y + half13]);
            }
            if jj + 1 < grid.n13 && n[grid.idx(i, jj + 1)] != here {
                let ym = 0.5 * (grid.d13_at(jj) + grid.d13_at(jj + 1));
                let x = grid.d12_at(i);
                boundary_segments.push([x - half12, ym, x + half12, ym]);
            }
        }
    }
    RegionMap {
        grid,
        n,
        multiplicity,
        p_fm,
        u_q,
        boundary_segments,
    }
}

// Re-exported for modules that need the raw bus indices alongside solves.
pub use crate::network::{GFL as BUS_GFL, GFM as BUS_GFM, GRID as BUS_GRID};

const _: () = {
    // The canonical ordering is load-bearing for every partition formula.
    assert!(GRID == 0 && GFM == 1 && GFL == 2);
};
