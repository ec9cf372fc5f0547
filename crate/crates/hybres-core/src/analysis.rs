//! Stability-analysis artifacts built on the algebraic and dynamic layers:
//! operating-point resolution, potential forces, equilibrium (SEP/UEP)
//! contour sets, damping-coefficient fields, the dominant-instability
//! classifier, the cross-damping sign criterion, and trajectory energy
//! decomposition.

use crate::algebraic::{
    classify_combination, compute_region_map, implicit_partials, solve_combination,
    solve_mode_state, AlgebraicError, AlgebraicState, GridSpec, Partials, RegionMap,
};
use crate::devices::{Combination, GflMode, GfmMode, SatInjection, SystemParams};
use crate::dynamics::{Sample, Trajectory};
use crate::network::ReducedNetwork;
use std::f64::consts::{FRAC_PI_2, PI};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Algebraic(#[from] AlgebraicError),
    #[error("no stable equilibrium found: {detail}")]
    SepAbsent { detail: String },
    #[error("operating-point fixed point did not converge: {detail}")]
    FixedPoint { detail: String },
    #[error(
        "ambiguous instability at t={t:.6}: both bands entered (d_fm={dist_fm:.4}, d_fl={dist_fl:.4})"
    )]
    Ambiguous { t: f64, dist_fm: f64, dist_fl: f64 },
    #[error("instability verdict undetermined: {detail}")]
    Undetermined { detail: String },
    #[error("grid too coarse: need at least 3 points per axis")]
    GridTooCoarse,
}

/// Restoring-force pair at a point under a fixed combination:
/// F_FM_p = P_FM − P_ref and F_FL_p = −K_i·u_q, the potential terms of the
/// swing and PLL force balances.
pub fn potential_forces(
    d12: f64,
    d13: f64,
    n: Combination,
    net: &ReducedNetwork,
    p: &SystemParams,
    sat: Option<SatInjection>,
) -> Result<(f64, f64), AlgebraicError> {
    let s = solve_combination(d12, d13, n, net, p, sat, None)?;
    Ok(forces_of(&s, p))
}

fn forces_of(s: &AlgebraicState, p: &SystemParams) -> (f64, f64) {
    (s.p_fm - p.gfm.p_ref, -p.gfl.k_i_pll * s.u_fl_q)
}

/// Cross- and self-damping coefficients of the PLL loop at a solved point:
/// D_FL_12 = −K_p·∂u_q/∂δ12 and D_FL_13 = −K_p·∂u_q/∂δ13, so that
/// du_q/dt = −(D_12·ω12 + D_13·ω13)/K_p along any trajectory.
pub fn damping_coefficients(
    _state: &AlgebraicState,
    partials: &Partials,
    p: &SystemParams,
) -> (f64, f64) {
    (
        -p.gfl.k_p_pll * partials.du_q[0],
        -p.gfl.k_p_pll * partials.du_q[1],
    )
}

/// Sign criterion for the GFM's influence on GFL damping: with
/// v = ω12·ω13, returns +1 when sgn(v)·D_FL_12 > 0 (GFM motion feeds
/// energy out of the PLL loop), −1 when < 0, and 0 on the boundary.
pub fn damping_sign_flag(omega12: f64, omega13: f64, d_fl_12: f64) -> i8 {
    let v = omega12 * omega13;
    if !v.is_finite() || !d_fl_12.is_finite() || v == 0.0 || d_fl_12 == 0.0 {
        return 0;
    }
    if (v > 0.0) == (d_fl_12 > 0.0) {
        1
    } else {
        -1
    }
}

/// Residual of the NC+NC equilibrium conditions at a point.
fn sep_residual(
    d12: f64,
    d13: f64,
    net: &ReducedNetwork,
    p: &SystemParams,
) -> Result<[f64; 2], AlgebraicError> {
    let s = solve_mode_state(d12, d13, GfmMode::Nc, GflMode::Nc, net, p, None, None)?;
    Ok([s.p_fm - p.gfm.p_ref, s.u_fl_q])
}

/// Polish an equilibrium seed with a finite-difference Newton iteration on
/// (P_FM − P_ref, u_q) under the NC+NC combination.
fn polish_sep_nc(
    seed: (f64, f64),
    net: &ReducedNetwork,
    p: &SystemParams,
) -> Option<(f64, f64)> {
    let (mut a, mut b) = seed;
    for _ in 0..60 {
        let r = sep_residual(a, b, net, p).ok()?;
        if r[0].abs().max(r[1].abs()) < 1e-13 {
            return Some((a, b));
        }
        let h = 1e-7;
        let ra = sep_residual(a + h, b, net, p).ok()?;
        let rb = sep_residual(a, b + h, net, p).ok()?;
        let j = [
            [(ra[0] - r[0]) / h, (rb[0] - r[0]) / h],
            [(ra[1] - r[1]) / h, (rb[1] - r[1]) / h],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-14 {
            return None;
        }
        let da = (r[0] * j[1][1] - r[1] * j[0][1]) / det;
        let db = (j[0][0] * r[1] - j[1][0] * r[0]) / det;
        a -= da;
        b -= db;
        if !a.is_finite() || !b.is_finite() {
            return None;
        }
    }
    let r = sep_residual(a, b, net, p).ok()?;
    (r[0].abs().max(r[1].abs()) < 1e-10).then_some((a, b))
}

/// Stability sign tests at an NC+NC equilibrium: ∂P_FM/∂δ12 > 0 and
/// ∂u_q/∂δ13 < 0, by central differences.
fn sep_signs_ok(d12: f64, d13: f64, net: &ReducedNetwork, p: &SystemParams) -> bool {
    let h = 1e-5;
    let f = |a: f64, b: f64| sep_residual(a, b, net, p);
    match (f(d12 + h, d13), f(d12 - h, d13), f(d12, d13 + h), f(d12, d13 - h)) {
        (Ok(px), Ok(mx), Ok(py), Ok(my)) => {
            let dp_d12 = (px[0] - mx[0]) / (2.0 * h);
            let duq_d13 = (py[1] - my[1]) / (2.0 * h);
            dp_d12 > 0.0 && duq_d13 < 0.0
        }
        _ => false,
    }
}

/// Locate the stable NC+NC equilibrium of a network by a coarse scan over
/// the angle torus followed by Newton polishing and stability sign checks.
pub fn find_sep1(net: &ReducedNetwork, p: &SystemParams) -> Result<(f64, f64), AnalysisError> {
    let n_scan = 121usize;
    let mut candidates: Vec<(f64, f64, f64)> = Vec::new();
    for i in 0..n_scan {
        let d12 = -PI + 2.0 * PI * i as f64 / (n_scan - 1) as f64;
        for j in 0..n_scan {
            let d13 = -PI + 2.0 * PI * j as f64 / (n_scan - 1) as f64;
            if let Ok(r) = sep_residual(d12, d13, net, p) {
                candidates.push((r[0] * r[0] + r[1] * r[1], d12, d13));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
    for &(_, a, b) in candidates.iter().take(40) {
        if let Some((x, y)) = polish_sep_nc((a, b), net, p) {
            if sep_signs_ok(x, y, net, p) {
                return Ok((x, y));
            }
        }
    }
    Err(AnalysisError::SepAbsent {
        detail: "coarse scan plus Newton polish found no stable NC+NC equilibrium".into(),
    })
}

/// Inputs for resolving the derived operating quantities from dispatch
/// references and limit ratios.
#[derive(Debug, Clone)]
pub struct ResolveSpec {
    /// GFL active/reactive dispatch used to size the nominal injection.
    pub p_ref_fl: f64,
    pub q_ref_fl: f64,
    /// Current limits as multiples of the nominal loadings.
    pub i_max_ratio_fl: f64,
    pub i_max_ratio_fm: f64,
    /// Ride-through angle ramp gains; when absent they are sized so the
    /// clamp angle (∓π/2) is reached at voltage 0 (LVRT) and at twice the
    /// high threshold (HVRT).
    pub k_phi_lvrt: Option<f64>,
    pub k_phi_hvrt: Option<f64>,
    /// Saturated injection magnitude; defaults to the GFM current limit.
    pub i_sa: Option<f64>,
}

/// Resolved operating point: completed parameter set plus the pre-fault
/// equilibrium it was anchored to.
#[derive(Debug, Clone)]
pub struct ResolvedOperatingPoint {
    pub params: SystemParams,
    pub sep1: (f64, f64),
    pub u_fl_sep: f64,
    pub i_fm_0: f64,
}

/// Complete a parameter set whose GFL nominal injection and both current
/// limits are derived from dispatch at the stable pre-fault equilibrium.
/// The nominal current magnitude and the equilibrium voltage are coupled,
/// so they are resolved by a fixed-point iteration: I_0 = S_FL/U_FL(SEP1)
/// with φ_0 = −atan2(Q, P) held constant.
pub fn resolve_operating_point(
    net_pre: &ReducedNetwork,
    base: &SystemParams,
    spec: &ResolveSpec,
) -> Result<ResolvedOperatingPoint, AnalysisError> {
    let s_mag = (spec.p_ref_fl * spec.p_ref_fl + spec.q_ref_fl * spec.q_ref_fl).sqrt();
    let phi_0 = -spec.q_ref_fl.atan2(spec.p_ref_fl);
    let mut params = base.clone();
    params.gfl.p_ref = spec.p_ref_fl;
    params.gfl.q_ref = spec.q_ref_fl;
    params.gfl.phi_0 = phi_0;
    params.gfl.i_0 = s_mag;
    let mut sep = (0.0, 0.0);
    let mut u_sep = 1.0;
    let mut converged = false;
    for _ in 0..80 {
        sep = find_sep1(net_pre, &params)?;
        let s = solve_mode_state(
            sep.0,
            sep.1,
            GfmMode::Nc,
            GflMode::Nc,
            net_pre,
            &params,
            None,
            None,
        )
        .map_err(AnalysisError::Algebraic)?;
        u_sep = s.u_fl;
        let i_new = s_mag / u_sep;
        let delta = (i_new - params.gfl.i_0).abs();
        params.gfl.i_0 = i_new;
        if delta < 1e-12 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(AnalysisError::FixedPoint {
            detail: format!("nominal current did not settle (last U_FL = {u_sep:.6})"),
        });
    }
    let s = solve_mode_state(
        sep.0,
        sep.1,
        GfmMode::Nc,
        GflMode::Nc,
        net_pre,
        &params,
        None,
        None,
    )
    .map_err(AnalysisError::Algebraic)?;
    let i_fm_0 = s.i_gfm.norm();
    params.gfl.i_max = spec.i_max_ratio_fl * params.gfl.i_0;
    params.gfm.i_max = spec.i_max_ratio_fm * i_fm_0;
    params.gfl.k_phi_lvrt = spec
        .k_phi_lvrt
        .unwrap_or((phi_0 + FRAC_PI_2) / params.gfl.u_lv);
    params.gfl.k_phi_hvrt = spec
        .k_phi_hvrt
        .unwrap_or((FRAC_PI_2 - phi_0) / params.gfl.u_hv);
    params.gfm.i_sa = spec.i_sa.unwrap_or(params.gfm.i_max);
    params
        .validate()
        .map_err(|e| AnalysisError::FixedPoint {
            detail: format!("resolved parameters invalid: {e}"),
        })?;
    Ok(ResolvedOperatingPoint {
        params,
        sep1: sep,
        u_fl_sep: u_sep,
        i_fm_0,
    })
}

/// Equilibrium contour sets over the angle plane. Segments are straight
/// pieces (δ12a, δ13a, δ12b, δ13b) of the polished zero contours,
/// partitioned by the stability sign tests and, for the GFM family, by the
/// GFM control mode on the contour.
#[derive(Debug, Clone, Default)]
pub struct EquilibriumSets {
    /// P_FM = P_ref, ∂P/∂δ12 > 0, GFM in normal control.
    pub gamma_fm_sep1: Vec<[f64; 4]>,
    /// P_FM = P_ref, ∂P/∂δ12 > 0, GFM in current saturation.
    pub gamma_fm_sep2: Vec<[f64; 4]>,
    /// P_FM = P_ref, ∂P/∂δ12 < 0 (either mode).
    pub gamma_fm_uep: Vec<[f64; 4]>,
    /// u_q = 0, ∂u_q/∂δ13 < 0.
    pub gamma_fl_sep: Vec<[f64; 4]>,
    /// u_q = 0, ∂u_q/∂δ13 > 0.
    pub gamma_fl_uep: Vec<[f64; 4]>,
    /// Intersection of the NC GFM-SEP branch with the GFL-SEP branch.
    pub sep1: Option<(f64, f64)>,
    /// Intersection of the CS-induced GFM-SEP branch with the GFL-SEP branch.
    pub sep2: Option<(f64, f64)>,
    pub diagnostics: Vec<String>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Field {
    FmPower,
    FlVoltageQ,
}

/// Classified field value at a point (pure, no hysteresis), as used by the
/// region map.
fn field_at(
    d12: f64,
    d13: f64,
    field: Field,
    net: &ReducedNetwork,
    p: &SystemParams,
) -> Option<(f64, Combination, Option<SatInjection>)> {
    let out = classify_combination(d12, d13, net, p, None, None).ok()?;
    let v = match field {
        Field::FmPower => out.state.p_fm - p.gfm.p_ref,
        Field::FlVoltageQ => out.state.u_fl_q,
    };
    Some((v, out.n, out.sat_used))
}

/// Bisect a zero of the classified field along the straight edge a→b.
/// Returns the polished point only when the residual actually vanishes
/// (sign flips at combination jumps are discarded here).
fn polish_edge_zero(
    a: (f64, f64),
    fa: f64,
    b: (f64, f64),
    fb: f64,
    field: Field,
    net: &ReducedNetwork,
    p: &SystemParams,
) -> Option<(f64, f64)> {
    if fa == 0.0 {
        return Some(a);
    }
    if fb == 0.0 {
        return Some(b);
    }
    if fa * fb > 0.0 {
        return None;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut f_last = fb;
    for _ in 0..80 {
        let m = 0.5 * (lo + hi);
        let pt = (a.0 + m * (b.0 - a.0), a.1 + m * (b.1 - a.1));
        let (fm, _, _) = field_at(pt.0, pt.1, field, net, p)?;
        if fm == 0.0 || (hi - lo) < 1e-15 {
            f_last = fm;
            lo = m;
            hi = m;
            break;
        }
        if (fm > 0.0) == (fa > 0.0) {
            lo = m;
        } else {
            hi = m;
            f_last = fm;
        }
    }
    let m = 0.5 * (lo + hi);
    let pt = (a.0 + m * (b.0 - a.0), a.1 + m * (b.1 - a.1));
    (f_last.abs() < 1e-6).then_some(pt)
}

/// Stability-partition data for one contour segment.
struct SegmentAttr {
    seg: [f64; 4],
    gfm_mode: GfmMode,
    stable_branch: bool,
}

/// Frozen-combination central difference of the partition derivative.
fn branch_signature(
    pt: (f64, f64),
    field: Field,
    net: &ReducedNetwork,
    p: &SystemParams,
) -> Option<(GfmMode, bool)> {
    let out = classify_combination(pt.0, pt.1, net, p, None, None).ok()?;
    let n = out.n;
    let sat = out.sat_used;
    let h = 1e-5;
    let eval = |a: f64, b: f64| -> Option<f64> {
        let s = solve_combination(a, b, n, net, p, sat, Some(&out.state)).ok()?;
        Some(match field {
            Field::FmPower => s.p_fm - p.gfm.p_ref,
            Field::FlVoltageQ => s.u_fl_q,
        })
    };
    let (dplus, dminus) = match field {
        Field::FmPower => (eval(pt.0 + h, pt.1)?, eval(pt.0 - h, pt.1)?),
        Field::FlVoltageQ => (eval(pt.0, pt.1 + h)?, eval(pt.0, pt.1 - h)?),
    };
    let slope = (dplus - dminus) / (2.0 * h);
    let stable = match field {
        Field::FmPower => slope > 0.0,
        Field::FlVoltageQ => slope < 0.0,
    };
    Some((n.gfm_mode(), stable))
}

fn extract_contour(
    map: &RegionMap,
    field: Field,
    net: &ReducedNetwork,
    p: &SystemParams,
) -> Vec<SegmentAttr> {
    let g = &map.grid;
    let vals = match field {
        Field::FmPower => map
            .p_fm
            .iter()
            .map(|v| v - p.gfm.p_ref)
            .collect::<Vec<f64>>(),
        Field::FlVoltageQ => map.u_q.clone(),
    };
    let node = |i: usize, j: usize| (g.d12_at(i), g.d13_at(j));
    // Crossing points per horizontal (i,j)-(i+1,j) and vertical
    // (i,j)-(i,j+1) edge; None = no crossing or polish failed.
    let mut hcross: Vec<Option<(f64, f64)>> = vec![None; g.n12 * g.n13];
    let mut vcross: Vec<Option<(f64, f64)>> = vec![None; g.n12 * g.n13];
    for i in 0..g.n12 {
        for j in 0..g.n13 {
            let fa = vals[g.idx(i, j)];
            if !fa.is_finite() {
                continue;
            }
            if i + 1 < g.n12 {
                let fb = vals[g.idx(i + 1, j)];
                if fb.is_finite() && fa * fb <= 0.0 && (fa != 0.0 || fb != 0.0) {
                    hcross[g.idx(i, j)] =
                        polish_edge_zero(node(i, j), fa, node(i + 1, j), fb, field, net, p);
                }
            }
            if j + 1 < g.n13 {
                let fb = vals[g.idx(i, j + 1)];
                if fb.is_finite() && fa * fb <= 0.0 && (fa != 0.0 || fb != 0.0) {
                    vcross[g.idx(i, j)] =
                        polish_edge_zero(node(i, j), fa, node(i, j + 1), fb, field, net, p);
                }
            }
        }
    }
    let mut out = Vec::new();
    for i in 0..g.n12.saturating_sub(1) {
        for j in 0..g.n13.saturating_sub(1) {
            // Cell edges: bottom (i,j)-(i+1,j), top (i,j+1)-(i+1,j+1),
            // left (i,j)-(i,j+1), right (i+1,j)-(i+1,j+1).
            let pts: Vec<(f64, f64)> = [
                hcross[g.idx(i, j)],
                hcross[g.idx(i, j + 1)],
                vcross[g.idx(i, j)],
                vcross[g.idx(i + 1, j)],
            ]
            .into_iter()
            .flatten()
            .collect();
            let mut push = |a: (f64, f64), b: (f64, f64)| {
                let mid = (0.5 * (a.0 + b.0), 0.5 * (a.1 + b.1));
                if let Some((mode, stable)) = branch_signature(mid, field, net, p) {
                    out.push(SegmentAttr {
                        seg: [a.0, a.1, b.0, b.1],
                        gfm_mode: mode,
                        stable_branch: stable,
                    });
                }
            };
            match pts.len() {
                2 => push(pts[0], pts[1]),
                4 => {
                    // Saddle cell: pair crossings by proximity, which keeps
                    // the two segments disjoint.
                    let d01 = (pts[0].0 - pts[1].0).hypot(pts[0].1 - pts[1].1);
                    let d02 = (pts[0].0 - pts[2].0).hypot(pts[0].1 - pts[2].1);
                    if d01 <= d02 {
                        push(pts[0], pts[1]);
                        push(pts[2], pts[3]);
                    } else {
                        push(pts[0], pts[2]);
                        push(pts[1], pts[3]);
                    }
                }
                _ => {}
            }
        }
    }
    out
}

fn seg_intersection(s: &[f64; 4], t: &[f64; 4]) -> Option<(f64, f64)> {
    let (x1, y1, x2, y2) = (s[0], s[1], s[2], s[3]);
    let (x3, y3, x4, y4) = (t[0], t[1], t[2], t[3]);
    let den = (x2 - x1) * (y4 - y3) - (y2 - y1) * (x4 - x3);
    if den.abs() < 1e-15 {
        return None;
    }
    let ua = ((x3 - x1) * (y4 - y3) - (y3 - y1) * (x4 - x3)) / den;
    let ub = ((x3 - x1) * (y2 - y1) - (y3 - y1) * (x2 - x1)) / den;
    let pad = 0.25;
    if !(-pad..=1.0 + pad).contains(&ua) || !(-pad..=1.0 + pad).contains(&ub) {
        return None;
    }
    Some((x1 + ua * (x2 - x1), y1 + ua * (y2 - y1)))
}

/// Newton-polish a contour-intersection seed on the classified residual
/// pair, requiring the classification to stay on the expected GFM mode.
fn polish_intersection(
    seed: (f64, f64),
    want_mode: GfmMode,
    net: &ReducedNetwork,
    p: &SystemParams,
) -> Option<(f64, f64)> {
    let f = |a: f64, b: f64| -> Option<[f64; 2]> {
        let out = classify_combination(a, b, net, p, None, None).ok()?;
        (out.n.gfm_mode() == want_mode)
            .then(|| [out.state.p_fm - p.gfm.p_ref, out.state.u_fl_q])
    };
    let (mut a, mut b) = seed;
    for _ in 0..50 {
        let r = f(a, b)?;
        if r[0].abs().max(r[1].abs()) < 1e-10 {
            return Some((a, b));
        }
        let h = 1e-7;
        let ra = f(a + h, b)?;
        let rb = f(a, b + h)?;
        let j = [
            [(ra[0] - r[0]) / h, (rb[0] - r[0]) / h],
            [(ra[1] - r[1]) / h, (rb[1] - r[1]) / h],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-14 {
            return None;
        }
        a -= (r[0] * j[1][1] - r[1] * j[0][1]) / det;
        b -= (j[0][0] * r[1] - j[1][0] * r[0]) / det;
        if !a.is_finite() || !b.is_finite() {
            return None;
        }
    }
    None
}

fn find_branch_intersection(
    fm_branch: &[[f64; 4]],
    fl_branch: &[[f64; 4]],
    want_mode: GfmMode,
    net: &ReducedNetwork,
    p: &SystemParams,
) -> Option<(f64, f64)> {
    for s in fm_branch {
        for t in fl_branch {
            if let Some(seed) = seg_intersection(s, t) {
                if let Some(pt) = polish_intersection(seed, want_mode, net, p) {
                    return Some(pt);
                }
            }
        }
    }
    None
}

/// Extract the equilibrium sets of a network stage over an angle grid:
/// polished zero contours of the GFM power mismatch and the PLL error
/// voltage, partitioned into SEP/UEP branches, with the SEP1/SEP2
/// intersection points.
pub fn equilibrium_sets(
    grid: GridSpec,
    net: &ReducedNetwork,
    p: &SystemParams,
) -> Result<EquilibriumSets, AnalysisError> {
    if grid.n12 < 3 || grid.n13 < 3 {
        return Err(AnalysisError::GridTooCoarse);
    }
    let map = compute_region_map(grid, net, p);
    let fm = extract_contour(&map, Field::FmPower, net, p);
    let fl = extract_contour(&map, Field::FlVoltageQ, net, p);

    let mut sets = EquilibriumSets::default();
    for s in fm {
        match (s.stable_branch, s.gfm_mode) {
            (true, GfmMode::Nc) => sets.gamma_fm_sep1.push(s.seg),
            (true, GfmMode::Cs) => sets.gamma_fm_sep2.push(s.seg),
            (false, _) => sets.gamma_fm_uep.push(s.seg),
        }
    }
    for s in fl {
        if s.stable_branch {
            sets.gamma_fl_sep.push(s.seg);
        } else {
            sets.gamma_fl_uep.push(s.seg);
        }
    }

    sets.sep1 = find_branch_intersection(&sets.gamma_fm_sep1, &sets.gamma_fl_sep, GfmMode::Nc, net, p);
    sets.sep2 = find_branch_intersection(&sets.gamma_fm_sep2, &sets.gamma_fl_sep, GfmMode::Cs, net, p);
    if sets.sep1.is_none() {
        sets.diagnostics
            .push("no NC-branch stable equilibrium intersection on this grid".into());
    }
    if sets.sep2.is_none() {
        sets.diagnostics
            .push("no CS-branch stable equilibrium intersection on this grid".into());
    }
    Ok(sets)
}

/// Linear-interpolation zero-contour segments of an arbitrary cell field,
/// restricted to edges whose endpoints share the same region id (contours
/// across combination jumps would be artifacts).
pub fn zero_contour_segments(grid: &GridSpec, values: &[f64], region: &[u8]) -> Vec<[f64; 4]> {
    let mut hcross: Vec<Option<(f64, f64)>> = vec![None; grid.n12 * grid.n13];
    let mut vcross: Vec<Option<(f64, f64)>> = vec![None; grid.n12 * grid.n13];
    let cross = |fa: f64, fb: f64| -> Option<f64> {
        if !fa.is_finite() || !fb.is_finite() || fa * fb > 0.0 || (fa == 0.0 && fb == 0.0) {
            return None;
        }
        Some(if fa == fb { 0.5 } else { fa / (fa - fb) })
    };
    for i in 0..grid.n12 {
        for j in 0..grid.n13 {
            let a = grid.idx(i, j);
            if i + 1 < grid.n12 {
                let b = grid.idx(i + 1, j);
                if region[a] == region[b] {
                    if let Some(s) = cross(values[a], values[b]) {
                        let x = grid.d12_at(i) + s * (grid.d12_at(i + 1) - grid.d12_at(i));
                        hcross[a] = Some((x, grid.d13_at(j)));
                    }
                }
            }
            if j + 1 < grid.n13 {
                let b = grid.idx(i, j + 1);
                if region[a] == region[b] {
                    if let Some(s) = cross(values[a], values[b]) {
                        let y = grid.d13_at(j) + s * (grid.d13_at(j + 1) - grid.d13_at(j));
                        vcross[a] = Some((grid.d12_at(i), y));
                    }
                }
            }
        }
    }
    let mut out = Vec::new();
    for i in 0..grid.n12.saturating_sub(1) {
        for j in 0..grid.n13.saturating_sub(1) {
            let pts: Vec<(f64, f64)> = [
                hcross[grid.idx(i, j)],
                hcross[grid.idx(i, j + 1)],
                vcross[grid.idx(i, j)],
                vcross[grid.idx(i + 1, j)],
            ]
            .into_iter()
            .flatten()
            .collect();
            match pts.len() {
                2 => out.push([pts[0].0, pts[0].1, pts[1].0, pts[1].1]),
                4 => {
                    out.push([pts[0].0, pts[0].1, pts[2].0, pts[2].1]);
                    out.push([pts[1].0, pts[1].1, pts[3].0, pts[3].1]);
                }
                _ => {}
            }
        }
    }
    out
}

/// Damping-coefficient field over an angle grid, with the braking-region
/// masks of the two potential forces.
#[derive(Debug, Clone)]
pub struct DampingField {
    pub grid: GridSpec,
    /// Classified combination per cell (0 = unsolved).
    pub n: Vec<u8>,
    pub d_fl_12: Vec<f64>,
    pub d_fl_13: Vec<f64>,
    /// F_FM_p > 0 per cell.
    pub mask_fm_brake: Vec<bool>,
    /// F_FL_p > 0 per cell.
    pub mask_fl_brake: Vec<bool>,
}

/// Sweep the damping coefficients over the grid (parallel, order-preserving).
pub fn compute_damping_field(
    grid: GridSpec,
    net: &ReducedNetwork,
    p: &SystemParams,
) -> DampingField {
    struct Cell {
        n: u8,
        d12: f64,
        d13: f64,
        fm_brake: bool,
        fl_brake: bool,
    }
    let cells: Vec<Cell> = crate::par::map_cells(grid.cells(), |idx| {
        let i12 = idx / grid.n13;
        let j13 = idx % grid.n13;
        let d12 = grid.d12_at(i12);
        let d13 = grid.d13_at(j13);
        let nan = Cell {
            n: 0,
            d12: f64::NAN,
            d13: f64::NAN,
            fm_brake: false,
            fl_brake: false,
        };
        match classify_combination(d12, d13, net, p, None, None) {
            Ok(out) => match implicit_partials(&out.state, net, p) {
                Ok(pr) => {
                    let (c12, c13) = damping_coefficients(&out.state, &pr, p);
                    let (f_fm, f_fl) = forces_of(&out.state, p);
                    Cell {
                        n: out.n.index(),
                        d12: c12,
                        d13: c13,
                        fm_brake: f_fm > 0.0,
                        fl_brake: f_fl > 0.0,
                    }
                }
                Err(_) => Cell {
                    n: out.n.index(),
                    ..nan
                },
            },
            Err(_) => nan,
        }
    });
    DampingField {
        grid,
        n: cells.iter().map(|c| c.n).collect(),
        d_fl_12: cells.iter().map(|c| c.d12).collect(),
        d_fl_13: cells.iter().map(|c| c.d13).collect(),
        mask_fm_brake: cells.iter().map(|c| c.fm_brake).collect(),
        mask_fl_brake: cells.iter().map(|c| c.fl_brake).collect(),
    }
}

/// Verdict of the dominant-instability walk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InstabilityFlag {
    /// The operating point first escaped through the GFM equilibrium band.
    Gfm { t: f64 },
    /// The operating point first escaped through the GFL equilibrium band.
    Gfl { t: f64 },
    Stable,
}

#[derive(Debug, Clone, Copy)]
pub struct InstabilityOptions {
    /// Band half-width for UEP-set proximity.
    pub eps_band: f64,
    /// Capture-ball radius around SEP1 for the stable verdict.
    pub capture_radius: f64,
    /// Kinetic-energy bound over the trailing tenth of the window.
    pub ek_tail_bound: f64,
}

impl Default for InstabilityOptions {
    fn default() -> Self {
        InstabilityOptions {
            eps_band: 0.02,
            capture_radius: 0.05,
            ek_tail_bound: 1e-4,
        }
    }
}

fn wrap_angle(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

fn point_segment_dist(px: f64, py: f64, s: &[f64; 4]) -> f64 {
    let (ax, ay, bx, by) = (s[0], s[1], s[2], s[3]);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

/// Uniform spatial hash over [−π, π]² for fast segment-proximity queries.
struct SegmentIndex<'a> {
    segments: &'a [[f64; 4]],
    buckets: Vec<Vec<u32>>,
    nb: usize,
    cell: f64,
}

impl<'a> SegmentIndex<'a> {
    fn build(segments: &'a [[f64; 4]], eps: f64) -> Self {
        let cell = (4.0 * eps).max(0.1);
        let nb = ((2.0 * PI) / cell).ceil() as usize + 1;
        let mut buckets = vec![Vec::new(); nb * nb];
        let clampb = |v: f64| -> usize {
            (((v + PI) / cell).floor().max(0.0) as usize).min(nb - 1)
        };
        for (k, s) in segments.iter().enumerate() {
            let (i0, i1) = (
                clampb(s[0].min(s[2]) - eps),
                clampb(s[0].max(s[2]) + eps),
            );
            let (j0, j1) = (
                clampb(s[1].min(s[3]) - eps),
                clampb(s[1].max(s[3]) + eps),
            );
            for i in i0..=i1 {
                for j in j0..=j1 {
                    buckets[i * nb + j].push(k as u32);
                }
            }
        }
        SegmentIndex {
            segments,
            buckets,
            nb,
            cell,
        }
    }

    /// Distance from the wrapped point to the nearest segment, or +inf if
    /// nothing lies in the surrounding buckets.
    fn distance(&self, px: f64, py: f64) -> f64 {
        if self.segments.is_empty() {
            return f64::INFINITY;
        }
        let mut best = f64::INFINITY;
        // Check the wrapped point plus torus copies shifted by ±2π.
        for sx in [-1.0, 0.0, 1.0] {
            for sy in [-1.0, 0.0, 1.0] {
                let (qx, qy) = (px + sx * 2.0 * PI, py + sy * 2.0 * PI);
                if !(-PI - self.cell..=PI + self.cell).contains(&qx)
                    || !(-PI - self.cell..=PI + self.cell).contains(&qy)
                {
                    continue;
                }
                let bi = (((qx + PI) / self.cell).floor().max(0.0) as usize).min(self.nb - 1);
                let bj = (((qy + PI) / self.cell).floor().max(0.0) as usize).min(self.nb - 1);
                for di in bi.saturating_sub(1)..=(bi + 1).min(self.nb - 1) {
                    for dj in bj.saturating_sub(1)..=(bj + 1).min(self.nb - 1) {
                        for &k in &self.buckets[di * self.nb + dj] {
                            let d = point_segment_dist(qx, qy, &self.segments[k as usize]);
                            if d < best {
                                best = d;
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

/// Walk a trajectory window against the post-disturbance equilibrium sets
/// and decide which machine first escapes through its UEP band moving
/// outward with its potential force no longer braking.
pub fn dominant_instability(
    samples: &[Sample],
    sets: &EquilibriumSets,
    p: &SystemParams,
    opts: &InstabilityOptions,
) -> Result<InstabilityFlag, AnalysisError> {
    if samples.is_empty() {
        return Err(AnalysisError::Undetermined {
            detail: "empty trajectory window".into(),
        });
    }
    let sep1 = sets.sep1.ok_or_else(|| AnalysisError::Undetermined {
        detail: "equilibrium sets carry no SEP1 reference".into(),
    })?;
    let fm_index = SegmentIndex::build(&sets.gamma_fm_uep, opts.eps_band);
    let fl_index = SegmentIndex::build(&sets.gamma_fl_uep, opts.eps_band);

    for s in samples {
        let (w12, w13) = (wrap_angle(s.delta12()), wrap_angle(s.delta13()));
        let dist_fm = fm_index.distance(w12, w13);
        let dist_fl = fl_index.distance(w12, w13);
        let dev12 = wrap_angle(s.delta12() - sep1.0);
        let dev13 = wrap_angle(s.delta13() - sep1.1);
        let fm_hit = dist_fm < opts.eps_band
            && s.f_fm_p(p) <= 0.0
            && s.omega12() * dev12.signum() > 0.0;
        let fl_hit = dist_fl < opts.eps_band
            && s.f_fl_p(p) <= 0.0
            && s.d13_dot * dev13.signum() > 0.0;
        match (fm_hit, fl_hit) {
            (true, true) => {
                return Err(AnalysisError::Ambiguous {
                    t: s.t,
                    dist_fm,
                    dist_fl,
                })
            }
            (true, false) => return Ok(InstabilityFlag::Gfm { t: s.t }),
            (false, true) => return Ok(InstabilityFlag::Gfl { t: s.t }),
            (false, false) => {}
        }
    }

    let last = samples.last().unwrap();
    let end_dev = wrap_angle(last.delta12() - sep1.0)
        .hypot(wrap_angle(last.delta13() - sep1.1));
    let tail_from = samples.len() - (samples.len() / 10).max(1);
    let ek_max = samples[tail_from..]
        .iter()
        .map(|s| {
            0.5 * p.gfm.j_fm * s.omega12() * s.omega12() + 0.5 * s.d13_dot * s.d13_dot
        })
        .fold(0.0, f64::max);
    if end_dev < opts.capture_radius && ek_max < opts.ek_tail_bound {
        Ok(InstabilityFlag::Stable)
    } else {
        Err(AnalysisError::Undetermined {
            detail: format!(
                "no band entry; endpoint deviation {end_dev:.4} rad, tail kinetic energy {ek_max:.3e}"
            ),
        })
    }
}

/// Per-device energy series sampled at the trajectory sample times.
#[derive(Debug, Clone)]
pub struct EnergySeries {
    pub e_k: Vec<f64>,
    pub e_p: Vec<f64>,
    pub e_d: Vec<f64>,
    /// Running balance defect (E_k − E_k(0)) − (E_p + E_d).
    pub residual: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EnergyLedger {
    pub t: Vec<f64>,
    pub gfm: EnergySeries,
    pub gfl: EnergySeries,
}

impl EnergyLedger {
    pub fn max_abs_residual(&self) -> f64 {
        self.gfm
            .residual
            .iter()
            .chain(self.gfl.residual.iter())
            .fold(0.0, |m, r| m.max(r.abs()))
    }
}

/// Integration node: a sample or one side of an event.
#[derive(Clone, Copy)]
struct Node {
    t: f64,
    p_fm: f64,
    u_q: f64,
    omega12: f64,
    omega13: f64,
    /// Index into the sample arrays when this node closes a sample time.
    sample_idx: Option<usize>,
}

/// Decompose the trajectory into kinetic, potential-work and dissipation
/// series per device. Potential and dissipation terms are line integrals
/// accumulated trapezoidally along the path, split exactly at events; the
/// PLL dissipation integral is taken in u_q (∫K_p·ω13 du_q), which handles
/// the u_q jumps at mode switches exactly.
pub fn energy_decompose(traj: &Trajectory, p: &SystemParams) -> EnergyLedger {
    let samples = &traj.samples;
    let mut nodes: Vec<Node> = Vec::with_capacity(samples.len() + 2 * traj.events.len());
    let mut ev = 0usize;
    for (i, s) in samples.iter().enumerate() {
        // Events strictly inside (t_{i-1}, t_i] come before the sample node.
        while ev < traj.events.len() && i > 0 && traj.events[ev].t <= s.t {
            let e = &traj.events[ev];
            let o13_pre = p.gfl.k_p_pll * e.alg_pre.u_fl_q + e.y[3];
            let o13_post = p.gfl.k_p_pll * e.alg_post.u_fl_q + e.y[3];
            nodes.push(Node {
                t: e.t,
                p_fm: e.alg_pre.p_fm,
                u_q: e.alg_pre.u_fl_q,
                omega12: e.y[1],
                omega13: o13_pre,
                sample_idx: None,
            });
            nodes.push(Node {
                t: e.t,
                p_fm: e.alg_post.p_fm,
                u_q: e.alg_post.u_fl_q,
                omega12: e.y[1],
                omega13: o13_post,
                sample_idx: None,
            });
            ev += 1;
        }
        nodes.push(Node {
            t: s.t,
            p_fm: s.p_fm,
            u_q: s.u_fl_q,
            omega12: s.omega12(),
            omega13: s.d13_dot,
            sample_idx: Some(i),
        });
    }

    let nsamp = samples.len();
    let mut gfm = EnergySeries {
        e_k: vec![0.0; nsamp],
        e_p: vec![0.0; nsamp],
        e_d: vec![0.0; nsamp],
        residual: vec![0.0; nsamp],
    };
    let mut gfl = EnergySeries {
        e_k: vec![0.0; nsamp],
        e_p: vec![0.0; nsamp],
        e_d: vec![0.0; nsamp],
        residual: vec![0.0; nsamp],
    };
    let mut acc_fm_p = 0.0;
    let mut acc_fm_d = 0.0;
    let mut acc_fl_p = 0.0;
    let mut acc_fl_d = 0.0;
    let mut prev: Option<Node> = None;
    let mut ek0 = (0.0, 0.0);
    for node in &nodes {
        if let Some(a) = prev {
            let b = node;
            let dt = b.t - a.t;
            // Time-trapezoids vanish across zero-width event splits.
            acc_fm_p += 0.5
                * dt
                * ((p.gfm.p_ref - a.p_fm) * a.omega12 + (p.gfm.p_ref - b.p_fm) * b.omega12);
            acc_fm_d += 0.5
                * dt
                * (-p.gfm.d_fm * a.omega12 * a.omega12 - p.gfm.d_fm * b.omega12 * b.omega12);
            acc_fl_p += 0.5
                * dt
                * (p.gfl.k_i_pll * a.u_q * a.omega13 + p.gfl.k_i_pll * b.u_q * b.omega13);
            // Stieltjes trapezoid in u_q: exact across u_q jumps because
            // dω13 = K_p·du_q pointwise (x_PLL is continuous).
            acc_fl_d += 0.5 * p.gfl.k_p_pll * (a.omega13 + b.omega13) * (b.u_q - a.u_q);
        }
        if let Some(i) = node.sample_idx {
            let ek_fm = 0.5 * p.gfm.j_fm * node.omega12 * node.omega12;
            let ek_fl = 0.5 * node.omega13 * node.omega13;
            if i == 0 {
                ek0 = (ek_fm, ek_fl);
            }
            gfm.e_k[i] = ek_fm;
            gfm.e_p[i] = acc_fm_p;
            gfm.e_d[i] = acc_fm_d;
            gfm.residual[i] = (ek_fm - ek0.0) - (acc_fm_p + acc_fm_d);
            gfl.e_k[i] = ek_fl;
            gfl.e_p[i] = acc_fl_p;
            gfl.e_d[i] = acc_fl_d;
            gfl.residual[i] = (ek_fl - ek0.1) - (acc_fl_p + acc_fl_d);
        }
        prev = Some(*node);
    }
    EnergyLedger {
        t: samples.iter().map(|s| s.t).collect(),
        gfm,
        gfl,
    }
}
