//! Converter parameter records and the pure control laws: grid-following
//! ride-through current injection, grid-forming reactive droop, saturated
//! current presets, and the six-way control-combination bookkeeping.

use num_complex::Complex64;
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("gfm: virtual inertia must be positive, got {0}")]
    NonPositiveInertia(f64),
    #[error("gfm: damping must be nonnegative, got {0}")]
    NegativeDamping(f64),
    #[error("gfm: current limit must be positive, got {0}")]
    NonPositiveCurrentLimit(f64),
    #[error("gfm: saturated magnitude {i_sa} exceeds current limit {i_max}")]
    SaturatedAboveLimit { i_sa: f64, i_max: f64 },
    #[error("gfl: voltage thresholds must satisfy 0 < u_lv < u_hv, got [{0}, {1}]")]
    BadVoltageWindow(f64, f64),
    #[error("gfl: current limit {i_max} below nominal current {i_0}")]
    LimitBelowNominal { i_max: f64, i_0: f64 },
    #[error("gfl: pll gains must be positive, got kp={0}, ki={1}")]
    NonPositivePllGains(f64, f64),
}

/// How the grid-forming converter picks its frozen current angle when its
/// limiter engages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SatAnglePolicy {
    /// Keep the terminal-current angle observed at the switching instant.
    Hold,
    /// Always use the configured `phi_sa`.
    Fixed,
}

/// Frozen saturated-injection pair, in the GFM's own angle frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SatInjection {
    pub i_sa: f64,
    pub phi_sa: f64,
}

/// Grid-forming converter parameters (all p.u. unless noted).
#[derive(Debug, Clone, Copy)]
pub struct GfmParams {
    pub p_ref: f64,
    pub q_ref: f64,
    /// Voltage setpoint of the reactive droop.
    pub u_fm0: f64,
    /// Virtual inertia of the power-synchronization loop.
    pub j_fm: f64,
    /// Virtual damping of the power-synchronization loop.
    pub d_fm: f64,
    /// Reactive droop gain; 0 disables the droop (constant voltage).
    pub k_q: f64,
    /// Current limit that triggers saturated operation.
    pub i_max: f64,
    /// Magnitude of the frozen saturated current.
    pub i_sa: f64,
    pub phi_sa_policy: SatAnglePolicy,
    /// Angle used when `phi_sa_policy` is `Fixed` (rad, GFM frame), and the
    /// fallback when `Hold` has no observed current to preserve.
    pub phi_sa: f64,
}

impl GfmParams {
    pub fn validate(&self) -> Result<(), DeviceError> {
        if self.j_fm <= 0.0 {
            return Err(DeviceError::NonPositiveInertia(self.j_fm));
        }
        if self.d_fm < 0.0 {
            return Err(DeviceError::NegativeDamping(self.d_fm));
        }
        if self.i_max <= 0.0 {
            return Err(DeviceError::NonPositiveCurrentLimit(self.i_max));
        }
        if self.i_sa > self.i_max {
            return Err(DeviceError::SaturatedAboveLimit {
                i_sa: self.i_sa,
                i_max: self.i_max,
            });
        }
        Ok(())
    }
}

/// Grid-following converter parameters (all p.u. unless noted).
#[derive(Debug, Clone, Copy)]
pub struct GflParams {
    pub p_ref: f64,
    pub q_ref: f64,
    /// Nominal current magnitude injected in normal control.
    pub i_0: f64,
    /// Nominal current angle relative to the PLL d-axis (rad).
    pub phi_0: f64,
    pub i_max: f64,
    /// Low-voltage ride-through current-magnitude gain.
    pub k_i_lvrt: f64,
    /// Low-voltage ride-through current-angle gain.
    pub k_phi_lvrt: f64,
    /// High-voltage ride-through current-magnitude gain.
    pub k_i_hvrt: f64,
    /// High-voltage ride-through current-angle gain.
    pub k_phi_hvrt: f64,
    /// Lower edge of the normal-control voltage window.
    pub u_lv: f64,
    /// Upper edge of the normal-control voltage window.
    pub u_hv: f64,
    pub k_p_pll: f64,
    pub k_i_pll: f64,
}

impl GflParams {
    pub fn validate(&self) -> Result<(), DeviceError> {
        if !(self.u_lv > 0.0 && self.u_lv < self.u_hv) {
            return Err(DeviceError::BadVoltageWindow(self.u_lv, self.u_hv));
        }
        if self.i_max < self.i_0 {
            return Err(DeviceError::LimitBelowNominal {
                i_max: self.i_max,
                i_0: self.i_0,
            });
        }
        if self.k_p_pll <= 0.0 || self.k_i_pll <= 0.0 {
            return Err(DeviceError::NonPositivePllGains(self.k_p_pll, self.k_i_pll));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GfmMode {
    /// Normal control: voltage source behind the reactive droop.
    Nc,
    /// Current saturation: frozen current phasor.
    Cs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GflMode {
    Lvrt,
    Nc,
    Hvrt,
}

/// One of the six mode pairings, numbered 1..=6.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Combination(u8);

impl Combination {
    pub fn new(n: u8) -> Option<Combination> {
        (1..=6).contains(&n).then_some(Combination(n))
    }

    pub fn index(&self) -> u8 {
        self.0
    }

    pub fn gfm_mode(&self) -> GfmMode {
        if self.0 <= 3 {
            GfmMode::Nc
        } else {
            GfmMode::Cs
        }
    }

    pub fn gfl_mode(&self) -> GflMode {
        match (self.0 - 1) % 3 {
            0 => GflMode::Lvrt,
            1 => GflMode::Nc,
            _ => GflMode::Hvrt,
        }
    }

    pub fn of_modes(gfm: GfmMode, gfl: GflMode) -> Combination {
        let base = match gfm {
            GfmMode::Nc => 0,
            GfmMode::Cs => 3,
        };
        let off = match gfl {
            GflMode::Lvrt => 1,
            GflMode::Nc => 2,
            GflMode::Hvrt => 3,
        };
        Combination(base + off)
    }

    pub fn all() -> [Combination; 6] {
        [1, 2, 3, 4, 5, 6].map(Combination)
    }
}

impl std::fmt::Display for Combination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Parameter bundle for the full three-machine system.
#[derive(Debug, Clone, Copy)]
pub struct SystemParams {
    pub gfm: GfmParams,
    pub gfl: GflParams,
}

impl SystemParams {
    pub fn validate(&self) -> Result<(), DeviceError> {
        self.gfm.validate()?;
        self.gfl.validate()
    }
}

/// Voltage-window mode selection. The normal-control window is closed, so
/// both edges belong to NC.
pub fn gfl_mode_of(u_fl: f64, p: &GflParams) -> GflMode {
    if u_fl < p.u_lv {
        GflMode::Lvrt
    } else if u_fl <= p.u_hv {
        GflMode::Nc
    } else {
        GflMode::Hvrt
    }
}

/// Injected current magnitude and PLL-frame angle for the given mode.
/// Ride-through ramps are linear in the voltage deviation and clamped to
/// the current limit and to ±π/2.
pub fn gfl_injection(u_fl: f64, mode: GflMode, p: &GflParams) -> (f64, f64) {
    match mode {
        GflMode::Nc => (p.i_0, p.phi_0),
        GflMode::Lvrt => {
            let i = (p.k_i_lvrt * (p.u_lv - u_fl) + p.i_0).min(p.i_max);
            let phi = (p.k_phi_lvrt * (u_fl - p.u_lv) + p.phi_0).max(-FRAC_PI_2);
            (i, phi)
        }
        GflMode::Hvrt => {
            let i = (p.k_i_hvrt * (u_fl - p.u_hv) + p.i_0).min(p.i_max);
            let phi = (p.k_phi_hvrt * (u_fl - p.u_hv) + p.phi_0).min(FRAC_PI_2);
            (i, phi)
        }
    }
}

/// Injection together with the active-branch derivatives d(i)/dU and
/// d(phi)/dU; a clamped branch has derivative 0. Used by the implicit
/// Jacobians.
pub fn gfl_injection_with_slope(u_fl: f64, mode: GflMode, p: &GflParams) -> (f64, f64, f64, f64) {
    match mode {
        GflMode::Nc => (p.i_0, p.phi_0, 0.0, 0.0),
        GflMode::Lvrt => {
            let i_ramp = p.k_i_lvrt * (p.u_lv - u_fl) + p.i_0;
            let (i, di) = if i_ramp < p.i_max {
                (i_ramp, -p.k_i_lvrt)
            } else {
                (p.i_max, 0.0)
            };
            let phi_ramp = p.k_phi_lvrt * (u_fl - p.u_lv) + p.phi_0;
            let (phi, dphi) = if phi_ramp > -FRAC_PI_2 {
                (phi_ramp, p.k_phi_lvrt)
            } else {
                (-FRAC_PI_2, 0.0)
            };
            (i, phi, di, dphi)
        }
        GflMode::Hvrt => {
            let i_ramp = p.k_i_hvrt * (u_fl - p.u_hv) + p.i_0;
            let (i, di) = if i_ramp < p.i_max {
                (i_ramp, p.k_i_hvrt)
            } else {
                (p.i_max, 0.0)
            };
            let phi_ramp = p.k_phi_hvrt * (u_fl - p.u_hv) + p.phi_0;
            let (phi, dphi) = if phi_ramp < FRAC_PI_2 {
                (phi_ramp, p.k_phi_hvrt)
            } else {
                (FRAC_PI_2, 0.0)
            };
            (i, phi, di, dphi)
        }
    }
}

/// Reactive-droop voltage reference.
pub fn gfm_voltage_ref(q_fm: f64, p: &GfmParams) -> f64 {
    p.k_q * (p.q_ref - q_fm) + p.u_fm0
}

/// Frozen injection chosen when the GFM limiter engages. `entry_current` is
/// the terminal current phasor at the switching instant, expressed in the
/// GFM's own angle frame.
pub fn gfm_saturated_injection(entry_current: Complex64, p: &GfmParams) -> SatInjection {
    let phi_sa = match p.phi_sa_policy {
        SatAnglePolicy::Hold => entry_current.arg(),
        SatAnglePolicy::Fixed => p.phi_sa,
    };
    SatInjection {
        i_sa: p.i_sa,
        phi_sa,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) fn gfl_params() -> GflParams {
        GflParams {
            p_ref: 1.39,
            q_ref: 0.27,
            i_0: 1.3348,
            phi_0: -0.1919,
            i_max: 1.6017,
            k_i_lvrt: 0.50,
            k_phi_lvrt: 1.5322,
            k_i_hvrt: 2.46,
            k_phi_hvrt: 1.6024,
            u_lv: 0.9,
            u_hv: 1.1,
            k_p_pll: 10.0,
            k_i_pll: 100.0,
        }
    }

    pub(crate) fn gfm_params() -> GfmParams {
        GfmParams {
            p_ref: 1.68,
            q_ref: 0.21,
            u_fm0: 1.01,
            j_fm: 0.5,
            d_fm: 1.0,
            k_q: 0.5,
            i_max: 2.4098,
            i_sa: 2.4098,
            phi_sa_policy: SatAnglePolicy::Hold,
            phi_sa: 0.0,
        }
    }

    #[test]
    fn mode_window_edges_belong_to_nc() {
        let p = gfl_params();
        assert_eq!(gfl_mode_of(0.9, &p), GflMode::Nc);
        assert_eq!(gfl_mode_of(1.1, &p), GflMode::Nc);
        assert_eq!(gfl_mode_of(0.8999, &p), GflMode::Lvrt);
        assert_eq!(gfl_mode_of(1.1001, &p), GflMode::Hvrt);
        assert_eq!(gfl_mode_of(1.2, &p), GflMode::Hvrt);
        assert_eq!(gfl_mode_of(0.0, &p), GflMode::Lvrt);
    }

    #[test]
    fn mode_partition_is_exhaustive_and_exclusive() {
        let p = gfl_params();
        let mut u = 0.0;
        while u <= 2.0 {
            let m = gfl_mode_of(u, &p);
            let agree = [
                (u < p.u_lv, GflMode::Lvrt),
                (u >= p.u_lv && u <= p.u_hv, GflMode::Nc),
                (u > p.u_hv, GflMode::Hvrt),
            ];
            let hits: Vec<_> = agree.iter().filter(|(cond, _)| *cond).collect();
            assert_eq!(hits.len(), 1);
            assert_eq!(hits[0].1, m);
            u += 0.001;
        }
    }

    #[test]
    fn normal_control_injection_is_constant() {
        let p = gfl_params();
        for u in [0.9, 1.0, 1.1] {
            let (i, phi) = gfl_injection(u, GflMode::Nc, &p);
            assert_eq!(i, p.i_0);
            assert_eq!(phi, p.phi_0);
        }
    }

    #[test]
    fn deep_sag_saturates_both_clamps() {
        let mut p = gfl_params();
        p.k_i_lvrt = 50.0;
        p.k_phi_lvrt = 50.0;
        let (i, phi) = gfl_injection(0.0, GflMode::Lvrt, &p);
        assert_eq!(i, p.i_max);
        assert_eq!(phi, -FRAC_PI_2);
    }

    #[test]
    fn lvrt_ramp_direct_evaluation() {
        let p = gfl_params();
        let (i, phi) = gfl_injection(0.8, GflMode::Lvrt, &p);
        let i_want = (0.5 * 0.1 + p.i_0).min(p.i_max);
        let phi_want = (p.k_phi_lvrt * (-0.1) + p.phi_0).max(-FRAC_PI_2);
        assert_abs_diff_eq!(i, i_want, epsilon = 1e-15);
        assert_abs_diff_eq!(phi, phi_want, epsilon = 1e-15);
    }

    #[test]
    fn ramps_are_continuous_at_window_edges() {
        let p = gfl_params();
        let (i_l, phi_l) = gfl_injection(p.u_lv, GflMode::Lvrt, &p);
        assert_abs_diff_eq!(i_l, p.i_0, epsilon = 1e-15);
        assert_abs_diff_eq!(phi_l, p.phi_0, epsilon = 1e-15);
        let (i_h, phi_h) = gfl_injection(p.u_hv, GflMode::Hvrt, &p);
        assert_abs_diff_eq!(i_h, p.i_0, epsilon = 1e-15);
        assert_abs_diff_eq!(phi_h, p.phi_0, epsilon = 1e-15);
    }

    #[test]
    fn clamped_outputs_stay_in_bounds() {
        let p = gfl_params();
        let mut u = 0.0;
        while u <= 2.5 {
            let mode = gfl_mode_of(u, &p);
            let (i, phi) = gfl_injection(u, mode, &p);
            assert!(i <= p.i_max + 1e-15);
            assert!((-FRAC_PI_2..=FRAC_PI_2).contains(&phi));
            u += 0.003;
        }
    }

    #[test]
    fn slope_variant_matches_value_and_fd() {
        let p = gfl_params();
        // Voltages where a ramp meets its clamp; FD stencils straddling
        // these are skipped.
        let kinks = [
            p.u_lv - (p.i_max - p.i_0) / p.k_i_lvrt,
            p.u_lv + (-FRAC_PI_2 - p.phi_0) / p.k_phi_lvrt,
            p.u_hv + (p.i_max - p.i_0) / p.k_i_hvrt,
            p.u_hv + (FRAC_PI_2 - p.phi_0) / p.k_phi_hvrt,
        ];
        let h = 1e-7;
        for mode in [GflMode::Lvrt, GflMode::Hvrt] {
            let mut u = 0.05;
            while u < 2.5 {
                let (i, phi, di, dphi) = gfl_injection_with_slope(u, mode, &p);
                let (i0, phi0) = gfl_injection(u, mode, &p);
                assert_eq!(i, i0);
                assert_eq!(phi, phi0);
                if kinks.iter().all(|k| (u - k).abs() > 10.0 * h) {
                    let (ip, pp) = gfl_injection(u + h, mode, &p);
                    let (im, pm) = gfl_injection(u - h, mode, &p);
                    assert_abs_diff_eq!((ip - im) / (2.0 * h), di, epsilon = 1e-6);
                    assert_abs_diff_eq!((pp - pm) / (2.0 * h), dphi, epsilon = 1e-6);
                }
                u += 0.0137;
            }
        }
    }

    #[test]
    fn droop_reference_cases() {
        let p = gfm_params();
        assert_abs_diff_eq!(gfm_voltage_ref(p.q_ref, &p), p.u_fm0, epsilon = 1e-15);
        let mut p0 = p;
        p0.k_q = 0.0;
        assert_abs_diff_eq!(gfm_voltage_ref(5.3, &p0), p.u_fm0, epsilon = 1e-15);
        assert_abs_diff_eq!(gfm_voltage_ref(0.0, &p), 1.115, epsilon = 1e-12);
    }

    #[test]
    fn saturated_injection_policies() {
        let mut p = gfm_params();
        p.i_sa = 1.5;
        p.phi_sa_policy = SatAnglePolicy::Hold;
        let entry = Complex64::from_polar(1.8, -0.3);
        let s = gfm_saturated_injection(entry, &p);
        assert_abs_diff_eq!(s.i_sa, 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.phi_sa, -0.3, epsilon = 1e-12);
        p.phi_sa_policy = SatAnglePolicy::Fixed;
        p.phi_sa = 0.0;
        let s = gfm_saturated_injection(entry, &p);
        assert_eq!(s.phi_sa, 0.0);
    }

    #[test]
    fn combination_bijection_round_trips() {
        let pairs = [
            (1, GfmMode::Nc, GflMode::Lvrt),
            (2, GfmMode::Nc, GflMode::Nc),
            (3, GfmMode::Nc, GflMode::Hvrt),
            (4, GfmMode::Cs, GflMode::Lvrt),
            (5, GfmMode::Cs, GflMode::Nc),
            (6, GfmMode::Cs, GflMode::Hvrt),
        ];
        for (n, gm, gl) in pairs {
            let c = Combination::new(n).unwrap();
            assert_eq!(c.gfm_mode(), gm);
            assert_eq!(c.gfl_mode(), gl);
            assert_eq!(Combination::of_modes(gm, gl), c);
        }
        assert!(Combination::new(0).is_none());
        assert!(Combination::new(7).is_none());
    }

    #[test]
    fn parameter_validation_catches_bad_values() {
        let mut g = gfm_params();
        g.j_fm = 0.0;
        assert!(g.validate().is_err());
        let mut g = gfm_params();
        g.i_sa = g.i_max + 0.1;
        assert!(g.validate().is_err());
        let mut f = gfl_params();
        f.u_lv = 1.2;
        assert!(f.validate().is_err());
        let mut f = gfl_params();
        f.k_p_pll = 0.0;
        assert!(f.validate().is_err());
        assert!(gfm_params().validate().is_ok());
        assert!(gfl_params().validate().is_ok());
    }
}
