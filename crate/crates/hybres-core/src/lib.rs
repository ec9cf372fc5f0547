//! Reduced-order phasor model of a three-machine hybrid power system:
//! a stiff AC grid, a grid-forming (GFM) converter with Q–V droop and a
//! virtual swing loop, and a grid-following (GFL) converter with a PI-PLL
//! and voltage ride-through injection laws.
//!
//! The toolkit models multi-mode control switching (GFM normal-control vs
//! current-saturation, GFL LVRT/normal/HVRT), solves the mode-consistent
//! quasi-static network equations at any angle pair (δ12, δ13), integrates
//! the switched swing/PLL dynamics through fault schedules with exact event
//! localization, and computes the analytical artifacts used for transient
//! stability assessment: control-region maps, equilibrium (SEP/UEP) sets,
//! two-dimensional damping-coefficient fields, energy ledgers, and a
//! dominant-instability classifier.
//!
//! Grid sweeps run data-parallel by default (crate feature `parallel`,
//! backed by rayon); disabling the feature falls back to sequential loops
//! with identical results.

pub mod algebraic;
pub mod analysis;
pub mod devices;
pub mod dynamics;
pub mod network;
pub mod par;

#[cfg(test)]
pub(crate) mod testkit;

pub use num_complex::Complex64;
