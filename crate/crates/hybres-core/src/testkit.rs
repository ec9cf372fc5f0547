//! Shared test fixtures: the three-machine star benchmark network and its
//! resolved operating parameters. Numeric anchors were cross-checked
//! against an independent prototype implementation of the same model.

use crate::devices::{GflParams, GfmParams, SatAnglePolicy, SystemParams};
use crate::network::{
    BaseQuantities, Branch, Bus, BusKind, FaultStage, NetworkModel, ReducedNetwork, Stage, C,
};

/// Three active buses on a passive hub bus, metallic-ish fault at the hub.
pub(crate) fn star_model() -> NetworkModel {
    NetworkModel {
        buses: vec![
            Bus {
                id: 1,
                kind: BusKind::Grid,
            },
            Bus {
                id: 2,
                kind: BusKind::Gfm,
            },
            Bus {
                id: 3,
                kind: BusKind::Gfl,
            },
            Bus {
                id: 4,
                kind: BusKind::Passive,
            },
        ],
        branches: vec![
            Branch {
                from: 1,
                to: 4,
                z: C::new(0.02, 0.093),
            },
            Branch {
                from: 2,
                to: 4,
                z: C::new(0.007, 0.055),
            },
            Branch {
                from: 3,
                to: 4,
                z: C::new(0.01, 0.065),
            },
        ],
        shunts: vec![],
        base: BaseQuantities {
            s_base_mva: 100.0,
            v_base_kv: 230.0,
            f_base_hz: 50.0,
        },
        u_sys: 1.0,
    }
}

pub(crate) fn fault_spec() -> FaultStage {
    FaultStage {
        stage: Stage::Fault,
        bus: 4,
        resistance_ohm: 1.0,
        t_start: 0.0,
        t_clear: 1.2,
    }
}

/// Benchmark parameter set with the derived operating quantities resolved
/// to six decimals (nominal injection from the dispatch at the stable
/// equilibrium, limits as ratios of nominal, ramp gains reaching the
/// clamp angle at the window edges).
pub(crate) fn params() -> SystemParams {
    SystemParams {
        gfm: GfmParams {
            p_ref: 1.68,
            q_ref: 0.21,
            u_fm0: 1.01,
            j_fm: 0.5,
            d_fm: 1.0,
            k_q: 0.5,
            i_max: 2.409801,
            i_sa: 2.409801,
            phi_sa_policy: SatAnglePolicy::Hold,
            phi_sa: 0.0,
        },
        gfl: GflParams {
            p_ref: 1.39,
            q_ref: 0.27,
            i_0: 1.334768,
            phi_0: -0.191855,
            i_max: 1.601722,
            k_i_lvrt: 0.50,
            k_phi_lvrt: 1.532157,
            k_i_hvrt: 2.46,
            k_phi_hvrt: 1.602410,
            u_lv: 0.9,
            u_hv: 1.1,
            k_p_pll: 10.0,
            k_i_pll: 100.0,
        },
    }
}

pub(crate) struct TestSystem {
    pub pre: ReducedNetwork,
    pub fault: ReducedNetwork,
    pub params: SystemParams,
    /// Stable equilibrium angles of the pre-fault system.
    pub sep1: (f64, f64),
}

pub(crate) fn system() -> TestSystem {
    let model = star_model();
    let spec = fault_spec();
    let pre = ReducedNetwork::build(&model, &spec.at_stage(Stage::Prefault)).unwrap();
    let fault = ReducedNetwork::build(&model, &spec.at_stage(Stage::Fault)).unwrap();
    TestSystem {
        pre,
        fault,
        params: params(),
        sep1: (0.357762, 0.353316),
    }
}
