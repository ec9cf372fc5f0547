//! The six subcommands. Each one consumes a resolved scenario, runs one
//! core operation, and emits its CSV artifacts (fixed column orders), the
//! optional SVG rendering, and the run manifest.

use anyhow::Result;
use std::fmt;
use std::path::Path;

use hybres_core::algebraic::{compute_region_map, GridSpec};
use hybres_core::analysis::{
    compute_damping_field, dominant_instability, energy_decompose, equilibrium_sets,
    zero_contour_segments, AnalysisError, EquilibriumSets, InstabilityFlag, InstabilityOptions,
};
use hybres_core::dynamics::{integrate, SimOptions, Trajectory};
use hybres_core::network::{Mat3, ReducedNetwork, Stage};

use crate::artifacts::{int, num, Csv, Emitter, RunManifest};
use crate::scenario::Resolved;
use crate::svg;

/// Model breakdown: the run produced a machine-readable diagnostic and the
/// process must exit nonzero. Artifacts completed before the breakdown are
/// still on disk.
#[derive(Debug)]
pub struct Breakdown {
    pub error: String,
    pub detail: Vec<String>,
}

impl fmt::Display for Breakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.error)?;
        for d in &self.detail {
            write!(f, "\n  {d}")?;
        }
        Ok(())
    }
}

impl std::error::Error for Breakdown {}

fn grid_of(r: &Resolved) -> GridSpec {
    GridSpec::square(r.scenario.run.grid_n)
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Prefault => "prefault",
        Stage::Fault => "fault",
        Stage::Postfault => "postfault",
    }
}

// ---------------------------------------------------------------------------
// regions
// ---------------------------------------------------------------------------

pub fn regions(r: &Resolved, out: &Path, with_svg: bool) -> Result<RunManifest> {
    let mut em = Emitter::new(out)?;
    let grid = grid_of(r);
    for (stage, net) in [
        (Stage::Prefault, &r.pre),
        (Stage::Fault, &r.fault_net),
        (Stage::Postfault, &r.post),
    ] {
        let name = stage_name(stage);
        let map = compute_region_map(grid, net, &r.params);
        let mut csv = Csv::new(&["delta12", "delta13", "n"]);
        let mut multi = Csv::new(&["delta12", "delta13", "multiplicity"]);
        let mut multi_rows = 0usize;
        for i in 0..grid.n12 {
            for j in 0..grid.n13 {
                let idx = grid.idx(i, j);
                csv.row(&[
                    num(grid.d12_at(i)),
                    num(grid.d13_at(j)),
                    int(map.n[idx] as i64),
                ]);
                if map.multiplicity[idx] > 1 {
                    multi.row(&[
                        num(grid.d12_at(i)),
                        num(grid.d13_at(j)),
                        int(map.multiplicity[idx] as i64),
                    ]);
                    multi_rows += 1;
                }
            }
        }
        em.add_csv(&format!("region_{name}.csv"), csv);
        em.add_csv(&format!("region_{name}_multiplicity.csv"), multi);
        em.note(format!(
            "region_{name}: {multi_rows} cells report combination multiplicity > 1"
        ));
        for (mat_name, mat) in [("yr", &net.yr), ("m_nc", &net.m_nc), ("m_cs", &net.m_cs)] {
            em.add_csv(&format!("matrices_{name}_{mat_name}.csv"), matrix_csv(mat));
        }
        if with_svg {
            let mut plane = plane_for(&format!("control combinations — {name} network"), &grid);
            let n = map.n.clone();
            plane.cells(&grid, |idx| svg::REGION_COLORS[n[idx] as usize]);
            plane.segments(&map.boundary_segments, "#222222", 0.6);
            plane.marker(r.sep1.0, r.sep1.1, "SEP1");
            let legend: Vec<(String, String)> = (1..=6)
                .map(|k| {
                    (
                        svg::REGION_COLORS[k].to_string(),
                        format!("n = {k} ({})", combo_label(k as u8)),
                    )
                })
                .collect();
            em.add(
                &format!("region_{name}.svg"),
                plane
                    .finish("delta12 (rad)", "delta13 (rad)", &legend)
                    .into_bytes(),
            );
        }
    }
    em.finish("regions", r)
}

fn combo_label(n: u8) -> &'static str {
    match n {
        1 => "NC+LVRT",
        2 => "NC+NC",
        3 => "NC+HVRT",
        4 => "CS+LVRT",
        5 => "CS+NC",
        6 => "CS+HVRT",
        _ => "none",
    }
}

fn matrix_csv(m: &Mat3) -> Csv {
    let mut csv = Csv::new(&["row", "col", "re", "im"]);
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            csv.row(&[int(i as i64), int(j as i64), num(v.re), num(v.im)]);
        }
    }
    csv
}

fn plane_for(title: &str, grid: &GridSpec) -> svg::Plane {
    svg::Plane::new(title, grid.d12_min, grid.d12_max, grid.d13_min, grid.d13_max)
}

// ---------------------------------------------------------------------------
// equilibria
// ---------------------------------------------------------------------------

const FAMILY_COLORS: [(&str, &str); 5] = [
    ("fm_sep1", "#1b7837"),
    ("fm_sep2", "#5aae61"),
    ("fm_uep", "#d73027"),
    ("fl_sep", "#2166ac"),
    ("fl_uep", "#f46d43"),
];

pub fn equilibria(r: &Resolved, out: &Path, with_svg: bool) -> Result<RunManifest> {
    let mut em = Emitter::new(out)?;
    let grid = grid_of(r);
    let sets = equilibrium_sets(grid, &r.post, &r.params).map_err(analysis_breakdown)?;
    let mut csv = Csv::new(&["family", "d12_a", "d13_a", "d12_b", "d13_b"]);
    for (family, segs) in families(&sets) {
        for s in segs {
            csv.row(&[
                family.to_string(),
                num(s[0]),
                num(s[1]),
                num(s[2]),
                num(s[3]),
            ]);
        }
    }
    em.add_csv("equilibrium_sets.csv", csv);
    let mut pts = Csv::new(&["name", "delta12", "delta13"]);
    if let Some(p) = sets.sep1 {
        pts.row(&["sep1".into(), num(p.0), num(p.1)]);
    }
    if let Some(p) = sets.sep2 {
        pts.row(&["sep2".into(), num(p.0), num(p.1)]);
    }
    em.add_csv("equilibrium_points.csv", pts);
    for d in &sets.diagnostics {
        em.note(format!("equilibria: {d}"));
    }
    if with_svg {
        let map = compute_region_map(grid, &r.post, &r.params);
        let mut plane = plane_for("equilibrium sets — postfault network", &grid);
        let n = map.n.clone();
        plane.cells(&grid, |idx| svg::REGION_COLORS[n[idx] as usize]);
        for (family, segs) in families(&sets) {
            let color = FAMILY_COLORS
                .iter()
                .find(|(f, _)| *f == family)
                .map(|(_, c)| *c)
                .unwrap_or("#000000");
            plane.segments(segs, color, 2.2);
        }
        if let Some(p) = sets.sep1 {
            plane.marker(p.0, p.1, "SEP1");
        }
        if let Some(p) = sets.sep2 {
            plane.marker(p.0, p.1, "SEP2");
        }
        let legend: Vec<(String, String)> = FAMILY_COLORS
            .iter()
            .map(|(f, c)| (c.to_string(), f.to_string()))
            .collect();
        em.add(
            "equilibria.svg",
            plane
                .finish("delta12 (rad)", "delta13 (rad)", &legend)
                .into_bytes(),
        );
    }
    em.finish("equilibria", r)
}

fn families(sets: &EquilibriumSets) -> [(&'static str, &Vec<[f64; 4]>); 5] {
    [
        ("fm_sep1", &sets.gamma_fm_sep1),
        ("fm_sep2", &sets.gamma_fm_sep2),
        ("fm_uep", &sets.gamma_fm_uep),
        ("fl_sep", &sets.gamma_fl_sep),
        ("fl_uep", &sets.gamma_fl_uep),
    ]
}

fn analysis_breakdown(e: AnalysisError) -> anyhow::Error {
    Breakdown {
        error: "analysis failed".into(),
        detail: vec![e.to_string()],
    }
    .into()
}

// ---------------------------------------------------------------------------
// simulate / classify / energy share the trajectory run
// ---------------------------------------------------------------------------

fn run_trajectory(r: &Resolved) -> Result<Trajectory> {
    let opts = SimOptions {
        dt: r.scenario.run.dt,
        t_end: r.scenario.run.t_end,
        ..Default::default()
    };
    let y0 = [r.sep1.0, 0.0, r.sep1.1, 0.0];
    integrate(&r.model, &r.fault, &r.params, y0, &opts).map_err(|e| {
        Breakdown {
            error: "integration failed".into(),
            detail: vec![e.to_string()],
        }
        .into()
    })
}

fn emit_trajectory(em: &mut Emitter, tr: &Trajectory) {
    let mut csv = Csv::new(&[
        "t",
        "delta12",
        "omega12",
        "delta13",
        "d_delta13_dt",
        "n",
        "u_fm",
        "u_fl",
        "u_fl_q",
        "i_fl",
        "phi_fl",
        "p_fm",
        "i_fm_proxy",
        "f_fl_d_12",
        "f_fl_d_13",
    ]);
    for s in &tr.samples {
        csv.row(&[
            num(s.t),
            num(s.delta12()),
            num(s.omega12()),
            num(s.delta13()),
            num(s.d13_dot),
            int(s.n.index() as i64),
            num(s.u_fm),
            num(s.u_fl),
            num(s.u_fl_q),
            num(s.i_fl),
            num(s.phi_fl),
            num(s.p_fm),
            num(s.i_fm_proxy),
            num(s.f_fl_d12),
            num(s.f_fl_d13),
        ]);
    }
    em.add_csv("trajectory.csv", csv);
    let mut ev = Csv::new(&["t", "n_old", "n_new", "condition"]);
    for e in &tr.events {
        ev.row(&[
            num(e.t),
            int(e.n_old.index() as i64),
            int(e.n_new.index() as i64),
            e.condition.to_string(),
        ]);
    }
    em.add_csv("events.csv", ev);
}

/// Post-emission truncation handling shared by the trajectory subcommands:
/// artifacts for the completed steps are already on disk; the run still
/// fails with a machine-readable diagnostic.
fn truncation_breakdown(tr: &Trajectory) -> Option<Breakdown> {
    tr.truncation.as_ref().map(|tr| Breakdown {
        error: "model breakdown truncated the trajectory".into(),
        detail: vec![format!("t = {}: {}", tr.t, tr.reason)],
    })
}

pub fn simulate(r: &Resolved, out: &Path, with_svg: bool) -> Result<RunManifest> {
    let mut em = Emitter::new(out)?;
    let tr = run_trajectory(r)?;
    emit_trajectory(&mut em, &tr);
    if let Some(t) = &tr.truncation {
        em.note(format!("truncated at t = {}: {}", t.t, t.reason));
    }
    if with_svg {
        let panels = vec![
            (
                "delta12 (rad)".to_string(),
                tr.samples.iter().map(|s| (s.t, s.delta12())).collect(),
            ),
            (
                "omega12 (rad/s)".to_string(),
                tr.samples.iter().map(|s| (s.t, s.omega12())).collect(),
            ),
            (
                "delta13 (rad)".to_string(),
                tr.samples.iter().map(|s| (s.t, s.delta13())).collect(),
            ),
            (
                "U_FL (p.u.)".to_string(),
                tr.samples.iter().map(|s| (s.t, s.u_fl)).collect(),
            ),
            (
                "GFM PCC phase (rad)".to_string(),
                tr.samples
                    .iter()
                    .map(|s| (s.t, s.theta_pcc_gfm))
                    .collect(),
            ),
        ];
        em.add(
            "simulate.svg",
            svg::series("switched trajectory", "t (s)", &panels).into_bytes(),
        );
    }
    let breakdown = truncation_breakdown(&tr);
    let manifest = em.finish("simulate", r)?;
    match breakdown {
        Some(b) => Err(b.into()),
        None => Ok(manifest),
    }
}

pub fn classify(r: &Resolved, out: &Path, _with_svg: bool) -> Result<RunManifest> {
    let mut em = Emitter::new(out)?;
    let tr = run_trajectory(r)?;
    if let Some(b) = truncation_breakdown(&tr) {
        // No verdict on a partial window: emit what exists and fail.
        emit_trajectory(&mut em, &tr);
        em.finish("classify", r)?;
        return Err(b.into());
    }
    let grid = grid_of(r);
    let envelope = r.envelope_params();
    let sets = equilibrium_sets(grid, &r.post, &envelope).map_err(analysis_breakdown)?;
    let window_start = r.scenario.fault.as_ref().map(|f| f.t_clear).unwrap_or(0.0);
    let from = tr.sample_at_or_after(window_start);
    let opts = InstabilityOptions {
        eps_band: r.scenario.run.eps_band,
        capture_radius: r.scenario.run.capture_radius,
        ek_tail_bound: r.scenario.run.ek_tail_bound,
    };
    let verdict = dominant_instability(&tr.samples[from..], &sets, &envelope, &opts);
    let (flag, t_band) = match &verdict {
        Ok(InstabilityFlag::Gfm { t }) => ("GFM", Some(*t)),
        Ok(InstabilityFlag::Gfl { t }) => ("GFL", Some(*t)),
        Ok(InstabilityFlag::Stable) => ("stable", None),
        Err(_) => ("none", None),
    };
    let verdict_json = serde_json::json!({
        "flag": flag,
        "band_entry_t": t_band,
        "window_start": window_start,
        "eps_band": opts.eps_band,
        "geometry": "capability-envelope saturation preset (hold at the current limit), postfault network",
        "sep1": sets.sep1.map(|p| vec![p.0, p.1]),
        "sep2": sets.sep2.map(|p| vec![p.0, p.1]),
    });
    let mut text = serde_json::to_string_pretty(&verdict_json).expect("verdict to JSON");
    text.push('\n');
    em.add("verdict.json", text.into_bytes());
    em.note(format!("classify: flag = {flag}"));
    let err = match verdict {
        Err(e) => Some(Breakdown {
            error: "no verdict".into(),
            detail: vec![e.to_string()],
        }),
        Ok(_) => None,
    };
    let manifest = em.finish("classify", r)?;
    match err {
        Some(b) => Err(b.into()),
        None => Ok(manifest),
    }
}

pub fn energy(r: &Resolved, out: &Path, with_svg: bool) -> Result<RunManifest> {
    let mut em = Emitter::new(out)?;
    let tr = run_trajectory(r)?;
    let led = energy_decompose(&tr, &r.params);
    let mut csv = Csv::new(&[
        "t",
        "gfm_e_k",
        "gfm_e_p",
        "gfm_e_d",
        "gfm_residual",
        "gfl_e_k",
        "gfl_e_p",
        "gfl_e_d",
        "gfl_residual",
    ]);
    for (k, &t) in led.t.iter().enumerate() {
        csv.row(&[
            num(t),
            num(led.gfm.e_k[k]),
            num(led.gfm.e_p[k]),
            num(led.gfm.e_d[k]),
            num(led.gfm.residual[k]),
            num(led.gfl.e_k[k]),
            num(led.gfl.e_p[k]),
            num(led.gfl.e_d[k]),
            num(led.gfl.residual[k]),
        ]);
    }
    em.add_csv("energy.csv", csv);
    em.note(format!(
        "energy: max |balance defect| = {}",
        num(led.max_abs_residual())
    ));
    if with_svg {
        let panels = vec![
            (
                "GFM kinetic E_k".to_string(),
                led.t.iter().zip(&led.gfm.e_k).map(|(&t, &v)| (t, v)).collect(),
            ),
            (
                "GFM potential work E_p".to_string(),
                led.t.iter().zip(&led.gfm.e_p).map(|(&t, &v)| (t, v)).collect(),
            ),
            (
                "GFM dissipation E_d".to_string(),
                led.t.iter().zip(&led.gfm.e_d).map(|(&t, &v)| (t, v)).collect(),
            ),
            (
                "GFL kinetic E_k".to_string(),
                led.t.iter().zip(&led.gfl.e_k).map(|(&t, &v)| (t, v)).collect(),
            ),
            (
                "GFL potential work E_p".to_string(),
                led.t.iter().zip(&led.gfl.e_p).map(|(&t, &v)| (t, v)).collect(),
            ),
            (
                "GFL dissipation E_d".to_string(),
                led.t.iter().zip(&led.gfl.e_d).map(|(&t, &v)| (t, v)).collect(),
            ),
        ];
        em.add(
            "energy.svg",
            svg::series("energy ledger", "t (s)", &panels).into_bytes(),
        );
    }
    let breakdown = truncation_breakdown(&tr);
    if let Some(t) = &tr.truncation {
        em.note(format!("truncated at t = {}: {}", t.t, t.reason));
    }
    let manifest = em.finish("energy", r)?;
    match breakdown {
        Some(b) => Err(b.into()),
        None => Ok(manifest),
    }
}

// ---------------------------------------------------------------------------
// damping-map
// ---------------------------------------------------------------------------

pub fn damping_map(r: &Resolved, out: &Path, with_svg: bool) -> Result<RunManifest> {
    let mut em = Emitter::new(out)?;
    let grid = grid_of(r);
    let field = compute_damping_field(grid, &r.post, &r.params);
    let mut csv = Csv::new(&[
        "delta12",
        "delta13",
        "n",
        "d_fl_12",
        "d_fl_13",
        "fm_brake",
        "fl_brake",
    ]);
    for i in 0..grid.n12 {
        for j in 0..grid.n13 {
            let idx = grid.idx(i, j);
            csv.row(&[
                num(grid.d12_at(i)),
                num(grid.d13_at(j)),
                int(field.n[idx] as i64),
                num(field.d_fl_12[idx]),
                num(field.d_fl_13[idx]),
                int(field.mask_fm_brake[idx] as i64),
                int(field.mask_fl_brake[idx] as i64),
            ]);
        }
    }
    em.add_csv("damping_field.csv", csv);
    let mut contours = Csv::new(&["field", "d12_a", "d13_a", "d12_b", "d13_b"]);
    let c12 = zero_contour_segments(&grid, &field.d_fl_12, &field.n);
    let c13 = zero_contour_segments(&grid, &field.d_fl_13, &field.n);
    for s in &c12 {
        contours.row(&[
            "d_fl_12".into(),
            num(s[0]),
            num(s[1]),
            num(s[2]),
            num(s[3]),
        ]);
    }
    for s in &c13 {
        contours.row(&[
            "d_fl_13".into(),
            num(s[0]),
            num(s[1]),
            num(s[2]),
            num(s[3]),
        ]);
    }
    em.add_csv("damping_contours.csv", contours);
    if with_svg {
        for (file, title, values, contour, mask) in [
            (
                "damping_d12.svg",
                "PLL cross-damping coefficient D_FL_12 — postfault network",
                &field.d_fl_12,
                &c12,
                &field.mask_fm_brake,
            ),
            (
                "damping_d13.svg",
                "PLL self-damping coefficient D_FL_13 — postfault network",
                &field.d_fl_13,
                &c13,
                &field.mask_fl_brake,
            ),
        ] {
            let vmax = values
                .iter()
                .filter(|v| v.is_finite())
                .fold(0.0f64, |m, &v| m.max(v.abs()));
            let mut plane = plane_for(title, &grid);
            plane.cells(&grid, |idx| svg::diverging_bin(values[idx], vmax));
            plane.hatch(&grid, |idx| mask[idx]);
            plane.segments(contour, "#000000", 1.6);
            plane.marker(r.sep1.0, r.sep1.1, "SEP1");
            let legend = vec![
                ("#2166ac".to_string(), "negative (destabilizing)".to_string()),
                ("#b2182b".to_string(), "positive (damping)".to_string()),
                ("#ffffff".to_string(), "hatch: braking force".to_string()),
            ];
            em.add(
                file,
                plane
                    .finish("delta12 (rad)", "delta13 (rad)", &legend)
                    .into_bytes(),
            );
        }
    }
    em.finish("damping-map", r)
}

// Keep the reduced networks nameable from this module even though only
// `Resolved` carries them; the import documents the stage convention.
#[allow(unused)]
fn _stage_nets(r: &Resolved) -> [&ReducedNetwork; 3] {
    [&r.pre, &r.fault_net, &r.post]
}
