//! Deterministic artifact emission. Every subcommand funnels its outputs
//! through an [`Emitter`], which buffers file bytes, writes them under the
//! output directory, records SHA-256 content hashes, and finishes with a
//! `manifest.json` naming the tool version, the fully-resolved scenario,
//! the applied defaults, and the hash of every emitted file.
//!
//! Numbers are formatted with Rust's shortest round-trip notation, which is
//! a pure function of the value — identical inputs yield identical bytes.

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::scenario::{Resolved, Scenario};

pub struct Emitter {
    out_dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
    pub diagnostics: Vec<String>,
}

impl Emitter {
    pub fn new(out_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(out_dir)
            .with_context(|| format!("creating output directory {}", out_dir.display()))?;
        Ok(Emitter {
            out_dir: out_dir.to_path_buf(),
            files: Vec::new(),
            diagnostics: Vec::new(),
        })
    }

    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    pub fn add_csv(&mut self, name: &str, csv: Csv) {
        self.add(name, csv.finish().into_bytes());
    }

    pub fn note(&mut self, diag: impl Into<String>) {
        self.diagnostics.push(diag.into());
    }

    /// Write all buffered files plus the manifest; returns the manifest.
    pub fn finish(mut self, subcommand: &str, resolved: &Resolved) -> Result<RunManifest> {
        // The fully-resolved scenario is itself an artifact: feeding it back in
        // must reproduce this run exactly.
        self.add(
            "scenario_resolved.toml",
            resolved.scenario.to_toml().into_bytes(),
        );
        let mut hashes = BTreeMap::new();
        for (name, bytes) in &self.files {
            let mut h = Sha256::new();
            h.update(bytes);
            hashes.insert(name.clone(), format!("{:x}", h.finalize()));
            let path = self.out_dir.join(name);
            std::fs::write(&path, bytes)
                .with_context(|| format!("writing artifact {}", path.display()))?;
        }
        let manifest = RunManifest {
            tool: "hybres".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            scenario: resolved.scenario.clone(),
            defaults_applied: resolved.defaults_applied.clone(),
            operating_point: OperatingPoint {
                sep1_delta12: resolved.sep1.0,
                sep1_delta13: resolved.sep1.1,
                u_fl_sep: resolved.u_fl_sep,
                i_fm_0: resolved.i_fm_0,
                gfl_i_0: resolved.params.gfl.i_0,
                gfl_phi_0: resolved.params.gfl.phi_0,
                gfl_i_max: resolved.params.gfl.i_max,
                gfm_i_max: resolved.params.gfm.i_max,
                gfm_i_sa: resolved.params.gfm.i_sa,
                gfl_k_phi_lvrt: resolved.params.gfl.k_phi_lvrt,
                gfl_k_phi_hvrt: resolved.params.gfl.k_phi_hvrt,
            },
            diagnostics: self.diagnostics.clone(),
            artifacts: hashes,
        };
        let mut text = serde_json::to_string_pretty(&manifest).context("manifest to JSON")?;
        text.push('\n');
        std::fs::write(self.out_dir.join("manifest.json"), text).context("writing manifest")?;
        Ok(manifest)
    }
}

/// Per-run record tying the resolved inputs to the emitted content hashes.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub scenario: Scenario,
    pub defaults_applied: Vec<String>,
    pub operating_point: OperatingPoint,
    pub diagnostics: Vec<String>,
    /// name -> SHA-256 of the emitted bytes.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OperatingPoint {
    pub sep1_delta12: f64,
    pub sep1_delta13: f64,
    pub u_fl_sep: f64,
    pub i_fm_0: f64,
    pub gfl_i_0: f64,
    pub gfl_phi_0: f64,
    pub gfl_i_max: f64,
    pub gfm_i_max: f64,
    pub gfm_i_sa: f64,
    pub gfl_k_phi_lvrt: f64,
    pub gfl_k_phi_hvrt: f64,
}

/// Machine-readable failure report written next to whatever artifacts were
/// completed before the breakdown.
#[derive(Debug, Clone, Serialize)]
pub struct Diagnostic {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub error: String,
    pub detail: Vec<String>,
}

pub fn write_diagnostic(out_dir: &Path, diag: &Diagnostic) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut text = serde_json::to_string_pretty(diag).context("diagnostic to JSON")?;
    text.push('\n');
    std::fs::write(out_dir.join("diagnostic.json"), text).context("writing diagnostic")?;
    Ok(())
}

/// Minimal CSV builder: a fixed header row, then `row()` calls with cells
/// already rendered. All numeric cells go through [`num`]/[`int`] so the
/// byte output is a pure function of the values.
pub struct Csv {
    buf: String,
    columns: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Csv {
        let mut buf = String::new();
        buf.push_str(&header.join(","));
        buf.push('\n');
        Csv {
            buf,
            columns: header.len(),
        }
    }

    pub fn row(&mut self, cells: &[String]) {
        debug_assert_eq!(cells.len(), self.columns, "csv row arity");
        self.buf.push_str(&cells.join(","));
        self.buf.push('\n');
    }

    pub fn finish(self) -> String {
        self.buf
    }
}

pub fn num(v: f64) -> String {
    let mut s = String::new();
    write!(s, "{v}").unwrap();
    s
}

pub fn int(v: i64) -> String {
    format!("{v}")
}
