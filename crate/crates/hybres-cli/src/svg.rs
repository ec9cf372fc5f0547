//! Minimal deterministic SVG rendering: angle-plane panels (shaded cell
//! grids, contour segments, point markers, hatched masks) and stacked
//! time-series panels. Pure string assembly — output bytes are a function
//! of the data alone. SVG here is best-effort presentation; the CSV
//! artifacts are the contractual outputs.

use hybres_core::algebraic::GridSpec;
use std::fmt::Write as _;

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 600.0;
const MARGIN_L: f64 = 62.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

/// Fill colors for combination indices 0 (no solution) and 1..=6.
pub const REGION_COLORS: [&str; 7] = [
    "#bdbdbd", "#d9ed92", "#76c893", "#34a0a4", "#f9c74f", "#f3722c", "#f94144",
];

/// Diverging palette (negative -> blue, positive -> red), 11 bins.
const DIVERGING: [&str; 11] = [
    "#2166ac", "#4393c3", "#92c5de", "#d1e5f0", "#eef3f7", "#f7f7f7", "#fddbc7", "#f4a582",
    "#d6604d", "#b2182b", "#67001f",
];

pub fn diverging_bin(v: f64, vmax: f64) -> &'static str {
    if !v.is_finite() || vmax <= 0.0 {
        return "#ffffff";
    }
    let t = ((v / vmax).clamp(-1.0, 1.0) + 1.0) / 2.0;
    let k = ((t * 11.0) as usize).min(10);
    DIVERGING[k]
}

fn px(v: f64) -> String {
    format!("{v:.2}")
}

/// One angle-plane panel with a fixed data window.
pub struct Plane {
    body: String,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    title: String,
}

impl Plane {
    pub fn new(title: &str, x0: f64, x1: f64, y0: f64, y1: f64) -> Plane {
        Plane {
            body: String::new(),
            x0,
            x1,
            y0,
            y1,
            title: title.to_string(),
        }
    }

    fn sx(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x0) / (self.x1 - self.x0) * (PLOT_W - MARGIN_L - MARGIN_R)
    }

    fn sy(&self, y: f64) -> f64 {
        // SVG y grows downward; the data window grows upward.
        PLOT_H - MARGIN_B - (y - self.y0) / (self.y1 - self.y0) * (PLOT_H - MARGIN_T - MARGIN_B)
    }

    /// Shade grid cells, merging equal-color runs along the x direction.
    pub fn cells(&mut self, grid: &GridSpec, color_of: impl Fn(usize) -> &'static str) {
        let half12 = 0.5 * (grid.d12_max - grid.d12_min) / (grid.n12 - 1).max(1) as f64;
        let half13 = 0.5 * (grid.d13_max - grid.d13_min) / (grid.n13 - 1).max(1) as f64;
        for j in 0..grid.n13 {
            let mut i = 0;
            while i < grid.n12 {
                let color = color_of(grid.idx(i, j));
                let mut k = i + 1;
                while k < grid.n12 && color_of(grid.idx(k, j)) == color {
                    k += 1;
                }
                let xa = self.sx(grid.d12_at(i) - half12);
                let xb = self.sx(grid.d12_at(k - 1) + half12);
                let ya = self.sy(grid.d13_at(j) + half13);
                let yb = self.sy(grid.d13_at(j) - half13);
                writeln!(
                    self.body,
                    r##"<rect x="{}" y="{}" width="{}" height="{}" fill="{}"/>"##,
                    px(xa),
                    px(ya),
                    px(xb - xa),
                    px(yb - ya),
                    color
                )
                .unwrap();
                i = k;
            }
        }
    }

    /// Hatch-fill masked cells (run-merged like `cells`).
    pub fn hatch(&mut self, grid: &GridSpec, mask: impl Fn(usize) -> bool) {
        let half12 = 0.5 * (grid.d12_max - grid.d12_min) / (grid.n12 - 1).max(1) as f64;
        let half13 = 0.5 * (grid.d13_max - grid.d13_min) / (grid.n13 - 1).max(1) as f64;
        for j in 0..grid.n13 {
            let mut i = 0;
            while i < grid.n12 {
                if !mask(grid.idx(i, j)) {
                    i += 1;
                    continue;
                }
                let mut k = i + 1;
                while k < grid.n12 && mask(grid.idx(k, j)) {
                    k += 1;
                }
                let xa = self.sx(grid.d12_at(i) - half12);
                let xb = self.sx(grid.d12_at(k - 1) + half12);
                let ya = self.sy(grid.d13_at(j) + half13);
                let yb = self.sy(grid.d13_at(j) - half13);
                writeln!(
                    self.body,
                    r##"<rect x="{}" y="{}" width="{}" height="{}" fill="url(#hatch)"/>"##,
                    px(xa),
                    px(ya),
                    px(xb - xa),
                    px(yb - ya),
                )
                .unwrap();
                i = k;
            }
        }
    }

    pub fn segments(&mut self, segs: &[[f64; 4]], stroke: &str, width: f64) {
        for s in segs {
            writeln!(
                self.body,
                r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{}" stroke-width="{}"/>"##,
                px(self.sx(s[0])),
                px(self.sy(s[1])),
                px(self.sx(s[2])),
                px(self.sy(s[3])),
                stroke,
                width
            )
            .unwrap();
        }
    }

    pub fn marker(&mut self, x: f64, y: f64, label: &str) {
        writeln!(
            self.body,
            r##"<circle cx="{}" cy="{}" r="5" fill="#ffffff" stroke="#000000" stroke-width="1.6"/>
<text x="{}" y="{}" font-size="13" font-family="sans-serif">{label}</text>"##,
            px(self.sx(x)),
            px(self.sy(y)),
            px(self.sx(x) + 8.0),
            px(self.sy(y) - 8.0),
        )
        .unwrap();
    }

    pub fn finish(self, x_label: &str, y_label: &str, legend: &[(String, String)]) -> String {
        let mut out = String::new();
        writeln!(
            out,
            r##"<svg xmlns="http://www.w3.org/2000/svg" width="{PLOT_W}" height="{PLOT_H}" viewBox="0 0 {PLOT_W} {PLOT_H}">"##
        )
        .unwrap();
        writeln!(
            out,
            r##"<defs><pattern id="hatch" width="6" height="6" patternUnits="userSpaceOnUse"><path d="M0,6 L6,0" stroke="#000000" stroke-width="0.8" opacity="0.35"/></pattern></defs>"##
        )
        .unwrap();
        writeln!(
            out,
            r##"<rect x="0" y="0" width="{PLOT_W}" height="{PLOT_H}" fill="#ffffff"/>"##
        )
        .unwrap();
        out.push_str(&self.body);
        // Frame and ticks.
        let (fx0, fx1) = (MARGIN_L, PLOT_W - MARGIN_R);
        let (fy0, fy1) = (MARGIN_T, PLOT_H - MARGIN_B);
        writeln!(
            out,
            r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#000000" stroke-width="1"/>"##,
            px(fx0),
            px(fy0),
            px(fx1 - fx0),
            px(fy1 - fy0)
        )
        .unwrap();
        for k in 0..=4 {
            let xv = self.x0 + (self.x1 - self.x0) * k as f64 / 4.0;
            let yv = self.y0 + (self.y1 - self.y0) * k as f64 / 4.0;
            let sx = self.sx(xv);
            let sy = self.sy(yv);
            writeln!(
                out,
                r##"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="#000000" stroke-width="1"/>
<text x="{0}" y="{3}" font-size="12" font-family="sans-serif" text-anchor="middle">{4:.2}</text>
<line x1="{5}" y1="{6}" x2="{7}" y2="{6}" stroke="#000000" stroke-width="1"/>
<text x="{8}" y="{9}" font-size="12" font-family="sans-serif" text-anchor="end">{10:.2}</text>"##,
                px(sx),
                px(fy1),
                px(fy1 + 5.0),
                px(fy1 + 20.0),
                xv,
                px(fx0 - 5.0),
                px(sy),
                px(fx0),
                px(fx0 - 8.0),
                px(sy + 4.0),
                yv,
            )
            .unwrap();
        }
        writeln!(
            out,
            r##"<text x="{}" y="{}" font-size="14" font-family="sans-serif" text-anchor="middle">{}</text>
<text x="{}" y="{}" font-size="14" font-family="sans-serif" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>
<text x="{}" y="24" font-size="16" font-family="sans-serif" text-anchor="middle">{}</text>"##,
            px((fx0 + fx1) / 2.0),
            px(PLOT_H - 12.0),
            x_label,
            px(16.0),
            px((fy0 + fy1) / 2.0),
            px((fy0 + fy1) / 2.0),
            y_label,
            px((fx0 + fx1) / 2.0),
            self.title,
        )
        .unwrap();
        let mut ly = MARGIN_T + 14.0;
        for (color, label) in legend {
            writeln!(
                out,
                r##"<rect x="{}" y="{}" width="12" height="12" fill="{}" stroke="#000000" stroke-width="0.5"/>
<text x="{}" y="{}" font-size="12" font-family="sans-serif">{}</text>"##,
                px(fx1 - 130.0),
                px(ly - 10.0),
                color,
                px(fx1 - 114.0),
                px(ly),
                label
            )
            .unwrap();
            ly += 16.0;
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Stacked time-series panels sharing the x axis.
pub fn series(title: &str, x_label: &str, panels: &[(String, Vec<(f64, f64)>)]) -> String {
    let w = 760.0;
    let panel_h = 170.0;
    let h = MARGIN_T + panels.len() as f64 * panel_h + MARGIN_B;
    let mut out = String::new();
    writeln!(
        out,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"##
    )
    .unwrap();
    writeln!(out, r##"<rect x="0" y="0" width="{w}" height="{h}" fill="#ffffff"/>"##).unwrap();
    writeln!(
        out,
        r##"<text x="{}" y="24" font-size="16" font-family="sans-serif" text-anchor="middle">{title}</text>"##,
        px(w / 2.0)
    )
    .unwrap();
    let (x0, x1) = panels
        .iter()
        .flat_map(|(_, pts)| pts.iter())
        .fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    for (k, (name, pts)) in panels.iter().enumerate() {
        let top = MARGIN_T + k as f64 * panel_h + 16.0;
        let bot = top + panel_h - 34.0;
        let (mut y0, mut y1) = pts
            .iter()
            .fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
        if !(y1 > y0) {
            y0 -= 1.0;
            y1 += 1.0;
        }
        let pad = 0.05 * (y1 - y0);
        let (y0, y1) = (y0 - pad, y1 + pad);
        let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0).max(1e-300) * (w - MARGIN_L - MARGIN_R);
        let sy = |y: f64| bot - (y - y0) / (y1 - y0) * (bot - top);
        // Downsample to at most 2000 points per panel (presentation only).
        let stride = (pts.len() / 2000).max(1);
        let mut d = String::new();
        for (i, p) in pts.iter().step_by(stride).enumerate() {
            let cmd = if i == 0 { 'M' } else { 'L' };
            write!(d, "{cmd}{} {} ", px(sx(p.0)), px(sy(p.1))).unwrap();
        }
        writeln!(
            out,
            r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#000000" stroke-width="1"/>
<path d="{}" fill="none" stroke="#1f6fb2" stroke-width="1.4"/>
<text x="{}" y="{}" font-size="13" font-family="sans-serif">{}</text>
<text x="{}" y="{}" font-size="11" font-family="sans-serif" text-anchor="end">{:.3}</text>
<text x="{}" y="{}" font-size="11" font-family="sans-serif" text-anchor="end">{:.3}</text>"##,
            px(MARGIN_L),
            px(top),
            px(w - MARGIN_L - MARGIN_R),
            px(bot - top),
            d.trim_end(),
            px(MARGIN_L + 6.0),
            px(top - 4.0),
            name,
            px(MARGIN_L - 6.0),
            px(top + 10.0),
            y1,
            px(MARGIN_L - 6.0),
            px(bot),
            y0,
        )
        .unwrap();
    }
    for k in 0..=5 {
        let xv = x0 + (x1 - x0) * k as f64 / 5.0;
        let sxv = MARGIN_L + (xv - x0) / (x1 - x0).max(1e-300) * (w - MARGIN_L - MARGIN_R);
        writeln!(
            out,
            r##"<text x="{}" y="{}" font-size="12" font-family="sans-serif" text-anchor="middle">{:.2}</text>"##,
            px(sxv),
            px(h - MARGIN_B + 18.0),
            xv
        )
        .unwrap();
    }
    writeln!(
        out,
        r##"<text x="{}" y="{}" font-size="14" font-family="sans-serif" text-anchor="middle">{x_label}</text>"##,
        px(w / 2.0),
        px(h - 10.0)
    )
    .unwrap();
    out.push_str("</svg>\n");
    out
}
