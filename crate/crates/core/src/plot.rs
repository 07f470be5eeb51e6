//! Static SVG charts drawn from ledgers.
//!
//! Each chart embeds the exact values it plots as a CSV table
//! (`series,x,y`) inside `<metadata>`, so a figure can be checked against
//! its source without reading pixels.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiment::KSweepEntry;
use crate::metrics::{LedgerRow, MetricsLedger};

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Style {
    Lines,
    Markers,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const ML: f64 = 80.0;
const MR: f64 = 150.0;
const MT: f64 = 40.0;
const MB: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn extent(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo == hi {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi)
    }
}

fn tick_label(v: f64) -> String {
    if v.abs() >= 1e4 {
        format!("{v:.2e}")
    } else if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// Renders `series` on shared axes.
pub fn chart(title: &str, x_label: &str, y_label: &str, series: &[Series], style: Style) -> Result<String> {
    if series.is_empty() || series.iter().any(|s| s.points.is_empty()) {
        return Err(Error::Config(format!("chart {title:?} has no data")));
    }
    let (x0, x1) = extent(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = extent(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let pw = W - ML - MR;
    let ph = H - MT - MB;
    let sx = |x: f64| ML + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| MT + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    s.push_str("<metadata><![CDATA[\nseries,x,y\n");
    for ser in series {
        for &(x, y) in &ser.points {
            let _ = writeln!(s, "{},{x},{y}", ser.name.replace([',', '\n'], " "));
        }
    }
    s.push_str("]]></metadata>\n");
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{ML}" y="{MT}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            s,
            r#"<line x1="{px:.1}" y1="{}" x2="{px:.1}" y2="{}" stroke="black"/><text x="{px:.1}" y="{}" text-anchor="middle">{}</text>"#,
            MT + ph,
            MT + ph + 5.0,
            MT + ph + 18.0,
            tick_label(xv)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{py:.1}" x2="{ML}" y2="{py:.1}" stroke="black"/><text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            ML - 5.0,
            ML - 8.0,
            py + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        ML + pw / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{1}</text>"#,
        MT + ph / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        match style {
            Style::Lines => {
                let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                    pts.join(" ")
                );
            }
            Style::Markers => {
                for &(x, y) in &ser.points {
                    let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{color}"/>"#, sx(x), sy(y));
                }
            }
        }
        let ly = MT + 10.0 + 18.0 * i as f64;
        let lx = W - MR + 10.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx}" y="{}" width="12" height="4" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            ly - 4.0,
            lx + 16.0,
            ly + 1.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Parses the table embedded by [`chart`].
pub fn embedded_table(svg: &str) -> Result<Vec<Series>> {
    let start = svg
        .find("<![CDATA[")
        .ok_or_else(|| Error::Config("svg has no embedded table".into()))?
        + "<![CDATA[".len();
    let end = svg[start..]
        .find("]]>")
        .ok_or_else(|| Error::Config("unterminated embedded table".into()))?
        + start;
    let mut out: Vec<Series> = Vec::new();
    for (i, line) in svg[start..end].trim().lines().skip(1).enumerate() {
        let bad = || Error::LedgerParse { row: i + 1, reason: format!("bad table line {line:?}") };
        let mut parts = line.rsplitn(3, ',');
        let y: f64 = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let x: f64 = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let name = parts.next().ok_or_else(bad)?.to_string();
        match out.last_mut() {
            Some(s) if s.name == name => s.points.push((x, y)),
            _ => out.push(Series { name, points: vec![(x, y)] }),
        }
    }
    Ok(out)
}

fn ledger_series(ledgers: &[(String, MetricsLedger)], f: impl Fn(&LedgerRow) -> f64) -> Result<Vec<Series>> {
    ledgers
        .iter()
        .map(|(name, l)| {
            if l.is_empty() {
                return Err(Error::Config(format!("ledger {name:?} has no rounds")));
            }
            Ok(Series {
                name: name.clone(),
                points: l.rows.iter().map(|r| (r.round as f64, f(r))).collect(),
            })
        })
        .collect()
}

/// Writes cumulative-cost, parameter and accuracy charts for `ledgers` into `dir`.
pub fn emit_plots(ledgers: &[(String, MetricsLedger)], dir: &Path) -> Result<Vec<PathBuf>> {
    if ledgers.is_empty() {
        return Err(Error::Config("no ledgers to plot".into()));
    }
    let charts = [
        ("cumulative_cost.svg", "Communication cost", "cumulative bytes", ledger_series(ledgers, |r| r.cumulative_bytes as f64)?),
        ("params.svg", "Global model size", "parameters", ledger_series(ledgers, |r| r.params as f64)?),
        ("accuracy.svg", "Test accuracy", "accuracy", ledger_series(ledgers, |r| r.accuracy)?),
    ];
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (file, title, y, series) in charts {
        let path = dir.join(file);
        std::fs::write(&path, chart(title, "round", y, &series, Style::Lines)?)?;
        written.push(path);
    }
    Ok(written)
}

/// Parameters retained against best accuracy, one marker per `k`.
pub fn k_sweep_chart(entries: &[KSweepEntry]) -> Result<String> {
    let series: Vec<Series> = entries
        .iter()
        .map(|e| Series {
            name: format!("k={}", e.k),
            points: vec![(e.final_params as f64, e.best_accuracy)],
        })
        .collect();
    chart("Pruning strength trade-off", "final parameters", "best accuracy", &series, Style::Markers)
}
