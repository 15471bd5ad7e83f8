use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use evifuse::metrics::CSV_COLUMNS;

use crate::{create_dir, write_file, CliError, Result};

/// Metrics plotted when none are requested.
pub const DEFAULT_METRICS: [&str; 4] = ["dgs", "dcs", "ueo", "mean_u_fused"];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub fusion: String,
    pub perturb_kind: String,
    pub perturb_param: String,
    /// Perturbation magnitude (the part of `perturb_param` before any `/`).
    pub magnitude: f64,
    pub values: BTreeMap<String, f64>,
}

fn numeric_columns() -> &'static [&'static str] {
    &CSV_COLUMNS[4..]
}

fn parse_err(source: &str, line: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("parse error: {source}:{line}: {msg}"))
}

/// Parses a metrics CSV as written by `eval`. Missing per-phase values are
/// `nan`.
pub fn parse_metrics_csv(text: &str, source: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(source, 1, "empty file"))?;
    if header.trim() != CSV_COLUMNS.join(",") {
        return Err(parse_err(source, 1, "unexpected header"));
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != CSV_COLUMNS.len() {
            return Err(parse_err(
                source,
                i + 1,
                format!("{} fields, expected {}", fields.len(), CSV_COLUMNS.len()),
            ));
        }
        let magnitude = fields[3]
            .split('/')
            .next()
            .unwrap_or("")
            .parse::<f64>()
            .map_err(|_| parse_err(source, i + 1, format!("bad perturb_param {:?}", fields[3])))?;
        let mut values = BTreeMap::new();
        for (name, raw) in numeric_columns().iter().zip(&fields[4..]) {
            let v: f64 = raw
                .parse()
                .map_err(|_| parse_err(source, i + 1, format!("bad {name} value {raw:?}")))?;
            values.insert(name.to_string(), v);
        }
        rows.push(MetricsRow {
            run_id: fields[0].into(),
            fusion: fields[1].into(),
            perturb_kind: fields[2].into(),
            perturb_param: fields[3].into(),
            magnitude,
            values,
        });
    }
    if rows.is_empty() {
        return Err(parse_err(source, 2, "no data rows"));
    }
    Ok(rows)
}

/// One polyline: label and `(x, y)` points sorted by `x`.
pub type Series = (String, Vec<(f64, f64)>);

/// Groups rows into one series per run, fusion mode and perturbation kind.
/// Unperturbed rows join every series of their run and fusion mode at
/// `x = 0`.
pub fn series_for(rows: &[MetricsRow], metric: &str) -> Vec<Series> {
    let mut kinds: BTreeMap<(&str, &str), BTreeSet<&str>> = BTreeMap::new();
    for r in rows {
        let entry = kinds.entry((r.run_id.as_str(), r.fusion.as_str())).or_default();
        if r.perturb_kind != "none" {
            entry.insert(r.perturb_kind.as_str());
        }
    }
    let runs: BTreeSet<&str> = kinds.keys().map(|k| k.0).collect();
    let fusions: BTreeSet<&str> = kinds.keys().map(|k| k.1).collect();
    let several_kinds = kinds.values().any(|k| k.len() > 1);
    let mut out = Vec::new();
    for ((run, fusion), ks) in &kinds {
        let ks: Vec<&str> = if ks.is_empty() { vec!["none"] } else { ks.iter().copied().collect() };
        for kind in ks {
            let mut pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.run_id == *run && r.fusion == *fusion)
                .filter(|r| r.perturb_kind == kind || r.perturb_kind == "none")
                .filter_map(|r| r.values.get(metric).map(|v| (r.magnitude, *v)))
                .filter(|(_, v)| v.is_finite())
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut label = vec![*fusion];
            if several_kinds {
                label.push(kind);
            }
            if runs.len() > 1 && fusions.len() < kinds.len() {
                label.push(run);
            }
            out.push((label.join(" / "), pts));
        }
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn padded_range(values: impl Iterator<Item = f64>, pad: f64) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - pad.max(0.05), hi + pad.max(0.05));
    }
    let m = (hi - lo) * pad;
    (lo - m, hi + m)
}

/// A self-contained SVG line plot.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series], sources: &[String]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 610.0, 40.0, 340.0);
    let (x_lo, x_hi) = padded_range(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)), 0.0);
    let (y_lo, y_hi) = padded_range(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)), 0.05);
    let sx = |x: f64| left + (x - x_lo) / (x_hi - x_lo) * (right - left);
    let sy = |y: f64| bottom - (y - y_lo) / (y_hi - y_lo) * (bottom - top);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, "<metadata>{}</metadata>", xml_escape(&sources.join(" ")));
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        (left + right) / 2.0,
        xml_escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>"#
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let xv = x_lo + f * (x_hi - x_lo);
        let yv = y_lo + f * (y_hi - y_lo);
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{bottom}" x2="{px:.2}" y2="{}" stroke="black"/><text x="{px:.2}" y="{}" text-anchor="middle">{xv:.3}</text>"#,
            bottom + 5.0,
            bottom + 19.0
        );
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{py:.2}" x2="{left}" y2="{py:.2}" stroke="black"/><line x1="{left}" y1="{py:.2}" x2="{right}" y2="{py:.2}" stroke="#dddddd"/><text x="{}" y="{:.2}" text-anchor="end">{yv:.3}</text>"##,
            left - 5.0,
            left - 8.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (left + right) / 2.0,
        h - 18.0,
        xml_escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        (top + bottom) / 2.0,
        (top + bottom) / 2.0,
        xml_escape(y_label)
    );
    for (k, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        );
        for (x, y) in pts {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(*x), sy(*y));
        }
        let ly = top + 16.0 * (k as f64 + 1.0);
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            right - 130.0,
            right - 110.0,
            right - 104.0,
            ly + 4.0,
            xml_escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Plain-text table, one line per row.
pub fn summary_table(rows: &[MetricsRow]) -> String {
    let cols = ["dgs", "dcs", "ece", "neg_log_ece", "ueo", "mean_u_fused"];
    let mut lines = vec![{
        let mut h = format!("{:<20} {:<8} {:<10} {:<12}", "run_id", "fusion", "perturb", "param");
        for c in cols {
            let _ = write!(h, " {c:>12}");
        }
        h
    }];
    for r in rows {
        let mut l = format!(
            "{:<20} {:<8} {:<10} {:<12}",
            r.run_id, r.fusion, r.perturb_kind, r.perturb_param
        );
        for c in cols {
            let _ = write!(l, " {:>12.4}", r.values[c]);
        }
        lines.push(l);
    }
    lines.join("\n") + "\n"
}

#[derive(Debug, Clone)]
pub struct ReportOutcome {
    pub svgs: Vec<PathBuf>,
    pub summary: String,
    pub summary_path: PathBuf,
}

/// One SVG per metric (`<metric>.svg`) plus `summary.txt` in `out`.
pub fn cmd_report(csvs: &[PathBuf], metrics: &[String], out: &Path) -> Result<ReportOutcome> {
    if csvs.is_empty() {
        return Err(CliError::Config("report needs at least one metrics CSV".into()));
    }
    let metrics: Vec<String> = if metrics.is_empty() {
        DEFAULT_METRICS.iter().map(|m| m.to_string()).collect()
    } else {
        metrics.to_vec()
    };
    for m in &metrics {
        if !numeric_columns().contains(&m.as_str()) {
            return Err(CliError::Config(format!(
                "unknown metric {m:?}; choose from {}",
                numeric_columns().join(", ")
            )));
        }
    }
    let mut rows = Vec::new();
    for path in csvs {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        rows.extend(parse_metrics_csv(&text, &path.display().to_string())?);
    }
    let run_ids: Vec<String> = rows
        .iter()
        .map(|r| r.run_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    create_dir(out)?;
    let mut svgs = Vec::with_capacity(metrics.len());
    for m in &metrics {
        let svg = line_plot_svg(m, "perturbation magnitude", m, &series_for(&rows, m), &run_ids);
        let path = out.join(format!("{m}.svg"));
        write_file(&path, svg)?;
        svgs.push(path);
    }
    let summary = format!("runs: {}\n", run_ids.join(" ")) + &summary_table(&rows);
    let summary_path = out.join("summary.txt");
    write_file(&summary_path, &summary)?;
    Ok(ReportOutcome {
        svgs,
        summary,
        summary_path,
    })
}
