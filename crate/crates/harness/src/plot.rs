//! Self-contained SVG figures from run CSVs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};

use crate::io::{write_file, Csv};

const W: f64 = 480.0;
const H: f64 = 320.0;
const M: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Line,
    Scatter,
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// Renders an SVG chart. Output bytes depend only on the inputs.
pub fn render(title: &str, xlabel: &str, ylabel: &str, series: &[Series], style: Style) -> String {
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, esc(title));
    let _ = writeln!(s, r#"<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - M, W - M, H - M);
    let _ = writeln!(s, r#"<line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"#, H - M);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{:.3}</text>"#, sx(xv), H - M + 14.0, xv);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{:.3}</text>"#, M - 4.0, sy(yv) + 4.0, yv);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 8.0, esc(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" text-anchor="middle" transform="rotate(-90 12 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        esc(ylabel)
    );
    for (i, ser) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let pts: Vec<(f64, f64)> = ser.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).copied().collect();
        if style == Style::Line && pts.len() > 1 {
            let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        }
        for &(x, y) in &pts {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{c}"/>"#, sx(x), sy(y));
        }
        let ly = M + 14.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="3" fill="{c}"/>"#, W - M - 110.0, ly - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{ly}">{}</text>"#, W - M - 96.0, esc(&ser.name));
    }
    s.push_str("</svg>\n");
    s
}

/// Series from two CSV columns, optionally grouped by a label column.
pub fn series_from_csv(csv: &Csv, x: &str, y: &str, group: Option<&str>) -> Result<Vec<Series>> {
    let xs = csv.column_f64(x)?;
    let ys = csv.column_f64(y)?;
    let labels = match group {
        Some(g) => csv.column_str(g)?,
        None => vec![y.to_string(); xs.len()],
    };
    let mut out: Vec<Series> = Vec::new();
    for ((x, y), l) in xs.into_iter().zip(ys).zip(labels) {
        match out.iter_mut().find(|s| s.name == l) {
            Some(s) => s.points.push((x, y)),
            None => out.push(Series { name: l, points: vec![(x, y)] }),
        }
    }
    Ok(out)
}

fn run_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Writes figures for the given run directories into `out`:
/// one convergence figure per consecutive pair of runs with `fid_curve.csv`,
/// plus K-sweep and correlation panels for any sweep CSVs found. Returns the
/// written paths.
pub fn emit_plots(runs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let curves: Vec<&PathBuf> = runs.iter().filter(|d| d.join("fid_curve.csv").exists()).collect();
    for pair in curves.chunks(2) {
        let mut series = Vec::new();
        for d in pair {
            let csv = Csv::read(&d.join("fid_curve.csv"))?;
            let mut s = series_from_csv(&csv, "epoch", "fd_toy", None)?;
            s[0].name = run_name(d);
            series.extend(s);
        }
        let name = pair.iter().map(|d| run_name(d)).collect::<Vec<_>>().join("_vs_");
        let path = out.join(format!("convergence_{name}.svg"));
        write_file(&path, render("Unguided FD_toy", "epoch", "fd_toy", &series, Style::Line).as_bytes())?;
        written.push(path);
    }
    for d in runs {
        let mut entries: Vec<PathBuf> = match std::fs::read_dir(d) {
            Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).collect(),
            Err(_) => continue,
        };
        entries.sort();
        for f in entries {
            let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            if f.extension().and_then(|e| e.to_str()) != Some("csv") {
                continue;
            }
            let csv = Csv::read(&f)?;
            if stem.starts_with("ksweep") {
                for metric in ["mse", "fd_unguided"] {
                    if csv.column_index(metric).is_err() {
                        continue;
                    }
                    let series = series_from_csv(&csv, "k", metric, Some("scheme"))?;
                    let path = out.join(format!("{stem}_{metric}.svg"));
                    write_file(&path, render(&format!("K sweep: {metric}"), "k", metric, &series, Style::Line).as_bytes())?;
                    written.push(path);
                }
            } else if stem == "correlation" {
                for (x, y) in [("lp", "fd_rae_repa"), ("lds", "fd_rae_repa")] {
                    let series = series_from_csv(&csv, x, y, None)?;
                    let path = out.join(format!("correlation_{x}.svg"));
                    write_file(&path, render(&format!("{y} vs {x}"), x, y, &series, Style::Scatter).as_bytes())?;
                    written.push(path);
                }
            }
        }
    }
    if written.is_empty() {
        bail!("no plottable CSVs under the given run directories");
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Csv {
        let mut c = Csv::new("# config_hash=x,seed=0,format=1", &["epoch", "step", "fd_toy"]);
        c.push(vec!["1".into(), "10".into(), "5.5".into()]);
        c.push(vec!["2".into(), "20".into(), "3.25".into()]);
        c
    }

    #[test]
    fn render_is_deterministic_and_labeled() {
        let s = series_from_csv(&sample(), "epoch", "fd_toy", None).unwrap();
        let a = render("t", "epoch", "fd_toy", &s, Style::Line);
        let b = render("t", "epoch", "fd_toy", &series_from_csv(&sample(), "epoch", "fd_toy", None).unwrap(), Style::Line);
        assert_eq!(a, b);
        assert!(a.contains(">epoch</text>") && a.contains(">fd_toy</text>"));
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
    }

    #[test]
    fn missing_column_is_named() {
        let e = series_from_csv(&sample(), "epoch", "gfid", None).err().unwrap();
        assert!(e.to_string().contains("`gfid`"));
    }

    #[test]
    fn one_convergence_figure_per_pair() {
        let dir = tempfile::tempdir().unwrap();
        let runs: Vec<PathBuf> = (0..4).map(|i| dir.path().join(format!("r{i}"))).collect();
        for r in &runs {
            sample().write(&r.join("fid_curve.csv")).unwrap();
        }
        let out = dir.path().join("plots");
        let files = emit_plots(&runs, &out).unwrap();
        assert_eq!(files.len(), 2);
        let again = emit_plots(&runs, &dir.path().join("plots2")).unwrap();
        for (a, b) in files.iter().zip(&again) {
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        }
        assert!(emit_plots(&[dir.path().join("none")], &out).is_err());
    }
}
