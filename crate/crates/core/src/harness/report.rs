//! Result tables, charts and trend summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::experiment::ResultRecord;
use crate::{Error, Result};

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub svg: PathBuf,
    pub summary: PathBuf,
}

fn params_text(p: &BTreeMap<String, String>) -> String {
    p.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        String::new()
    }
}

pub fn results_csv(records: &[ResultRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(["fingerprint", "params", "mean", "std", "time_s", "seeds", "accuracies", "error"])
        .map_err(csv_err)?;
    for r in records {
        let seeds: Vec<String> = r.seeds.iter().map(|s| s.to_string()).collect();
        let accs: Vec<String> = r.accuracies.iter().map(|&a| num(a)).collect();
        w.write_record([
            r.fingerprint.clone(),
            params_text(&r.params),
            num(r.mean),
            num(r.std),
            format!("{:.3}", r.wall_time_s),
            seeds.join(" "),
            accs.join(" "),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Chart layout: the x axis is the first swept key that varies (numeric keys
/// preferred); the remaining swept keys name the series.
struct Layout {
    x_key: Option<String>,
    numeric: bool,
    xs: Vec<String>,
    series: Vec<(String, Vec<Option<f64>>)>,
}

fn layout(records: &[ResultRecord]) -> Layout {
    let mut values: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in records {
        for (k, v) in &r.params {
            values.entry(k).or_default().insert(v);
        }
    }
    let varying: Vec<&str> = values.iter().filter(|(_, v)| v.len() > 1).map(|(k, _)| *k).collect();
    let is_numeric = |k: &str| values[k].iter().all(|v| v.parse::<f64>().is_ok());
    let x_key = varying
        .iter()
        .find(|k| is_numeric(k))
        .or_else(|| varying.first())
        .map(|k| k.to_string());
    let numeric = x_key.as_deref().is_some_and(is_numeric);
    let x_of = |r: &ResultRecord| -> String {
        match &x_key {
            Some(k) => r.params.get(k).cloned().unwrap_or_default(),
            None => params_text(&r.params),
        }
    };
    let series_of = |r: &ResultRecord| -> String {
        let rest: BTreeMap<String, String> = r
            .params
            .iter()
            .filter(|(k, _)| Some(k.as_str()) != x_key.as_deref() && varying.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        if rest.is_empty() {
            "accuracy".to_string()
        } else {
            params_text(&rest)
        }
    };
    let mut xs: Vec<String> = Vec::new();
    for r in records {
        let x = x_of(r);
        if !xs.contains(&x) {
            xs.push(x);
        }
    }
    if numeric {
        xs.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    let mut series: Vec<(String, Vec<Option<f64>>)> = Vec::new();
    for r in records {
        let name = series_of(r);
        let xi = xs.iter().position(|x| *x == x_of(r)).unwrap();
        let idx = match series.iter().position(|(n, _)| *n == name) {
            Some(i) => i,
            None => {
                series.push((name, vec![None; xs.len()]));
                series.len() - 1
            }
        };
        if r.mean.is_finite() {
            series[idx].1[xi] = Some(r.mean);
        }
    }
    Layout {
        x_key,
        numeric,
        xs,
        series,
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line chart for numeric x values, grouped bars otherwise.
pub fn results_svg(records: &[ResultRecord]) -> String {
    let l = layout(records);
    let (w, h) = (720.0, 420.0);
    let (left, right, top, bottom) = (60.0, 200.0, 30.0, 60.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let means: Vec<f64> = l.series.iter().flat_map(|(_, v)| v.iter().flatten().copied()).collect();
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let y_min = if lo.is_finite() { ((lo - 5.0) / 10.0).floor().max(0.0) * 10.0 } else { 0.0 };
    let y_max = 100.0;
    let y = |v: f64| top + ph * (1.0 - (v - y_min) / (y_max - y_min));
    let nx = l.xs.len().max(1) as f64;
    let x_center = |i: usize| left + pw * (i as f64 + 0.5) / nx;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let mut tick = y_min;
    while tick <= y_max + 1e-9 {
        let ty = y(tick);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{ty:.1}" x2="{:.1}" y2="{ty:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{tick:.0}</text>"##,
            left + pw,
            left - 6.0,
            ty + 4.0
        );
        tick += 10.0;
    }
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.1}" stroke="black"/><line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
        top + ph,
        top + ph,
        left + pw,
        top + ph
    );
    for (i, x) in l.xs.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x_center(i),
            top + ph + 18.0,
            escape(x)
        );
    }
    let x_label = l.x_key.clone().unwrap_or_else(|| "configuration".into());
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 15.0,
        escape(&x_label)
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">accuracy (%)</text>"#,
        top + ph / 2.0
    );
    let ns = l.series.len().max(1) as f64;
    for (si, (name, vals)) in l.series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        if l.numeric {
            let pts: Vec<String> = vals
                .iter()
                .enumerate()
                .filter_map(|(i, v)| v.map(|v| format!("{:.1},{:.1}", x_center(i), y(v))))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                pts.join(" ")
            );
            for p in &pts {
                let (cx, cy) = p.split_once(',').unwrap();
                let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
            }
        } else {
            let group = pw / nx * 0.8;
            let bw = group / ns;
            for (i, v) in vals.iter().enumerate() {
                if let Some(v) = v {
                    let bx = x_center(i) - group / 2.0 + bw * si as f64;
                    let _ = writeln!(
                        s,
                        r#"<rect x="{bx:.1}" y="{:.1}" width="{bw:.1}" height="{:.1}" fill="{color}"/>"#,
                        y(*v),
                        (top + ph - y(*v)).max(0.0)
                    );
                }
            }
        }
        let ly = top + 14.0 + 18.0 * si as f64;
        let lx = left + pw + 14.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.1}" y="{:.1}" width="12" height="12" fill="{color}"/><text x="{:.1}" y="{ly:.1}">{}</text>"#,
            ly - 10.0,
            lx + 18.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Per series: the means along the x axis and whether they never decrease.
pub fn trend_summary(records: &[ResultRecord]) -> String {
    let l = layout(records);
    let mut s = String::new();
    let x_key = l.x_key.clone().unwrap_or_else(|| "configuration".into());
    let _ = writeln!(s, "x axis: {x_key}");
    for (name, vals) in &l.series {
        let present: Vec<(usize, f64)> = vals.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v))).collect();
        let points: Vec<String> = present.iter().map(|(i, v)| format!("{}={v:.2}", l.xs[*i])).collect();
        let _ = writeln!(s, "series {name}: {}", points.join(" "));
        if l.numeric && present.len() > 1 {
            let rises = present.windows(2).filter(|w| w[1].1 >= w[0].1).count();
            let monotone = rises == present.len() - 1;
            let first = present.first().unwrap().1;
            let last = present.last().unwrap().1;
            let _ = writeln!(
                s,
                "  trend: {} ({rises}/{} steps non-decreasing, {:+.2} pp end to end)",
                if monotone { "monotone non-decreasing" } else { "not monotone" },
                present.len() - 1,
                last - first
            );
        }
    }
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        let _ = writeln!(s, "failed runs: {failed}");
    }
    let _ = writeln!(
        s,
        "note: accuracies are test-split accuracies per configuration; picking the best row selects on the test split."
    );
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `results.csv`, `plots.svg` and `summary.txt` into `dir`.
pub fn emit_report(records: &[ResultRecord], dir: impl AsRef<Path>) -> Result<ReportFiles> {
    if records.is_empty() {
        return Err(Error::Validation("no records to report".into()));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ReportFiles {
        csv: dir.join("results.csv"),
        svg: dir.join("plots.svg"),
        summary: dir.join("summary.txt"),
    };
    write(&files.csv, &results_csv(records)?)?;
    write(&files.svg, &results_svg(records))?;
    write(&files.summary, &trend_summary(records))?;
    Ok(files)
}
