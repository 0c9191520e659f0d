use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::experiment::ResultRow;
use crate::Result;

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and sample standard deviation of the Dice over seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub class: usize,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(&str, usize, usize), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups.entry((&r.method, r.n, r.class)).or_default().push(r.dice);
    }
    groups
        .into_iter()
        .map(|((method, n, class), v)| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let std = if v.len() > 1 {
                (v.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            SummaryRow { method: method.to_string(), n, class, mean, std, runs: v.len() }
        })
        .collect()
}

/// Mean Dice of the random-init arm trained on the whole pool of `pool`
/// subjects, averaged over seeds and foreground classes.
pub fn baseline_value(rows: &[ResultRow], pool: usize) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.method == "none" && r.n == pool).map(|r| r.dice).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Class-averaged mean Dice per method, at the requested N values only.
pub fn series(summary: &[SummaryRow], n_values: &[usize]) -> BTreeMap<String, Vec<(usize, f64)>> {
    let mut acc: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for s in summary.iter().filter(|s| n_values.contains(&s.n)) {
        acc.entry((s.method.clone(), s.n)).or_default().push(s.mean);
    }
    let mut out: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for ((m, n), v) in acc {
        out.entry(m).or_default().push((n, v.iter().sum::<f64>() / v.len() as f64));
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Dice against the number of training subjects (log2 axis), one polyline
/// per method and a dashed horizontal line for the full-data baseline.
pub fn svg_plot(summary: &[SummaryRow], n_values: &[usize], baseline: Option<f64>) -> String {
    let (w, h) = (560.0, 380.0);
    let (left, right, top, bottom) = (70.0, 150.0, 20.0, 60.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let lx: Vec<f64> = n_values.iter().map(|&n| (n as f64).log2()).collect();
    let (x0, x1) = (lx.iter().copied().fold(f64::INFINITY, f64::min), lx.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |n: usize| left + ((n as f64).log2() - x0) / span * pw;
    let py = |d: f64| top + (1.0 - d.clamp(0.0, 1.0)) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{left},{top} V{} H{}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    for i in 0..=5 {
        let d = i as f64 / 5.0;
        let y = py(d);
        let _ = writeln!(s, r#"<line x1="{}" y1="{y}" x2="{left}" y2="{y}" stroke="black"/>"#, left - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{d:.1}</text>"#, left - 7.0, y + 4.0);
    }
    for &n in n_values {
        let x = px(n);
        let _ = writeln!(s, r#"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="black"/>"#, top + ph, top + ph + 4.0);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{n}</text>"#, top + ph + 18.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">number of training subjects</text>"#,
        left + pw / 2.0,
        h - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">Dice</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    let mut legend_y = top + 10.0;
    for (i, (method, pts)) in series(summary, n_values).iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = pts.iter().map(|&(n, d)| format!("{:.2},{:.2}", px(n), py(d))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, points.join(" "));
        for &(n, d) in pts {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(n), py(d));
        }
        let lx = left + pw + 15.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{legend_y}" x2="{}" y2="{legend_y}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{method}</text>"#, lx + 26.0, legend_y + 4.0);
        legend_y += 18.0;
    }
    if let Some(b) = baseline {
        let y = py(b);
        let _ = writeln!(
            s,
            r#"<line x1="{left}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="gray" stroke-width="1.5" stroke-dasharray="6 4" data-value="{b}"/>"#,
            left + pw
        );
        let lx = left + pw + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{legend_y}" x2="{}" y2="{legend_y}" stroke="gray" stroke-dasharray="6 4"/>"#,
            lx + 20.0
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}">full-data baseline</text>"#, lx + 26.0, legend_y + 4.0);
    }
    s.push_str("</svg>\n");
    s
}
