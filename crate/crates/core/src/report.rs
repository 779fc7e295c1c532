//! Static SVG line charts for metrics and sweep CSVs.

use std::fmt::Write as _;

use crate::error::{Result, TowerError};
use crate::eval::{mean_std, read_sweep_csv, SWEEP_HEADER};

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: (f64, f64, f64, f64) = (60.0, 150.0, 40.0, 50.0); // left, right, top, bottom

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{}", (v * 1000.0).round() / 1000.0)
    }
}

/// Renders `series` as one SVG line chart. Non-finite points are skipped.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    let finite = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in finite {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return Err(TowerError::Data(format!(
            "chart `{title}` has no finite points"
        )));
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let (ml, mr, mt, mb) = MARGIN;
    let pw = W - ml - mr;
    let ph = H - mt - mb;
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| mt + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        ml + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            px(xv),
            mt + ph + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            ml - 6.0,
            py(yv) + 4.0,
            tick(yv)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{ml}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            ml + pw,
            py(yv),
            py(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        ml + pw / 2.0,
        H - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        mt + ph / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (cx, cy) = p.split_once(',').unwrap();
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="2.5" fill="{color}"/>"#);
        }
        let ly = mt + 10.0 + 18.0 * i as f64;
        let lx = W - mr + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Plots every numeric column of `text` against its first column.
pub fn table_chart(title: &str, text: &str) -> Result<String> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| TowerError::Format(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if header.len() < 2 {
        return Err(TowerError::Format(
            "chart CSV needs at least two columns".into(),
        ));
    }
    let mut cols: Vec<Vec<(f64, f64)>> = vec![Vec::new(); header.len() - 1];
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| TowerError::Ingestion {
            row: i + 2,
            reason: e.to_string(),
        })?;
        let x: f64 = rec[0].parse().map_err(|_| TowerError::Ingestion {
            row: i + 2,
            reason: format!("`{}` is not a number", &rec[0]),
        })?;
        for (j, col) in cols.iter_mut().enumerate() {
            if let Some(Ok(y)) = rec.get(j + 1).map(str::parse::<f64>) {
                col.push((x, y));
            }
        }
    }
    let series: Vec<Series> = header[1..]
        .iter()
        .zip(cols)
        .filter(|(_, pts)| !pts.is_empty())
        .map(|(name, points)| Series {
            name: name.clone(),
            points,
        })
        .collect();
    line_chart(title, &header[0], "value", &series)
}

/// Mean metric per arm against label fraction.
pub fn sweep_chart(title: &str, text: &str) -> Result<String> {
    let rows = read_sweep_csv(text)?;
    let mut arms: Vec<&str> = Vec::new();
    for r in &rows {
        if !arms.contains(&r.arm.as_str()) {
            arms.push(&r.arm);
        }
    }
    let metric = rows.first().map_or("metric", |r| r.metric.as_str());
    let series: Vec<Series> = arms
        .iter()
        .map(|&arm| {
            let mut fracs: Vec<f64> = rows
                .iter()
                .filter(|r| r.arm == arm)
                .map(|r| r.fraction)
                .collect();
            fracs.sort_by(f64::total_cmp);
            fracs.dedup();
            let points = fracs
                .iter()
                .map(|&f| {
                    let v: Vec<f64> = rows
                        .iter()
                        .filter(|r| r.arm == arm && r.fraction == f)
                        .map(|r| r.value)
                        .collect();
                    (f, mean_std(&v).0)
                })
                .collect();
            Series {
                name: arm.to_string(),
                points,
            }
        })
        .collect();
    line_chart(title, "label fraction", metric, &series)
}

/// Picks the chart for `text` from its header.
pub fn render_csv(title: &str, text: &str) -> Result<String> {
    let first = text.lines().next().unwrap_or("").replace(' ', "");
    if first == SWEEP_HEADER {
        sweep_chart(title, text)
    } else {
        table_chart(title, text)
    }
}
