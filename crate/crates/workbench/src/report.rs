//! Self-describing CSV outputs and SVG line charts.

use anyhow::{bail, Context, Result};
use mscnn_core::eval::{Recall, RecallTable};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

/// First 16 hex digits of the SHA-256 of the canonical config text.
pub fn config_hash(config_text: &str) -> String {
    hex::encode(Sha256::digest(config_text.as_bytes()))[..16].to_string()
}

/// A CSV document: `# key=value` metadata lines, a header row, then data.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Csv {
    pub meta: Vec<(String, String)>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(config_hash: &str, header: &[&str]) -> Csv {
        Csv {
            meta: vec![("config_hash".into(), config_hash.into())],
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn meta(mut self, key: &str, value: impl ToString) -> Csv {
        self.meta.push((key.into(), value.to_string()));
        self
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(s, "# {k}={v}");
        }
        let _ = writeln!(s, "{}", self.header.join(","));
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.join(","));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Csv> {
        let mut csv = Csv::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if let Some(m) = line.strip_prefix('#') {
                let (k, v) = m.trim().split_once('=').unwrap_or((m.trim(), ""));
                csv.meta.push((k.to_string(), v.to_string()));
            } else if csv.header.is_empty() {
                csv.header = line.split(',').map(|s| s.trim().to_string()).collect();
            } else {
                let row: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
                if row.len() != csv.header.len() {
                    bail!("row has {} fields, header has {}", row.len(), csv.header.len());
                }
                csv.rows.push(row);
            }
        }
        if csv.header.is_empty() {
            bail!("CSV has no header row");
        }
        Ok(csv)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).with_context(|| format!("writing {}", path.display()))
    }

    /// Numeric column `name`.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name).with_context(|| format!("no column {name:?}"))?;
        self.rows
            .iter()
            .map(|r| r[i].parse::<f64>().with_context(|| format!("non-numeric {name} value {:?}", r[i])))
            .collect()
    }
}

pub fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

/// One row per height bin (plus "all scales") and column (each branch, then "combined").
pub fn recall_table_csv(hash: &str, table: &RecallTable) -> Csv {
    let mut csv = Csv::new(hash, &["bin", "column", "recall", "recalled", "total"])
        .meta("iou", table.iou_threshold)
        .meta("budget", table.budget);
    let combined = "combined".to_string();
    for row in &table.rows {
        let cols = table.branch_names.iter().zip(&row.per_branch).chain(std::iter::once((&combined, &row.combined)));
        for (name, r) in cols {
            csv.push(vec![row.label.clone(), name.clone(), fmt_f(r.value), r.recalled.to_string(), r.total.to_string()]);
        }
    }
    csv
}

pub fn curve_csv<X: ToString>(hash: &str, x_name: &str, points: &[(X, Recall)]) -> Csv {
    let mut csv = Csv::new(hash, &[x_name, "recall"]);
    for (x, r) in points {
        csv.push(vec![x.to_string(), fmt_f(r.value)]);
    }
    csv
}

/// A named polyline.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if !(hi > lo) {
        (lo - 0.5, lo + 0.5)
    } else {
        (lo, hi)
    }
}

/// Renders a line chart. With `log_x`, non-positive x values are skipped.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], log_x: bool) -> String {
    let (w, h, ml, mr, mt, mb) = (640.0, 420.0, 70.0, 150.0, 40.0, 55.0);
    let tx = |x: f64| if log_x { x.log10() } else { x };
    let pts: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| s.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite() && (!log_x || p.0 > 0.0)).map(|&(x, y)| (tx(x), y)).collect())
        .collect();
    let all = pts.iter().flatten();
    let (x0, x1) = nice_range(
        all.clone().map(|p| p.0).fold(f64::INFINITY, f64::min),
        all.clone().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
    );
    let (y0, y1) = nice_range(
        all.clone().map(|p| p.1).fold(f64::INFINITY, f64::min).min(0.0),
        all.map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
    );
    let (x0, x1) = if x0.is_finite() { (x0, x1) } else { (0.0, 1.0) };
    let (y0, y1) = if y1.is_finite() { (y0, y1) } else { (0.0, 1.0) };
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| mt + ph - (y - y0) / (y1 - y0) * ph;
    let esc = |s: &str| s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, ml + pw / 2.0, esc(title));
    let _ = writeln!(s, r#"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let xl = if log_x { format!("{:.3}", 10f64.powf(xv)) } else { format!("{xv:.3}") };
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(xv), mt + ph + 16.0, xl.trim_end_matches('0').trim_end_matches('.'));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#, ml - 6.0, sy(yv) + 4.0);
        let _ = writeln!(s, r##"<line x1="{ml}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/>"##, ml + pw, sy(yv), sy(yv));
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, ml + pw / 2.0, h - 12.0, esc(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0,
        esc(y_label)
    );
    for (i, (ser, p)) in series.iter().zip(&pts).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = p.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        let ly = mt + 14.0 + i as f64 * 18.0;
        let _ = writeln!(s, r#"<line x1="{:.1}" x2="{:.1}" y1="{ly:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#, w - mr + 10.0, w - mr + 30.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, w - mr + 35.0, ly + 4.0, esc(&ser.name));
    }
    s.push_str("</svg>\n");
    s
}

/// Charts every numeric column of `csv` against its first column.
pub fn chart_csv(csv: &Csv, title: &str, log_x: bool) -> Result<String> {
    let x_name = csv.header.first().context("empty header")?;
    let xs = csv.column(x_name)?;
    let mut series = Vec::new();
    for name in &csv.header[1..] {
        if let Ok(ys) = csv.column(name) {
            series.push(Series { name: name.clone(), points: xs.iter().copied().zip(ys).collect() });
        }
    }
    if series.is_empty() {
        bail!("no numeric columns besides {x_name:?}");
    }
    Ok(line_chart(title, x_name, "value", &series, log_x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_short() {
        assert_eq!(config_hash("a"), config_hash("a"));
        assert_ne!(config_hash("a"), config_hash("b"));
        assert_eq!(config_hash("").len(), 16);
        assert_eq!(config_hash(""), "e3b0c44298fc1c14");
    }

    #[test]
    fn csv_round_trip() {
        let mut c = Csv::new("abc", &["x", "y"]).meta("iou", 0.5);
        c.push(vec!["1".into(), "0.25".into()]);
        let back = Csv::parse(&c.render()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.column("y").unwrap(), vec![0.25]);
    }

    #[test]
    fn chart_contains_one_polyline_per_series() {
        let mut c = Csv::new("h", &["budget", "a", "b"]);
        c.push(vec!["1".into(), "0.1".into(), "0.2".into()]);
        c.push(vec!["10".into(), "0.5".into(), "0.6".into()]);
        let svg = chart_csv(&c, "t", true).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.starts_with("<svg"));
    }
}
