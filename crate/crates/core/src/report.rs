//! Baseline-vs-method delta tables and small static SVG charts.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Whether larger values of a metric are better.
pub fn higher_is_better(metric: &str) -> Option<bool> {
    match metric {
        "dice" | "jaccard" => Some(true),
        "hd95" | "asd" => Some(false),
        _ => None,
    }
}

/// Metric a column refers to: `dice`, `dice_median`, `hd95_mean`, …
fn metric_of(column: &str) -> Option<&'static str> {
    ["dice", "jaccard", "hd95", "asd"]
        .into_iter()
        .find(|m| column == *m || column.strip_prefix(m).is_some_and(|r| r.starts_with('_')))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Better,
    Worse,
    Same,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Better => "better",
            Verdict::Worse => "worse",
            Verdict::Same => "same",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaRow {
    pub key: String,
    pub column: String,
    pub baseline: f64,
    pub method: f64,
    /// `method - baseline`.
    pub delta: f64,
    pub higher_is_better: bool,
    pub verdict: Verdict,
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn parse_table(text: &str, what: &str) -> Result<Table> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::invalid(format!("{what} CSV is empty")))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(|s| s.trim().to_string()).collect()).collect();
    if let Some(r) = rows.iter().find(|r| r.len() != header.len()) {
        return Err(Error::invalid(format!(
            "{what} row {:?} has {} fields for {} columns",
            r.first(),
            r.len(),
            header.len()
        )));
    }
    Ok(Table { header, rows })
}

/// Deltas for every metric column of rows sharing a key (first column).
/// Both CSVs must have identical headers and the same keys in order.
pub fn report_compare(baseline_csv: &str, method_csv: &str) -> Result<Vec<DeltaRow>> {
    let b = parse_table(baseline_csv, "baseline")?;
    let m = parse_table(method_csv, "method")?;
    if b.header != m.header {
        return Err(Error::invalid(format!(
            "column mismatch: baseline {:?} vs method {:?}",
            b.header, m.header
        )));
    }
    let metric_cols: Vec<(usize, &'static str)> = b
        .header
        .iter()
        .enumerate()
        .skip(1)
        .filter_map(|(i, c)| metric_of(c).map(|k| (i, k)))
        .collect();
    if metric_cols.is_empty() {
        return Err(Error::invalid("no metric columns to compare"));
    }
    let bkeys: Vec<&str> = b.rows.iter().map(|r| r[0].as_str()).collect();
    let mkeys: Vec<&str> = m.rows.iter().map(|r| r[0].as_str()).collect();
    if bkeys != mkeys {
        return Err(Error::invalid(format!("row keys differ: {bkeys:?} vs {mkeys:?}")));
    }
    let mut out = Vec::new();
    for (br, mr) in b.rows.iter().zip(&m.rows) {
        for &(i, metric) in &metric_cols {
            // empty cells (failed runs) have nothing to compare
            if br[i].is_empty() || mr[i].is_empty() {
                continue;
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::invalid(format!("non-numeric {} value {s:?}", b.header[i])))
            };
            let (bv, mv) = (parse(&br[i])?, parse(&mr[i])?);
            let hib = higher_is_better(metric).expect("metric column");
            let delta = mv - bv;
            let verdict = if delta == 0.0 {
                Verdict::Same
            } else if (delta > 0.0) == hib {
                Verdict::Better
            } else {
                Verdict::Worse
            };
            out.push(DeltaRow {
                key: br[0].clone(),
                column: b.header[i].clone(),
                baseline: bv,
                method: mv,
                delta,
                higher_is_better: hib,
                verdict,
            });
        }
    }
    Ok(out)
}

pub fn delta_csv(rows: &[DeltaRow]) -> String {
    let mut s = String::from("key,metric,baseline,method,delta,direction,verdict\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:+.6},{},{}",
            r.key,
            r.column,
            r.baseline,
            r.method,
            r.delta,
            if r.higher_is_better { "↑" } else { "↓" },
            r.verdict.as_str()
        );
    }
    s
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bar chart of the per-label median with the individual values drawn as
/// dots. Labels without values get an empty slot.
pub fn bar_chart_svg(title: &str, y_label: &str, series: &[(String, Vec<f64>)]) -> String {
    let (w, h) = (120.0 + 90.0 * series.len().max(1) as f64, 320.0);
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 60.0);
    let plot_h = h - top - bottom;
    let max = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let y_max = if max > 0.0 { max * 1.1 } else { 1.0 };
    let y = |v: f64| top + plot_h * (1.0 - v / y_max);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, esc(title));
    let _ = writeln!(
        s,
        r##"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="#333"/><line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="#333"/>"##,
        h - bottom,
        h - bottom,
        w - right,
        h - bottom
    );
    for t in 0..=4 {
        let v = y_max * t as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{:.1}" text-anchor="end" fill="#555">{v:.3}</text>"##,
            left - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text transform="translate(16,{:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        top + plot_h / 2.0,
        esc(y_label)
    );
    let slot = (w - left - right) / series.len().max(1) as f64;
    for (i, (label, values)) in series.iter().enumerate() {
        let cx = left + slot * (i as f64 + 0.5);
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if !finite.is_empty() {
            let med = crate::experiment::median(&finite);
            let bw = slot * 0.6;
            let _ = writeln!(
                s,
                r##"<rect x="{:.1}" y="{:.1}" width="{bw:.1}" height="{:.1}" fill="#6a9fd4"/>"##,
                cx - bw / 2.0,
                y(med),
                (h - bottom - y(med)).max(0.0)
            );
            for v in &finite {
                let _ = writeln!(s, r##"<circle cx="{cx:.1}" cy="{:.1}" r="3" fill="#1d3557"/>"##, y(*v));
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            h - bottom + 18.0,
            esc(label)
        );
    }
    s.push_str("</svg>\n");
    s
}
