//! Renders metrics CSV into aligned text tables and a static SVG plot.

use indexmap::IndexMap;

use crate::error::{Error, Result};

use super::run::CSV_HEADER;

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub run_id: String,
    pub arm: String,
    pub step: usize,
    pub domain: String,
    pub bs: usize,
    pub batch_err: f64,
    pub cum_err: f64,
    pub src_err: Option<f64>,
    pub skips: usize,
}

pub fn parse_metrics(text: &str) -> Result<Vec<Row>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::Data("metrics CSV header does not match".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Data(format!("metrics CSV line {}: malformed", i + 2));
            if f.len() != 12 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
            Ok(Row {
                run_id: f[0].to_string(),
                arm: f[1].to_string(),
                step: int(f[2])?,
                domain: f[3].to_string(),
                bs: int(f[4])?,
                batch_err: num(f[6])?,
                cum_err: num(f[7])?,
                src_err: if f[8].is_empty() { None } else { Some(num(f[8])?) },
                skips: int(f[9])?,
            })
        })
        .collect()
}

/// Rows grouped by `run_id/arm`, in first-appearance order.
fn by_arm(rows: &[Row]) -> IndexMap<String, Vec<&Row>> {
    let mut out: IndexMap<String, Vec<&Row>> = IndexMap::new();
    for r in rows {
        out.entry(format!("{}/{}", r.run_id, r.arm)).or_default().push(r);
    }
    out
}

fn table(header: &[String], body: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for row in body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header) + "\n";
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in body {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

pub fn text_report(rows: &[Row]) -> String {
    let arms = by_arm(rows);
    let mut domains: Vec<&str> = Vec::new();
    for r in rows {
        if !domains.contains(&r.domain.as_str()) {
            domains.push(&r.domain);
        }
    }
    let header: Vec<String> = ["arm", "samples", "err%", "last-src%", "skips"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let body: Vec<Vec<String>> = arms
        .iter()
        .map(|(name, rs)| {
            let samples: usize = rs.iter().map(|r| r.bs).sum();
            let last = rs.last().expect("nonempty group");
            let src = rs.iter().rev().find_map(|r| r.src_err);
            vec![
                name.clone(),
                samples.to_string(),
                format!("{:.2}", 100.0 * last.cum_err),
                src.map(|v| format!("{:.2}", 100.0 * v)).unwrap_or_else(|| "-".into()),
                last.skips.to_string(),
            ]
        })
        .collect();
    let mut out = table(&header, &body);
    out.push('\n');
    let mut header = vec!["arm".to_string()];
    header.extend(domains.iter().map(|d| d.to_string()));
    let body: Vec<Vec<String>> = arms
        .iter()
        .map(|(name, rs)| {
            let mut row = vec![name.clone()];
            for d in &domains {
                let (w, n) = rs
                    .iter()
                    .filter(|r| r.domain == *d)
                    .fold((0.0, 0usize), |(w, n), r| (w + r.batch_err * r.bs as f64, n + r.bs));
                row.push(if n == 0 {
                    "-".into()
                } else {
                    format!("{:.2}", 100.0 * w / n as f64)
                });
            }
            row
        })
        .collect();
    out.push_str(&table(&header, &body));
    out
}

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn panel(
    out: &mut String,
    top: f64,
    title: &str,
    series: &[(String, Vec<(f64, f64)>)],
    max_x: f64,
) {
    let (left, width, height) = (60.0, 620.0, 200.0);
    out.push_str(&format!(
        "<text x=\"{left}\" y=\"{:.1}\" font-size=\"13\">{title}</text>\n",
        top - 8.0
    ));
    out.push_str(&format!(
        "<rect x=\"{left}\" y=\"{top:.1}\" width=\"{width}\" height=\"{height}\" fill=\"none\" stroke=\"#333\"/>\n"
    ));
    for tick in 0..=4 {
        let v = tick as f64 * 0.25;
        let y = top + height * (1.0 - v);
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\">{:.0}%</text>\n",
            left - 4.0,
            y + 3.0,
            v * 100.0
        ));
    }
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\">step {max_x:.0}</text>\n",
        left + width,
        top + height + 14.0
    ));
    for (i, (_, pts)) in series.iter().enumerate() {
        let coords: Vec<String> = pts
            .iter()
            .map(|(x, y)| {
                format!(
                    "{:.1},{:.1}",
                    left + width * x / max_x.max(1.0),
                    top + height * (1.0 - y.clamp(0.0, 1.0))
                )
            })
            .collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            COLORS[i % COLORS.len()],
            coords.join(" ")
        ));
    }
}

/// Cumulative target error per arm and, when probes are logged, source
/// error per arm, against stream index.
pub fn svg_report(rows: &[Row]) -> String {
    let arms = by_arm(rows);
    let max_x = rows.iter().map(|r| r.step as f64).fold(0.0, f64::max);
    let target: Vec<(String, Vec<(f64, f64)>)> = arms
        .iter()
        .map(|(n, rs)| (n.clone(), rs.iter().map(|r| (r.step as f64, r.cum_err)).collect()))
        .collect();
    let source: Vec<(String, Vec<(f64, f64)>)> = arms
        .iter()
        .map(|(n, rs)| {
            (
                n.clone(),
                rs.iter().filter_map(|r| r.src_err.map(|e| (r.step as f64, e))).collect(),
            )
        })
        .filter(|(_, pts): &(String, Vec<_>)| !pts.is_empty())
        .collect();
    let height = if source.is_empty() { 300 } else { 560 };
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"860\" height=\"{height}\" font-family=\"sans-serif\">\n"
    );
    panel(&mut out, 40.0, "target error (cumulative)", &target, max_x);
    if !source.is_empty() {
        panel(&mut out, 300.0, "source error (probes)", &source, max_x);
    }
    for (i, (name, _)) in target.iter().enumerate() {
        let y = 50.0 + 16.0 * i as f64;
        out.push_str(&format!(
            "<rect x=\"695\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"710\" y=\"{:.1}\" font-size=\"11\">{name}</text>\n",
            y - 9.0,
            COLORS[i % COLORS.len()],
            y
        ));
    }
    out.push_str("</svg>\n");
    out
}
