//! Markdown report, SVG scatter plots and graph files. Output depends only on
//! the inputs, so re-rendering the same artifacts gives identical bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{off_diagonal_pairs, TransferReport};
use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub markdown: PathBuf,
    pub embedding_svg: PathBuf,
    pub scatter_svg: PathBuf,
    pub graph_dot: PathBuf,
    pub graph_json: PathBuf,
    pub accuracy_csv: PathBuf,
    pub distances_csv: PathBuf,
    pub report_json: PathBuf,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Least-squares `(slope, intercept)`; `None` for constant `x`.
fn fit_line(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len() as f64;
    if x.len() < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// A 480x360 scatter plot with optional point labels and fitted line.
pub fn scatter_svg(points: &[(f64, f64)], labels: Option<&[String]>, title: &str, axes: (&str, &str), line: bool) -> String {
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const M: f64 = 48.0;
    let range = |v: Vec<f64>| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        }
    };
    let (x0, x1) = range(points.iter().map(|p| p.0).collect());
    let (y0, y1) = range(points.iter().map(|p| p.1).collect());
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{M}" y1="{M}" x2="{M}" y2="{b}" stroke="black"/>"#,
        b = H - M,
        r = W - M
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
        W / 2.0,
        H - 12.0,
        escape(axes.0)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(axes.1)
    );
    for (v, label) in [(x0, format!("{x0:.3}")), (x1, format!("{x1:.3}"))] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="10">{label}</text>"#,
            sx(v),
            H - M + 14.0
        );
    }
    for (v, label) in [(y0, format!("{y0:.3}")), (y1, format!("{y1:.3}"))] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end" font-size="10">{label}</text>"#,
            M - 4.0,
            sy(v)
        );
    }
    if line {
        let (x, y): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
        if let Some((m, c)) = fit_line(&x, &y) {
            let _ = writeln!(
                s,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="crimson" stroke-width="1.5"/>"#,
                sx(x0),
                sy(m * x0 + c),
                sx(x1),
                sy(m * x1 + c)
            );
        }
    }
    for (i, &(x, y)) in points.iter().enumerate() {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="steelblue"/>"#, sx(x), sy(y));
        if let Some(l) = labels.and_then(|l| l.get(i)) {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" font-size="9">{}</text>"#,
                sx(x) + 5.0,
                sy(y) - 5.0,
                escape(l)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

pub fn render_markdown(report: &TransferReport, emb: &EmbeddingSet) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {} / {} / seed {}\n", report.experiment, report.tag.name(), report.seed);
    let _ = writeln!(s, "| quantity | value |\n|---|---|");
    let _ = writeln!(s, "| domains | {} |", report.accuracy.domain_ids.len());
    let _ = writeln!(s, "| mean diagonal accuracy | {} |", fmt_opt(report.diagonal_mean));
    let _ = writeln!(s, "| mean off-diagonal accuracy | {} |", fmt_opt(report.off_diagonal_mean));
    let _ = writeln!(s, "| PCC (off-diagonal accuracy vs distance) | {} |", fmt_opt(report.pcc));
    let _ = writeln!(
        s,
        "| embedding dims (raw / kept) | {} / {} |",
        emb.raw_dim,
        emb.standardized.kept.len()
    );
    let _ = writeln!(s, "| source-model epochs | {} |\n", report.accuracy.epochs);
    let _ = writeln!(s, "## Accuracy (row = source, column = target)\n");
    let ids = &report.accuracy.domain_ids;
    let header: Vec<String> = ids.iter().map(u32::to_string).collect();
    let _ = writeln!(s, "| src | {} |", header.join(" | "));
    let _ = writeln!(s, "|---|{}", "---|".repeat(ids.len()));
    for (id, row) in ids.iter().zip(&report.accuracy.cells) {
        let cells: Vec<String> = row.iter().map(|c| c.map_or_else(|| "NA".into(), |v| format!("{v:.3}"))).collect();
        let _ = writeln!(s, "| {id} | {} |", cells.join(" | "));
    }
    let _ = writeln!(s, "\n## Domains\n");
    let _ = writeln!(s, "| id | label | examples |\n|---|---|---|");
    for ((id, l), n) in emb.domain_ids.iter().zip(&emb.labels).zip(&emb.sample_counts) {
        let _ = writeln!(s, "| {id} | {l} | {n} |");
    }
    let _ = writeln!(s, "\n## Figures\n");
    let _ = writeln!(s, "![embedding](embedding.svg)\n");
    let _ = writeln!(s, "![accuracy vs distance](accuracy_vs_distance.svg)\n");
    let _ = writeln!(s, "Knowledge graph: `graph.dot` (render with `dot -Tsvg graph.dot`).");
    s
}

fn matrix_csv(ids: &[u32], m: &[Vec<f64>]) -> String {
    let mut s = String::from("domain_id");
    for id in ids {
        let _ = write!(s, ",{id}");
    }
    s.push('\n');
    for (id, row) in ids.iter().zip(m) {
        let _ = write!(s, "{id}");
        for v in row {
            let _ = write!(s, ",{v:.9e}");
        }
        s.push('\n');
    }
    s
}

/// Writes data tables, markdown, plots and graph files into `dir`.
pub fn write_report(dir: &Path, report: &TransferReport, emb: &EmbeddingSet) -> Result<ReportFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ReportFiles {
        markdown: dir.join("report.md"),
        embedding_svg: dir.join("embedding.svg"),
        scatter_svg: dir.join("accuracy_vs_distance.svg"),
        graph_dot: dir.join("graph.dot"),
        graph_json: dir.join("graph.json"),
        accuracy_csv: dir.join("accuracy.csv"),
        distances_csv: dir.join("distances.csv"),
        report_json: dir.join("report.json"),
    };
    write(
        &files.report_json,
        &serde_json::to_string_pretty(report).expect("report serializes"),
    )?;
    write(&files.accuracy_csv, &report.accuracy.to_csv())?;
    write(&files.distances_csv, &matrix_csv(&report.accuracy.domain_ids, &report.distances))?;
    let coords: Vec<(f64, f64)> = emb
        .reduced
        .iter()
        .map(|r| (r.first().copied().unwrap_or(0.0), r.get(1).copied().unwrap_or(0.0)))
        .collect();
    let labels: Vec<String> = emb.domain_ids.iter().zip(&emb.labels).map(|(id, l)| format!("{id} {l}")).collect();
    write(
        &files.embedding_svg,
        &scatter_svg(&coords, Some(&labels), "Domain embedding", ("component 1", "component 2"), false),
    )?;
    let (acc, dist) = off_diagonal_pairs(&report.accuracy, emb)?;
    let pts: Vec<(f64, f64)> = dist.into_iter().zip(acc).collect();
    let title = format!("Accuracy vs distance (PCC {})", fmt_opt(report.pcc));
    write(
        &files.scatter_svg,
        &scatter_svg(&pts, None, &title, ("domain distance", "target accuracy"), true),
    )?;
    let graph = emb.graph()?;
    write(&files.graph_dot, &graph.to_dot())?;
    write(&files.graph_json, &serde_json::to_string_pretty(&graph).expect("graph serializes"))?;
    write(&files.markdown, &render_markdown(report, emb))?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fitted_line_recovers_exact_relation() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let (m, c) = fit_line(&x, &y).unwrap();
        assert!((m + 0.5).abs() < 1e-12 && (c - 2.0).abs() < 1e-12);
        assert!(fit_line(&[1.0, 1.0], &[0.0, 1.0]).is_none());
    }

    #[test]
    fn scatter_is_well_formed_and_stable() {
        let pts = [(0.1, 0.9), (0.5, 0.4), (0.9, 0.2)];
        let labels = vec!["a<b".to_string(), "c".into(), "d".into()];
        let a = scatter_svg(&pts, Some(&labels), "t", ("x", "y"), true);
        assert_eq!(a, scatter_svg(&pts, Some(&labels), "t", ("x", "y"), true));
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert_eq!(a.matches("<circle").count(), 3);
        assert!(a.contains("a&lt;b") && a.contains("crimson"));
        assert!(scatter_svg(&[], None, "empty", ("x", "y"), true).contains("</svg>"));
    }
}
