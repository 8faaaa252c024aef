//! Markdown, CSV and SVG summaries of a finished run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{ResultRow, RESULTS_HEADER};
use crate::error::{Error, Result};

pub fn read_results(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == RESULTS_HEADER => {}
        _ => return Err(Error::parse(1, "unexpected results header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != 18 {
            return Err(Error::parse(i + 1, "expected 18 columns"));
        }
        let bad = |what: &str| Error::parse(i + 1, format!("bad {what}"));
        let f = |j: usize| c[j].parse::<f64>().map_err(|_| bad("number"));
        rows.push(ResultRow {
            mode: c[0].to_owned(),
            recognizer: c[1].to_owned(),
            norm: c[2].to_owned(),
            bound: f(3)?,
            attacked_set: if c[4].is_empty() {
                Vec::new()
            } else {
                c[4].split(';')
                    .map(|v| v.parse().map_err(|_| bad("attacked set")))
                    .collect::<Result<_>>()?
            },
            benign_acc: f(5)?,
            adv_acc: f(6)?,
            mean_tv: f(7)?,
            attacked_attr_acc: f(8)?,
            queries_per_inference: c[9].parse().map_err(|_| bad("query count"))?,
            expected_queries: c[10].parse().map_err(|_| bad("query count"))?,
            omega_size: c[11].parse().map_err(|_| bad("omega size"))?,
            v_size: c[12].parse().map_err(|_| bad("|V|"))?,
            queries_ok: c[13].parse().map_err(|_| bad("flag"))?,
            bound_mean: if c[14].is_empty() { None } else { Some(f(14)?) },
            bound_violations: c[15].parse().map_err(|_| bad("count"))?,
            flagged: c[16].parse().map_err(|_| bad("count"))?,
            constant_predictions: c[17].parse().map_err(|_| bad("flag"))?,
        });
    }
    Ok(rows)
}

/// Paths written by [`report`].
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub markdown: PathBuf,
    pub charts: Vec<PathBuf>,
    pub attack_count: PathBuf,
}

struct Curve {
    mode: String,
    /// `(bound, mean, std)` in bound order.
    points: Vec<(f64, f64, f64)>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (
        m,
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt(),
    )
}

fn curves(rows: &[&ResultRow]) -> Vec<Curve> {
    let singles: Vec<&ResultRow> = rows
        .iter()
        .copied()
        .filter(|r| r.attacked_set.len() == 1)
        .collect();
    let use_rows = if singles.is_empty() {
        rows.to_vec()
    } else {
        singles
    };
    let mut modes: Vec<String> = Vec::new();
    for r in &use_rows {
        if !modes.contains(&r.mode) {
            modes.push(r.mode.clone());
        }
    }
    modes
        .into_iter()
        .map(|mode| {
            let mut by_bound: Vec<(f64, Vec<f64>)> = Vec::new();
            for r in use_rows.iter().filter(|r| r.mode == mode) {
                match by_bound.iter_mut().find(|(b, _)| *b == r.bound) {
                    Some((_, v)) => v.push(r.adv_acc),
                    None => by_bound.push((r.bound, vec![r.adv_acc])),
                }
            }
            by_bound.sort_by(|a, b| a.0.total_cmp(&b.0));
            let points = by_bound
                .into_iter()
                .map(|(b, v)| {
                    let (m, s) = mean_std(&v);
                    (b, m, s)
                })
                .collect();
            Curve { mode, points }
        })
        .collect()
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn svg_chart(title: &str, curves: &[Curve]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 150.0, 40.0, 50.0);
    let xmax = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.0))
        .fold(0.0, f64::max);
    let xmax = if xmax > 0.0 { xmax } else { 1.0 };
    let px = |x: f64| left + (w - left - right) * x / xmax;
    let py = |y: f64| top + (h - top - bottom) * (1.0 - y.clamp(0.0, 1.0));
    let mut s = String::new();
    writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#).unwrap();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="24" font-size="15" text-anchor="middle">{}</text>"#,
        (w - right + left) / 2.0,
        escape(title)
    )
    .unwrap();
    let (x0, x1, y0, y1) = (px(0.0), px(xmax), py(0.0), py(1.0));
    writeln!(
        s,
        r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#
    )
    .unwrap();
    writeln!(
        s,
        r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#
    )
    .unwrap();
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        writeln!(
            s,
            r#"<text x="{}" y="{:.1}" font-size="11" text-anchor="end">{:.1}</text>"#,
            x0 - 6.0,
            py(v) + 4.0,
            v
        )
        .unwrap();
    }
    for &(b, _, _) in curves.first().map(|c| c.points.as_slice()).unwrap_or(&[]) {
        writeln!(
            s,
            r#"<text x="{:.1}" y="{}" font-size="11" text-anchor="middle">{b}</text>"#,
            px(b),
            y0 + 16.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">norm bound</text>"#,
        (x0 + x1) / 2.0,
        h - 10.0
    )
    .unwrap();
    writeln!(s, r#"<text x="16" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">adversarial accuracy</text>"#, (y0 + y1) / 2.0, (y0 + y1) / 2.0).unwrap();
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let upper: Vec<String> = c
            .points
            .iter()
            .map(|&(b, m, sd)| format!("{:.2},{:.2}", px(b), py(m + sd)))
            .collect();
        let lower: Vec<String> = c
            .points
            .iter()
            .rev()
            .map(|&(b, m, sd)| format!("{:.2},{:.2}", px(b), py(m - sd)))
            .collect();
        writeln!(
            s,
            r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
            upper.join(" "),
            lower.join(" ")
        )
        .unwrap();
        let line: Vec<String> = c
            .points
            .iter()
            .map(|&(b, m, _)| format!("{:.2},{:.2}", px(b), py(m)))
            .collect();
        writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        )
        .unwrap();
        let ly = top + 20.0 * i as f64 + 10.0;
        writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            w - right + 15.0,
            w - right + 35.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12">{}</text>"#,
            w - right + 40.0,
            ly + 4.0,
            escape(&c.mode)
        )
        .unwrap();
    }
    writeln!(s, "</svg>").unwrap();
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Writes `report.md`, one SVG chart per (recognizer, norm) and
/// `attack_count.csv` into `dir`.
pub fn report(dir: &Path) -> Result<Report> {
    let path = dir.join("results.csv");
    let text = fs::read_to_string(&path)
        .map_err(|_| Error::MissingArtifacts(format!("{} not found", path.display())))?;
    let rows = read_results(&text)?;
    if rows.is_empty() {
        return Err(Error::MissingArtifacts(format!(
            "{} has no result rows",
            path.display()
        )));
    }
    let mut md = String::new();
    writeln!(md, "# Run report\n").unwrap();
    writeln!(
        md,
        "CBM-lite trains its linear head after the recognizer is frozen, not jointly with weighted concept and class losses.\n"
    )
    .unwrap();

    let mut groups: BTreeMap<(String, String), Vec<&ResultRow>> = BTreeMap::new();
    for r in &rows {
        groups
            .entry((r.recognizer.clone(), r.norm.clone()))
            .or_default()
            .push(r);
    }

    writeln!(
        md,
        "## Benign accuracy\n\n| recognizer | mode | benign accuracy |\n|---|---|---|"
    )
    .unwrap();
    let mut seen: Vec<(String, String)> = Vec::new();
    for r in &rows {
        let key = (r.recognizer.clone(), r.mode.clone());
        if !seen.contains(&key) {
            writeln!(
                md,
                "| {} | {} | {:.4} |",
                r.recognizer, r.mode, r.benign_acc
            )
            .unwrap();
            seen.push(key);
        }
    }

    let mut charts = Vec::new();
    writeln!(md, "\n## Adversarial accuracy vs bound\n").unwrap();
    for ((recognizer, norm), g) in &groups {
        let cs = curves(g);
        let name = format!("adv_acc_{recognizer}_{norm}.svg");
        fs::write(
            dir.join(&name),
            svg_chart(&format!("{recognizer} recognizer, {norm} attacks"), &cs),
        )?;
        charts.push(dir.join(&name));
        writeln!(md, "![{recognizer} {norm}]({name})\n").unwrap();
        write!(md, "| mode |").unwrap();
        for p in &cs[0].points {
            write!(md, " {} |", p.0).unwrap();
        }
        writeln!(md, "\n|---|{}", "---|".repeat(cs[0].points.len())).unwrap();
        for c in &cs {
            write!(md, "| {} |", c.mode).unwrap();
            for p in &c.points {
                write!(md, " {:.3} ± {:.3} |", p.1, p.2).unwrap();
            }
            writeln!(md).unwrap();
        }
        writeln!(md).unwrap();
    }

    let mut counts =
        String::from("recognizer,norm,mode,attacked_count,bound,adv_acc_mean,adv_acc_std,sets\n");
    writeln!(md, "## Attacked-attribute count at the largest bound\n\n| recognizer | norm | mode | m | adv accuracy |\n|---|---|---|---|---|").unwrap();
    for ((recognizer, norm), g) in &groups {
        let top = g.iter().map(|r| r.bound).fold(f64::NEG_INFINITY, f64::max);
        let mut by_m: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
        for r in g.iter().filter(|r| r.bound == top) {
            by_m.entry((r.mode.clone(), r.attacked_set.len()))
                .or_default()
                .push(r.adv_acc);
        }
        for ((mode, m), v) in by_m {
            let (mean, sd) = mean_std(&v);
            writeln!(
                counts,
                "{recognizer},{norm},{mode},{m},{top:.6},{mean:.6},{sd:.6},{}",
                v.len()
            )
            .unwrap();
            writeln!(
                md,
                "| {recognizer} | {norm} | {mode} | {m} | {mean:.3} ± {sd:.3} |"
            )
            .unwrap();
        }
    }
    let attack_count = dir.join("attack_count.csv");
    fs::write(&attack_count, counts)?;

    let constant: Vec<&ResultRow> = rows
        .iter()
        .filter(|r| r.constant_predictions && r.mode.starts_with("rnpc"))
        .collect();
    if !constant.is_empty() {
        writeln!(md, "\n## Degenerate radii\n").unwrap();
        let mut modes: Vec<&str> = constant.iter().map(|r| r.mode.as_str()).collect();
        modes.dedup();
        writeln!(
            md,
            "Predictions are input-independent for: {}.",
            modes.join(", ")
        )
        .unwrap();
    }

    writeln!(md, "\n## Bound verification\n").unwrap();
    match fs::read_to_string(dir.join("bounds_summary.txt")) {
        Ok(s) => writeln!(md, "```\n{}```", s).unwrap(),
        Err(_) => writeln!(md, "No bound summary in this directory.").unwrap(),
    }
    let violations: usize = rows.iter().map(|r| r.bound_violations).sum();
    let queries_ok = rows.iter().all(|r| r.queries_ok);
    writeln!(
        md,
        "\nPer-row bound violations: {violations}. Query accounting on every row: {}.",
        if queries_ok { "pass" } else { "FAIL" }
    )
    .unwrap();
    writeln!(
        md,
        "\nThe smoothing ablation uses a Gaussian mechanism, which gives (ε, δ)-DP rather than pure ε-DP; its rows are a directional check only."
    )
    .unwrap();
    let markdown = dir.join("report.md");
    fs::write(&markdown, md)?;
    Ok(Report {
        markdown,
        charts,
        attack_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(mode: &str, bound: f64, set: Vec<usize>, adv: f64) -> ResultRow {
        ResultRow {
            mode: mode.into(),
            recognizer: "plain".into(),
            norm: "linf".into(),
            bound,
            attacked_set: set,
            benign_acc: 0.99,
            adv_acc: adv,
            mean_tv: 0.0,
            attacked_attr_acc: 0.5,
            queries_per_inference: 10,
            expected_queries: 10,
            omega_size: 1000,
            v_size: 10,
            queries_ok: true,
            bound_mean: None,
            bound_violations: 0,
            flagged: 0,
            constant_predictions: false,
        }
    }

    #[test]
    fn empty_results_are_missing_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            report(dir.path()),
            Err(Error::MissingArtifacts(_))
        ));
        fs::write(
            dir.path().join("results.csv"),
            format!("{RESULTS_HEADER}\n"),
        )
        .unwrap();
        assert!(matches!(
            report(dir.path()),
            Err(Error::MissingArtifacts(_))
        ));
    }

    #[test]
    fn one_mode_gives_one_curve_with_a_point_per_bound() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<ResultRow> = [0.0, 0.05, 0.1]
            .iter()
            .flat_map(|&b| {
                [
                    row("npc", b, vec![1], 0.9 - b),
                    row("npc", b, vec![2], 0.8 - b),
                ]
            })
            .collect();
        fs::write(
            dir.path().join("results.csv"),
            super::super::write_results(&rows),
        )
        .unwrap();
        let back =
            read_results(&fs::read_to_string(dir.path().join("results.csv")).unwrap()).unwrap();
        assert_eq!(back.len(), rows.len());
        let rep = report(dir.path()).unwrap();
        let svg = fs::read_to_string(&rep.charts[0]).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let lines: Vec<_> = doc
            .descendants()
            .filter(|n| n.has_tag_name("polyline"))
            .collect();
        assert_eq!(lines.len(), 1);
        assert_eq!(
            lines[0]
                .attribute("points")
                .unwrap()
                .split_whitespace()
                .count(),
            3
        );
    }
}
