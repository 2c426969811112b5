//! Minimal SVG charts: a data-efficiency line chart and a DIF histogram.

use std::fmt::Write;
use std::path::Path;

use anyhow::{Context, Result};

use evidx_core::eval::counterfactual::HistogramBin;
use evidx_core::eval::sweep::SweepResult;
use evidx_core::transfer::Strategy;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 28.0;
const BOTTOM: f64 = 52.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
];

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
}

fn axes(
    out: &mut String,
    f: &Frame,
    xticks: &[(f64, String)],
    yticks: &[(f64, String)],
    xlabel: &str,
    ylabel: &str,
) {
    let (x0, x1) = (f.px(f.x.0), f.px(f.x.1));
    let (y0, y1) = (f.py(f.y.0), f.py(f.y.1));
    let _ = writeln!(
        out,
        r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#
    );
    for (v, label) in xticks {
        let x = f.px(*v);
        let _ = writeln!(
            out,
            r#"<line x1="{x}" y1="{y0}" x2="{x}" y2="{}" stroke="black"/><text x="{x}" y="{}" text-anchor="middle">{}</text>"#,
            y0 + 4.0,
            y0 + 18.0,
            escape(label)
        );
    }
    for (v, label) in yticks {
        let y = f.py(*v);
        let _ = writeln!(
            out,
            r##"<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#e0e0e0"/><text x="{}" y="{}" text-anchor="end">{}</text>"##,
            x0 - 6.0,
            y + 4.0,
            escape(label)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        H - 12.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(ylabel)
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Mean metric per fraction for every strategy, with the best baseline at
/// full data drawn as a dashed horizontal line.
pub fn sweep_svg(result: &SweepResult, metric: &str) -> Result<String> {
    let use_auroc = metric == "auroc";
    let mut fractions: Vec<f64> = result.cells.iter().map(|c| c.fraction).collect();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();
    let mut strategies: Vec<Strategy> = result.cells.iter().map(|c| c.strategy).collect();
    strategies.sort();
    strategies.dedup();
    anyhow::ensure!(!fractions.is_empty(), "no sweep cells to plot");

    let mut series = Vec::new();
    for s in &strategies {
        let pts: Vec<(f64, f64)> = fractions
            .iter()
            .filter_map(|&f| {
                let (acc, auroc) = result.mean(*s, f)?;
                if use_auroc { auroc } else { Some(acc * 100.0) }.map(|y| (f, y))
            })
            .collect();
        series.push((s.to_string(), pts));
    }
    let reference = result.reference.as_ref().and_then(|r| {
        if use_auroc {
            r.auroc
        } else {
            Some(r.accuracy * 100.0)
        }
        .map(|y| (r.strategy, y))
    });

    let ys: Vec<f64> = series
        .iter()
        .flat_map(|(_, p)| p.iter().map(|q| q.1))
        .chain(reference.map(|r| r.1))
        .collect();
    let (lo, hi) = ys
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| {
            (a.min(y), b.max(y))
        });
    let pad = ((hi - lo) * 0.1).max(if use_auroc { 0.01 } else { 1.0 });
    let xspan = if fractions.len() > 1 {
        (fractions[0] - 0.05, fractions[fractions.len() - 1] + 0.05)
    } else {
        (fractions[0] - 0.1, fractions[0] + 0.1)
    };
    let f = Frame {
        x: xspan,
        y: (lo - pad, hi + pad),
    };

    let mut out = String::new();
    let ylabel = if use_auroc { "AUROC" } else { "Accuracy (%)" };
    header(&mut out, &format!("{ylabel} vs. training data"));
    let xticks: Vec<(f64, String)> = fractions
        .iter()
        .map(|&x| (x, format!("{:.0}%", x * 100.0)))
        .collect();
    let yticks: Vec<(f64, String)> = (0..=4)
        .map(|i| {
            let v = f.y.0 + (f.y.1 - f.y.0) * i as f64 / 4.0;
            (
                v,
                if use_auroc {
                    format!("{v:.3}")
                } else {
                    format!("{v:.1}")
                },
            )
        })
        .collect();
    axes(
        &mut out,
        &f,
        &xticks,
        &yticks,
        "Fraction of training data",
        ylabel,
    );

    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for &(x, y) in pts {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                f.px(x),
                f.py(y)
            );
        }
        legend(&mut out, i, name, color, false);
    }
    if let Some((s, y)) = reference {
        let _ = writeln!(
            out,
            r#"<line x1="{}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="gray" stroke-dasharray="6 4"/>"#,
            f.px(f.x.0),
            f.px(f.x.1),
            y = f.py(y)
        );
        legend(&mut out, series.len(), &format!("{s} @ 100%"), "gray", true);
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn legend(out: &mut String, i: usize, name: &str, color: &str, dashed: bool) {
    let x = W - RIGHT - 150.0;
    let y = H - BOTTOM - 16.0 * (i as f64 + 1.0);
    let dash = if dashed {
        r#" stroke-dasharray="6 4""#
    } else {
        ""
    };
    let _ = writeln!(
        out,
        r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"{dash}/><text x="{}" y="{}">{}</text>"#,
        x + 20.0,
        x + 26.0,
        y + 4.0,
        escape(name)
    );
}

pub fn read_histogram_csv(path: &Path) -> Result<Vec<HistogramBin>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut bins = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        anyhow::ensure!(
            parts.len() == 3,
            "{}:{}: expected bin_low,bin_high,count",
            path.display(),
            i + 1
        );
        bins.push(HistogramBin {
            low: parts[0].parse()?,
            high: parts[1].parse()?,
            count: parts[2].parse()?,
        });
    }
    Ok(bins)
}

pub fn histogram_svg(bins: &[HistogramBin]) -> String {
    let max = bins.iter().map(|b| b.count).max().unwrap_or(0).max(1) as f64;
    let xmax = bins.last().map_or(1.0, |b| b.high);
    let f = Frame {
        x: (0.0, xmax),
        y: (0.0, max * 1.1),
    };
    let mut out = String::new();
    header(&mut out, "|P(corrupted) - P(original)|");
    let xticks: Vec<(f64, String)> = (0..=5)
        .map(|i| {
            let v = xmax * i as f64 / 5.0;
            (v, format!("{v:.1}"))
        })
        .collect();
    let yticks: Vec<(f64, String)> = (0..=4)
        .map(|i| {
            let v = f.y.1 * i as f64 / 4.0;
            (v, format!("{v:.0}"))
        })
        .collect();
    axes(&mut out, &f, &xticks, &yticks, "DIF", "Number of pairs");
    for b in bins.iter().filter(|b| b.count > 0) {
        let (x0, x1) = (f.px(b.low), f.px(b.high));
        let (y0, y1) = (f.py(0.0), f.py(b.count as f64));
        let _ = writeln!(
            out,
            r##"<rect x="{x0:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="#1f77b4" stroke="white"/>"##,
            (x1 - x0).max(0.5),
            y0 - y1
        );
    }
    out.push_str("</svg>\n");
    out
}
