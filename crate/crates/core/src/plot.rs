//! Static SVG log-log plots of aggregated risk.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::fit::FitResult;
use crate::harness::AggregateRow;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 64.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Risk against `N`, one series per `M`.
    N,
    /// Risk against `M`, one series per `N`.
    M,
}

impl Axis {
    pub fn file_name(self) -> &'static str {
        match self {
            Axis::N => "risk_vs_n.svg",
            Axis::M => "risk_vs_m.svg",
        }
    }

    fn split(self, row: &AggregateRow) -> (usize, usize) {
        match self {
            Axis::N => (row.m, row.n),
            Axis::M => (row.n, row.m),
        }
    }
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x.log2() - self.x0) / (self.x1 - self.x0).max(1e-12) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y.log2() - self.y0) / (self.y1 - self.y0).max(1e-12) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Plots `mean_risk − σ²` on log2 axes. Cells with non-positive excess are
/// left out. With a fit, each series gets its fitted curve as a dashed line.
pub fn risk_plot(rows: &[AggregateRow], fit: Option<&FitResult>, sigma2: f64, axis: Axis) -> String {
    let mut series: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for row in rows {
        let (key, x) = axis.split(row);
        let y = row.mean_risk - sigma2;
        if y > 0.0 && y.is_finite() {
            series.entry(key).or_default().push((x as f64, y));
        }
    }
    for pts in series.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let curve = |key: usize, x: f64| -> f64 {
        let fit = fit.expect("only called with a fit");
        match axis {
            Axis::N => fit.predict(key as f64, x) - sigma2,
            Axis::M => fit.predict(x, key as f64) - sigma2,
        }
    };

    let mut ys: Vec<f64> = series.values().flatten().map(|p| p.1.log2()).collect();
    let xs: Vec<f64> = series.values().flatten().map(|p| p.0.log2()).collect();
    if fit.is_some() {
        for (&key, pts) in &series {
            for &(x, _) in pts {
                let y = curve(key, x);
                if y > 0.0 {
                    ys.push(y.log2());
                }
            }
        }
    }
    let lo = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let frame = if xs.is_empty() {
        Frame { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 }
    } else {
        Frame {
            x0: lo(&xs).floor(),
            x1: hi(&xs).ceil().max(lo(&xs).floor() + 1.0),
            y0: lo(&ys).floor(),
            y1: hi(&ys).ceil().max(lo(&ys).floor() + 1.0),
        }
    };
    let (xlabel, key_name) = match axis {
        Axis::N => ("N", "M"),
        Axis::M => ("M", "N"),
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        right - left,
        bottom - top
    );
    for k in frame.x0 as i64..=frame.x1 as i64 {
        let x = frame.px(2f64.powi(k as i32));
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{bottom}" x2="{x:.2}" y2="{}" stroke="black"/><text x="{x:.2}" y="{}" text-anchor="middle">2^{k}</text>"#,
            bottom + 5.0,
            bottom + 20.0
        );
    }
    for k in frame.y0 as i64..=frame.y1 as i64 {
        let y = frame.py(2f64.powi(k as i32));
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{y:.2}" x2="{left}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">2^{k}</text>"#,
            left - 5.0,
            left - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape("risk − σ²")
    );

    for (i, (&key, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            path.join(" ")
        );
        for &(x, y) in pts {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                frame.px(x),
                frame.py(y)
            );
        }
        if fit.is_some() && pts.len() > 1 {
            let (a, b) = (pts[0].0.log2(), pts[pts.len() - 1].0.log2());
            let line: Vec<String> = (0..=32)
                .map(|j| 2f64.powf(a + (b - a) * j as f64 / 32.0))
                .filter_map(|x| {
                    let y = curve(key, x);
                    (y > 0.0).then(|| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
                })
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-dasharray="4 3"/>"#,
                line.join(" ")
            );
        }
        let ly = top + 16.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly:.2}" fill="{color}">{key_name}={key}</text>"#,
            right - 80.0
        );
    }
    if let Some(fit) = fit {
        let _ = writeln!(
            s,
            r#"<text x="{left}" y="{}">{}</text>"#,
            top - 12.0,
            escape(&format!(
                "fit: a1={:.3}, a2={:.3}, c1={:.3}, c2={:.3}",
                fit.a1, fit.a2, fit.c1, fit.c2
            ))
        );
    }
    s.push_str("</svg>\n");
    s
}
