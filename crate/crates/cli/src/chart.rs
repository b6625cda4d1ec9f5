//! Self-contained SVG line charts of metric tables.
//!
//! Output depends only on the table and the chart configuration: series
//! follow the configured order and every coordinate is printed with a fixed
//! number of decimals.

use std::fmt::Write;

use noisybp::MetricsTable;

use crate::CliError;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 190.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 55.0;

/// One curve: `metric` of `variant` at `node` (`None` is the network
/// average) against the table's x values.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesSpec {
    pub variant: String,
    pub metric: String,
    pub node: Option<usize>,
    pub label: String,
    pub dashed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChartKind {
    /// Values against x, one polyline per series.
    Lines(Vec<SeriesSpec>),
    /// Network-average `pd` against `pf`, paired by x, one curve per variant.
    Roc(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChartConfig {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub width: f64,
    pub height: f64,
    pub kind: ChartKind,
}

impl ChartConfig {
    /// Measured DSNR per variant, with dashed analytical predictions when
    /// the table has them.
    pub fn dsnr(table: &MetricsTable) -> Self {
        let mut series = Vec::new();
        for v in table.variants() {
            for (metric, dashed, suffix) in [("dsnr_db", false, ""), ("predicted_dsnr_db", true, " (predicted)")] {
                if !table.series(&v, None, metric).is_empty() {
                    series.push(SeriesSpec {
                        variant: v.clone(),
                        metric: metric.into(),
                        node: None,
                        label: format!("{v}{suffix}"),
                        dashed,
                    });
                }
            }
        }
        Self {
            title: "Network-average DSNR".into(),
            x_label: "iterations".into(),
            y_label: "DSNR (dB)".into(),
            width: 760.0,
            height: 460.0,
            kind: ChartKind::Lines(series),
        }
    }

    pub fn roc(table: &MetricsTable) -> Self {
        let variants = table
            .variants()
            .into_iter()
            .filter(|v| !table.series(v, None, "pd").is_empty())
            .collect();
        Self {
            title: "Network-average ROC".into(),
            x_label: "false-alarm probability".into(),
            y_label: "detection probability".into(),
            width: 760.0,
            height: 460.0,
            kind: ChartKind::Roc(variants),
        }
    }

    /// Default charts for a table: DSNR curves and ROC curves, whichever the
    /// table contains, keyed by a file-name suffix.
    pub fn defaults(table: &MetricsTable) -> Vec<(&'static str, Self)> {
        let mut out = Vec::new();
        let dsnr = Self::dsnr(table);
        if matches!(&dsnr.kind, ChartKind::Lines(s) if !s.is_empty()) {
            out.push(("dsnr", dsnr));
        }
        let roc = Self::roc(table);
        if matches!(&roc.kind, ChartKind::Roc(v) if !v.is_empty()) {
            out.push(("roc", roc));
        }
        out
    }
}

struct Curve {
    label: String,
    dashed: bool,
    points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Tick positions with a 1-2-5 step covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

/// Renders the chart. Fails if no configured series has finite data.
pub fn render_chart(table: &MetricsTable, config: &ChartConfig) -> Result<String, CliError> {
    let curves: Vec<Curve> = match &config.kind {
        ChartKind::Lines(series) => series
            .iter()
            .map(|s| Curve {
                label: s.label.clone(),
                dashed: s.dashed,
                points: table.series(&s.variant, s.node, &s.metric),
            })
            .collect(),
        ChartKind::Roc(variants) => variants
            .iter()
            .map(|v| {
                let pd = table.series(v, None, "pd");
                let mut points: Vec<(f64, f64)> = table
                    .series(v, None, "pf")
                    .into_iter()
                    .filter_map(|(x, pf)| pd.iter().find(|(xd, _)| *xd == x).map(|(_, d)| (pf, *d)))
                    .collect();
                points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
                Curve {
                    label: v.clone(),
                    dashed: false,
                    points,
                }
            })
            .collect(),
    };
    let finite = || {
        curves
            .iter()
            .flat_map(|c| &c.points)
            .filter(|(x, y)| x.is_finite() && y.is_finite())
    };
    if finite().next().is_none() {
        return Err(CliError::Runtime(format!("chart {:?} has no data", config.title)));
    }
    let fold = |f: fn(&(f64, f64)) -> f64| {
        finite()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (mut x0, mut x1) = fold(|p| p.0);
    let (mut y0, mut y1) = fold(|p| p.1);
    if let ChartKind::Roc(_) = config.kind {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        (x0, x1) = (x0 - 0.5, x1 + 0.5);
    }
    if y1 - y0 < 1e-12 {
        (y0, y1) = (y0 - 0.5, y1 + 0.5);
    } else if !matches!(config.kind, ChartKind::Roc(_)) {
        let pad = 0.05 * (y1 - y0);
        (y0, y1) = (y0 - pad, y1 + pad);
    }

    let (w, h) = (config.width, config.height);
    let (pw, ph) = (w - MARGIN_LEFT - MARGIN_RIGHT, h - MARGIN_TOP - MARGIN_BOTTOM);
    let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| MARGIN_TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        MARGIN_LEFT + pw / 2.0,
        escape(&config.title)
    );
    for t in ticks(x0, x1) {
        let x = sx(t);
        let _ = writeln!(
            svg,
            r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#e0e0e0"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            MARGIN_TOP,
            MARGIN_TOP + ph,
            MARGIN_TOP + ph + 16.0,
            tick_label(t)
        );
    }
    for t in ticks(y0, y1) {
        let y = sy(t);
        let _ = writeln!(
            svg,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e0e0e0"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            MARGIN_LEFT,
            MARGIN_LEFT + pw,
            MARGIN_LEFT - 6.0,
            y + 4.0,
            tick_label(t)
        );
    }
    let _ = writeln!(
        svg,
        r#"<rect x="{MARGIN_LEFT:.2}" y="{MARGIN_TOP:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + pw / 2.0,
        h - 14.0,
        escape(&config.x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(18 {:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
        MARGIN_TOP + ph / 2.0,
        escape(&config.y_label)
    );

    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let dash = if c.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let pts: Vec<String> = c
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.8"{dash} points="{}"/>"#,
                pts.join(" ")
            );
        }
        let ly = MARGIN_TOP + 10.0 + 18.0 * i as f64;
        let lx = MARGIN_LEFT + pw + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="1.8"{dash}/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 24.0,
            lx + 30.0,
            ly + 4.0,
            escape(&c.label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
