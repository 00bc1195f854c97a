//! Minimal hand-written SVG line plots.

use std::fmt::Write;

pub struct Series<'a> {
    pub label: &'a str,
    pub y: &'a [f64],
    pub color: &'a str,
    pub dashed: bool,
}

pub struct Panel<'a> {
    pub title: &'a str,
    pub series: Vec<Series<'a>>,
}

const WIDTH: f64 = 800.0;
const PANEL_H: f64 = 140.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 24.0;
const MARGIN_B: f64 = 26.0;

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 * lo.abs().max(1e-12) };
    (lo - pad, hi + pad)
}

/// Stacked panels sharing the x axis `x`.
pub fn stacked(title: &str, x: &[f64], x_label: &str, panels: &[Panel]) -> String {
    let height = MARGIN_T + panels.len() as f64 * (PANEL_H + MARGIN_B) + 10.0;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="16" text-anchor="middle" font-size="13">{}</text>"#, WIDTH / 2.0, escape(title)).unwrap();
    let (x0, x1) = bounds(x.iter().copied());
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    for (i, p) in panels.iter().enumerate() {
        let top = MARGIN_T + i as f64 * (PANEL_H + MARGIN_B);
        let (y0, y1) = bounds(p.series.iter().flat_map(|s| s.y.iter().copied()));
        let px = |v: f64| MARGIN_L + (v - x0) / (x1 - x0) * plot_w;
        let py = |v: f64| top + PANEL_H - (v - y0) / (y1 - y0) * PANEL_H;
        writeln!(s, r#"<g class="panel">"#).unwrap();
        writeln!(
            s,
            r##"<rect x="{MARGIN_L}" y="{top}" width="{plot_w}" height="{PANEL_H}" fill="none" stroke="#888"/>"##
        )
        .unwrap();
        writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, MARGIN_L + 4.0, top + 12.0, escape(p.title)).unwrap();
        for (v, y) in [(y1, top + 10.0), (y0, top + PANEL_H)] {
            writeln!(s, r#"<text x="{}" y="{y}" text-anchor="end">{}</text>"#, MARGIN_L - 4.0, fmt_tick(v)).unwrap();
        }
        for (k, series) in p.series.iter().enumerate() {
            let pts: Vec<String> = x
                .iter()
                .zip(series.y)
                .filter(|(_, y)| y.is_finite())
                .map(|(&a, &b)| format!("{:.2},{:.2}", px(a), py(b)))
                .collect();
            let dash = if series.dashed { r#" stroke-dasharray="5,3""# } else { "" };
            writeln!(
                s,
                r#"<polyline fill="none" stroke="{}" stroke-width="1.2"{dash} points="{}"/>"#,
                series.color,
                pts.join(" ")
            )
            .unwrap();
            let lx = MARGIN_L + plot_w - 150.0;
            let ly = top + 12.0 + 12.0 * k as f64;
            writeln!(
                s,
                r#"<line x1="{lx}" y1="{}" x2="{}" y2="{}" stroke="{}"{dash}/><text x="{}" y="{ly}">{}</text>"#,
                ly - 4.0,
                lx + 20.0,
                ly - 4.0,
                series.color,
                lx + 24.0,
                escape(series.label)
            )
            .unwrap();
        }
        writeln!(s, "</g>").unwrap();
    }
    let bottom = MARGIN_T + panels.len() as f64 * (PANEL_H + MARGIN_B) - MARGIN_B;
    writeln!(s, r#"<text x="{MARGIN_L}" y="{}">{}</text>"#, bottom + 14.0, fmt_tick(x0)).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
        WIDTH - MARGIN_R,
        bottom + 14.0,
        fmt_tick(x1)
    )
    .unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, bottom + 14.0, escape(x_label)).unwrap();
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_group_per_panel_and_well_formed() {
        let x = [0.0, 1.0, 2.0];
        let y = [1.0, 0.5, 0.25];
        let panels: Vec<Panel> = (0..5)
            .map(|_| Panel {
                title: "a<b",
                series: vec![Series {
                    label: "y",
                    y: &y,
                    color: "black",
                    dashed: false,
                }],
            })
            .collect();
        let svg = stacked("t", &x, "x", &panels);
        assert_eq!(svg.matches(r#"<g class="panel">"#).count(), 5);
        assert!(svg.contains("a&lt;b"));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn constant_and_empty_series_do_not_produce_nan() {
        let x = [0.0, 1.0];
        let flat = [2.0, 2.0];
        let nan = [f64::NAN, f64::NAN];
        let panels = [Panel {
            title: "p",
            series: vec![
                Series { label: "flat", y: &flat, color: "red", dashed: true },
                Series { label: "nan", y: &nan, color: "blue", dashed: false },
            ],
        }];
        assert!(!stacked("t", &x, "x", &panels).contains("NaN"));
    }
}
