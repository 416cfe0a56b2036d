//! Minimal deterministic SVG line/scatter plots.

use std::fmt::Write as _;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 140.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub enum Style {
    /// Straight segments between points.
    Line,
    /// Horizontal-then-vertical steps.
    Step,
    /// Circle markers only.
    Markers,
    /// Dashed horizontal reference at the given y.
    Reference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub style: Style,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: impl Into<String>, style: Style, points: Vec<(f64, f64)>) -> Self {
        Series {
            label: label.into(),
            style,
            points,
        }
    }

    pub fn reference(label: impl Into<String>, y: f64) -> Self {
        Series::new(label, Style::Reference, vec![(f64::NAN, y)])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub series: Vec<Series>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Roughly five round-numbered ticks across `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).abs();
    if !(span > 0.0) || !span.is_finite() {
        return vec![lo];
    }
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

impl Plot {
    pub fn render(&self) -> String {
        let (x0, x1) = widen(self.x_range);
        let (y0, y1) = widen(self.y_range);
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

        let mut o = String::new();
        let _ = writeln!(
            o,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(
            o,
            r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
        );
        let _ = writeln!(
            o,
            r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            LEFT + pw / 2.0,
            esc(&self.title)
        );
        let _ = writeln!(
            o,
            r##"<rect x="{LEFT:.1}" y="{TOP:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#444"/>"##
        );
        for t in ticks(x0, x1) {
            let x = sx(t);
            let _ = writeln!(
                o,
                r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#ddd"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
                TOP,
                TOP + ph,
                TOP + ph + 16.0,
                fmt_tick(t)
            );
        }
        for t in ticks(y0, y1) {
            let y = sy(t);
            let _ = writeln!(
                o,
                r##"<line x1="{LEFT:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
                LEFT + pw,
                LEFT - 6.0,
                y + 4.0,
                fmt_tick(t)
            );
        }
        let _ = writeln!(
            o,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 10.0,
            esc(&self.x_label)
        );
        let _ = writeln!(
            o,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            esc(&self.y_label)
        );

        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<(f64, f64)> = s
                .points
                .iter()
                .filter(|(x, y)| y.is_finite() && (x.is_finite() || s.style == Style::Reference))
                .copied()
                .collect();
            match s.style {
                Style::Line | Style::Step => {
                    if pts.is_empty() {
                        continue;
                    }
                    let mut d = String::new();
                    let mut prev_y = None;
                    for (j, (x, y)) in pts.iter().enumerate() {
                        if j == 0 {
                            let _ = write!(d, "M{:.2} {:.2}", sx(*x), sy(*y));
                        } else {
                            if s.style == Style::Step {
                                let _ =
                                    write!(d, " L{:.2} {:.2}", sx(*x), sy(prev_y.unwrap_or(*y)));
                            }
                            let _ = write!(d, " L{:.2} {:.2}", sx(*x), sy(*y));
                        }
                        prev_y = Some(*y);
                    }
                    let _ = writeln!(
                        o,
                        r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>"#
                    );
                }
                Style::Markers => {
                    for (x, y) in &pts {
                        let _ = writeln!(
                            o,
                            r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#,
                            sx(*x),
                            sy(*y)
                        );
                    }
                }
                Style::Reference => {
                    for (_, y) in &pts {
                        let yy = sy(*y);
                        let _ = writeln!(
                            o,
                            r#"<line x1="{LEFT:.2}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="{color}" stroke-dasharray="6 4"/>"#,
                            LEFT + pw
                        );
                    }
                }
            }
            // Legend swatches are rectangles so circles stay sample markers.
            let ly = TOP + 10.0 + i as f64 * 18.0;
            let lx = LEFT + pw + 12.0;
            let _ = writeln!(
                o,
                r#"<rect x="{lx:.1}" y="{:.1}" width="14" height="4" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                ly - 4.0,
                lx + 20.0,
                ly + 2.0,
                esc(&s.label)
            );
        }
        o.push_str("</svg>\n");
        o
    }
}

fn widen((lo, hi): (f64, f64)) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_markers_as_circles() {
        let p = Plot {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            x_range: (0.0, 1.0),
            y_range: (0.0, 1.0),
            series: vec![
                Series::new("line", Style::Line, vec![(0.0, 0.0), (1.0, 1.0)]),
                Series::new("pts", Style::Markers, vec![(0.5, 0.5), (0.7, f64::NAN)]),
                Series::reference("ref", 0.2),
            ],
        };
        let svg = p.render();
        assert_eq!(svg.matches("<circle").count(), 1);
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(svg, p.render());
    }

    #[test]
    fn degenerate_ranges_render() {
        let p = Plot {
            title: "<one>".into(),
            x_label: String::new(),
            y_label: String::new(),
            x_range: (0.0, 0.0),
            y_range: (1.0, 1.0),
            series: vec![Series::new("s", Style::Step, vec![(0.0, 1.0)])],
        };
        let svg = p.render();
        assert!(svg.contains("&lt;one&gt;"));
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn tick_spacing() {
        assert_eq!(ticks(0.0, 10.0), vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
        let t = ticks(0.0, 1.0);
        assert_eq!(t.len(), 6);
        assert_eq!(fmt_tick(t[3]), "0.6");
    }
}
