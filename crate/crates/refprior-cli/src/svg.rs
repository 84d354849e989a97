//! Minimal SVG plots: polylines, scatters, and stem series over labeled
//! axes. The CSV files are the normative outputs; these exist so a run can
//! be eyeballed without a plotting stack.

use std::fmt::Write as _;
use std::path::Path;

use refprior::Result;

pub const PALETTE: [&str; 6] =
    ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 62.0;
const MARGIN_RIGHT: f64 = 16.0;
const MARGIN_TOP: f64 = 34.0;
const MARGIN_BOTTOM: f64 = 48.0;
const TICKS: usize = 5;

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum SeriesKind {
    Line,
    Scatter,
    /// Vertical impulses from y = 0, for atom masses.
    Stems,
}

struct Series {
    label: String,
    color: &'static str,
    kind: SeriesKind,
    points: Vec<(f64, f64)>,
}

pub struct Plot {
    title: String,
    x_label: String,
    y_label: String,
    series: Vec<Series>,
}

impl Plot {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            title: title.to_string(),
            x_label: x_label.to_string(),
            y_label: y_label.to_string(),
            series: Vec::new(),
        }
    }

    pub fn add(&mut self, label: &str, color: &'static str, kind: SeriesKind, points: Vec<(f64, f64)>) {
        self.series.push(Series { label: label.to_string(), color, kind, points });
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }

    /// Data ranges padded by 5%, with y = 0 included whenever stems are
    /// present; a degenerate range widens by one unit so every point stays
    /// drawable.
    fn ranges(&self) -> ((f64, f64), (f64, f64)) {
        let mut xs = (f64::INFINITY, f64::NEG_INFINITY);
        let mut ys = (f64::INFINITY, f64::NEG_INFINITY);
        for s in &self.series {
            for &(x, y) in &s.points {
                if x.is_finite() {
                    xs = (xs.0.min(x), xs.1.max(x));
                }
                if y.is_finite() {
                    ys = (ys.0.min(y), ys.1.max(y));
                }
            }
            if s.kind == SeriesKind::Stems {
                ys = (ys.0.min(0.0), ys.1.max(0.0));
            }
        }
        if xs.0 > xs.1 {
            xs = (0.0, 1.0);
        }
        if ys.0 > ys.1 {
            ys = (0.0, 1.0);
        }
        let pad = |lo: f64, hi: f64| {
            let span = hi - lo;
            if span <= 0.0 {
                (lo - 1.0, hi + 1.0)
            } else {
                (lo - 0.05 * span, hi + 0.05 * span)
            }
        };
        (pad(xs.0, xs.1), pad(ys.0, ys.1))
    }

    pub fn render(&self) -> String {
        let ((x_lo, x_hi), (y_lo, y_hi)) = self.ranges();
        let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        let sx = move |x: f64| MARGIN_LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w;
        let sy = move |y: f64| MARGIN_TOP + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h;

        let mut out = String::new();
        let _ = writeln!(
            out,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
             font-family=\"sans-serif\" font-size=\"12\">"
        );
        let _ = writeln!(out, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
            MARGIN_LEFT + plot_w / 2.0,
            escape(&self.title)
        );

        // Axes with tick marks and labels.
        let x0 = MARGIN_LEFT;
        let y0 = MARGIN_TOP + plot_h;
        let _ = writeln!(
            out,
            "<line x1=\"{x0:.2}\" y1=\"{y0:.2}\" x2=\"{:.2}\" y2=\"{y0:.2}\" stroke=\"black\"/>",
            x0 + plot_w
        );
        let _ = writeln!(
            out,
            "<line x1=\"{x0:.2}\" y1=\"{:.2}\" x2=\"{x0:.2}\" y2=\"{y0:.2}\" stroke=\"black\"/>",
            MARGIN_TOP
        );
        for t in 0..=TICKS {
            let f = t as f64 / TICKS as f64;
            let xv = x_lo + f * (x_hi - x_lo);
            let yv = y_lo + f * (y_hi - y_lo);
            let xp = sx(xv);
            let yp = sy(yv);
            let _ = writeln!(
                out,
                "<line x1=\"{xp:.2}\" y1=\"{y0:.2}\" x2=\"{xp:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
                y0 + 5.0
            );
            let _ = writeln!(
                out,
                "<text x=\"{xp:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
                y0 + 18.0,
                tick_label(xv)
            );
            let _ = writeln!(
                out,
                "<line x1=\"{:.2}\" y1=\"{yp:.2}\" x2=\"{x0:.2}\" y2=\"{yp:.2}\" stroke=\"black\"/>",
                x0 - 5.0
            );
            let _ = writeln!(
                out,
                "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
                x0 - 8.0,
                yp + 4.0,
                tick_label(yv)
            );
        }
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            MARGIN_LEFT + plot_w / 2.0,
            HEIGHT - 10.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            "<text x=\"14\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.2})\">{}</text>",
            MARGIN_TOP + plot_h / 2.0,
            MARGIN_TOP + plot_h / 2.0,
            escape(&self.y_label)
        );

        for series in &self.series {
            match series.kind {
                SeriesKind::Line => {
                    let mut d = String::new();
                    for &(x, y) in &series.points {
                        let _ = write!(d, "{:.2},{:.2} ", sx(x), sy(y));
                    }
                    let _ = writeln!(
                        out,
                        "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>",
                        d.trim_end(),
                        series.color
                    );
                }
                SeriesKind::Scatter => {
                    for &(x, y) in &series.points {
                        let _ = writeln!(
                            out,
                            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\"/>",
                            sx(x),
                            sy(y),
                            series.color
                        );
                    }
                }
                SeriesKind::Stems => {
                    let base = sy(0.0);
                    for &(x, y) in &series.points {
                        let _ = writeln!(
                            out,
                            "<line x1=\"{:.2}\" y1=\"{base:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" \
                             stroke=\"{}\" stroke-width=\"2\"/>",
                            sx(x),
                            sx(x),
                            sy(y),
                            series.color
                        );
                        let _ = writeln!(
                            out,
                            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\"/>",
                            sx(x),
                            sy(y),
                            series.color
                        );
                    }
                }
            }
        }

        // Legend in the top-right corner of the plot area.
        for (idx, series) in self.series.iter().enumerate() {
            let ly = MARGIN_TOP + 14.0 + 16.0 * idx as f64;
            let lx = MARGIN_LEFT + plot_w - 150.0;
            let _ = writeln!(
                out,
                "<rect x=\"{lx:.2}\" y=\"{:.2}\" width=\"10\" height=\"10\" fill=\"{}\"/>",
                ly - 9.0,
                series.color
            );
            let _ = writeln!(
                out,
                "<text x=\"{:.2}\" y=\"{ly:.2}\">{}</text>",
                lx + 14.0,
                escape(&series.label)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let magnitude = v.abs();
    if (0.01..10_000.0).contains(&magnitude) {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
