//! Minimal SVG 1.1 line plots.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Markers instead of a polyline.
    pub points: bool,
}

impl Series {
    pub fn line(label: impl Into<String>, x: Vec<f64>, y: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            x,
            y,
            points: false,
        }
    }

    pub fn scatter(label: impl Into<String>, x: Vec<f64>, y: Vec<f64>) -> Self {
        Self {
            points: true,
            ..Self::line(label, x, y)
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
}

fn axis(v: f64, log: bool) -> Option<f64> {
    match log {
        true if v > 0.0 => Some(v.log10()),
        true => None,
        false => v.is_finite().then_some(v),
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn tick_label(v: f64, log: bool) -> String {
    if log {
        format!("1e{}", v.round() as i64)
    } else if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

impl Plot {
    /// The document. `stamp` goes into a leading comment when given; the rest
    /// depends only on the data.
    pub fn render(&self, stamp: Option<&str>) -> String {
        let pts: Vec<Vec<(f64, f64)>> = self
            .series
            .iter()
            .map(|s| {
                s.x.iter()
                    .zip(&s.y)
                    .filter_map(|(&x, &y)| Some((axis(x, self.log_x)?, axis(y, self.log_y)?)))
                    .collect()
            })
            .collect();
        let all = pts.iter().flatten();
        let (mut x0, mut x1, mut y0, mut y1) = all.fold(
            (
                f64::INFINITY,
                f64::NEG_INFINITY,
                f64::INFINITY,
                f64::NEG_INFINITY,
            ),
            |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
        );
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 - x0 <= 0.0 {
            (x0, x1) = (x0 - 0.5, x1 + 0.5);
        }
        if y1 - y0 <= 0.0 {
            let pad = if y0 == 0.0 { 1.0 } else { 0.05 * y0.abs() };
            (y0, y1) = (y0 - pad, y1 + pad);
        }
        let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

        let mut s = String::new();
        s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
        if let Some(stamp) = stamp {
            let _ = writeln!(s, "<!-- generated {} -->", escape(stamp));
        }
        let _ = writeln!(
            s,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">"
        );
        let _ = writeln!(
            s,
            "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>"
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
            WIDTH / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>"
        );
        for k in 0..=4 {
            let f = k as f64 / 4.0;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let (px, py) = (sx(xv), sy(yv));
            let _ = writeln!(
                s,
                "<line x1=\"{px:.2}\" y1=\"{:.2}\" x2=\"{px:.2}\" y2=\"{:.2}\" stroke=\"black\"/><text x=\"{px:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
                TOP + ph,
                TOP + ph + 5.0,
                TOP + ph + 18.0,
                tick_label(xv, self.log_x)
            );
            let _ = writeln!(
                s,
                "<line x1=\"{:.2}\" y1=\"{py:.2}\" x2=\"{LEFT}\" y2=\"{py:.2}\" stroke=\"black\"/><text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
                LEFT - 5.0,
                LEFT - 8.0,
                py + 4.0,
                tick_label(yv, self.log_y)
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            LEFT + pw / 2.0,
            HEIGHT - 10.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">{}</text>",
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );
        for (k, (series, p)) in self.series.iter().zip(&pts).enumerate() {
            let color = COLORS[k % COLORS.len()];
            if series.points {
                for &(x, y) in p {
                    let _ = writeln!(
                        s,
                        "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                        sx(x),
                        sy(y)
                    );
                }
            } else if !p.is_empty() {
                let coords: Vec<String> = p
                    .iter()
                    .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                    .collect();
                let _ = writeln!(
                    s,
                    "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                    coords.join(" ")
                );
            }
            let ly = TOP + 16.0 + 16.0 * k as f64;
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"12\" height=\"3\" fill=\"{color}\"/><text x=\"{:.2}\" y=\"{:.2}\">{}</text>",
                LEFT + pw - 150.0,
                ly - 4.0,
                LEFT + pw - 132.0,
                ly,
                escape(&series.label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plot() -> Plot {
        Plot {
            title: "n(q) <t>".into(),
            x_label: "q".into(),
            y_label: "n".into(),
            series: vec![Series::line(
                "t = 0",
                vec![0.0, 1.0, 2.0],
                vec![1.0, 0.5, 0.25],
            )],
            ..Plot::default()
        }
    }

    #[test]
    fn renders_well_formed_document() {
        let s = plot().render(None);
        assert!(s.starts_with("<?xml"));
        assert!(s.trim_end().ends_with("</svg>"));
        assert!(s.contains("<polyline"));
        assert!(s.contains("n(q) &lt;t&gt;"));
        assert_eq!(s.matches("<svg").count(), 1);
    }

    #[test]
    fn stamp_is_the_only_difference() {
        let a = plot().render(Some("unix 1"));
        let b = plot().render(None);
        assert_ne!(a, b);
        let stripped: String = a
            .lines()
            .filter(|l| !l.starts_with("<!--"))
            .map(|l| format!("{l}\n"))
            .collect();
        assert_eq!(stripped, b);
    }

    #[test]
    fn log_axes_drop_nonpositive_values() {
        let p = Plot {
            log_x: true,
            log_y: true,
            series: vec![Series::scatter(
                "v",
                vec![0.0, 1e-3, 1e-2],
                vec![1.0, 1e-9, 1e-6],
            )],
            ..Plot::default()
        };
        let s = p.render(None);
        assert_eq!(s.matches("<circle").count(), 2);
        assert!(s.contains("1e-3"));
    }

    #[test]
    fn constant_and_empty_data() {
        let p = Plot {
            series: vec![
                Series::line("c", vec![0.0, 1.0], vec![2.0, 2.0]),
                Series::line("e", vec![], vec![]),
            ],
            ..Plot::default()
        };
        let s = p.render(None);
        assert!(!s.contains("NaN") && !s.contains("inf"));
    }
}
