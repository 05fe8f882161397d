//! Minimal SVG plots: scatter, polylines and line charts with axes.

use std::fmt::Write as _;

const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

enum Layer {
    Points { pts: Vec<(f64, f64)>, color: String, radius: f64, opacity: f64 },
    Line { pts: Vec<(f64, f64)>, color: String, width: f64 },
}

/// A single 2-D panel. Bounds grow to fit every layer.
pub struct Plot {
    title: String,
    x_label: String,
    y_label: String,
    layers: Vec<Layer>,
    equal_aspect: bool,
    width: f64,
    height: f64,
}

impl Plot {
    pub fn new(title: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            x_label: String::new(),
            y_label: String::new(),
            layers: vec![],
            equal_aspect: false,
            width: 480.0,
            height: 480.0,
        }
    }

    pub fn labels(mut self, x: &str, y: &str) -> Self {
        self.x_label = x.into();
        self.y_label = y.into();
        self
    }

    /// Same scale on both axes, for point clouds.
    pub fn equal_aspect(mut self) -> Self {
        self.equal_aspect = true;
        self
    }

    pub fn wide(mut self) -> Self {
        self.width = 720.0;
        self.height = 360.0;
        self
    }

    pub fn points(&mut self, pts: Vec<(f64, f64)>, color: &str, radius: f64, opacity: f64) -> &mut Self {
        self.layers.push(Layer::Points { pts, color: color.into(), radius, opacity });
        self
    }

    pub fn line(&mut self, pts: Vec<(f64, f64)>, color: &str, width: f64) -> &mut Self {
        self.layers.push(Layer::Line { pts, color: color.into(), width });
        self
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for l in &self.layers {
            let pts = match l {
                Layer::Points { pts, .. } | Layer::Line { pts, .. } => pts,
            };
            for &(x, y) in pts.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
                b = (b.0.min(x), b.1.max(x), b.2.min(y), b.3.max(y));
            }
        }
        if !b.0.is_finite() {
            return (0.0, 1.0, 0.0, 1.0);
        }
        let pad = |lo: f64, hi: f64| {
            let w = (hi - lo).max(1e-9);
            (lo - 0.05 * w, hi + 0.05 * w)
        };
        let (x0, x1) = pad(b.0, b.1);
        let (y0, y1) = pad(b.2, b.3);
        if self.equal_aspect {
            let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
            let h = (x1 - x0).max(y1 - y0) / 2.0;
            return (cx - h, cx + h, cy - h, cy + h);
        }
        (x0, x1, y0, y1)
    }

    pub fn to_svg(&self) -> String {
        let (w, h) = (self.width, self.height);
        let (ml, mr, mt, mb) = (56.0, 16.0, 28.0, 40.0);
        let (x0, x1, y0, y1) = self.bounds();
        let sx = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
        let sy = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, w / 2.0, esc(&self.title));
        let _ = writeln!(
            s,
            r##"<rect x="{ml}" y="{mt}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
            w - ml - mr,
            h - mt - mb
        );
        for i in 0..=4 {
            let fx = x0 + (x1 - x0) * i as f64 / 4.0;
            let fy = y0 + (y1 - y0) * i as f64 / 4.0;
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(fx), h - mb + 14.0, tick(fx));
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, ml - 4.0, sy(fy) + 4.0, tick(fy));
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (ml + w - mr) / 2.0, h - 6.0, esc(&self.x_label));
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            (mt + h - mb) / 2.0,
            (mt + h - mb) / 2.0,
            esc(&self.y_label)
        );
        for l in &self.layers {
            match l {
                Layer::Points { pts, color, radius, opacity } => {
                    let _ = writeln!(s, r#"<g fill="{color}" fill-opacity="{opacity}">"#);
                    for &(x, y) in pts.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
                        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="{radius}"/>"#, sx(x), sy(y));
                    }
                    s.push_str("</g>\n");
                }
                Layer::Line { pts, color, width } => {
                    let path: Vec<String> = pts
                        .iter()
                        .filter(|(x, y)| x.is_finite() && y.is_finite())
                        .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                        .collect();
                    let _ = writeln!(
                        s,
                        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="{width}"/>"#,
                        path.join(" ")
                    );
                }
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
