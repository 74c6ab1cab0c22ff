//! Minimal SVG writer for the figure artifacts. Output is a plain string
//! assembled in call order, so identical draw sequences give identical
//! bytes. Coordinates are world units; the viewBox flips the y axis so
//! world y grows upward.

use crate::report::num;

/// Color cycle for trajectory polylines.
pub const PALETTE: &[&str] = &[
    "#1b6ca8", "#c23b22", "#2e8540", "#8e44ad", "#d35400", "#16808a", "#b8860b", "#5d6d7e",
];

#[derive(Debug)]
pub struct Svg {
    body: String,
    x0: f64,
    y0: f64,
    width: f64,
    height: f64,
    pixels: f64,
}

impl Svg {
    /// World-coordinate window `[x0, x0+width] × [y0, y0+height]`, rendered
    /// `pixels` wide.
    pub fn new(x0: f64, y0: f64, width: f64, height: f64, pixels: f64) -> Self {
        Svg { body: String::new(), x0, y0, width, height, pixels }
    }

    fn fmt(v: f64) -> String {
        // Fixed precision keeps the files compact; 6 decimals is far below
        // a hairline at figure scale.
        let s = format!("{:.6}", v);
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }

    /// Flip world y so the figure reads with y upward.
    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        (x - self.x0, self.y0 + self.height - y)
    }

    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let (px, py) = self.map(x, y + h);
        self.body.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\n",
            Self::fmt(px),
            Self::fmt(py),
            Self::fmt(w),
            Self::fmt(h),
            fill
        ));
    }

    pub fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str) {
        let (px, py) = self.map(x, y);
        self.body.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"{}\" fill=\"{}\"/>\n",
            Self::fmt(px),
            Self::fmt(py),
            Self::fmt(r),
            fill
        ));
    }

    pub fn polyline(&mut self, points: &[(f64, f64)], stroke: &str, width: f64, opacity: f64) {
        let pts: Vec<String> = points
            .iter()
            .map(|&(x, y)| {
                let (px, py) = self.map(x, y);
                format!("{},{}", Self::fmt(px), Self::fmt(py))
            })
            .collect();
        self.body.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"{}\" \
             stroke-opacity=\"{}\" stroke-linejoin=\"round\" stroke-linecap=\"round\"/>\n",
            pts.join(" "),
            stroke,
            Self::fmt(width),
            num(opacity)
        ));
    }

    pub fn finish(self) -> String {
        let scale = self.pixels / self.width;
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" \
             viewBox=\"0 0 {} {}\">\n{}</svg>\n",
            Self::fmt(self.pixels),
            Self::fmt(self.height * scale),
            Self::fmt(self.width),
            Self::fmt(self.height),
            self.body
        )
    }
}
