//! Minimal SVG writer for the regression experiment: one panel per curve,
//! each showing the noisy observations, the noise-free target line, and the
//! model's prediction.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;
use crate::pipeline::ToyOutcome;

const PANEL_W: f64 = 270.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 34.0;

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    ox: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.ox + MARGIN + (x - self.x0) / (self.x1 - self.x0) * (PANEL_W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        // SVG y grows downwards.
        MARGIN + (self.y1 - y) / (self.y1 - self.y0) * (PANEL_H - 2.0 * MARGIN)
    }
}

fn polyline(frame: &Frame, xs: &[f64], ys: &[f64], style: &str) -> String {
    let points: Vec<String> = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
        .collect();
    format!("  <polyline points=\"{}\" {style}/>\n", points.join(" "))
}

/// Write the four-curve prediction plot to an SVG file.
pub fn write_toy_plot(outcome: &ToyOutcome, path: impl AsRef<Path>) -> Result<()> {
    let ds = &outcome.dataset;
    let panels = outcome.curves.len();
    let width = panels as f64 * PANEL_W;
    let y_min = ds
        .y()
        .iter()
        .chain(outcome.curves.iter().flat_map(|c| c.predictions.iter()))
        .fold(f64::INFINITY, |a, &b| a.min(b))
        .min(0.0)
        - 0.5;
    let y_max = ds
        .y()
        .iter()
        .chain(outcome.curves.iter().flat_map(|c| c.predictions.iter()))
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b))
        + 0.5;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width:.0} {PANEL_H:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    ));
    svg.push_str("  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for (i, curve) in outcome.curves.iter().enumerate() {
        let frame = Frame {
            x0: ds.x()[0],
            x1: ds.x()[ds.len() - 1],
            y0: y_min,
            y1: y_max,
            ox: i as f64 * PANEL_W,
        };
        // Panel frame and title.
        svg.push_str(&format!(
            "  <rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"#999\"/>\n",
            frame.ox + MARGIN,
            MARGIN,
            PANEL_W - 2.0 * MARGIN,
            PANEL_H - 2.0 * MARGIN
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{} (mse {:.3})</text>\n",
            frame.ox + PANEL_W / 2.0,
            MARGIN - 12.0,
            curve.label,
            curve.mse_to_truth
        ));
        // Noisy observations.
        for (&x, &y) in ds.x().iter().zip(ds.y()) {
            svg.push_str(&format!(
                "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.8\" fill=\"#bbb\"/>\n",
                frame.px(x),
                frame.py(y)
            ));
        }
        // Noise-free target then the prediction curve.
        svg.push_str(&polyline(
            &frame,
            ds.x(),
            ds.truth(),
            "fill=\"none\" stroke=\"#444\" stroke-dasharray=\"4 3\"",
        ));
        svg.push_str(&polyline(
            &frame,
            ds.x(),
            &curve.predictions,
            "fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.6\"",
        ));
    }
    svg.push_str("</svg>\n");

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(svg.as_bytes())?;
    w.flush()?;
    Ok(())
}
