//! Standalone SVG plots of latent trajectories and generated continuations.

use std::fmt::Write;

use gpdmm_core::{EvalItem, TrainedGpdmm};
use nalgebra::DMatrix;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 40.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Frame {
        let mut f = Frame {
            x0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y0: f64::INFINITY,
            y1: f64::NEG_INFINITY,
        };
        for (x, y) in points {
            f.x0 = f.x0.min(x);
            f.x1 = f.x1.max(x);
            f.y0 = f.y0.min(y);
            f.y1 = f.y1.max(y);
        }
        if !(f.x1 > f.x0) {
            f.x1 = f.x0 + 1.0;
        }
        if !(f.y1 > f.y0) {
            f.y1 = f.y0 + 1.0;
        }
        f
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let px = PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD);
        let py = H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD);
        (px, py)
    }
}

fn polyline(out: &mut String, frame: &Frame, pts: &[(f64, f64)], color: &str, dashed: bool) {
    let coords: Vec<String> = pts
        .iter()
        .map(|&(x, y)| {
            let (px, py) = frame.map(x, y);
            format!("{px:.2},{py:.2}")
        })
        .collect();
    let dash = if dashed { " stroke-dasharray=\"6 4\"" } else { "" };
    let _ = writeln!(
        out,
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash} points=\"{}\"/>",
        coords.join(" ")
    );
}

fn document(title: &str, body: &str, legend: &[(String, &str)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">");
    let _ = writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(out, "<text x=\"{PAD}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{}</text>", escape(title));
    let _ = writeln!(
        out,
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>",
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    out.push_str(body);
    for (i, (label, color)) in legend.iter().enumerate() {
        let y = PAD + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{}</text>",
            W - PAD - 120.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Training latents of every sequence on their two leading principal
/// coordinates, or the first two latent columns when PCA is off.
pub fn latent_svg(model: &TrainedGpdmm) -> String {
    let x: &DMatrix<f64> = &model.emission.x;
    let g = model.latent_config.geometry_dims();
    let (a, b) = if model.latent_config.reduction_dims >= 2 {
        (g, g + 1)
    } else {
        (0, 1.min(x.ncols() - 1))
    };
    let frame = Frame::fit((0..x.nrows()).map(|i| (x[(i, a)], x[(i, b)])));
    let n = model.train_length;
    let mut body = String::new();
    let mut legend = Vec::new();
    for (k, rows) in (0..x.nrows()).collect::<Vec<_>>().chunks(n).enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<(f64, f64)> = rows.iter().map(|&i| (x[(i, a)], x[(i, b)])).collect();
        polyline(&mut body, &frame, &pts, color, false);
        if let Some(label) = model.class_labels.get(k) {
            legend.push((label.clone(), color));
        }
    }
    document(&format!("training latents (columns {a}, {b})"), &body, &legend)
}

/// Ground truth and generated continuation of one feature over time.
pub fn trajectory_svg(item: &EvalItem, title: &str, feature: usize) -> String {
    let truth: Vec<(f64, f64)> = (0..item.sequence.nrows()).map(|t| (t as f64, item.sequence[(t, feature)])).collect();
    let start = item.sequence.nrows() - item.generated.nrows();
    let generated: Vec<(f64, f64)> = (0..item.generated.nrows())
        .map(|t| ((start + t) as f64, item.generated[(t, feature)]))
        .collect();
    let frame = Frame::fit(truth.iter().chain(&generated).copied());
    let mut body = String::new();
    polyline(&mut body, &frame, &truth, "#444444", false);
    polyline(&mut body, &frame, &generated, COLORS[1], true);
    let legend = vec![("truth".to_string(), "#444444"), ("generated".to_string(), COLORS[1])];
    document(&format!("{title}, feature {feature}"), &body, &legend)
}
