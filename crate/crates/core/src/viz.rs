//! Deterministic SVG scatter plots of 2-D projections.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

pub const OVERLAY_COLOR: &str = "#000000";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotSpec {
    pub width: u32,
    pub height: u32,
    pub radius: f64,
    pub background_opacity: f64,
    pub overlay_opacity: f64,
    pub palette: Vec<String>,
    pub margin: f64,
    pub legend: bool,
    /// Legend text per class; class indices are used when empty.
    pub class_names: Vec<String>,
}

impl Default for PlotSpec {
    fn default() -> Self {
        PlotSpec {
            width: 600,
            height: 600,
            radius: 2.0,
            background_opacity: 0.15,
            overlay_opacity: 1.0,
            palette: DEFAULT_PALETTE.iter().map(|s| s.to_string()).collect(),
            margin: 20.0,
            legend: false,
            class_names: Vec::new(),
        }
    }
}

impl PlotSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("background_opacity", self.background_opacity),
            ("overlay_opacity", self.overlay_opacity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Input(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Input("canvas must have positive width and height".into()));
        }
        if !(self.margin >= 0.0) || 2.0 * self.margin >= self.width.min(self.height) as f64 {
            return Err(Error::Input(format!(
                "margin {} leaves no drawing area on a {}x{} canvas",
                self.margin, self.width, self.height
            )));
        }
        if !(self.radius > 0.0) {
            return Err(Error::Input(format!("point radius must be positive, got {}", self.radius)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Coloring {
    ByClass(Vec<usize>),
    Fixed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterLayer {
    /// `[k, 2]`.
    pub points: Tensor<f64>,
    pub coloring: Coloring,
    pub opacity: f64,
}

#[derive(Debug, Clone, Copy)]
struct Frame {
    scale: f64,
    cx: f64,
    cy: f64,
}

fn bounding_frame<'a>(points: impl Iterator<Item = &'a [f64]>, spec: &PlotSpec) -> Option<Frame> {
    let (mut x0, mut x1, mut y0, mut y1) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    let mut any = false;
    for p in points {
        any = true;
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    if !any {
        return None;
    }
    let iw = spec.width as f64 - 2.0 * spec.margin;
    let ih = spec.height as f64 - 2.0 * spec.margin;
    let mut scale = f64::INFINITY;
    if x1 > x0 {
        scale = scale.min(iw / (x1 - x0));
    }
    if y1 > y0 {
        scale = scale.min(ih / (y1 - y0));
    }
    if !scale.is_finite() {
        scale = 1.0;
    }
    Some(Frame { scale, cx: (x0 + x1) / 2.0, cy: (y0 + y1) / 2.0 })
}

fn check_layer(layer: &ScatterLayer, spec: &PlotSpec, at: usize) -> Result<()> {
    let p = &layer.points;
    if p.rank() != 2 || p.row_len() != 2 {
        return Err(Error::Dimension(format!(
            "layer {at} points must be [k, 2], got {:?}",
            p.shape()
        )));
    }
    if !p.all_finite() {
        return Err(Error::Input(format!("layer {at} contains non-finite points")));
    }
    if !(0.0..=1.0).contains(&layer.opacity) {
        return Err(Error::Input(format!(
            "layer {at} opacity must lie in [0, 1], got {}",
            layer.opacity
        )));
    }
    if let Coloring::ByClass(labels) = &layer.coloring {
        if labels.len() != p.rows() {
            return Err(Error::Dimension(format!(
                "layer {at} has {} points but {} labels",
                p.rows(),
                labels.len()
            )));
        }
        if let Some(&max) = labels.iter().max() {
            if max >= spec.palette.len() {
                return Err(Error::Input(format!(
                    "class {max} has no palette color ({} available)",
                    spec.palette.len()
                )));
            }
        }
    }
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn render(layers: &[ScatterLayer], spec: &PlotSpec, frame: Frame) -> String {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let (lo_x, hi_x) = (spec.margin, w - spec.margin);
    let (lo_y, hi_y) = (spec.margin, h - spec.margin);
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\">",
        spec.width, spec.height
    );
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n");
    for (li, layer) in layers.iter().enumerate() {
        let _ = writeln!(out, "<g class=\"layer-{li}\" fill-opacity=\"{:.3}\">", layer.opacity);
        for i in 0..layer.points.rows() {
            let p = layer.points.row(i);
            let x = w / 2.0 + (p[0] - frame.cx) * frame.scale;
            let y = h / 2.0 - (p[1] - frame.cy) * frame.scale;
            let (cx, cy) = (x.clamp(lo_x, hi_x), y.clamp(lo_y, hi_y));
            let clamped = if cx != x || cy != y { " data-clamped=\"1\"" } else { "" };
            let (fill, class) = match &layer.coloring {
                Coloring::ByClass(labels) => {
                    (spec.palette[labels[i]].as_str(), format!(" data-class=\"{}\"", labels[i]))
                }
                Coloring::Fixed(color) => (color.as_str(), String::new()),
            };
            let _ = writeln!(
                out,
                "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"{:.2}\" fill=\"{}\"{class}{clamped}/>",
                spec.radius,
                escape(fill)
            );
        }
        out.push_str("</g>\n");
    }
    if spec.legend {
        let classes = layers
            .iter()
            .filter_map(|l| match &l.coloring {
                Coloring::ByClass(labels) => labels.iter().max().map(|m| m + 1),
                Coloring::Fixed(_) => None,
            })
            .max()
            .unwrap_or(0);
        out.push_str("<g class=\"legend\" font-family=\"sans-serif\" font-size=\"10\">\n");
        for c in 0..classes {
            let y = spec.margin + 12.0 * c as f64;
            let x = w - spec.margin - 80.0;
            let name = spec.class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            let _ = writeln!(
                out,
                "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"8\" height=\"8\" fill=\"{}\"/><text x=\"{:.2}\" y=\"{:.2}\">{}</text>",
                y,
                escape(&spec.palette[c]),
                x + 12.0,
                y + 8.0,
                escape(&name)
            );
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

/// Renders layers bottom to top under one shared, aspect-preserving
/// transform fitted to every point.
pub fn render_scatter(layers: &[ScatterLayer], spec: &PlotSpec) -> Result<String> {
    spec.validate()?;
    if layers.is_empty() {
        return Err(Error::Input("scatter plot needs at least one layer".into()));
    }
    for (i, l) in layers.iter().enumerate() {
        check_layer(l, spec, i)?;
    }
    let frame = bounding_frame(
        layers.iter().flat_map(|l| (0..l.points.rows()).map(move |i| l.points.row(i))),
        spec,
    )
    .ok_or_else(|| Error::Input("scatter plot has no points".into()))?;
    Ok(render(layers, spec, frame))
}

/// Clean points colored by class and faded, with the adversarial subset in
/// black on top. The transform comes from the clean points alone so the
/// background is identical across overlays; overlay points beyond it are
/// drawn at the edge and marked `data-clamped`.
pub fn class_overlay_plot(
    z: &Tensor<f64>,
    y: &[usize],
    z_adv: &Tensor<f64>,
    spec: &PlotSpec,
) -> Result<String> {
    spec.validate()?;
    let layers = [
        ScatterLayer {
            points: z.clone(),
            coloring: Coloring::ByClass(y.to_vec()),
            opacity: spec.background_opacity,
        },
        ScatterLayer {
            points: z_adv.clone(),
            coloring: Coloring::Fixed(OVERLAY_COLOR.to_string()),
            opacity: spec.overlay_opacity,
        },
    ];
    for (i, l) in layers.iter().enumerate() {
        check_layer(l, spec, i)?;
    }
    let frame = bounding_frame((0..z.rows()).map(|i| z.row(i)), spec)
        .ok_or_else(|| Error::Input("overlay plot needs at least one clean point".into()))?;
    Ok(render(&layers, spec, frame))
}
