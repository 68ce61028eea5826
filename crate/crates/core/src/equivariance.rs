//! Test error under input rotation and per-layer activation robustness.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use basisconv_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};
use crate::group::{act_on_group_feature_map, rotate_interp, RotationIndex, RotationMethod};
use crate::nn::Model;
use crate::train::{evaluate_images, rotate_batch};

pub const SWEEP_HEADER: &str = "variant,angle_deg,error";
pub const ROBUSTNESS_HEADER: &str = "variant,layer_index,layer_name,L_equivariance";
pub const PER_ANGLE_HEADER: &str = "variant,angle_deg,layer_index,layer_name,L_equivariance";

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub variant: String,
    pub angle_deg: f64,
    pub error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

/// Classification error on the test images rotated by each angle, with
/// Gaussian interpolation off the quarter turns.
pub fn rotation_sweep(
    model: &mut Model<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
    classes: usize,
    angles: &[f64],
    variant: &str,
) -> Result<SweepReport> {
    let mut rows = Vec::with_capacity(angles.len());
    for &angle in angles {
        let rotated = rotate_batch(images, angle, RotationMethod::Gaussian)?;
        let eval = evaluate_images(model, &rotated, labels, classes)?;
        rows.push(SweepRow { variant: variant.to_string(), angle_deg: angle, error: eval.error() });
    }
    Ok(SweepReport { rows })
}

fn crop_planes<T: Scalar>(x: &Tensor<T>, c: usize) -> Vec<f64> {
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = Vec::new();
    for plane in x.data().chunks(h * w) {
        for y in c..h - c {
            out.extend(plane[y * w + c..y * w + w - c].iter().map(|v| v.as_f64()));
        }
    }
    out
}

/// Squared normalized error between `a_r` and `a_s` rectified by `r - s`.
///
/// Maps are one image's activations: `[C, |G|, H, W]` for group layers
/// (rectified by rotation and roll) or `[C, H, W]` for planar ones. Both are
/// compared on the interior left after cropping `⌊H·crop_fraction⌋` from
/// every side; zero-norm channels contribute 0.
pub fn activation_pair_error<T: Scalar>(
    a_r: &Tensor<T>,
    a_s: &Tensor<T>,
    r: RotationIndex,
    s: RotationIndex,
    method: RotationMethod,
    crop_fraction: f64,
) -> Result<f64> {
    if a_r.shape() != a_s.shape() {
        return Err(Error::Invalid(format!("activation shapes differ: {:?} vs {:?}", a_r.shape(), a_s.shape())));
    }
    let shape = a_r.shape();
    let rel = r.relative_to(s)?;
    let rect = match shape.len() {
        4 => act_on_group_feature_map(a_s, rel, method)?,
        3 => rotate_interp(a_s, rel, method)?,
        _ => return Err(Error::Invalid(format!("expected [C, |G|, H, W] or [C, H, W], got {shape:?}"))),
    };
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h != w {
        return Err(Error::NotSquare { op: "activation_pair_error", h, w });
    }
    let c = (h as f64 * crop_fraction).floor() as usize;
    let (a, b) = (crop_planes(a_r, c), crop_planes(&rect, c));
    let per = a.len() / shape[0];
    let mut total = 0.0;
    for (ka, kb) in a.chunks(per).zip(b.chunks(per)) {
        let na = ka.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = kb.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        let d: f64 = ka.iter().zip(kb).map(|(x, y)| (x - y) * (x - y)).sum();
        total += d / (na * nb);
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRow {
    pub variant: String,
    pub layer_index: usize,
    pub layer_name: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AngleRow {
    pub angle_deg: f64,
    pub layer_index: usize,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RobustnessReport {
    pub layers: Vec<LayerRow>,
    pub per_angle: Vec<AngleRow>,
}

fn image<T: Scalar>(batch: &Tensor<T>, i: usize) -> Tensor<T> {
    let per: usize = batch.shape()[1..].iter().product();
    Tensor::new(batch.shape()[1..].to_vec(), batch.data()[i * per..(i + 1) * per].to_vec()).expect("consistent shape")
}

/// Per-layer `L_equivariance`: the mean over images and `angles` of the pair
/// error between the reference activations (angle 0) and those of the
/// rotated input.
pub fn robustness_suite<T: Scalar>(
    model: &mut Model<T>,
    images: &Tensor<T>,
    angles: &[RotationIndex],
    method: RotationMethod,
    crop_fraction: f64,
    variant: &str,
) -> Result<RobustnessReport> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::EmptySet);
    }
    if angles.is_empty() {
        return Err(Error::Invalid("angle set is empty".into()));
    }
    let order = angles[0].order();
    let zero = RotationIndex::identity(order);
    let (_, reference) = model.infer(images)?;
    let mut sums = vec![0.0; reference.len()];
    let mut per_angle = Vec::new();
    for &r in angles {
        let rotated = rotate_interp(images, r, method)?;
        let (_, acts) = model.infer(&rotated)?;
        for (l, ((_, a0), (_, ar))) in reference.iter().zip(&acts).enumerate() {
            let mut acc = 0.0;
            for i in 0..n {
                acc += activation_pair_error(&image(a0, i), &image(ar, i), zero, r, method, crop_fraction)?;
            }
            sums[l] += acc;
            per_angle.push(AngleRow { angle_deg: r.angle().to_degrees(), layer_index: l, value: acc / n as f64 });
        }
    }
    let layers = reference
        .iter()
        .zip(&sums)
        .enumerate()
        .map(|(l, ((name, _), s))| LayerRow {
            variant: variant.to_string(),
            layer_index: l,
            layer_name: name.clone(),
            value: s / (n * angles.len()) as f64,
        })
        .collect();
    Ok(RobustnessReport { layers, per_angle })
}

pub fn sweep_csv(reports: &[&SweepReport]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in reports.iter().flat_map(|r| &r.rows) {
        let _ = writeln!(s, "{},{},{}", r.variant, r.angle_deg, r.error);
    }
    s
}

pub fn robustness_csv(reports: &[&RobustnessReport]) -> String {
    let mut s = format!("{ROBUSTNESS_HEADER}\n");
    for r in reports.iter().flat_map(|r| &r.layers) {
        let _ = writeln!(s, "{},{},{},{}", r.variant, r.layer_index, r.layer_name, r.value);
    }
    s
}

pub fn per_angle_csv(report: &RobustnessReport) -> String {
    let mut s = format!("{PER_ANGLE_HEADER}\n");
    for a in &report.per_angle {
        let layer = &report.layers[a.layer_index];
        let _ = writeln!(s, "{},{},{},{},{}", layer.variant, a.angle_deg, a.layer_index, layer.layer_name, a.value);
    }
    s
}

fn rows<'a>(text: &'a str, header: &str, fields: usize) -> Result<Vec<Vec<&'a str>>> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(Error::Format { what: "report".into(), reason: format!("expected header '{header}'") });
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() == fields {
                Ok(f)
            } else {
                Err(Error::Format {
                    what: "report".into(),
                    reason: format!("row '{l}' has {} fields, expected {fields}", f.len()),
                })
            }
        })
        .collect()
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Format { what: "report".into(), reason: format!("'{s}' is not a number") })
}

pub fn parse_sweep_csv(text: &str) -> Result<SweepReport> {
    let rows = rows(text, SWEEP_HEADER, 3)?
        .into_iter()
        .map(|f| Ok(SweepRow { variant: f[0].to_string(), angle_deg: num(f[1])?, error: num(f[2])? }))
        .collect::<Result<_>>()?;
    Ok(SweepReport { rows })
}

pub fn parse_robustness_csv(text: &str) -> Result<Vec<LayerRow>> {
    rows(text, ROBUSTNESS_HEADER, 4)?
        .into_iter()
        .map(|f| {
            Ok(LayerRow {
                variant: f[0].to_string(),
                layer_index: num(f[1])?,
                layer_name: f[2].to_string(),
                value: num(f[3])?,
            })
        })
        .collect()
}

/// Error-versus-angle lines, one polyline per variant.
pub fn sweep_svg(reports: &[&SweepReport]) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let max_angle = reports.iter().flat_map(|r| &r.rows).map(|r| r.angle_deg).fold(1.0_f64, f64::max);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{y0}\" stroke=\"black\"/>\n",
        y0 = h - pad,
        x1 = w - pad
    );
    for (i, r) in reports.iter().enumerate() {
        let pts: Vec<String> = r
            .rows
            .iter()
            .map(|row| {
                let x = pad + (w - 2.0 * pad) * row.angle_deg / max_angle;
                let y = h - pad - (h - 2.0 * pad) * row.error;
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let color = colors[i % colors.len()];
        let name = r.rows.first().map_or("", |row| row.variant.as_str());
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" points=\"{}\"/>\n<text x=\"{}\" y=\"{}\" fill=\"{color}\" font-size=\"12\">{name}</text>",
            pts.join(" "),
            w - pad - 100.0,
            pad + 14.0 * (i as f64 + 1.0)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
