//! Per-pixel geometry of the CAM hyperplane in activation space and the
//! saliency hyperplane pair in GAP-gradient space.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::{self, ScoreMap};
use crate::data::LabelMask;
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, Model};
use crate::ops;
use crate::tensor::Tensor;

/// `∂GAP(A)_ch / ∂I` for every GAP channel `ch`, each shaped like the image.
#[derive(Debug, Clone)]
pub struct GapJacobian {
    pub channels: Vec<Tensor>,
}

impl GapJacobian {
    pub fn k(&self) -> usize {
        self.channels.len()
    }

    /// `a′` at image channel `c`, pixel `(y, x)`.
    pub fn vector(&self, c: usize, y: usize, x: usize) -> Vec<f32> {
        let (_, h, w) = self.channels[0].dims3("GapJacobian").unwrap();
        let at = (c * h + y) * w + x;
        self.channels.iter().map(|t| t.data()[at]).collect()
    }

    fn image_dims(&self) -> (usize, usize, usize) {
        self.channels[0].dims3("GapJacobian").unwrap()
    }
}

pub fn gap_input_jacobian_from_trace(model: &Model, trace: &ForwardTrace) -> Result<GapJacobian> {
    let k = model.spec().feature_channels();
    let mut seed = vec![0.0f32; k];
    let mut channels = Vec::with_capacity(k);
    for ch in 0..k {
        seed[ch] = 1.0;
        channels.push(model.backward_from_gap(trace, &seed, false)?.1);
        seed[ch] = 0.0;
    }
    Ok(GapJacobian { channels })
}

/// One backward pass per GAP channel.
pub fn gap_input_jacobian(model: &Model, image: &Tensor) -> Result<GapJacobian> {
    gap_input_jacobian_from_trace(model, &model.forward(image)?)
}

/// Raw saliency rebuilt from the Jacobian: `max_c |w_cᵀa′|` per pixel, with
/// the dot product taken in GAP-channel order.
pub fn saliency_from_jacobian(jac: &GapJacobian, w: &[f32], class_id: usize) -> ScoreMap {
    let (c, h, width) = jac.image_dims();
    let mut values = Vec::with_capacity(h * width);
    let mut a = vec![0.0f32; jac.k()];
    for p in 0..h * width {
        let mut best = 0.0f32;
        for ch in 0..c {
            for (v, t) in a.iter_mut().zip(&jac.channels) {
                *v = t.data()[ch * h * width + p];
            }
            best = best.max(ops::weighted_sum(w, &a).abs());
        }
        values.push(best);
    }
    ScoreMap::new(class_id, width, h, values, false).unwrap()
}

fn l2_norm(w: &[f32]) -> f32 {
    ops::weighted_sum(w, w).sqrt()
}

/// `margin / slope`, keeping a strictly negative sign for negative margins
/// even when the quotient underflows.
fn signed_ratio(margin: f32, slope: f32) -> f32 {
    let d = margin / slope;
    if margin < 0.0 && d == 0.0 {
        -f32::from_bits(1)
    } else {
        d
    }
}

/// Signed distance of activation vector `a` to `{a : w_cᵀa / Z − τ = 0}`.
pub fn cam_signed_distance(a: &[f32], w: &[f32], z: f32, tau_cam: f32) -> Result<f32> {
    if z == 0.0 || !z.is_finite() {
        return Err(Error::Degenerate(format!("CAM normalizer Z = {z}")));
    }
    if !(tau_cam > 0.0) {
        return Err(Error::invalid(format!("tau_cam must be positive, got {tau_cam}")));
    }
    let margin = ops::weighted_sum(w, a) / z - tau_cam;
    Ok(signed_ratio(margin, l2_norm(w) / z))
}

/// Signed distance of GAP-gradient vector `a′` to the outer side of the pair
/// `{a′ : |w_cᵀa′| / Z_sm = τ}`.
pub fn sm_signed_distance(a_prime: &[f32], w: &[f32], z_sm: f32, tau_sm: f32) -> Result<f32> {
    if !(z_sm > 0.0 && z_sm.is_finite()) {
        return Err(Error::Degenerate(format!("saliency normalizer Z_sm = {z_sm}")));
    }
    let margin = ops::weighted_sum(w, a_prime).abs() / z_sm - tau_sm;
    Ok(signed_ratio(margin, l2_norm(w) / z_sm))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    #[serde(rename = "HSR-DR")]
    HsrDr,
    #[serde(rename = "LSR-DR")]
    LsrDr,
    #[serde(rename = "HSR-NDR")]
    HsrNdr,
    #[serde(rename = "LSR-NDR")]
    LsrNdr,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::HsrDr, Quadrant::LsrDr, Quadrant::HsrNdr, Quadrant::LsrNdr];

    pub fn from_signs(dr: bool, hsr: bool) -> Self {
        match (hsr, dr) {
            (true, true) => Quadrant::HsrDr,
            (false, true) => Quadrant::LsrDr,
            (true, false) => Quadrant::HsrNdr,
            (false, false) => Quadrant::LsrNdr,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Quadrant::HsrDr => "HSR-DR",
            Quadrant::LsrDr => "LSR-DR",
            Quadrant::HsrNdr => "HSR-NDR",
            Quadrant::LsrNdr => "LSR-NDR",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelGeometry {
    pub pixel_i: usize,
    pub pixel_j: usize,
    pub cam_dist: f32,
    pub sm_dist: f32,
    pub quadrant: Quadrant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantCount {
    pub quadrant: Quadrant,
    pub count: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantReport {
    pub class_id: usize,
    pub tau_cam: f32,
    pub tau_sm: f32,
    pub gt_pixels: usize,
    pub quadrants: Vec<QuadrantCount>,
}

impl QuadrantReport {
    pub fn fraction(&self, q: Quadrant) -> f64 {
        self.quadrants[q.index()].fraction
    }

    pub fn count(&self, q: Quadrant) -> usize {
        self.quadrants[q.index()].count
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Full per-image analysis. `cam` and `saliency` are the normalized maps the
/// distances were measured against.
#[derive(Debug, Clone)]
pub struct HyperplaneAnalysis {
    pub report: QuadrantReport,
    pub pixels: Vec<PixelGeometry>,
    pub cam: ScoreMap,
    pub saliency: ScoreMap,
}

/// Signed distances and quadrant of every ground-truth pixel of `gt_class`
/// under model class `model_class`.
pub fn quadrant_decomposition(
    model: &Model,
    image: &Tensor,
    gt: &LabelMask,
    model_class: usize,
    gt_class: u8,
    tau_cam: f32,
    tau_sm: f32,
) -> Result<HyperplaneAnalysis> {
    let w = model.class_weights(model_class)?;
    if !gt.pixels.contains(&gt_class) {
        return Err(Error::invalid(format!("class {gt_class} is absent from the ground truth")));
    }
    let trace = model.forward(image)?;
    let (_, h, width) = trace.activation.dims3("hyperplane")?;
    if (gt.width, gt.height) != (width, h) {
        return Err(Error::ShapeMismatch {
            op: "quadrant_decomposition",
            expected: vec![h, width],
            actual: vec![gt.height, gt.width],
        });
    }
    let cam_raw = attribution::cam_raw_from_trace(model, &trace, model_class)?;
    let z = cam_raw.max();
    if !(z > 0.0) {
        return Err(Error::Degenerate(format!("CAM of class {model_class} has no positive value")));
    }
    let jac = gap_input_jacobian_from_trace(model, &trace)?;
    let sm_raw = saliency_from_jacobian(&jac, w, model_class);
    let z_sm = sm_raw.max();
    let (channels, _, _) = jac.image_dims();

    let mut pixels = Vec::new();
    let mut counts = [0usize; 4];
    for y in 0..h {
        for x in 0..width {
            if gt.get(y, x) != gt_class {
                continue;
            }
            let a = attribution::pixel_vector(&trace.activation, y, x);
            let cam_dist = cam_signed_distance(&a, w, z, tau_cam)?;
            let mut sm_dist = f32::NEG_INFINITY;
            for c in 0..channels {
                sm_dist = sm_dist.max(sm_signed_distance(&jac.vector(c, y, x), w, z_sm, tau_sm)?);
            }
            let quadrant = Quadrant::from_signs(cam_dist >= 0.0, sm_dist >= 0.0);
            counts[quadrant.index()] += 1;
            pixels.push(PixelGeometry {
                pixel_i: y,
                pixel_j: x,
                cam_dist,
                sm_dist,
                quadrant,
            });
        }
    }
    let total = pixels.len();
    let quadrants = Quadrant::ALL
        .iter()
        .map(|&q| QuadrantCount {
            quadrant: q,
            count: counts[q.index()],
            fraction: counts[q.index()] as f64 / total as f64,
        })
        .collect();
    Ok(HyperplaneAnalysis {
        report: QuadrantReport {
            class_id: gt_class as usize,
            tau_cam,
            tau_sm,
            gt_pixels: total,
            quadrants,
        },
        pixels,
        cam: cam_raw.normalize(),
        saliency: sm_raw.normalize(),
    })
}

/// Scatter rows `pixel_i,pixel_j,cam_dist,sm_dist,quadrant`.
pub fn write_scatter_csv(pixels: &[PixelGeometry], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["pixel_i", "pixel_j", "cam_dist", "sm_dist", "quadrant"])
        .map_err(csv_err)?;
    for p in pixels {
        w.write_record([
            p.pixel_i.to_string(),
            p.pixel_j.to_string(),
            p.cam_dist.to_string(),
            p.sm_dist.to_string(),
            p.quadrant.name().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn save_scatter_csv(pixels: &[PixelGeometry], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_scatter_csv(pixels, std::io::BufWriter::new(f))
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}
