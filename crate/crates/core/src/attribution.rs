//! CAM and gradient saliency extraction, and the threshold partitions of
//! ground-truth masks they induce.

use serde::{Deserialize, Serialize};

use crate::data::LabelMask;
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, Model};
use crate::ops;
use crate::tensor::Tensor;

pub const DEFAULT_TAU_CAM: f32 = 0.25;
pub const DEFAULT_TAU_SM: f32 = 0.15;

/// Per-class `H × W` score map, raw or max-normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    pub class_id: usize,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub normalized: bool,
    /// Set when normalization found no positive value; the map is then all zero.
    pub degenerate: bool,
}

impl ScoreMap {
    pub fn new(class_id: usize, width: usize, height: usize, values: Vec<f32>, normalized: bool) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::ShapeMismatch {
                op: "ScoreMap::new",
                expected: vec![height, width],
                actual: vec![values.len()],
            });
        }
        Ok(ScoreMap {
            class_id,
            width,
            height,
            values,
            normalized,
            degenerate: false,
        })
    }

    pub fn zeros(class_id: usize, width: usize, height: usize) -> Self {
        ScoreMap {
            class_id,
            width,
            height,
            values: vec![0.0; width * height],
            normalized: false,
            degenerate: false,
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Clamps negatives to zero and divides by the largest value. A map with
    /// no positive value becomes all zero and is flagged degenerate.
    pub fn normalize(&self) -> ScoreMap {
        let z = self.max();
        let (values, degenerate) = if z > 0.0 {
            (self.values.iter().map(|&v| if v > 0.0 { v / z } else { 0.0 }).collect(), false)
        } else {
            (vec![0.0; self.values.len()], true)
        };
        ScoreMap {
            class_id: self.class_id,
            width: self.width,
            height: self.height,
            values,
            normalized: true,
            degenerate,
        }
    }

    /// Accepts a map as already normalized when it lies in `[0, 1]` and
    /// attains 1 (or is identically 0).
    pub fn assume_normalized(mut self) -> Result<ScoreMap> {
        if let Some(i) = self.values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!(
                "class {} map value {} at pixel {i} is outside [0, 1]",
                self.class_id, self.values[i]
            )));
        }
        let max = self.max();
        if max != 1.0 && max != 0.0 {
            return Err(Error::invalid(format!("class {} map has maximum {max}, not 1", self.class_id)));
        }
        self.degenerate = max == 0.0;
        self.normalized = true;
        Ok(self)
    }

    /// Nearest-neighbour resampling to `width × height`.
    pub fn upsample_nearest(&self, width: usize, height: usize) -> ScoreMap {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                values.push(self.values[sy * self.width + x * self.width / width]);
            }
        }
        ScoreMap {
            values,
            width,
            height,
            ..self.clone()
        }
    }

    pub fn with_class(mut self, class_id: usize) -> ScoreMap {
        self.class_id = class_id;
        self
    }
}

/// Channel vector `A[:, y, x]`.
pub fn pixel_vector(activation: &Tensor, y: usize, x: usize) -> Vec<f32> {
    let (k, h, w) = activation.dims3("pixel_vector").unwrap();
    (0..k).map(|c| activation.data()[(c * h + y) * w + x]).collect()
}

/// Unclamped `w_cᵀA` per pixel from an existing forward pass.
pub fn cam_raw_from_trace(model: &Model, trace: &ForwardTrace, class: usize) -> Result<ScoreMap> {
    let w = model.class_weights(class)?;
    let (k, h, width) = trace.activation.dims3("cam")?;
    let a = trace.activation.data();
    let mut values = Vec::with_capacity(h * width);
    let mut column = vec![0.0f32; k];
    for p in 0..h * width {
        for (c, v) in column.iter_mut().enumerate() {
            *v = a[c * h * width + p];
        }
        values.push(ops::weighted_sum(w, &column));
    }
    ScoreMap::new(class, width, h, values, false)
}

pub fn cam_raw(model: &Model, image: &Tensor, class: usize) -> Result<ScoreMap> {
    model.class_weights(class)?;
    cam_raw_from_trace(model, &model.forward(image)?, class)
}

/// Normalized class activation map of model class `class`.
pub fn compute_cam(model: &Model, image: &Tensor, class: usize) -> Result<ScoreMap> {
    Ok(cam_raw(model, image, class)?.normalize())
}

/// Raw saliency `max_ch |∂S_c/∂I|` from an existing forward pass.
pub fn saliency_raw_from_trace(model: &Model, trace: &ForwardTrace, class: usize) -> Result<ScoreMap> {
    let grad = model.logit_input_gradient(trace, class)?;
    Ok(channel_abs_max(&grad, class))
}

pub fn saliency_raw(model: &Model, image: &Tensor, class: usize) -> Result<ScoreMap> {
    model.class_weights(class)?;
    saliency_raw_from_trace(model, &model.forward(image)?, class)
}

/// Normalized saliency map of model class `class`.
pub fn compute_saliency(model: &Model, image: &Tensor, class: usize) -> Result<ScoreMap> {
    Ok(saliency_raw(model, image, class)?.normalize())
}

/// Per-pixel maximum over channels of `|grad|`.
pub fn channel_abs_max(grad: &Tensor, class_id: usize) -> ScoreMap {
    let (c, h, w) = grad.dims3("channel_abs_max").unwrap();
    let g = grad.data();
    let values = (0..h * w)
        .map(|p| (0..c).map(|ch| g[ch * h * w + p].abs()).fold(0.0f32, f32::max))
        .collect();
    ScoreMap {
        class_id,
        width: w,
        height: h,
        values,
        normalized: false,
        degenerate: false,
    }
}

/// Ground-truth pixels of one class split by a score threshold. `high` holds
/// DR (or HSR) pixels, `low` holds NDR (or LSR) pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPartition {
    pub class_id: usize,
    pub width: usize,
    pub height: usize,
    pub high: Vec<bool>,
    pub low: Vec<bool>,
    pub threshold: f32,
}

impl RegionPartition {
    pub fn high_count(&self) -> usize {
        self.high.iter().filter(|&&b| b).count()
    }

    pub fn low_count(&self) -> usize {
        self.low.iter().filter(|&&b| b).count()
    }

    /// Mask with high pixels as 1, low pixels as 2 and everything else 0.
    pub fn to_mask(&self) -> LabelMask {
        let pixels = self
            .high
            .iter()
            .zip(&self.low)
            .map(|(&h, &l)| if h { 1 } else if l { 2 } else { 0 })
            .collect();
        LabelMask::new(self.width, self.height, pixels).unwrap()
    }
}

fn partition(map: &ScoreMap, gt: &LabelMask, class_id: usize, tau: f32) -> Result<RegionPartition> {
    if !map.normalized {
        return Err(Error::invalid("partition requires a normalized map"));
    }
    if map.width != gt.width || map.height != gt.height {
        return Err(Error::ShapeMismatch {
            op: "partition",
            expected: vec![gt.height, gt.width],
            actual: vec![map.height, map.width],
        });
    }
    let mut high = vec![false; gt.pixels.len()];
    let mut low = vec![false; gt.pixels.len()];
    for (i, &id) in gt.pixels.iter().enumerate() {
        if id as usize == class_id {
            if map.values[i] >= tau {
                high[i] = true;
            } else {
                low[i] = true;
            }
        }
    }
    Ok(RegionPartition {
        class_id,
        width: gt.width,
        height: gt.height,
        high,
        low,
        threshold: tau,
    })
}

/// DR/NDR split of the class-`class_id` ground truth by `CAM ≥ τ_cam`.
pub fn partition_dr_ndr(cam: &ScoreMap, gt: &LabelMask, class_id: usize, tau_cam: f32) -> Result<RegionPartition> {
    partition(cam, gt, class_id, tau_cam)
}

/// HSR/LSR split of the class-`class_id` ground truth by `SM ≥ τ_sm`.
pub fn partition_hsr_lsr(sm: &ScoreMap, gt: &LabelMask, class_id: usize, tau_sm: f32) -> Result<RegionPartition> {
    partition(sm, gt, class_id, tau_sm)
}
