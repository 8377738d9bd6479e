//! Stochastic saliency aggregation over perturbed copies, crops and patch
//! erasures of an image.
//!
//! Sample `i` of every method draws from `rng::sample_stream(base_seed, i)`,
//! samples are evaluated in parallel, and the reduction runs in sample order
//! with `f64` accumulators.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{saliency_raw, ScoreMap};
use crate::error::{Error, Result};
use crate::model::{Model, Perturbation};
use crate::ops;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropNormalization {
    /// Divide each pixel by the summed weight of the crops covering it.
    #[default]
    Coverage,
    /// Divide by the number of crops.
    StrictMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropParams {
    /// Crop area as a fraction of the image area.
    pub area_range: (f32, f32),
    /// Width over height.
    pub aspect_range: (f32, f32),
    #[serde(default)]
    pub normalization: CropNormalization,
}

impl Default for CropParams {
    fn default() -> Self {
        CropParams {
            area_range: (0.1, 0.5),
            aspect_range: (0.75, 4.0 / 3.0),
            normalization: CropNormalization::Coverage,
        }
    }
}

impl CropParams {
    fn validate(&self) -> Result<()> {
        let (a0, a1) = self.area_range;
        let (r0, r1) = self.aspect_range;
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::invalid(format!("crop area range {:?} must lie in (0, 1]", self.area_range)));
        }
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return Err(Error::invalid(format!("invalid aspect range {:?}", self.aspect_range)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregationMethod {
    Smoothgrad {
        sigma: f32,
    },
    Binarymask {
        p: f32,
    },
    RandomCrop {
        #[serde(flatten)]
        crop: CropParams,
    },
    RandomPatch {
        grid: usize,
        p_erase: f32,
    },
    DiscPatch {
        grid: usize,
        alpha: f32,
    },
    DiscCrop {
        beta: f32,
        #[serde(flatten)]
        crop: CropParams,
    },
}

impl AggregationMethod {
    pub fn needs_cam(&self) -> bool {
        matches!(self, AggregationMethod::DiscPatch { .. } | AggregationMethod::DiscCrop { .. })
    }
}

/// A method plus its sample count (crops for the crop methods) and seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationPlan {
    pub method: AggregationMethod,
    pub n_samples: usize,
    pub base_seed: u64,
}

impl AggregationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::invalid("n_samples must be at least 1"));
        }
        let prob = |name: &str, p: f32| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {p} is not a probability")))
            }
        };
        let grid = |g: usize| {
            if g == 0 {
                Err(Error::invalid("patch grid must be positive"))
            } else {
                Ok(())
            }
        };
        match self.method {
            AggregationMethod::Smoothgrad { sigma } => Perturbation::Gaussian { sigma }.validate(),
            AggregationMethod::Binarymask { p } => Perturbation::Binary { p }.validate(),
            AggregationMethod::RandomCrop { crop } => crop.validate(),
            AggregationMethod::RandomPatch { grid: g, p_erase } => {
                grid(g)?;
                prob("p_erase", p_erase)
            }
            AggregationMethod::DiscPatch { grid: g, alpha } => {
                grid(g)?;
                if alpha > 0.0 && alpha < 1.0 {
                    Ok(())
                } else {
                    Err(Error::invalid(format!("alpha = {alpha} must lie in (0, 1)")))
                }
            }
            AggregationMethod::DiscCrop { beta, crop } => {
                crop.validate()?;
                if beta > 0.0 && beta <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::invalid(format!("beta = {beta} must lie in (0, 1]")))
                }
            }
        }
    }
}

fn image_hw(image: &Tensor) -> Result<(usize, usize)> {
    let (_, h, w) = image.dims3("aggregation")?;
    Ok((h, w))
}

fn mean_of(maps: Vec<ScoreMap>, class: usize, h: usize, w: usize) -> ScoreMap {
    let mut acc = vec![0.0f64; h * w];
    let n = maps.len();
    for m in maps {
        for (a, &v) in acc.iter_mut().zip(&m.values) {
            *a += v as f64;
        }
    }
    ScoreMap::new(class, w, h, acc.into_iter().map(|s| (s / n as f64) as f32).collect(), false).unwrap()
}

fn perturbation_agg(model: &Model, image: &Tensor, class: usize, perturb: Perturbation, n: usize, seed: u64) -> Result<ScoreMap> {
    perturb.validate()?;
    let (h, w) = image_hw(image)?;
    let maps = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut stream = rng::sample_stream(seed, i as u64);
            saliency_raw(model, &perturb.apply(image, &mut stream), class)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_of(maps, class, h, w))
}

/// Mean raw saliency over `n` Gaussian-noised copies.
pub fn smoothgrad(model: &Model, image: &Tensor, class: usize, sigma: f32, n: usize, seed: u64) -> Result<ScoreMap> {
    perturbation_agg(model, image, class, Perturbation::Gaussian { sigma }, n, seed)
}

/// Mean raw saliency over `n` copies multiplied by Bernoulli(`p`) masks.
pub fn binarymask(model: &Model, image: &Tensor, class: usize, p: f32, n: usize, seed: u64) -> Result<ScoreMap> {
    perturbation_agg(model, image, class, Perturbation::Binary { p }, n, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl CropWindow {
    pub fn full(h: usize, w: usize) -> Self {
        CropWindow { y0: 0, x0: 0, h, w }
    }
}

/// Draws a crop with uniform area fraction and aspect ratio, placed
/// uniformly inside the image.
pub fn sample_crop(rng: &mut impl Rng, h: usize, w: usize, params: &CropParams) -> CropWindow {
    let (a0, a1) = params.area_range;
    let (r0, r1) = params.aspect_range;
    let area = if a0 < a1 { rng.random_range(a0..=a1) } else { a0 } * (h * w) as f32;
    let ratio = if r0 < r1 { rng.random_range(r0..=r1) } else { r0 };
    let ch = ((area / ratio).sqrt().round() as usize).clamp(1, h);
    let cw = ((area * ratio).sqrt().round() as usize).clamp(1, w);
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    CropWindow { y0, x0, h: ch, w: cw }
}

/// Saliency of one crop at its native size with its weight
/// `sigmoid(S_c(crop))`.
pub fn crop_saliency(model: &Model, image: &Tensor, class: usize, win: CropWindow) -> Result<(f32, ScoreMap)> {
    if win.h == 0 || win.w == 0 {
        return Err(Error::Degenerate("crop of zero area".into()));
    }
    let crop = image.crop(win.y0, win.x0, win.h, win.w)?;
    let trace = model.forward(&crop)?;
    let weight = ops::sigmoid(trace.logits[class]);
    let sm = crate::attribution::saliency_raw_from_trace(model, &trace, class)?;
    Ok((weight, sm))
}

/// Pastes weighted crop saliencies back onto the image grid and normalizes.
/// Crops with `keep[i] == false` contribute nothing; `n` is the divisor of
/// the strict mean.
pub fn crop_aggregate(
    model: &Model,
    image: &Tensor,
    class: usize,
    crops: &[CropWindow],
    keep: &[bool],
    normalization: CropNormalization,
) -> Result<ScoreMap> {
    model.class_weights(class)?;
    let (h, w) = image_hw(image)?;
    if crops.len() != keep.len() {
        return Err(Error::invalid("one keep flag per crop is required"));
    }
    let parts = crops
        .par_iter()
        .zip(keep)
        .map(|(&win, &k)| if k { crop_saliency(model, image, class, win).map(Some) } else { Ok(None) })
        .collect::<Result<Vec<_>>>()?;
    let mut num = vec![0.0f64; h * w];
    let mut den = vec![0.0f64; h * w];
    let mut kept = 0usize;
    for (win, part) in crops.iter().zip(parts) {
        let Some((weight, sm)) = part else { continue };
        kept += 1;
        let wt = weight as f64;
        for y in 0..win.h {
            for x in 0..win.w {
                let at = (win.y0 + y) * w + win.x0 + x;
                num[at] += wt * sm.values[y * win.w + x] as f64;
                den[at] += wt;
            }
        }
    }
    if kept == 0 {
        log::warn!("all {} crops were rejected; returning a zero map", crops.len());
        return Ok(ScoreMap::zeros(class, w, h));
    }
    let values = match normalization {
        CropNormalization::Coverage => num
            .iter()
            .zip(&den)
            .map(|(&n, &d)| if d > 0.0 { (n / d) as f32 } else { 0.0 })
            .collect(),
        CropNormalization::StrictMean => num.iter().map(|&n| (n / crops.len() as f64) as f32).collect(),
    };
    ScoreMap::new(class, w, h, values, false)
}

pub fn random_crop_agg(model: &Model, image: &Tensor, class: usize, params: &CropParams, n: usize, seed: u64) -> Result<ScoreMap> {
    params.validate()?;
    let (h, w) = image_hw(image)?;
    let crops: Vec<CropWindow> = (0..n)
        .map(|i| sample_crop(&mut rng::sample_stream(seed, i as u64), h, w, params))
        .collect();
    crop_aggregate(model, image, class, &crops, &vec![true; n], params.normalization)
}

/// Maps pixel coordinates onto a `grid × grid` lattice of equal cells; the
/// remainder pixels join the last row and column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    cell_h: usize,
    cell_w: usize,
}

impl PatchGrid {
    pub fn new(grid: usize, h: usize, w: usize) -> Self {
        let rows = grid.min(h).max(1);
        let cols = grid.min(w).max(1);
        PatchGrid {
            rows,
            cols,
            cell_h: h / rows,
            cell_w: w / cols,
        }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell_of(&self, y: usize, x: usize) -> usize {
        (y / self.cell_h).min(self.rows - 1) * self.cols + (x / self.cell_w).min(self.cols - 1)
    }
}

/// Zeroes every channel of the pixels whose cell is flagged.
pub fn erase_cells(image: &Tensor, grid: &PatchGrid, erased: &[bool]) -> Tensor {
    let (c, h, w) = image.dims3("erase_cells").unwrap();
    let mut out = image.clone();
    let data = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            if erased[grid.cell_of(y, x)] {
                for ch in 0..c {
                    data[(ch * h + y) * w + x] = 0.0;
                }
            }
        }
    }
    out
}

/// Mean raw saliency over `n` patch-erased copies, cell `j` being erased
/// with probability `probs[j]` (cells drawn in row-major order).
pub fn patch_aggregate(model: &Model, image: &Tensor, class: usize, grid: &PatchGrid, probs: &[f32], n: usize, seed: u64) -> Result<ScoreMap> {
    if probs.len() != grid.cells() {
        return Err(Error::invalid(format!("{} probabilities for {} cells", probs.len(), grid.cells())));
    }
    if n == 0 {
        return Err(Error::invalid("n_samples must be at least 1"));
    }
    let (h, w) = image_hw(image)?;
    let maps = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut stream = rng::sample_stream(seed, i as u64);
            let erased: Vec<bool> = probs.iter().map(|&p| stream.random::<f32>() < p).collect();
            saliency_raw(model, &erase_cells(image, grid, &erased), class)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_of(maps, class, h, w))
}

pub fn random_patch_agg(model: &Model, image: &Tensor, class: usize, grid: usize, p_erase: f32, n: usize, seed: u64) -> Result<ScoreMap> {
    let (h, w) = image_hw(image)?;
    let g = PatchGrid::new(grid, h, w);
    patch_aggregate(model, image, class, &g, &vec![p_erase; g.cells()], n, seed)
}

/// Pixelwise maximum over a stack of normalized maps.
fn max_over_classes(cams: &[ScoreMap], h: usize, w: usize) -> Result<Vec<f32>> {
    if cams.is_empty() {
        return Err(Error::invalid("discriminative aggregation needs at least one CAM"));
    }
    let mut out = vec![0.0f32; h * w];
    for cam in cams {
        if !cam.normalized {
            return Err(Error::invalid("discriminative aggregation needs normalized CAMs"));
        }
        if (cam.height, cam.width) != (h, w) {
            return Err(Error::ShapeMismatch {
                op: "max_over_classes",
                expected: vec![h, w],
                actual: vec![cam.height, cam.width],
            });
        }
        for (o, &v) in out.iter_mut().zip(&cam.values) {
            *o = o.max(v);
        }
    }
    Ok(out)
}

/// Patch erasure with probability `alpha · (max CAM in the patch over all
/// classes)`.
pub fn disc_patch_agg(
    model: &Model,
    image: &Tensor,
    class: usize,
    cams: &[ScoreMap],
    alpha: f32,
    grid: usize,
    n: usize,
    seed: u64,
) -> Result<ScoreMap> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha = {alpha} must lie in (0, 1)")));
    }
    let (h, w) = image_hw(image)?;
    let cam = max_over_classes(cams, h, w)?;
    let g = PatchGrid::new(grid, h, w);
    let mut cell_max = vec![0.0f32; g.cells()];
    for y in 0..h {
        for x in 0..w {
            let c = g.cell_of(y, x);
            cell_max[c] = cell_max[c].max(cam[y * w + x]);
        }
    }
    let probs: Vec<f32> = cell_max.iter().map(|&s| (alpha * s).min(1.0)).collect();
    patch_aggregate(model, image, class, &g, &probs, n, seed)
}

/// Random crops, each kept with probability `ReLU(beta − max CAM in the
/// crop over all classes)`. The crop geometry is drawn before the keep
/// decision, so with every keep probability at 1 this reproduces
/// [`random_crop_agg`].
#[allow(clippy::too_many_arguments)]
pub fn disc_crop_agg(
    model: &Model,
    image: &Tensor,
    class: usize,
    cams: &[ScoreMap],
    beta: f32,
    params: &CropParams,
    n: usize,
    seed: u64,
) -> Result<ScoreMap> {
    params.validate()?;
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::invalid(format!("beta = {beta} must lie in (0, 1]")));
    }
    let (h, w) = image_hw(image)?;
    let cam = max_over_classes(cams, h, w)?;
    let mut crops = Vec::with_capacity(n);
    let mut keep = Vec::with_capacity(n);
    for i in 0..n {
        let mut stream = rng::sample_stream(seed, i as u64);
        let win = sample_crop(&mut stream, h, w, params);
        let mut peak = 0.0f32;
        for y in win.y0..win.y0 + win.h {
            for x in win.x0..win.x0 + win.w {
                peak = peak.max(cam[y * w + x]);
            }
        }
        let p = (beta - peak).max(0.0);
        keep.push(stream.random::<f32>() < p);
        crops.push(win);
    }
    crop_aggregate(model, image, class, &crops, &keep, params.normalization)
}

/// Runs `plan`; `cams` (normalized, one per class) is required by the
/// discriminative methods and ignored otherwise.
pub fn aggregate(model: &Model, image: &Tensor, class: usize, plan: &AggregationPlan, cams: Option<&[ScoreMap]>) -> Result<ScoreMap> {
    plan.validate()?;
    let (n, seed) = (plan.n_samples, plan.base_seed);
    let need_cams = || cams.ok_or_else(|| Error::invalid("this aggregation method needs CAMs"));
    match plan.method {
        AggregationMethod::Smoothgrad { sigma } => smoothgrad(model, image, class, sigma, n, seed),
        AggregationMethod::Binarymask { p } => binarymask(model, image, class, p, n, seed),
        AggregationMethod::RandomCrop { crop } => random_crop_agg(model, image, class, &crop, n, seed),
        AggregationMethod::RandomPatch { grid, p_erase } => random_patch_agg(model, image, class, grid, p_erase, n, seed),
        AggregationMethod::DiscPatch { grid, alpha } => disc_patch_agg(model, image, class, need_cams()?, alpha, grid, n, seed),
        AggregationMethod::DiscCrop { beta, crop } => disc_crop_agg(model, image, class, need_cams()?, beta, &crop, n, seed),
    }
}
