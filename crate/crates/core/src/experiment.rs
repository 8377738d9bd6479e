//! End-to-end MNIST experiments: the kernel-size (contribution window) sweep
//! and the aggregation sensitivity sweeps.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{self, AggregationMethod, AggregationPlan};
use crate::attribution::{self, partition_dr_ndr, ScoreMap, DEFAULT_TAU_CAM};
use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::hyperplane::csv_err;
use crate::metrics::{self, opt, EvalItem, MetricsReport, SweepOutcome};
use crate::model::{self, Model, NetworkSpec, TrainConfig};

/// Number of segmentation classes of MNIST-seg (background + ten digits).
pub const MNIST_SEG_CLASSES: usize = 11;

/// Normalized CAM and saliency of the sample's digit, relabelled to its
/// segmentation class, from one forward pass.
pub fn sample_maps(model: &Model, sample: &SegSample) -> Result<(ScoreMap, ScoreMap)> {
    let trace = model.forward(&sample.image)?;
    let digit = sample.digit();
    let label = sample.label as usize;
    let cam = attribution::cam_raw_from_trace(model, &trace, digit)?.normalize().with_class(label);
    let sm = attribution::saliency_raw_from_trace(model, &trace, digit)?.normalize().with_class(label);
    Ok((cam, sm))
}

fn eval_item(map: ScoreMap, cam: &ScoreMap, sample: &SegSample, tau_cam: f32) -> Result<EvalItem> {
    let partition = partition_dr_ndr(cam, &sample.mask, sample.label as usize, tau_cam)?;
    Ok(EvalItem {
        maps: vec![map],
        gt: sample.mask.clone(),
        partitions: Some(vec![partition]),
    })
}

/// CAM and saliency evaluation items for every sample; DR/NDR come from
/// the model's own CAM at `tau_cam`.
pub fn cam_and_saliency_items(model: &Model, samples: &[SegSample], tau_cam: f32) -> Result<(Vec<EvalItem>, Vec<EvalItem>)> {
    let pairs = samples
        .par_iter()
        .map(|s| {
            let (cam, sm) = sample_maps(model, s)?;
            Ok((eval_item(cam.clone(), &cam, s, tau_cam)?, eval_item(sm, &cam, s, tau_cam)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pairs.into_iter().unzip())
}

/// Raw aggregated saliency of the sample's digit. Sample `index` draws from
/// its own stream `split(plan.base_seed, index)`.
pub fn aggregate_sample(model: &Model, sample: &SegSample, plan: &AggregationPlan, index: usize) -> Result<ScoreMap> {
    let digit = sample.digit();
    let all_cams;
    let cams = if plan.method.needs_cam() {
        all_cams = (0..model.num_classes())
            .map(|c| attribution::compute_cam(model, &sample.image, c))
            .collect::<Result<Vec<_>>>()?;
        Some(all_cams.as_slice())
    } else {
        None
    };
    let plan = AggregationPlan {
        base_seed: crate::rng::split(plan.base_seed, index as u64),
        ..*plan
    };
    aggregation::aggregate(model, &sample.image, digit, &plan, cams)
}

/// Evaluation items for an aggregated saliency under `plan`.
pub fn aggregated_items(model: &Model, samples: &[SegSample], plan: &AggregationPlan, tau_cam: f32) -> Result<Vec<EvalItem>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let (cam, _) = sample_maps(model, s)?;
            let agg = aggregate_sample(model, s, plan, i)?;
            eval_item(agg.normalize().with_class(s.label as usize), &cam, s, tau_cam)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub method: String,
    pub best_tau: Option<f32>,
    pub miou: Option<f64>,
    pub fg_precision: Option<f64>,
    pub dr_recall: Option<f64>,
    pub ndr_recall: Option<f64>,
    pub accuracy: Option<f32>,
    pub error: Option<String>,
}

impl SweepRow {
    fn ok(axis: &str, value: f64, method: &str, best: &MetricsReport, accuracy: Option<f32>) -> Self {
        SweepRow {
            axis: axis.into(),
            value,
            method: method.into(),
            best_tau: Some(best.tau),
            miou: Some(best.miou),
            fg_precision: best.fg_precision,
            dr_recall: best.dr_recall,
            ndr_recall: best.ndr_recall,
            accuracy,
            error: None,
        }
    }

    fn failed(axis: &str, value: f64, method: &str, err: &Error) -> Self {
        SweepRow {
            axis: axis.into(),
            value,
            method: method.into(),
            best_tau: None,
            miou: None,
            fg_precision: None,
            dr_recall: None,
            ndr_recall: None,
            accuracy: None,
            error: Some(err.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_CSV_HEADER: [&str; 10] = [
    "axis",
    "value",
    "method",
    "best_tau",
    "miou",
    "fg_precision",
    "dr_recall",
    "ndr_recall",
    "accuracy",
    "error",
];

impl SweepResult {
    pub fn row(&self, value: f64, method: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.value == value && r.method == method)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(SWEEP_CSV_HEADER).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.axis.clone(),
                r.value.to_string(),
                r.method.clone(),
                r.best_tau.map_or_else(String::new, |t| t.to_string()),
                opt(r.miou),
                opt(r.fg_precision),
                opt(r.dr_recall),
                opt(r.ndr_recall),
                r.accuracy.map_or_else(String::new, |a| a.to_string()),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContributionWindowConfig {
    pub kernel_sizes: Vec<usize>,
    pub channels: usize,
    pub depth: usize,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub tau_cam: f32,
}

impl ContributionWindowConfig {
    pub fn new(kernel_sizes: Vec<usize>, train: TrainConfig) -> Self {
        ContributionWindowConfig {
            kernel_sizes,
            channels: 16,
            depth: 5,
            model_seed: train.seed,
            train,
            tau_cam: DEFAULT_TAU_CAM,
        }
    }
}

/// Trained model and evaluation of one kernel size.
#[derive(Debug, Clone)]
pub struct KernelRun {
    pub kernel: usize,
    pub model: Model,
    pub accuracy: f32,
    pub cam: SweepOutcome,
    pub saliency: SweepOutcome,
}

/// Trains and evaluates one kernel size.
pub fn run_kernel(kernel: usize, cfg: &ContributionWindowConfig, train: &[SegSample], test: &[SegSample]) -> Result<KernelRun> {
    if kernel % 2 == 0 {
        return Err(Error::invalid(format!("kernel size {kernel} is even; same padding needs odd sizes")));
    }
    let first = train.first().ok_or_else(|| Error::invalid("empty training set"))?;
    let (c, h, w) = first.image.dims3("run_kernel")?;
    let spec = NetworkSpec::conv_stack([c, h, w], kernel, cfg.channels, cfg.depth, 10);
    let model = Model::build(spec, crate::rng::split(cfg.model_seed, kernel as u64))?;
    let images: Vec<_> = train.iter().map(|s| s.image.clone()).collect();
    let targets: Vec<usize> = train.iter().map(SegSample::digit).collect();
    log::info!("training F={kernel} on {} images", images.len());
    let model = model::train(model, &images, &targets, &cfg.train)?.checkpoint.model;
    drop(images);
    let test_images: Vec<_> = test.iter().map(|s| s.image.clone()).collect();
    let test_targets: Vec<usize> = test.iter().map(SegSample::digit).collect();
    let accuracy = model::accuracy(&model, &test_images, &test_targets)?;
    let (cam_items, sm_items) = cam_and_saliency_items(&model, test, cfg.tau_cam)?;
    let grid = metrics::default_tau_grid();
    let cam = metrics::threshold_sweep(&cam_items, MNIST_SEG_CLASSES, &grid)?;
    let saliency = metrics::threshold_sweep(&sm_items, MNIST_SEG_CLASSES, &grid)?;
    log::info!(
        "F={kernel}: accuracy {accuracy:.4}, CAM mIoU {:.4} NDR {:?}, saliency mIoU {:.4} NDR {:?}",
        cam.best.miou,
        cam.best.ndr_recall,
        saliency.best.miou,
        saliency.best.ndr_recall
    );
    Ok(KernelRun {
        kernel,
        model,
        accuracy,
        cam,
        saliency,
    })
}

/// Sweeps the kernel size; a failure at one size is recorded in its rows
/// and the sweep continues.
pub fn contribution_window(cfg: &ContributionWindowConfig, train: &[SegSample], test: &[SegSample]) -> SweepResult {
    let mut result = SweepResult::default();
    for &kernel in &cfg.kernel_sizes {
        let value = kernel as f64;
        match run_kernel(kernel, cfg, train, test) {
            Ok(run) => {
                result.rows.push(SweepRow::ok("kernel", value, "cam", &run.cam.best, Some(run.accuracy)));
                result.rows.push(SweepRow::ok("kernel", value, "saliency", &run.saliency.best, Some(run.accuracy)));
            }
            Err(e) => {
                log::warn!("kernel {kernel} failed: {e}");
                result.rows.push(SweepRow::failed("kernel", value, "cam", &e));
                result.rows.push(SweepRow::failed("kernel", value, "saliency", &e));
            }
        }
    }
    result
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityAxis {
    Sigma,
    P,
    NSamples,
    NCrops,
    /// Fixed crop area fraction.
    CropScale,
}

impl SensitivityAxis {
    pub fn name(self) -> &'static str {
        match self {
            SensitivityAxis::Sigma => "sigma",
            SensitivityAxis::P => "p",
            SensitivityAxis::NSamples => "n_samples",
            SensitivityAxis::NCrops => "n_crops",
            SensitivityAxis::CropScale => "crop_scale",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &AggregationPlan, value: f64) -> Result<AggregationPlan> {
        let mut plan = *base;
        let mismatch = || Error::invalid(format!("axis {} does not apply to {:?}", self.name(), base.method));
        let count = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::invalid(format!("{} must be a positive integer, got {value}", self.name())))
            }
        };
        match (self, &mut plan.method) {
            (SensitivityAxis::Sigma, AggregationMethod::Smoothgrad { sigma }) => *sigma = value as f32,
            (SensitivityAxis::P, AggregationMethod::Binarymask { p }) => *p = value as f32,
            (SensitivityAxis::NSamples, _) => plan.n_samples = count()?,
            (SensitivityAxis::NCrops, AggregationMethod::RandomCrop { .. } | AggregationMethod::DiscCrop { .. }) => {
                plan.n_samples = count()?
            }
            (SensitivityAxis::CropScale, AggregationMethod::RandomCrop { crop } | AggregationMethod::DiscCrop { crop, .. }) => {
                crop.area_range = (value as f32, value as f32)
            }
            _ => return Err(mismatch()),
        }
        plan.validate()?;
        Ok(plan)
    }
}

/// One aggregated-saliency evaluation per axis value; a failing value only
/// affects its own row.
pub fn sensitivity(model: &Model, samples: &[SegSample], axis: SensitivityAxis, values: &[f64], base: &AggregationPlan, tau_cam: f32) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::invalid("sensitivity sweep needs at least one value"));
    }
    let grid = metrics::default_tau_grid();
    let method = method_name(&base.method);
    let rows = values
        .iter()
        .map(|&v| {
            let outcome = axis
                .apply(base, v)
                .and_then(|plan| aggregated_items(model, samples, &plan, tau_cam))
                .and_then(|items| metrics::threshold_sweep(&items, MNIST_SEG_CLASSES, &grid));
            match outcome {
                Ok(out) => SweepRow::ok(axis.name(), v, method, &out.best, None),
                Err(e) => {
                    log::warn!("{} = {v} failed: {e}", axis.name());
                    SweepRow::failed(axis.name(), v, method, &e)
                }
            }
        })
        .collect();
    Ok(SweepResult { rows })
}

pub fn method_name(m: &AggregationMethod) -> &'static str {
    match m {
        AggregationMethod::Smoothgrad { .. } => "smoothgrad",
        AggregationMethod::Binarymask { .. } => "binarymask",
        AggregationMethod::RandomCrop { .. } => "random_crop",
        AggregationMethod::RandomPatch { .. } => "random_patch",
        AggregationMethod::DiscPatch { .. } => "disc_patch",
        AggregationMethod::DiscCrop { .. } => "disc_crop",
    }
}
