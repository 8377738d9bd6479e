use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use aslab::aggregation::{AggregationMethod, AggregationPlan, CropNormalization, CropParams};
use aslab::attribution::{self, partition_dr_ndr, ScoreMap, DEFAULT_TAU_CAM, DEFAULT_TAU_SM};
use aslab::data::{self, build_mnist_seg, load_mnist, LabelMask, MnistSplit, SegDataset};
use aslab::experiment::{self, ContributionWindowConfig, SensitivityAxis};
use aslab::hyperplane::{self, Quadrant, QuadrantReport};
use aslab::metrics::{self, ConfusionAccumulator, EvalItem, MetricsReport};
use aslab::model::{self, Model, NetworkSpec, Perturbation, TrainConfig};
use aslab::resolve::{FelzenszwalbParams, ResolveMethod, SMOOTH_KERNEL_SIZE, SMOOTH_SIGMA, SUPERPIXEL_TAU};
use aslab::{Error, Result, Tensor};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{layered, need, ConfigFile};
use crate::*;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = create_file(path)?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

/// Files of `dir` with extension `ext`, sorted by stem.
fn stems(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(stem.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Maps from disk are normalized on read; a map already normalized passes
/// through unchanged.
fn read_maps(path: &Path) -> Result<Vec<ScoreMap>> {
    Ok(data::read_fmap(path)?.iter().map(ScoreMap::normalize).collect())
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(model::load_checkpoint(path)?.model)
}

fn mask_dir(dir: &Path) -> PathBuf {
    let sub = dir.join("masks");
    if sub.is_dir() {
        sub
    } else {
        dir.to_path_buf()
    }
}

fn image_dir(dir: &Path) -> PathBuf {
    let sub = dir.join("images");
    if sub.is_dir() {
        sub
    } else {
        dir.to_path_buf()
    }
}

/// The flag or config key, then `ASLAB_MNIST_DIR`, then `data/mnist` when it
/// exists.
fn mnist_dir(given: Option<PathBuf>, section: &[&str]) -> Result<PathBuf> {
    let fallback = std::env::var_os("ASLAB_MNIST_DIR")
        .map(PathBuf::from)
        .or_else(|| Some(PathBuf::from("data/mnist")).filter(|d| d.is_dir()));
    need(given.or(fallback), section, "mnist_dir")
}

pub fn build_mnist(file: Option<&ConfigFile>, args: BuildMnistArgs) -> Result<()> {
    const S: &[&str] = &["dataset", "build_mnist"];
    let a = layered(file, S, &args)?;
    let dir = mnist_dir(a.mnist_dir, S)?;
    let split = match need(a.split, S, "split")? {
        SplitArg::Train => MnistSplit::Train,
        SplitArg::Test => MnistSplit::Test,
    };
    let out = need(a.out, S, "out")?;
    let (images, labels) = load_mnist(&dir, split)?;
    let offset = a.offset.unwrap_or(0).min(images.len());
    let end = a.count.map_or(images.len(), |c| (offset + c).min(images.len()));
    let samples = build_mnist_seg(&images[offset..end], &labels[offset..end], a.side.unwrap_or(64))?;
    log::info!("writing {} samples to {}", samples.len(), out.display());
    SegDataset::indexed(samples).write(&out)
}

fn train_config(t: &TrainFlags, section: &[&str]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::with_seed(need(t.seed, section, "seed")?);
    if let Some(v) = t.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = t.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = t.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = t.momentum {
        cfg.momentum = v;
    }
    cfg.perturb = match t.perturb.unwrap_or(PerturbArg::None) {
        PerturbArg::None => Perturbation::None,
        PerturbArg::Gaussian => Perturbation::Gaussian {
            sigma: need(t.sigma, section, "sigma")?,
        },
        PerturbArg::Binary => Perturbation::Binary {
            p: need(t.p, section, "p")?,
        },
    };
    cfg.standard_augments = t.standard_augments;
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(file: Option<&ConfigFile>, args: TrainArgs) -> Result<()> {
    const S: &[&str] = &["train"];
    let a = layered(file, S, &args)?;
    let data_dir = need(a.data.clone(), S, "data")?;
    let out = need(a.out.clone(), S, "out")?;
    let cfg = train_config(&a.train, S)?;
    let ds = SegDataset::read(&data_dir)?;
    let first = ds.samples.first().ok_or_else(|| Error::invalid("empty dataset"))?;
    let (c, h, w) = first.image.dims3("train")?;
    let spec = NetworkSpec::conv_stack(
        [c, h, w],
        a.kernel.unwrap_or(3),
        a.channels.unwrap_or(16),
        a.depth.unwrap_or(5),
        a.classes.unwrap_or(10),
    );
    let net = Model::build(spec, cfg.seed)?;
    let images: Vec<Tensor> = ds.samples.iter().map(|s| s.image.clone()).collect();
    let targets: Vec<usize> = ds.samples.iter().map(|s| s.digit()).collect();
    let outcome = model::train(net, &images, &targets, &cfg)?;
    model::save_checkpoint(&outcome.checkpoint, &out)
}

pub fn infer(file: Option<&ConfigFile>, kind: MapKind, args: InferArgs) -> Result<()> {
    const S: &[&str] = &["infer"];
    let a = layered(file, S, &args)?;
    let net = load_model(&need(a.model, S, "model")?)?;
    let data_dir = need(a.data, S, "data")?;
    let out = need(a.out, S, "out")?;
    let ds = SegDataset::read(&data_dir)?;
    create_dir(&out)?;
    let compute = |image: &Tensor, class: usize| match kind {
        MapKind::Cam => attribution::compute_cam(&net, image, class),
        MapKind::Saliency => attribution::compute_saliency(&net, image, class),
    };
    let all = a.all_classes;
    ds.stems.par_iter().zip(&ds.samples).try_for_each(|(stem, s)| {
        let maps = if all {
            (0..net.num_classes())
                .map(|c| Ok(compute(&s.image, c)?.with_class(c + 1)))
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![compute(&s.image, s.digit())?.with_class(s.label as usize)]
        };
        data::write_fmap(&maps, &out.join(format!("{stem}.fmap")))
    })
}

fn plan_from(p: &PlanFlags, section: &[&str]) -> Result<AggregationPlan> {
    let crop = || CropParams {
        area_range: (p.area_min.unwrap_or(0.1), p.area_max.unwrap_or(0.5)),
        aspect_range: (p.aspect_min.unwrap_or(0.75), p.aspect_max.unwrap_or(4.0 / 3.0)),
        normalization: match p.normalization.unwrap_or(NormalizationArg::Coverage) {
            NormalizationArg::Coverage => CropNormalization::Coverage,
            NormalizationArg::StrictMean => CropNormalization::StrictMean,
        },
    };
    let method = match need(p.method, section, "method")? {
        MethodArg::Smoothgrad => AggregationMethod::Smoothgrad {
            sigma: need(p.sigma, section, "sigma")?,
        },
        MethodArg::Binarymask => AggregationMethod::Binarymask {
            p: need(p.p, section, "p")?,
        },
        MethodArg::RandomCrop => AggregationMethod::RandomCrop { crop: crop() },
        MethodArg::RandomPatch => AggregationMethod::RandomPatch {
            grid: p.grid.unwrap_or(16),
            p_erase: need(p.p_erase, section, "p_erase")?,
        },
        MethodArg::DiscPatch => AggregationMethod::DiscPatch {
            grid: p.grid.unwrap_or(16),
            alpha: p.alpha.unwrap_or(0.4),
        },
        MethodArg::DiscCrop => AggregationMethod::DiscCrop {
            beta: p.beta.unwrap_or(0.7),
            crop: crop(),
        },
    };
    let plan = AggregationPlan {
        method,
        n_samples: need(p.n_samples, section, "n_samples")?,
        base_seed: need(p.seed, section, "seed")?,
    };
    plan.validate()?;
    Ok(plan)
}

pub fn aggregate(file: Option<&ConfigFile>, args: AggregateArgs) -> Result<()> {
    const S: &[&str] = &["aggregate"];
    let a = layered(file, S, &args)?;
    let net = load_model(&need(a.model, S, "model")?)?;
    let ds = SegDataset::read(&need(a.data, S, "data")?)?;
    let out = need(a.out, S, "out")?;
    let plan = plan_from(&a.plan, S)?;
    create_dir(&out)?;
    ds.stems
        .par_iter()
        .zip(&ds.samples)
        .enumerate()
        .try_for_each(|(i, (stem, s))| {
            let map = experiment::aggregate_sample(&net, s, &plan, i)?;
            data::write_fmap(&[map.normalize().with_class(s.label as usize)], &out.join(format!("{stem}.fmap")))
        })
}

pub fn resolve(file: Option<&ConfigFile>, kind: ResolveKind, args: ResolveArgs) -> Result<()> {
    const S: &[&str] = &["resolve"];
    let a = layered(file, S, &args)?;
    let maps = need(a.maps, S, "maps")?;
    let out = need(a.out, S, "out")?;
    let method = match kind {
        ResolveKind::Basic => ResolveMethod::Basic,
        ResolveKind::Smooth => ResolveMethod::Smooth {
            size: a.size.unwrap_or(SMOOTH_KERNEL_SIZE),
            sigma: a.sigma.unwrap_or(SMOOTH_SIGMA),
        },
        ResolveKind::Superpixel => {
            let d = FelzenszwalbParams::default();
            ResolveMethod::Superpixel {
                params: FelzenszwalbParams {
                    k: a.k.unwrap_or(d.k),
                    sigma: a.fz_sigma.unwrap_or(d.sigma),
                    min_size: a.min_size.unwrap_or(d.min_size),
                },
            }
        }
    };
    let tau = match kind {
        ResolveKind::Superpixel => a.tau.unwrap_or(SUPERPIXEL_TAU),
        _ => need(a.tau, S, "tau")?,
    };
    let needs_image = kind == ResolveKind::Superpixel;
    let images = if needs_image { Some(need(a.images, S, "images")?) } else { None };
    if maps.is_file() {
        let image = images.as_deref().map(data::read_tensor).transpose()?;
        let mask = method.apply(&read_maps(&maps)?, image.as_ref(), tau)?;
        return data::write_mask_pgm(&mask, &out);
    }
    create_dir(&out)?;
    let image_root = images.as_deref().map(image_dir);
    stems(&maps, "fmap")?.par_iter().try_for_each(|stem| {
        let scores = read_maps(&maps.join(format!("{stem}.fmap")))?;
        let image = image_root
            .as_ref()
            .map(|d| data::read_tensor(&d.join(format!("{stem}.fmap"))))
            .transpose()?;
        let mask = method.apply(&scores, image.as_ref(), tau)?;
        data::write_mask_pgm(&mask, &out.join(format!("{stem}.pgm")))
    })
}

/// DR/NDR partitions of every foreground class of `gt` from its CAM file.
fn partitions_for(cams: &Path, stem: &str, gt: &LabelMask, tau_cam: f32) -> Result<Vec<attribution::RegionPartition>> {
    let path = cams.join(format!("{stem}.fmap"));
    let maps = read_maps(&path)?;
    gt.classes()
        .into_iter()
        .map(|c| {
            let cam = maps
                .iter()
                .find(|m| m.class_id == c as usize)
                .ok_or_else(|| Error::invalid(format!("{} has no map for class {c}", path.display())))?;
            partition_dr_ndr(cam, gt, c as usize, tau_cam)
        })
        .collect()
}

fn eval_items(maps: &Path, e: &EvalFlags, section: &[&str]) -> Result<Vec<EvalItem>> {
    let gt_dir = mask_dir(&need(e.gt.clone(), section, "gt")?);
    let tau_cam = e.tau_cam.unwrap_or(DEFAULT_TAU_CAM);
    stems(maps, "fmap")?
        .par_iter()
        .map(|stem| {
            let gt = data::read_mask_pgm(&gt_dir.join(format!("{stem}.pgm")))?;
            let partitions = e.cams.as_deref().map(|c| partitions_for(c, stem, &gt, tau_cam)).transpose()?;
            Ok(EvalItem {
                maps: read_maps(&maps.join(format!("{stem}.fmap")))?,
                gt,
                partitions,
            })
        })
        .collect()
}

pub fn evaluate(file: Option<&ConfigFile>, args: EvaluateArgs) -> Result<()> {
    const S: &[&str] = &["evaluate"];
    let a = layered(file, S, &args)?;
    let pred_dir = need(a.pred, S, "pred")?;
    let gt_dir = mask_dir(&need(a.eval.gt.clone(), S, "gt")?);
    let num_classes = need(a.eval.num_classes, S, "num_classes")?;
    let tau_cam = a.eval.tau_cam.unwrap_or(DEFAULT_TAU_CAM);
    let names = stems(&pred_dir, "pgm")?;
    if names.is_empty() {
        return Err(Error::invalid(format!("no .pgm predictions in {}", pred_dir.display())));
    }
    let mut acc = ConfusionAccumulator::new(num_classes);
    for stem in &names {
        let pred = data::read_mask_pgm(&pred_dir.join(format!("{stem}.pgm")))?;
        let gt = data::read_mask_pgm(&gt_dir.join(format!("{stem}.pgm")))?;
        gt.validate(num_classes)?;
        pred.validate(num_classes)?;
        let parts = a.eval.cams.as_deref().map(|c| partitions_for(c, stem, &gt, tau_cam)).transpose()?;
        acc.accumulate(&pred, &gt, parts.as_deref())?;
    }
    let report = MetricsReport::from_accumulator(&acc, a.tau.unwrap_or(f32::NAN))?;
    match a.out {
        Some(path) => write_text(&path, &report.to_json()),
        None => {
            println!("{}", report.to_json());
            Ok(())
        }
    }
}

pub fn sweep_threshold(file: Option<&ConfigFile>, args: ThresholdArgs) -> Result<()> {
    const S: &[&str] = &["sweep", "threshold"];
    let a = layered(file, S, &args)?;
    let maps = need(a.maps, S, "maps")?;
    let out = need(a.out, S, "out")?;
    let num_classes = need(a.eval.num_classes, S, "num_classes")?;
    let items = eval_items(&maps, &a.eval, S)?;
    let outcome = metrics::threshold_sweep(&items, num_classes, &metrics::default_tau_grid())?;
    metrics::write_reports_csv(&outcome.rows, create_file(&out)?)?;
    log::info!("best tau {} with mIoU {:.4}", outcome.best_tau, outcome.best.miou);
    match a.best_out {
        Some(path) => write_text(&path, &outcome.best.to_json()),
        None => Ok(()),
    }
}

pub fn sweep_contribution(file: Option<&ConfigFile>, args: ContributionArgs) -> Result<()> {
    const S: &[&str] = &["sweep", "contribution_window"];
    let a = layered(file, S, &args)?;
    let dir = mnist_dir(a.mnist_dir, S)?;
    let out = need(a.out, S, "out")?;
    let side = a.side.unwrap_or(64);
    let train_cfg = train_config(&a.train, S)?;
    let mut cfg = ContributionWindowConfig::new(a.kernels.unwrap_or_else(|| vec![1, 3, 5, 7]), train_cfg);
    if let Some(c) = a.channels {
        cfg.channels = c;
    }
    if let Some(d) = a.depth {
        cfg.depth = d;
    }
    if let Some(t) = a.tau_cam {
        cfg.tau_cam = t;
    }
    let (ti, tl) = load_mnist(&dir, MnistSplit::Train)?;
    let (vi, vl) = load_mnist(&dir, MnistSplit::Test)?;
    let nt = a.train_count.unwrap_or(10_000).min(ti.len());
    let nv = a.test_count.unwrap_or(2_000).min(vi.len());
    let train = build_mnist_seg(&ti[..nt], &tl[..nt], side)?;
    let test = build_mnist_seg(&vi[..nv], &vl[..nv], side)?;
    drop((ti, tl, vi, vl));
    let result = experiment::contribution_window(&cfg, &train, &test);
    result.write_csv(create_file(&out)?)
}

pub fn sweep_sensitivity(file: Option<&ConfigFile>, args: SensitivityArgs) -> Result<()> {
    const S: &[&str] = &["sweep", "sensitivity"];
    let a = layered(file, S, &args)?;
    let net = load_model(&need(a.model, S, "model")?)?;
    let ds = SegDataset::read(&need(a.data, S, "data")?)?;
    let out = need(a.out, S, "out")?;
    let axis = match need(a.axis, S, "axis")? {
        AxisArg::Sigma => SensitivityAxis::Sigma,
        AxisArg::P => SensitivityAxis::P,
        AxisArg::NSamples => SensitivityAxis::NSamples,
        AxisArg::NCrops => SensitivityAxis::NCrops,
        AxisArg::CropScale => SensitivityAxis::CropScale,
    };
    let values = need(a.values, S, "values")?;
    let base = plan_from(&a.plan, S)?;
    let result = experiment::sensitivity(&net, &ds.samples, axis, &values, &base, a.tau_cam.unwrap_or(DEFAULT_TAU_CAM))?;
    result.write_csv(create_file(&out)?)
}

#[derive(Serialize)]
struct HyperplaneEntry {
    stem: String,
    #[serde(flatten)]
    report: QuadrantReport,
}

#[derive(Serialize)]
struct HyperplaneSummary {
    images: Vec<HyperplaneEntry>,
    skipped: Vec<String>,
    totals: Vec<(Quadrant, usize)>,
}

pub fn hyperplane(file: Option<&ConfigFile>, args: HyperplaneArgs) -> Result<()> {
    const S: &[&str] = &["hyperplane"];
    let a = layered(file, S, &args)?;
    let net = load_model(&need(a.model, S, "model")?)?;
    let ds = SegDataset::read(&need(a.data, S, "data")?)?;
    let out = need(a.out, S, "out")?;
    let (tau_cam, tau_sm) = (a.tau_cam.unwrap_or(DEFAULT_TAU_CAM), a.tau_sm.unwrap_or(DEFAULT_TAU_SM));
    let n = a.limit.unwrap_or(ds.samples.len()).min(ds.samples.len());
    create_dir(&out)?;
    let results: Vec<(String, Result<QuadrantReport>)> = ds.stems[..n]
        .par_iter()
        .zip(&ds.samples[..n])
        .map(|(stem, s)| {
            let r = hyperplane::quadrant_decomposition(&net, &s.image, &s.mask, s.digit(), s.label, tau_cam, tau_sm)
                .and_then(|an| {
                    hyperplane::save_scatter_csv(&an.pixels, &out.join(format!("{stem}.csv")))?;
                    Ok(an.report)
                });
            (stem.clone(), r)
        })
        .collect();
    let mut summary = HyperplaneSummary {
        images: Vec::new(),
        skipped: Vec::new(),
        totals: Quadrant::ALL.iter().map(|&q| (q, 0)).collect(),
    };
    for (stem, r) in results {
        match r {
            Ok(report) => {
                for (q, total) in summary.totals.iter_mut() {
                    *total += report.count(*q);
                }
                summary.images.push(HyperplaneEntry { stem, report });
            }
            Err(e @ (Error::Degenerate(_) | Error::InvalidArgument(_))) => {
                log::warn!("{stem}: skipped ({e})");
                summary.skipped.push(stem);
            }
            Err(e) => return Err(e),
        }
    }
    write_text(&out.join("summary.json"), &serde_json::to_string_pretty(&summary).expect("summary serializes"))
}

/// Gray level `floor(v * 255 + 0.5)` of a normalized score.
pub fn heat_level(v: f32) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn export_heatmap(file: Option<&ConfigFile>, args: HeatmapArgs) -> Result<()> {
    const S: &[&str] = &["export_heatmap"];
    let a = layered(file, S, &args)?;
    let path = need(a.map, S, "map")?;
    let out = need(a.out, S, "out")?;
    let maps = data::read_fmap(&path)?;
    let i = a.index.unwrap_or(0);
    let map = maps
        .get(i)
        .ok_or_else(|| Error::invalid(format!("{} holds {} maps, index {i} requested", path.display(), maps.len())))?;
    // Values already in [0, 1] are drawn as they are; anything else is a
    // raw map and is normalized first.
    let map = if map.values.iter().all(|v| (0.0..=1.0).contains(v)) {
        map.clone()
    } else {
        map.normalize()
    };
    let mask = LabelMask::new(map.width, map.height, map.values.iter().map(|&v| heat_level(v)).collect())?;
    data::write_mask_pgm(&mask, &out)
}
