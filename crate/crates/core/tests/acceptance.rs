//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout.
//! `ASLAB_ACCEPTANCE=2,5` restricts the run to the listed criteria.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use aslab::aggregation::{
    self, binarymask, random_crop_agg, random_patch_agg, smoothgrad, AggregationMethod, AggregationPlan, CropNormalization, CropParams,
};
use aslab::attribution::{compute_cam, partition_dr_ndr, partition_hsr_lsr, saliency_raw, ScoreMap, DEFAULT_TAU_CAM, DEFAULT_TAU_SM};
use aslab::data::{self, build_mnist_seg, load_mnist, LabelMask, MnistSplit, SegSample, IGNORE};
use aslab::experiment::{self, cam_and_saliency_items, contribution_window, ContributionWindowConfig, SensitivityAxis, MNIST_SEG_CLASSES};
use aslab::hyperplane::quadrant_decomposition;
use aslab::metrics::{self, default_tau_grid, ConfusionAccumulator, EvalItem, MetricsReport};
use aslab::model::{self, Model, NetworkSpec, Perturbation, TrainConfig};
use aslab::parallel::with_threads;
use aslab::resolve::{felzenszwalb, resolve_basic, FelzenszwalbParams, ResolveMethod};
use aslab::Tensor;
use common::{check_network_gradients, mnist_dir, random_model, random_spec, rng, uniform_tensor, FdStats};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn mnist() -> Result<PathBuf, String> {
    mnist_dir().ok_or_else(|| "MNIST directory not found; set ASLAB_MNIST_DIR".to_string())
}

fn mnist_seg(split: MnistSplit, count: usize, side: usize) -> Result<Vec<SegSample>, String> {
    let (images, labels) = load_mnist(&mnist()?, split).map_err(|e| e.to_string())?;
    let n = count.min(images.len());
    build_mnist_seg(&images[..n], &labels[..n], side).map_err(|e| e.to_string())
}

/// User plus system CPU seconds of this process.
fn cpu_seconds() -> Option<f64> {
    let stat = std::fs::read_to_string("/proc/self/stat").ok()?;
    // Fields after the parenthesised command name; utime and stime are the
    // 14th and 15th fields overall. Clock ticks are 100 Hz on Linux.
    let rest = &stat[stat.rfind(')')? + 2..];
    let f: Vec<&str> = rest.split_whitespace().collect();
    let ticks = f.get(11)?.parse::<f64>().ok()? + f.get(12)?.parse::<f64>().ok()?;
    Some(ticks / 100.0)
}

// ---------------------------------------------------------------- 1

const GRAD_NETS: u64 = 120;
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_SECONDS: f64 = 120.0;

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut total = FdStats::default();
    for seed in 0..GRAD_NETS {
        let mut r = rng(1_000 + seed);
        let spec = random_spec(&mut r);
        let image = uniform_tensor(&mut r, &spec.input_shape, -1.0, 1.0);
        let weights = uniform_tensor(&mut r, &[spec.num_classes], -1.0, 1.0);
        let model = random_model(spec, &mut r);
        let s = check_network_gradients(&model, &image, weights.data());
        ensure(s.worst_rel < GRAD_REL_TOL, || format!("net {seed}: worst relative error {:.3e}", s.worst_rel))?;
        total.merge(s);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < GRAD_SECONDS, || format!("took {secs:.1}s"))?;
    ensure(total.checked > 10 * total.excluded, || format!("too many kink exclusions: {total:?}"))?;
    Ok(format!(
        "{GRAD_NETS} nets, {} coordinates checked, {} excluded, worst rel {:.2e}, {secs:.1}s",
        total.checked, total.excluded, total.worst_rel
    ))
}

// ---------------------------------------------------------------- 2, 10

const F5_TRAIN_IMAGES: usize = 2000;
const F5_EPOCHS: usize = 1;
const EVAL_IMAGES: usize = 200;

struct Trained {
    model: Model,
    test: Vec<SegSample>,
}

fn train_f5() -> Result<Trained, String> {
    let train = mnist_seg(MnistSplit::Train, F5_TRAIN_IMAGES, 64)?;
    let test = mnist_seg(MnistSplit::Test, EVAL_IMAGES, 64)?;
    let mut cfg = TrainConfig::with_seed(5);
    cfg.epochs = F5_EPOCHS;
    cfg.batch_size = 8;
    let images: Vec<Tensor> = train.iter().map(|s| s.image.clone()).collect();
    let targets: Vec<usize> = train.iter().map(SegSample::digit).collect();
    let model = Model::build(NetworkSpec::mnist(5, 64), 5).map_err(|e| e.to_string())?;
    let model = model::train(model, &images, &targets, &cfg).map_err(|e| e.to_string())?.checkpoint.model;
    Ok(Trained { model, test })
}

fn hyperplane_sign_agreement(t: &Trained) -> Outcome {
    let (mut pixels, mut dr, mut hsr) = (0usize, 0usize, 0usize);
    for (i, s) in t.test.iter().enumerate() {
        let an = quadrant_decomposition(&t.model, &s.image, &s.mask, s.digit(), s.label, DEFAULT_TAU_CAM, DEFAULT_TAU_SM)
            .map_err(|e| format!("image {i}: {e}"))?;
        let cam = compute_cam(&t.model, &s.image, s.digit()).map_err(|e| e.to_string())?;
        ensure(cam == an.cam, || format!("image {i}: pipeline CAM differs from the analysed CAM"))?;
        let dr_part = partition_dr_ndr(&cam, &s.mask, s.label as usize, DEFAULT_TAU_CAM).map_err(|e| e.to_string())?;
        let hsr_part = partition_hsr_lsr(&an.saliency, &s.mask, s.label as usize, DEFAULT_TAU_SM).map_err(|e| e.to_string())?;
        ensure(an.pixels.len() == dr_part.high_count() + dr_part.low_count(), || {
            format!("image {i}: analysed {} of the ground-truth pixels", an.pixels.len())
        })?;
        for p in &an.pixels {
            let at = p.pixel_i * s.mask.width + p.pixel_j;
            ensure((p.cam_dist >= 0.0) == dr_part.high[at], || {
                format!("image {i} pixel ({}, {}): CAM distance {} against DR {}", p.pixel_i, p.pixel_j, p.cam_dist, dr_part.high[at])
            })?;
            ensure((p.sm_dist >= 0.0) == hsr_part.high[at], || {
                format!("image {i} pixel ({}, {}): SM distance {} against HSR {}", p.pixel_i, p.pixel_j, p.sm_dist, hsr_part.high[at])
            })?;
            pixels += 1;
            dr += dr_part.high[at] as usize;
            hsr += hsr_part.high[at] as usize;
        }
    }
    Ok(format!("{} images, {pixels} GT pixels ({dr} DR, {hsr} HSR), 100% agreement", t.test.len()))
}

fn decomposition_identity(acc: &ConfusionAccumulator) -> Result<(), String> {
    for c in 1..acc.num_classes {
        let row: u64 = (0..acc.num_classes).map(|p| acc.confusion(c, p)).sum();
        let regions = acc.dr_tp(c) + acc.dr_fn(c) + acc.ndr_tp(c) + acc.ndr_fn(c);
        if regions == 0 {
            continue;
        }
        ensure(regions == row && acc.dr_tp(c) + acc.ndr_tp(c) == acc.confusion(c, c), || {
            format!("class {c}: region counts do not cover its ground truth")
        })?;
        let (overall, weighted) = (acc.class_recall(c).unwrap(), acc.recall_from_regions(c).unwrap());
        ensure((overall - weighted).abs() <= 1e-12, || format!("class {c}: recall {overall} but region mean {weighted}"))?;
    }
    Ok(())
}

fn naive_sweep(items: &[EvalItem], grid: &[f32]) -> Result<(f32, Vec<MetricsReport>), String> {
    let mut rows = Vec::new();
    for &tau in grid {
        let mut acc = ConfusionAccumulator::new(MNIST_SEG_CLASSES);
        for item in items {
            let pred = resolve_basic(&item.maps, tau).map_err(|e| e.to_string())?;
            acc.accumulate(&pred, &item.gt, item.partitions.as_deref()).map_err(|e| e.to_string())?;
        }
        decomposition_identity(&acc).map_err(|e| format!("tau {tau}: {e}"))?;
        rows.push(MetricsReport::from_accumulator(&acc, tau).map_err(|e| e.to_string())?);
    }
    let mut best = 0;
    for i in 1..rows.len() {
        if rows[i].miou > rows[best].miou {
            best = i;
        }
    }
    Ok((rows[best].tau, rows))
}

fn sweep_protocol(t: &Trained) -> Outcome {
    let grid = default_tau_grid();
    ensure(grid.len() == 50 && grid[0] == 0.01 && grid[49] == 0.5, || "unexpected grid".into())?;
    let (cam_items, sm_items) = cam_and_saliency_items(&t.model, &t.test, DEFAULT_TAU_CAM).map_err(|e| e.to_string())?;
    let mut summary = Vec::new();
    for (name, items) in [("cam", &cam_items), ("saliency", &sm_items)] {
        let fast = metrics::threshold_sweep(items, MNIST_SEG_CLASSES, &grid).map_err(|e| e.to_string())?;
        let (best_tau, rows) = naive_sweep(items, &grid)?;
        ensure(fast.best_tau == best_tau, || format!("{name}: tau* {} against {best_tau}", fast.best_tau))?;
        ensure(fast.rows == rows, || {
            let i = fast.rows.iter().zip(&rows).position(|(a, b)| a != b).unwrap_or(0);
            format!("{name}: rows differ at tau {}", grid[i])
        })?;
        ensure(fast.best == rows[grid.iter().position(|&g| g == best_tau).unwrap()], || format!("{name}: best row differs"))?;
        summary.push(format!("{name} tau*={best_tau} mIoU={:.4}", fast.best.miou));
    }
    Ok(format!("{} images x {} thresholds, {}", t.test.len(), grid.len(), summary.join(", ")))
}

// ---------------------------------------------------------------- 3

const CW_KERNELS: [usize; 4] = [1, 3, 5, 7];
const CW_TRAIN: usize = 10_000;
const CW_TEST: usize = 2_000;
const CW_SIDE: usize = 64;
const CW_EPOCHS: usize = 4;
const CW_BATCH: usize = 8;
const CW_LR: f32 = 0.01;
const CW_SEED: u64 = 7;
const CW_F1_MIOU_GAP: f64 = 0.05;
const CW_NOISE_BAND: f64 = 0.02;
const CW_CPU_SECONDS: f64 = 3600.0;

fn contribution_window_trend(out_dir: &Path) -> Outcome {
    let cpu0 = cpu_seconds();
    let wall = Instant::now();
    let train = mnist_seg(MnistSplit::Train, CW_TRAIN, CW_SIDE)?;
    let test = mnist_seg(MnistSplit::Test, CW_TEST, CW_SIDE)?;
    let mut tc = TrainConfig::with_seed(CW_SEED);
    tc.epochs = CW_EPOCHS;
    tc.batch_size = CW_BATCH;
    tc.learning_rate = CW_LR;
    let cfg = ContributionWindowConfig::new(CW_KERNELS.to_vec(), tc);
    let result = contribution_window(&cfg, &train, &test);
    let spent = match cpu0.zip(cpu_seconds()) {
        Some((a, b)) => b - a,
        None => wall.elapsed().as_secs_f64(),
    };
    let csv = out_dir.join("contribution_window.csv");
    if let Ok(f) = std::fs::File::create(&csv) {
        let _ = result.write_csv(f);
    }

    let get = |k: usize, method: &str| -> Result<(f64, f64, f32), String> {
        let row = result.row(k as f64, method).ok_or_else(|| format!("no {method} row for F={k}"))?;
        if let Some(e) = &row.error {
            return Err(format!("F={k} failed: {e}"));
        }
        Ok((row.miou.unwrap(), row.ndr_recall.unwrap_or(f64::NAN), row.accuracy.unwrap_or(f32::NAN)))
    };
    let mut lines = Vec::new();
    let mut gaps = Vec::new();
    for k in CW_KERNELS {
        let (cam_miou, cam_ndr, acc) = get(k, "cam")?;
        let (sm_miou, sm_ndr, _) = get(k, "saliency")?;
        lines.push(format!(
            "F={k} acc {acc:.3} mIoU cam/sm {cam_miou:.3}/{sm_miou:.3} NDR cam/sm {cam_ndr:.3}/{sm_ndr:.3}"
        ));
        gaps.push((k, cam_miou, sm_miou, sm_ndr - cam_ndr));
    }
    let detail = format!("{}; cpu {spent:.0}s", lines.join("; "));
    let mut failures = Vec::new();
    let (_, cam1, sm1, _) = gaps[0];
    if (sm1 - cam1).abs() > CW_F1_MIOU_GAP {
        failures.push(format!("(a) F=1 mIoU gap {:.3}", (sm1 - cam1).abs()));
    }
    for &(k, _, _, gap) in &gaps[1..] {
        if !(gap > 0.0) {
            failures.push(format!("(b) F={k} NDR gap {gap:.3} not positive"));
        }
    }
    for w in gaps[1..].windows(2) {
        if w[1].3 < w[0].3 - CW_NOISE_BAND {
            failures.push(format!("(b) NDR gap drops from F={} to F={}", w[0].0, w[1].0));
        }
    }
    if spent >= CW_CPU_SECONDS {
        failures.push(format!("cpu {spent:.0}s over budget"));
    }
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", failures.join(", ")))
    }
}

// ---------------------------------------------------------------- 4

/// Two same-padded conv blocks of `k × k` kernels with all weights 1 and
/// zero biases, then GAP and a single-class dense layer.
fn all_ones_net(k: usize, side: usize) -> Model {
    let spec = NetworkSpec::conv_stack([1, side, side], k, 2, 2, 1);
    let params = spec
        .param_shapes()
        .iter()
        .map(|s| if s.len() == 1 { Tensor::zeros(s) } else { Tensor::filled(s, 1.0) })
        .collect();
    Model::from_parts(spec, params).unwrap()
}

fn zero_gradient_window() -> Outcome {
    let side = 7;
    let (p, q) = (3 * side + 3, 3 * side + 4);
    let mut image = Tensor::zeros(&[1, side, side]);
    image.data_mut()[q] = 1.0;

    let narrow = all_ones_net(1, side);
    let trace = narrow.forward(&image).map_err(|e| e.to_string())?;
    let (c, h, w) = trace.activation.dims3("acceptance").unwrap();
    for ch in 0..c {
        let a = trace.activation.data();
        ensure(a[ch * h * w + p] == 0.0, || format!("1x1: pixel activated in channel {ch}"))?;
        ensure(a[ch * h * w + q] > 0.0, || format!("1x1: neighbour not activated in channel {ch}"))?;
    }
    let sm = saliency_raw(&narrow, &image, 0).map_err(|e| e.to_string())?;
    ensure(sm.values[p] == 0.0, || format!("1x1: saliency {} at the non-activated pixel", sm.values[p]))?;
    ensure(sm.values[q] != 0.0, || "1x1: activated pixel has zero saliency".into())?;
    ensure(sm.values.iter().enumerate().all(|(i, &v)| i == q || v == 0.0), || "1x1: saliency outside the activated pixel".into())?;

    let wide = all_ones_net(3, side);
    let sm3 = saliency_raw(&wide, &image, 0).map_err(|e| e.to_string())?;
    ensure(sm3.values[p] != 0.0, || "3x3: saliency still zero inside the window".into())?;
    Ok(format!("1x1 saliency 0 exactly, 3x3 saliency {:.4} at the same pixel", sm3.values[p]))
}

// ---------------------------------------------------------------- 5

fn same_bits(a: &ScoreMap, b: &ScoreMap) -> bool {
    a.values.len() == b.values.len() && a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn degenerate_aggregations() -> Outcome {
    let side = 24;
    let mut checked = 0;
    for seed in 0..6u64 {
        let mut r = rng(300 + seed);
        let model = random_model(NetworkSpec::conv_stack([1, side, side], 3, 6, 3, 4), &mut r);
        let image = uniform_tensor(&mut r, &[1, side, side], 0.0, 1.0);
        let class = (seed % 4) as usize;
        let vanilla = saliency_raw(&model, &image, class).map_err(|e| e.to_string())?;
        let full = CropParams {
            area_range: (1.0, 1.0),
            aspect_range: (1.0, 1.0),
            normalization: CropNormalization::Coverage,
        };
        let cases: Vec<(&str, ScoreMap)> = vec![
            ("smoothgrad", smoothgrad(&model, &image, class, 0.0, 1, seed).map_err(|e| e.to_string())?),
            ("binarymask", binarymask(&model, &image, class, 1.0, 50, seed).map_err(|e| e.to_string())?),
            ("random_crop", random_crop_agg(&model, &image, class, &full, 1, seed).map_err(|e| e.to_string())?),
            ("random_patch", random_patch_agg(&model, &image, class, 8, 0.0, 5, seed).map_err(|e| e.to_string())?),
        ];
        for (name, map) in &cases {
            ensure(same_bits(map, &vanilla), || format!("{name} differs from vanilla (seed {seed})"))?;
            checked += 1;
        }
        let plans = [
            AggregationMethod::Smoothgrad { sigma: 0.0 },
            AggregationMethod::Binarymask { p: 1.0 },
            AggregationMethod::RandomCrop { crop: full },
            AggregationMethod::RandomPatch { grid: 8, p_erase: 0.0 },
        ];
        for (method, n) in plans.into_iter().zip([1, 50, 1, 5]) {
            let plan = AggregationPlan {
                method,
                n_samples: n,
                base_seed: seed,
            };
            let map = aggregation::aggregate(&model, &image, class, &plan, None).map_err(|e| e.to_string())?;
            ensure(same_bits(&map, &vanilla), || format!("{method:?} plan differs from vanilla (seed {seed})"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} degenerate aggregations bitwise equal to vanilla saliency"))
}

// ---------------------------------------------------------------- 6

fn pipeline_outputs(samples: &[SegSample], dir: &Path) -> Result<(), String> {
    let err = |e: aslab::Error| e.to_string();
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let mut cfg = TrainConfig::with_seed(11);
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.perturb = Perturbation::Gaussian { sigma: 0.2 };
    cfg.standard_augments = true;
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let targets: Vec<usize> = samples.iter().map(SegSample::digit).collect();
    let model = Model::build(NetworkSpec::mnist(3, 64), 11).map_err(err)?;
    let outcome = model::train(model, &images, &targets, &cfg).map_err(err)?;
    model::save_checkpoint(&outcome.checkpoint, &dir.join("model.ckpt")).map_err(err)?;
    let model = outcome.checkpoint.model;

    let crop = CropParams::default();
    let methods = [
        AggregationMethod::Smoothgrad { sigma: 0.15 },
        AggregationMethod::Binarymask { p: 0.7 },
        AggregationMethod::RandomCrop { crop },
        AggregationMethod::RandomPatch { grid: 16, p_erase: 0.3 },
        AggregationMethod::DiscPatch { grid: 16, alpha: 0.4 },
        AggregationMethod::DiscCrop { beta: 0.7, crop },
    ];
    for (m, method) in methods.iter().enumerate() {
        let plan = AggregationPlan {
            method: *method,
            n_samples: 6,
            base_seed: 21,
        };
        for (i, s) in samples.iter().enumerate().take(4) {
            let map = experiment::aggregate_sample(&model, s, &plan, i).map_err(err)?;
            data::write_fmap(&[map], &dir.join(format!("agg{m}_{i}.fmap"))).map_err(err)?;
        }
    }
    let base = AggregationPlan {
        method: AggregationMethod::Smoothgrad { sigma: 0.1 },
        n_samples: 4,
        base_seed: 5,
    };
    let sweep = experiment::sensitivity(&model, &samples[..4], SensitivityAxis::Sigma, &[0.05, 0.2], &base, DEFAULT_TAU_CAM).map_err(err)?;
    let f = std::fs::File::create(dir.join("sensitivity.csv")).map_err(|e| e.to_string())?;
    sweep.write_csv(f).map_err(err)
}

fn determinism(root: &Path) -> Outcome {
    let samples = mnist_seg(MnistSplit::Train, 48, 64)?;
    let mut first: Option<Vec<(String, Vec<u8>)>> = None;
    for (run, threads) in [(0, 1), (1, 8)] {
        let dir = root.join(format!("determinism_{run}"));
        let _ = std::fs::remove_dir_all(&dir);
        with_threads(Some(threads), || pipeline_outputs(&samples, &dir)).map_err(|e| e.to_string())??;
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&dir)
            .map_err(|e| e.to_string())?
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        match &first {
            None => first = Some(files),
            Some(a) => {
                ensure(a.len() == files.len(), || "different file sets".into())?;
                for ((n1, b1), (n2, b2)) in a.iter().zip(&files) {
                    ensure(n1 == n2 && b1 == b2, || format!("{n1} differs between 1 and 8 workers"))?;
                }
            }
        }
    }
    Ok(format!("{} files byte-identical with 1 and 8 workers", first.map_or(0, |f| f.len())))
}

// ---------------------------------------------------------------- 7

/// Per-pixel oracle counts for one fixture.
struct Oracle {
    n: usize,
    conf: Vec<Vec<u64>>,
    region: Vec<[u64; 4]>,
    fg: [u64; 2],
}

fn oracle(pred: &[u8], gt: &[u8], high: &[Option<bool>], n: usize) -> Oracle {
    let mut o = Oracle {
        n,
        conf: vec![vec![0; n]; n],
        region: vec![[0; 4]; n],
        fg: [0; 2],
    };
    for i in 0..gt.len() {
        if gt[i] == IGNORE {
            continue;
        }
        let (g, p) = (gt[i] as usize, pred[i] as usize);
        o.conf[g][p] += 1;
        if let Some(h) = high[i] {
            let slot = match (h, p == g) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            o.region[g][slot] += 1;
        }
        if p != 0 {
            o.fg[(p != g) as usize] += 1;
        }
    }
    o
}

fn ratio(a: u64, b: u64) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

fn mean(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

impl Oracle {
    fn report(&self) -> (f64, Option<f64>, Option<f64>, Option<f64>) {
        let n = self.n;
        let iou = (0..n).map(|c| {
            let tp = self.conf[c][c];
            let row: u64 = self.conf[c].iter().sum();
            let col: u64 = (0..n).map(|g| self.conf[g][c]).sum();
            ratio(tp, row + col - tp)
        });
        let miou = mean(iou).unwrap();
        let fg = ratio(self.fg[0], self.fg[0] + self.fg[1]);
        let dr = mean((1..n).map(|c| ratio(self.region[c][0], self.region[c][0] + self.region[c][1])));
        let ndr = mean((1..n).map(|c| ratio(self.region[c][2], self.region[c][2] + self.region[c][3])));
        (miou, fg, dr, ndr)
    }
}

fn metrics_oracle() -> Outcome {
    // Hand-checked 3x3 case: classes {0, 1, 2}.
    //   gt    0 1 1 / 0 1 2 / 2 2 IGNORE
    //   pred  0 1 0 / 1 1 2 / 2 0 1
    //   DR of class 1: pixels 1 and 4, NDR: pixel 2; class 2 all DR.
    // IoU0 = 1/4, IoU1 = 2/4, IoU2 = 2/3; FG-Prec = 4/5.
    // DR recall: class 1 2/2, class 2 2/3; NDR recall: class 1 0/1.
    let gt = LabelMask::new(3, 3, vec![0, 1, 1, 0, 1, 2, 2, 2, IGNORE]).unwrap();
    let pred = LabelMask::new(3, 3, vec![0, 1, 0, 1, 1, 2, 2, 0, 1]).unwrap();
    let part = |class: usize, high: Vec<bool>| {
        let map = ScoreMap::new(class, 3, 3, high.iter().map(|&h| h as u8 as f32).collect(), true).unwrap();
        partition_dr_ndr(&map, &gt, class, 0.5).unwrap()
    };
    let parts = vec![
        part(1, vec![false, true, false, false, true, false, false, false, false]),
        part(2, vec![true; 9]),
    ];
    let mut acc = ConfusionAccumulator::new(3);
    acc.accumulate(&pred, &gt, Some(&parts)).map_err(|e| e.to_string())?;
    let r = MetricsReport::from_accumulator(&acc, 0.5).map_err(|e| e.to_string())?;
    let expected_miou = (1.0 / 4.0 + 2.0 / 4.0 + 2.0 / 3.0) / 3.0;
    ensure(r.miou == expected_miou, || format!("hand case mIoU {}", r.miou))?;
    ensure(r.fg_precision == Some(4.0 / 5.0), || format!("hand case FG-Prec {:?}", r.fg_precision))?;
    ensure(r.dr_recall == Some((1.0 + 2.0 / 3.0) / 2.0), || format!("hand case DR {:?}", r.dr_recall))?;
    ensure(r.ndr_recall == Some(0.0), || format!("hand case NDR {:?}", r.ndr_recall))?;
    decomposition_identity(&acc)?;

    let mut r_ = rng(77);
    let fixtures = 400;
    for f in 0..fixtures {
        let (h, w) = (r_.random_range(1..=6), r_.random_range(1..=6));
        let n = r_.random_range(2..=4);
        let len = h * w;
        let gt: Vec<u8> = (0..len)
            .map(|_| if r_.random_bool(0.1) { IGNORE } else { r_.random_range(0..n) as u8 })
            .collect();
        let pred: Vec<u8> = (0..len).map(|_| r_.random_range(0..n) as u8).collect();
        let scores: Vec<Vec<f32>> = (1..n).map(|_| (0..len).map(|_| r_.random::<f32>()).collect()).collect();
        let gt_mask = LabelMask::new(w, h, gt.clone()).unwrap();
        let parts: Vec<_> = (1..n)
            .map(|c| {
                let map = ScoreMap::new(c, w, h, scores[c - 1].clone(), true).unwrap();
                partition_dr_ndr(&map, &gt_mask, c, 0.5).unwrap()
            })
            .collect();
        let high: Vec<Option<bool>> = (0..len)
            .map(|i| match gt[i] {
                0 | IGNORE => None,
                g => Some(scores[g as usize - 1][i] >= 0.5),
            })
            .collect();
        let mut acc = ConfusionAccumulator::new(n);
        acc.accumulate(&LabelMask::new(w, h, pred.clone()).unwrap(), &gt_mask, Some(&parts))
            .map_err(|e| e.to_string())?;
        let o = oracle(&pred, &gt, &high, n);
        if o.conf.iter().flatten().sum::<u64>() == 0 {
            ensure(MetricsReport::from_accumulator(&acc, 0.5).is_err(), || format!("fixture {f}: empty image has an mIoU"))?;
            continue;
        }
        let r = MetricsReport::from_accumulator(&acc, 0.5).map_err(|e| e.to_string())?;
        let (miou, fg, dr, ndr) = o.report();
        ensure((r.miou, r.fg_precision, r.dr_recall, r.ndr_recall) == (miou, fg, dr, ndr), || {
            format!("fixture {f}: {:?} against oracle {:?}", (r.miou, r.fg_precision, r.dr_recall, r.ndr_recall), (miou, fg, dr, ndr))
        })?;
        decomposition_identity(&acc).map_err(|e| format!("fixture {f}: {e}"))?;
    }
    Ok(format!("hand case plus {fixtures} enumerated fixtures up to 6x6 match; decomposition identity holds"))
}

// ---------------------------------------------------------------- 8

fn is_valid_partition(sp: &aslab::resolve::SuperpixelMap) -> Result<(), String> {
    let (h, w) = (sp.height, sp.width);
    ensure(sp.labels.len() == h * w, || "label count".into())?;
    ensure(sp.labels.iter().all(|&l| (l as usize) < sp.count), || "label out of range".into())?;
    let sizes = sp.sizes();
    ensure(sizes.iter().all(|&s| s > 0), || "empty segment id".into())?;
    // Every segment is one 8-connected component.
    let mut seen = vec![false; h * w];
    let mut components = 0;
    for start in 0..h * w {
        if seen[start] {
            continue;
        }
        components += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / w) as i64, (i % w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !seen[j] && sp.labels[j] == sp.labels[i] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    ensure(components == sp.count, || format!("{components} components for {} segments", sp.count))
}

fn felzenszwalb_properties() -> Outcome {
    let mut r = rng(88);
    for case in 0..40 {
        let (h, w) = (r.random_range(4..=24), r.random_range(4..=24));
        let c = if case % 2 == 0 { 1 } else { 3 };
        let image = uniform_tensor(&mut r, &[c, h, w], 0.0, 1.0);
        let params = FelzenszwalbParams {
            k: r.random_range(1.0..400.0),
            sigma: r.random_range(0.0..1.5),
            min_size: r.random_range(1..=30),
        };
        let sp = felzenszwalb(&image, &params).map_err(|e| e.to_string())?;
        is_valid_partition(&sp).map_err(|e| format!("case {case}: {e}"))?;
        if sp.count > 1 {
            ensure(sp.sizes().iter().all(|&s| s >= params.min_size), || format!("case {case}: segment below min_size"))?;
        }
    }
    for (c, k) in [(1, 1.0), (3, 50.0), (3, 1e4)] {
        let sp = felzenszwalb(&Tensor::filled(&[c, 13, 11], 0.37), &FelzenszwalbParams { k, sigma: 0.8, min_size: 1 })
            .map_err(|e| e.to_string())?;
        ensure(sp.count == 1, || format!("uniform image gave {} segments at k={k}", sp.count))?;
    }
    // Two flat halves of n pixels each: inside a half every edge weighs 0,
    // so each half is one component with Int = 0 and threshold k / n. The
    // halves then merge iff the boundary weight d satisfies d <= k / n.
    let (h, w, d) = (10usize, 12usize, 0.25f32);
    let half = (h * w / 2) as f32;
    let image = Tensor::from_fn(&[1, h, w], |i| if i % w < w / 2 { 0.0 } else { d });
    let critical = d * half;
    for (k, expected) in [(0.5 * critical, 2), (0.99 * critical, 2), (critical, 1), (1.5 * critical, 1)] {
        let sp = felzenszwalb(&image, &FelzenszwalbParams { k, sigma: 0.0, min_size: 1 }).map_err(|e| e.to_string())?;
        ensure(sp.count == expected, || format!("two regions at k={k}: {} segments, expected {expected}", sp.count))?;
        is_valid_partition(&sp)?;
    }
    Ok(format!("40 random partitions valid, uniform -> 1, two regions split iff k < d*n = {critical}"))
}

// ---------------------------------------------------------------- 9

/// FMAP bytes written directly from the documented layout.
fn fmap_bytes(shape: &[u32], values: &[f32]) -> Vec<u8> {
    let mut b = b"FMAP".to_vec();
    b.extend_from_slice(&1u16.to_le_bytes());
    b.push(0);
    b.push(shape.len() as u8);
    for d in shape {
        b.extend_from_slice(&d.to_le_bytes());
    }
    for v in values {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

fn pgm_bytes(w: usize, h: usize, pixels: &[u8]) -> Vec<u8> {
    let mut b = format!("P5\n# synthetic\n{w} {h}\n255\n").into_bytes();
    b.extend_from_slice(pixels);
    b
}

const VOC_CLASSES: usize = 21;

/// Writes image/mask/score-map triples of a small VOC-style fixture and
/// returns, per image, the ground truth and the raw saliency maps as
/// written.
fn write_voc_fixture(dir: &Path) -> Vec<(Vec<u8>, Vec<(usize, Vec<f32>)>)> {
    let (h, w) = (20usize, 24usize);
    let mut r = rng(909);
    let mut out = Vec::new();
    for i in 0..5 {
        let classes: Vec<usize> = match i {
            0 => vec![15],
            1 => vec![3, 8],
            2 => vec![12],
            3 => vec![1, 20],
            _ => vec![7],
        };
        let mut gt = vec![0u8; h * w];
        for (j, &c) in classes.iter().enumerate() {
            let (y0, x0) = (2 + 5 * j, 3 + 8 * j);
            for y in y0..(y0 + 9).min(h) {
                for x in x0..(x0 + 10).min(w) {
                    gt[y * w + x] = c as u8;
                }
            }
        }
        for x in 0..w {
            if gt[(h - 1) * w + x] != 0 || x % 5 == 0 {
                gt[(h - 1) * w + x] = IGNORE;
            }
        }
        // Saliency is mostly high inside its object; the CAM is spread out
        // inside so both DR and NDR are populated.
        let noisy = |r: &mut rand_chacha::ChaCha8Rng, inside: bool, lo: f32, scale: f32| {
            let base: f32 = if inside { r.random_range(lo..1.0) } else { r.random_range(-0.2..0.35) };
            base * scale
        };
        let mut sal = Vec::new();
        let mut cams = Vec::new();
        for &c in &classes {
            let s: Vec<f32> = (0..h * w).map(|p| noisy(&mut r, gt[p] as usize == c, 0.3, 3.0)).collect();
            let m: Vec<f32> = (0..h * w).map(|p| noisy(&mut r, gt[p] as usize == c, 0.0, 10.0)).collect();
            sal.push((c, s));
            cams.push((c, m));
        }
        let stem = format!("img{i}");
        let write_maps = |name: &str, maps: &[(usize, Vec<f32>)]| {
            let values: Vec<f32> = maps.iter().flat_map(|(_, v)| v.iter().copied()).collect();
            let path = dir.join(name).join(format!("{stem}.fmap"));
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(&path, fmap_bytes(&[maps.len() as u32, h as u32, w as u32], &values)).unwrap();
            let ids: Vec<String> = maps.iter().map(|(c, _)| c.to_string()).collect();
            std::fs::write(path.with_extension("fmap.classes"), ids.join("\n")).unwrap();
        };
        write_maps("saliency", &sal);
        write_maps("cam", &cams);
        std::fs::create_dir_all(dir.join("masks")).unwrap();
        std::fs::write(dir.join("masks").join(format!("{stem}.pgm")), pgm_bytes(w, h, &gt)).unwrap();
        let rgb: Vec<f32> = (0..3 * h * w).map(|j| ((j * 37 % 101) as f32) / 100.0).collect();
        std::fs::create_dir_all(dir.join("images")).unwrap();
        std::fs::write(dir.join("images").join(format!("{stem}.fmap")), fmap_bytes(&[3, h as u32, w as u32], &rgb)).unwrap();
        out.push((gt, sal));
    }
    out
}

/// Normalization and basic resolve written out from scratch.
fn oracle_normalize(v: &[f32]) -> Vec<f32> {
    let z = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    v.iter().map(|&x| if z > 0.0 && x > 0.0 { x / z } else { 0.0 }).collect()
}

fn external_maps_report(root: &Path) -> Outcome {
    let dir = root.join("voc_fixture");
    let _ = std::fs::remove_dir_all(&dir);
    let truth = write_voc_fixture(&dir);
    let tau = 0.3f32;
    let err = |e: aslab::Error| e.to_string();
    let mut acc = ConfusionAccumulator::new(VOC_CLASSES);
    let mut oracle_conf = vec![vec![0u64; VOC_CLASSES]; VOC_CLASSES];
    let mut methods_ok = Vec::new();
    for (i, (gt_pixels, sal)) in truth.iter().enumerate() {
        let stem = format!("img{i}");
        let read = |sub: &str| -> Result<Vec<ScoreMap>, String> {
            Ok(data::read_fmap(&dir.join(sub).join(format!("{stem}.fmap"))).map_err(err)?.iter().map(ScoreMap::normalize).collect())
        };
        let sm = read("saliency")?;
        let cam = read("cam")?;
        let gt = data::read_mask_pgm(&dir.join("masks").join(format!("{stem}.pgm"))).map_err(err)?;
        ensure(&gt.pixels == gt_pixels, || format!("{stem}: mask round trip"))?;
        ensure(sm.iter().map(|m| m.class_id).eq(sal.iter().map(|(c, _)| *c)), || format!("{stem}: class ids"))?;
        let image = data::read_tensor(&dir.join("images").join(format!("{stem}.fmap"))).map_err(err)?;
        let parts = cam
            .iter()
            .map(|m| partition_dr_ndr(m, &gt, m.class_id, DEFAULT_TAU_CAM))
            .collect::<aslab::Result<Vec<_>>>()
            .map_err(err)?;
        let pred = resolve_basic(&sm, tau).map_err(err)?;
        acc.accumulate(&pred, &gt, Some(&parts)).map_err(err)?;

        let norm: Vec<(usize, Vec<f32>)> = sal.iter().map(|(c, v)| (*c, oracle_normalize(v))).collect();
        for p in 0..gt_pixels.len() {
            let (mut best_c, mut best_v) = (0usize, f32::NEG_INFINITY);
            for (c, v) in &norm {
                if v[p] > best_v {
                    (best_c, best_v) = (*c, v[p]);
                }
            }
            let label = if best_v >= tau { best_c } else { 0 };
            ensure(pred.pixels[p] as usize == label, || format!("{stem}: pixel {p} resolved to {}", pred.pixels[p]))?;
            if gt_pixels[p] != IGNORE {
                oracle_conf[gt_pixels[p] as usize][label] += 1;
            }
        }
        for method in [ResolveMethod::smooth(), ResolveMethod::Superpixel { params: FelzenszwalbParams::default() }] {
            let m = method.apply(&sm, Some(&image), tau).map_err(err)?;
            ensure(m.width == gt.width && m.height == gt.height, || "resolve shape".into())?;
            methods_ok.push(());
        }
    }
    for g in 0..VOC_CLASSES {
        for p in 0..VOC_CLASSES {
            ensure(acc.confusion(g, p) == oracle_conf[g][p], || format!("confusion[{g}][{p}]"))?;
        }
    }
    decomposition_identity(&acc)?;
    let report = MetricsReport::from_accumulator(&acc, tau).map_err(err)?;
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).map_err(|e| e.to_string())?;
    for key in ["tau", "images", "class_iou", "miou", "fg_precision", "dr_recall", "ndr_recall"] {
        ensure(json.get(key).is_some(), || format!("report lacks {key}"))?;
    }
    ensure(report.images == 5 && report.dr_recall.is_some() && report.ndr_recall.is_some(), || "incomplete report".into())?;
    Ok(format!(
        "5-image external FMAP+PGM fixture -> mIoU {:.4}, FG-Prec {:.4}, DR {:.4}, NDR {:.4}; {} alternate resolves ran. \
         Non-goal: the VOC/COCO tables (e.g. CAM 43.7 vs superpixel saliency 49.0 mIoU on VOC) are not reproduced, \
         they need fine-tuned ResNet50 maps",
        report.miou,
        report.fg_precision.unwrap(),
        report.dr_recall.unwrap(),
        report.ndr_recall.unwrap(),
        methods_ok.len()
    ))
}

// ----------------------------------------------------------------

fn selected() -> Option<Vec<usize>> {
    std::env::var("ASLAB_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect())
}

fn main() {
    let only = selected();
    let wanted = |n: usize| only.as_ref().map_or(true, |o| o.contains(&n));
    let out_dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&out_dir).expect("acceptance output directory");

    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if wanted(n) {
            let start = Instant::now();
            let outcome = f();
            let line = match &outcome {
                Ok(d) => format!("criterion {n:>2} PASS  {name}: {d}"),
                Err(e) => format!("criterion {n:>2} FAIL  {name}: {e}"),
            };
            println!("{line} [{:.1}s]", start.elapsed().as_secs_f64());
            results.push((n, name, outcome));
        }
    };

    run(1, "gradient correctness", &mut gradient_correctness);
    let trained = if wanted(2) || wanted(10) { Some(train_f5()) } else { None };
    let with_model = |f: fn(&Trained) -> Outcome| match trained.as_ref() {
        Some(Ok(t)) => f(t),
        Some(Err(e)) => Err(format!("F=5 training failed: {e}")),
        None => Err("F=5 model was not trained".into()),
    };
    run(2, "hyperplane sign agreement", &mut || with_model(hyperplane_sign_agreement));
    run(4, "zero-gradient contribution window", &mut zero_gradient_window);
    run(5, "degenerate aggregations", &mut degenerate_aggregations);
    run(6, "determinism", &mut || determinism(&out_dir));
    run(7, "metrics oracle", &mut metrics_oracle);
    run(8, "felzenszwalb properties", &mut felzenszwalb_properties);
    run(9, "external maps end to end", &mut || external_maps_report(&out_dir));
    run(10, "threshold sweep protocol", &mut || with_model(sweep_protocol));
    run(3, "contribution-window trend", &mut || contribution_window_trend(&out_dir));

    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({failed:?})") }
    );
    // The report is the product; set ASLAB_ACCEPTANCE_STRICT=1 to turn any
    // FAIL line into a failing exit status.
    let strict = std::env::var("ASLAB_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
