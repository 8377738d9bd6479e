//! Segmentation metrics (mIoU, foreground precision, DR/NDR recall) and the
//! best-threshold sweep.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attribution::{RegionPartition, ScoreMap};
use crate::data::{LabelMask, IGNORE};
use crate::error::{Error, Result};
use crate::hyperplane::csv_err;
use crate::resolve::resolve_basic;

/// Which side of its class's partition a ground-truth pixel falls on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Region {
    Unknown,
    Dr,
    Ndr,
}

/// Counter layout: `n × n` confusion (`[gt][pred]`), then per-class DR TP,
/// DR FN, NDR TP, NDR FN, then FG TP and FG FP.
fn layout_len(n: usize) -> usize {
    n * n + 4 * n + 2
}

/// Counter slots touched by one pixel.
fn slots(n: usize, gt: usize, pred: usize, region: Region, out: &mut [usize; 3]) -> usize {
    let mut k = 0;
    out[k] = gt * n + pred;
    k += 1;
    let base = n * n;
    match region {
        Region::Dr => {
            out[k] = base + if pred == gt { gt } else { n + gt };
            k += 1;
        }
        Region::Ndr => {
            out[k] = base + 2 * n + if pred == gt { gt } else { n + gt };
            k += 1;
        }
        Region::Unknown => {}
    }
    if pred != 0 {
        out[k] = base + 4 * n + if pred == gt { 0 } else { 1 };
        k += 1;
    }
    k
}

/// Dataset-level pixel counters. Merging is integer addition, so the result
/// does not depend on accumulation order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionAccumulator {
    pub num_classes: usize,
    counts: Vec<u64>,
    pub images: usize,
}

fn check_shapes(pred: &LabelMask, gt: &LabelMask) -> Result<()> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::ShapeMismatch {
            op: "accumulate",
            expected: vec![gt.height, gt.width],
            actual: vec![pred.height, pred.width],
        });
    }
    Ok(())
}

/// Per-pixel region of the ground-truth class, or an error when a class
/// present in `gt` has no partition.
fn regions_of(gt: &LabelMask, partitions: Option<&[RegionPartition]>) -> Result<Vec<Region>> {
    let Some(parts) = partitions else {
        return Ok(vec![Region::Unknown; gt.pixels.len()]);
    };
    let mut regions = vec![Region::Unknown; gt.pixels.len()];
    for class in gt.classes() {
        let part = parts
            .iter()
            .find(|p| p.class_id == class as usize)
            .ok_or_else(|| Error::invalid(format!("no DR/NDR partition for ground-truth class {class}")))?;
        if (part.width, part.height) != (gt.width, gt.height) {
            return Err(Error::ShapeMismatch {
                op: "accumulate partition",
                expected: vec![gt.height, gt.width],
                actual: vec![part.height, part.width],
            });
        }
        for (i, &id) in gt.pixels.iter().enumerate() {
            if id == class {
                regions[i] = if part.high[i] {
                    Region::Dr
                } else if part.low[i] {
                    Region::Ndr
                } else {
                    return Err(Error::invalid(format!("partition of class {class} misses pixel {i}")));
                };
            }
        }
    }
    Ok(regions)
}

impl ConfusionAccumulator {
    /// `num_classes` counts background.
    pub fn new(num_classes: usize) -> Self {
        ConfusionAccumulator {
            num_classes,
            counts: vec![0; layout_len(num_classes)],
            images: 0,
        }
    }

    fn check_ids(&self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        gt.validate(self.num_classes)?;
        if let Some(i) = pred.pixels.iter().position(|&p| p as usize >= self.num_classes) {
            return Err(Error::invalid(format!("predicted id {} at pixel {i} is out of range", pred.pixels[i])));
        }
        Ok(())
    }

    /// Adds one image. Ground-truth pixels marked [`IGNORE`] are skipped.
    /// `partitions` supplies the DR/NDR split for every class present in
    /// `gt`; without it the region counters are left untouched.
    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask, partitions: Option<&[RegionPartition]>) -> Result<()> {
        check_shapes(pred, gt)?;
        self.check_ids(pred, gt)?;
        let regions = regions_of(gt, partitions)?;
        let n = self.num_classes;
        let mut buf = [0usize; 3];
        for ((&g, &p), &r) in gt.pixels.iter().zip(&pred.pixels).zip(&regions) {
            if g == IGNORE {
                continue;
            }
            let k = slots(n, g as usize, p as usize, r, &mut buf);
            for &s in &buf[..k] {
                self.counts[s] += 1;
            }
        }
        self.images += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::invalid("cannot merge accumulators with different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.images += other.images;
        Ok(())
    }

    pub fn confusion(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    fn region_count(&self, block: usize, class: usize) -> u64 {
        self.counts[self.num_classes * self.num_classes + block * self.num_classes + class]
    }

    pub fn dr_tp(&self, class: usize) -> u64 {
        self.region_count(0, class)
    }

    pub fn dr_fn(&self, class: usize) -> u64 {
        self.region_count(1, class)
    }

    pub fn ndr_tp(&self, class: usize) -> u64 {
        self.region_count(2, class)
    }

    pub fn ndr_fn(&self, class: usize) -> u64 {
        self.region_count(3, class)
    }

    pub fn fg_tp(&self) -> u64 {
        self.counts[layout_len(self.num_classes) - 2]
    }

    pub fn fg_fp(&self) -> u64 {
        self.counts[layout_len(self.num_classes) - 1]
    }

    pub fn total(&self) -> u64 {
        self.counts[..self.num_classes * self.num_classes].iter().sum()
    }

    /// IoU of every class; `None` where the class was neither present nor
    /// predicted.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        let n = self.num_classes;
        (0..n)
            .map(|c| {
                let tp = self.confusion(c, c);
                let row: u64 = (0..n).map(|p| self.confusion(c, p)).sum();
                let col: u64 = (0..n).map(|g| self.confusion(g, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Recall of class `class` over all of its ground-truth pixels.
    pub fn class_recall(&self, class: usize) -> Option<f64> {
        let row: u64 = (0..self.num_classes).map(|p| self.confusion(class, p)).sum();
        (row > 0).then(|| self.confusion(class, class) as f64 / row as f64)
    }

    /// Region-size-weighted mean of DR and NDR recall of one class, which
    /// equals [`Self::class_recall`] whenever every image carried partitions.
    pub fn recall_from_regions(&self, class: usize) -> Option<f64> {
        let dr = self.dr_tp(class) + self.dr_fn(class);
        let ndr = self.ndr_tp(class) + self.ndr_fn(class);
        if dr + ndr == 0 {
            return None;
        }
        let part = |r: Option<f64>, size: u64| r.map_or(0.0, |v| v * size as f64);
        Some((part(dr_recall(self, class), dr) + part(ndr_recall(self, class), ndr)) / (dr + ndr) as f64)
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mean IoU over classes with a nonzero union, background included.
pub fn miou(acc: &ConfusionAccumulator) -> Result<(f64, Vec<Option<f64>>)> {
    let ious = acc.class_iou();
    let m = mean_defined(ious.iter().copied()).ok_or_else(|| Error::Degenerate("mIoU of an empty accumulator".into()))?;
    Ok((m, ious))
}

pub fn dr_recall(acc: &ConfusionAccumulator, class: usize) -> Option<f64> {
    let (tp, fneg) = (acc.dr_tp(class), acc.dr_fn(class));
    (tp + fneg > 0).then(|| tp as f64 / (tp + fneg) as f64)
}

pub fn ndr_recall(acc: &ConfusionAccumulator, class: usize) -> Option<f64> {
    let (tp, fneg) = (acc.ndr_tp(class), acc.ndr_fn(class));
    (tp + fneg > 0).then(|| tp as f64 / (tp + fneg) as f64)
}

/// Correct foreground predictions over all foreground predictions.
pub fn fg_precision(acc: &ConfusionAccumulator) -> Option<f64> {
    let (tp, fp) = (acc.fg_tp(), acc.fg_fp());
    (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64)
}

/// Undefined values (empty denominators) are `None` and excluded from means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tau: f32,
    pub images: usize,
    pub class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub fg_precision: Option<f64>,
    /// Mean over foreground classes of DR-Recall.
    pub dr_recall: Option<f64>,
    pub ndr_recall: Option<f64>,
    pub class_dr_recall: Vec<Option<f64>>,
    pub class_ndr_recall: Vec<Option<f64>>,
}

impl MetricsReport {
    pub fn from_accumulator(acc: &ConfusionAccumulator, tau: f32) -> Result<Self> {
        let (miou, class_iou) = miou(acc)?;
        let class_dr: Vec<Option<f64>> = (0..acc.num_classes).map(|c| if c == 0 { None } else { dr_recall(acc, c) }).collect();
        let class_ndr: Vec<Option<f64>> = (0..acc.num_classes).map(|c| if c == 0 { None } else { ndr_recall(acc, c) }).collect();
        Ok(MetricsReport {
            tau,
            images: acc.images,
            class_iou,
            miou,
            fg_precision: fg_precision(acc),
            dr_recall: mean_defined(class_dr.iter().copied()),
            ndr_recall: mean_defined(class_ndr.iter().copied()),
            class_dr_recall: class_dr,
            class_ndr_recall: class_ndr,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub const REPORT_CSV_HEADER: [&str; 6] = ["tau", "images", "miou", "fg_precision", "dr_recall", "ndr_recall"];

pub(crate) fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn report_record(r: &MetricsReport) -> [String; 6] {
    [
        r.tau.to_string(),
        r.images.to_string(),
        r.miou.to_string(),
        opt(r.fg_precision),
        opt(r.dr_recall),
        opt(r.ndr_recall),
    ]
}

/// One CSV row per report under [`REPORT_CSV_HEADER`]; undefined values are
/// left empty.
pub fn write_reports_csv(reports: &[MetricsReport], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_CSV_HEADER).map_err(csv_err)?;
    for r in reports {
        w.write_record(report_record(r)).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Threshold grid `0.01, 0.02, …, 0.50`.
pub fn default_tau_grid() -> Vec<f32> {
    (1..=50).map(|i| i as f32 / 100.0).collect()
}

/// Score maps, ground truth and DR/NDR partitions of one evaluation image.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub maps: Vec<ScoreMap>,
    pub gt: LabelMask,
    pub partitions: Option<Vec<RegionPartition>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub best_tau: f32,
    pub best: MetricsReport,
    pub rows: Vec<MetricsReport>,
}

fn check_grid(grid: &[f32]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("empty threshold grid"));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("threshold grid must be strictly increasing"));
    }
    Ok(())
}

fn select(rows: Vec<MetricsReport>) -> SweepOutcome {
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.miou > rows[best].miou {
            best = i;
        }
    }
    SweepOutcome {
        best_tau: rows[best].tau,
        best: rows[best].clone(),
        rows,
    }
}

/// Basic resolve at every grid threshold; returns the highest-mIoU
/// threshold (ties to the smallest) and every row.
///
/// Each pixel's argmax class and score are found once; a pixel is
/// foreground exactly for the grid prefix of thresholds not above its
/// score, so per-threshold counters follow from prefix sums of per-pixel
/// deltas.
pub fn threshold_sweep(items: &[EvalItem], num_classes: usize, grid: &[f32]) -> Result<SweepOutcome> {
    check_grid(grid)?;
    if items.is_empty() {
        return Err(Error::invalid("threshold sweep over no images"));
    }
    let g = grid.len();
    let len = layout_len(num_classes);
    let mut delta = vec![0i64; (g + 1) * len];
    let mut buf = [0usize; 3];
    for item in items {
        let fg_only = resolve_basic(&item.maps, f32::NEG_INFINITY)?;
        let best: Vec<f32> = (0..item.gt.pixels.len())
            .map(|p| item.maps.iter().map(|m| m.values[p]).fold(f32::NEG_INFINITY, f32::max))
            .collect();
        check_shapes(&fg_only, &item.gt)?;
        ConfusionAccumulator::new(num_classes).check_ids(&fg_only, &item.gt)?;
        let regions = regions_of(&item.gt, item.partitions.as_deref())?;
        for p in 0..item.gt.pixels.len() {
            let gt = item.gt.pixels[p];
            if gt == IGNORE {
                continue;
            }
            let m = grid.partition_point(|&t| t <= best[p]);
            let k = slots(num_classes, gt as usize, fg_only.pixels[p] as usize, regions[p], &mut buf);
            for &s in &buf[..k] {
                delta[s] += 1;
                delta[m * len + s] -= 1;
            }
            let k = slots(num_classes, gt as usize, 0, regions[p], &mut buf);
            for &s in &buf[..k] {
                delta[m * len + s] += 1;
            }
        }
    }
    let mut running = vec![0i64; len];
    let mut rows = Vec::with_capacity(g);
    for (i, &tau) in grid.iter().enumerate() {
        for (r, d) in running.iter_mut().zip(&delta[i * len..(i + 1) * len]) {
            *r += d;
        }
        let acc = ConfusionAccumulator {
            num_classes,
            counts: running.iter().map(|&c| c as u64).collect(),
            images: items.len(),
        };
        rows.push(MetricsReport::from_accumulator(&acc, tau)?);
    }
    Ok(select(rows))
}

/// Reference sweep: resolves and accumulates every image from scratch at
/// every threshold.
pub fn threshold_sweep_naive(items: &[EvalItem], num_classes: usize, grid: &[f32]) -> Result<SweepOutcome> {
    check_grid(grid)?;
    if items.is_empty() {
        return Err(Error::invalid("threshold sweep over no images"));
    }
    let rows = grid
        .iter()
        .map(|&tau| {
            let mut acc = ConfusionAccumulator::new(num_classes);
            for item in items {
                acc.accumulate(&resolve_basic(&item.maps, tau)?, &item.gt, item.partitions.as_deref())?;
            }
            MetricsReport::from_accumulator(&acc, tau)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(select(rows))
}
