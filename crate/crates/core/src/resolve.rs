//! Background resolves: turn per-class score maps into a label mask.

use serde::{Deserialize, Serialize};

use crate::attribution::ScoreMap;
use crate::data::LabelMask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SMOOTH_KERNEL_SIZE: usize = 13;
pub const SMOOTH_SIGMA: f32 = 5.0;
pub const SUPERPIXEL_TAU: f32 = 0.3;

fn check_stack(scores: &[ScoreMap]) -> Result<(usize, usize)> {
    let first = scores.first().ok_or_else(|| Error::invalid("empty score map stack"))?;
    for m in scores {
        if !m.normalized {
            return Err(Error::invalid(format!("class {} map is not normalized", m.class_id)));
        }
        if (m.width, m.height) != (first.width, first.height) {
            return Err(Error::ShapeMismatch {
                op: "resolve",
                expected: vec![first.height, first.width],
                actual: vec![m.height, m.width],
            });
        }
        if m.class_id == 0 || m.class_id >= 255 {
            return Err(Error::invalid(format!("class id {} cannot label a mask", m.class_id)));
        }
    }
    Ok((first.width, first.height))
}

/// Index into `scores` of the best value at `p`; ties go to the lowest
/// class id.
fn best_class(scores: &[&[f32]], ids: &[usize], p: usize) -> (usize, f32) {
    let mut best = 0;
    for i in 1..scores.len() {
        let (v, b) = (scores[i][p], scores[best][p]);
        if v > b || (v == b && ids[i] < ids[best]) {
            best = i;
        }
    }
    (best, scores[best][p])
}

fn threshold_argmax(planes: &[&[f32]], ids: &[usize], width: usize, height: usize, tau: f32) -> LabelMask {
    let pixels = (0..width * height)
        .map(|p| {
            let (i, v) = best_class(planes, ids, p);
            if v < tau {
                0
            } else {
                ids[i] as u8
            }
        })
        .collect();
    LabelMask {
        width,
        height,
        pixels,
    }
}

/// Background where the best score is below `tau`, otherwise the argmax class.
pub fn resolve_basic(scores: &[ScoreMap], tau: f32) -> Result<LabelMask> {
    let (w, h) = check_stack(scores)?;
    let planes: Vec<&[f32]> = scores.iter().map(|m| m.values.as_slice()).collect();
    let ids: Vec<usize> = scores.iter().map(|m| m.class_id).collect();
    Ok(threshold_argmax(&planes, &ids, w, h, tau))
}

/// Normalized 1-D Gaussian of odd length `size`.
pub fn gaussian_kernel_1d(size: usize, sigma: f32) -> Vec<f32> {
    let r = (size / 2) as f64;
    let s = sigma as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * s * s)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / sum) as f32).collect()
}

/// Largest odd kernel size not above `size` whose reflection fits in a
/// `h × w` plane.
fn fit_kernel(size: usize, h: usize, w: usize) -> usize {
    let limit = 2 * (h.min(w) - 1) + 1;
    if size > limit {
        log::warn!("kernel of size {size} does not fit a {h}x{w} map; shrinking to {limit}");
        limit
    } else {
        size
    }
}

/// Reflect-101 index (`dcb|abcd|cba`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Separable convolution with a symmetric kernel under reflect-101 borders.
pub fn blur_plane(plane: &[f32], h: usize, w: usize, kernel: &[f32]) -> Vec<f32> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (t, &k) in kernel.iter().enumerate() {
                acc += k * plane[y * w + reflect(x as isize + t as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (t, &k) in kernel.iter().enumerate() {
                acc += k * tmp[reflect(y as isize + t as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Gaussian smoothing of one map with reflect-101 borders; the kernel is
/// shrunk (with a warning) when the map is too small for it.
pub fn smooth_map(map: &ScoreMap, size: usize, sigma: f32) -> ScoreMap {
    let size = fit_kernel(size, map.height, map.width);
    let kernel = gaussian_kernel_1d(size, sigma);
    ScoreMap {
        values: blur_plane(&map.values, map.height, map.width, &kernel),
        ..map.clone()
    }
}

/// Smooths every class map with a 13×13, σ = 5 Gaussian, then applies the
/// basic resolve.
pub fn resolve_smooth(scores: &[ScoreMap], tau: f32) -> Result<LabelMask> {
    resolve_smooth_with(scores, tau, SMOOTH_KERNEL_SIZE, SMOOTH_SIGMA)
}

pub fn resolve_smooth_with(scores: &[ScoreMap], tau: f32, size: usize, sigma: f32) -> Result<LabelMask> {
    if size % 2 == 0 || !(sigma > 0.0) {
        return Err(Error::invalid(format!("smoothing needs an odd size and positive sigma, got {size}, {sigma}")));
    }
    check_stack(scores)?;
    let smoothed: Vec<ScoreMap> = scores.iter().map(|m| smooth_map(m, size, sigma)).collect();
    resolve_basic(&smoothed, tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FelzenszwalbParams {
    pub k: f32,
    pub sigma: f32,
    pub min_size: usize,
}

impl Default for FelzenszwalbParams {
    fn default() -> Self {
        FelzenszwalbParams {
            k: 100.0,
            sigma: 0.8,
            min_size: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub count: usize,
    pub params: FelzenszwalbParams,
}

impl SuperpixelMap {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    /// Segment ids as a float map, for export.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.labels.iter().map(|&l| l as f32).collect()).unwrap()
    }
}

struct DisjointSet {
    parent: Vec<u32>,
    size: Vec<u32>,
    /// Merge threshold `Int(C) + k / |C|` of each root.
    threshold: Vec<f32>,
}

impl DisjointSet {
    fn new(n: usize, k: f32) -> Self {
        DisjointSet {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
            threshold: vec![k; n],
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn join(&mut self, a: u32, b: u32) -> u32 {
        let (big, small) = if self.size[a as usize] >= self.size[b as usize] { (a, b) } else { (b, a) };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
        big
    }
}

/// Graph-based segmentation on the 8-connected pixel grid with Euclidean
/// colour distances, followed by merging of segments below `min_size`.
/// Segment ids are dense and numbered in row-major order of first pixel.
pub fn felzenszwalb(image: &Tensor, params: &FelzenszwalbParams) -> Result<SuperpixelMap> {
    let (c, h, w) = image.dims3("felzenszwalb")?;
    if !(params.k > 0.0) || params.min_size == 0 || params.sigma < 0.0 {
        return Err(Error::invalid(format!("invalid superpixel parameters {params:?}")));
    }
    let planes: Vec<Vec<f32>> = (0..c)
        .map(|ch| {
            let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
            if params.sigma > 0.0 {
                let size = fit_kernel(2 * (4.0 * params.sigma).ceil() as usize + 1, h, w);
                blur_plane(plane, h, w, &gaussian_kernel_1d(size, params.sigma))
            } else {
                plane.to_vec()
            }
        })
        .collect();
    let diff = |a: usize, b: usize| -> f32 {
        let mut s = 0.0f32;
        for p in &planes {
            let d = p[a] - p[b];
            s += d * d;
        }
        s.sqrt()
    };
    let mut edges: Vec<(f32, u32, u32)> = Vec::with_capacity(4 * h * w);
    for y in 0..h {
        for x in 0..w {
            let a = y * w + x;
            if x + 1 < w {
                edges.push((diff(a, a + 1), a as u32, (a + 1) as u32));
            }
            if y + 1 < h {
                edges.push((diff(a, a + w), a as u32, (a + w) as u32));
                if x + 1 < w {
                    edges.push((diff(a, a + w + 1), a as u32, (a + w + 1) as u32));
                }
                if x > 0 {
                    edges.push((diff(a, a + w - 1), a as u32, (a + w - 1) as u32));
                }
            }
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut ds = DisjointSet::new(h * w, params.k);
    for &(weight, a, b) in &edges {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra != rb && weight <= ds.threshold[ra as usize] && weight <= ds.threshold[rb as usize] {
            let root = ds.join(ra, rb);
            ds.threshold[root as usize] = weight + params.k / ds.size[root as usize] as f32;
        }
    }
    for &(_, a, b) in &edges {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra != rb && (ds.size[ra as usize] < params.min_size as u32 || ds.size[rb as usize] < params.min_size as u32) {
            ds.join(ra, rb);
        }
    }
    let mut dense = vec![u32::MAX; h * w];
    let mut count = 0u32;
    let mut labels = Vec::with_capacity(h * w);
    for p in 0..h * w {
        let root = ds.find(p as u32) as usize;
        if dense[root] == u32::MAX {
            dense[root] = count;
            count += 1;
        }
        labels.push(dense[root]);
    }
    Ok(SuperpixelMap {
        width: w,
        height: h,
        labels,
        count: count as usize,
        params: *params,
    })
}

/// Per-superpixel vote: background when the segment mean of the
/// max-over-classes score is below `tau`, otherwise the class with the
/// highest segment mean (ties to the lowest class id).
pub fn resolve_with_superpixels(scores: &[ScoreMap], sp: &SuperpixelMap, tau: f32) -> Result<LabelMask> {
    let (w, h) = check_stack(scores)?;
    if (sp.width, sp.height) != (w, h) {
        return Err(Error::ShapeMismatch {
            op: "resolve_superpixel",
            expected: vec![h, w],
            actual: vec![sp.height, sp.width],
        });
    }
    let n = scores.len();
    let mut class_sum = vec![0.0f64; sp.count * n];
    let mut max_sum = vec![0.0f64; sp.count];
    let mut size = vec![0usize; sp.count];
    for p in 0..w * h {
        let s = sp.labels[p] as usize;
        size[s] += 1;
        let mut best = f32::NEG_INFINITY;
        for (i, m) in scores.iter().enumerate() {
            class_sum[s * n + i] += m.values[p] as f64;
            best = best.max(m.values[p]);
        }
        max_sum[s] += best as f64;
    }
    let ids: Vec<usize> = scores.iter().map(|m| m.class_id).collect();
    let segment_label: Vec<u8> = (0..sp.count)
        .map(|s| {
            let count = size[s] as f64;
            if ((max_sum[s] / count) as f32) < tau {
                return 0;
            }
            let means = &class_sum[s * n..(s + 1) * n];
            let mut best = 0;
            for i in 1..n {
                if means[i] > means[best] || (means[i] == means[best] && ids[i] < ids[best]) {
                    best = i;
                }
            }
            ids[best] as u8
        })
        .collect();
    Ok(LabelMask {
        width: w,
        height: h,
        pixels: sp.labels.iter().map(|&l| segment_label[l as usize]).collect(),
    })
}

/// Superpixels of `image` followed by the per-segment vote.
pub fn resolve_superpixel(scores: &[ScoreMap], image: &Tensor, tau: f32, params: &FelzenszwalbParams) -> Result<LabelMask> {
    resolve_with_superpixels(scores, &felzenszwalb(image, params)?, tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ResolveMethod {
    Basic,
    Smooth {
        #[serde(default = "default_smooth_size")]
        size: usize,
        #[serde(default = "default_smooth_sigma")]
        sigma: f32,
    },
    Superpixel {
        #[serde(flatten)]
        params: FelzenszwalbParams,
    },
}

fn default_smooth_size() -> usize {
    SMOOTH_KERNEL_SIZE
}

fn default_smooth_sigma() -> f32 {
    SMOOTH_SIGMA
}

impl ResolveMethod {
    pub fn smooth() -> Self {
        ResolveMethod::Smooth {
            size: SMOOTH_KERNEL_SIZE,
            sigma: SMOOTH_SIGMA,
        }
    }

    /// `image` is only read by the superpixel resolve.
    pub fn apply(&self, scores: &[ScoreMap], image: Option<&Tensor>, tau: f32) -> Result<LabelMask> {
        match *self {
            ResolveMethod::Basic => resolve_basic(scores, tau),
            ResolveMethod::Smooth { size, sigma } => resolve_smooth_with(scores, tau, size, sigma),
            ResolveMethod::Superpixel { params } => {
                let image = image.ok_or_else(|| Error::invalid("superpixel resolve needs the image"))?;
                resolve_superpixel(scores, image, tau, &params)
            }
        }
    }
}
