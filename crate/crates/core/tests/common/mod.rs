#![allow(dead_code)]

use std::path::PathBuf;

use aslab::model::{LayerSpec, Model, NetworkSpec};
use aslab::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// MNIST directory from `ASLAB_MNIST_DIR`, falling back to the vendored copy.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("ASLAB_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.is_dir().then_some(dir)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Small random network with random padding per layer.
pub fn random_spec(rng: &mut ChaCha8Rng) -> NetworkSpec {
    let cin = rng.random_range(1..=2);
    let h = rng.random_range(3..=7);
    let w = rng.random_range(3..=7);
    let depth = rng.random_range(1..=3);
    let classes = rng.random_range(2..=4);
    let mut layers = Vec::new();
    let (mut c, mut hh, mut ww) = (cin, h, w);
    for _ in 0..depth {
        let kernel = [1, 3, 5][rng.random_range(0..3)];
        let max_pad = (kernel - 1) / 2;
        let mut pad = rng.random_range(0..=max_pad);
        while kernel > hh + 2 * pad || kernel > ww + 2 * pad {
            pad += 1;
        }
        let out = rng.random_range(1..=4);
        layers.push(LayerSpec::Conv2d {
            kernel,
            in_channels: c,
            out_channels: out,
            pad,
        });
        layers.push(LayerSpec::Relu);
        c = out;
        hh = hh + 2 * pad - kernel + 1;
        ww = ww + 2 * pad - kernel + 1;
    }
    layers.push(LayerSpec::Gap);
    layers.push(LayerSpec::Dense {
        in_features: c,
        out_features: classes,
    });
    NetworkSpec {
        layers,
        input_shape: [cin, h, w],
        num_classes: classes,
    }
}

/// Model with parameters (biases included) drawn from `[-1, 1)`.
pub fn random_model(spec: NetworkSpec, rng: &mut ChaCha8Rng) -> Model {
    let params = spec.param_shapes().iter().map(|s| uniform_tensor(rng, s, -1.0, 1.0)).collect();
    Model::from_parts(spec, params).unwrap()
}

/// Double-precision re-implementation of the network, written as plain loops.
pub struct RefNet {
    pub spec: NetworkSpec,
    pub params: Vec<Vec<f64>>,
}

pub struct RefForward {
    pub logits: Vec<f64>,
    /// Sign pattern of every ReLU input, in layer order.
    pub pattern: Vec<bool>,
    /// Final activation map, `[k][h*w]` flattened channel-major.
    pub activation: Vec<f64>,
    pub act_hw: (usize, usize),
}

impl RefNet {
    pub fn from_model(model: &Model) -> Self {
        RefNet {
            spec: model.spec().clone(),
            params: model.params().iter().map(|p| p.data().iter().map(|&v| v as f64).collect()).collect(),
        }
    }

    pub fn forward(&self, image: &[f64]) -> RefForward {
        let [mut c, mut h, mut w] = self.spec.input_shape;
        let mut x = image.to_vec();
        let mut pattern = Vec::new();
        let mut p = 0;
        for layer in &self.spec.layers {
            match *layer {
                LayerSpec::Conv2d {
                    kernel: f,
                    out_channels: co,
                    pad,
                    ..
                } => {
                    let (k, b) = (&self.params[p], &self.params[p + 1]);
                    p += 2;
                    let (oh, ow) = (h + 2 * pad - f + 1, w + 2 * pad - f + 1);
                    let mut y = vec![0.0; co * oh * ow];
                    for o in 0..co {
                        for i in 0..oh {
                            for j in 0..ow {
                                let mut s = b[o];
                                for ci in 0..c {
                                    for a in 0..f {
                                        for bb in 0..f {
                                            let (yy, xx) = ((i + a) as isize - pad as isize, (j + bb) as isize - pad as isize);
                                            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                                s += k[((o * c + ci) * f + a) * f + bb] * x[(ci * h + yy as usize) * w + xx as usize];
                                            }
                                        }
                                    }
                                }
                                y[(o * oh + i) * ow + j] = s;
                            }
                        }
                    }
                    x = y;
                    c = co;
                    h = oh;
                    w = ow;
                }
                LayerSpec::Relu => {
                    for v in x.iter_mut() {
                        pattern.push(*v > 0.0);
                        if *v <= 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                LayerSpec::Gap => {}
                LayerSpec::Dense { .. } => {}
            }
        }
        let pooled: Vec<f64> = (0..c).map(|ch| x[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64).collect();
        let (wd, bd) = (&self.params[p], &self.params[p + 1]);
        let logits = (0..self.spec.num_classes)
            .map(|o| bd[o] + (0..c).map(|i| wd[o * c + i] * pooled[i]).sum::<f64>())
            .collect();
        RefForward {
            logits,
            pattern,
            activation: x,
            act_hw: (h, w),
        }
    }
}

pub fn ce_loss(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Outcome of one finite-difference comparison.
#[derive(Debug, Default, Clone, Copy)]
pub struct FdStats {
    pub checked: usize,
    pub excluded: usize,
    pub worst_rel: f64,
}

impl FdStats {
    pub fn merge(&mut self, o: FdStats) {
        self.checked += o.checked;
        self.excluded += o.excluded;
        self.worst_rel = self.worst_rel.max(o.worst_rel);
    }
}

pub const FD_STEP: f64 = 1e-3;

/// Relative error with a floor proportional to the largest gradient entry of
/// the same tensor, so entries that vanish analytically are compared on the
/// tensor's scale rather than their own.
pub fn rel_err(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3 * scale).max(1e-12);
    (analytic - numeric).abs() / denom
}

/// Central differences of `objective` over every coordinate of `values`.
/// A coordinate is excluded when either probe changes the ReLU sign pattern.
pub fn central_differences(
    values: &mut [f64],
    base_pattern: &[bool],
    mut eval: impl FnMut(&[f64]) -> (f64, Vec<bool>),
) -> Vec<Option<f64>> {
    (0..values.len())
        .map(|i| {
            let v = values[i];
            values[i] = v + FD_STEP;
            let (fp, pp) = eval(values);
            values[i] = v - FD_STEP;
            let (fm, pm) = eval(values);
            values[i] = v;
            (pp == base_pattern && pm == base_pattern).then(|| (fp - fm) / (2.0 * FD_STEP))
        })
        .collect()
}

pub fn compare(analytic: &[f32], numeric: &[Option<f64>]) -> FdStats {
    let scale = numeric.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut s = FdStats::default();
    for (&a, n) in analytic.iter().zip(numeric) {
        match n {
            Some(n) => {
                s.checked += 1;
                s.worst_rel = s.worst_rel.max(rel_err(a as f64, *n, scale));
            }
            None => s.excluded += 1,
        }
    }
    s
}

/// Checks the gradient of the objective `r · logits` with respect to the
/// image and every parameter against double-precision central differences.
pub fn check_network_gradients(model: &Model, image: &Tensor, r: &[f32]) -> FdStats {
    let rd: Vec<f64> = r.iter().map(|&v| v as f64).collect();
    let objective = |logits: &[f64]| logits.iter().zip(&rd).map(|(a, b)| a * b).sum::<f64>();
    let reference = RefNet::from_model(model);
    let img: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();
    let base = reference.forward(&img);
    let mut stats = FdStats::default();

    let trace = model.forward(image).unwrap();
    let f32_pattern: Vec<bool> = model
        .spec()
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, LayerSpec::Relu))
        .flat_map(|(i, _)| trace.inputs[i].data().iter().map(|&v| v > 0.0).collect::<Vec<_>>())
        .collect();
    if f32_pattern != base.pattern {
        stats.excluded += img.len() + model.spec().param_count();
        return stats;
    }
    let (param_grads, input_grad) = model.backward(&trace, r).unwrap();

    let mut x = img.clone();
    let numeric = central_differences(&mut x, &base.pattern, |x| {
        let out = reference.forward(x);
        (objective(&out.logits), out.pattern)
    });
    stats.merge(compare(input_grad.data(), &numeric));

    for (pi, grad) in param_grads.iter().enumerate() {
        let mut net = RefNet {
            spec: reference.spec.clone(),
            params: reference.params.clone(),
        };
        let mut values = net.params[pi].clone();
        let numeric = central_differences(&mut values, &base.pattern, |v| {
            net.params[pi].copy_from_slice(v);
            let out = net.forward(&img);
            (objective(&out.logits), out.pattern)
        });
        stats.merge(compare(grad.data(), &numeric));
    }
    stats
}
