//! Declarative GAP ConvNet: construction, forward/backward passes, SGD
//! training with optional input perturbation, and checkpoint files.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        pad: usize,
    },
    Relu,
    Gap,
    Dense {
        in_features: usize,
        out_features: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    /// `(C, H, W)` of the images the network was built for.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

impl NetworkSpec {
    /// `depth` same-padded `kernel × kernel` conv + ReLU blocks of `channels`
    /// channels, then GAP and a dense classifier.
    pub fn conv_stack(input_shape: [usize; 3], kernel: usize, channels: usize, depth: usize, num_classes: usize) -> Self {
        let mut layers = Vec::with_capacity(2 * depth + 2);
        let mut cin = input_shape[0];
        for _ in 0..depth {
            layers.push(LayerSpec::Conv2d {
                kernel,
                in_channels: cin,
                out_channels: channels,
                pad: kernel.saturating_sub(1) / 2,
            });
            layers.push(LayerSpec::Relu);
            cin = channels;
        }
        layers.push(LayerSpec::Gap);
        layers.push(LayerSpec::Dense {
            in_features: cin,
            out_features: num_classes,
        });
        NetworkSpec {
            layers,
            input_shape,
            num_classes,
        }
    }

    /// Default MNIST network: five 16-channel conv blocks on `1 × side × side`.
    pub fn mnist(kernel: usize, side: usize) -> Self {
        NetworkSpec::conv_stack([1, side, side], kernel, 16, 5, 10)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(format!("network spec: {msg}")));
        let gap_positions: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Gap))
            .map(|(i, _)| i)
            .collect();
        if gap_positions.len() != 1 {
            return bad(format!("expected exactly one GAP layer, found {}", gap_positions.len()));
        }
        let gap = gap_positions[0];
        if gap + 2 != self.layers.len() || !matches!(self.layers[gap + 1], LayerSpec::Dense { .. }) {
            return bad("GAP must be followed by exactly one Dense layer, which ends the network".into());
        }
        let [mut c, mut h, mut w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return bad(format!("empty input shape {:?}", self.input_shape));
        }
        for (i, layer) in self.layers[..gap].iter().enumerate() {
            match *layer {
                LayerSpec::Conv2d {
                    kernel,
                    in_channels,
                    out_channels,
                    pad,
                } => {
                    if in_channels != c {
                        return bad(format!("layer {i}: conv expects {in_channels} channels, receives {c}"));
                    }
                    if kernel == 0 || out_channels == 0 || kernel > h + 2 * pad || kernel > w + 2 * pad {
                        return bad(format!("layer {i}: invalid conv geometry"));
                    }
                    c = out_channels;
                    h = h + 2 * pad - kernel + 1;
                    w = w + 2 * pad - kernel + 1;
                }
                LayerSpec::Relu => {}
                LayerSpec::Dense { .. } => return bad(format!("layer {i}: dense layer before GAP")),
                LayerSpec::Gap => unreachable!(),
            }
        }
        match self.layers[gap + 1] {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                if in_features != c {
                    return bad(format!("dense expects {in_features} features, GAP yields {c}"));
                }
                if out_features != self.num_classes {
                    return bad(format!("dense yields {out_features} outputs for {} classes", self.num_classes));
                }
            }
            _ => unreachable!(),
        }
        Ok(())
    }

    /// Parameter shapes in declaration order (`[kernel, bias]` per conv,
    /// `[weight, bias]` for the dense layer).
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for layer in &self.layers {
            match *layer {
                LayerSpec::Conv2d {
                    kernel,
                    in_channels,
                    out_channels,
                    ..
                } => {
                    shapes.push(vec![out_channels, in_channels, kernel, kernel]);
                    shapes.push(vec![out_channels]);
                }
                LayerSpec::Dense {
                    in_features,
                    out_features,
                } => {
                    shapes.push(vec![out_features, in_features]);
                    shapes.push(vec![out_features]);
                }
                LayerSpec::Relu | LayerSpec::Gap => {}
            }
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Number of channels entering the GAP layer.
    pub fn feature_channels(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l {
                LayerSpec::Dense { in_features, .. } => Some(*in_features),
                _ => None,
            })
            .unwrap_or(0)
    }

    fn gap_index(&self) -> usize {
        self.layers.iter().position(|l| matches!(l, LayerSpec::Gap)).unwrap()
    }
}

/// Cached intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input of every layer before GAP (`inputs[0]` is the image).
    pub inputs: Vec<Tensor>,
    /// Final activation map `A`, shape `[k, H, W]`.
    pub activation: Tensor,
    pub pooled: Vec<f32>,
    pub logits: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: NetworkSpec,
    params: Vec<Tensor>,
}

impl Model {
    /// Validates `spec` and draws Kaiming-uniform weights (bound
    /// `sqrt(6 / fan_in)`) from `seed`; biases start at zero.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(rng::split(seed, 0x1417));
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt() as f32;
                    Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound))
                }
            })
            .collect();
        Ok(Model { spec, params })
    }

    pub fn from_parts(spec: NetworkSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "Model::from_parts parameter count",
                expected: vec![shapes.len()],
                actual: vec![params.len()],
            });
        }
        for (shape, p) in shapes.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "Model::from_parts",
                    expected: shape.clone(),
                    actual: p.shape().to_vec(),
                });
            }
        }
        Ok(Model { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Dense weight `[num_classes, k]`.
    pub fn dense_weight(&self) -> &Tensor {
        &self.params[self.params.len() - 2]
    }

    pub fn dense_bias(&self) -> &[f32] {
        self.params[self.params.len() - 1].data()
    }

    /// Row `w_c` of the dense weight.
    pub fn class_weights(&self, class: usize) -> Result<&[f32]> {
        if class >= self.spec.num_classes {
            return Err(Error::invalid(format!(
                "class {class} out of range for {} classes",
                self.spec.num_classes
            )));
        }
        let k = self.spec.feature_channels();
        Ok(&self.dense_weight().data()[class * k..(class + 1) * k])
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let (c, h, w) = image.dims3("Model::forward")?;
        if c != self.spec.input_shape[0] || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch {
                op: "Model::forward image",
                expected: self.spec.input_shape.to_vec(),
                actual: image.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Runs the network. Images must have the declared channel count; the
    /// spatial size may differ from `input_shape` since GAP makes the
    /// classifier size-agnostic (crops rely on this).
    pub fn forward(&self, image: &Tensor) -> Result<ForwardTrace> {
        self.check_image(image)?;
        let gap = self.spec.gap_index();
        let mut inputs = Vec::with_capacity(gap);
        let mut x = image.clone();
        let mut p = 0;
        for layer in &self.spec.layers[..gap] {
            let y = match *layer {
                LayerSpec::Conv2d { pad, .. } => {
                    let y = ops::conv2d_forward(&x, &self.params[p], self.params[p + 1].data(), pad)?;
                    p += 2;
                    y
                }
                LayerSpec::Relu => ops::relu_forward(&x),
                _ => unreachable!(),
            };
            inputs.push(std::mem::replace(&mut x, y));
        }
        let pooled = ops::gap_forward(&x)?;
        let logits = ops::dense_forward(&pooled, self.dense_weight(), self.dense_bias())?;
        Ok(ForwardTrace {
            inputs,
            activation: x,
            pooled,
            logits,
        })
    }

    /// Class logits `S = W · GAP(A) + b`.
    pub fn classify(&self, image: &Tensor) -> Result<Vec<f32>> {
        Ok(self.forward(image)?.logits)
    }

    /// Backpropagates `gap_grad` (a gradient on the pooled features) down to
    /// the image. Parameter gradients of the conv layers are returned when
    /// requested; the input gradient is always computed.
    pub fn backward_from_gap(
        &self,
        trace: &ForwardTrace,
        gap_grad: &[f32],
        want_params: bool,
    ) -> Result<(Vec<Option<Tensor>>, Tensor)> {
        let (_, h, w) = trace.activation.dims3("Model::backward")?;
        let mut grad = ops::gap_backward(gap_grad, h, w)?;
        let gap = self.spec.gap_index();
        let mut param_grads: Vec<Option<Tensor>> = vec![None; self.params.len()];
        let mut p = self.params.len() - 2;
        for (i, layer) in self.spec.layers[..gap].iter().enumerate().rev() {
            let input = &trace.inputs[i];
            grad = match *layer {
                LayerSpec::Conv2d { pad, .. } => {
                    p -= 2;
                    let kernel = &self.params[p];
                    if want_params {
                        let (dk, db) = ops::conv2d_param_grads(input, kernel, &grad, pad)?;
                        param_grads[p] = Some(dk);
                        param_grads[p + 1] = Some(db);
                    }
                    ops::conv2d_backward_input(input.shape(), kernel, &grad, pad)?
                }
                LayerSpec::Relu => ops::relu_backward(input, &grad)?,
                _ => unreachable!(),
            };
        }
        Ok((param_grads, grad))
    }

    /// Full backward pass from a gradient on the logits. Returns gradients for
    /// every parameter (declaration order) and for the image.
    pub fn backward(&self, trace: &ForwardTrace, logit_grad: &[f32]) -> Result<(Vec<Tensor>, Tensor)> {
        let dense = ops::dense_backward(&trace.pooled, self.dense_weight(), logit_grad)?;
        let (grads, input_grad) = self.backward_from_gap(trace, dense.input.data(), true)?;
        let mut out: Vec<Tensor> = grads.into_iter().flatten().collect();
        out.extend(dense.params);
        Ok((out, input_grad))
    }

    /// `∂S_c/∂I`: the gradient of one pre-softmax logit with respect to the image.
    pub fn logit_input_gradient(&self, trace: &ForwardTrace, class: usize) -> Result<Tensor> {
        let w = self.class_weights(class)?.to_vec();
        Ok(self.backward_from_gap(trace, &w, false)?.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Perturbation {
    None,
    /// `I + ε`, `ε ~ N(0, σ²)` per pixel.
    Gaussian { sigma: f32 },
    /// `I ⊙ m`, `m ~ Bernoulli(p)` per pixel.
    Binary { p: f32 },
}

impl Perturbation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Perturbation::None => Ok(()),
            Perturbation::Gaussian { sigma } if sigma >= 0.0 && sigma.is_finite() => Ok(()),
            Perturbation::Binary { p } if p > 0.0 && p <= 1.0 => Ok(()),
            other => Err(Error::invalid(format!("invalid perturbation {other:?}"))),
        }
    }

    pub fn apply(&self, image: &Tensor, rng: &mut impl Rng) -> Tensor {
        match *self {
            Perturbation::None => image.clone(),
            Perturbation::Gaussian { sigma } if sigma == 0.0 => image.clone(),
            Perturbation::Gaussian { sigma } => {
                let normal = Normal::new(0.0f32, sigma).expect("validated sigma");
                image.map(|v| v + normal.sample(rng))
            }
            Perturbation::Binary { p } => image.map(|v| if rng.random::<f32>() < p { v } else { 0.0 }),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Perturbation::None => "none".into(),
            Perturbation::Gaussian { sigma } => format!("gaussian({sigma})"),
            Perturbation::Binary { p } => format!("binary({p})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub seed: u64,
    pub perturb: Perturbation,
    /// Random horizontal flips with probability 0.5.
    pub standard_augments: bool,
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            seed,
            perturb: Perturbation::None,
            standard_augments: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        self.perturb.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f32,
    pub accuracy: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epochs: usize,
    pub perturb: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
}

fn flip_horizontal(image: &Tensor) -> Tensor {
    let (c, h, w) = image.dims3("flip").unwrap();
    Tensor::from_fn(&[c, h, w], |i| {
        let x = i % w;
        image.data()[i - x + (w - 1 - x)]
    })
}

struct SampleResult {
    loss: f32,
    correct: bool,
    grads: Vec<Tensor>,
}

/// Mini-batch SGD with momentum on softmax cross-entropy.
///
/// Samples of a batch are processed in parallel; their gradients are summed
/// in sample order, so the result does not depend on the worker count. Sample
/// `i` of epoch `e` draws its perturbation from its own counter-derived
/// stream.
pub fn train(mut model: Model, images: &[Tensor], targets: &[usize], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if images.is_empty() || images.len() != targets.len() {
        return Err(Error::invalid(format!(
            "training needs a non-empty dataset with one target per image ({} images, {} targets)",
            images.len(),
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= model.num_classes()) {
        return Err(Error::invalid(format!("target {t} out of range")));
    }
    let mut velocity: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let epoch_base = rng::split(cfg.seed, 0xE90C);
    for epoch in 0..cfg.epochs {
        let mut shuffle = rng::stream(rng::split(epoch_base, epoch as u64));
        order.shuffle(&mut shuffle);
        let sample_base = rng::split(rng::split(cfg.seed, 0x5A3D), epoch as u64);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<SampleResult>> = batch
                .par_iter()
                .map(|&idx| {
                    let mut noise = rng::sample_stream(sample_base, 2 * idx as u64);
                    let mut image = cfg.perturb.apply(&images[idx], &mut noise);
                    if cfg.standard_augments {
                        let mut flip = rng::sample_stream(sample_base, 2 * idx as u64 + 1);
                        if flip.random::<f32>() < 0.5 {
                            image = flip_horizontal(&image);
                        }
                    }
                    let trace = model.forward(&image)?;
                    let (loss, logit_grad) = ops::softmax_ce_loss(&trace.logits, targets[idx])?;
                    let predicted = Tensor::new(vec![trace.logits.len()], trace.logits.clone())?.argmax();
                    let (grads, _) = model.backward(&trace, &logit_grad)?;
                    Ok(SampleResult {
                        loss,
                        correct: predicted == Some(targets[idx]),
                        grads,
                    })
                })
                .collect();
            let mut sum: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
            let mut batch_loss = 0.0f64;
            for r in results {
                let r = r?;
                if !r.loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        loss: r.loss,
                    });
                }
                batch_loss += r.loss as f64;
                correct += r.correct as usize;
                for (s, g) in sum.iter_mut().zip(&r.grads) {
                    for (a, b) in s.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
            }
            loss_sum += batch_loss;
            let scale = 1.0 / batch.len() as f32;
            for ((param, vel), g) in model.params.iter_mut().zip(velocity.iter_mut()).zip(&sum) {
                for ((p, v), g) in param.data_mut().iter_mut().zip(vel.data_mut()).zip(g.data()) {
                    *v = cfg.momentum * *v + *g * scale;
                    *p -= cfg.learning_rate * *v;
                }
            }
            if model.params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: f32::NAN,
                });
            }
        }
        let stats = EpochStats {
            epoch,
            mean_loss: (loss_sum / images.len() as f64) as f32,
            accuracy: correct as f32 / images.len() as f32,
        };
        log::info!(
            "epoch {}: loss {:.4}, train accuracy {:.4}",
            epoch,
            stats.mean_loss,
            stats.accuracy
        );
        history.push(stats);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            meta: CheckpointMeta {
                seed: cfg.seed,
                epochs: cfg.epochs,
                perturb: cfg.perturb.label(),
            },
        },
        history,
    })
}

/// Fraction of `images` whose argmax logit equals the target.
pub fn accuracy(model: &Model, images: &[Tensor], targets: &[usize]) -> Result<f32> {
    if images.is_empty() {
        return Err(Error::invalid("accuracy over an empty set"));
    }
    let hits: Vec<Result<bool>> = images
        .par_iter()
        .zip(targets)
        .map(|(img, &t)| {
            let logits = model.classify(img)?;
            Ok(Tensor::new(vec![logits.len()], logits)?.argmax() == Some(t))
        })
        .collect();
    let mut n = 0usize;
    for h in hits {
        n += h? as usize;
    }
    Ok(n as f32 / images.len() as f32)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"ASLC";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: NetworkSpec,
    param_shapes: Vec<Vec<usize>>,
    param_count: usize,
    metadata: CheckpointMeta,
}

/// Serialises a checkpoint: magic `ASLC`, `u16` version, `u32` header length,
/// JSON header, then every parameter as little-endian `f32` in declaration
/// order.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        spec: ckpt.model.spec.clone(),
        param_shapes: ckpt.model.params.iter().map(|p| p.shape().to_vec()).collect(),
        param_count: ckpt.model.params.iter().map(Tensor::len).sum(),
        metadata: ckpt.meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(10 + json.len() + 4 * header.param_count);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &ckpt.model.params {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 10 {
        return Err(Error::Truncated {
            expected: 10,
            actual: bytes.len(),
        });
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: "ASLC".into(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let body = &bytes[10..];
    if body.len() < header_len {
        return Err(Error::Truncated {
            expected: 10 + header_len,
            actual: bytes.len(),
        });
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..header_len]).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let expected_shapes = header.spec.param_shapes();
    if header.param_shapes != expected_shapes {
        return Err(Error::Format("parameter shapes in header disagree with the network spec".into()));
    }
    let floats: usize = expected_shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if floats != header.param_count {
        return Err(Error::Format(format!(
            "header claims {} parameters, spec implies {floats}",
            header.param_count
        )));
    }
    let blob = &body[header_len..];
    if blob.len() < 4 * floats {
        return Err(Error::Truncated {
            expected: 4 * floats,
            actual: blob.len(),
        });
    }
    if blob.len() > 4 * floats {
        return Err(Error::Format(format!("{} trailing bytes after parameters", blob.len() - 4 * floats)));
    }
    let mut offset = 0;
    let mut params = Vec::with_capacity(expected_shapes.len());
    for shape in expected_shapes {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = blob[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += 4 * n;
        params.push(Tensor::new_finite(shape, data)?);
    }
    Ok(Checkpoint {
        model: Model::from_parts(header.spec, params)?,
        meta: header.metadata,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
