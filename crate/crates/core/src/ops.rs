//! Forward and backward numeric kernels.
//!
//! All reductions run in a fixed order so that results are bit-reproducible:
//! convolution outputs accumulate `bias`, then input channels, then kernel rows,
//! then kernel columns, ascending. Vectorisation only ever runs across
//! independent output elements, or across a fixed eight-lane split for dot
//! products.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use wide::f32x16;

const LANES: usize = 8;

/// Gradients of one layer: one tensor per parameter, plus the input gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub params: Vec<Tensor>,
    pub input: Tensor,
}

/// `Σ_i w[i] * x[i]`, accumulated left to right from zero.
///
/// This is the single definition of a class-weighted channel sum; CAM pixels,
/// hyperplane distances and dense layers all go through it.
#[inline]
pub fn weighted_sum(w: &[f32], x: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (a, b) in w.iter().zip(x) {
        acc += a * b;
    }
    acc
}

#[inline]
fn lane_sum_into(acc: &mut [f32; LANES], a: &[f32]) {
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let a = &a[c * LANES..c * LANES + LANES];
        for l in 0..LANES {
            acc[l] += a[l];
        }
    }
    for i in chunks * LANES..a.len() {
        acc[i - chunks * LANES] += a[i];
    }
}

#[inline]
fn lane_reduce(acc: &[f32; LANES]) -> f32 {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

fn kernel_dims(kernel: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match kernel.shape() {
        &[co, ci, kh, kw] => Ok((co, ci, kh, kw)),
        other => Err(Error::ShapeMismatch {
            op: "conv2d",
            expected: vec![0, 0, 0, 0],
            actual: other.to_vec(),
        }),
    }
}

/// Valid output index range `[lo, hi)` for kernel offset `k`: output `o` reads
/// input `o + k - pad`, which must fall inside `[0, len)`.
#[inline]
fn valid_range(k: usize, pad: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(out_len);
    (lo, hi.max(lo))
}

fn conv_geometry(
    input: &Tensor,
    kernel: &Tensor,
    pad: usize,
) -> Result<((usize, usize, usize), (usize, usize, usize, usize), (usize, usize))> {
    let (cin, h, w) = input.dims3("conv2d")?;
    let (cout, kcin, kh, kw) = kernel_dims(kernel)?;
    if kcin != cin {
        return Err(Error::ShapeMismatch {
            op: "conv2d input channels",
            expected: vec![kcin],
            actual: vec![cin],
        });
    }
    if kh == 0 || kw == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::ShapeMismatch {
            op: "conv2d kernel vs padded input",
            expected: vec![h + 2 * pad, w + 2 * pad],
            actual: vec![kh, kw],
        });
    }
    Ok(((cin, h, w), (cout, kcin, kh, kw), (h + 2 * pad - kh + 1, w + 2 * pad - kw + 1)))
}

/// Copies `[C, H, W]` planes into a zero border of width `pad`.
fn pad_planes(data: &[f32], c: usize, h: usize, w: usize, pad: usize) -> Vec<f32> {
    if pad == 0 {
        return data.to_vec();
    }
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0f32; c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            let dst = (ch * ph + y + pad) * pw + pad;
            out[dst..dst + w].copy_from_slice(&data[(ch * h + y) * w..][..w]);
        }
    }
    out
}

const TILE_X: usize = 32;
const TILE_C: usize = 8;

struct ConvPlan<'a> {
    src: &'a [f32],
    cin: usize,
    ph: usize,
    pw: usize,
    kernel: &'a [f32],
    kh: usize,
    kw: usize,
    bias: &'a [f32],
    oh: usize,
    ow: usize,
}

impl ConvPlan<'_> {
    /// Computes output channels `co0..co0 + NC` into `out`.
    fn tile<const NC: usize>(&self, co0: usize, out: &mut [f32]) {
        let (cin, kh, kw, oh, ow, pw) = (self.cin, self.kh, self.kw, self.oh, self.ow, self.pw);
        let taps = cin * kh * kw;
        let mut packed = vec![0.0f32; taps * NC];
        for t in 0..taps {
            for j in 0..NC {
                packed[t * NC + j] = self.kernel[(co0 + j) * taps + t];
            }
        }
        let plane = oh * ow;
        for y in 0..oh {
            let mut x0 = 0;
            while x0 + TILE_X <= ow {
                let mut acc = [[f32x16::ZERO; 2]; NC];
                for (j, a) in acc.iter_mut().enumerate() {
                    *a = [f32x16::splat(self.bias[co0 + j]); 2];
                }
                for ci in 0..cin {
                    for ky in 0..kh {
                        let row = &self.src[(ci * self.ph + y + ky) * pw + x0..];
                        for kx in 0..kw {
                            let s0 = load16(row, kx);
                            let s1 = load16(row, kx + 16);
                            let wv = &packed[((ci * kh + ky) * kw + kx) * NC..][..NC];
                            for j in 0..NC {
                                let k = f32x16::splat(wv[j]);
                                acc[j][0] = acc[j][0] + k * s0;
                                acc[j][1] = acc[j][1] + k * s1;
                            }
                        }
                    }
                }
                for (j, a) in acc.iter().enumerate() {
                    let o = &mut out[(co0 + j) * plane + y * ow + x0..][..TILE_X];
                    o[..16].copy_from_slice(&a[0].to_array());
                    o[16..].copy_from_slice(&a[1].to_array());
                }
                x0 += TILE_X;
            }
            for x in x0..ow {
                for j in 0..NC {
                    let mut a = self.bias[co0 + j];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let row = &self.src[(ci * self.ph + y + ky) * pw + x..];
                            for kx in 0..kw {
                                a += packed[((ci * kh + ky) * kw + kx) * NC + j] * row[kx];
                            }
                        }
                    }
                    out[(co0 + j) * plane + y * ow + x] = a;
                }
            }
        }
    }

    fn run(&self, cout: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; cout * self.oh * self.ow];
        let mut co0 = 0;
        while co0 + TILE_C <= cout {
            self.tile::<TILE_C>(co0, &mut out);
            co0 += TILE_C;
        }
        while co0 < cout {
            self.tile::<1>(co0, &mut out);
            co0 += 1;
        }
        out
    }
}

/// Stride-1, zero-padded 2-D cross-correlation.
///
/// `input` is `[Cin, H, W]`, `kernel` is `[Cout, Cin, F, F]`; the output is
/// `[Cout, H + 2 pad - F + 1, W + 2 pad - F + 1]`. Each output starts at its
/// bias and accumulates every tap of the zero-padded window in
/// `(ci, ky, kx)` order, padding zeros included.
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: &[f32], pad: usize) -> Result<Tensor> {
    let ((cin, h, w), (cout, _, kh, kw), (oh, ow)) = conv_geometry(input, kernel, pad)?;
    if bias.len() != cout {
        return Err(Error::ShapeMismatch {
            op: "conv2d bias",
            expected: vec![cout],
            actual: vec![bias.len()],
        });
    }
    let src = pad_planes(input.data(), cin, h, w, pad);
    let plan = ConvPlan {
        src: &src,
        cin,
        ph: h + 2 * pad,
        pw: w + 2 * pad,
        kernel: kernel.data(),
        kh,
        kw,
        bias,
        oh,
        ow,
    };
    Tensor::new(vec![cout, oh, ow], plan.run(cout))
}

/// Gradient of the convolution with respect to its input only.
///
/// This is the transposed convolution of `out_grad` with the 180°-rotated
/// kernel: a forward convolution of `out_grad` padded by `F - 1 - pad`, using
/// the flipped kernel with input and output channels swapped.
pub fn conv2d_backward_input(input_shape: &[usize], kernel: &Tensor, out_grad: &Tensor, pad: usize) -> Result<Tensor> {
    let probe = Tensor::zeros(input_shape);
    let ((cin, h, w), (cout, _, kh, kw), (oh, ow)) = conv_geometry(&probe, kernel, pad)?;
    if out_grad.shape() != [cout, oh, ow] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward out_grad",
            expected: vec![cout, oh, ow],
            actual: out_grad.shape().to_vec(),
        });
    }
    if kh != kw || pad + 1 > kh {
        return Ok(scatter_backward_input(input_shape, kernel, out_grad, pad));
    }
    let kd = kernel.data();
    let mut rotated = vec![0.0f32; cin * cout * kh * kw];
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    rotated[((ci * cout + co) * kh + (kh - 1 - ky)) * kw + (kw - 1 - kx)] =
                        kd[((co * cin + ci) * kh + ky) * kw + kx];
                }
            }
        }
    }
    let tpad = kh - 1 - pad;
    let src = pad_planes(out_grad.data(), cout, oh, ow, tpad);
    let zeros = vec![0.0f32; cin];
    let plan = ConvPlan {
        src: &src,
        cin: cout,
        ph: oh + 2 * tpad,
        pw: ow + 2 * tpad,
        kernel: &rotated,
        kh,
        kw,
        bias: &zeros,
        oh: h,
        ow: w,
    };
    Tensor::new(input_shape.to_vec(), plan.run(cin))
}

/// Scatter form of the input gradient, used when the padding exceeds the
/// kernel reach and the transposed convolution would need negative padding.
fn scatter_backward_input(input_shape: &[usize], kernel: &Tensor, out_grad: &Tensor, pad: usize) -> Tensor {
    let (cin, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (cout, _, kh, kw) = kernel_dims(kernel).unwrap();
    let (oh, ow) = (out_grad.shape()[1], out_grad.shape()[2]);
    let g = out_grad.data();
    let kd = kernel.data();
    let mut dx = vec![0.0f32; cin * h * w];
    for co in 0..cout {
        for ky in 0..kh {
            let (y_lo, y_hi) = valid_range(ky, pad, h, oh);
            for kx in 0..kw {
                let (x_lo, x_hi) = valid_range(kx, pad, w, ow);
                if x_hi == x_lo {
                    continue;
                }
                let ix0 = x_lo + kx - pad;
                let span = x_hi - x_lo;
                for ci in 0..cin {
                    let k = kd[((co * cin + ci) * kh + ky) * kw + kx];
                    for y in y_lo..y_hi {
                        let iy = y + ky - pad;
                        let s = &g[(co * oh + y) * ow + x_lo..][..span];
                        let d = &mut dx[(ci * h + iy) * w + ix0..][..span];
                        for (d, s) in d.iter_mut().zip(s) {
                            *d += k * *s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx).unwrap()
}

/// Full convolution backward pass.
///
/// Returns `params = [kernel_grad, bias_grad]` and the input gradient. The
/// kernel gradient is the cross-correlation of `input` with `out_grad`.
pub fn conv2d_backward(input: &Tensor, kernel: &Tensor, out_grad: &Tensor, pad: usize) -> Result<LayerGrads> {
    let dx = conv2d_backward_input(input.shape(), kernel, out_grad, pad)?;
    let (dk, db) = conv2d_param_grads(input, kernel, out_grad, pad)?;
    Ok(LayerGrads {
        params: vec![dk, db],
        input: dx,
    })
}

/// Kernel and bias gradients of the convolution.
///
/// For each `(co, ci, ky)` the `kw` taps of one kernel row are accumulated
/// together: one output-gradient chunk of 16 columns is loaded per step and
/// multiplied against `kw` shifted input chunks, one f32x16 accumulator per
/// tap. Columns past the last full chunk go to a scalar tail per tap that is
/// folded in before the pairwise lane reduction.
pub fn conv2d_param_grads(input: &Tensor, kernel: &Tensor, out_grad: &Tensor, pad: usize) -> Result<(Tensor, Tensor)> {
    let ((cin, h, w), (cout, _, kh, kw), (oh, ow)) = conv_geometry(input, kernel, pad)?;
    if out_grad.shape() != [cout, oh, ow] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward out_grad",
            expected: vec![cout, oh, ow],
            actual: out_grad.shape().to_vec(),
        });
    }
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let src = pad_planes(input.data(), cin, h, w, pad);
    let g = out_grad.data();
    let mut dk = vec![0.0f32; cout * cin * kh * kw];
    let mut db = vec![0.0f32; cout];
    let geo = GradGeo { oh, ow, ph, pw };
    for co in 0..cout {
        let gp = &g[co * oh * ow..(co + 1) * oh * ow];
        let mut bacc = [0.0f32; LANES];
        lane_sum_into(&mut bacc, gp);
        db[co] = lane_reduce(&bacc);
    }
    let mut co = 0;
    while co < cout {
        let pair = co + 1 < cout && matches!(kw, 3 | 5 | 7);
        let g0 = &g[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let plane = &src[ci * ph * pw..(ci + 1) * ph * pw];
            for ky in 0..kh {
                let at = |c: usize| ((c * cin + ci) * kh + ky) * kw;
                if pair {
                    let g1 = &g[(co + 1) * oh * ow..(co + 2) * oh * ow];
                    let mut out = [[0.0f32; 7]; 2];
                    match kw {
                        3 => row_taps_pair::<3>([g0, g1], plane, ky, &geo, &mut out),
                        5 => row_taps_pair::<5>([g0, g1], plane, ky, &geo, &mut out),
                        _ => row_taps_pair::<7>([g0, g1], plane, ky, &geo, &mut out),
                    }
                    dk[at(co)..at(co) + kw].copy_from_slice(&out[0][..kw]);
                    dk[at(co + 1)..at(co + 1) + kw].copy_from_slice(&out[1][..kw]);
                } else {
                    let out = &mut dk[at(co)..at(co) + kw];
                    match kw {
                        1 => row_taps::<1>(g0, plane, ky, &geo, out),
                        3 => row_taps::<3>(g0, plane, ky, &geo, out),
                        5 => row_taps::<5>(g0, plane, ky, &geo, out),
                        7 => row_taps::<7>(g0, plane, ky, &geo, out),
                        _ => {
                            for kx in 0..kw {
                                row_taps_shift(g0, plane, ky, kx, &geo, &mut out[kx..kx + 1]);
                            }
                        }
                    }
                }
            }
        }
        co += if pair { 2 } else { 1 };
    }
    Ok((Tensor::new(kernel.shape().to_vec(), dk)?, Tensor::new(vec![cout], db)?))
}

struct GradGeo {
    oh: usize,
    ow: usize,
    ph: usize,
    pw: usize,
}

#[inline(always)]
fn load16(s: &[f32], at: usize) -> f32x16 {
    f32x16::new(s[at..at + 16].try_into().unwrap())
}

const GRAD_LANES: usize = 16;

/// Folds the scalar tail into lane 0, then reduces the two halves pairwise.
#[inline(always)]
fn finish_tap(acc: f32x16, tail: f32) -> f32 {
    let lanes = acc.to_array();
    let mut lo = [0.0f32; LANES];
    for l in 0..LANES {
        lo[l] = lanes[l] + lanes[l + LANES];
    }
    lo[0] += tail;
    lane_reduce(&lo)
}

fn row_taps<const K: usize>(gp: &[f32], plane: &[f32], ky: usize, geo: &GradGeo, out: &mut [f32]) {
    let chunks = geo.ow / GRAD_LANES;
    let mut acc = [f32x16::ZERO; K];
    let mut tail = [0.0f32; K];
    for y in 0..geo.oh {
        let gr = &gp[y * geo.ow..][..geo.ow];
        let xr = &plane[(y + ky) * geo.pw..][..geo.pw];
        debug_assert!(geo.ph >= y + ky);
        for c in 0..chunks {
            let base = c * GRAD_LANES;
            let gv = load16(gr, base);
            for (kx, a) in acc.iter_mut().enumerate() {
                *a = *a + gv * load16(xr, base + kx);
            }
        }
        for x in chunks * GRAD_LANES..geo.ow {
            for (kx, t) in tail.iter_mut().enumerate() {
                *t += gr[x] * xr[x + kx];
            }
        }
    }
    for kx in 0..K {
        out[kx] = finish_tap(acc[kx], tail[kx]);
    }
}

/// [`row_taps`] for two output channels sharing the input loads; each
/// channel's sums are formed exactly as in the single-channel version.
fn row_taps_pair<const K: usize>(gp: [&[f32]; 2], plane: &[f32], ky: usize, geo: &GradGeo, out: &mut [[f32; 7]; 2]) {
    let chunks = geo.ow / GRAD_LANES;
    let mut acc = [[f32x16::ZERO; K]; 2];
    let mut tail = [[0.0f32; K]; 2];
    for y in 0..geo.oh {
        let g0 = &gp[0][y * geo.ow..][..geo.ow];
        let g1 = &gp[1][y * geo.ow..][..geo.ow];
        let xr = &plane[(y + ky) * geo.pw..][..geo.pw];
        for c in 0..chunks {
            let base = c * GRAD_LANES;
            let (v0, v1) = (load16(g0, base), load16(g1, base));
            for kx in 0..K {
                let xv = load16(xr, base + kx);
                acc[0][kx] = acc[0][kx] + v0 * xv;
                acc[1][kx] = acc[1][kx] + v1 * xv;
            }
        }
        for x in chunks * GRAD_LANES..geo.ow {
            for kx in 0..K {
                tail[0][kx] += g0[x] * xr[x + kx];
                tail[1][kx] += g1[x] * xr[x + kx];
            }
        }
    }
    for j in 0..2 {
        for kx in 0..K {
            out[j][kx] = finish_tap(acc[j][kx], tail[j][kx]);
        }
    }
}

fn row_taps_shift(gp: &[f32], plane: &[f32], ky: usize, kx: usize, geo: &GradGeo, out: &mut [f32]) {
    let chunks = geo.ow / GRAD_LANES;
    let mut acc = f32x16::ZERO;
    let mut tail = 0.0f32;
    for y in 0..geo.oh {
        let gr = &gp[y * geo.ow..][..geo.ow];
        let xr = &plane[(y + ky) * geo.pw + kx..][..geo.ow];
        for c in 0..chunks {
            acc = acc + load16(gr, c * GRAD_LANES) * load16(xr, c * GRAD_LANES);
        }
        for x in chunks * GRAD_LANES..geo.ow {
            tail += gr[x] * xr[x];
        }
    }
    out[0] = finish_tap(acc, tail);
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes `out_grad` where `x > 0`; the subgradient at exactly zero is 0.
pub fn relu_backward(x: &Tensor, out_grad: &Tensor) -> Result<Tensor> {
    if x.shape() != out_grad.shape() {
        return Err(Error::ShapeMismatch {
            op: "relu_backward",
            expected: x.shape().to_vec(),
            actual: out_grad.shape().to_vec(),
        });
    }
    let data = x
        .data()
        .iter()
        .zip(out_grad.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Channel-wise spatial mean of a `[C, H, W]` map.
pub fn gap_forward(a: &Tensor) -> Result<Vec<f32>> {
    let (c, h, w) = a.dims3("gap_forward")?;
    if h * w == 0 {
        return Err(Error::Degenerate("global average pooling over empty spatial dims".into()));
    }
    let n = (h * w) as f32;
    Ok((0..c)
        .map(|ch| {
            let mut acc = [0.0f32; LANES];
            lane_sum_into(&mut acc, &a.data()[ch * h * w..(ch + 1) * h * w]);
            lane_reduce(&acc) / n
        })
        .collect())
}

/// Spreads `out_grad[c] / (H W)` uniformly over channel `c`.
pub fn gap_backward(out_grad: &[f32], h: usize, w: usize) -> Result<Tensor> {
    if h * w == 0 {
        return Err(Error::Degenerate("global average pooling over empty spatial dims".into()));
    }
    let n = (h * w) as f32;
    let mut data = Vec::with_capacity(out_grad.len() * h * w);
    for &g in out_grad {
        data.extend(std::iter::repeat_n(g / n, h * w));
    }
    Tensor::new(vec![out_grad.len(), h, w], data)
}

/// `y[o] = Σ_i W[o, i] x[i] + b[o]` for a row-major `[out, in]` weight.
pub fn dense_forward(x: &[f32], weight: &Tensor, bias: &[f32]) -> Result<Vec<f32>> {
    let (out, inp) = dense_dims(weight)?;
    if x.len() != inp || bias.len() != out {
        return Err(Error::ShapeMismatch {
            op: "dense_forward",
            expected: vec![inp, out],
            actual: vec![x.len(), bias.len()],
        });
    }
    Ok((0..out)
        .map(|o| weighted_sum(&weight.data()[o * inp..(o + 1) * inp], x) + bias[o])
        .collect())
}

/// Returns `params = [weight_grad, bias_grad]` and the input gradient.
pub fn dense_backward(x: &[f32], weight: &Tensor, out_grad: &[f32]) -> Result<LayerGrads> {
    let (out, inp) = dense_dims(weight)?;
    if x.len() != inp || out_grad.len() != out {
        return Err(Error::ShapeMismatch {
            op: "dense_backward",
            expected: vec![inp, out],
            actual: vec![x.len(), out_grad.len()],
        });
    }
    let dw = Tensor::from_fn(&[out, inp], |i| out_grad[i / inp] * x[i % inp]);
    let db = Tensor::new(vec![out], out_grad.to_vec())?;
    Ok(LayerGrads {
        params: vec![dw, db],
        input: Tensor::new(vec![inp], dense_backward_input(weight, out_grad)?)?,
    })
}

/// `dx[i] = Σ_o W[o, i] g[o]`, ascending in `o`.
pub fn dense_backward_input(weight: &Tensor, out_grad: &[f32]) -> Result<Vec<f32>> {
    let (out, inp) = dense_dims(weight)?;
    if out_grad.len() != out {
        return Err(Error::ShapeMismatch {
            op: "dense_backward",
            expected: vec![out],
            actual: vec![out_grad.len()],
        });
    }
    let mut dx = vec![0.0f32; inp];
    for (o, &g) in out_grad.iter().enumerate() {
        for (d, &wv) in dx.iter_mut().zip(&weight.data()[o * inp..(o + 1) * inp]) {
            *d += wv * g;
        }
    }
    Ok(dx)
}

fn dense_dims(weight: &Tensor) -> Result<(usize, usize)> {
    match weight.shape() {
        &[o, i] => Ok((o, i)),
        other => Err(Error::ShapeMismatch {
            op: "dense weight",
            expected: vec![0, 0],
            actual: other.to_vec(),
        }),
    }
}

/// Softmax cross-entropy via log-sum-exp. Returns the loss and
/// `softmax(logits) - onehot(target)`.
pub fn softmax_ce_loss(logits: &[f32], target: usize) -> Result<(f32, Vec<f32>)> {
    if target >= logits.len() {
        return Err(Error::invalid(format!(
            "target class {target} out of range for {} logits",
            logits.len()
        )));
    }
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&l| (l as f64 - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = (m + z.ln() - logits[target] as f64) as f32;
    let mut grad: Vec<f32> = exps.iter().map(|e| (e / z) as f32).collect();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
