//! Forward and backward kernels behind the tape operations.
//!
//! Spatial tensors are `H×W×C`, row-major, channel fastest.

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Normalized box `[y1, x1, y2, x2]` in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiBox {
    pub y1: f32,
    pub x1: f32,
    pub y2: f32,
    pub x2: f32,
}

impl RoiBox {
    pub const FULL: RoiBox = RoiBox { y1: 0.0, x1: 0.0, y2: 1.0, x2: 1.0 };

    pub fn new(y1: f32, x1: f32, y2: f32, x2: f32) -> Result<Self> {
        let b = RoiBox { y1, x1, y2, x2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let inside = |v: f32| (0.0..=1.0).contains(&v);
        if ![self.y1, self.x1, self.y2, self.x2].into_iter().all(inside)
            || self.y1 > self.y2
            || self.x1 > self.x2
        {
            return Err(Error::Argument(format!("invalid box {self:?}")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f32; 4] {
        [self.y1, self.x1, self.y2, self.x2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

pub fn conv_geometry(
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: Padding,
) -> Result<ConvGeometry> {
    if stride == 0 {
        return Err(Error::Argument("stride must be positive".into()));
    }
    match padding {
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(Error::Dimension(format!(
                    "kernel {kh}×{kw} larger than input {h}×{w}"
                )));
            }
            Ok(ConvGeometry {
                out_h: (h - kh) / stride + 1,
                out_w: (w - kw) / stride + 1,
                pad_top: 0,
                pad_left: 0,
            })
        }
        Padding::Same => {
            let out_h = h.div_ceil(stride);
            let out_w = w.div_ceil(stride);
            let pad_h = ((out_h - 1) * stride + kh).saturating_sub(h);
            let pad_w = ((out_w - 1) * stride + kw).saturating_sub(w);
            if kh > h + pad_h || kw > w + pad_w {
                return Err(Error::Dimension(format!(
                    "kernel {kh}×{kw} larger than padded input"
                )));
            }
            Ok(ConvGeometry { out_h, out_w, pad_top: pad_h / 2, pad_left: pad_w / 2 })
        }
    }
}

fn conv_dims<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>) -> Result<[usize; 6]> {
    input.expect_rank(3)?;
    kernels.expect_rank(4)?;
    let [h, w, cin] = [input.shape()[0], input.shape()[1], input.shape()[2]];
    let [kh, kw, kcin, cout] =
        [kernels.shape()[0], kernels.shape()[1], kernels.shape()[2], kernels.shape()[3]];
    if kcin != cin {
        return Err(Error::Dimension(format!(
            "kernel expects {kcin} input channels, input has {cin}"
        )));
    }
    Ok([h, w, cin, kh, kw, cout])
}

fn im2col<T: Real>(input: &Tensor<T>, kh: usize, kw: usize, stride: usize, g: ConvGeometry) -> Vec<T> {
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let patch = kh * kw * cin;
    let mut cols = vec![T::zero(); g.out_h * g.out_w * patch];
    let src = input.data();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * patch..][..patch];
            for dy in 0..kh {
                let iy = (oy * stride + dy) as isize - g.pad_top as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for dx in 0..kw {
                    let ix = (ox * stride + dx) as isize - g.pad_left as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let s = (iy as usize * w + ix as usize) * cin;
                    let d = (dy * kw + dx) * cin;
                    row[d..d + cin].copy_from_slice(&src[s..s + cin]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(
    cols: &[T],
    (h, w, cin): (usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    g: ConvGeometry,
) -> Vec<T> {
    let patch = kh * kw * cin;
    let mut out = vec![T::zero(); h * w * cin];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &cols[(oy * g.out_w + ox) * patch..][..patch];
            for dy in 0..kh {
                let iy = (oy * stride + dy) as isize - g.pad_top as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for dx in 0..kw {
                    let ix = (ox * stride + dx) as isize - g.pad_left as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let s = (iy as usize * w + ix as usize) * cin;
                    let d = (dy * kw + dx) * cin;
                    for c in 0..cin {
                        out[s + c] = out[s + c] + row[d + c];
                    }
                }
            }
        }
    }
    out
}

/// Cross-correlation of an `H×W×Cin` input with `k×k×Cin×Cout` kernels.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let [h, w, cin, kh, kw, cout] = conv_dims(input, kernels)?;
    let g = conv_geometry((h, w), (kh, kw), stride, padding)?;
    let cols = im2col(input, kh, kw, stride, g);
    let mut out = vec![T::zero(); g.out_h * g.out_w * cout];
    T::gemm(
        g.out_h * g.out_w,
        kh * kw * cin,
        cout,
        &cols,
        false,
        kernels.data(),
        false,
        T::zero(),
        &mut out,
    );
    Ok(Tensor::from_parts(vec![g.out_h, g.out_w, cout], out))
}

/// Gradients of `conv2d` with respect to its input and kernels.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [h, w, cin, kh, kw, cout] = conv_dims(input, kernels)?;
    let g = conv_geometry((h, w), (kh, kw), stride, padding)?;
    let p = g.out_h * g.out_w;
    let patch = kh * kw * cin;
    let cols = im2col(input, kh, kw, stride, g);

    let mut grad_k = vec![T::zero(); patch * cout];
    T::gemm(patch, p, cout, &cols, true, grad_out.data(), false, T::zero(), &mut grad_k);

    let mut grad_cols = vec![T::zero(); p * patch];
    T::gemm(p, cout, patch, grad_out.data(), false, kernels.data(), true, T::zero(), &mut grad_cols);
    let grad_in = col2im(&grad_cols, (h, w, cin), kh, kw, stride, g);

    Ok((
        Tensor::from_parts(input.shape().to_vec(), grad_in),
        Tensor::from_parts(kernels.shape().to_vec(), grad_k),
    ))
}

/// Per-channel spatial sum of an `H×W×K` map.
pub fn gap<T: Real>(map: &Tensor<T>) -> Result<Tensor<T>> {
    map.expect_rank(3)?;
    let k = map.shape()[2];
    let mut out = vec![T::zero(); k];
    for cell in map.data().chunks_exact(k.max(1)) {
        for (o, &v) in out.iter_mut().zip(cell) {
            *o = *o + v;
        }
    }
    Ok(Tensor::from_parts(vec![k], out))
}

/// One bilinear sample position along an axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample<T> {
    pub lo: usize,
    pub hi: usize,
    pub frac: T,
}

/// Source sample positions for one axis of `crop_and_resize`.
pub fn sample_positions<T: Real>(start: f32, end: f32, in_len: usize, out_len: usize) -> Vec<Sample<T>> {
    let start = T::of_f64(start as f64);
    let end = T::of_f64(end as f64);
    let extent = T::of_f64((in_len - 1) as f64);
    let scale = if out_len > 1 {
        (end - start) * extent / T::of_f64((out_len - 1) as f64)
    } else {
        T::zero()
    };
    (0..out_len)
        .map(|i| {
            let pos = if out_len > 1 {
                start * extent + T::of_f64(i as f64) * scale
            } else {
                T::of_f64(0.5) * (start + end) * extent
            };
            let pos = pos.max(T::zero()).min(extent);
            let lo = pos.floor();
            let hi = pos.ceil();
            Sample { lo: lo.as_f64() as usize, hi: hi.as_f64() as usize, frac: pos - lo }
        })
        .collect()
}

/// Bilinear crop of `map` to `out_h×out_w` inside `roi`.
pub fn crop_and_resize<T: Real>(
    map: &Tensor<T>,
    roi: &RoiBox,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    map.expect_rank(3)?;
    roi.validate()?;
    let [h, w, k] = [map.shape()[0], map.shape()[1], map.shape()[2]];
    if h == 0 || w == 0 {
        return Err(Error::Dimension("empty map".into()));
    }
    let ys = sample_positions::<T>(roi.y1, roi.y2, h, out_h);
    let xs = sample_positions::<T>(roi.x1, roi.x2, w, out_w);
    let src = map.data();
    let mut out = Vec::with_capacity(out_h * out_w * k);
    for sy in &ys {
        for sx in &xs {
            for c in 0..k {
                let tl = src[(sy.lo * w + sx.lo) * k + c];
                let tr = src[(sy.lo * w + sx.hi) * k + c];
                let bl = src[(sy.hi * w + sx.lo) * k + c];
                let br = src[(sy.hi * w + sx.hi) * k + c];
                let top = tl + (tr - tl) * sx.frac;
                let bottom = bl + (br - bl) * sx.frac;
                out.push(top + (bottom - top) * sy.frac);
            }
        }
    }
    Ok(Tensor::from_parts(vec![out_h, out_w, k], out))
}

pub fn crop_and_resize_backward<T: Real>(
    map_shape: &[usize],
    roi: &RoiBox,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let [h, w, k] = [map_shape[0], map_shape[1], map_shape[2]];
    let (out_h, out_w) = (grad_out.shape()[0], grad_out.shape()[1]);
    let ys = sample_positions::<T>(roi.y1, roi.y2, h, out_h);
    let xs = sample_positions::<T>(roi.x1, roi.x2, w, out_w);
    let mut grad = vec![T::zero(); h * w * k];
    let g = grad_out.data();
    let one = T::one();
    for (i, sy) in ys.iter().enumerate() {
        for (j, sx) in xs.iter().enumerate() {
            let weights = [
                (sy.lo, sx.lo, (one - sy.frac) * (one - sx.frac)),
                (sy.lo, sx.hi, (one - sy.frac) * sx.frac),
                (sy.hi, sx.lo, sy.frac * (one - sx.frac)),
                (sy.hi, sx.hi, sy.frac * sx.frac),
            ];
            for c in 0..k {
                let go = g[(i * out_w + j) * k + c];
                for &(y, x, wgt) in &weights {
                    let idx = (y * w + x) * k + c;
                    grad[idx] = grad[idx] + go * wgt;
                }
            }
        }
    }
    Tensor::from_parts(map_shape.to_vec(), grad)
}

pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(logits)[label]`, computed stably.
pub fn softmax_cross_entropy<T: Real>(logits: &[T], label: usize) -> Result<T> {
    if logits.len() < 2 {
        return Err(Error::Dimension(format!("need at least 2 logits, got {}", logits.len())));
    }
    if label >= logits.len() {
        return Err(Error::Index { index: label, len: logits.len() });
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    Ok(lse - logits[label])
}
