//! Layers and differentiable tensor operations shared by every network.

mod batchnorm;
mod conv;
mod params;

use std::cell::RefCell;

use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub use conv::conv2d;
pub use params::{Init, ParamPath, ParamStore};

/// Forward-pass mode. Training enables batch statistics and dropout, and
/// owns the dropout random stream.
pub struct Ctx {
    train: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl Ctx {
    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn eval() -> Self {
        Self {
            train: false,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        p: ParamPath<'_>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = p.param("weight", (out_ch, in_ch, kernel, kernel), Init::KaimingFanOut)?;
        let bias = if bias {
            Some(p.param("bias", out_ch, Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.padding)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Batch normalization over (N, H, W) with running statistics.
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: candle_core::Var,
    running_var: candle_core::Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(p: ParamPath<'_>, channels: usize) -> Result<Self> {
        let weight = p.param("weight", channels, Init::Const(1.0))?;
        let bias = p.param("bias", channels, Init::Const(0.0))?;
        p.buffer("running_mean", channels, Init::Const(0.0))?;
        p.buffer("running_var", channels, Init::Const(1.0))?;
        Ok(Self {
            weight,
            bias,
            running_mean: p.var("running_mean").expect("just created"),
            running_var: p.var("running_var").expect("just created"),
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if ctx.train {
            let (y, stats) = batchnorm::batch_norm_train(x, &self.weight, &self.bias, self.eps)?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (stats.get(0)? * m)?)?;
            let new_var =
                ((self.running_var.as_tensor() * (1.0 - m))? + (stats.get(1)? * (m * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            return Ok(y);
        }
        let inv_std = (self.running_var.as_tensor() + self.eps)?.sqrt()?.recip()?;
        let scale = (&self.weight * inv_std)?;
        let shift = (&self.bias - (self.running_mean.as_tensor() * &scale)?)?;
        Ok(x
            .broadcast_mul(&scale.reshape((1, c, 1, 1))?)?
            .broadcast_add(&shift.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(p: ParamPath<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = p.param("weight", (out_dim, in_dim), Init::Uniform { bound })?;
        let bias = p.param("bias", out_dim, Init::Uniform { bound })?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.relu()?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// (B, C, H, W) → (B, C).
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean((2, 3))?)
}

/// Max pooling with padding, built from strided index selections so the
/// backward pass routes the gradient to the window maximum.
pub fn max_pool2d(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let x = if padding > 0 {
        pad_constant(x, padding, f64::NEG_INFINITY)?
    } else {
        x.clone()
    };
    let out_h = (h + 2 * padding - kernel) / stride + 1;
    let out_w = (w + 2 * padding - kernel) / stride + 1;
    let mut out: Option<Tensor> = None;
    for dy in 0..kernel {
        let rows = strided_index(dy, stride, out_h, x.device())?;
        let xr = x.index_select(&rows, 2)?;
        for dx in 0..kernel {
            let cols = strided_index(dx, stride, out_w, x.device())?;
            let win = xr.index_select(&cols, 3)?;
            out = Some(match out {
                None => win,
                Some(acc) => acc.maximum(&win)?,
            });
        }
    }
    Ok(out.expect("kernel >= 1"))
}

fn strided_index(start: usize, stride: usize, len: usize, device: &Device) -> Result<Tensor> {
    let idx: Vec<u32> = (0..len).map(|i| (start + i * stride) as u32).collect();
    Ok(Tensor::from_vec(idx, len, device)?)
}

fn pad_constant(x: &Tensor, pad: usize, value: f64) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let fill = |hh: usize, ww: usize| -> Result<Tensor> {
        Ok(Tensor::zeros((b, c, hh, ww), x.dtype(), x.device())?.affine(1.0, value)?)
    };
    let side = fill(h, pad)?;
    let x = Tensor::cat(&[&side, x, &side], 3)?;
    let top = fill(pad, w + 2 * pad)?;
    Ok(Tensor::cat(&[&top, &x, &top], 2)?)
}

/// Nearest-neighbour 2× upsampling: every value becomes a 2×2 block.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Row-stochastic bilinear interpolation matrix (align-corners convention),
/// shape (out_len, in_len).
pub fn bilinear_weights(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    for i in 0..out_len {
        let src = if out_len > 1 && in_len > 1 {
            i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
        } else {
            0.0
        };
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        m[i * in_len + i0] += 1.0 - frac;
        m[i * in_len + i1] += frac;
    }
    m
}

/// Differentiable bilinear resize of (B, C, H, W) to (B, C, out_h, out_w),
/// expressed as two matrix products.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let aw = Tensor::from_vec(bilinear_weights(w, out_w), (out_w, w), dev)?.to_dtype(x.dtype())?;
    let ah = Tensor::from_vec(bilinear_weights(h, out_h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let y = x.broadcast_matmul(&aw.t()?)?; // (B, C, H, out_w)
    let y = ah.broadcast_matmul(&y)?; // (B, C, out_h, out_w)
    Ok(y)
}

/// Inverted dropout; identity outside training or at rate 0.
pub fn dropout(x: &Tensor, rate: f64, ctx: &Ctx) -> Result<Tensor> {
    if !ctx.train || rate <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let n = x.elem_count();
    let mask: Vec<f32> = {
        let mut rng = ctx.rng.borrow_mut();
        (0..n)
            .map(|_| if rng.gen::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 })
            .collect()
    };
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    Ok(log_softmax(logits)?.exp()?)
}

/// One-hot rows (N, C) in the given dtype.
pub fn one_hot(labels: &[usize], classes: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut v = vec![0f32; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        v[i * classes + l] = 1.0;
    }
    Ok(Tensor::from_vec(v, (labels.len(), classes), device)?.to_dtype(dtype)?)
}

/// Mean categorical cross-entropy of (N, C) logits against class labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (_, c) = logits.dims2()?;
    let targets = one_hot(labels, c, logits.dtype(), logits.device())?;
    let nll = (log_softmax(logits)? * targets)?.sum(1)?.neg()?;
    Ok(nll.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(v: Vec<f64>, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn nearest_upsample_repeats_blocks() {
        let x = t4(vec![1.0, 2.0, 3.0, 4.0], (1, 1, 2, 2));
        let y = upsample_nearest2x(&x).unwrap();
        let rows = y.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(
            rows,
            vec![
                vec![1.0, 1.0, 2.0, 2.0],
                vec![1.0, 1.0, 2.0, 2.0],
                vec![3.0, 3.0, 4.0, 4.0],
                vec![3.0, 3.0, 4.0, 4.0]
            ]
        );
    }

    #[test]
    fn max_pool_matches_loop_and_routes_gradient() {
        let vals: Vec<f64> = (0..30).map(|i| ((i * 37) % 17) as f64 - 8.0).collect();
        let x = candle_core::Var::from_tensor(&t4(vals.clone(), (1, 1, 5, 6))).unwrap();
        let y = max_pool2d(x.as_tensor(), 3, 2, 1).unwrap();
        assert_eq!(y.dims(), &[1, 1, 3, 3]);
        let got = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mut argmax = Vec::new();
        for oy in 0..3 {
            for ox in 0..3 {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = ((oy * 2 + ky) as isize - 1, (ox * 2 + kx) as isize - 1);
                        if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                            continue;
                        }
                        let v = vals[iy as usize * 6 + ix as usize];
                        if v > best {
                            best = v;
                            at = iy as usize * 6 + ix as usize;
                        }
                    }
                }
                assert_eq!(got[oy * 3 + ox], best);
                argmax.push(at);
            }
        }
        let grads = y.sum_all().unwrap().backward().unwrap();
        let g = grads.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mut want = vec![0.0; 30];
        for a in argmax {
            want[a] += 1.0;
        }
        // ties can split the gradient; the test data has unique window maxima
        assert_eq!(g, want);
    }

    #[test]
    fn bilinear_preserves_constants_and_corners() {
        let x = t4((0..12).map(|i| i as f64).collect(), (1, 1, 3, 4));
        let y = resize_bilinear(&x, 5, 7).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v[0], 0.0);
        assert!((v[34] - 11.0).abs() < 1e-12);
        let c = t4(vec![2.5; 12], (1, 1, 3, 4));
        let yc = resize_bilinear(&c, 6, 9).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(yc.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn log_softmax_is_normalized() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [1000.0, 0.0, -1000.0]], &Device::Cpu).unwrap();
        let p = softmax(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        for s in p {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let x = t4(vec![1.0; 16], (1, 1, 4, 4));
        let y = dropout(&x, 0.5, &Ctx::eval()).unwrap();
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![1.0; 16]);
        let y = dropout(&x, 0.5, &Ctx::train(1)).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
    }
}
