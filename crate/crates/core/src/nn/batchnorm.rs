//! Fused training-mode batch normalization.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, Layout, Shape, Tensor};

trait Real: Copy + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Real for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

fn contiguous<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&v[start..end]),
        None => candle_core::bail!("batch norm op needs contiguous inputs"),
    }
}

fn dims(l: &Layout) -> candle_core::Result<(usize, usize, usize)> {
    let &[b, c, h, w] = l.dims() else {
        candle_core::bail!("batch norm expects (B, C, H, W), got {:?}", l.dims())
    };
    Ok((b, c, h * w))
}

/// Per-channel (mean, biased variance), accumulated in f64.
fn channel_stats<T: Real>(x: &[T], b: usize, c: usize, hw: usize) -> Vec<(f64, f64)> {
    let n = (b * hw) as f64;
    (0..c)
        .map(|ch| {
            let mut sum = 0.0;
            for bi in 0..b {
                let base = (bi * c + ch) * hw;
                sum += x[base..base + hw].iter().map(|v| v.to_f64()).sum::<f64>();
            }
            let mean = sum / n;
            let mut sq = 0.0;
            for bi in 0..b {
                let base = (bi * c + ch) * hw;
                sq += x[base..base + hw]
                    .iter()
                    .map(|v| {
                        let d = v.to_f64() - mean;
                        d * d
                    })
                    .sum::<f64>();
            }
            (mean, sq / n)
        })
        .collect()
}

/// Batch statistics as a (2, C) tensor: row 0 mean, row 1 biased variance.
struct BatchStats;

impl CustomOp1 for BatchStats {
    fn name(&self) -> &'static str {
        "batch-stats"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, hw) = dims(l)?;
        fn run<T: Real>(x: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
            let stats = channel_stats(x, b, c, hw);
            stats
                .iter()
                .map(|s| T::from_f64(s.0))
                .chain(stats.iter().map(|s| T::from_f64(s.1)))
                .collect()
        }
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(run(contiguous(v, l)?, b, c, hw)),
            CpuStorage::F64(v) => CpuStorage::F64(run(contiguous(v, l)?, b, c, hw)),
            _ => candle_core::bail!("batch norm supports f32/f64 only"),
        };
        Ok((out, Shape::from((2, c))))
    }
}

struct BatchNormTrain {
    eps: f64,
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, hw) = dims(l1)?;
        let eps = self.eps;
        fn run<T: Real>(x: &[T], g: &[T], beta: &[T], b: usize, c: usize, hw: usize, eps: f64) -> Vec<T> {
            let stats = channel_stats(x, b, c, hw);
            let mut out = Vec::with_capacity(x.len());
            for bi in 0..b {
                for (ch, &(mean, var)) in stats.iter().enumerate() {
                    let scale = g[ch].to_f64() / (var + eps).sqrt();
                    let shift = beta[ch].to_f64() - mean * scale;
                    let base = (bi * c + ch) * hw;
                    out.extend(x[base..base + hw].iter().map(|v| T::from_f64(v.to_f64() * scale + shift)));
                }
            }
            out
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(bb)) => CpuStorage::F32(run(
                contiguous(x, l1)?,
                contiguous(g, l2)?,
                contiguous(bb, l3)?,
                b,
                c,
                hw,
                eps,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(bb)) => CpuStorage::F64(run(
                contiguous(x, l1)?,
                contiguous(g, l2)?,
                contiguous(bb, l3)?,
                b,
                c,
                hw,
                eps,
            )),
            _ => candle_core::bail!("batch norm supports matching f32/f64 inputs only"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (_, c, _, _) = x.dims4()?;
        let n = x.elem_count();
        let packed = x.apply_op3_no_bwd(gamma, &grad.contiguous()?, &BatchNormTrainGrad { eps: self.eps })?;
        let dx = packed.narrow(0, 0, n)?.reshape(x.shape())?;
        let dgamma = packed.narrow(0, n, c)?;
        let dbeta = packed.narrow(0, n + c, c)?;
        Ok((Some(dx), Some(dgamma), Some(dbeta)))
    }
}

/// Gradients of training-mode batch norm packed as [dx…, dγ…, dβ…].
struct BatchNormTrainGrad {
    eps: f64,
}

impl CustomOp3 for BatchNormTrainGrad {
    fn name(&self) -> &'static str {
        "batch-norm-train-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, hw) = dims(l1)?;
        let eps = self.eps;
        fn run<T: Real>(x: &[T], g: &[T], dy: &[T], b: usize, c: usize, hw: usize, eps: f64) -> Vec<T> {
            let stats = channel_stats(x, b, c, hw);
            let n = (b * hw) as f64;
            let mut dx = vec![T::from_f64(0.0); x.len()];
            let mut dgamma = Vec::with_capacity(c);
            let mut dbeta = Vec::with_capacity(c);
            for (ch, &(mean, var)) in stats.iter().enumerate() {
                let inv_std = 1.0 / (var + eps).sqrt();
                let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
                for bi in 0..b {
                    let base = (bi * c + ch) * hw;
                    for i in base..base + hw {
                        let xhat = (x[i].to_f64() - mean) * inv_std;
                        sum_dy += dy[i].to_f64();
                        sum_dy_xhat += dy[i].to_f64() * xhat;
                    }
                }
                let k = g[ch].to_f64() * inv_std;
                for bi in 0..b {
                    let base = (bi * c + ch) * hw;
                    for i in base..base + hw {
                        let xhat = (x[i].to_f64() - mean) * inv_std;
                        dx[i] = T::from_f64(k * (dy[i].to_f64() - sum_dy / n - xhat * sum_dy_xhat / n));
                    }
                }
                dgamma.push(T::from_f64(sum_dy_xhat));
                dbeta.push(T::from_f64(sum_dy));
            }
            dx.extend(dgamma);
            dx.extend(dbeta);
            dx
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(dy)) => CpuStorage::F32(run(
                contiguous(x, l1)?,
                contiguous(g, l2)?,
                contiguous(dy, l3)?,
                b,
                c,
                hw,
                eps,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(dy)) => CpuStorage::F64(run(
                contiguous(x, l1)?,
                contiguous(g, l2)?,
                contiguous(dy, l3)?,
                b,
                c,
                hw,
                eps,
            )),
            _ => candle_core::bail!("batch norm supports matching f32/f64 inputs only"),
        };
        Ok((out, Shape::from(b * c * hw + 2 * c)))
    }
}

/// Normalizes with batch statistics; returns the output and the (mean,
/// biased variance) pair as a detached (2, C) tensor.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> candle_core::Result<(Tensor, Tensor)> {
    let x = x.contiguous()?;
    let stats = x.detach().apply_op1_no_bwd(&BatchStats)?;
    let y = x.apply_op3(gamma, beta, BatchNormTrain { eps })?;
    Ok((y, stats))
}
