//! 2-D convolution as im2col + GEMM in both directions.
//!
//! candle's CPU backward for convolutions goes through a direct
//! transposed-convolution loop that dominates training time for
//! bottleneck networks; this op keeps forward and both gradients on GEMM.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};

trait Float: Copy + Default + std::ops::AddAssign + 'static {
    /// c = alpha * a·b + beta * c, all row/column strides explicit.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
    );
    fn zero() -> Self;
    fn one() -> Self;
}

impl Float for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
    }
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
}

impl Float for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
    }
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> candle_core::Result<Self> {
        let (&[batch, in_ch, h, wd], &[out_ch, w_in, k, k2]) = (x, w) else {
            candle_core::bail!("conv2d expects 4-d input and kernel, got {x:?} and {w:?}")
        };
        if w_in != in_ch || k != k2 {
            candle_core::bail!("conv2d kernel {w:?} incompatible with input {x:?}")
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            candle_core::bail!("conv2d input {x:?} smaller than kernel {k}")
        }
        Ok(Self {
            batch,
            in_ch,
            h,
            w: wd,
            out_ch,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (wd + 2 * pad - k) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    fn in_len(&self) -> usize {
        self.in_ch * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.out_ch * self.oh * self.ow
    }

    /// Visits (column-row, column-col, input offset) for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let n = self.col_cols();
        for c in 0..self.in_ch {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(
                                row * n + oy * self.ow + ox,
                                (c * self.h + iy as usize) * self.w + ix as usize,
                            );
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Float>(&self, x: &[T], cols: &mut [T]) {
        cols.fill(T::zero());
        self.for_each_tap(|col, src| cols[col] = x[src]);
    }

    fn col2im<T: Float>(&self, cols: &[T], x: &mut [T]) {
        self.for_each_tap(|col, dst| x[dst] += cols[col]);
    }
}

fn slice<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&v[start..end]),
        None => candle_core::bail!("conv2d op needs contiguous inputs"),
    }
}

fn forward<T: Float>(g: &Geometry, x: &[T], w: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_len()];
    let (m, k, n) = (g.out_ch, g.col_rows(), g.col_cols());
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * n }];
    for b in 0..g.batch {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let src = if g.is_pointwise() {
            xb
        } else {
            g.im2col(xb, &mut cols);
            &cols
        };
        let ob = &mut out[b * g.out_len()..(b + 1) * g.out_len()];
        unsafe {
            T::gemm(
                m, k, n,
                w.as_ptr(), k as isize, 1,
                src.as_ptr(), n as isize, 1,
                T::zero(), ob.as_mut_ptr(), n as isize,
            );
        }
    }
    out
}

fn input_grad<T: Float>(g: &Geometry, grad: &[T], w: &[T]) -> Vec<T> {
    let mut gx = vec![T::zero(); g.batch * g.in_len()];
    let (oc, k, n) = (g.out_ch, g.col_rows(), g.col_cols());
    let mut gcols = vec![T::zero(); k * n];
    for b in 0..g.batch {
        let gb = &grad[b * g.out_len()..(b + 1) * g.out_len()];
        let gxb = &mut gx[b * g.in_len()..(b + 1) * g.in_len()];
        let dst = if g.is_pointwise() { &mut *gxb } else { &mut gcols[..] };
        // Wᵀ (k × oc) · G (oc × n)
        unsafe {
            T::gemm(
                k, oc, n,
                w.as_ptr(), 1, k as isize,
                gb.as_ptr(), n as isize, 1,
                T::zero(), dst.as_mut_ptr(), n as isize,
            );
        }
        if !g.is_pointwise() {
            g.col2im(&gcols, gxb);
        }
    }
    gx
}

fn weight_grad<T: Float>(g: &Geometry, x: &[T], grad: &[T]) -> Vec<T> {
    let (oc, k, n) = (g.out_ch, g.col_rows(), g.col_cols());
    let mut gw = vec![T::zero(); oc * k];
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * n }];
    for b in 0..g.batch {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let src = if g.is_pointwise() {
            xb
        } else {
            g.im2col(xb, &mut cols);
            &cols
        };
        let gb = &grad[b * g.out_len()..(b + 1) * g.out_len()];
        // G (oc × n) · colsᵀ (n × k), accumulated over the batch
        unsafe {
            T::gemm(
                oc, n, k,
                gb.as_ptr(), n as isize, 1,
                src.as_ptr(), 1, n as isize,
                if b == 0 { T::zero() } else { T::one() },
                gw.as_mut_ptr(), k as isize,
            );
        }
    }
    gw
}

macro_rules! dispatch2 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let ($a, $b) = (slice(a, $l1)?, slice(b, $l2)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let ($a, $b) = (slice(a, $l1)?, slice(b, $l2)?);
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("conv2d op supports matching f32/f64 inputs only"),
        }
    };
}

struct ConvForward {
    stride: usize,
    pad: usize,
}

impl CustomOp2 for ConvForward {
    fn name(&self) -> &'static str {
        "gemm-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), l2.dims(), self.stride, self.pad)?;
        let out = dispatch2!(s1, l1, s2, l2, |x, w| forward(&g, x, w));
        Ok((out, Shape::from((g.batch, g.out_ch, g.oh, g.ow))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let geometry = Geometry::new(x.dims(), w.dims(), self.stride, self.pad)?;
        let gx = grad.apply_op2_no_bwd(w, &ConvInputGrad(geometry))?;
        let gw = x.apply_op2_no_bwd(&grad, &ConvWeightGrad(geometry))?;
        Ok((Some(gx), Some(gw)))
    }
}

struct ConvInputGrad(Geometry);

impl CustomOp2 for ConvInputGrad {
    fn name(&self) -> &'static str {
        "gemm-conv2d-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = dispatch2!(s1, l1, s2, l2, |grad, w| input_grad(g, grad, w));
        Ok((out, Shape::from((g.batch, g.in_ch, g.h, g.w))))
    }
}

struct ConvWeightGrad(Geometry);

impl CustomOp2 for ConvWeightGrad {
    fn name(&self) -> &'static str {
        "gemm-conv2d-weight-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = dispatch2!(s1, l1, s2, l2, |x, grad| weight_grad(g, x, grad));
        Ok((out, Shape::from((g.out_ch, g.in_ch, g.k, g.k))))
    }
}

/// Square-kernel convolution of (B, C, H, W) by (OC, C, K, K).
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(
        &kernel.contiguous()?,
        ConvForward {
            stride,
            pad: padding,
        },
    )
}
