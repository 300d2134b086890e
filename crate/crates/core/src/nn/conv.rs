//! 2-D convolution as a candle custom op backed by im2col + GEMM.
//!
//! Each image is processed independently and the batch is accumulated in a fixed
//! order, so results are bit-reproducible and do not depend on batch composition
//! for the forward pass.

use candle_core::{CpuStorage, CustomOp2, Layout, Result, Shape, Tensor, WithDType};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    in_ch: usize,
    height: usize,
    width: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Valid output columns `[lo, hi)` for kernel column `kx`.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let wo = self.out_w();
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        let hi = if self.width + self.pad > kx {
            ((self.width + self.pad - kx - 1) / self.stride + 1).min(wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

trait Gemm: WithDType + Copy + Default + std::ops::AddAssign {
    /// `c = alpha * a * b + beta * c` with explicit strides.
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
        csc: isize,
    );

    fn slice(s: &CpuStorage) -> Result<&[Self]>;
    fn storage(v: Vec<Self>) -> CpuStorage;
}

impl Gemm for f32 {
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
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn slice(s: &CpuStorage) -> Result<&[f32]> {
        s.as_slice::<f32>()
    }

    fn storage(v: Vec<f32>) -> CpuStorage {
        CpuStorage::F32(v)
    }
}

impl Gemm for f64 {
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
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn slice(s: &CpuStorage) -> Result<&[f64]> {
        s.as_slice::<f64>()
    }

    fn storage(v: Vec<f64>) -> CpuStorage {
        CpuStorage::F64(v)
    }
}

fn im2col<T: Gemm>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let n = ho * wo;
    let zero = T::default();
    for c in 0..g.in_ch {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let d = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        d.fill(zero);
                        continue;
                    }
                    let src = &x[(c * g.height + iy as usize) * g.width..][..g.width];
                    d[..lo].fill(zero);
                    d[hi..].fill(zero);
                    if g.stride == 1 {
                        let s0 = lo + kx - g.pad;
                        d[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                    } else {
                        for (ox, v) in d.iter_mut().enumerate().take(hi).skip(lo) {
                            *v = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Gemm>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let n = ho * wo;
    for c in 0..g.in_ch {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * n..(row + 1) * n];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.height + iy as usize) * g.width..][..g.width];
                    let s = &src[oy * wo..(oy + 1) * wo];
                    for ox in lo..hi {
                        dst[ox * g.stride + kx - g.pad] += s[ox];
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T: Gemm>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&T::slice(s)?[start..end]),
        None => candle_core::bail!("conv2d expects contiguous inputs"),
    }
}

/// Forward: `(x: N x Cin x H x W, w: Cout x Cin x K x K) -> N x Cout x Ho x Wo`.
struct Conv2dForward {
    stride: usize,
    pad: usize,
}

impl Conv2dForward {
    fn run<T: Gemm>(&self, xs: &CpuStorage, xl: &Layout, ws: &CpuStorage, wl: &Layout) -> Result<(CpuStorage, Shape)> {
        let x = contiguous::<T>(xs, xl)?;
        let w = contiguous::<T>(ws, wl)?;
        let (batch, in_ch, height, width) = xl.shape().dims4()?;
        let (out_ch, w_in, kernel, k2) = wl.shape().dims4()?;
        if w_in != in_ch || kernel != k2 {
            candle_core::bail!("conv2d weight {:?} does not match input {:?}", wl.shape(), xl.shape());
        }
        if height + 2 * self.pad < kernel || width + 2 * self.pad < kernel {
            candle_core::bail!("conv2d input {:?} smaller than kernel {kernel}", xl.shape());
        }
        let g = Geometry {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kernel,
            stride: self.stride,
            pad: self.pad,
        };
        let (kk, n) = (g.patch_len(), g.positions());
        let mut out = vec![T::default(); batch * out_ch * n];
        let mut cols = vec![T::default(); kk * n];
        let image = in_ch * height * width;
        for b in 0..batch {
            im2col(&x[b * image..(b + 1) * image], &g, &mut cols);
            let y = &mut out[b * out_ch * n..(b + 1) * out_ch * n];
            unsafe {
                T::gemm(
                    out_ch, kk, n,
                    w.as_ptr(), kk as isize, 1,
                    cols.as_ptr(), n as isize, 1,
                    T::default(),
                    y.as_mut_ptr(), n as isize, 1,
                );
            }
        }
        Ok((T::storage(out), Shape::from((batch, out_ch, g.out_h(), g.out_w()))))
    }
}

impl CustomOp2 for Conv2dForward {
    fn name(&self) -> &'static str {
        "conv2d-im2col"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        match s1 {
            CpuStorage::F32(_) => self.run::<f32>(s1, l1, s2, l2),
            CpuStorage::F64(_) => self.run::<f64>(s1, l1, s2, l2),
            _ => candle_core::bail!("conv2d supports f32 and f64 only"),
        }
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, h, wd) = x.dims4()?;
        // Inputs with no graph behind them (images, detached tensors) need no dx.
        let dx = if x.track_op() {
            Some(grad.apply_op2_no_bwd(
                w,
                &Conv2dInputGrad {
                    stride: self.stride,
                    pad: self.pad,
                    height: h,
                    width: wd,
                },
            )?)
        } else {
            None
        };
        let (_, _, k, _) = w.dims4()?;
        let dw = x.apply_op2_no_bwd(
            &grad,
            &Conv2dWeightGrad {
                stride: self.stride,
                pad: self.pad,
                kernel: k,
            },
        )?;
        Ok((dx, Some(dw)))
    }
}

/// `(dy: N x Cout x Ho x Wo, w) -> dx: N x Cin x H x W`.
struct Conv2dInputGrad {
    stride: usize,
    pad: usize,
    height: usize,
    width: usize,
}

impl Conv2dInputGrad {
    fn run<T: Gemm>(&self, gs: &CpuStorage, gl: &Layout, ws: &CpuStorage, wl: &Layout) -> Result<(CpuStorage, Shape)> {
        let dy = contiguous::<T>(gs, gl)?;
        let w = contiguous::<T>(ws, wl)?;
        let (batch, out_ch, _, _) = gl.shape().dims4()?;
        let (_, in_ch, kernel, _) = wl.shape().dims4()?;
        let g = Geometry {
            batch,
            in_ch,
            height: self.height,
            width: self.width,
            out_ch,
            kernel,
            stride: self.stride,
            pad: self.pad,
        };
        let (kk, n) = (g.patch_len(), g.positions());
        let image = in_ch * self.height * self.width;
        let mut dx = vec![T::default(); batch * image];
        let mut cols = vec![T::default(); kk * n];
        for b in 0..batch {
            let g_b = &dy[b * out_ch * n..(b + 1) * out_ch * n];
            // cols = w^T (kk x out_ch) * dy_b (out_ch x n)
            unsafe {
                T::gemm(
                    kk, out_ch, n,
                    w.as_ptr(), 1, kk as isize,
                    g_b.as_ptr(), n as isize, 1,
                    T::default(),
                    cols.as_mut_ptr(), n as isize, 1,
                );
            }
            col2im(&cols, &g, &mut dx[b * image..(b + 1) * image]);
        }
        Ok((T::storage(dx), Shape::from((batch, in_ch, self.height, self.width))))
    }
}

impl CustomOp2 for Conv2dInputGrad {
    fn name(&self) -> &'static str {
        "conv2d-input-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        match s1 {
            CpuStorage::F32(_) => self.run::<f32>(s1, l1, s2, l2),
            CpuStorage::F64(_) => self.run::<f64>(s1, l1, s2, l2),
            _ => candle_core::bail!("conv2d supports f32 and f64 only"),
        }
    }
}

/// `(x, dy) -> dw: Cout x Cin x K x K`, accumulated over the batch in order.
struct Conv2dWeightGrad {
    stride: usize,
    pad: usize,
    kernel: usize,
}

impl Conv2dWeightGrad {
    fn run<T: Gemm>(&self, xs: &CpuStorage, xl: &Layout, gs: &CpuStorage, gl: &Layout) -> Result<(CpuStorage, Shape)> {
        let x = contiguous::<T>(xs, xl)?;
        let dy = contiguous::<T>(gs, gl)?;
        let (batch, in_ch, height, width) = xl.shape().dims4()?;
        let (_, out_ch, _, _) = gl.shape().dims4()?;
        let g = Geometry {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        };
        let (kk, n) = (g.patch_len(), g.positions());
        let image = in_ch * height * width;
        let mut dw = vec![T::default(); out_ch * kk];
        let mut cols = vec![T::default(); kk * n];
        for b in 0..batch {
            im2col(&x[b * image..(b + 1) * image], &g, &mut cols);
            let g_b = &dy[b * out_ch * n..(b + 1) * out_ch * n];
            // dw += dy_b (out_ch x n) * cols^T (n x kk)
            let beta = if b == 0 { T::default() } else { T::from_f64(1.0) };
            unsafe {
                T::gemm(
                    out_ch, n, kk,
                    g_b.as_ptr(), n as isize, 1,
                    cols.as_ptr(), 1, n as isize,
                    beta,
                    dw.as_mut_ptr(), kk as isize, 1,
                );
            }
        }
        Ok((T::storage(dw), Shape::from((out_ch, in_ch, self.kernel, self.kernel))))
    }
}

impl CustomOp2 for Conv2dWeightGrad {
    fn name(&self) -> &'static str {
        "conv2d-weight-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        match s1 {
            CpuStorage::F32(_) => self.run::<f32>(s1, l1, s2, l2),
            CpuStorage::F64(_) => self.run::<f64>(s1, l1, s2, l2),
            _ => candle_core::bail!("conv2d supports f32 and f64 only"),
        }
    }
}

/// Differentiable square-kernel convolution without bias.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let x = x.contiguous()?;
    let weight = weight.contiguous()?;
    x.apply_op2(&weight, Conv2dForward { stride, pad })
}
