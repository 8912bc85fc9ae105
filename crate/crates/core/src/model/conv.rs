//! Stride-1 "same" 2-D convolution as a candle custom op.
//!
//! Forward and backward both go through im2col + GEMM (`matrixmultiply`),
//! which on CPU is several times faster than the generic path, notably for
//! the weight gradient.

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Result, Shape, Tensor, WithDType};

trait Gemm: WithDType + Copy + Default + std::ops::AddAssign {
    /// `c = a (m x k) * b (k x n) + beta * c`, with explicit strides.
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
    const ZERO: Self;
    const ONE: Self;
    fn slice(s: &CpuStorage) -> Option<&[Self]>;
    fn wrap(v: Vec<Self>) -> CpuStorage;
}

macro_rules! impl_gemm {
    ($t:ty, $f:path, $variant:ident) => {
        impl Gemm for $t {
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
            ) {
                $f(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1)
            }
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn slice(s: &CpuStorage) -> Option<&[Self]> {
                match s {
                    CpuStorage::$variant(v) => Some(v),
                    _ => None,
                }
            }
            fn wrap(v: Vec<Self>) -> CpuStorage {
                CpuStorage::$variant(v)
            }
        }
    };
}

impl_gemm!(f32, matrixmultiply::sgemm, F32);
impl_gemm!(f64, matrixmultiply::dgemm, F64);

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

impl Geometry {
    fn ck(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn hw(&self) -> usize {
        self.h * self.w
    }
}

fn im2col<T: Gemm>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let (h, w, k, hw) = (g.h, g.w, g.k, g.hw());
    for ci in 0..g.c_in {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    let drow = &mut dst[oy * w..(oy + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::ZERO } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Gemm>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let (h, w, k, hw) = (g.h, g.w, g.k, g.hw());
    for ci in 0..g.c_in {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..w {
                        let ix = ox as isize + kx as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward<T: Gemm>(x: &[T], wt: &[T], g: &Geometry) -> Vec<T> {
    let (ck, hw) = (g.ck(), g.hw());
    let mut cols = vec![T::ZERO; ck * hw];
    let mut out = vec![T::ZERO; g.batch * g.c_out * hw];
    for b in 0..g.batch {
        im2col(&x[b * g.c_in * hw..(b + 1) * g.c_in * hw], g, &mut cols);
        // SAFETY: all buffers are sized from the geometry above.
        unsafe {
            T::gemm(
                g.c_out,
                ck,
                hw,
                wt.as_ptr(),
                ck as isize,
                1,
                cols.as_ptr(),
                hw as isize,
                1,
                T::ZERO,
                out[b * g.c_out * hw..].as_mut_ptr(),
                hw as isize,
            );
        }
    }
    out
}

/// Returns `(grad_x, grad_w)`; `grad_x` is skipped when not requested.
fn backward<T: Gemm>(x: &[T], wt: &[T], gout: &[T], g: &Geometry, want_x: bool) -> (Option<Vec<T>>, Vec<T>) {
    let (ck, hw) = (g.ck(), g.hw());
    let mut cols = vec![T::ZERO; ck * hw];
    let mut grad_w = vec![T::ZERO; g.c_out * ck];
    let mut grad_x = want_x.then(|| vec![T::ZERO; x.len()]);
    let mut grad_cols = vec![T::ZERO; if want_x { ck * hw } else { 0 }];
    for b in 0..g.batch {
        let gb = &gout[b * g.c_out * hw..(b + 1) * g.c_out * hw];
        im2col(&x[b * g.c_in * hw..(b + 1) * g.c_in * hw], g, &mut cols);
        // SAFETY: buffers sized from geometry; strides describe row-major views.
        unsafe {
            // grad_w += gout_b (O x HW) * cols^T (HW x CK)
            T::gemm(
                g.c_out,
                hw,
                ck,
                gb.as_ptr(),
                hw as isize,
                1,
                cols.as_ptr(),
                1,
                hw as isize,
                T::ONE,
                grad_w.as_mut_ptr(),
                ck as isize,
            );
        }
        if let Some(gx) = grad_x.as_mut() {
            // SAFETY: as above; W^T is a strided view of W.
            unsafe {
                T::gemm(
                    ck,
                    g.c_out,
                    hw,
                    wt.as_ptr(),
                    1,
                    ck as isize,
                    gb.as_ptr(),
                    hw as isize,
                    1,
                    T::ZERO,
                    grad_cols.as_mut_ptr(),
                    hw as isize,
                );
            }
            col2im(&grad_cols, g, &mut gx[b * g.c_in * hw..(b + 1) * g.c_in * hw]);
        }
    }
    (grad_x, grad_w)
}

fn contiguous<'a, T: Gemm>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [T]> {
    let data = T::slice(s).ok_or_else(|| candle_core::Error::Msg("conv: unsupported dtype".into()))?;
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => Err(candle_core::Error::Msg("conv: non-contiguous input".into())),
    }
}

struct SameConv2d {
    pad: usize,
}

impl SameConv2d {
    fn geometry(x: &Shape, w: &Shape, pad: usize) -> Result<Geometry> {
        let (batch, c_in, h, wd) = x.dims4()?;
        let (c_out, c_in_w, k, k2) = w.dims4()?;
        if c_in != c_in_w || k != k2 || 2 * pad + 1 != k {
            return Err(candle_core::Error::Msg(format!(
                "conv: incompatible shapes {x:?} / {w:?} with padding {pad}"
            )));
        }
        Ok(Geometry {
            batch,
            c_in,
            c_out,
            h,
            w: wd,
            k,
            pad,
        })
    }
}

impl CustomOp2 for SameConv2d {
    fn name(&self) -> &'static str {
        "same-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = Self::geometry(l1.shape(), l2.shape(), self.pad)?;
        let shape = Shape::from((g.batch, g.c_out, g.h, g.w));
        let out = match s1 {
            CpuStorage::F32(_) => f32::wrap(forward(contiguous::<f32>(s1, l1)?, contiguous::<f32>(s2, l2)?, &g)),
            CpuStorage::F64(_) => f64::wrap(forward(contiguous::<f64>(s1, l1)?, contiguous::<f64>(s2, l2)?, &g)),
            _ => return Err(candle_core::Error::Msg("conv: unsupported dtype".into())),
        };
        Ok((out, shape))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let g = Self::geometry(x.shape(), w.shape(), self.pad)?;
        let want_x = x.track_op();
        let dev = x.device();
        macro_rules! run {
            ($t:ty) => {{
                let xs = x.flatten_all()?.to_vec1::<$t>()?;
                let ws = w.flatten_all()?.to_vec1::<$t>()?;
                let gs = grad.contiguous()?.flatten_all()?.to_vec1::<$t>()?;
                let (gx, gw) = backward(&xs, &ws, &gs, &g, want_x);
                let gx = gx.map(|v| Tensor::from_vec(v, x.shape(), dev)).transpose()?;
                (gx, Tensor::from_vec(gw, w.shape(), dev)?)
            }};
        }
        let (gx, gw) = match x.dtype() {
            DType::F32 => run!(f32),
            DType::F64 => run!(f64),
            dt => return Err(candle_core::Error::Msg(format!("conv: unsupported dtype {dt:?}"))),
        };
        Ok((gx, Some(gw)))
    }
}

/// `x (B,C,H,W) * w (O,C,k,k)` with stride 1 and padding `(k-1)/2`.
pub fn conv2d_same(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let k = w.dim(3)?;
    let x = x.contiguous()?;
    let w = w.contiguous()?;
    x.apply_op2(&w, SameConv2d { pad: (k - 1) / 2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn matches_candle_conv_forward() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (2, 3, 7, 6), &dev).unwrap();
        let w = Tensor::randn(0f64, 1.0, (4, 3, 5, 5), &dev).unwrap();
        let ours = conv2d_same(&x, &w).unwrap();
        let theirs = x.conv2d(&w, 2, 1, 1, 1).unwrap();
        let diff = (ours - theirs)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn matches_candle_conv_backward() {
        let dev = Device::Cpu;
        let x = Var::randn(0f64, 1.0, (2, 2, 5, 5), &dev).unwrap();
        let w = Var::randn(0f64, 1.0, (3, 2, 3, 3), &dev).unwrap();
        let probe = Tensor::randn(0f64, 1.0, (2, 3, 5, 5), &dev).unwrap();
        let ours = conv2d_same(x.as_tensor(), w.as_tensor()).unwrap();
        let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let theirs = x.as_tensor().conv2d(w.as_tensor(), 1, 1, 1, 1).unwrap();
        let g2 = (theirs * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &w] {
            let a = g1.get(v).unwrap();
            let b = g2.get(v).unwrap();
            let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff < 1e-9, "{diff}");
        }
    }

    #[test]
    fn rejects_mismatched_channels() {
        let dev = Device::Cpu;
        let x = Tensor::zeros((1, 2, 4, 4), DType::F32, &dev).unwrap();
        let w = Tensor::zeros((1, 3, 3, 3), DType::F32, &dev).unwrap();
        assert!(conv2d_same(&x, &w).is_err());
    }
}
