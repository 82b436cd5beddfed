//! Raw numeric kernels shared by the tape and the no-grad paths.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Geometry of a single-sample 2-D cross-correlation with symmetric zero
/// padding `k / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize) -> Result<Self> {
        let (cin, h, w) = match *input {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::invalid_shape(input, "conv2d input must be (c, h, w)")),
        };
        let (cout, kin, k) = match *kernel {
            [o, i, kh, kw] if kh == kw => (o, i, kh),
            _ => {
                return Err(Error::invalid_shape(
                    kernel,
                    "conv2d kernel must be (out, in, k, k)",
                ))
            }
        };
        if kin != cin {
            return Err(Error::shape("conv2d", input, kernel));
        }
        if k % 2 == 0 || stride == 0 {
            return Err(Error::invalid_shape(kernel, "kernel size must be odd, stride >= 1"));
        }
        let pad = k / 2;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape("conv2d", input, kernel));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(Self {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// 1×1 stride-1 convolutions read the input directly as the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }
}

pub(crate) fn im2col<T: Scalar>(g: &ConvGeom, input: &[T]) -> Vec<T> {
    let n = g.out_pixels();
    let mut cols = vec![T::zero(); g.patch_len() * n];
    for ci in 0..g.cin {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_accumulate<T: Scalar>(g: &ConvGeom, cols: &[T], dinput: &mut [T]) {
    let n = g.out_pixels();
    for ci in 0..g.cin {
        let plane = &mut dinput[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, &s) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let n = g.out_pixels();
    let kk = g.patch_len();
    let mut out = vec![T::zero(); g.cout * n];
    if let Some(bias) = bias {
        for (o, chunk) in out.chunks_mut(n).enumerate() {
            chunk.fill(bias[o]);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    let owned;
    let cols: &[T] = if g.is_pointwise() {
        input
    } else {
        owned = im2col(g, input);
        &owned
    };
    T::gemm(
        g.cout,
        kk,
        n,
        T::one(),
        kernel,
        kk as isize,
        1,
        cols,
        n as isize,
        1,
        beta,
        &mut out,
        n as isize,
        1,
    );
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    dout: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let n = g.out_pixels();
    let kk = g.patch_len();
    let (need_input, need_kernel, need_bias) = need;

    let bias = need_bias.then(|| dout.chunks(n).map(|row| row.iter().copied().sum()).collect());

    let kernel_grad = need_kernel.then(|| {
        let owned;
        let cols: &[T] = if g.is_pointwise() {
            input
        } else {
            owned = im2col(g, input);
            &owned
        };
        let mut dk = vec![T::zero(); g.cout * kk];
        // dK = dOut · colsᵀ
        T::gemm(
            g.cout,
            n,
            kk,
            T::one(),
            dout,
            n as isize,
            1,
            cols,
            1,
            n as isize,
            T::zero(),
            &mut dk,
            kk as isize,
            1,
        );
        dk
    });

    let input_grad = need_input.then(|| {
        // dcols = Kᵀ · dOut
        let mut dcols = vec![T::zero(); kk * n];
        T::gemm(
            kk,
            g.cout,
            n,
            T::one(),
            kernel,
            1,
            kk as isize,
            dout,
            n as isize,
            1,
            T::zero(),
            &mut dcols,
            n as isize,
            1,
        );
        if g.is_pointwise() {
            dcols
        } else {
            let mut dinput = vec![T::zero(); g.cin * g.h * g.w];
            col2im_accumulate(g, &dcols, &mut dinput);
            dinput
        }
    });

    ConvGrads {
        input: input_grad,
        kernel: kernel_grad,
        bias,
    }
}

/// Source taps for bilinear resampling along one axis (half-pixel centres,
/// edge-clamped): `(lo, hi, w_lo, w_hi)` per output coordinate.
fn bilinear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            let frac = src - lo as f64;
            (lo, hi, 1.0 - frac, frac)
        })
        .collect()
}

pub(crate) fn upsample_bilinear<T: Scalar>(
    (c, h, w): (usize, usize, usize),
    factor: usize,
    input: &[T],
) -> Vec<T> {
    let ys = bilinear_taps(h, factor);
    let xs = bilinear_taps(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64_lossy(wy0), T::from_f64_lossy(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64_lossy(wx0), T::from_f64_lossy(wx1));
                let top = plane[y0 * w + x0] * wx0 + plane[y0 * w + x1] * wx1;
                let bottom = plane[y1 * w + x0] * wx0 + plane[y1 * w + x1] * wx1;
                dst[oy * ow + ox] = top * wy0 + bottom * wy1;
            }
        }
    }
    out
}

/// Adjoint of [`upsample_bilinear`].
pub(crate) fn upsample_bilinear_adjoint<T: Scalar>(
    (c, h, w): (usize, usize, usize),
    factor: usize,
    dout: &[T],
) -> Vec<T> {
    let ys = bilinear_taps(h, factor);
    let xs = bilinear_taps(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut din = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let src = &dout[ch * oh * ow..(ch + 1) * oh * ow];
        let plane = &mut din[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64_lossy(wy0), T::from_f64_lossy(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64_lossy(wx0), T::from_f64_lossy(wx1));
                let g = src[oy * ow + ox];
                plane[y0 * w + x0] = plane[y0 * w + x0] + g * wy0 * wx0;
                plane[y0 * w + x1] = plane[y0 * w + x1] + g * wy0 * wx1;
                plane[y1 * w + x0] = plane[y1 * w + x0] + g * wy1 * wx0;
                plane[y1 * w + x1] = plane[y1 * w + x1] + g * wy1 * wx1;
            }
        }
    }
    din
}
