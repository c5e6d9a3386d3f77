//! Low-level numeric kernels behind the tape operations.
//!
//! Convolutions go through per-sample im2col plus an axpy-style matrix
//! product; batch samples are processed in parallel with rayon. No kernel
//! performs a cross-thread floating-point reduction: per-sample and
//! per-output-channel work is combined in a fixed order afterwards, so
//! results are bit-identical for any thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn new(
        input_shape: &[usize],
        kernel_shape: &[usize],
        bias_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input must be N×C×H×W, got {:?}", input_shape),
            ));
        }
        if kernel_shape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be Cout×Cin×kh×kw, got {:?}", kernel_shape),
            ));
        }
        let (n, cin, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
        let (cout, kcin, kh, kw) = (
            kernel_shape[0],
            kernel_shape[1],
            kernel_shape[2],
            kernel_shape[3],
        );
        if cin != kcin {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input channel dim (1) is {} but kernel expects {}",
                    cin, kcin
                ),
            ));
        }
        if bias_shape != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias must be [{}], got {:?}", cout, bias_shape),
            ));
        }
        if stride == 0 {
            return Err(Error::Validation("conv2d stride must be positive".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "padded spatial dims {}×{} smaller than kernel {}×{}",
                    h + 2 * padding,
                    w + 2 * padding,
                    kh,
                    kw
                ),
            ));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        Ok(ConvDims {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        })
    }

    #[inline]
    pub fn k_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    #[inline]
    pub fn out_cols(&self) -> usize {
        self.oh * self.ow
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.oh, self.ow]
    }
}

/// Expands one sample into a (cin·kh·kw) × (oh·ow) patch matrix.
fn im2col<T: Scalar>(sample: &[T], d: &ConvDims, col: &mut [T]) {
    let j = d.out_cols();
    debug_assert_eq!(col.len(), d.k_rows() * j);
    for c in 0..d.cin {
        let plane = &sample[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = &mut col[((c * d.kh + ki) * d.kw + kj) * j..][..j];
                let mut out_idx = 0;
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ki) as isize - d.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        for _ in 0..d.ow {
                            row[out_idx] = T::ZERO;
                            out_idx += 1;
                        }
                        continue;
                    }
                    let in_row = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.ow {
                        let ix = (ox * d.stride + kj) as isize - d.padding as isize;
                        row[out_idx] = if ix < 0 || ix >= d.w as isize {
                            T::ZERO
                        } else {
                            in_row[ix as usize]
                        };
                        out_idx += 1;
                    }
                }
            }
        }
    }
}

/// out[j] ← out[j] + Σᵢ wᵢ·colᵢ[j], accumulated in ascending row order so
/// the summation order matches the one-row-at-a-time loop bit for bit.
#[inline]
fn axpy_rows<T: Scalar>(out: &mut [T], weights: &[T], col: &[T], j: usize) {
    match weights.len() {
        0 => {}
        1 => {
            let w0 = weights[0];
            if w0 == T::ZERO {
                return;
            }
            let c0 = &col[..j];
            for (o, &c) in out.iter_mut().zip(c0) {
                *o += w0 * c;
            }
        }
        2 => {
            let (w0, w1) = (weights[0], weights[1]);
            let c0 = &col[..j];
            let c1 = &col[j..2 * j];
            for i in 0..j {
                let mut acc = out[i];
                acc += w0 * c0[i];
                acc += w1 * c1[i];
                out[i] = acc;
            }
        }
        3 => {
            let (w0, w1, w2) = (weights[0], weights[1], weights[2]);
            let c0 = &col[..j];
            let c1 = &col[j..2 * j];
            let c2 = &col[2 * j..3 * j];
            for i in 0..j {
                let mut acc = out[i];
                acc += w0 * c0[i];
                acc += w1 * c1[i];
                acc += w2 * c2[i];
                out[i] = acc;
            }
        }
        _ => {
            let (w0, w1, w2, w3) = (weights[0], weights[1], weights[2], weights[3]);
            let c0 = &col[..j];
            let c1 = &col[j..2 * j];
            let c2 = &col[2 * j..3 * j];
            let c3 = &col[3 * j..4 * j];
            for i in 0..j {
                let mut acc = out[i];
                acc += w0 * c0[i];
                acc += w1 * c1[i];
                acc += w2 * c2[i];
                acc += w3 * c3[i];
                out[i] = acc;
            }
        }
    }
}

fn matvec_block<T: Scalar>(out: &mut [T], weights: &[T], col: &[T], j: usize) {
    let mut kk = 0;
    let k = weights.len();
    // skip leading all-zero stretches cheaply (zero-initialized heads)
    while kk < k {
        let take = (k - kk).min(4);
        let block = &weights[kk..kk + take];
        if block.iter().all(|&w| w == T::ZERO) {
            kk += take;
            continue;
        }
        axpy_rows(out, block, &col[kk * j..(kk + take) * j], j);
        kk += take;
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    input: &[T],
    kernel: &[T],
    bias: &[T],
    d: &ConvDims,
) -> Vec<T> {
    let k = d.k_rows();
    let j = d.out_cols();
    let mut out = vec![T::ZERO; d.n * d.cout * j];
    out.par_chunks_mut(d.cout * j)
        .zip(input.par_chunks(d.cin * d.h * d.w))
        .for_each_init(
            || vec![T::ZERO; k * j],
            |col, (out_sample, in_sample)| {
                im2col(in_sample, d, col);
                for oc in 0..d.cout {
                    let orow = &mut out_sample[oc * j..(oc + 1) * j];
                    orow.fill(bias[oc]);
                    matvec_block(orow, &kernel[oc * k..(oc + 1) * k], col, j);
                }
            },
        );
    out
}

/// Scatters a patch-matrix gradient back onto the input plane.
fn col2im_accumulate<T: Scalar>(col: &[T], d: &ConvDims, grad_sample: &mut [T]) {
    let j = d.out_cols();
    for c in 0..d.cin {
        let plane = &mut grad_sample[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = &col[((c * d.kh + ki) * d.kw + kj) * j..][..j];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ki) as isize - d.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let base = iy as usize * d.w;
                    for ox in 0..d.ow {
                        let ix = (ox * d.stride + kj) as isize - d.padding as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        plane[base + ix as usize] += row[oy * d.ow + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward_input<T: Scalar>(
    grad_out: &[T],
    kernel: &[T],
    d: &ConvDims,
) -> Vec<T> {
    let k = d.k_rows();
    let j = d.out_cols();
    let mut grad_in = vec![T::ZERO; d.n * d.cin * d.h * d.w];
    grad_in
        .par_chunks_mut(d.cin * d.h * d.w)
        .zip(grad_out.par_chunks(d.cout * j))
        .for_each_init(
            || vec![T::ZERO; k * j],
            |col, (gin_sample, gout_sample)| {
                // col gradient = Wᵀ · gout, then scatter back through patches
                col.fill(T::ZERO);
                let mut weights = [T::ZERO; 4];
                for kk in 0..k {
                    let crow = &mut col[kk * j..(kk + 1) * j];
                    let mut oc = 0;
                    while oc < d.cout {
                        let take = (d.cout - oc).min(4);
                        for (t, w) in weights[..take].iter_mut().enumerate() {
                            *w = kernel[(oc + t) * k + kk];
                        }
                        if weights[..take].iter().any(|&w| w != T::ZERO) {
                            axpy_rows(
                                crow,
                                &weights[..take],
                                &gout_sample[oc * j..(oc + take) * j],
                                j,
                            );
                        }
                        oc += take;
                    }
                }
                col2im_accumulate(col, d, gin_sample);
            },
        );
    grad_in
}

pub(crate) fn conv2d_backward_kernel<T: Scalar>(
    grad_out: &[T],
    input: &[T],
    d: &ConvDims,
) -> Vec<T> {
    let k = d.k_rows();
    let j = d.out_cols();
    // Per-sample partials in parallel, reduced in sample order afterwards so
    // the sum is independent of scheduling.
    let partials: Vec<Vec<T>> = (0..d.n)
        .into_par_iter()
        .map_init(
            || vec![T::ZERO; k * j],
            |col, s| {
                let in_sample = &input[s * d.cin * d.h * d.w..(s + 1) * d.cin * d.h * d.w];
                let gout_sample = &grad_out[s * d.cout * j..(s + 1) * d.cout * j];
                im2col(in_sample, d, col);
                let mut gw = vec![T::ZERO; d.cout * k];
                for oc in 0..d.cout {
                    let grow = &gout_sample[oc * j..(oc + 1) * j];
                    let mut kk = 0;
                    // four dot products at a time for instruction-level overlap
                    while kk + 4 <= k {
                        let c0 = &col[kk * j..(kk + 1) * j];
                        let c1 = &col[(kk + 1) * j..(kk + 2) * j];
                        let c2 = &col[(kk + 2) * j..(kk + 3) * j];
                        let c3 = &col[(kk + 3) * j..(kk + 4) * j];
                        let mut a0 = T::ZERO;
                        let mut a1 = T::ZERO;
                        let mut a2 = T::ZERO;
                        let mut a3 = T::ZERO;
                        for i in 0..j {
                            let g = grow[i];
                            a0 += c0[i] * g;
                            a1 += c1[i] * g;
                            a2 += c2[i] * g;
                            a3 += c3[i] * g;
                        }
                        gw[oc * k + kk] = a0;
                        gw[oc * k + kk + 1] = a1;
                        gw[oc * k + kk + 2] = a2;
                        gw[oc * k + kk + 3] = a3;
                        kk += 4;
                    }
                    while kk < k {
                        let crow = &col[kk * j..(kk + 1) * j];
                        let mut acc = T::ZERO;
                        for (&c, &g) in crow.iter().zip(grow.iter()) {
                            acc += c * g;
                        }
                        gw[oc * k + kk] = acc;
                        kk += 1;
                    }
                }
                gw
            },
        )
        .collect();
    let mut grad_kernel = vec![T::ZERO; d.cout * k];
    for partial in partials {
        for (g, p) in grad_kernel.iter_mut().zip(partial) {
            *g += p;
        }
    }
    grad_kernel
}

pub(crate) fn conv2d_backward_bias<T: Scalar>(grad_out: &[T], d: &ConvDims) -> Vec<T> {
    let j = d.out_cols();
    let mut grad_bias = vec![T::ZERO; d.cout];
    for s in 0..d.n {
        for oc in 0..d.cout {
            let grow = &grad_out[(s * d.cout + oc) * j..][..j];
            let mut acc = T::ZERO;
            for &g in grow {
                acc += g;
            }
            grad_bias[oc] += acc;
        }
    }
    grad_bias
}

pub(crate) fn dense_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    n: usize,
    f: usize,
    k: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; n * k];
    for s in 0..n {
        let orow = &mut out[s * k..(s + 1) * k];
        orow.copy_from_slice(b);
        let xrow = &x[s * f..(s + 1) * f];
        for (fi, &xv) in xrow.iter().enumerate() {
            if xv == T::ZERO {
                continue;
            }
            let wrow = &w[fi * k..(fi + 1) * k];
            for (o, &wv) in orow.iter_mut().zip(wrow.iter()) {
                *o += xv * wv;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub(crate) fn dense_backward<T: Scalar>(
    grad_out: &[T],
    x: &[T],
    w: &[T],
    n: usize,
    f: usize,
    k: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let grad_x = need_x.then(|| {
        let mut gx = vec![T::ZERO; n * f];
        for s in 0..n {
            let grow = &grad_out[s * k..(s + 1) * k];
            let gxrow = &mut gx[s * f..(s + 1) * f];
            for fi in 0..f {
                let wrow = &w[fi * k..(fi + 1) * k];
                let mut acc = T::ZERO;
                for (&g, &wv) in grow.iter().zip(wrow.iter()) {
                    acc += g * wv;
                }
                gxrow[fi] = acc;
            }
        }
        gx
    });
    let (grad_w, grad_b) = if need_w {
        let mut gw = vec![T::ZERO; f * k];
        let mut gb = vec![T::ZERO; k];
        for s in 0..n {
            let grow = &grad_out[s * k..(s + 1) * k];
            let xrow = &x[s * f..(s + 1) * f];
            for (fi, &xv) in xrow.iter().enumerate() {
                if xv == T::ZERO {
                    continue;
                }
                let gwrow = &mut gw[fi * k..(fi + 1) * k];
                for (gwv, &g) in gwrow.iter_mut().zip(grow.iter()) {
                    *gwv += xv * g;
                }
            }
            for (gbv, &g) in gb.iter_mut().zip(grow.iter()) {
                *gbv += g;
            }
        }
        (Some(gw), Some(gb))
    } else {
        (None, None)
    };
    (grad_x, grad_w, grad_b)
}
