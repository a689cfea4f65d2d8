//! Volumetric convolution, upsampling and box-filter kernels.
//!
//! Forward convolution accumulates contributions to each output element in
//! `(c_in, kz, ky, kx)` order — the same order as a naive per-voxel dot
//! product — so a nested-loop oracle reproduces it bit-for-bit in f64.
//! Work is split by output (or input) channel, each computed by exactly one
//! worker with a fixed serial inner order, so results do not depend on the
//! rayon worker count.

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::real::Real;

/// Resolved geometry of one convolution call.
#[derive(Clone, Debug)]
pub(crate) struct ConvDims {
    pub c_in: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub od: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn infer(x_shape: &[usize], k_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x_shape.len() != 4 {
            return Err(shape_err(format!("conv3: input must be [C,D,H,W], got {x_shape:?}")));
        }
        if k_shape.len() != 5 || k_shape[2] != k_shape[3] || k_shape[3] != k_shape[4] {
            return Err(shape_err(format!(
                "conv3: kernel must be [C_out,C_in,k,k,k], got {k_shape:?}"
            )));
        }
        let (c_in, d, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (c_out, kc_in, k) = (k_shape[0], k_shape[1], k_shape[2]);
        if kc_in != c_in {
            return Err(shape_err(format!(
                "conv3: kernel expects {kc_in} input channels, input has {c_in}"
            )));
        }
        if k % 2 == 0 || k == 0 {
            return Err(shape_err(format!("conv3: kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(shape_err("conv3: stride must be >= 1"));
        }
        let out_dim = |n: usize| -> Option<usize> {
            let num = (n + 2 * pad).checked_sub(k)?;
            Some(num / stride + 1)
        };
        let (od, oh, ow) = match (out_dim(d), out_dim(h), out_dim(w)) {
            (Some(a), Some(b), Some(c)) if a > 0 && b > 0 && c > 0 => (a, b, c),
            _ => {
                return Err(shape_err(format!(
                    "conv3: non-positive output dims for input {d}x{h}x{w}, k={k}, s={stride}, p={pad}"
                )))
            }
        };
        Ok(ConvDims { c_in, d, h, w, c_out, k, stride, pad, od, oh, ow })
    }

    fn in_spatial(&self) -> usize {
        self.d * self.h * self.w
    }

    fn out_spatial(&self) -> usize {
        self.od * self.oh * self.ow
    }

    fn macs(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k * self.k * self.out_spatial()
    }

    /// Range of output coordinates whose input coordinate `o*stride - pad + koff`
    /// stays inside `[0, n)`; half-open.
    fn valid_out_range(&self, n: usize, out_n: usize, koff: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let a = self.pad as isize - koff as isize;
        let lo = (a + s - 1).div_euclid(s).max(0) as usize;
        let hi = ((n as isize - 1 + a).div_euclid(s) + 1).clamp(0, out_n as isize) as usize;
        (lo, hi.max(lo))
    }
}

const PAR_MACS_THRESHOLD: usize = 1 << 18;

/// Cross-correlation over one output channel, accumulating into `out_c`.
fn forward_one_channel<T: Real>(out_c: &mut [T], co: usize, x: &[T], ker: &[T], dm: &ConvDims) {
    let (k, s, p) = (dm.k, dm.stride, dm.pad as isize);
    let in_sp = dm.in_spatial();
    let (ohw, ow) = (dm.oh * dm.ow, dm.ow);
    let (ihw, iw) = (dm.h * dm.w, dm.w);
    for ci in 0..dm.c_in {
        let x_c = &x[ci * in_sp..(ci + 1) * in_sp];
        let kbase = ((co * dm.c_in) + ci) * k * k * k;
        for kz in 0..k {
            let (zlo, zhi) = dm.valid_out_range(dm.d, dm.od, kz);
            for ky in 0..k {
                let (ylo, yhi) = dm.valid_out_range(dm.h, dm.oh, ky);
                for kx in 0..k {
                    let (xlo, xhi) = dm.valid_out_range(dm.w, dm.ow, kx);
                    if xlo >= xhi {
                        continue;
                    }
                    let wv = ker[kbase + (kz * k + ky) * k + kx];
                    for zo in zlo..zhi {
                        let zi = (zo * s as usize) as isize - p + kz as isize;
                        let zrow = zi as usize * ihw;
                        for yo in ylo..yhi {
                            let yi = (yo * s as usize) as isize - p + ky as isize;
                            let irow = zrow + yi as usize * iw;
                            let orow = zo * ohw + yo * ow;
                            if s == 1 {
                                let xi0 = (xlo as isize - p + kx as isize) as usize;
                                let n = xhi - xlo;
                                let src = &x_c[irow + xi0..irow + xi0 + n];
                                let dst = &mut out_c[orow + xlo..orow + xlo + n];
                                for (o, &i) in dst.iter_mut().zip(src) {
                                    *o += wv * i;
                                }
                            } else {
                                for xo in xlo..xhi {
                                    let xi = (xo * s as usize) as isize - p + kx as isize;
                                    out_c[orow + xo] += wv * x_c[irow + xi as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(x: &[T], ker: &[T], dm: &ConvDims) -> Vec<T> {
    let out_sp = dm.out_spatial();
    let mut out = vec![T::ZERO; dm.c_out * out_sp];
    if dm.macs() >= PAR_MACS_THRESHOLD {
        out.par_chunks_mut(out_sp)
            .enumerate()
            .for_each(|(co, out_c)| forward_one_channel(out_c, co, x, ker, dm));
    } else {
        for (co, out_c) in out.chunks_mut(out_sp).enumerate() {
            forward_one_channel(out_c, co, x, ker, dm);
        }
    }
    out
}

/// d(loss)/d(input): scatter upstream gradients through the kernel.
fn backward_input_one_channel<T: Real>(
    dx_c: &mut [T],
    ci: usize,
    g: &[T],
    ker: &[T],
    dm: &ConvDims,
) {
    let (k, s, p) = (dm.k, dm.stride, dm.pad as isize);
    let out_sp = dm.out_spatial();
    let (ohw, ow) = (dm.oh * dm.ow, dm.ow);
    let (ihw, iw) = (dm.h * dm.w, dm.w);
    for co in 0..dm.c_out {
        let g_c = &g[co * out_sp..(co + 1) * out_sp];
        let kbase = ((co * dm.c_in) + ci) * k * k * k;
        for kz in 0..k {
            let (zlo, zhi) = dm.valid_out_range(dm.d, dm.od, kz);
            for ky in 0..k {
                let (ylo, yhi) = dm.valid_out_range(dm.h, dm.oh, ky);
                for kx in 0..k {
                    let (xlo, xhi) = dm.valid_out_range(dm.w, dm.ow, kx);
                    if xlo >= xhi {
                        continue;
                    }
                    let wv = ker[kbase + (kz * k + ky) * k + kx];
                    for zo in zlo..zhi {
                        let zi = (zo * s as usize) as isize - p + kz as isize;
                        let zrow = zi as usize * ihw;
                        for yo in ylo..yhi {
                            let yi = (yo * s as usize) as isize - p + ky as isize;
                            let irow = zrow + yi as usize * iw;
                            let grow = zo * ohw + yo * ow;
                            if s == 1 {
                                let xi0 = (xlo as isize - p + kx as isize) as usize;
                                let n = xhi - xlo;
                                let src = &g_c[grow + xlo..grow + xlo + n];
                                let dst = &mut dx_c[irow + xi0..irow + xi0 + n];
                                for (o, &gg) in dst.iter_mut().zip(src) {
                                    *o += wv * gg;
                                }
                            } else {
                                for xo in xlo..xhi {
                                    let xi = (xo * s as usize) as isize - p + kx as isize;
                                    dx_c[irow + xi as usize] += wv * g_c[grow + xo];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn backward_input<T: Real>(g: &[T], ker: &[T], dm: &ConvDims) -> Vec<T> {
    let in_sp = dm.in_spatial();
    let mut dx = vec![T::ZERO; dm.c_in * in_sp];
    if dm.macs() >= PAR_MACS_THRESHOLD {
        dx.par_chunks_mut(in_sp)
            .enumerate()
            .for_each(|(ci, dx_c)| backward_input_one_channel(dx_c, ci, g, ker, dm));
    } else {
        for (ci, dx_c) in dx.chunks_mut(in_sp).enumerate() {
            backward_input_one_channel(dx_c, ci, g, ker, dm);
        }
    }
    dx
}

/// Dot product with independent partial accumulators so the loop vectorizes.
#[inline]
fn dot8<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::ZERO; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        for lane in 0..8 {
            let j = i * 8 + lane;
            acc[lane] += a[j] * b[j];
        }
    }
    let mut tail = T::ZERO;
    for j in chunks * 8..a.len() {
        tail += a[j] * b[j];
    }
    let mut s = tail;
    for v in acc {
        s += v;
    }
    s
}

/// d(loss)/d(kernel): one dot product per kernel element.
fn backward_kernel_one_channel<T: Real>(
    dk_c: &mut [T],
    co: usize,
    g: &[T],
    x: &[T],
    dm: &ConvDims,
) {
    let (k, s, p) = (dm.k, dm.stride, dm.pad as isize);
    let out_sp = dm.out_spatial();
    let in_sp = dm.in_spatial();
    let (ohw, ow) = (dm.oh * dm.ow, dm.ow);
    let (ihw, iw) = (dm.h * dm.w, dm.w);
    let g_c = &g[co * out_sp..(co + 1) * out_sp];
    for ci in 0..dm.c_in {
        let x_c = &x[ci * in_sp..(ci + 1) * in_sp];
        let kbase = ci * k * k * k;
        for kz in 0..k {
            let (zlo, zhi) = dm.valid_out_range(dm.d, dm.od, kz);
            for ky in 0..k {
                let (ylo, yhi) = dm.valid_out_range(dm.h, dm.oh, ky);
                for kx in 0..k {
                    let (xlo, xhi) = dm.valid_out_range(dm.w, dm.ow, kx);
                    let mut acc = T::ZERO;
                    if xlo < xhi {
                        for zo in zlo..zhi {
                            let zi = (zo * s as usize) as isize - p + kz as isize;
                            let zrow = zi as usize * ihw;
                            for yo in ylo..yhi {
                                let yi = (yo * s as usize) as isize - p + ky as isize;
                                let irow = zrow + yi as usize * iw;
                                let grow = zo * ohw + yo * ow;
                                if s == 1 {
                                    let xi0 = (xlo as isize - p + kx as isize) as usize;
                                    let n = xhi - xlo;
                                    acc += dot8(
                                        &g_c[grow + xlo..grow + xlo + n],
                                        &x_c[irow + xi0..irow + xi0 + n],
                                    );
                                } else {
                                    for xo in xlo..xhi {
                                        let xi = (xo * s as usize) as isize - p + kx as isize;
                                        acc += g_c[grow + xo] * x_c[irow + xi as usize];
                                    }
                                }
                            }
                        }
                    }
                    dk_c[kbase + (kz * k + ky) * k + kx] = acc;
                }
            }
        }
    }
}

pub(crate) fn backward_kernel<T: Real>(g: &[T], x: &[T], dm: &ConvDims) -> Vec<T> {
    let per_co = dm.c_in * dm.k * dm.k * dm.k;
    let mut dk = vec![T::ZERO; dm.c_out * per_co];
    if dm.macs() >= PAR_MACS_THRESHOLD {
        dk.par_chunks_mut(per_co)
            .enumerate()
            .for_each(|(co, dk_c)| backward_kernel_one_channel(dk_c, co, g, x, dm));
    } else {
        for (co, dk_c) in dk.chunks_mut(per_co).enumerate() {
            backward_kernel_one_channel(dk_c, co, g, x, dm);
        }
    }
    dk
}

// ── nearest-neighbour 2x upsampling ─────────────────────────────────────

pub(crate) fn upsample2_forward<T: Real>(x: &[T], shape: &[usize]) -> Vec<T> {
    let (c, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut out = vec![T::ZERO; c * od * oh * ow];
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                let in_row = &x[((ch * d + z) * h + y) * w..][..w];
                for dz in 0..2 {
                    for dy in 0..2 {
                        let orow = ((ch * od + 2 * z + dz) * oh + 2 * y + dy) * ow;
                        let dst = &mut out[orow..orow + ow];
                        for (xo, &v) in in_row.iter().enumerate() {
                            dst[2 * xo] = v;
                            dst[2 * xo + 1] = v;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Real>(g: &[T], in_shape: &[usize]) -> Vec<T> {
    let (c, d, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut dx = vec![T::ZERO; c * d * h * w];
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                let drow = ((ch * d + z) * h + y) * w;
                for dz in 0..2 {
                    for dy in 0..2 {
                        let grow = ((ch * od + 2 * z + dz) * oh + 2 * y + dy) * ow;
                        let src = &g[grow..grow + ow];
                        let dst = &mut dx[drow..drow + w];
                        for (xo, o) in dst.iter_mut().enumerate() {
                            *o += src[2 * xo] + src[2 * xo + 1];
                        }
                    }
                }
            }
        }
    }
    dx
}

// ── 3x3x3 box mean, valid positions ─────────────────────────────────────

pub(crate) fn box3_forward<T: Real>(x: &[T], shape: &[usize]) -> Vec<T> {
    let (c, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (od, oh, ow) = (d - 2, h - 2, w - 2);
    let inv = T::from_f64(1.0 / 27.0);
    let mut out = vec![T::ZERO; c * od * oh * ow];
    for ch in 0..c {
        for zo in 0..od {
            for yo in 0..oh {
                let orow = ((ch * od + zo) * oh + yo) * ow;
                for dz in 0..3 {
                    for dy in 0..3 {
                        let irow = ((ch * d + zo + dz) * h + yo + dy) * w;
                        for dx_off in 0..3 {
                            let src = &x[irow + dx_off..irow + dx_off + ow];
                            let dst = &mut out[orow..orow + ow];
                            for (o, &v) in dst.iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    }
                }
            }
        }
    }
    for v in &mut out {
        *v *= inv;
    }
    out
}

pub(crate) fn box3_backward<T: Real>(g: &[T], in_shape: &[usize]) -> Vec<T> {
    let (c, d, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (od, oh, ow) = (d - 2, h - 2, w - 2);
    let inv = T::from_f64(1.0 / 27.0);
    let mut dx = vec![T::ZERO; c * d * h * w];
    for ch in 0..c {
        for zo in 0..od {
            for yo in 0..oh {
                let grow = ((ch * od + zo) * oh + yo) * ow;
                for dz in 0..3 {
                    for dy in 0..3 {
                        let irow = ((ch * d + zo + dz) * h + yo + dy) * w;
                        for dx_off in 0..3 {
                            let dst = &mut dx[irow + dx_off..irow + dx_off + ow];
                            let src = &g[grow..grow + ow];
                            for (o, &v) in dst.iter_mut().zip(src) {
                                *o += v * inv;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
