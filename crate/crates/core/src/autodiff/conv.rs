use std::cell::RefCell;
use std::ops::Range;

use super::gemm::gemm;
use super::tape::{Op, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output columns `ox` whose input column `ox*stride + kx - padding`
    /// falls inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        // largest ox with ox*s + kx - p <= in_w - 1
        let hi = if self.in_w + p > kx {
            ((self.in_w - 1 + p - kx) / s + 1).min(self.out_w)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Output rows per band, sized so a band's column matrix stays in cache.
    fn band_rows(&self) -> usize {
        let cache_rows = BAND_ELEMS / (self.patch_len() * self.out_w);
        cache_rows.max(MIN_BAND_COLS.div_ceil(self.out_w)).clamp(1, self.out_h)
    }

    /// Unfolds output rows `oys` of one sample into a
    /// `[c_in*k*k, oys.len()*out_w]` column matrix.
    fn im2col(&self, x: &[f64], oys: Range<usize>, cols: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.padding);
        let plane = oys.len() * self.out_w;
        for ci in 0..self.c_in {
            let chan = &x[ci * self.in_h * self.in_w..][..self.in_h * self.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * plane..][..plane];
                    let (lo, hi) = self.valid_cols(kx);
                    for (r, oy) in oys.clone().enumerate() {
                        let iy = (oy * s + ky) as isize - p as isize;
                        let dst = &mut row[r * self.out_w..][..self.out_w];
                        if iy < 0 || iy >= self.in_h as isize || lo >= hi {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &chan[iy as usize * self.in_w..][..self.in_w];
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        let first = lo * s + kx - p;
                        if s == 1 {
                            dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (d, v) in dst[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                                *d = *v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds the column matrix of output rows `oys` back onto one sample.
    fn col2im(&self, cols: &[f64], oys: Range<usize>, dx: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.padding);
        let plane = oys.len() * self.out_w;
        for ci in 0..self.c_in {
            let chan = &mut dx[ci * self.in_h * self.in_w..][..self.in_h * self.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * plane..][..plane];
                    let (lo, hi) = self.valid_cols(kx);
                    if lo >= hi {
                        continue;
                    }
                    let first = lo * s + kx - p;
                    for (r, oy) in oys.clone().enumerate() {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let dst = &mut chan[iy as usize * self.in_w..][..self.in_w];
                        let src = &row[r * self.out_w..][lo..hi];
                        if s == 1 {
                            for (d, v) in dst[first..first + hi - lo].iter_mut().zip(src) {
                                *d += v;
                            }
                        } else {
                            for (d, v) in dst[first..].iter_mut().step_by(s).zip(src) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

const BAND_ELEMS: usize = 16 * 1024;
/// Narrower products lose more to packing than they gain in locality.
const MIN_BAND_COLS: usize = 256;

/// Bands of output rows covering `0..out_h`.
fn bands(geom: &ConvGeometry) -> impl Iterator<Item = Range<usize>> {
    let step = geom.band_rows();
    let h = geom.out_h;
    (0..h).step_by(step).map(move |a| a..(a + step).min(h))
}

thread_local! {
    static COLS: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` with a per-thread column buffer of at least `len` entries. Every
/// user overwrites the part it reads, so stale contents never leak.
fn with_cols<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    COLS.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
}

impl Tape {
    /// 2D cross-correlation of `[N,Cin,H,W]` with `[Cout,Cin,k,k]` plus a
    /// per-output-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (batch, c_in, in_h, in_w) = self.value(input).dims4("conv2d")?;
        let (c_out, kc_in, kh, kw) = self.value(kernel).dims4("conv2d")?;
        if kc_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c_in} channels but kernel expects {kc_in}"),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be square with odd size, got {kh}x{kw}"),
            ));
        }
        if self.value(bias).len() != c_out {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} entries for {c_out} output channels", self.value(bias).len()),
            ));
        }
        if stride == 0 || in_h + 2 * padding < kh || in_w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("stride {stride}, padding {padding} invalid for {in_h}x{in_w} input"),
            ));
        }
        let geom = ConvGeometry {
            batch,
            c_in,
            c_out,
            in_h,
            in_w,
            out_h: (in_h + 2 * padding - kh) / stride + 1,
            out_w: (in_w + 2 * padding - kw) / stride + 1,
            k: kh,
            stride,
            padding,
        };
        let out = conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Tensor::from_parts(vec![batch, c_out, geom.out_h, geom.out_w], out);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }
}

fn conv2d_forward(geom: &ConvGeometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let patch = geom.patch_len();
    let plane = geom.out_plane();
    let in_len = geom.c_in * geom.in_h * geom.in_w;
    let mut out = vec![0.0; geom.batch * geom.c_out * plane];
    with_cols(patch * geom.band_rows() * geom.out_w, |buf| {
        for n in 0..geom.batch {
            let xn = &x[n * in_len..][..in_len];
            let y = &mut out[n * geom.c_out * plane..][..geom.c_out * plane];
            for (co, chunk) in y.chunks_mut(plane).enumerate() {
                chunk.fill(b[co]);
            }
            for oys in bands(geom) {
                let width = oys.len() * geom.out_w;
                let cols = &mut buf[..patch * width];
                geom.im2col(xn, oys.clone(), cols);
                let y = &mut y[oys.start * geom.out_w..];
                gemm(geom.c_out, patch, width, 1.0, w, (patch, 1), cols, (width, 1), 1.0, y, (plane, 1));
            }
        }
    });
    out
}

pub(crate) fn conv2d_backward(
    geom: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    g: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> ConvGrads {
    let patch = geom.patch_len();
    let plane = geom.out_plane();
    let in_len = geom.c_in * geom.in_h * geom.in_w;
    let mut dx = want_input.then(|| vec![0.0; geom.batch * in_len]);
    let mut dw = want_kernel.then(|| vec![0.0; w.len()]);
    with_cols(patch * geom.band_rows() * geom.out_w, |buf| {
        for n in 0..geom.batch {
            let gy = &g[n * geom.c_out * plane..][..geom.c_out * plane];
            for oys in bands(geom) {
                let width = oys.len() * geom.out_w;
                let cols = &mut buf[..patch * width];
                let gy = &gy[oys.start * geom.out_w..];
                if let Some(dw) = dw.as_mut() {
                    geom.im2col(&x[n * in_len..][..in_len], oys.clone(), cols);
                    // dW[co, p] += gy[co, q] * cols[p, q]
                    gemm(patch, width, geom.c_out, 1.0, cols, (width, 1), gy, (1, plane), 1.0, dw, (1, patch));
                }
                if let Some(dx) = dx.as_mut() {
                    // dcols[p, q] = W[co, p] * gy[co, q]; beta 0 overwrites the buffer
                    gemm(patch, geom.c_out, width, 1.0, w, (1, patch), gy, (plane, 1), 0.0, cols, (width, 1));
                    geom.col2im(cols, oys, &mut dx[n * in_len..][..in_len]);
                }
            }
        }
    });
    ConvGrads {
        input: dx,
        kernel: dw,
    }
}
