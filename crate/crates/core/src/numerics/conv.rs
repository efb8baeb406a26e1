//! Reference loop implementations of 2-D convolution and its transpose.
//!
//! Layouts: input `[C_in, H, W]`, conv weight `[C_out, C_in, k, k]`,
//! transposed-conv weight `[C_in, C_out, k, k]`, bias `[C_out]`.

use super::{conv_transpose_output_len, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub(crate) fn conv(c_in: usize, c_out: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        ConvGeom { c_in, c_out, h, w, k, stride, pad, oh, ow }
    }

    pub(crate) fn transposed(c_in: usize, c_out: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let oh = conv_transpose_output_len(h, k, stride, pad);
        let ow = conv_transpose_output_len(w, k, stride, pad);
        ConvGeom { c_in, c_out, h, w, k, stride, pad, oh, ow }
    }

    /// Input coordinate touched by output `o` through kernel tap `t`, if in bounds.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Output coordinate written by input `i` through kernel tap `t` (transposed).
    #[inline]
    fn dst(&self, i: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (i * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub(crate) fn conv2d_forward<F: Real>(g: &ConvGeom, x: &[F], w: &[F], b: &[F]) -> Vec<F> {
    let k = g.k;
    let mut out = vec![F::zero(); g.c_out * g.oh * g.ow];
    for co in 0..g.c_out {
        for oh in 0..g.oh {
            for ow in 0..g.ow {
                let mut acc = b[co];
                for ci in 0..g.c_in {
                    for kh in 0..k {
                        let Some(ih) = g.src(oh, kh, g.h) else { continue };
                        for kw in 0..k {
                            let Some(iw) = g.src(ow, kw, g.w) else { continue };
                            acc += w[((co * g.c_in + ci) * k + kh) * k + kw] * x[(ci * g.h + ih) * g.w + iw];
                        }
                    }
                }
                out[(co * g.oh + oh) * g.ow + ow] = acc;
            }
        }
    }
    out
}

/// Returns (dx, dw, db).
pub(crate) fn conv2d_backward<F: Real>(g: &ConvGeom, x: &[F], w: &[F], dy: &[F]) -> (Vec<F>, Vec<F>, Vec<F>) {
    let k = g.k;
    let mut dx = vec![F::zero(); x.len()];
    let mut dw = vec![F::zero(); w.len()];
    let mut db = vec![F::zero(); g.c_out];
    for co in 0..g.c_out {
        for oh in 0..g.oh {
            for ow in 0..g.ow {
                let d = dy[(co * g.oh + oh) * g.ow + ow];
                if d == F::zero() {
                    continue;
                }
                db[co] += d;
                for ci in 0..g.c_in {
                    for kh in 0..k {
                        let Some(ih) = g.src(oh, kh, g.h) else { continue };
                        for kw in 0..k {
                            let Some(iw) = g.src(ow, kw, g.w) else { continue };
                            let wi = ((co * g.c_in + ci) * k + kh) * k + kw;
                            let xi = (ci * g.h + ih) * g.w + iw;
                            dw[wi] += d * x[xi];
                            dx[xi] += d * w[wi];
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub(crate) fn conv_transpose2d_forward<F: Real>(g: &ConvGeom, x: &[F], w: &[F], b: &[F]) -> Vec<F> {
    let k = g.k;
    let mut out = vec![F::zero(); g.c_out * g.oh * g.ow];
    for co in 0..g.c_out {
        out[co * g.oh * g.ow..(co + 1) * g.oh * g.ow].fill(b[co]);
    }
    for ci in 0..g.c_in {
        for ih in 0..g.h {
            for iw in 0..g.w {
                let xv = x[(ci * g.h + ih) * g.w + iw];
                if xv == F::zero() {
                    continue;
                }
                for co in 0..g.c_out {
                    for kh in 0..k {
                        let Some(oh) = g.dst(ih, kh, g.oh) else { continue };
                        for kw in 0..k {
                            let Some(ow) = g.dst(iw, kw, g.ow) else { continue };
                            out[(co * g.oh + oh) * g.ow + ow] += xv * w[((ci * g.c_out + co) * k + kh) * k + kw];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_transpose2d_backward<F: Real>(
    g: &ConvGeom,
    x: &[F],
    w: &[F],
    dy: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let k = g.k;
    let mut dx = vec![F::zero(); x.len()];
    let mut dw = vec![F::zero(); w.len()];
    let mut db = vec![F::zero(); g.c_out];
    for co in 0..g.c_out {
        db[co] = dy[co * g.oh * g.ow..(co + 1) * g.oh * g.ow].iter().copied().sum();
    }
    for ci in 0..g.c_in {
        for ih in 0..g.h {
            for iw in 0..g.w {
                let xi = (ci * g.h + ih) * g.w + iw;
                let xv = x[xi];
                let mut acc = F::zero();
                for co in 0..g.c_out {
                    for kh in 0..k {
                        let Some(oh) = g.dst(ih, kh, g.oh) else { continue };
                        for kw in 0..k {
                            let Some(ow) = g.dst(iw, kw, g.ow) else { continue };
                            let wi = ((ci * g.c_out + co) * k + kh) * k + kw;
                            let d = dy[(co * g.oh + oh) * g.ow + ow];
                            acc += d * w[wi];
                            dw[wi] += d * xv;
                        }
                    }
                }
                dx[xi] = acc;
            }
        }
    }
    (dx, dw, db)
}

/// Plain-loop 2-D convolution over `[C_in, H, W]`, returning `(data, oh, ow)`.
pub fn conv2d_reference<F: Real>(
    x: &[F],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[F],
    c_out: usize,
    k: usize,
    bias: &[F],
    stride: usize,
    pad: usize,
) -> (Vec<F>, usize, usize) {
    let g = ConvGeom::conv(c_in, c_out, h, w, k, stride, pad);
    (conv2d_forward(&g, x, weight, bias), g.oh, g.ow)
}

/// Plain-loop transposed 2-D convolution, returning `(data, oh, ow)`.
pub fn conv_transpose2d_reference<F: Real>(
    x: &[F],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[F],
    c_out: usize,
    k: usize,
    bias: &[F],
    stride: usize,
    pad: usize,
) -> (Vec<F>, usize, usize) {
    let g = ConvGeom::transposed(c_in, c_out, h, w, k, stride, pad);
    (conv_transpose2d_forward(&g, x, weight, bias), g.oh, g.ow)
}
