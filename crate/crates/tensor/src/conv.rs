//! Convolution kernels. The lowered (im2col + GEMM) path is used for `f32`
//! builds; the `f64` build runs the direct loops so results reproduce a naive
//! nested-loop evaluation exactly.

use crate::Float;

/// Static geometry of one NCHW × OIKK convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Input coordinate for output position `o_pos` and kernel offset `koff`,
    /// or `None` when it falls into padding.
    #[inline]
    fn src(&self, o_pos: usize, koff: usize, extent: usize) -> Option<usize> {
        let p = (o_pos * self.stride + koff) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

impl ConvGeom {
    /// Output positions `[lo, hi)` whose tap at kernel offset `koff` lands
    /// inside an input axis of length `extent`.
    #[inline]
    fn valid(&self, koff: usize, extent: usize, out: usize) -> (usize, usize) {
        let lo = if self.pad > koff { (self.pad - koff).div_ceil(self.stride) } else { 0 };
        let hi = if extent + self.pad > koff { ((extent - 1 + self.pad - koff) / self.stride + 1).min(out) } else { 0 };
        (lo.min(hi), hi)
    }
}

/// Output and whatever the backward pass needs to keep.
pub(crate) struct ConvForward {
    pub out: Vec<Float>,
    pub saved_cols: Option<Vec<Float>>,
}

pub(crate) fn forward(g: &ConvGeom, x: &[Float], wt: &[Float]) -> ConvForward {
    #[cfg(not(feature = "f64"))]
    {
        let cols = im2col(g, x);
        let out = lowered_forward(g, &cols, wt);
        ConvForward { out, saved_cols: Some(cols) }
    }
    #[cfg(feature = "f64")]
    {
        ConvForward { out: direct_forward(g, x, wt), saved_cols: None }
    }
}

/// Returns `(d_input, d_weight)`.
pub(crate) fn backward(
    g: &ConvGeom,
    x: &[Float],
    wt: &[Float],
    saved_cols: Option<&[Float]>,
    gout: &[Float],
) -> (Vec<Float>, Vec<Float>) {
    match saved_cols {
        Some(cols) => lowered_backward(g, cols, wt, gout),
        None => direct_backward(g, x, wt, gout),
    }
}

/// Lays out receptive fields as a `[C·K·K, N·Ho·Wo]` matrix.
#[cfg_attr(feature = "f64", allow(dead_code))]
pub(crate) fn im2col(g: &ConvGeom, x: &[Float]) -> Vec<Float> {
    let ncols = g.n * g.plane();
    let mut cols = vec![0.0; g.ckk() * ncols];
    for c in 0..g.c {
        for kh in 0..g.k {
            let (oh_lo, oh_hi) = g.valid(kh, g.h, g.ho);
            for kw in 0..g.k {
                let (ow_lo, ow_hi) = g.valid(kw, g.w, g.wo);
                let row = (c * g.k + kh) * g.k + kw;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let img = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + kh - g.pad;
                        let base = n * g.plane() + oh * g.wo;
                        let src_row = &img[ih * g.w..][..g.w];
                        let first = ow_lo * g.stride + kw - g.pad;
                        let d = &mut dst[base + ow_lo..base + ow_hi];
                        for (dv, sv) in d.iter_mut().zip(src_row[first..].iter().step_by(g.stride)) {
                            *dv = *sv;
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(g: &ConvGeom, cols: &[Float]) -> Vec<Float> {
    let ncols = g.n * g.plane();
    let mut dx = vec![0.0; g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for kh in 0..g.k {
            let (oh_lo, oh_hi) = g.valid(kh, g.h, g.ho);
            for kw in 0..g.k {
                let (ow_lo, ow_hi) = g.valid(kw, g.w, g.wo);
                let row = (c * g.k + kh) * g.k + kw;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let img = &mut dx[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + kh - g.pad;
                        let base = n * g.plane() + oh * g.wo;
                        let dst_row = &mut img[ih * g.w..][..g.w];
                        let first = ow_lo * g.stride + kw - g.pad;
                        let sv = &src[base + ow_lo..base + ow_hi];
                        for (dv, sv) in dst_row[first..].iter_mut().step_by(g.stride).zip(sv) {
                            *dv += *sv;
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg_attr(feature = "f64", allow(dead_code))]
fn lowered_forward(g: &ConvGeom, cols: &[Float], wt: &[Float]) -> Vec<Float> {
    use crate::gemm::{gemm, Layout};
    let ncols = g.n * g.plane();
    // [O, N·P] in channel-major order, then scattered back to NCHW.
    let mut prod = vec![0.0; g.o * ncols];
    gemm(
        g.o,
        g.ckk(),
        ncols,
        wt,
        Layout::row_major(g.ckk()),
        cols,
        Layout::row_major(ncols),
        0.0,
        &mut prod,
        Layout::row_major(ncols),
    );
    let plane = g.plane();
    let mut out = vec![0.0; g.n * g.o * plane];
    for o in 0..g.o {
        for n in 0..g.n {
            out[(n * g.o + o) * plane..][..plane].copy_from_slice(&prod[o * ncols + n * plane..][..plane]);
        }
    }
    out
}

fn lowered_backward(g: &ConvGeom, cols: &[Float], wt: &[Float], gout: &[Float]) -> (Vec<Float>, Vec<Float>) {
    use crate::gemm::{gemm, Layout};
    let plane = g.plane();
    let ncols = g.n * plane;
    let mut gp = vec![0.0; g.o * ncols];
    for o in 0..g.o {
        for n in 0..g.n {
            gp[o * ncols + n * plane..][..plane].copy_from_slice(&gout[(n * g.o + o) * plane..][..plane]);
        }
    }
    let ckk = g.ckk();
    let mut dw = vec![0.0; g.o * ckk];
    gemm(
        g.o,
        ncols,
        ckk,
        &gp,
        Layout::row_major(ncols),
        cols,
        Layout::transposed(ncols),
        0.0,
        &mut dw,
        Layout::row_major(ckk),
    );
    let mut dcols = vec![0.0; ckk * ncols];
    gemm(
        ckk,
        g.o,
        ncols,
        wt,
        Layout::transposed(ckk),
        &gp,
        Layout::row_major(ncols),
        0.0,
        &mut dcols,
        Layout::row_major(ncols),
    );
    (col2im(g, &dcols), dw)
}

/// Nested-loop convolution, accumulating over (c, kh, kw) in that order.
#[cfg_attr(not(feature = "f64"), allow(dead_code))]
pub(crate) fn direct_forward(g: &ConvGeom, x: &[Float], wt: &[Float]) -> Vec<Float> {
    let mut out = vec![0.0; g.n * g.o * g.plane()];
    for n in 0..g.n {
        for o in 0..g.o {
            for oh in 0..g.ho {
                for ow in 0..g.wo {
                    let mut acc: Float = 0.0;
                    for c in 0..g.c {
                        for kh in 0..g.k {
                            let Some(ih) = g.src(oh, kh, g.h) else { continue };
                            for kw in 0..g.k {
                                let Some(iw) = g.src(ow, kw, g.w) else { continue };
                                acc += x[((n * g.c + c) * g.h + ih) * g.w + iw]
                                    * wt[((o * g.c + c) * g.k + kh) * g.k + kw];
                            }
                        }
                    }
                    out[((n * g.o + o) * g.ho + oh) * g.wo + ow] = acc;
                }
            }
        }
    }
    out
}

fn direct_backward(g: &ConvGeom, x: &[Float], wt: &[Float], gout: &[Float]) -> (Vec<Float>, Vec<Float>) {
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; wt.len()];
    for n in 0..g.n {
        for o in 0..g.o {
            for oh in 0..g.ho {
                for ow in 0..g.wo {
                    let go = gout[((n * g.o + o) * g.ho + oh) * g.wo + ow];
                    if go == 0.0 {
                        continue;
                    }
                    for c in 0..g.c {
                        for kh in 0..g.k {
                            let Some(ih) = g.src(oh, kh, g.h) else { continue };
                            for kw in 0..g.k {
                                let Some(iw) = g.src(ow, kw, g.w) else { continue };
                                let xi = ((n * g.c + c) * g.h + ih) * g.w + iw;
                                let wi = ((o * g.c + c) * g.k + kh) * g.k + kw;
                                dx[xi] += go * wt[wi];
                                dw[wi] += go * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}
