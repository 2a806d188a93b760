//! Raw loops behind the tape ops. Layout is NCHW throughout.

use crate::tensor::{gemm, Element, MatRef};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    pub fn in_plane(&self) -> usize {
        self.h * self.w
    }

    /// 1x1, stride 1, no padding: im2col is the identity.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Input coordinate hit by output index `o` at kernel tap `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

pub(crate) fn im2col<T: Element>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        let xc = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    match g.src(oy, ki, g.h) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            let src = &xc[iy * g.w..(iy + 1) * g.w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.src(ox, kj, g.w) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_add<T: Element>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        let dxc = &mut dx[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, ki, g.h) else { continue };
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut dxc[iy * g.w..(iy + 1) * g.w];
                    for (ox, v) in line.iter().enumerate() {
                        if let Some(ix) = g.src(ox, kj, g.w) {
                            dst[ix] += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution for a batch. Returns the output and, when `keep_cols`
/// is set and the kernel is not pointwise, the per-sample im2col buffers.
pub(crate) fn conv_forward<T: Element>(
    x: &[T],
    n: usize,
    weight: &[T],
    out_ch: usize,
    bias: Option<&[T]>,
    g: &ConvGeom,
    keep_cols: bool,
) -> (Vec<T>, Vec<T>) {
    let patch = g.patch();
    let plane = g.out_plane();
    let in_len = g.c * g.in_plane();
    let mut out = vec![T::zero(); n * out_ch * plane];
    let mut saved = Vec::new();
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * plane]
    };
    if keep_cols && !g.is_pointwise() {
        saved.reserve(n * patch * plane);
    }
    let wm = MatRef::new(weight, out_ch, patch);
    for s in 0..n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let cols: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut col);
            if keep_cols {
                saved.extend_from_slice(&col);
            }
            &col
        };
        let os = &mut out[s * out_ch * plane..(s + 1) * out_ch * plane];
        gemm(wm, MatRef::new(cols, patch, plane), T::zero(), os);
        if let Some(b) = bias {
            for (o, bo) in b.iter().enumerate() {
                for v in &mut os[o * plane..(o + 1) * plane] {
                    *v += *bo;
                }
            }
        }
    }
    (out, saved)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Element>(
    x: &[T],
    cols: &[T],
    n: usize,
    weight: &[T],
    out_ch: usize,
    g: &ConvGeom,
    dy: &[T],
    need_dx: bool,
) -> ConvGrads<T> {
    let patch = g.patch();
    let plane = g.out_plane();
    let in_len = g.c * g.in_plane();
    let mut dw = vec![T::zero(); out_ch * patch];
    let mut db = vec![T::zero(); out_ch];
    let mut dx = need_dx.then(|| vec![T::zero(); n * in_len]);
    let mut dcol = if need_dx && !g.is_pointwise() {
        vec![T::zero(); patch * plane]
    } else {
        Vec::new()
    };
    let wm = MatRef::new(weight, out_ch, patch);
    for s in 0..n {
        let dys = &dy[s * out_ch * plane..(s + 1) * out_ch * plane];
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += dys[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
        }
        let cs: &[T] = if g.is_pointwise() {
            &x[s * in_len..(s + 1) * in_len]
        } else {
            &cols[s * patch * plane..(s + 1) * patch * plane]
        };
        let dym = MatRef::new(dys, out_ch, plane);
        gemm(dym, MatRef::new(cs, patch, plane).t(), T::one(), &mut dw);
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            if g.is_pointwise() {
                gemm(wm.t(), dym, T::zero(), dxs);
            } else {
                gemm(wm.t(), dym, T::zero(), &mut dcol);
                col2im_add(&dcol, g, dxs);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Depthwise convolution: one `kh x kw` filter per channel.
pub(crate) fn depthwise_forward<T: Element>(
    x: &[T],
    n: usize,
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * g.c * g.out_plane()];
    for s in 0..n {
        for c in 0..g.c {
            let xc = &x[(s * g.c + c) * g.in_plane()..][..g.in_plane()];
            let wc = &weight[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            let oc = &mut out[(s * g.c + c) * g.out_plane()..][..g.out_plane()];
            let b = bias.map_or(T::zero(), |b| b[c]);
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = b;
                    for ki in 0..g.kh {
                        let Some(iy) = g.src(oy, ki, g.h) else { continue };
                        for kj in 0..g.kw {
                            if let Some(ix) = g.src(ox, kj, g.w) {
                                acc += wc[ki * g.kw + kj] * xc[iy * g.w + ix];
                            }
                        }
                    }
                    oc[oy * g.wo + ox] = acc;
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward<T: Element>(
    x: &[T],
    n: usize,
    weight: &[T],
    g: &ConvGeom,
    dy: &[T],
    need_dx: bool,
) -> ConvGrads<T> {
    let kk = g.kh * g.kw;
    let mut dw = vec![T::zero(); g.c * kk];
    let mut db = vec![T::zero(); g.c];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    for s in 0..n {
        for c in 0..g.c {
            let base_in = (s * g.c + c) * g.in_plane();
            let xc = &x[base_in..base_in + g.in_plane()];
            let dyc = &dy[(s * g.c + c) * g.out_plane()..][..g.out_plane()];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let d = dyc[oy * g.wo + ox];
                    db[c] += d;
                    for ki in 0..g.kh {
                        let Some(iy) = g.src(oy, ki, g.h) else { continue };
                        for kj in 0..g.kw {
                            if let Some(ix) = g.src(ox, kj, g.w) {
                                dw[c * kk + ki * g.kw + kj] += d * xc[iy * g.w + ix];
                                if let Some(dx) = dx.as_mut() {
                                    dx[base_in + iy * g.w + ix] += d * weight[c * kk + ki * g.kw + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// 2x2 max pooling, stride 2. Odd extents behave as if padded with -inf.
/// Returns the pooled values and the flat input index of each maximum
/// (first index wins on ties).
pub(crate) fn maxpool2x2<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for dy in 0..2 {
                    let iy = 2 * oy + dy;
                    if iy >= h {
                        continue;
                    }
                    for dx in 0..2 {
                        let ix = 2 * ox + dx;
                        if ix >= w {
                            continue;
                        }
                        let i = base + iy * w + ix;
                        if best_i == usize::MAX || x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}
