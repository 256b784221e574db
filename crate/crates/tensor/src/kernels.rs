//! Slice-level kernels behind the graph operations. Everything here works on
//! raw row-major buffers; shape validation happens in the graph layer.

use crate::real::Real;

/// Patch geometry shared by convolution (image = input) and transposed
/// convolution (image = nominal output).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn grid_len(&self) -> usize {
        self.batch * self.oh * self.ow
    }

    /// Source coordinate of tap `k` for grid position `o`, or `None` when it
    /// falls into the zero padding.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Gathers patches into a `[C*kh*kw, B*oh*ow]` matrix.
pub(crate) fn im2col<T: Real>(g: &ConvGeom, image: &[T]) -> Vec<T> {
    let grid = g.grid_len();
    let plane = g.oh * g.ow;
    let mut cols = vec![T::zero(); g.patch_len() * grid];
    for c in 0..g.channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst_row = &mut cols[row * grid..(row + 1) * grid];
                for b in 0..g.batch {
                    let src_plane = &image[(b * g.channels + c) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.oh {
                        let Some(y) = g.src(oy, i, g.h) else { continue };
                        let src_row = &src_plane[y * g.w..(y + 1) * g.w];
                        let dst_seg = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        for (ox, d) in dst_seg.iter_mut().enumerate() {
                            if let Some(x) = g.src(ox, j, g.w) {
                                *d = src_row[x];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into an image.
pub(crate) fn col2im<T: Real>(g: &ConvGeom, cols: &[T], image: &mut [T]) {
    let grid = g.grid_len();
    let plane = g.oh * g.ow;
    for c in 0..g.channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src_row = &cols[row * grid..(row + 1) * grid];
                for b in 0..g.batch {
                    let dst_plane =
                        &mut image[(b * g.channels + c) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.oh {
                        let Some(y) = g.src(oy, i, g.h) else { continue };
                        let seg = &src[oy * g.ow..(oy + 1) * g.ow];
                        for (ox, &v) in seg.iter().enumerate() {
                            if let Some(x) = g.src(ox, j, g.w) {
                                dst_plane[y * g.w + x] = dst_plane[y * g.w + x] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[B, C, P]` -> `[C, B*P]`.
pub(crate) fn batch_to_channel_major<T: Real>(x: &[T], b: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[ci * b * p + bi * p..][..p].copy_from_slice(&x[(bi * c + ci) * p..][..p]);
        }
    }
    out
}

/// `[C, B*P]` -> `[B, C, P]`.
pub(crate) fn channel_major_to_batch<T: Real>(x: &[T], b: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[(bi * c + ci) * p..][..p].copy_from_slice(&x[ci * b * p + bi * p..][..p]);
        }
    }
    out
}

/// Copies `src` (spatial `sh x sw`) into `dst` (spatial `dh x dw`) so that
/// `dst[y][x] = src[y + off_y][x + off_x]`, zero where out of range.
pub(crate) fn shift_window<T: Real>(
    planes: usize,
    src: &[T],
    (sh, sw): (usize, usize),
    dst: &mut [T],
    (dh, dw): (usize, usize),
    (off_y, off_x): (isize, isize),
) {
    for p in 0..planes {
        for y in 0..dh {
            let sy = y as isize + off_y;
            if sy < 0 || sy as usize >= sh {
                continue;
            }
            for x in 0..dw {
                let sx = x as isize + off_x;
                if sx < 0 || sx as usize >= sw {
                    continue;
                }
                let s = p * sh * sw + sy as usize * sw + sx as usize;
                dst[p * dh * dw + y * dw + x] = src[s];
            }
        }
    }
}

/// Adjoint of [`shift_window`]: `grad_src[y+off_y][x+off_x] += grad_dst[y][x]`.
pub(crate) fn shift_window_adjoint<T: Real>(
    planes: usize,
    grad_dst: &[T],
    (dh, dw): (usize, usize),
    grad_src: &mut [T],
    (sh, sw): (usize, usize),
    (off_y, off_x): (isize, isize),
) {
    for p in 0..planes {
        for y in 0..dh {
            let sy = y as isize + off_y;
            if sy < 0 || sy as usize >= sh {
                continue;
            }
            for x in 0..dw {
                let sx = x as isize + off_x;
                if sx < 0 || sx as usize >= sw {
                    continue;
                }
                let s = p * sh * sw + sy as usize * sw + sx as usize;
                grad_src[s] = grad_src[s] + grad_dst[p * dh * dw + y * dw + x];
            }
        }
    }
}

/// One output coordinate of a 1-D bilinear resampling: two source taps and
/// their weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: f64,
    pub w_hi: f64,
}

/// Align-corners-false sampling positions: `src = (dst + 0.5) * in/out - 0.5`,
/// clamped to the valid range.
pub(crate) fn bilinear_taps(src_len: usize, dst_len: usize) -> Vec<Tap> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src_len - 1);
            let hi = (lo + 1).min(src_len - 1);
            let frac = if hi == lo { 0.0 } else { pos - lo as f64 };
            Tap {
                lo,
                hi,
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

/// Interpolates in lerp form (`a + (b - a) * t`) so constant planes stay
/// bit-exact.
pub(crate) fn bilinear_forward<T: Real>(
    planes: usize,
    src: &[T],
    (sh, sw): (usize, usize),
    rows: &[Tap],
    cols: &[Tap],
) -> Vec<T> {
    let (dh, dw) = (rows.len(), cols.len());
    let mut out = vec![T::zero(); planes * dh * dw];
    let cf: Vec<T> = cols.iter().map(|t| T::from_f64_lossy(t.w_hi)).collect();
    for p in 0..planes {
        let plane = &src[p * sh * sw..(p + 1) * sh * sw];
        for (y, r) in rows.iter().enumerate() {
            let rf = T::from_f64_lossy(r.w_hi);
            let top = &plane[r.lo * sw..(r.lo + 1) * sw];
            let bot = &plane[r.hi * sw..(r.hi + 1) * sw];
            let dst = &mut out[(p * dh + y) * dw..(p * dh + y + 1) * dw];
            for (x, c) in cols.iter().enumerate() {
                let t = top[c.lo] + (top[c.hi] - top[c.lo]) * cf[x];
                let b = bot[c.lo] + (bot[c.hi] - bot[c.lo]) * cf[x];
                dst[x] = t + (b - t) * rf;
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward<T: Real>(
    planes: usize,
    grad_out: &[T],
    (sh, sw): (usize, usize),
    rows: &[Tap],
    cols: &[Tap],
) -> Vec<T> {
    let (dh, dw) = (rows.len(), cols.len());
    let mut grad = vec![T::zero(); planes * sh * sw];
    for p in 0..planes {
        let plane = &mut grad[p * sh * sw..(p + 1) * sh * sw];
        for (y, r) in rows.iter().enumerate() {
            let (rl, rh) = (T::from_f64_lossy(r.w_lo), T::from_f64_lossy(r.w_hi));
            for (x, c) in cols.iter().enumerate() {
                let g = grad_out[(p * dh + y) * dw + x];
                let (cl, ch) = (T::from_f64_lossy(c.w_lo), T::from_f64_lossy(c.w_hi));
                plane[r.lo * sw + c.lo] = plane[r.lo * sw + c.lo] + g * rl * cl;
                plane[r.lo * sw + c.hi] = plane[r.lo * sw + c.hi] + g * rl * ch;
                plane[r.hi * sw + c.lo] = plane[r.hi * sw + c.lo] + g * rh * cl;
                plane[r.hi * sw + c.hi] = plane[r.hi * sw + c.hi] + g * rh * ch;
            }
        }
    }
    grad
}

/// Source index (row-major in an `h x w` plane) for every output position of
/// a counter-clockwise rotation by `quarter_turns * 90` degrees.
pub(crate) fn rot90_source_indices(h: usize, w: usize, quarter_turns: usize) -> Vec<usize> {
    let k = quarter_turns % 4;
    let (oh, ow) = if k % 2 == 1 { (w, h) } else { (h, w) };
    let mut idx = Vec::with_capacity(h * w);
    for i in 0..oh {
        for j in 0..ow {
            let (r, c) = match k {
                0 => (i, j),
                1 => (j, w - 1 - i),
                2 => (h - 1 - i, w - 1 - j),
                _ => (h - 1 - j, i),
            };
            idx.push(r * w + c);
        }
    }
    idx
}
