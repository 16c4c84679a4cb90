//! Raw loops behind the tape primitives. Shapes are validated by the caller.

/// Geometry of a single-sample 2-D cross-correlation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output positions `o` in `[lo, hi)` whose input coordinate
    /// `o * stride + k - pad` lands inside `[0, extent)`.
    fn valid_range(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride;
        // smallest o with o*s + k >= pad
        let lo = if k >= self.pad {
            0
        } else {
            (self.pad - k).div_ceil(s)
        };
        // largest o with o*s + k - pad < extent  <=>  o*s < extent + pad - k
        let hi = if extent + self.pad > k {
            (extent + self.pad - k).div_ceil(s)
        } else {
            0
        };
        (lo.min(out_extent), hi.min(out_extent))
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `da += dc · bᵀ`
pub(crate) fn matmul_grad_a(dc: &[f64], b: &[f64], m: usize, k: usize, n: usize, da: &mut [f64]) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] += dcrow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `db += aᵀ · dc`
pub(crate) fn matmul_grad_b(dc: &[f64], a: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (d, g) in dbrow.iter_mut().zip(dcrow) {
                *d += aip * g;
            }
        }
    }
}

/// Walks every (output, input) row pair touched by kernel tap `(ky, kx)`,
/// handing `f` the output row offset, the input row offset, and the
/// valid `[ox_lo, ox_hi)` output column span.
#[inline]
fn for_each_tap_row(
    g: &ConvGeom,
    ky: usize,
    kx: usize,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.oh);
    let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.ow);
    if ox_lo >= ox_hi {
        return;
    }
    for oy in oy_lo..oy_hi {
        let iy = oy * g.stride + ky - g.pad;
        f(oy * g.ow, iy * g.w, ox_lo, ox_hi);
    }
}

impl ConvGeom {
    /// 3×3 kernel, stride 1, padding 1: the CWNet layer shape.
    fn is_same3x3(&self) -> bool {
        self.kh == 3 && self.kw == 3 && self.stride == 1 && self.pad == 1 && self.w >= 2
    }
}

/// `out += Σ_taps w[ky][kx] · src[y + ky - 1][x + kx - 1]` over one
/// `h×w` plane with zero padding of 1. Fuses the nine taps so that each
/// output element is loaded and stored once per input plane.
fn correlate3x3_plane(src: &[f64], w9: &[f64; 9], h: usize, w: usize, out: &mut [f64]) {
    let zero = vec![0.0; w];
    for y in 0..h {
        let rows = [
            if y > 0 { &src[(y - 1) * w..y * w] } else { &zero[..] },
            &src[y * w..(y + 1) * w],
            if y + 1 < h { &src[(y + 1) * w..(y + 2) * w] } else { &zero[..] },
        ];
        let o = &mut out[y * w..(y + 1) * w];
        // interior columns 1..w-1
        {
            let inner = &mut o[1..w - 1];
            let n = inner.len();
            let (a0, b0, c0) = (&rows[0][..n], &rows[0][1..n + 1], &rows[0][2..n + 2]);
            let (a1, b1, c1) = (&rows[1][..n], &rows[1][1..n + 1], &rows[1][2..n + 2]);
            let (a2, b2, c2) = (&rows[2][..n], &rows[2][1..n + 1], &rows[2][2..n + 2]);
            for i in 0..n {
                inner[i] += w9[0] * a0[i]
                    + w9[1] * b0[i]
                    + w9[2] * c0[i]
                    + w9[3] * a1[i]
                    + w9[4] * b1[i]
                    + w9[5] * c1[i]
                    + w9[6] * a2[i]
                    + w9[7] * b2[i]
                    + w9[8] * c2[i];
            }
        }
        for (ky, r) in rows.iter().enumerate() {
            o[0] += w9[3 * ky + 1] * r[0] + w9[3 * ky + 2] * r[1];
            o[w - 1] += w9[3 * ky] * r[w - 2] + w9[3 * ky + 1] * r[w - 1];
        }
    }
}

fn taps(k: &[f64], g: &ConvGeom, co: usize, ci: usize) -> [f64; 9] {
    let base = (co * g.c_in + ci) * 9;
    k[base..base + 9].try_into().expect("3x3 kernel")
}

pub(crate) fn conv2d_forward(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.c_out * plane];
    if g.is_same3x3() {
        for (co, out_c) in out.chunks_mut(plane).enumerate() {
            for ci in 0..g.c_in {
                let x_c = &x[ci * plane..(ci + 1) * plane];
                correlate3x3_plane(x_c, &taps(k, g, co, ci), g.h, g.w, out_c);
            }
        }
        return out;
    }
    for co in 0..g.c_out {
        let out_c = &mut out[co * plane..(co + 1) * plane];
        for ci in 0..g.c_in {
            let x_c = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = k[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    for_each_tap_row(g, ky, kx, |orow, irow, lo, hi| {
                        let ix0 = lo * g.stride + kx - g.pad;
                        let dst = &mut out_c[orow + lo..orow + hi];
                        if g.stride == 1 {
                            let src = &x_c[irow + ix0..irow + ix0 + (hi - lo)];
                            for (o, i) in dst.iter_mut().zip(src) {
                                *o += wv * i;
                            }
                        } else {
                            for (j, o) in dst.iter_mut().enumerate() {
                                *o += wv * x_c[irow + ix0 + j * g.stride];
                            }
                        }
                    });
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_grad_input(dout: &[f64], k: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plane = g.oh * g.ow;
    if g.is_same3x3() {
        // transposed correlation: the same stencil with the kernel rotated 180°
        for (ci, dx_c) in dx.chunks_mut(plane).enumerate() {
            for co in 0..g.c_out {
                let mut w9 = taps(k, g, co, ci);
                w9.reverse();
                correlate3x3_plane(&dout[co * plane..(co + 1) * plane], &w9, g.h, g.w, dx_c);
            }
        }
        return;
    }
    for co in 0..g.c_out {
        let d_c = &dout[co * plane..(co + 1) * plane];
        for ci in 0..g.c_in {
            let dx_c = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = k[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    for_each_tap_row(g, ky, kx, |orow, irow, lo, hi| {
                        let ix0 = lo * g.stride + kx - g.pad;
                        let src = &d_c[orow + lo..orow + hi];
                        if g.stride == 1 {
                            let dst = &mut dx_c[irow + ix0..irow + ix0 + (hi - lo)];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        } else {
                            for (j, s) in src.iter().enumerate() {
                                dx_c[irow + ix0 + j * g.stride] += wv * s;
                            }
                        }
                    });
                }
            }
        }
    }
}

pub(crate) fn conv2d_grad_kernel(dout: &[f64], x: &[f64], g: &ConvGeom, dk: &mut [f64]) {
    let plane = g.oh * g.ow;
    for co in 0..g.c_out {
        let d_c = &dout[co * plane..(co + 1) * plane];
        for ci in 0..g.c_in {
            let x_c = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let mut acc = 0.0;
                    for_each_tap_row(g, ky, kx, |orow, irow, lo, hi| {
                        let ix0 = lo * g.stride + kx - g.pad;
                        let src = &d_c[orow + lo..orow + hi];
                        if g.stride == 1 {
                            let xs = &x_c[irow + ix0..irow + ix0 + (hi - lo)];
                            acc += src.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                        } else {
                            for (j, s) in src.iter().enumerate() {
                                acc += s * x_c[irow + ix0 + j * g.stride];
                            }
                        }
                    });
                    dk[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx] += acc;
                }
            }
        }
    }
}

/// Non-overlapping `window × window` max pooling. Returns the pooled values
/// and, per output, the flat input index that won. Ties go to the lowest
/// flat index.
pub(crate) fn maxpool_forward(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    window: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / window, w / window);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * window * w + ox * window;
                let mut best = x[best_idx];
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * window + dy) * w + ox * window + dx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_handles_padding_edges() {
        let g = ConvGeom {
            c_in: 1,
            h: 5,
            w: 5,
            c_out: 1,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
            oh: 5,
            ow: 5,
        };
        assert_eq!(g.valid_range(0, 5, 5), (1, 5));
        assert_eq!(g.valid_range(1, 5, 5), (0, 5));
        assert_eq!(g.valid_range(2, 5, 5), (0, 4));
    }

    #[test]
    fn valid_range_with_stride() {
        // h=5, k=3, pad=1, stride=2 -> oh = 3; input rows 2o+k-1
        let g = ConvGeom {
            c_in: 1,
            h: 5,
            w: 5,
            c_out: 1,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
            oh: 3,
            ow: 3,
        };
        assert_eq!(g.valid_range(0, 5, 3), (1, 3));
        assert_eq!(g.valid_range(2, 5, 3), (0, 2));
    }
}
