//! Serial compute kernels. Every reduction runs in a fixed order so results
//! are bit-reproducible.

use crate::real::Real;

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c += alpha * op(a) * op(b)` for one matrix pair, where `op(a)` is `m x k`
/// and `op(b)` is `k x n`. With `ta` the buffer `a` is stored `k x m`; with
/// `tb` the buffer `b` is stored `n x k`.
/// Outputs up to this many elements stay cache resident across the `k` sweep.
const SMALL_OUT: usize = 16 * 1024;

#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    c: &mut [T],
) {
    // Loop orders differ only in memory traffic; every output element still
    // accumulates over `p` in increasing order.
    let small_out = m * n <= SMALL_OUT;
    match (ta, tb) {
        (false, false) | (true, false) if small_out => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let s = alpha * if ta { a[p * m + i] } else { a[i * k + p] };
                    if s != T::zero() {
                        axpy(s, brow, &mut c[i * n..(i + 1) * n]);
                    }
                }
            }
        }
        (false, false) | (true, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let s = alpha * if ta { a[p * m + i] } else { a[i * k + p] };
                    if s != T::zero() {
                        axpy(s, &b[p * n..(p + 1) * n], crow);
                    }
                }
            }
        }
        (false, true) if m < n => {
            for j in 0..n {
                let bcol = &b[j * k..(j + 1) * k];
                for i in 0..m {
                    c[i * n + j] += alpha * dot(&a[i * k..(i + 1) * k], bcol);
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    c[i * n + j] += alpha * dot(arow, &b[j * k..(j + 1) * k]);
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = T::zero();
                    for p in 0..k {
                        s += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += alpha * s;
                }
            }
        }
    }
}

/// Valid output range along one axis for a kernel tap at offset `off`
/// (tap index minus padding): output positions `o` with `0 <= o + off < len`.
#[inline]
fn tap_range(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).min(len as isize).max(0) as usize;
    (lo.min(hi), hi)
}

pub(crate) struct ConvShape {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvShape {
    fn pads(&self) -> (isize, isize) {
        ((self.kh / 2) as isize, (self.kw / 2) as isize)
    }
}

/// Stride-1 "same" convolution (cross-correlation) with zero padding.
pub(crate) fn conv2d_forward<T: Real>(s: &ConvShape, x: &[T], wt: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let hw = s.h * s.w;
    let (ph, pw) = s.pads();
    for b in 0..s.batch {
        for oc in 0..s.cout {
            let o = &mut out[(b * s.cout + oc) * hw..(b * s.cout + oc + 1) * hw];
            if let Some(bias) = bias {
                o.iter_mut().for_each(|v| *v = bias[oc]);
            }
            for ic in 0..s.cin {
                let xin = &x[(b * s.cin + ic) * hw..(b * s.cin + ic + 1) * hw];
                for ky in 0..s.kh {
                    let dy = ky as isize - ph;
                    let (y0, y1) = tap_range(s.h, dy);
                    for kx in 0..s.kw {
                        let wv = wt[((oc * s.cin + ic) * s.kh + ky) * s.kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let dx = kx as isize - pw;
                        let (x0, x1) = tap_range(s.w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let src = &xin[sy * s.w + (x0 as isize + dx) as usize..sy * s.w + (x1 as isize + dx) as usize];
                            axpy(wv, src, &mut o[y * s.w + x0..y * s.w + x1]);
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of the convolution with respect to input, weights and bias.
pub(crate) fn conv2d_backward<T: Real>(
    s: &ConvShape,
    x: &[T],
    wt: &[T],
    gout: &[T],
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let hw = s.h * s.w;
    let (ph, pw) = s.pads();
    if let Some(gb) = gb {
        for oc in 0..s.cout {
            let mut acc = T::zero();
            for b in 0..s.batch {
                acc += gout[(b * s.cout + oc) * hw..(b * s.cout + oc + 1) * hw]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
            gb[oc] = acc;
        }
    }
    if let Some(gw) = gw {
        for oc in 0..s.cout {
            for ic in 0..s.cin {
                for ky in 0..s.kh {
                    let dy = ky as isize - ph;
                    let (y0, y1) = tap_range(s.h, dy);
                    for kx in 0..s.kw {
                        let dx = kx as isize - pw;
                        let (x0, x1) = tap_range(s.w, dx);
                        let mut acc = T::zero();
                        if x0 < x1 {
                            for b in 0..s.batch {
                                let go = &gout[(b * s.cout + oc) * hw..(b * s.cout + oc + 1) * hw];
                                let xin = &x[(b * s.cin + ic) * hw..(b * s.cin + ic + 1) * hw];
                                for y in y0..y1 {
                                    let sy = (y as isize + dy) as usize;
                                    acc += dot(
                                        &go[y * s.w + x0..y * s.w + x1],
                                        &xin[sy * s.w + (x0 as isize + dx) as usize
                                            ..sy * s.w + (x1 as isize + dx) as usize],
                                    );
                                }
                            }
                        }
                        gw[((oc * s.cin + ic) * s.kh + ky) * s.kw + kx] = acc;
                    }
                }
            }
        }
    }
    if let Some(gx) = gx {
        gx.iter_mut().for_each(|v| *v = T::zero());
        for b in 0..s.batch {
            for ic in 0..s.cin {
                let gxi = &mut gx[(b * s.cin + ic) * hw..(b * s.cin + ic + 1) * hw];
                for oc in 0..s.cout {
                    let go = &gout[(b * s.cout + oc) * hw..(b * s.cout + oc + 1) * hw];
                    for ky in 0..s.kh {
                        let dy = ky as isize - ph;
                        let (y0, y1) = tap_range(s.h, dy);
                        for kx in 0..s.kw {
                            let wv = wt[((oc * s.cin + ic) * s.kh + ky) * s.kw + kx];
                            if wv == T::zero() {
                                continue;
                            }
                            let dx = kx as isize - pw;
                            let (x0, x1) = tap_range(s.w, dx);
                            if x0 >= x1 {
                                continue;
                            }
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let dst = &mut gxi[sy * s.w + (x0 as isize + dx) as usize
                                    ..sy * s.w + (x1 as isize + dx) as usize];
                                axpy(wv, &go[y * s.w + x0..y * s.w + x1], dst);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 average pooling over planes of `h x w`; `planes` = batch * channels.
pub(crate) fn avgpool2<T: Real>(planes: usize, h: usize, w: usize, x: &[T], out: &mut [T]) {
    let (oh, ow) = (h / 2, w / 2);
    let q = T::lit(0.25);
    for p in 0..planes {
        let xi = &x[p * h * w..(p + 1) * h * w];
        let o = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let r0 = 2 * i * w + 2 * j;
                let r1 = r0 + w;
                o[i * ow + j] = ((xi[r0] + xi[r0 + 1]) + (xi[r1] + xi[r1 + 1])) * q;
            }
        }
    }
}

/// 2x2 max pooling; records the flat input index of each window's maximum.
/// Ties resolve to the first index in row-major order.
pub(crate) fn maxpool2<T: Real>(planes: usize, h: usize, w: usize, x: &[T], out: &mut [T], arg: &mut [usize]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let r0 = base + 2 * i * w + 2 * j;
                let cand = [r0, r0 + 1, r0 + w, r0 + w + 1];
                let mut best = cand[0];
                for &c in &cand[1..] {
                    if x[c] > x[best] {
                        best = c;
                    }
                }
                let o = p * oh * ow + i * ow + j;
                out[o] = x[best];
                arg[o] = best;
            }
        }
    }
}

/// Nearest-neighbour 2x upsampling.
pub(crate) fn upsample2<T: Real>(planes: usize, h: usize, w: usize, x: &[T], out: &mut [T]) {
    let ow = 2 * w;
    for p in 0..planes {
        let xi = &x[p * h * w..(p + 1) * h * w];
        let o = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for i in 0..h {
            for j in 0..w {
                let v = xi[i * w + j];
                let r0 = 2 * i * ow + 2 * j;
                o[r0] = v;
                o[r0 + 1] = v;
                o[r0 + ow] = v;
                o[r0 + ow + 1] = v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_all_transpose_variants_agree_with_naive() {
        // Shapes cover both loop orders of every variant.
        for (m, n, k) in [(3usize, 4usize, 5usize), (6, 3, 4), (4, 5000, 3), (300, 80, 2)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
            let mut want = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    for p in 0..k {
                        want[i * n + j] += a[i * k + p] * b[p * n + j];
                    }
                }
            }
            let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
            let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
            for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
                let mut c = vec![0.0; m * n];
                let aa = if ta { &at } else { &a };
                let bb = if tb { &bt } else { &b };
                gemm(ta, tb, m, n, k, 1.0, aa, bb, &mut c);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12, "ta={ta} tb={tb}");
                }
            }
        }
    }

    #[test]
    fn maxpool_ties_take_first_index() {
        let x = [1.0f64, 1.0, 1.0, 1.0];
        let mut out = [0.0];
        let mut arg = [9];
        maxpool2(1, 2, 2, &x, &mut out, &mut arg);
        assert_eq!(arg[0], 0);
    }
}
