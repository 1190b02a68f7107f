//! Raw loops behind the graph operations. Everything here works on flat
//! row-major slices; shape checking happens in the graph layer.

use super::Scalar;

/// `c (m×n) = beta·c + a·b` where `a` is `m×k` (or `k×m` when `ta`) and
/// `b` is `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v = *v * beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every access made by the strided
    // layouts, and `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out_shape`, the flat offset of the element of an
/// input with shape `in_shape` that broadcasts onto it.
pub fn broadcast_offsets(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let in_strides = strides(in_shape);
    let mut bstride = vec![0usize; rank];
    for i in 0..in_shape.len() {
        if in_shape[i] != 1 {
            bstride[i + pad] = in_strides[i];
        }
    }
    let total: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += bstride[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= bstride[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

/// Sums `grad` (shaped like the broadcast output) back onto an input of
/// `numel` elements using precomputed broadcast offsets.
pub fn reduce_broadcast<T: Scalar>(grad: &[T], offsets: &[usize], numel: usize) -> Vec<T> {
    if numel == grad.len() {
        return grad.to_vec();
    }
    let mut out = vec![T::zero(); numel];
    for (g, &o) in grad.iter().zip(offsets) {
        out[o] = out[o] + *g;
    }
    out
}

/// Copies a `[c, h, w]` plane stack into `[c*9, ho*wo]` patch columns for a
/// 3×3 kernel with padding 1.
pub fn im2col3x3<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, stride: usize, cols: &mut [T]) {
    let ho = (h - 1) / stride + 1;
    let wo = (w - 1) / stride + 1;
    let plane = ho * wo;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * plane;
                let dst = &mut cols[row..row + plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        *v = if ix < 0 || ix >= w as isize { T::zero() } else { srow[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3x3`]: scatters patch columns back onto planes.
pub fn col2im3x3<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, stride: usize, dx: &mut [T]) {
    let ho = (h - 1) / stride + 1;
    let wo = (w - 1) / stride + 1;
    let plane = ho * wo;
    for ci in 0..c {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * plane;
                let src = &cols[row..row + plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] = drow[ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Two-tap bilinear weights for doubling a length-`n` axis with half-pixel
/// centers and edge clamping: output `o` reads `(i0, w0), (i1, w1)`.
fn upsample_taps(n: usize) -> Vec<(usize, f64, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let i = o / 2;
            if o % 2 == 0 {
                (i.saturating_sub(1), 0.25, i, 0.75)
            } else {
                (i, 0.75, (i + 1).min(n - 1), 0.25)
            }
        })
        .collect()
}

pub fn upsample2x<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let th = upsample_taps(h);
    let tw = upsample_taps(w);
    let (h2, w2) = (2 * h, 2 * w);
    let mut tmp = vec![T::zero(); planes * h2 * w];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut tmp[p * h2 * w..(p + 1) * h2 * w];
        for (oy, &(a, wa, b, wb)) in th.iter().enumerate() {
            let (wa, wb) = (T::from_f64(wa), T::from_f64(wb));
            for xx in 0..w {
                dst[oy * w + xx] = wa * src[a * w + xx] + wb * src[b * w + xx];
            }
        }
    }
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes * h2 {
        let src = &tmp[p * w..(p + 1) * w];
        let dst = &mut out[p * w2..(p + 1) * w2];
        for (ox, &(a, wa, b, wb)) in tw.iter().enumerate() {
            dst[ox] = T::from_f64(wa) * src[a] + T::from_f64(wb) * src[b];
        }
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let th = upsample_taps(h);
    let tw = upsample_taps(w);
    let (h2, w2) = (2 * h, 2 * w);
    let mut tmp = vec![T::zero(); planes * h2 * w];
    for p in 0..planes * h2 {
        let src = &g[p * w2..(p + 1) * w2];
        let dst = &mut tmp[p * w..(p + 1) * w];
        for (ox, &(a, wa, b, wb)) in tw.iter().enumerate() {
            dst[a] = dst[a] + T::from_f64(wa) * src[ox];
            dst[b] = dst[b] + T::from_f64(wb) * src[ox];
        }
    }
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &tmp[p * h2 * w..(p + 1) * h2 * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (oy, &(a, wa, b, wb)) in th.iter().enumerate() {
            let (wa, wb) = (T::from_f64(wa), T::from_f64(wb));
            for xx in 0..w {
                dst[a * w + xx] = dst[a * w + xx] + wa * src[oy * w + xx];
                dst[b * w + xx] = dst[b * w + xx] + wb * src[oy * w + xx];
            }
        }
    }
    out
}

/// Zero-padded 3×3 neighborhood sum per plane. Self-adjoint.
pub fn box3x3<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let y0 = y.saturating_sub(1);
            let y1 = (y + 1).min(h - 1);
            for xx in 0..w {
                let x0 = xx.saturating_sub(1);
                let x1 = (xx + 1).min(w - 1);
                let mut acc = T::zero();
                for yy in y0..=y1 {
                    for v in &src[yy * w + x0..=yy * w + x1] {
                        acc = acc + *v;
                    }
                }
                dst[y * w + xx] = acc;
            }
        }
    }
    out
}

/// Splits `shape` around `axis` into (outer, extent, inner) loop counts.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 1, 3], &[4, 1]), Some(vec![2, 4, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 2]), None);
        assert_eq!(broadcast_offsets(&[3], &[2, 3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_offsets(&[2, 1], &[2, 3]), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn upsample_preserves_constants() {
        let x = vec![2.5f64; 2 * 3 * 4];
        let y = upsample2x(&x, 2, 3, 4);
        assert_eq!(y.len(), 2 * 6 * 8);
        assert!(y.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn box_filter_counts_neighbors() {
        let x = vec![1.0f64; 9];
        let y = box3x3(&x, 1, 3, 3);
        assert_eq!(y, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }
}
