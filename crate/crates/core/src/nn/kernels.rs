//! Dense 3D kernels behind the graph ops: im2col/col2im convolution
//! lowering, stride-2 transposed convolution, 2x max pooling and
//! upsampling. All loops are single-threaded with a fixed iteration
//! order, so results are bit-reproducible.

use ndarray::{Array2, Array4, ArrayView4};

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Lowers conv input to a (Cin*k^3, Do*Ho*Wo) matrix.
pub fn im2col(x: &ArrayView4<f32>, k: usize, stride: usize, pad: usize) -> Array2<f32> {
    let (cin, d, h, w) = x.dim();
    let (od, oh, ow) = (
        conv_out_len(d, k, stride, pad),
        conv_out_len(h, k, stride, pad),
        conv_out_len(w, k, stride, pad),
    );
    let q = od * oh * ow;
    let mut cols = Array2::<f32>::zeros((cin * k * k * k, q));
    let x_slice = x.as_slice().expect("input must be standard layout");
    let cols_slice = cols.as_slice_mut().unwrap();
    for ci in 0..cin {
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let row_off = row * q;
                    for odi in 0..od {
                        let id = (odi * stride + kd) as isize - pad as isize;
                        if id < 0 || id >= d as isize {
                            continue;
                        }
                        for ohi in 0..oh {
                            let ih = (ohi * stride + kh) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let dst_base = row_off + (odi * oh + ohi) * ow;
                            let src_base = ((ci * d + id as usize) * h + ih as usize) * w;
                            if stride == 1 {
                                // Valid output columns form one contiguous run.
                                let lo = pad.saturating_sub(kw);
                                let hi = ow.min(w + pad - kw);
                                if lo < hi {
                                    let src_lo = lo + kw - pad;
                                    cols_slice[dst_base + lo..dst_base + hi].copy_from_slice(
                                        &x_slice[src_base + src_lo..src_base + src_lo + hi - lo],
                                    );
                                }
                            } else {
                                for owi in 0..ow {
                                    let iw = (owi * stride + kw) as isize - pad as isize;
                                    if iw >= 0 && iw < w as isize {
                                        cols_slice[dst_base + owi] =
                                            x_slice[src_base + iw as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a (Cin*k^3, Q) matrix back to input layout; the adjoint
/// of [`im2col`].
pub fn col2im(
    cols: &Array2<f32>,
    in_shape: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f32> {
    let (cin, d, h, w) = in_shape;
    let (od, oh, ow) = (
        conv_out_len(d, k, stride, pad),
        conv_out_len(h, k, stride, pad),
        conv_out_len(w, k, stride, pad),
    );
    let q = od * oh * ow;
    let mut x = Array4::<f32>::zeros(in_shape);
    let x_slice = x.as_slice_mut().unwrap();
    let cols_slice = cols.as_slice().expect("cols must be standard layout");
    for ci in 0..cin {
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let row_off = row * q;
                    for odi in 0..od {
                        let id = (odi * stride + kd) as isize - pad as isize;
                        if id < 0 || id >= d as isize {
                            continue;
                        }
                        for ohi in 0..oh {
                            let ih = (ohi * stride + kh) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let src_base = row_off + (odi * oh + ohi) * ow;
                            let dst_base = ((ci * d + id as usize) * h + ih as usize) * w;
                            for owi in 0..ow {
                                let iw = (owi * stride + kw) as isize - pad as isize;
                                if iw >= 0 && iw < w as isize {
                                    x_slice[dst_base + iw as usize] += cols_slice[src_base + owi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Transposed convolution with kernel = stride = 2 (exact x2 upsampling).
/// Weight layout (Cin, Cout, 2, 2, 2). Output positions are disjoint, so
/// the scatter is a plain reshape of `w^T . x`.
pub fn conv_transpose2(
    x: &ArrayView4<f32>,
    w2t: &Array2<f32>, // (Cout*8, Cin)
    cout: usize,
) -> Array4<f32> {
    let (cin, d, h, w) = x.dim();
    let q = d * h * w;
    let x2 = x
        .to_shape((cin, q))
        .expect("input must be standard layout")
        .to_owned();
    let outcols = w2t.dot(&x2); // (Cout*8, Q)
    let mut out = Array4::<f32>::zeros((cout, 2 * d, 2 * h, 2 * w));
    let out_slice = out.as_slice_mut().unwrap();
    let oc = outcols.as_slice().unwrap();
    for co in 0..cout {
        for kd in 0..2 {
            for kh in 0..2 {
                for kw in 0..2 {
                    let row = ((co * 2 + kd) * 2 + kh) * 2 + kw;
                    let row_off = row * q;
                    for di in 0..d {
                        for hi in 0..h {
                            let src = row_off + (di * h + hi) * w;
                            let dst =
                                ((co * 2 * d + 2 * di + kd) * 2 * h + 2 * hi + kh) * 2 * w + kw;
                            for wi in 0..w {
                                out_slice[dst + 2 * wi] = oc[src + wi];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gathers the gradient of [`conv_transpose2`]'s output back into
/// (Cout*8, Q) column layout.
pub fn conv_transpose2_gather(dy: &ArrayView4<f32>, cin_q: usize) -> Array2<f32> {
    let (cout, d2, h2, w2) = dy.dim();
    let (d, h, w) = (d2 / 2, h2 / 2, w2 / 2);
    debug_assert_eq!(cin_q, d * h * w);
    let q = d * h * w;
    let mut cols = Array2::<f32>::zeros((cout * 8, q));
    let dy_slice = dy.as_slice().expect("grad must be standard layout");
    let c = cols.as_slice_mut().unwrap();
    for co in 0..cout {
        for kd in 0..2 {
            for kh in 0..2 {
                for kw in 0..2 {
                    let row = ((co * 2 + kd) * 2 + kh) * 2 + kw;
                    let row_off = row * q;
                    for di in 0..d {
                        for hi in 0..h {
                            let dst = row_off + (di * h + hi) * w;
                            let src =
                                ((co * 2 * d + 2 * di + kd) * 2 * h + 2 * hi + kh) * 2 * w + kw;
                            for wi in 0..w {
                                c[dst + wi] = dy_slice[src + 2 * wi];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// 2x2x2 max pooling with stride 2. Returns the pooled volume and the
/// flat argmax index per output element for the backward scatter.
pub fn maxpool2(x: &ArrayView4<f32>) -> (Array4<f32>, Vec<u32>) {
    let (c, d, h, w) = x.dim();
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Array4::<f32>::zeros((c, od, oh, ow));
    let mut argmax = vec![0u32; c * od * oh * ow];
    let xs = x.as_slice().expect("input must be standard layout");
    let os = out.as_slice_mut().unwrap();
    let mut oi = 0usize;
    for ci in 0..c {
        for di in 0..od {
            for hi in 0..oh {
                for wi in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for kd in 0..2 {
                        for kh in 0..2 {
                            for kw in 0..2 {
                                let idx = ((ci * d + 2 * di + kd) * h + 2 * hi + kh) * w
                                    + 2 * wi
                                    + kw;
                                let v = xs[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    os[oi] = best;
                    argmax[oi] = best_idx as u32;
                    oi += 1;
                }
            }
        }
    }
    (out, argmax)
}

/// Per-axis interpolation table for x2 upsampling, align_corners = false.
/// Entry: (low index, high index, high weight).
fn upsample_table(n: usize) -> Vec<(usize, usize, f32)> {
    let mut t = Vec::with_capacity(2 * n);
    for o in 0..2 * n {
        let src = (o as f32 + 0.5) / 2.0 - 0.5;
        let s = src.max(0.0);
        let i0 = (s.floor() as usize).min(n - 1);
        let f = (s - i0 as f32).min(1.0);
        let i1 = (i0 + 1).min(n - 1);
        t.push((i0, i1, f));
    }
    t
}

/// Trilinear x2 upsampling.
pub fn upsample_trilinear2(x: &ArrayView4<f32>) -> Array4<f32> {
    let (c, d, h, w) = x.dim();
    let (td, th, tw) = (upsample_table(d), upsample_table(h), upsample_table(w));
    let mut out = Array4::<f32>::zeros((c, 2 * d, 2 * h, 2 * w));
    for ci in 0..c {
        let xc = x.index_axis(ndarray::Axis(0), ci);
        let mut oc = out.index_axis_mut(ndarray::Axis(0), ci);
        for (od, &(d0, d1, fd)) in td.iter().enumerate() {
            for (oh, &(h0, h1, fh)) in th.iter().enumerate() {
                for (ow, &(w0, w1, fw)) in tw.iter().enumerate() {
                    let c000 = xc[[d0, h0, w0]];
                    let c001 = xc[[d0, h0, w1]];
                    let c010 = xc[[d0, h1, w0]];
                    let c011 = xc[[d0, h1, w1]];
                    let c100 = xc[[d1, h0, w0]];
                    let c101 = xc[[d1, h0, w1]];
                    let c110 = xc[[d1, h1, w0]];
                    let c111 = xc[[d1, h1, w1]];
                    let c00 = c000 + (c001 - c000) * fw;
                    let c01 = c010 + (c011 - c010) * fw;
                    let c10 = c100 + (c101 - c100) * fw;
                    let c11 = c110 + (c111 - c110) * fw;
                    let c0 = c00 + (c01 - c00) * fh;
                    let c1 = c10 + (c11 - c10) * fh;
                    oc[[od, oh, ow]] = c0 + (c1 - c0) * fd;
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample_trilinear2`].
pub fn upsample_trilinear2_backward(
    dy: &ArrayView4<f32>,
    in_shape: (usize, usize, usize, usize),
) -> Array4<f32> {
    let (c, d, h, w) = in_shape;
    let (td, th, tw) = (upsample_table(d), upsample_table(h), upsample_table(w));
    let mut dx = Array4::<f32>::zeros(in_shape);
    for ci in 0..c {
        let dyc = dy.index_axis(ndarray::Axis(0), ci);
        let mut dxc = dx.index_axis_mut(ndarray::Axis(0), ci);
        for (od, &(d0, d1, fd)) in td.iter().enumerate() {
            for (oh, &(h0, h1, fh)) in th.iter().enumerate() {
                for (ow, &(w0, w1, fw)) in tw.iter().enumerate() {
                    let g = dyc[[od, oh, ow]];
                    let (gd0, gd1) = (g * (1.0 - fd), g * fd);
                    for (di, gdi) in [(d0, gd0), (d1, gd1)] {
                        let (gh0, gh1) = (gdi * (1.0 - fh), gdi * fh);
                        for (hi, ghi) in [(h0, gh0), (h1, gh1)] {
                            dxc[[di, hi, w0]] += ghi * (1.0 - fw);
                            dxc[[di, hi, w1]] += ghi * fw;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Nearest-neighbor x2 upsampling.
pub fn upsample_nearest2(x: &ArrayView4<f32>) -> Array4<f32> {
    let (c, d, h, w) = x.dim();
    let mut out = Array4::<f32>::zeros((c, 2 * d, 2 * h, 2 * w));
    for ci in 0..c {
        for od in 0..2 * d {
            for oh in 0..2 * h {
                for ow in 0..2 * w {
                    out[[ci, od, oh, ow]] = x[[ci, od / 2, oh / 2, ow / 2]];
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest2`].
pub fn upsample_nearest2_backward(
    dy: &ArrayView4<f32>,
    in_shape: (usize, usize, usize, usize),
) -> Array4<f32> {
    let mut dx = Array4::<f32>::zeros(in_shape);
    let (c, d2, h2, w2) = dy.dim();
    for ci in 0..c {
        for od in 0..d2 {
            for oh in 0..h2 {
                for ow in 0..w2 {
                    dx[[ci, od / 2, oh / 2, ow / 2]] += dy[[ci, od, oh, ow]];
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Array4::<f32>::zeros(shape);
        for v in a.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        a
    }

    /// Reference conv by direct summation.
    fn conv_reference(
        x: &Array4<f32>,
        w: &ndarray::Array5<f32>,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Array4<f32> {
        let (cin, d, h, ww) = x.dim();
        let cout = w.dim().0;
        let (od, oh, ow) = (
            conv_out_len(d, k, stride, pad),
            conv_out_len(h, k, stride, pad),
            conv_out_len(ww, k, stride, pad),
        );
        let mut y = Array4::<f32>::zeros((cout, od, oh, ow));
        for co in 0..cout {
            for odi in 0..od {
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let mut acc = 0.0f32;
                        for ci in 0..cin {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let id = (odi * stride + kd) as isize - pad as isize;
                                        let ih = (ohi * stride + kh) as isize - pad as isize;
                                        let iw = (owi * stride + kw) as isize - pad as isize;
                                        if id >= 0
                                            && ih >= 0
                                            && iw >= 0
                                            && (id as usize) < d
                                            && (ih as usize) < h
                                            && (iw as usize) < ww
                                        {
                                            acc += x[[ci, id as usize, ih as usize, iw as usize]]
                                                * w[[co, ci, kd, kh, kw]];
                                        }
                                    }
                                }
                            }
                        }
                        y[[co, odi, ohi, owi]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        for &(k, stride, pad) in &[(3usize, 1usize, 1usize), (2, 2, 0), (1, 1, 0), (3, 1, 0)] {
            let x = random4((3, 6, 6, 6), 1 + k as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut w = ndarray::Array5::<f32>::zeros((2, 3, k, k, k));
            for v in w.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let cols = im2col(&x.view(), k, stride, pad);
            let w2 = w.to_shape((2, 3 * k * k * k)).unwrap().to_owned();
            let y2 = w2.dot(&cols);
            let od = conv_out_len(6, k, stride, pad);
            let y = y2.to_shape((2, od, od, od)).unwrap().to_owned();
            let want = conv_reference(&x, &w, k, stride, pad);
            for (a, b) in y.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-4, "k={k} s={stride} p={pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c.
        let x = random4((2, 5, 5, 5), 3);
        for &(k, stride, pad) in &[(3usize, 1usize, 1usize), (1, 1, 0)] {
            let cols = im2col(&x.view(), k, stride, pad);
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let c = cols.mapv(|_| rng.random_range(-1.0f32..1.0));
            let lhs: f64 = cols
                .iter()
                .zip(c.iter())
                .map(|(&a, &b)| (a * b) as f64)
                .sum();
            let back = col2im(&c, x.dim(), k, stride, pad);
            let rhs: f64 = x
                .iter()
                .zip(back.iter())
                .map(|(&a, &b)| (a * b) as f64)
                .sum();
            assert!((lhs - rhs).abs() < 1e-3, "k={k}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_transpose_doubles_extent_and_matches_scatter() {
        let x = random4((2, 3, 3, 3), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut w = ndarray::Array5::<f32>::zeros((2, 3, 2, 2, 2)); // (Cin, Cout, 2,2,2)
        for v in w.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        // Column-major lowering: row (co*8 + kk), col ci.
        let mut w2t = Array2::<f32>::zeros((3 * 8, 2));
        for ci in 0..2 {
            for co in 0..3 {
                for kk in 0..8 {
                    w2t[[co * 8 + kk, ci]] = w[[ci, co, kk / 4, (kk / 2) % 2, kk % 2]];
                }
            }
        }
        let y = conv_transpose2(&x.view(), &w2t, 3);
        assert_eq!(y.dim(), (3, 6, 6, 6));
        // Direct scatter reference.
        let mut want = Array4::<f32>::zeros((3, 6, 6, 6));
        for ci in 0..2 {
            for co in 0..3 {
                for d in 0..3 {
                    for h in 0..3 {
                        for ww in 0..3 {
                            for kd in 0..2 {
                                for kh in 0..2 {
                                    for kw in 0..2 {
                                        want[[co, 2 * d + kd, 2 * h + kh, 2 * ww + kw]] +=
                                            x[[ci, d, h, ww]] * w[[ci, co, kd, kh, kw]];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        for (a, b) in y.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
        // Gather is the exact adjoint layout.
        let cols = conv_transpose2_gather(&y.view(), 27);
        assert_eq!(cols.dim(), (3 * 8, 27));
    }

    #[test]
    fn maxpool_selects_maximum_and_argmax_points_at_it() {
        let x = random4((1, 4, 4, 4), 17);
        let (y, argmax) = maxpool2(&x.view());
        assert_eq!(y.dim(), (1, 2, 2, 2));
        let xs = x.as_slice().unwrap();
        for (o, &a) in y.iter().zip(argmax.iter()) {
            assert_eq!(*o, xs[a as usize]);
        }
    }

    #[test]
    fn trilinear_upsample_of_constant_is_constant() {
        let x = Array4::<f32>::from_elem((2, 3, 3, 3), 2.5);
        let y = upsample_trilinear2(&x.view());
        assert_eq!(y.dim(), (2, 6, 6, 6));
        for &v in y.iter() {
            assert!((v - 2.5).abs() < 1e-6);
        }
    }

    #[test]
    fn trilinear_backward_is_adjoint() {
        let x = random4((1, 3, 3, 3), 19);
        let y = upsample_trilinear2(&x.view());
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let dy = y.mapv(|_| rng.random_range(-1.0f32..1.0));
        let dx = upsample_trilinear2_backward(&dy.view(), x.dim());
        let lhs: f64 = y.iter().zip(dy.iter()).map(|(&a, &b)| (a * b) as f64).sum();
        let rhs: f64 = x.iter().zip(dx.iter()).map(|(&a, &b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-3);
    }

    #[test]
    fn nearest_upsample_repeats_voxels() {
        let mut x = Array4::<f32>::zeros((1, 2, 2, 2));
        x[[0, 1, 0, 1]] = 3.0;
        let y = upsample_nearest2(&x.view());
        for kd in 0..2 {
            for kh in 0..2 {
                for kw in 0..2 {
                    assert_eq!(y[[0, 2 + kd, kh, 2 + kw]], 3.0);
                }
            }
        }
    }
}
