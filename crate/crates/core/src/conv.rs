//! Stride-1 "same" 3D convolution and the 2x2x2/stride-2 transposed convolution,
//! both lowered onto GEMM. Weights follow the (out, in, k, k, k) layout for
//! convolutions and (in, out, 2, 2, 2) for transposed convolutions.

use crate::error::{Error, Result};
use crate::tensor::{Dims, Scalar, Tensor};

/// Upper bound on the im2col buffer size, in elements.
const COL_BUDGET: usize = 1 << 22;

/// Gradients of a convolution with respect to its operands.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

fn check_conv<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let [cout, cin, kh, kw, kd] = weight.dims().0;
    if kh != kw || kw != kd || kh % 2 == 0 {
        return Err(Error::Shape(format!(
            "convolution kernel must be cubic with odd size, got {}",
            weight.dims()
        )));
    }
    if x.dims().c() != cin {
        return Err(Error::Shape(format!(
            "kernel expects {cin} input channels but tensor {} has {}",
            x.dims(),
            x.dims().c()
        )));
    }
    Ok((cout, cin, kh))
}

/// Planes of H processed per im2col chunk.
fn planes_per_chunk(rows: usize, plane: usize, h: usize) -> usize {
    (COL_BUDGET / (rows * plane).max(1)).clamp(1, h)
}

/// Fills `buf` (rows = cin*k^3, cols = (h1-h0)*w*d) with shifted copies of `x`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    [h, w, d]: [usize; 3],
    k: usize,
    h0: usize,
    h1: usize,
    buf: &mut [T],
) {
    let pad = k / 2;
    let plane = w * d;
    let spatial = h * plane;
    let ncols = (h1 - h0) * plane;
    for ci in 0..cin {
        let xc = &x[ci * spatial..(ci + 1) * spatial];
        for kh in 0..k {
            for kw in 0..k {
                for kd in 0..k {
                    let r = ((ci * k + kh) * k + kw) * k + kd;
                    let row = &mut buf[r * ncols..(r + 1) * ncols];
                    let lo = pad.saturating_sub(kd);
                    let hi = (d + pad).saturating_sub(kd).min(d);
                    for hh in h0..h1 {
                        let ih = hh as isize + kh as isize - pad as isize;
                        for ww in 0..w {
                            let seg = &mut row[(hh - h0) * plane + ww * d..][..d];
                            let iw = ww as isize + kw as isize - pad as isize;
                            if ih < 0 || ih >= h as isize || iw < 0 || iw >= w as isize || lo >= hi {
                                seg.fill(T::zero());
                                continue;
                            }
                            let base = (ih as usize * w + iw as usize) * d;
                            seg[..lo].fill(T::zero());
                            let src0 = base + lo + kd - pad;
                            seg[lo..hi].copy_from_slice(&xc[src0..src0 + (hi - lo)]);
                            seg[hi..].fill(T::zero());
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds an im2col-shaped buffer back onto `dx`.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    buf: &[T],
    cin: usize,
    [h, w, d]: [usize; 3],
    k: usize,
    h0: usize,
    h1: usize,
    dx: &mut [T],
) {
    let pad = k / 2;
    let plane = w * d;
    let spatial = h * plane;
    let ncols = (h1 - h0) * plane;
    for ci in 0..cin {
        let dxc = &mut dx[ci * spatial..(ci + 1) * spatial];
        for kh in 0..k {
            for kw in 0..k {
                for kd in 0..k {
                    let r = ((ci * k + kh) * k + kw) * k + kd;
                    let row = &buf[r * ncols..(r + 1) * ncols];
                    let lo = pad.saturating_sub(kd);
                    let hi = (d + pad).saturating_sub(kd).min(d);
                    if lo >= hi {
                        continue;
                    }
                    for hh in h0..h1 {
                        let ih = hh as isize + kh as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for ww in 0..w {
                            let iw = ww as isize + kw as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let seg = &row[(hh - h0) * plane + ww * d..][lo..hi];
                            let dst0 = (ih as usize * w + iw as usize) * d + lo + kd - pad;
                            for (o, &g) in dxc[dst0..dst0 + (hi - lo)].iter_mut().zip(seg) {
                                *o += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 convolution with zero padding `k / 2`, preserving spatial size.
pub fn conv3d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&[T]>) -> Result<Tensor<T>> {
    let (cout, cin, k) = check_conv(x, weight)?;
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::Shape(format!("bias has {} entries for {cout} filters", b.len())));
        }
    }
    let xd = x.dims();
    let spatial_dims = xd.spatial();
    let spatial = xd.voxels();
    let plane = xd.w() * xd.d();
    let rows = cin * k * k * k;
    let mut y = Tensor::zeros(xd.with_c(cout));
    let w = weight.data();
    let pp = planes_per_chunk(rows, plane, xd.h());
    let mut buf = if k > 1 { vec![T::zero(); rows * pp * plane] } else { Vec::new() };

    for b in 0..xd.n() {
        let xb = x.item(b);
        let yb: &mut [T] = y.item_mut(b);
        let mut h0 = 0;
        while h0 < xd.h() {
            let h1 = (h0 + pp).min(xd.h());
            let ncols = (h1 - h0) * plane;
            let (col, rs_col): (*const T, isize) = if k == 1 {
                (unsafe { xb.as_ptr().add(h0 * plane) }, spatial as isize)
            } else {
                im2col(xb, cin, spatial_dims, k, h0, h1, &mut buf);
                (buf.as_ptr(), ncols as isize)
            };
            // SAFETY: `w` is cout x rows, `col` is rows x ncols with row stride `rs_col`,
            // and the destination window lies inside `yb` (cout rows of `spatial`).
            unsafe {
                T::gemm(
                    cout,
                    rows,
                    ncols,
                    T::one(),
                    w.as_ptr(),
                    rows as isize,
                    1,
                    col,
                    rs_col,
                    1,
                    T::zero(),
                    yb.as_mut_ptr().add(h0 * plane),
                    spatial as isize,
                    1,
                );
            }
            h0 = h1;
        }
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                for v in &mut yb[co * spatial..(co + 1) * spatial] {
                    *v += bv;
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of [`conv3d`] given the upstream gradient `gy`.
pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    gy: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let (cout, cin, k) = check_conv(x, weight)?;
    let xd = x.dims();
    if gy.dims() != xd.with_c(cout) {
        return Err(Error::Shape(format!(
            "output gradient {} does not match convolution output {}",
            gy.dims(),
            xd.with_c(cout)
        )));
    }
    let spatial_dims = xd.spatial();
    let spatial = xd.voxels();
    let plane = xd.w() * xd.d();
    let rows = cin * k * k * k;
    let w = weight.data();
    let mut gw = Tensor::zeros(weight.dims());
    let mut gb = vec![T::zero(); cout];
    let mut gx = if need_input { Some(Tensor::<T>::zeros(xd)) } else { None };
    let pp = planes_per_chunk(rows, plane, xd.h());
    let mut buf = if k > 1 { vec![T::zero(); rows * pp * plane] } else { Vec::new() };
    let mut gbuf = if k > 1 && need_input { vec![T::zero(); rows * pp * plane] } else { Vec::new() };

    for b in 0..xd.n() {
        let xb = x.item(b);
        let gyb = gy.item(b);
        for (co, g) in gb.iter_mut().enumerate() {
            for &v in &gyb[co * spatial..(co + 1) * spatial] {
                *g += v;
            }
        }
        let mut h0 = 0;
        while h0 < xd.h() {
            let h1 = (h0 + pp).min(xd.h());
            let ncols = (h1 - h0) * plane;
            let (col, rs_col): (*const T, isize) = if k == 1 {
                (unsafe { xb.as_ptr().add(h0 * plane) }, spatial as isize)
            } else {
                im2col(xb, cin, spatial_dims, k, h0, h1, &mut buf);
                (buf.as_ptr(), ncols as isize)
            };
            let gy_chunk = unsafe { gyb.as_ptr().add(h0 * plane) };
            // SAFETY: gw += gy_chunk (cout x ncols) * col^T (ncols x rows); all extents in bounds.
            unsafe {
                T::gemm(
                    cout,
                    ncols,
                    rows,
                    T::one(),
                    gy_chunk,
                    spatial as isize,
                    1,
                    col,
                    1,
                    rs_col,
                    T::one(),
                    gw.data_mut().as_mut_ptr(),
                    rows as isize,
                    1,
                );
            }
            if let Some(gx) = gx.as_mut() {
                let gxb = gx.item_mut(b);
                if k == 1 {
                    // SAFETY: gx_chunk (cin x ncols) += W^T (cin x cout) * gy_chunk.
                    unsafe {
                        T::gemm(
                            cin,
                            cout,
                            ncols,
                            T::one(),
                            w.as_ptr(),
                            1,
                            rows as isize,
                            gy_chunk,
                            spatial as isize,
                            1,
                            T::one(),
                            gxb.as_mut_ptr().add(h0 * plane),
                            spatial as isize,
                            1,
                        );
                    }
                } else {
                    // SAFETY: gbuf (rows x ncols) = W^T (rows x cout) * gy_chunk (cout x ncols).
                    unsafe {
                        T::gemm(
                            rows,
                            cout,
                            ncols,
                            T::one(),
                            w.as_ptr(),
                            1,
                            rows as isize,
                            gy_chunk,
                            spatial as isize,
                            1,
                            T::zero(),
                            gbuf.as_mut_ptr(),
                            ncols as isize,
                            1,
                        );
                    }
                    col2im_add(&gbuf[..rows * ncols], cin, spatial_dims, k, h0, h1, gxb);
                }
            }
            h0 = h1;
        }
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

fn check_up<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize)> {
    let [cin, cout, a, b, c] = weight.dims().0;
    if [a, b, c] != [2, 2, 2] {
        return Err(Error::Shape(format!(
            "transposed convolution kernel must be (in, out, 2, 2, 2), got {}",
            weight.dims()
        )));
    }
    if x.dims().c() != cin {
        return Err(Error::Shape(format!(
            "transposed kernel expects {cin} input channels, tensor {} has {}",
            x.dims(),
            x.dims().c()
        )));
    }
    Ok((cin, cout))
}

/// Transposed convolution with kernel 2 and stride 2: every input voxel writes a
/// disjoint 2x2x2 output block, so the op is one GEMM followed by a scatter.
pub fn conv_transpose2<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let (cin, cout) = check_up(x, weight)?;
    let xd = x.dims();
    let [h, w, d] = xd.spatial();
    let n_in = xd.voxels();
    let rows = cout * 8;
    let mut y = Tensor::zeros(Dims::new(xd.n(), cout, 2 * h, 2 * w, 2 * d));
    let mut tmp = vec![T::zero(); rows * n_in];
    for b in 0..xd.n() {
        // SAFETY: tmp (rows x n_in) = W^T (rows x cin, element (r, ci) at ci*rows + r) * x_b.
        unsafe {
            T::gemm(
                rows,
                cin,
                n_in,
                T::one(),
                weight.data().as_ptr(),
                1,
                rows as isize,
                x.item(b).as_ptr(),
                n_in as isize,
                1,
                T::zero(),
                tmp.as_mut_ptr(),
                n_in as isize,
                1,
            );
        }
        let yb = y.item_mut(b);
        scatter_blocks(&tmp, cout, [h, w, d], yb, bias);
    }
    Ok(y)
}

fn scatter_blocks<T: Scalar>(tmp: &[T], cout: usize, [h, w, d]: [usize; 3], yb: &mut [T], bias: &[T]) {
    let n_in = h * w * d;
    let (ho, wo, dout) = (2 * h, 2 * w, 2 * d);
    for co in 0..cout {
        for s in 0..8 {
            let (a, bb, c) = (s / 4, (s / 2) % 2, s % 2);
            let src = &tmp[(co * 8 + s) * n_in..(co * 8 + s + 1) * n_in];
            for i in 0..h {
                for j in 0..w {
                    for l in 0..d {
                        let o = ((co * ho + 2 * i + a) * wo + 2 * j + bb) * dout + 2 * l + c;
                        yb[o] = src[(i * w + j) * d + l] + bias[co];
                    }
                }
            }
        }
    }
}

pub fn conv_transpose2_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (cin, cout) = check_up(x, weight)?;
    let xd = x.dims();
    let [h, w, d] = xd.spatial();
    let n_in = xd.voxels();
    let rows = cout * 8;
    if gy.dims() != Dims::new(xd.n(), cout, 2 * h, 2 * w, 2 * d) {
        return Err(Error::Shape(format!("bad transposed-conv output gradient {}", gy.dims())));
    }
    let mut gx = Tensor::zeros(xd);
    let mut gw = Tensor::zeros(weight.dims());
    let mut gb = vec![T::zero(); cout];
    let mut tmp = vec![T::zero(); rows * n_in];
    let (wo, dout) = (2 * w, 2 * d);
    for b in 0..xd.n() {
        let gyb = gy.item(b);
        for co in 0..cout {
            for s in 0..8 {
                let (a, bb, c) = (s / 4, (s / 2) % 2, s % 2);
                let dst = &mut tmp[(co * 8 + s) * n_in..(co * 8 + s + 1) * n_in];
                for i in 0..h {
                    for j in 0..w {
                        for l in 0..d {
                            let o = ((co * 2 * h + 2 * i + a) * wo + 2 * j + bb) * dout + 2 * l + c;
                            dst[(i * w + j) * d + l] = gyb[o];
                        }
                    }
                }
                gb[co] += dst.iter().fold(T::zero(), |acc, &v| acc + v);
            }
        }
        // SAFETY: gW^T (rows x cin) += tmp (rows x n_in) * x_b^T (n_in x cin).
        unsafe {
            T::gemm(
                rows,
                n_in,
                cin,
                T::one(),
                tmp.as_ptr(),
                n_in as isize,
                1,
                x.item(b).as_ptr(),
                1,
                n_in as isize,
                T::one(),
                gw.data_mut().as_mut_ptr(),
                1,
                rows as isize,
            );
            // gx_b (cin x n_in) = W (cin x rows) * tmp (rows x n_in)
            T::gemm(
                cin,
                rows,
                n_in,
                T::one(),
                weight.data().as_ptr(),
                rows as isize,
                1,
                tmp.as_ptr(),
                n_in as isize,
                1,
                T::zero(),
                gx.item_mut(b).as_mut_ptr(),
                n_in as isize,
                1,
            );
        }
    }
    Ok(ConvGrads {
        input: Some(gx),
        weight: gw,
        bias: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: Dims, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Tensor<f64> {
        let [n, cin, h, wd, d] = x.dims().0;
        let [cout, _, k, _, _] = w.dims().0;
        let p = (k / 2) as isize;
        Tensor::from_fn(Dims::new(n, cout, h, wd, d), |[bi, co, i, j, l]| {
            let mut s = b[co];
            for ci in 0..cin {
                for a in 0..k {
                    for bb in 0..k {
                        for c in 0..k {
                            let (ii, jj, ll) = (
                                i as isize + a as isize - p,
                                j as isize + bb as isize - p,
                                l as isize + c as isize - p,
                            );
                            if ii < 0 || jj < 0 || ll < 0 || ii >= h as isize || jj >= wd as isize || ll >= d as isize {
                                continue;
                            }
                            s += w.get([co, ci, a, bb, c]) * x.get([bi, ci, ii as usize, jj as usize, ll as usize]);
                        }
                    }
                }
            }
            s
        })
    }

    fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn conv_matches_naive_for_several_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(n, cin, cout, k, s) in &[(1, 1, 1, 1, [1, 1, 1]), (2, 3, 4, 3, [5, 4, 3]), (1, 2, 3, 5, [3, 6, 2]), (1, 1, 2, 3, [1, 1, 1])] {
            let x = random(Dims::new(n, cin, s[0], s[1], s[2]), &mut rng);
            let w = random(Dims::new(cout, cin, k, k, k), &mut rng);
            let b: Vec<f64> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y = conv3d(&x, &w, Some(&b)).unwrap();
            assert!(max_diff(&y, &naive_conv(&x, &w, &b)) < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <gy, conv(x)> is bilinear, so its gradients are exact adjoints.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(Dims::new(2, 3, 4, 3, 5), &mut rng);
        let w = random(Dims::new(2, 3, 3, 3, 3), &mut rng);
        let gy = random(Dims::new(2, 2, 4, 3, 5), &mut rng);
        let g = conv3d_backward(&x, &w, &gy, true).unwrap();
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
        let y = conv3d(&x, &w, None).unwrap();
        let lhs = dot(&gy, &y);
        assert!((dot(g.input.as_ref().unwrap(), &x) - lhs).abs() < 1e-10);
        assert!((dot(&g.weight, &w) - lhs).abs() < 1e-10);
    }

    #[test]
    fn transposed_conv_matches_naive_and_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(Dims::new(2, 3, 2, 3, 2), &mut rng);
        let w = random(Dims::new(3, 2, 2, 2, 2), &mut rng);
        let b = vec![0.25, -0.5];
        let y = conv_transpose2(&x, &w, &b).unwrap();
        let naive = Tensor::from_fn(Dims::new(2, 2, 4, 6, 4), |[n, co, i, j, l]| {
            let mut s = b[co];
            for ci in 0..3 {
                s += w.get([ci, co, i % 2, j % 2, l % 2]) * x.get([n, ci, i / 2, j / 2, l / 2]);
            }
            s
        });
        assert!(max_diff(&y, &naive) < 1e-12);

        let gy = random(y.dims(), &mut rng);
        let g = conv_transpose2_backward(&x, &w, &gy).unwrap();
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
        let y0 = conv_transpose2(&x, &w, &[0.0, 0.0]).unwrap();
        assert!((dot(g.input.as_ref().unwrap(), &x) - dot(&gy, &y0)).abs() < 1e-10);
        assert!((dot(&g.weight, &w) - dot(&gy, &y0)).abs() < 1e-10);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(Dims::new(1, 2, 3, 3, 3));
        let w = Tensor::<f32>::zeros(Dims::new(1, 3, 3, 3, 3));
        assert!(matches!(conv3d(&x, &w, None), Err(Error::Shape(_))));
    }
}
