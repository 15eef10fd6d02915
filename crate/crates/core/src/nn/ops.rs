//! Forward and backward kernels for the non-convolutional graph operations.

use crate::error::{Error, Result};
use crate::tensor::{Dims, Scalar, Tensor};

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { v * slope })
}

pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>, slope: T) -> Tensor<T> {
    let mut g = gy.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv < T::zero() {
            *gv *= slope;
        }
    }
    g
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

pub fn concat_dims(parts: &[Dims]) -> Result<Dims> {
    let first = *parts
        .first()
        .ok_or_else(|| Error::Shape("cannot concatenate zero tensors".into()))?;
    let mut c = 0;
    for p in parts {
        if p.n() != first.n() || p.spatial() != first.spatial() {
            return Err(Error::Shape(format!("cannot concatenate {p} with {first} along channels")));
        }
        c += p.c();
    }
    Ok(first.with_c(c))
}

/// Channel-axis concatenation.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let dims: Vec<Dims> = parts.iter().map(|t| t.dims()).collect();
    let out_dims = concat_dims(&dims)?;
    let mut data = Vec::with_capacity(out_dims.numel());
    for b in 0..out_dims.n() {
        for p in parts {
            data.extend_from_slice(p.item(b));
        }
    }
    Tensor::from_vec(out_dims, data)
}

/// Splits a channel-concatenated gradient back into per-part gradients.
pub fn split_channels<T: Scalar>(g: &Tensor<T>, parts: &[Dims]) -> Vec<Tensor<T>> {
    let mut outs: Vec<Vec<T>> = parts.iter().map(|d| Vec::with_capacity(d.numel())).collect();
    for b in 0..g.dims().n() {
        let item = g.item(b);
        let mut off = 0;
        for (o, d) in outs.iter_mut().zip(parts) {
            let len = d.c() * d.voxels();
            o.extend_from_slice(&item[off..off + len]);
            off += len;
        }
    }
    outs.into_iter()
        .zip(parts)
        .map(|(v, &d)| Tensor::from_vec(d, v).expect("split sizes follow input dims"))
        .collect()
}

pub fn pool_dims(x: Dims) -> Result<Dims> {
    let s = x.spatial();
    if s.iter().any(|v| v % 2 != 0) {
        return Err(Error::Shape(format!("max pooling needs even spatial dims, got {x}")));
    }
    Ok(x.with_spatial([s[0] / 2, s[1] / 2, s[2] / 2]))
}

/// 2x2x2 max pooling with stride 2; also returns the flat input index of each maximum.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let od = pool_dims(x.dims())?;
    let [n, c, h, w, d] = od.0;
    let mut out = Tensor::zeros(od);
    let mut arg = vec![0u32; od.numel()];
    let src = x.data();
    let (fw, fd) = (2 * w, 2 * d);
    let mut o = 0;
    for b in 0..n {
        for ci in 0..c {
            let base = (b * c + ci) * 8 * h * w * d;
            for i in 0..h {
                for j in 0..w {
                    for l in 0..d {
                        let mut best = base + ((2 * i) * fw + 2 * j) * fd + 2 * l;
                        for s in 1..8 {
                            let idx = base + ((2 * i + s / 4) * fw + 2 * j + (s / 2) % 2) * fd + 2 * l + s % 2;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                        out.data_mut()[o] = src[best];
                        arg[o] = best as u32;
                        o += 1;
                    }
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool2_backward<T: Scalar>(input_dims: Dims, arg: &[u32], gy: &Tensor<T>) -> Tensor<T> {
    let mut g = Tensor::zeros(input_dims);
    let gd = g.data_mut();
    for (&a, &v) in arg.iter().zip(gy.data()) {
        gd[a as usize] += v;
    }
    g
}

/// Cached values of a training-mode batch normalisation needed by its backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

fn check_bn<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>) -> Result<()> {
    if gamma.numel() != x.dims().c() {
        return Err(Error::Shape(format!(
            "batch norm over {} channels applied to {}",
            gamma.numel(),
            x.dims()
        )));
    }
    Ok(())
}

/// Normalises with batch statistics over (n, H, W, D) per channel.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    check_bn(x, gamma)?;
    let [n, c, ..] = x.dims().0;
    let v = x.dims().voxels();
    let count = (n * v) as f64;
    let mut y = Tensor::zeros(x.dims());
    let mut xhat = Tensor::zeros(x.dims());
    let mut inv_std = Vec::with_capacity(c);
    let mut means = Vec::with_capacity(c);
    let mut vars = Vec::with_capacity(c);
    for ci in 0..c {
        let slices = (0..n).map(|b| &x.item(b)[ci * v..(ci + 1) * v]);
        let mean = slices.clone().flatten().map(|t| t.as_f64()).sum::<f64>() / count;
        let var = slices.flatten().map(|t| (t.as_f64() - mean).powi(2)).sum::<f64>() / count;
        let is = 1.0 / (var + eps).sqrt();
        let (g, bt) = (gamma.data()[ci], beta.data()[ci]);
        let (m_t, is_t) = (T::from_f64_lossy(mean), T::from_f64_lossy(is));
        for b in 0..n {
            let off = b * c * v + ci * v;
            for k in off..off + v {
                let xh = (x.data()[k] - m_t) * is_t;
                xhat.data_mut()[k] = xh;
                y.data_mut()[k] = g * xh + bt;
            }
        }
        inv_std.push(is_t);
        means.push(m_t);
        vars.push(T::from_f64_lossy(if count > 1.0 { var * count / (count - 1.0) } else { var }));
    }
    Ok((
        y,
        BatchNormCache {
            xhat,
            inv_std,
            mean: means,
            var_unbiased: vars,
        },
    ))
}

/// Normalises with stored running statistics.
pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    check_bn(x, gamma)?;
    let [n, c, ..] = x.dims().0;
    let v = x.dims().voxels();
    let mut y = x.clone();
    for ci in 0..c {
        let is = T::from_f64_lossy(1.0 / (var.data()[ci].as_f64() + eps).sqrt());
        let (g, bt, m) = (gamma.data()[ci], beta.data()[ci], mean.data()[ci]);
        for b in 0..n {
            let off = b * c * v + ci * v;
            for val in &mut y.data_mut()[off..off + v] {
                *val = g * (*val - m) * is + bt;
            }
        }
    }
    Ok(y)
}

/// Returns (grad input, grad gamma, grad beta).
pub fn batch_norm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    gy: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let dims = gy.dims();
    let [n, c, ..] = dims.0;
    let v = dims.voxels();
    let count = T::from_f64_lossy((n * v) as f64);
    let mut gx = Tensor::zeros(dims);
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for ci in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for b in 0..n {
            let off = b * c * v + ci * v;
            for k in off..off + v {
                sum_dy += gy.data()[k];
                sum_dy_xhat += gy.data()[k] * cache.xhat.data()[k];
            }
        }
        gg[ci] = sum_dy_xhat;
        gb[ci] = sum_dy;
        let g = gamma.data()[ci];
        let scale = g * cache.inv_std[ci] / count;
        for b in 0..n {
            let off = b * c * v + ci * v;
            for k in off..off + v {
                gx.data_mut()[k] = scale * (count * gy.data()[k] - sum_dy - cache.xhat.data()[k] * sum_dy_xhat);
            }
        }
    }
    (gx, gg, gb)
}

/// Mean absolute error and its gradient with respect to `pred`.
pub fn l1_with_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if pred.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "L1 loss needs identical dims, got {} and {}",
            pred.dims(),
            target.dims()
        )));
    }
    let n = pred.numel() as f64;
    let inv = T::from_f64_lossy(1.0 / n);
    let mut sum = 0.0;
    let mut g = Tensor::zeros(pred.dims());
    for ((gv, &p), &t) in g.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let r = p - t;
        sum += r.abs().as_f64();
        *gv = if r > T::zero() {
            inv
        } else if r < T::zero() {
            -inv
        } else {
            T::zero()
        };
    }
    Ok((sum / n, g))
}
