//! 3D pixel shuffle and pixel unshuffle.
//!
//! Unshuffle moves each `r x r x r` block of voxels into `r³` channels; shuffle
//! is its exact inverse. Both are pure permutations. The channel-major index
//! map is
//!
//! ```text
//! out channel = c_in · r³ + (dh · r + dw) · r + dd
//! ```
//!
//! for the sub-voxel offset `(dh, dw, dd)` of input voxel `(h·r + dh, w·r + dw, d·r + dd)`.
//!
//! The learned variants run a stride-1 "same" convolution before the
//! rearrangement, so their spatial behaviour is carried entirely by the permutation.

use crate::conv::{conv3d, conv3d_backward, ConvGrads};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Scalar, Tensor};

/// Mapping between sub-voxel offsets and channel slots.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ChannelOrder {
    /// `c_in · r³ + (dh · r + dw) · r + dd`.
    #[default]
    ChannelMajor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShuffleSpec {
    factor: usize,
    pub channel_order: ChannelOrder,
}

impl ShuffleSpec {
    pub fn new(factor: usize) -> Result<Self> {
        if factor < 2 {
            return Err(Error::Config(format!("shuffle factor must be >= 2, got {factor}")));
        }
        Ok(ShuffleSpec {
            factor,
            channel_order: ChannelOrder::ChannelMajor,
        })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// Output dims of unshuffling a tensor of dims `x`.
    pub fn unshuffled_dims(&self, x: Dims) -> Result<Dims> {
        let r = self.factor;
        for (axis, size) in ["H", "W", "D"].iter().zip(x.spatial()) {
            if size % r != 0 {
                return Err(Error::Shape(format!(
                    "pixel unshuffle: axis {axis} of size {size} is not divisible by factor {r}"
                )));
            }
        }
        Ok(Dims::new(x.n(), x.c() * r * r * r, x.h() / r, x.w() / r, x.d() / r))
    }

    /// Output dims of shuffling a tensor of dims `x`.
    pub fn shuffled_dims(&self, x: Dims) -> Result<Dims> {
        let r = self.factor;
        let r3 = r * r * r;
        if x.c() % r3 != 0 {
            return Err(Error::Shape(format!(
                "pixel shuffle: {} channels are not divisible by factor³ = {r3}",
                x.c()
            )));
        }
        Ok(Dims::new(x.n(), x.c() / r3, x.h() * r, x.w() * r, x.d() * r))
    }
}

/// Applies `f(coarse_index, fine_index)` for every element pair related by the index map,
/// where `coarse` has dims (n, c·r³, H, W, D) and `fine` has dims (n, c, rH, rW, rD).
fn for_each_pair(coarse: Dims, r: usize, mut f: impl FnMut(usize, usize)) {
    let [n, cc, h, w, d] = coarse.0;
    let r3 = r * r * r;
    let c = cc / r3;
    let (fh, fw, fd) = (h * r, w * r, d * r);
    for b in 0..n {
        for ci in 0..c {
            for dh in 0..r {
                for dw in 0..r {
                    for dd in 0..r {
                        let oc = ci * r3 + (dh * r + dw) * r + dd;
                        let coarse_base = (b * cc + oc) * h * w * d;
                        let fine_base = (b * c + ci) * fh * fw * fd;
                        for i in 0..h {
                            for j in 0..w {
                                let crow = coarse_base + (i * w + j) * d;
                                let frow = fine_base + ((i * r + dh) * fw + j * r + dw) * fd + dd;
                                for l in 0..d {
                                    f(crow + l, frow + l * r);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Rearranges (n, c, rH, rW, rD) into (n, r³·c, H, W, D) without arithmetic.
pub fn pixel_unshuffle_3d<T: Scalar>(x: &Tensor<T>, spec: ShuffleSpec) -> Result<Tensor<T>> {
    let out_dims = spec.unshuffled_dims(x.dims())?;
    let mut out = Tensor::zeros(out_dims);
    let src = x.data();
    let dst = out.data_mut();
    for_each_pair(out_dims, spec.factor, |ci, fi| dst[ci] = src[fi]);
    Ok(out)
}

/// Rearranges (n, k³·c, H, W, D) into (n, c, kH, kW, kD); inverse of [`pixel_unshuffle_3d`].
pub fn pixel_shuffle_3d<T: Scalar>(x: &Tensor<T>, spec: ShuffleSpec) -> Result<Tensor<T>> {
    let out_dims = spec.shuffled_dims(x.dims())?;
    let mut out = Tensor::zeros(out_dims);
    let src = x.data();
    let dst = out.data_mut();
    for_each_pair(x.dims(), spec.factor, |ci, fi| dst[fi] = src[ci]);
    Ok(out)
}

/// Convolution (stride 1, padding k/2) followed by [`pixel_unshuffle_3d`].
pub fn learned_unshuffle<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &[T],
    spec: ShuffleSpec,
) -> Result<Tensor<T>> {
    spec.unshuffled_dims(x.dims().with_c(weight.dims().n()))?;
    pixel_unshuffle_3d(&conv3d(x, weight, Some(bias))?, spec)
}

/// Convolution (stride 1, padding k/2) followed by [`pixel_shuffle_3d`].
pub fn learned_shuffle<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &[T],
    spec: ShuffleSpec,
) -> Result<Tensor<T>> {
    spec.shuffled_dims(x.dims().with_c(weight.dims().n()))?;
    pixel_shuffle_3d(&conv3d(x, weight, Some(bias))?, spec)
}

/// Gradients of [`learned_unshuffle`]: the permutation's adjoint is its inverse.
pub fn learned_unshuffle_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: ShuffleSpec,
) -> Result<ConvGrads<T>> {
    conv3d_backward(x, weight, &pixel_shuffle_3d(grad_out, spec)?, true)
}

pub fn learned_shuffle_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: ShuffleSpec,
) -> Result<ConvGrads<T>> {
    conv3d_backward(x, weight, &pixel_unshuffle_3d(grad_out, spec)?, true)
}
