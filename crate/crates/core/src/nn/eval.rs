use super::ops;
use super::params::{BatchNormLayer, ConvLayer, ParamStore, UpConvLayer};
use super::Exec;
use crate::conv;
use crate::error::Result;
use crate::shuffle::{pixel_shuffle_3d, pixel_unshuffle_3d, ShuffleSpec};
use crate::tensor::{Dims, Scalar, Tensor};

/// Inference backend: values are plain tensors and are dropped as soon as the
/// architecture code releases them. Batch normalisation uses running statistics.
pub struct Eval<'a, T: Scalar> {
    params: &'a ParamStore<T>,
}

impl<'a, T: Scalar> Eval<'a, T> {
    pub fn new(params: &'a ParamStore<T>) -> Self {
        Eval { params }
    }
}

impl<T: Scalar> Exec<T> for Eval<'_, T> {
    type Value = Tensor<T>;

    fn dims(&self, v: &Tensor<T>) -> Dims {
        v.dims()
    }

    fn conv(&mut self, x: &Tensor<T>, layer: &ConvLayer) -> Result<Tensor<T>> {
        conv::conv3d(x, self.params.get(layer.weight), Some(self.params.get(layer.bias).data()))
    }

    fn conv_transpose(&mut self, x: &Tensor<T>, layer: &UpConvLayer) -> Result<Tensor<T>> {
        conv::conv_transpose2(x, self.params.get(layer.weight), self.params.get(layer.bias).data())
    }

    fn leaky_relu(&mut self, x: &Tensor<T>, slope: f64) -> Result<Tensor<T>> {
        Ok(ops::leaky_relu(x, T::from_f64_lossy(slope)))
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::add(a, b)
    }

    fn concat(&mut self, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        ops::concat(parts)
    }

    fn pixel_shuffle(&mut self, x: &Tensor<T>, spec: ShuffleSpec) -> Result<Tensor<T>> {
        pixel_shuffle_3d(x, spec)
    }

    fn pixel_unshuffle(&mut self, x: &Tensor<T>, spec: ShuffleSpec) -> Result<Tensor<T>> {
        pixel_unshuffle_3d(x, spec)
    }

    fn max_pool2(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::max_pool2(x)?.0)
    }

    fn batch_norm(&mut self, x: &Tensor<T>, layer: &BatchNormLayer) -> Result<Tensor<T>> {
        ops::batch_norm_eval(
            x,
            self.params.get(layer.gamma),
            self.params.get(layer.beta),
            self.params.get(layer.running_mean),
            self.params.get(layer.running_var),
            layer.eps,
        )
    }
}
