use super::ops::{self, BatchNormCache};
use super::params::{BatchNormLayer, ConvLayer, ParamId, ParamStore, RunningStatsUpdate, UpConvLayer};
use super::Exec;
use crate::conv;
use crate::error::{Error, Result};
use crate::shuffle::{pixel_shuffle_3d, pixel_unshuffle_3d, ShuffleSpec};
use crate::tensor::{Dims, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv { x: usize, weight: ParamId, bias: ParamId },
    UpConv { x: usize, weight: ParamId, bias: ParamId },
    Leaky { x: usize, slope: T },
    Add { a: usize, b: usize },
    Concat { parts: Vec<usize> },
    Shuffle { x: usize, spec: ShuffleSpec },
    Unshuffle { x: usize, spec: ShuffleSpec },
    MaxPool { x: usize, arg: Vec<u32> },
    BatchNorm { x: usize, gamma: ParamId, beta: ParamId, cache: BatchNormCache<T> },
}

/// Records every operation so gradients can be propagated backwards.
pub struct Tape<'a, T: Scalar> {
    params: &'a ParamStore<T>,
    training: bool,
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    requires_grad: Vec<bool>,
    running: Vec<RunningStatsUpdate<T>>,
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    /// One entry per parameter in store order; `None` when the parameter did not
    /// take part in the graph or is a buffer.
    pub params: Vec<Option<Tensor<T>>>,
    inputs: Vec<(Var, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf created by [`Tape::input_with_grad`].
    pub fn input(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.iter().find(|(k, _)| *k == v).map(|(_, g)| g)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(e) => e.add_assign(&g).expect("gradient dims follow forward dims"),
        None => *slot = Some(g),
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    /// `training` selects batch statistics (and running-stat collection) for
    /// batch normalisation layers.
    pub fn new(params: &'a ParamStore<T>, training: bool) -> Self {
        Tape {
            params,
            training,
            values: Vec::new(),
            ops: Vec::new(),
            requires_grad: Vec::new(),
            running: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        Var(self.values.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn running_stats(&self) -> &[RunningStatsUpdate<T>] {
        &self.running
    }

    /// Sign pattern (input >= 0) of every rectifier input, in recording order.
    /// Two passes whose patterns agree traverse the same linear piece of the network.
    pub fn activation_signs(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for op in &self.ops {
            if let Op::Leaky { x, .. } = op {
                out.extend(self.values[*x].data().iter().map(|v| *v >= T::zero()));
            }
        }
        out
    }

    /// Propagates `seed` (the gradient of a scalar objective with respect to `out`)
    /// back through the recorded graph.
    pub fn backward(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.dims() != self.values[out.0].dims() {
            return Err(Error::Shape(format!(
                "seed gradient {} does not match output {}",
                seed.dims(),
                self.values[out.0].dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.values.len()).map(|_| None).collect();
        let mut pgrads: Vec<Option<Tensor<T>>> = (0..self.params.len()).map(|_| None).collect();
        let mut inputs = Vec::new();
        grads[out.0] = Some(seed);

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.ops[i] {
                Op::Leaf => {
                    if self.requires_grad[i] {
                        inputs.push((Var(i), g));
                    }
                }
                Op::Conv { x, weight, bias } => {
                    let cg = conv::conv3d_backward(
                        &self.values[*x],
                        self.params.get(*weight),
                        &g,
                        self.requires_grad[*x],
                    )?;
                    accumulate(&mut pgrads[*weight], cg.weight);
                    let bd = self.params.get(*bias).dims();
                    accumulate(&mut pgrads[*bias], Tensor::from_vec(bd, cg.bias)?);
                    if let Some(gx) = cg.input {
                        accumulate(&mut grads[*x], gx);
                    }
                }
                Op::UpConv { x, weight, bias } => {
                    let cg = conv::conv_transpose2_backward(&self.values[*x], self.params.get(*weight), &g)?;
                    accumulate(&mut pgrads[*weight], cg.weight);
                    let bd = self.params.get(*bias).dims();
                    accumulate(&mut pgrads[*bias], Tensor::from_vec(bd, cg.bias)?);
                    if self.requires_grad[*x] {
                        accumulate(&mut grads[*x], cg.input.expect("transposed backward yields input grad"));
                    }
                }
                Op::Leaky { x, slope } => {
                    if self.requires_grad[*x] {
                        accumulate(&mut grads[*x], ops::leaky_relu_backward(&self.values[*x], &g, *slope));
                    }
                }
                Op::Add { a, b } => {
                    if self.requires_grad[*b] {
                        accumulate(&mut grads[*b], g.clone());
                    }
                    if self.requires_grad[*a] {
                        accumulate(&mut grads[*a], g);
                    }
                }
                Op::Concat { parts } => {
                    let dims: Vec<Dims> = parts.iter().map(|&p| self.values[p].dims()).collect();
                    for (&p, gp) in parts.iter().zip(ops::split_channels(&g, &dims)) {
                        if self.requires_grad[p] {
                            accumulate(&mut grads[p], gp);
                        }
                    }
                }
                Op::Shuffle { x, spec } => {
                    if self.requires_grad[*x] {
                        accumulate(&mut grads[*x], pixel_unshuffle_3d(&g, *spec)?);
                    }
                }
                Op::Unshuffle { x, spec } => {
                    if self.requires_grad[*x] {
                        accumulate(&mut grads[*x], pixel_shuffle_3d(&g, *spec)?);
                    }
                }
                Op::MaxPool { x, arg } => {
                    if self.requires_grad[*x] {
                        let gx = ops::max_pool2_backward(self.values[*x].dims(), arg, &g);
                        accumulate(&mut grads[*x], gx);
                    }
                }
                Op::BatchNorm { x, gamma, beta, cache } => {
                    let gamma_t = self.params.get(*gamma);
                    let (gx, gg, gb) = ops::batch_norm_backward(cache, gamma_t, &g);
                    accumulate(&mut pgrads[*gamma], Tensor::from_vec(gamma_t.dims(), gg)?);
                    accumulate(&mut pgrads[*beta], Tensor::from_vec(gamma_t.dims(), gb)?);
                    if self.requires_grad[*x] {
                        accumulate(&mut grads[*x], gx);
                    }
                }
            }
        }
        Ok(Gradients { params: pgrads, inputs })
    }
}

impl<T: Scalar> Exec<T> for Tape<'_, T> {
    type Value = Var;

    fn dims(&self, v: &Var) -> Dims {
        self.values[v.0].dims()
    }

    fn conv(&mut self, x: &Var, layer: &ConvLayer) -> Result<Var> {
        let y = conv::conv3d(
            &self.values[x.0],
            self.params.get(layer.weight),
            Some(self.params.get(layer.bias).data()),
        )?;
        Ok(self.push(
            y,
            Op::Conv {
                x: x.0,
                weight: layer.weight,
                bias: layer.bias,
            },
            true,
        ))
    }

    fn conv_transpose(&mut self, x: &Var, layer: &UpConvLayer) -> Result<Var> {
        let y = conv::conv_transpose2(
            &self.values[x.0],
            self.params.get(layer.weight),
            self.params.get(layer.bias).data(),
        )?;
        Ok(self.push(
            y,
            Op::UpConv {
                x: x.0,
                weight: layer.weight,
                bias: layer.bias,
            },
            true,
        ))
    }

    fn leaky_relu(&mut self, x: &Var, slope: f64) -> Result<Var> {
        let slope = T::from_f64_lossy(slope);
        let y = ops::leaky_relu(&self.values[x.0], slope);
        let rg = self.requires_grad[x.0];
        Ok(self.push(y, Op::Leaky { x: x.0, slope }, rg))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = ops::add(&self.values[a.0], &self.values[b.0])?;
        let rg = self.requires_grad[a.0] || self.requires_grad[b.0];
        Ok(self.push(y, Op::Add { a: a.0, b: b.0 }, rg))
    }

    fn concat(&mut self, parts: &[&Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|p| &self.values[p.0]).collect();
        let y = ops::concat(&tensors)?;
        let rg = parts.iter().any(|p| self.requires_grad[p.0]);
        Ok(self.push(
            y,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            rg,
        ))
    }

    fn pixel_shuffle(&mut self, x: &Var, spec: ShuffleSpec) -> Result<Var> {
        let y = pixel_shuffle_3d(&self.values[x.0], spec)?;
        let rg = self.requires_grad[x.0];
        Ok(self.push(y, Op::Shuffle { x: x.0, spec }, rg))
    }

    fn pixel_unshuffle(&mut self, x: &Var, spec: ShuffleSpec) -> Result<Var> {
        let y = pixel_unshuffle_3d(&self.values[x.0], spec)?;
        let rg = self.requires_grad[x.0];
        Ok(self.push(y, Op::Unshuffle { x: x.0, spec }, rg))
    }

    fn max_pool2(&mut self, x: &Var) -> Result<Var> {
        let (y, arg) = ops::max_pool2(&self.values[x.0])?;
        let rg = self.requires_grad[x.0];
        Ok(self.push(y, Op::MaxPool { x: x.0, arg }, rg))
    }

    fn batch_norm(&mut self, x: &Var, layer: &BatchNormLayer) -> Result<Var> {
        let gamma = self.params.get(layer.gamma);
        let beta = self.params.get(layer.beta);
        if !self.training {
            return Err(Error::Config(format!(
                "layer {}: the tape only differentiates training-mode batch norm; use Eval for inference",
                layer.name
            )));
        }
        let (y, cache) = ops::batch_norm_train(&self.values[x.0], gamma, beta, layer.eps)?;
        self.running.push(RunningStatsUpdate {
            running_mean: layer.running_mean,
            running_var: layer.running_var,
            momentum: layer.momentum,
            batch_mean: cache.mean.clone(),
            batch_var: cache.var_unbiased.clone(),
        });
        Ok(self.push(
            y,
            Op::BatchNorm {
                x: x.0,
                gamma: layer.gamma,
                beta: layer.beta,
                cache,
            },
            true,
        ))
    }
}
