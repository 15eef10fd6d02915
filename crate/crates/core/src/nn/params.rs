use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Dims, Scalar, Tensor};

/// Index of a tensor inside a [`ParamStore`].
pub type ParamId = usize;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamKind {
    /// Convolution kernel; `fan_in` is the number of inputs feeding one output.
    Weight { fan_in: usize },
    Bias,
    BnGamma,
    BnBeta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Running statistics are buffers, not optimised parameters.
    pub fn trainable(&self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Dims,
    pub kind: ParamKind,
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

/// Kernel-2, stride-2 transposed convolution.
#[derive(Clone, Debug)]
pub struct UpConvLayer {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

/// Collects parameter specs while a network architecture is being laid out.
#[derive(Default)]
pub struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: String, dims: Dims, kind: ParamKind) -> ParamId {
        self.specs.push(ParamSpec { name, dims, kind });
        self.specs.len() - 1
    }

    pub fn conv(&mut self, name: &str, in_channels: usize, out_channels: usize, kernel: usize) -> ConvLayer {
        let weight = self.push(
            format!("{name}.weight"),
            Dims::new(out_channels, in_channels, kernel, kernel, kernel),
            ParamKind::Weight {
                fan_in: in_channels * kernel * kernel * kernel,
            },
        );
        let bias = self.push(format!("{name}.bias"), Dims::new(out_channels, 1, 1, 1, 1), ParamKind::Bias);
        ConvLayer {
            name: name.to_string(),
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn conv_transpose(&mut self, name: &str, in_channels: usize, out_channels: usize) -> UpConvLayer {
        let weight = self.push(
            format!("{name}.weight"),
            Dims::new(in_channels, out_channels, 2, 2, 2),
            ParamKind::Weight { fan_in: in_channels },
        );
        let bias = self.push(format!("{name}.bias"), Dims::new(out_channels, 1, 1, 1, 1), ParamKind::Bias);
        UpConvLayer {
            name: name.to_string(),
            weight,
            bias,
            in_channels,
            out_channels,
        }
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> BatchNormLayer {
        let d = Dims::new(channels, 1, 1, 1, 1);
        BatchNormLayer {
            name: name.to_string(),
            gamma: self.push(format!("{name}.gamma"), d, ParamKind::BnGamma),
            beta: self.push(format!("{name}.beta"), d, ParamKind::BnBeta),
            running_mean: self.push(format!("{name}.running_mean"), d, ParamKind::RunningMean),
            running_var: self.push(format!("{name}.running_var"), d, ParamKind::RunningVar),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn finish(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// Standard deviation of Kaiming-Normal initialisation for a leaky rectifier.
pub fn kaiming_std(fan_in: usize, negative_slope: f64) -> f64 {
    let gain = (2.0 / (1.0 + negative_slope * negative_slope)).sqrt();
    gain / (fan_in as f64).sqrt()
}

/// Zero-mean normal tensor with std `kaiming_std(fan_in, slope)`.
pub fn kaiming_normal<T: Scalar>(dims: Dims, fan_in: usize, negative_slope: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let std = kaiming_std(fan_in, negative_slope);
    Tensor::from_fn(dims, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64_lossy(z * std)
    })
}

/// Named parameter and buffer tensors of a network, in layout order.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    specs: Vec<ParamSpec>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    /// Allocates every tensor: Kaiming-Normal weights drawn in layout order from
    /// `seed`, zero biases and shifts, unit scales and running variances.
    pub fn initialize(specs: Vec<ParamSpec>, seed: u64, negative_slope: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = specs
            .iter()
            .map(|s| match s.kind {
                ParamKind::Weight { fan_in } => kaiming_normal(s.dims, fan_in, negative_slope, &mut rng),
                ParamKind::Bias | ParamKind::BnBeta | ParamKind::RunningMean => Tensor::zeros(s.dims),
                ParamKind::BnGamma | ParamKind::RunningVar => Tensor::full(s.dims, T::one()),
            })
            .collect();
        ParamStore { specs, values }
    }

    pub fn from_parts(specs: Vec<ParamSpec>, values: Vec<Tensor<T>>) -> Result<Self> {
        if specs.len() != values.len() {
            return Err(Error::Shape(format!(
                "{} parameter specs but {} tensors",
                specs.len(),
                values.len()
            )));
        }
        for (s, v) in specs.iter().zip(&values) {
            if s.dims != v.dims() {
                return Err(Error::Shape(format!(
                    "parameter {} expects dims {} but got {}",
                    s.name,
                    s.dims,
                    v.dims()
                )));
            }
        }
        Ok(ParamStore { specs, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.specs
            .iter()
            .filter(|s| s.kind.trainable())
            .map(|s| s.dims.numel())
            .sum()
    }

    /// Folds batch statistics collected during a training forward pass into the running buffers.
    pub fn apply_running_stats(&mut self, updates: &[RunningStatsUpdate<T>]) {
        for u in updates {
            let m = T::from_f64_lossy(u.momentum);
            let keep = T::one() - m;
            for (r, &b) in self.values[u.running_mean].data_mut().iter_mut().zip(&u.batch_mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in self.values[u.running_var].data_mut().iter_mut().zip(&u.batch_var) {
                *r = keep * *r + m * b;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            specs: self.specs.clone(),
            values: self.values.iter().map(|v| v.cast()).collect(),
        }
    }
}

/// Per-channel batch statistics from a training-mode batch normalisation.
#[derive(Clone, Debug)]
pub struct RunningStatsUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub batch_mean: Vec<T>,
    /// Unbiased (n - 1) variance.
    pub batch_var: Vec<T>,
}

pub fn parameter_count(specs: &[ParamSpec]) -> usize {
    specs
        .iter()
        .filter(|s| s.kind.trainable())
        .map(|s| s.dims.numel())
        .sum()
}
