//! The ShuffleUNet architecture.
//!
//! Each contraction level runs a double convolution, splits the result into
//! four convolutional decomposition branches, keeps all four as additive skips,
//! and downsamples the fourth through a learned pixel unshuffle (which also
//! travels to the expansion path as a concatenation skip). A latent double
//! convolution sits at the bottom. Each expansion level upsamples with a learned
//! pixel shuffle, decomposes again, adds the four matching skips, concatenates
//! the sums with the fourth contraction branch and fuses them with a double
//! convolution. A 1x1x1 convolution produces the output. There are no
//! normalisation layers.
//!
//! Channel schedule with `F_l = base_filters · 2^(l-1)`:
//!
//! | stage                         | channels out |
//! |-------------------------------|--------------|
//! | contraction double conv, l    | `F_l`        |
//! | contraction branches, l       | `F_l` each   |
//! | learned unshuffle, l          | `8 F_l`      |
//! | latent double conv            | `2 F_L`      |
//! | learned shuffle into level l  | `F_l / 4`    |
//! | expansion branches, l         | `F_l` each   |
//! | concatenation, l              | `5 F_l`      |
//! | expansion double conv, l      | `F_l`        |

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::nn::{ConvLayer, Eval, Exec, LayoutBuilder, Network, ParamSpec, ParamStore};
use crate::shuffle::ShuffleSpec;
use crate::tensor::{Dims, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Relu,
}

impl Activation {
    pub fn slope(&self) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => *slope,
            Activation::Relu => 0.0,
        }
    }
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu { slope: 0.01 }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Activation::LeakyRelu { slope } => write!(f, "leaky_relu:{slope}"),
            Activation::Relu => write!(f, "relu"),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "relu" => Ok(Activation::Relu),
            None if s == "leaky_relu" => Ok(Activation::default()),
            Some(("leaky_relu", slope)) => slope
                .parse()
                .map(|slope| Activation::LeakyRelu { slope })
                .map_err(|_| Error::Config(format!("bad leaky_relu slope {slope:?}"))),
            _ => Err(Error::Config(format!("unknown activation {s:?}"))),
        }
    }
}

/// Complete hyperparameter set of a ShuffleUNet.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub levels: usize,
    pub base_filters: usize,
    /// Down/up-sampling factor per level; only 2 is supported.
    pub scale_per_level: usize,
    pub conv_kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub activation: Activation,
    pub global_residual: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 4,
            base_filters: 64,
            scale_per_level: 2,
            conv_kernel: 3,
            in_channels: 1,
            out_channels: 1,
            activation: Activation::default(),
            global_residual: false,
            init_seed: 0,
        }
    }
}

const MODEL_KEYS: &[&str] = &[
    "levels",
    "base_filters",
    "scale_per_level",
    "conv_kernel",
    "in_channels",
    "out_channels",
    "activation",
    "global_residual",
    "init_seed",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::Config("levels must be >= 1".into()));
        }
        if self.base_filters == 0 || self.base_filters % 8 != 0 {
            return Err(Error::Config(format!(
                "base_filters must be a positive multiple of 8, got {}",
                self.base_filters
            )));
        }
        if self.scale_per_level != 2 {
            return Err(Error::Config(format!(
                "scale_per_level is fixed at 2, got {}",
                self.scale_per_level
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config(format!("conv_kernel must be odd, got {}", self.conv_kernel)));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        if self.global_residual && self.in_channels != self.out_channels {
            return Err(Error::Config("global_residual needs in_channels == out_channels".into()));
        }
        Ok(())
    }

    /// Filters of contraction level `level` (1-based).
    pub fn filters(&self, level: usize) -> usize {
        self.base_filters << (level - 1)
    }

    pub fn block_specs(&self) -> Vec<BlockSpec> {
        (1..=self.levels)
            .map(|level| BlockSpec {
                level,
                contraction_filters: self.filters(level),
            })
            .collect()
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("model.levels", self.levels);
        kv.set("model.base_filters", self.base_filters);
        kv.set("model.scale_per_level", self.scale_per_level);
        kv.set("model.conv_kernel", self.conv_kernel);
        kv.set("model.in_channels", self.in_channels);
        kv.set("model.out_channels", self.out_channels);
        kv.set("model.activation", self.activation);
        kv.set("model.global_residual", self.global_residual);
        kv.set("model.init_seed", self.init_seed);
        kv
    }

    /// Reads `model.*` keys, falling back to defaults for absent ones.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let unknown = kv.unknown_keys("model", MODEL_KEYS);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown model keys: {}", unknown.join(", "))));
        }
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            levels: kv.get_parsed("model.levels")?.unwrap_or(d.levels),
            base_filters: kv.get_parsed("model.base_filters")?.unwrap_or(d.base_filters),
            scale_per_level: kv.get_parsed("model.scale_per_level")?.unwrap_or(d.scale_per_level),
            conv_kernel: kv.get_parsed("model.conv_kernel")?.unwrap_or(d.conv_kernel),
            in_channels: kv.get_parsed("model.in_channels")?.unwrap_or(d.in_channels),
            out_channels: kv.get_parsed("model.out_channels")?.unwrap_or(d.out_channels),
            activation: kv.get_parsed("model.activation")?.unwrap_or(d.activation),
            global_residual: kv.get_parsed("model.global_residual")?.unwrap_or(d.global_residual),
            init_seed: kv.get_parsed("model.init_seed")?.unwrap_or(d.init_seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Filter count of one contraction level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub level: usize,
    pub contraction_filters: usize,
}

#[derive(Clone, Debug)]
pub struct ContractionBlock {
    pub level: usize,
    pub double_conv: [ConvLayer; 2],
    pub decomposition: [ConvLayer; 4],
    pub unshuffle: ConvLayer,
}

#[derive(Clone, Debug)]
pub struct ExpansionBlock {
    pub level: usize,
    pub shuffle: ConvLayer,
    pub decomposition: [ConvLayer; 4],
    pub double_conv: [ConvLayer; 2],
}

/// Layer layout of a ShuffleUNet; weights live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ShuffleUNetArch {
    config: ModelConfig,
    pub contraction: Vec<ContractionBlock>,
    pub latent: [ConvLayer; 2],
    /// Deepest level first.
    pub expansion: Vec<ExpansionBlock>,
    pub output: ConvLayer,
    specs: Vec<ParamSpec>,
}

fn double(b: &mut LayoutBuilder, name: &str, cin: usize, cout: usize, k: usize) -> [ConvLayer; 2] {
    [
        b.conv(&format!("{name}.conv1"), cin, cout, k),
        b.conv(&format!("{name}.conv2"), cout, cout, k),
    ]
}

fn branches(b: &mut LayoutBuilder, name: &str, cin: usize, cout: usize, k: usize) -> [ConvLayer; 4] {
    [1, 2, 3, 4].map(|i| b.conv(&format!("{name}.branch{i}"), cin, cout, k))
}

impl ShuffleUNetArch {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let k = config.conv_kernel;
        let mut b = LayoutBuilder::new();
        let mut contraction = Vec::with_capacity(config.levels);
        let mut cin = config.in_channels;
        for level in 1..=config.levels {
            let f = config.filters(level);
            let name = format!("enc{level}");
            contraction.push(ContractionBlock {
                level,
                double_conv: double(&mut b, &format!("{name}.double_conv"), cin, f, k),
                decomposition: branches(&mut b, &format!("{name}.decomposition"), f, f, k),
                unshuffle: b.conv(&format!("{name}.unshuffle"), f, f, k),
            });
            cin = 8 * f;
        }
        let latent_filters = 2 * config.filters(config.levels);
        let latent = double(&mut b, "latent", cin, latent_filters, k);
        let mut expansion = Vec::with_capacity(config.levels);
        let mut below = latent_filters;
        for level in (1..=config.levels).rev() {
            let f = config.filters(level);
            let name = format!("dec{level}");
            expansion.push(ExpansionBlock {
                level,
                shuffle: b.conv(&format!("{name}.shuffle"), below, below, k),
                decomposition: branches(&mut b, &format!("{name}.decomposition"), below / 8, f, k),
                double_conv: double(&mut b, &format!("{name}.double_conv"), 5 * f, f, k),
            });
            below = f;
        }
        let output = b.conv("output", config.filters(1), config.out_channels, 1);
        Ok(ShuffleUNetArch {
            config,
            contraction,
            latent,
            expansion,
            output,
            specs: b.finish(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
}

/// Two successive (convolution, activation) stages.
pub fn double_conv<T: Scalar, E: Exec<T>>(
    exec: &mut E,
    x: &E::Value,
    layers: &[ConvLayer; 2],
    slope: f64,
) -> Result<E::Value> {
    let h = exec.conv(x, &layers[0])?;
    let h = exec.leaky_relu(&h, slope)?;
    let h = exec.conv(&h, &layers[1])?;
    exec.leaky_relu(&h, slope)
}

/// Four independent (convolution, activation) branches over the same input, in branch order.
pub fn conv_decomposition<T: Scalar, E: Exec<T>>(
    exec: &mut E,
    x: &E::Value,
    layers: &[ConvLayer; 4],
    slope: f64,
) -> Result<[E::Value; 4]> {
    let mut out = Vec::with_capacity(4);
    for layer in layers {
        let h = exec.conv(x, layer)?;
        out.push(exec.leaky_relu(&h, slope)?);
    }
    Ok(out.try_into().unwrap_or_else(|_| unreachable!("four branches")))
}

impl Network for ShuffleUNetArch {
    fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    fn in_channels(&self) -> usize {
        self.config.in_channels
    }

    fn out_channels(&self) -> usize {
        self.config.out_channels
    }

    fn spatial_multiple(&self) -> usize {
        1 << self.config.levels
    }

    fn init_slope(&self) -> f64 {
        self.config.activation.slope()
    }

    fn forward_with<T: Scalar, E: Exec<T>>(&self, exec: &mut E, x: &E::Value) -> Result<E::Value> {
        let slope = self.config.activation.slope();
        let spec = ShuffleSpec::new(self.config.scale_per_level)?;
        let mut skips: Vec<[E::Value; 4]> = Vec::with_capacity(self.config.levels);
        let mut down: Option<E::Value> = None;
        for block in &self.contraction {
            let l = block.level;
            let y = double_conv(exec, down.as_ref().unwrap_or(x), &block.double_conv, slope)?;
            exec.record(&format!("enc{l}.double_conv"), &y);
            let a = conv_decomposition(exec, &y, &block.decomposition, slope)?;
            for (i, ai) in a.iter().enumerate() {
                exec.record(&format!("enc{l}.branch{}", i + 1), ai);
            }
            let pre = exec.conv(&a[3], &block.unshuffle)?;
            let d = exec.pixel_unshuffle(&pre, spec)?;
            exec.record(&format!("enc{l}.unshuffle"), &d);
            skips.push(a);
            down = Some(d);
        }
        let bottom = down.ok_or_else(|| Error::Config("network has no levels".into()))?;
        let mut z = double_conv(exec, &bottom, &self.latent, slope)?;
        drop(bottom);
        exec.record("latent", &z);

        for (block, a) in self.expansion.iter().zip(skips.iter().rev()) {
            let l = block.level;
            let pre = exec.conv(&z, &block.shuffle)?;
            let p = exec.pixel_shuffle(&pre, spec)?;
            exec.record(&format!("dec{l}.shuffle"), &p);
            let b = conv_decomposition(exec, &p, &block.decomposition, slope)?;
            let mut sums = Vec::with_capacity(4);
            for (i, (bi, ai)) in b.iter().zip(a.iter()).enumerate() {
                exec.record(&format!("dec{l}.branch{}", i + 1), bi);
                sums.push(exec.add(bi, ai)?);
            }
            let cat = exec.concat(&[&sums[0], &sums[1], &sums[2], &sums[3], &a[3]])?;
            exec.record(&format!("dec{l}.concat"), &cat);
            z = double_conv(exec, &cat, &block.double_conv, slope)?;
            exec.record(&format!("dec{l}.double_conv"), &z);
        }
        let out = exec.conv(&z, &self.output)?;
        if self.config.global_residual {
            exec.add(&out, x)
        } else {
            Ok(out)
        }
    }
}

/// A network that can be rebuilt from its key-value configuration.
pub trait Architecture: Network + Sized {
    /// Identifier stored in checkpoints.
    const NAME: &'static str;
    fn config_kv(&self) -> KeyValues;
    fn from_kv(kv: &KeyValues) -> Result<Self>;
}

impl Architecture for ShuffleUNetArch {
    const NAME: &'static str = "shuffleunet";

    fn config_kv(&self) -> KeyValues {
        self.config.to_kv()
    }

    fn from_kv(kv: &KeyValues) -> Result<Self> {
        ShuffleUNetArch::new(ModelConfig::from_kv(kv)?)
    }
}

/// An architecture together with its weights.
#[derive(Clone, Debug)]
pub struct Model<A, T> {
    pub arch: A,
    pub params: ParamStore<T>,
}

pub type ShuffleUNet<T = f32> = Model<ShuffleUNetArch, T>;

impl<T: Scalar> ShuffleUNet<T> {
    /// Builds the network and initialises it from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let seed = config.init_seed;
        Ok(Model::initialized(ShuffleUNetArch::new(config)?, seed))
    }

    pub fn config(&self) -> &ModelConfig {
        self.arch.config()
    }
}

impl<A: Network, T: Scalar> Model<A, T> {
    pub fn initialized(arch: A, seed: u64) -> Self {
        let params = ParamStore::initialize(arch.param_specs().to_vec(), seed, arch.init_slope());
        Model { arch, params }
    }

    /// Re-draws every weight with Kaiming-Normal init from `seed`; biases become zero.
    pub fn init_weights(&mut self, seed: u64) {
        self.params = ParamStore::initialize(self.arch.param_specs().to_vec(), seed, self.arch.init_slope());
    }

    /// Inference forward pass.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.arch.check_input(x.dims())?;
        let mut ev = Eval::new(&self.params);
        self.arch.forward_with(&mut ev, x)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    pub fn output_dims(&self, input: Dims) -> Dims {
        input.with_c(self.arch.out_channels())
    }
}
