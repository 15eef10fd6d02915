//! Comparison methods: trilinear and sinc interpolation, and a plain 3D UNet.

use std::fmt;
use std::str::FromStr;

use ndarray::Array3;

use crate::config::KeyValues;
use crate::data::{regridded, Volume};
use crate::error::{Error, Result};
use crate::model::{Architecture, Model};
use crate::nn::{BatchNormLayer, ConvLayer, Exec, LayoutBuilder, Network, ParamSpec, UpConvLayer};
use crate::tensor::Scalar;

pub use crate::data::sinc_upsample;

/// Method identifiers accepted by the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    ShuffleUNet,
    UNet,
    Sinc,
    Trilinear,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::ShuffleUNet, Method::UNet, Method::Sinc, Method::Trilinear];

    pub fn name(&self) -> &'static str {
        match self {
            Method::ShuffleUNet => "shuffleunet",
            Method::UNet => "unet",
            Method::Sinc => "sinc",
            Method::Trilinear => "trilinear",
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, Method::ShuffleUNet | Method::UNet)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (expected shuffleunet, unet, sinc or trilinear)")))
    }
}

/// Source coordinate and weights along one axis for align-corners-false sampling.
///
/// Output sample `t` sits at input coordinate `(t + 0.5)·n/m − 0.5`. The two
/// nearest input samples are blended; beyond the outermost input centres the
/// edge pair is extended linearly, so linear ramps are reproduced everywhere.
fn axis_taps(n: usize, m: usize) -> Vec<(usize, usize, f64)> {
    (0..m)
        .map(|t| {
            if n == 1 {
                return (0, 0, 0.0);
            }
            let x = (t as f64 + 0.5) * n as f64 / m as f64 - 0.5;
            let i0 = (x.floor().max(0.0) as usize).min(n - 2);
            (i0, i0 + 1, x - i0 as f64)
        })
        .collect()
}

/// Trilinear interpolation of raw voxels onto `target` dims.
pub fn trilinear_resample(data: &Array3<f64>, target: [usize; 3]) -> Array3<f64> {
    let s = data.shape();
    let taps = [0, 1, 2].map(|a| axis_taps(s[a], target[a]));
    Array3::from_shape_fn(target, |(i, j, k)| {
        let (a0, a1, wa) = taps[0][i];
        let (b0, b1, wb) = taps[1][j];
        let (c0, c1, wc) = taps[2][k];
        let mut acc = 0.0;
        for (ia, fa) in [(a0, 1.0 - wa), (a1, wa)] {
            for (ib, fb) in [(b0, 1.0 - wb), (b1, wb)] {
                for (ic, fc) in [(c0, 1.0 - wc), (c1, wc)] {
                    acc += fa * fb * fc * data[[ia, ib, ic]];
                }
            }
        }
        acc
    })
}

/// Trilinear upsampling of a volume; the output grid spans the same field of view.
pub fn trilinear_upsample(lr: &Volume, target: [usize; 3]) -> Result<Volume> {
    let dims = lr.dims();
    if let Some(a) = (0..3).find(|&a| target[a] < dims[a] || dims[a] == 0) {
        return Err(Error::Data(format!(
            "trilinear target {target:?} is smaller than input {dims:?} on axis {a}"
        )));
    }
    let stretch = [0, 1, 2].map(|a| dims[a] as f64 / target[a] as f64);
    regridded(lr, trilinear_resample(&lr.voxels.mapv(|x| x as f64), target), stretch)
}

/// Upsamples with a non-learned method.
pub fn interpolate(method: Method, lr: &Volume, target: [usize; 3]) -> Result<Volume> {
    match method {
        Method::Sinc => sinc_upsample(lr, target),
        Method::Trilinear => trilinear_upsample(lr, target),
        m => Err(Error::Config(format!("{m} is a learned method, not an interpolator"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    /// Number of resolutions; `levels − 1` pooling steps.
    pub levels: usize,
    pub base_filters: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub init_seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            levels: 4,
            base_filters: 32,
            in_channels: 1,
            out_channels: 1,
            init_seed: 0,
        }
    }
}

const UNET_KEYS: &[&str] = &["levels", "base_filters", "in_channels", "out_channels", "init_seed"];

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 || self.levels > 6 {
            return Err(Error::Config(format!("unet levels must be in 2..=6, got {}", self.levels)));
        }
        if self.base_filters == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("unet filter and channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn filters(&self, level: usize) -> usize {
        self.base_filters << (level - 1)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("unet.levels", self.levels);
        kv.set("unet.base_filters", self.base_filters);
        kv.set("unet.in_channels", self.in_channels);
        kv.set("unet.out_channels", self.out_channels);
        kv.set("unet.init_seed", self.init_seed);
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let unknown = kv.unknown_keys("unet", UNET_KEYS);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown unet keys: {}", unknown.join(", "))));
        }
        let d = UNetConfig::default();
        let cfg = UNetConfig {
            levels: kv.get_parsed("unet.levels")?.unwrap_or(d.levels),
            base_filters: kv.get_parsed("unet.base_filters")?.unwrap_or(d.base_filters),
            in_channels: kv.get_parsed("unet.in_channels")?.unwrap_or(d.in_channels),
            out_channels: kv.get_parsed("unet.out_channels")?.unwrap_or(d.out_channels),
            init_seed: kv.get_parsed("unet.init_seed")?.unwrap_or(d.init_seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Convolution, batch normalisation, rectifier.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: ConvLayer,
    pub bn: BatchNormLayer,
}

fn conv_bn(b: &mut LayoutBuilder, name: &str, cin: usize, cout: usize) -> ConvBnRelu {
    ConvBnRelu {
        conv: b.conv(&format!("{name}.conv"), cin, cout, 3),
        bn: b.batch_norm(&format!("{name}.bn"), cout),
    }
}

fn double_block(b: &mut LayoutBuilder, name: &str, cin: usize, cout: usize) -> [ConvBnRelu; 2] {
    [
        conv_bn(b, &format!("{name}.1"), cin, cout),
        conv_bn(b, &format!("{name}.2"), cout, cout),
    ]
}

fn run_double<T: Scalar, E: Exec<T>>(exec: &mut E, x: &E::Value, block: &[ConvBnRelu; 2]) -> Result<E::Value> {
    let mut h: Option<E::Value> = None;
    for stage in block {
        let c = exec.conv(h.as_ref().unwrap_or(x), &stage.conv)?;
        let n = exec.batch_norm(&c, &stage.bn)?;
        h = Some(exec.leaky_relu(&n, 0.0)?);
    }
    h.ok_or_else(|| Error::Config("empty block".into()))
}

#[derive(Clone, Debug)]
pub struct UNetDecoder {
    pub level: usize,
    pub up: UpConvLayer,
    pub block: [ConvBnRelu; 2],
}

/// A standard 3D UNet: max-pool down, transposed-convolution up, batch normalisation.
#[derive(Clone, Debug)]
pub struct UNet3dArch {
    config: UNetConfig,
    /// Encoder blocks for levels `1..levels`; the last one is the bottleneck.
    pub encoder: Vec<[ConvBnRelu; 2]>,
    /// Deepest first.
    pub decoder: Vec<UNetDecoder>,
    pub output: ConvLayer,
    specs: Vec<ParamSpec>,
}

impl UNet3dArch {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut b = LayoutBuilder::new();
        let mut cin = config.in_channels;
        let mut encoder = Vec::new();
        for level in 1..=config.levels {
            let f = config.filters(level);
            encoder.push(double_block(&mut b, &format!("enc{level}"), cin, f));
            cin = f;
        }
        let mut decoder = Vec::new();
        for level in (1..config.levels).rev() {
            let f = config.filters(level);
            decoder.push(UNetDecoder {
                level,
                up: b.conv_transpose(&format!("dec{level}.up"), config.filters(level + 1), f),
                block: double_block(&mut b, &format!("dec{level}"), 2 * f, f),
            });
        }
        let output = b.conv("output", config.filters(1), config.out_channels, 1);
        Ok(UNet3dArch {
            config,
            encoder,
            decoder,
            output,
            specs: b.finish(),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }
}

impl Network for UNet3dArch {
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
        1 << (self.config.levels - 1)
    }

    fn init_slope(&self) -> f64 {
        0.0
    }

    fn forward_with<T: Scalar, E: Exec<T>>(&self, exec: &mut E, x: &E::Value) -> Result<E::Value> {
        let mut skips = Vec::with_capacity(self.config.levels);
        let mut h: Option<E::Value> = None;
        for (i, block) in self.encoder.iter().enumerate() {
            let input = match &h {
                None => None,
                Some(prev) => Some(exec.max_pool2(prev)?),
            };
            let y = run_double(exec, input.as_ref().unwrap_or(x), block)?;
            exec.record(&format!("enc{}", i + 1), &y);
            if let Some(prev) = h.take() {
                skips.push(prev);
            }
            h = Some(y);
        }
        let mut z = h.ok_or_else(|| Error::Config("network has no levels".into()))?;
        for dec in &self.decoder {
            let up = exec.conv_transpose(&z, &dec.up)?;
            let skip = skips.pop().ok_or_else(|| Error::Config("missing skip connection".into()))?;
            let cat = exec.concat(&[&skip, &up])?;
            z = run_double(exec, &cat, &dec.block)?;
            exec.record(&format!("dec{}", dec.level), &z);
        }
        exec.conv(&z, &self.output)
    }
}

impl Architecture for UNet3dArch {
    const NAME: &'static str = "unet3d";

    fn config_kv(&self) -> KeyValues {
        self.config.to_kv()
    }

    fn from_kv(kv: &KeyValues) -> Result<Self> {
        UNet3dArch::new(UNetConfig::from_kv(kv)?)
    }
}

pub type UNet3d<T = f32> = Model<UNet3dArch, T>;

impl<T: Scalar> UNet3d<T> {
    pub fn new(config: UNetConfig) -> Result<Self> {
        Ok(Model::initialized(UNet3dArch::new(config)?, config.init_seed))
    }
}

/// One line per architecture with its trainable parameter count.
pub fn parameter_report(entries: &[(&str, usize)]) -> String {
    entries
        .iter()
        .map(|(name, n)| format!("{name:<14} {n:>12} parameters\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Dims, Tensor};

    #[test]
    fn constants_and_ramps() {
        let c = Array3::from_elem((3, 4, 5), 2.5);
        assert!(trilinear_resample(&c, [6, 8, 10]).iter().all(|v| (*v - 2.5).abs() < 1e-15));
        let ramp = Array3::from_shape_fn((4, 3, 3), |(i, _, _)| 1.0 + 2.0 * i as f64);
        let up = trilinear_resample(&ramp, [8, 6, 6]);
        for ((t, _, _), v) in up.indexed_iter() {
            let x = (t as f64 + 0.5) * 0.5 - 0.5;
            assert!((v - (1.0 + 2.0 * x)).abs() < 1e-12);
        }
    }

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("bicubic".parse::<Method>().is_err());
    }

    #[test]
    fn unet_same_size_and_kv() {
        let cfg = UNetConfig {
            levels: 3,
            base_filters: 2,
            ..UNetConfig::default()
        };
        let m = UNet3d::<f32>::new(cfg).unwrap();
        let y = m.forward(&Tensor::zeros(Dims::new(2, 1, 8, 8, 4))).unwrap();
        assert_eq!(y.dims(), Dims::new(2, 1, 8, 8, 4));
        assert_eq!(UNetConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        assert!(m.parameter_count() > 0);
    }

    #[test]
    fn unet_full_size_trace() {
        let arch = UNet3dArch::new(UNetConfig::default()).unwrap();
        let t = arch.trace(Dims::new(1, 1, 96, 96, 48)).unwrap();
        assert_eq!(t.find("enc4"), Some(Dims::new(1, 256, 12, 12, 6)));
        assert_eq!(t.find("dec1"), Some(Dims::new(1, 32, 96, 96, 48)));
        assert!(t.op_counts().get("batch_norm").copied().unwrap_or(0) > 0);
    }
}
