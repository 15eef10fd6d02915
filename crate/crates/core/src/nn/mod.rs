//! A small define-by-run network engine.
//!
//! Architectures are written once against [`Exec`] and can then be run three
//! ways: [`Tape`] records the graph for reverse-mode differentiation, [`Eval`]
//! computes outputs while freeing intermediates, and [`ShapeTracer`] propagates
//! only dimensions so full-size configurations can be checked without compute.

mod eval;
pub mod ops;
mod params;
mod tape;
mod trace;

pub use eval::Eval;
pub use params::{
    kaiming_normal, kaiming_std, parameter_count, BatchNormLayer, ConvLayer, LayoutBuilder, ParamId, ParamKind,
    ParamSpec, ParamStore, RunningStatsUpdate, UpConvLayer,
};
pub use tape::{Gradients, Tape, Var};
pub use trace::{ShapeTracer, TraceEntry};

use crate::error::Result;
use crate::shuffle::ShuffleSpec;
use crate::tensor::{Dims, Scalar};

/// Execution backend for network graphs.
pub trait Exec<T: Scalar> {
    type Value;

    fn dims(&self, v: &Self::Value) -> Dims;
    fn conv(&mut self, x: &Self::Value, layer: &ConvLayer) -> Result<Self::Value>;
    fn conv_transpose(&mut self, x: &Self::Value, layer: &UpConvLayer) -> Result<Self::Value>;
    /// Leaky rectifier; a slope of 0 gives the plain rectifier.
    fn leaky_relu(&mut self, x: &Self::Value, slope: f64) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn concat(&mut self, parts: &[&Self::Value]) -> Result<Self::Value>;
    fn pixel_shuffle(&mut self, x: &Self::Value, spec: ShuffleSpec) -> Result<Self::Value>;
    fn pixel_unshuffle(&mut self, x: &Self::Value, spec: ShuffleSpec) -> Result<Self::Value>;
    fn max_pool2(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn batch_norm(&mut self, x: &Self::Value, layer: &BatchNormLayer) -> Result<Self::Value>;

    /// Hook for labelling intermediate values; only the tracer keeps them.
    fn record(&mut self, _tag: &str, _v: &Self::Value) {}
}

/// A network architecture that can run on any [`Exec`] backend.
pub trait Network {
    fn param_specs(&self) -> &[ParamSpec];
    fn in_channels(&self) -> usize;
    fn out_channels(&self) -> usize;
    /// Every spatial input size must be a multiple of this.
    fn spatial_multiple(&self) -> usize;
    /// Negative slope used for Kaiming initialisation.
    fn init_slope(&self) -> f64;
    fn forward_with<T: Scalar, E: Exec<T>>(&self, exec: &mut E, x: &E::Value) -> Result<E::Value>;

    /// Checks input dims before any compute happens.
    fn check_input(&self, dims: Dims) -> Result<()> {
        dims.validate()?;
        if dims.c() != self.in_channels() {
            return Err(crate::Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.in_channels(),
                dims.c()
            )));
        }
        let m = self.spatial_multiple();
        if dims.spatial().iter().any(|s| s % m != 0) {
            return Err(crate::Error::Config(format!(
                "input spatial dims {:?} must be divisible by {m}",
                dims.spatial()
            )));
        }
        Ok(())
    }

    /// Runs a shape-only pass; the tracer holds the labelled entries and op counts.
    fn trace(&self, input: Dims) -> Result<ShapeTracer> {
        self.check_input(input)?;
        let mut tracer = ShapeTracer::new();
        let out = <Self as Network>::forward_with::<f32, _>(self, &mut tracer, &input)?;
        tracer.record_output(out);
        Ok(tracer)
    }
}
