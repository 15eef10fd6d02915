use std::collections::BTreeMap;

use super::ops;
use super::params::{BatchNormLayer, ConvLayer, UpConvLayer};
use super::Exec;
use crate::error::{Error, Result};
use crate::shuffle::ShuffleSpec;
use crate::tensor::{Dims, Scalar};

/// One labelled intermediate of a shape trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub tag: String,
    pub dims: Dims,
}

/// Shape-only backend: runs the architecture code with dimensions in place of data,
/// enforcing the same compatibility checks as the numeric backends.
#[derive(Default)]
pub struct ShapeTracer {
    entries: Vec<TraceEntry>,
    ops: BTreeMap<&'static str, usize>,
}

impl ShapeTracer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_output(&mut self, dims: Dims) {
        self.entries.push(TraceEntry {
            tag: "output".into(),
            dims,
        });
    }

    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    /// Dims of the first entry labelled `tag`.
    pub fn find(&self, tag: &str) -> Option<Dims> {
        self.entries.iter().find(|e| e.tag == tag).map(|e| e.dims)
    }

    pub fn into_entries(self) -> Vec<TraceEntry> {
        self.entries
    }

    /// Total number of operations executed so far.
    pub fn op_count(&self) -> usize {
        self.ops.values().sum()
    }

    /// Operation counts keyed by kind (`conv`, `batch_norm`, ...).
    pub fn op_counts(&self) -> &BTreeMap<&'static str, usize> {
        &self.ops
    }

    fn count(&mut self, kind: &'static str) {
        *self.ops.entry(kind).or_default() += 1;
    }
}

impl<T: Scalar> Exec<T> for ShapeTracer {
    type Value = Dims;

    fn dims(&self, v: &Dims) -> Dims {
        *v
    }

    fn conv(&mut self, x: &Dims, layer: &ConvLayer) -> Result<Dims> {
        self.count("conv");
        if x.c() != layer.in_channels {
            return Err(Error::Shape(format!(
                "layer {} expects {} input channels, got {x}",
                layer.name, layer.in_channels
            )));
        }
        Ok(x.with_c(layer.out_channels))
    }

    fn conv_transpose(&mut self, x: &Dims, layer: &UpConvLayer) -> Result<Dims> {
        self.count("conv_transpose");
        if x.c() != layer.in_channels {
            return Err(Error::Shape(format!(
                "layer {} expects {} input channels, got {x}",
                layer.name, layer.in_channels
            )));
        }
        let s = x.spatial();
        Ok(Dims::new(x.n(), layer.out_channels, 2 * s[0], 2 * s[1], 2 * s[2]))
    }

    fn leaky_relu(&mut self, x: &Dims, _slope: f64) -> Result<Dims> {
        self.count("leaky_relu");
        Ok(*x)
    }

    fn add(&mut self, a: &Dims, b: &Dims) -> Result<Dims> {
        self.count("add");
        if a != b {
            return Err(Error::Shape(format!("cannot add {b} to {a}")));
        }
        Ok(*a)
    }

    fn concat(&mut self, parts: &[&Dims]) -> Result<Dims> {
        self.count("concat");
        let dims: Vec<Dims> = parts.iter().map(|d| **d).collect();
        ops::concat_dims(&dims)
    }

    fn pixel_shuffle(&mut self, x: &Dims, spec: ShuffleSpec) -> Result<Dims> {
        self.count("pixel_shuffle");
        spec.shuffled_dims(*x)
    }

    fn pixel_unshuffle(&mut self, x: &Dims, spec: ShuffleSpec) -> Result<Dims> {
        self.count("pixel_unshuffle");
        spec.unshuffled_dims(*x)
    }

    fn max_pool2(&mut self, x: &Dims) -> Result<Dims> {
        self.count("max_pool2");
        ops::pool_dims(*x)
    }

    fn batch_norm(&mut self, x: &Dims, layer: &BatchNormLayer) -> Result<Dims> {
        self.count("batch_norm");
        if x.c() != layer.channels {
            return Err(Error::Shape(format!(
                "layer {} normalises {} channels, got {x}",
                layer.name, layer.channels
            )));
        }
        Ok(*x)
    }

    fn record(&mut self, tag: &str, v: &Dims) {
        self.entries.push(TraceEntry {
            tag: tag.to_string(),
            dims: *v,
        });
    }
}
