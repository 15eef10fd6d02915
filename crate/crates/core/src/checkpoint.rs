//! Single-file binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SHUNCKPT" | u32 version
//! str architecture | str config (key = value text)
//! u32 tensor count, then per tensor: str name | 5 × u32 dims | f32 data
//! u8 has_state, then optionally:
//!   u64 epoch | u64 global_step | f64 best_validation_loss
//!   u64 adam step | per tensor: f32 m | f32 v
//!   32 bytes rng seed | u64 rng stream | u128 rng word position
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::{Architecture, Model};
use crate::nn::ParamStore;
use crate::tensor::{Dims, Tensor};
use crate::training::{AdamState, RngState, TrainState};

const MAGIC: &[u8; 8] = b"SHUNCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub architecture: String,
    pub config: KeyValues,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub state: Option<TrainState>,
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> std::io::Result<()> {
        self.0.write_all(b)
    }
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn str(&mut self, s: &str) -> std::io::Result<()> {
        self.u32(s.len() as u32)?;
        self.bytes(s.as_bytes())
    }
    fn floats(&mut self, v: &[f32]) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(v.len() * 4);
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        self.bytes(&buf)
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0
            .read_exact(&mut b)
            .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let mut b = vec![0u8; n];
        self.0
            .read_exact(&mut b)
            .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
        String::from_utf8(b).map_err(|_| Error::Checkpoint("string field is not UTF-8".into()))
    }
    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut b = vec![0u8; n * 4];
        self.0
            .read_exact(&mut b)
            .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

impl Checkpoint {
    pub fn from_model<A: Architecture>(model: &Model<A, f32>, state: Option<TrainState>) -> Self {
        Checkpoint {
            architecture: A::NAME.to_string(),
            config: model.arch.config_kv(),
            tensors: model
                .params
                .specs()
                .iter()
                .zip(model.params.values())
                .map(|(s, v)| (s.name.clone(), v.clone()))
                .collect(),
            state,
        }
    }

    /// Rebuilds the model, checking architecture, config and every tensor name and shape.
    pub fn to_model<A: Architecture>(&self) -> Result<Model<A, f32>> {
        if self.architecture != A::NAME {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a {} network, expected {}",
                self.architecture,
                A::NAME
            )));
        }
        let arch = A::from_kv(&self.config)?;
        let specs = arch.param_specs().to_vec();
        if specs.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "config implies {} tensors, checkpoint has {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for (s, (name, t)) in specs.iter().zip(&self.tensors) {
            if s.name != *name || s.dims != t.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {} does not match layout entry {} {}",
                    t.dims(),
                    s.name,
                    s.dims
                )));
            }
        }
        let params = ParamStore::from_parts(specs, self.tensors.iter().map(|(_, t)| t.clone()).collect())?;
        Ok(Model { arch, params })
    }

    pub fn write_to(&self, w: impl Write) -> std::io::Result<()> {
        let mut w = Writer(std::io::BufWriter::new(w));
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        w.str(&self.architecture)?;
        w.str(&self.config.to_string())?;
        w.u32(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            w.str(name)?;
            for d in t.dims().0 {
                w.u32(d as u32)?;
            }
            w.floats(t.data())?;
        }
        match &self.state {
            None => w.bytes(&[0])?,
            Some(s) => {
                w.bytes(&[1])?;
                w.u64(s.epoch)?;
                w.u64(s.global_step)?;
                w.bytes(&s.best_validation_loss.to_le_bytes())?;
                w.u64(s.adam.step)?;
                for (m, v) in s.adam.m.iter().zip(&s.adam.v) {
                    w.floats(m)?;
                    w.floats(v)?;
                }
                w.bytes(&s.rng.seed)?;
                w.u64(s.rng.stream)?;
                w.bytes(&s.rng.word_pos.to_le_bytes())?;
            }
        }
        w.0.flush()
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = Reader(std::io::BufReader::new(r));
        if &r.array::<8>()? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let architecture = r.str()?;
        let config = KeyValues::parse(&r.str()?)?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.str()?;
            let mut d = [0usize; 5];
            for x in &mut d {
                *x = r.u32()? as usize;
            }
            let dims = Dims(d);
            dims.validate().map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            let data = r.floats(dims.numel())?;
            tensors.push((name, Tensor::from_vec(dims, data)?));
        }
        let state = match r.u8()? {
            0 => None,
            1 => {
                let epoch = r.u64()?;
                let global_step = r.u64()?;
                let best_validation_loss = f64::from_le_bytes(r.array()?);
                let step = r.u64()?;
                let mut m = Vec::with_capacity(n);
                let mut v = Vec::with_capacity(n);
                for (_, t) in &tensors {
                    m.push(r.floats(t.numel())?);
                    v.push(r.floats(t.numel())?);
                }
                let seed = r.array::<32>()?;
                let stream = r.u64()?;
                let word_pos = u128::from_le_bytes(r.array()?);
                Some(TrainState {
                    epoch,
                    global_step,
                    best_validation_loss,
                    adam: AdamState { step, m, v },
                    rng: RngState { seed, stream, word_pos },
                })
            }
            b => return Err(Error::Checkpoint(format!("bad state flag {b}"))),
        };
        Ok(Checkpoint {
            architecture,
            config,
            tensors,
            state,
        })
    }

    /// Writes atomically via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        self.write_to(f).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(f).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
