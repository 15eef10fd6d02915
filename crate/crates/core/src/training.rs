//! Patch-based supervised training with L1 loss and Adam, validation,
//! checkpointing and patch-wise inference.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{format_triple, parse_triple, KeyValues};
use crate::data::{
    aggregate_patches, crop, denormalize, normalize, normalize_with, pad_to, random_origins, simulate_lowres,
    sinc_upsample, tile_origins, DwiStudy, Volume, DEFAULT_OVERLAP, DEFAULT_PATCH,
};
use crate::error::{Error, Result};
use crate::model::{Architecture, Model};
use crate::nn::{ops, Eval, Network, ParamStore, Tape};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loss {
    L1,
}

impl std::fmt::Display for Loss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("l1")
    }
}

impl std::str::FromStr for Loss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" | "L1" => Ok(Loss::L1),
            _ => Err(Error::Config(format!("unsupported loss {s:?}; only l1 is available"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patches_per_volume: usize,
    pub patch_size: [usize; 3],
    pub loss: Loss,
    pub seed: u64,
    /// Where `last.ckpt` and `best.ckpt` go; `None` disables checkpointing.
    pub checkpoint_dir: Option<PathBuf>,
    pub validate_every: usize,
    /// Capacity of the bounded patch queue between loader and optimiser.
    pub queue_capacity: usize,
    /// Assemble batches on the training thread instead of a loader thread.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            batch_size: 4,
            learning_rate: 1e-4,
            patches_per_volume: 8,
            patch_size: DEFAULT_PATCH,
            loss: Loss::L1,
            seed: 0,
            checkpoint_dir: None,
            validate_every: 1,
            queue_capacity: 4,
            deterministic: false,
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "learning_rate",
    "patches_per_volume",
    "patch_size",
    "loss",
    "seed",
    "checkpoint_dir",
    "validate_every",
    "queue_capacity",
    "deterministic",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be finite and > 0, got {}", self.learning_rate)));
        }
        if self.patches_per_volume < 1 || self.validate_every < 1 || self.queue_capacity < 1 {
            return Err(Error::Config(
                "patches_per_volume, validate_every and queue_capacity must be >= 1".into(),
            ));
        }
        if self.patch_size.contains(&0) {
            return Err(Error::Config("patch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("train.epochs", self.epochs);
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.learning_rate", self.learning_rate);
        kv.set("train.patches_per_volume", self.patches_per_volume);
        kv.set("train.patch_size", format_triple(self.patch_size));
        kv.set("train.loss", self.loss);
        kv.set("train.seed", self.seed);
        if let Some(d) = &self.checkpoint_dir {
            kv.set("train.checkpoint_dir", d.display());
        }
        kv.set("train.validate_every", self.validate_every);
        kv.set("train.queue_capacity", self.queue_capacity);
        kv.set("train.deterministic", self.deterministic);
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let unknown = kv.unknown_keys("train", TRAIN_KEYS);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown train keys: {}", unknown.join(", "))));
        }
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            epochs: kv.get_parsed("train.epochs")?.unwrap_or(d.epochs),
            batch_size: kv.get_parsed("train.batch_size")?.unwrap_or(d.batch_size),
            learning_rate: kv.get_parsed("train.learning_rate")?.unwrap_or(d.learning_rate),
            patches_per_volume: kv.get_parsed("train.patches_per_volume")?.unwrap_or(d.patches_per_volume),
            patch_size: match kv.get("train.patch_size") {
                Some(s) => parse_triple(s)?,
                None => d.patch_size,
            },
            loss: kv.get_parsed("train.loss")?.unwrap_or(d.loss),
            seed: kv.get_parsed("train.seed")?.unwrap_or(d.seed),
            checkpoint_dir: kv.get("train.checkpoint_dir").map(PathBuf::from),
            validate_every: kv.get_parsed("train.validate_every")?.unwrap_or(d.validate_every),
            queue_capacity: kv.get_parsed("train.queue_capacity")?.unwrap_or(d.queue_capacity),
            deterministic: kv.get_parsed("train.deterministic")?.unwrap_or(d.deterministic),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Mean absolute error over all elements.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "L1 loss needs identical dims, got {} and {}",
            pred.dims(),
            target.dims()
        )));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p.as_f64() - t.as_f64()).abs())
        .sum();
    Ok(sum / pred.numel() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Serialisable Adam moments, one flat vector per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.values().iter().map(|t| vec![T::zero(); t.numel()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (lr, eps) = (T::from_f64_lossy(c.learning_rate), T::from_f64_lossy(c.eps));
        let trainable: Vec<bool> = params.specs().iter().map(|s| s.kind.trainable()).collect();
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let Some(g) = grads.get(i).and_then(|g| g.as_ref()) else { continue };
            if !trainable[i] {
                continue;
            }
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(self.m[i].iter_mut())
                .zip(self.v[i].iter_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    pub fn state(&self) -> AdamState {
        let cast = |x: &Vec<Vec<T>>| x.iter().map(|v| v.iter().map(|a| a.as_f64() as f32).collect()).collect();
        AdamState {
            step: self.step,
            m: cast(&self.m),
            v: cast(&self.v),
        }
    }

    pub fn restore(config: AdamConfig, params: &ParamStore<T>, state: &AdamState) -> Result<Self> {
        let ok = state.m.len() == params.len()
            && state.v.len() == params.len()
            && params
                .values()
                .iter()
                .enumerate()
                .all(|(i, t)| state.m[i].len() == t.numel() && state.v[i].len() == t.numel());
        if !ok {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        let cast = |x: &Vec<Vec<f32>>| x.iter().map(|v| v.iter().map(|a| T::from_f64_lossy(*a as f64)).collect()).collect();
        Ok(Adam {
            config,
            step: state.step,
            m: cast(&state.m),
            v: cast(&state.v),
        })
    }
}

/// Position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: u64,
    pub global_step: u64,
    pub best_validation_loss: f64,
    pub adam: AdamState,
    pub rng: RngState,
}

/// A model plus its optimiser; one call to [`Trainer::step`] is one Adam update.
pub struct Trainer<A, T> {
    pub model: Model<A, T>,
    pub adam: Adam<T>,
}

impl<A: Network, T: Scalar> Trainer<A, T> {
    pub fn new(model: Model<A, T>, learning_rate: f64) -> Self {
        let adam = Adam::new(AdamConfig::with_lr(learning_rate), &model.params);
        Trainer { model, adam }
    }

    /// Forward, L1 loss, backward and update on one batch; returns the pre-update loss.
    pub fn step(&mut self, x: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
        self.model.arch.check_input(x.dims())?;
        let (loss, grads, running) = {
            let mut tape = Tape::new(&self.model.params, true);
            let xv = tape.input(x.clone());
            let out = self.model.arch.forward_with(&mut tape, &xv)?;
            let (loss, seed) = ops::l1_with_grad(tape.value(out), target)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss {loss}")));
            }
            let grads = tape.backward(out, seed)?;
            (loss, grads, tape.running_stats().to_vec())
        };
        self.adam.update(&mut self.model.params, &grads.params);
        self.model.params.apply_running_stats(&running);
        Ok(loss)
    }
}

/// One normalised (input, target) volume pair on the high-resolution grid.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub subject_id: String,
    pub direction_index: usize,
    pub input: Array3<f32>,
    pub target: Array3<f32>,
}

impl TrainingPair {
    /// Normalises both volumes with the min-max scale of `input`, which is the only
    /// one available at inference time.
    pub fn from_volumes(subject_id: &str, direction_index: usize, input: &Volume, target: &Volume) -> Result<Self> {
        if input.dims() != target.dims() {
            return Err(Error::Data(format!(
                "{subject_id}/{direction_index}: input {:?} and target {:?} differ",
                input.dims(),
                target.dims()
            )));
        }
        let n = normalize(input);
        let t = normalize_with(target, n.intensity_scale);
        Ok(TrainingPair {
            subject_id: subject_id.to_string(),
            direction_index,
            input: n.voxels,
            target: t.voxels,
        })
    }

    /// Builds the pair from a high-resolution volume: simulate low resolution by
    /// `factor`, then sinc-interpolate back to the original grid.
    pub fn from_hr(subject_id: &str, direction_index: usize, hr: &Volume, factor: usize) -> Result<Self> {
        let lr = simulate_lowres(hr, factor)?;
        let up = sinc_upsample(&lr, hr.dims())?;
        Self::from_volumes(subject_id, direction_index, &up, hr)
    }
}

/// Append-only CSV log with columns `epoch,step,split,l1`.
pub struct MetricsLog {
    path: PathBuf,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        if fresh {
            std::fs::write(path, "epoch,step,split,l1\n").map_err(|e| Error::io(path, e))?;
        }
        Ok(MetricsLog { path: path.to_path_buf() })
    }

    pub fn append(&self, epoch: u64, step: u64, split: &str, l1: f64) -> Result<()> {
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{epoch},{step},{split},{l1}").map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    pub train_l1: f64,
    pub validation_l1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub epochs: Vec<EpochRecord>,
    /// Loss of every optimiser step, in order.
    pub step_losses: Vec<f64>,
}

struct Job {
    pair: usize,
    origin: [usize; 3],
}

fn make_batch(pairs: &[(Array3<f32>, Array3<f32>)], jobs: &[Job], size: [usize; 3]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut xs = Vec::with_capacity(jobs.len());
    let mut ys = Vec::with_capacity(jobs.len());
    for j in jobs {
        let (x, y) = &pairs[j.pair];
        xs.push(crop(x.view(), j.origin, size)?);
        ys.push(crop(y.view(), j.origin, size)?);
    }
    let xr: Vec<&Tensor<f32>> = xs.iter().collect();
    let yr: Vec<&Tensor<f32>> = ys.iter().collect();
    Ok((Tensor::stack(&xr)?, Tensor::stack(&yr)?))
}

/// Feeds batches to `consume`, either inline or from a loader thread through a
/// bounded channel. Batch contents are fixed by `jobs`, so both modes agree exactly.
fn run_batches(
    pairs: &[(Array3<f32>, Array3<f32>)],
    jobs: &[Job],
    cfg: &TrainConfig,
    mut consume: impl FnMut(usize, &[Job], Tensor<f32>, Tensor<f32>) -> Result<()>,
) -> Result<()> {
    let chunks: Vec<&[Job]> = jobs.chunks(cfg.batch_size).collect();
    if cfg.deterministic {
        for (i, c) in chunks.iter().enumerate() {
            let (x, y) = make_batch(pairs, c, cfg.patch_size)?;
            consume(i, c, x, y)?;
        }
        return Ok(());
    }
    std::thread::scope(|scope| {
        let (tx, rx) = sync_channel(cfg.queue_capacity);
        let producer = scope.spawn({
            let chunks = &chunks;
            move || {
                for c in chunks {
                    if tx.send(make_batch(pairs, c, cfg.patch_size)).is_err() {
                        break;
                    }
                }
            }
        });
        let mut result = Ok(());
        for (i, batch) in rx.iter().enumerate() {
            result = batch.and_then(|(x, y)| consume(i, chunks[i], x, y));
            if result.is_err() {
                break;
            }
        }
        drop(rx);
        let _ = producer.join();
        result
    })
}

/// Mean L1 of the model over non-overlapping tiles covering each (padded) pair.
pub fn validation_loss<A: Network>(model: &Model<A, f32>, pairs: &[TrainingPair], cfg: &TrainConfig) -> Result<f64> {
    let padded: Vec<(Array3<f32>, Array3<f32>)> = pairs
        .iter()
        .map(|p| (pad_to(&p.input, cfg.patch_size), pad_to(&p.target, cfg.patch_size)))
        .collect();
    let mut jobs = Vec::new();
    for (i, (x, _)) in padded.iter().enumerate() {
        let s = x.shape();
        for origin in tile_origins([s[0], s[1], s[2]], cfg.patch_size, [0; 3])? {
            jobs.push(Job { pair: i, origin });
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in jobs.chunks(cfg.batch_size) {
        let (x, y) = make_batch(&padded, c, cfg.patch_size)?;
        let out = model.arch.forward_with(&mut Eval::new(&model.params), &x)?;
        sum += l1_loss(&out, &y)? * c.len() as f64;
        count += c.len();
    }
    if count == 0 {
        return Err(Error::Data("validation set is empty".into()));
    }
    Ok(sum / count as f64)
}

/// Runs the epoch loop. Passing a `resume` state continues a previous run exactly.
pub fn train<A: Architecture>(
    model: Model<A, f32>,
    train_set: &[TrainingPair],
    validation_set: &[TrainingPair],
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    log: Option<&MetricsLog>,
) -> Result<(Model<A, f32>, TrainOutcome)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let m = model.arch.spatial_multiple();
    if cfg.patch_size.iter().any(|s| s % m != 0) {
        return Err(Error::Config(format!(
            "patch size {:?} must be divisible by {m} for this network",
            cfg.patch_size
        )));
    }
    let adam_cfg = AdamConfig::with_lr(cfg.learning_rate);
    let (mut state, adam, mut rng) = match resume {
        Some(s) => {
            let adam = Adam::restore(adam_cfg, &model.params, &s.adam)?;
            let rng = s.rng.restore();
            (s, adam, rng)
        }
        None => {
            let adam = Adam::new(adam_cfg, &model.params);
            let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let s = TrainState {
                epoch: 0,
                global_step: 0,
                best_validation_loss: f64::INFINITY,
                adam: adam.state(),
                rng: RngState::capture(&rng),
            };
            (s, adam, rng)
        }
    };
    let mut trainer = Trainer { model, adam };
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let padded: Vec<(Array3<f32>, Array3<f32>)> = train_set
        .iter()
        .map(|p| (pad_to(&p.input, cfg.patch_size), pad_to(&p.target, cfg.patch_size)))
        .collect();

    let mut outcome_epochs = Vec::new();
    let mut step_losses = Vec::new();
    while (state.epoch as usize) < cfg.epochs {
        let epoch = state.epoch + 1;
        let mut jobs = Vec::new();
        for (i, (x, _)) in padded.iter().enumerate() {
            let s = x.shape();
            for origin in random_origins([s[0], s[1], s[2]], cfg.patch_size, cfg.patches_per_volume, &mut rng) {
                jobs.push(Job { pair: i, origin });
            }
        }
        jobs.shuffle(&mut rng);

        let mut sum = 0.0;
        let mut seen = 0usize;
        run_batches(&padded, &jobs, cfg, |bi, chunk, x, y| {
            let loss = trainer.step(&x, &y).map_err(|e| match e {
                Error::Numerical(msg) => {
                    let who: Vec<String> = chunk
                        .iter()
                        .map(|j| format!("{}/{}@{:?}", train_set[j.pair].subject_id, train_set[j.pair].direction_index, j.origin))
                        .collect();
                    Error::Numerical(format!("epoch {epoch}, batch {bi} [{}]: {msg}", who.join(", ")))
                }
                other => other,
            })?;
            state.global_step += 1;
            step_losses.push(loss);
            sum += loss * chunk.len() as f64;
            seen += chunk.len();
            Ok(())
        })?;
        let train_l1 = sum / seen as f64;
        if let Some(l) = log {
            l.append(epoch, state.global_step, "train", train_l1)?;
        }

        let validate = !validation_set.is_empty()
            && (epoch as usize % cfg.validate_every == 0 || epoch as usize == cfg.epochs);
        let validation_l1 = if validate {
            let v = validation_loss(&trainer.model, validation_set, cfg)?;
            if let Some(l) = log {
                l.append(epoch, state.global_step, "validation", v)?;
            }
            Some(v)
        } else {
            None
        };
        let selection = if validation_set.is_empty() { Some(train_l1) } else { validation_l1 };

        state.epoch = epoch;
        state.adam = trainer.adam.state();
        state.rng = RngState::capture(&rng);
        let improved = selection.is_some_and(|s| s < state.best_validation_loss);
        if let Some(s) = selection.filter(|_| improved) {
            state.best_validation_loss = s;
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            let ck = Checkpoint::from_model(&trainer.model, Some(state.clone()));
            if improved {
                ck.save(&dir.join("best.ckpt"))?;
            }
            ck.save(&dir.join("last.ckpt"))?;
        }
        outcome_epochs.push(EpochRecord {
            epoch,
            step: state.global_step,
            train_l1,
            validation_l1,
        });
    }
    Ok((
        trainer.model,
        TrainOutcome {
            state,
            epochs: outcome_epochs,
            step_losses,
        },
    ))
}

/// Patch-wise inference settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferConfig {
    pub patch_size: [usize; 3],
    pub overlap: [usize; 3],
    pub batch_size: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            patch_size: DEFAULT_PATCH,
            overlap: DEFAULT_OVERLAP,
            batch_size: 4,
        }
    }
}

/// Super-resolves one volume: normalise, run overlapping tiles, average, denormalise.
pub fn infer<A: Network>(model: &Model<A, f32>, volume: &Volume, cfg: &InferConfig) -> Result<Volume> {
    let m = model.arch.spatial_multiple();
    if cfg.patch_size.iter().any(|s| s % m != 0) || cfg.batch_size == 0 {
        return Err(Error::Config(format!(
            "inference patch {:?} must be divisible by {m} and batch size positive",
            cfg.patch_size
        )));
    }
    let norm = normalize(volume);
    let padded = pad_to(&norm.voxels, cfg.patch_size);
    let s = padded.shape();
    let origins = tile_origins([s[0], s[1], s[2]], cfg.patch_size, cfg.overlap)?;
    let mut outputs = Vec::with_capacity(origins.len());
    for chunk in origins.chunks(cfg.batch_size) {
        let crops = chunk
            .iter()
            .map(|o| crop(padded.view(), *o, cfg.patch_size))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<f32>> = crops.iter().collect();
        let out = model.forward(&Tensor::stack(&refs)?)?;
        if !out.all_finite() {
            return Err(Error::Numerical("network produced non-finite values".into()));
        }
        outputs.extend(out.unstack());
    }
    let parts: Vec<([usize; 3], &Tensor<f32>)> = origins.iter().copied().zip(outputs.iter()).collect();
    let agg = aggregate_patches(&parts, volume.dims())?;
    Ok(denormalize(&norm.with_voxels(agg)))
}

/// Runs [`infer`] on every volume of a study; gradient tables are kept.
pub fn infer_study<A: Network>(model: &Model<A, f32>, study: &DwiStudy, cfg: &InferConfig) -> Result<DwiStudy> {
    let volumes = study
        .volumes
        .iter()
        .map(|v| infer(model, v, cfg))
        .collect::<Result<Vec<_>>>()?;
    DwiStudy::new(volumes, study.bvals.clone(), study.bvecs.clone())
}
