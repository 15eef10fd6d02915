use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;

use shuffleunet::baselines::{interpolate, Method, UNet3dArch, UNetConfig};
use shuffleunet::checkpoint::Checkpoint;
use shuffleunet::config::{parse_triple, KeyValues};
use shuffleunet::data::phantom::dwi_phantom;
use shuffleunet::data::{
    load_series, read_bvals, read_bvecs, save_series, simulate_lowres, sinc_upsample, split_dataset, DwiStudy,
    SplitManifest, Volume, B0_THRESHOLD,
};
use shuffleunet::dti::{compare_derived, fit_tensor, TensorField};
use shuffleunet::metrics::{rmse, ssim, uqi, MetricReport, SsimParams, UqiParams};
use shuffleunet::model::{Architecture, Model, ModelConfig, ShuffleUNetArch};
use shuffleunet::stats::{append_csv, ttest_independent, SampleSet, VarianceModel};
use shuffleunet::training::{infer as infer_volume, train as train_model, InferConfig, MetricsLog, TrainConfig, TrainingPair};

use crate::chart::{bar_chart, Bar};
use crate::dataset::{
    copy_gradients, find_subject, list_subjects, output_path, subject_id, Subject, HR_DIR, LR_DIR, SINC_DIR,
    SPLIT_FILE,
};
use crate::{DeriveArgs, EvaluateArgs, InferArgs, PrepareArgs, ReportArgs, StatsArgs, SynthArgs, TrainArgs};

/// A flag value or combination that cannot be acted on.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<shuffleunet::Error>() {
            return match err {
                shuffleunet::Error::Config(_) => 1,
                shuffleunet::Error::Numerical(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn triple(flag: &str, s: &str) -> Result<[usize; 3]> {
    parse_triple(s).map_err(|e| usage(format!("--{flag}: {e}")))
}

fn require_dir(flag: &str, p: &Path) -> Result<()> {
    if !p.is_dir() {
        return Err(usage(format!("--{flag}: {} is not a directory", p.display())));
    }
    Ok(())
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn dir_label(p: &Path) -> String {
    p.file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("method")
        .to_string()
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let dims = triple("dims", &a.dims)?;
    if a.subjects == 0 {
        return Err(usage("--subjects must be at least 1"));
    }
    if a.directions < 6 {
        return Err(usage("--directions must be at least 6 for a tensor fit"));
    }
    if !(a.bval > B0_THRESHOLD) {
        return Err(usage(format!("--bval must exceed {B0_THRESHOLD}")));
    }
    create_dir(&a.output_dir)?;
    for s in 0..a.subjects {
        let id = format!("subj{:02}", s + 1);
        let study = dwi_phantom(dims, a.directions, a.bval, a.seed.wrapping_add(s as u64))?;
        let dir = &a.output_dir;
        study.save(
            &output_path(dir, &id),
            &dir.join(format!("{id}.bval")),
            &dir.join(format!("{id}.bvec")),
        )?;
        info!("wrote {id} ({} volumes of {dims:?})", study.volumes.len());
    }
    Ok(())
}

fn split_counts(spec: &str, n: usize) -> Result<(usize, usize, usize)> {
    let f: Vec<f64> = spec
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| usage(format!("--split {spec:?}: expected three comma-separated fractions")))?;
    if f.len() != 3 || f.iter().any(|x| !(*x >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(usage(format!("--split {spec:?}: need three non-negative fractions summing to 1")));
    }
    let val = (f[1] * n as f64).round() as usize;
    let test = (f[2] * n as f64).round() as usize;
    if val + test >= n {
        return Err(usage(format!("--split {spec:?} leaves no training subjects out of {n}")));
    }
    Ok((n - val - test, val, test))
}

pub fn prepare(a: PrepareArgs) -> Result<()> {
    if a.factor < 2 {
        return Err(usage("--factor must be at least 2"));
    }
    require_dir("input-dir", &a.input_dir)?;
    let subjects = list_subjects(&a.input_dir)?;
    if subjects.is_empty() {
        bail!(shuffleunet::Error::Data(format!("no NIfTI subjects in {}", a.input_dir.display())));
    }
    let counts = split_counts(&a.split, subjects.len())?;
    let ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
    let manifest = split_dataset(&ids, counts, a.seed)?;

    let dirs = [HR_DIR, LR_DIR, SINC_DIR].map(|d| a.output_dir.join(d));
    for d in &dirs {
        create_dir(d)?;
    }
    for s in &subjects {
        let frames = load_series(&s.path)?;
        let mut lr = Vec::with_capacity(frames.len());
        let mut up = Vec::with_capacity(frames.len());
        for f in &frames {
            let l = simulate_lowres(f, a.factor)?;
            up.push(sinc_upsample(&l, f.dims())?);
            lr.push(l);
        }
        for (dir, series) in dirs.iter().zip([&frames, &lr, &up]) {
            save_series(series, &output_path(dir, &s.id))?;
            copy_gradients(s, dir)?;
        }
        info!(
            "{}: {} volumes {:?} -> {:?}",
            s.id,
            frames.len(),
            frames[0].dims(),
            lr[0].dims()
        );
    }
    manifest.save(&a.output_dir.join(SPLIT_FILE))?;
    info!(
        "split: {} train, {} validation, {} test",
        manifest.train.len(),
        manifest.validation.len(),
        manifest.test.len()
    );
    Ok(())
}

fn load_pairs(data: &Path, ids: &[String]) -> Result<Vec<TrainingPair>> {
    let mut pairs = Vec::new();
    for id in ids {
        let hr = find_subject(&data.join(HR_DIR), id)
            .ok_or_else(|| shuffleunet::Error::Data(format!("subject {id} missing from {}/{HR_DIR}", data.display())))?;
        let inp = find_subject(&data.join(SINC_DIR), id)
            .ok_or_else(|| shuffleunet::Error::Data(format!("subject {id} missing from {}/{SINC_DIR}", data.display())))?;
        let target = load_series(&hr.path)?;
        let input = load_series(&inp.path)?;
        if target.len() != input.len() {
            bail!(shuffleunet::Error::Data(format!(
                "{id}: {} input volumes but {} targets",
                input.len(),
                target.len()
            )));
        }
        for (i, (x, y)) in input.iter().zip(&target).enumerate() {
            pairs.push(TrainingPair::from_volumes(id, i, x, y)?);
        }
    }
    Ok(pairs)
}

fn normalize_arch(name: &str) -> Result<&'static str> {
    match name {
        "shuffleunet" => Ok(ShuffleUNetArch::NAME),
        "unet" | "unet3d" => Ok(UNet3dArch::NAME),
        other => Err(usage(format!("unknown architecture {other:?} (expected shuffleunet or unet)"))),
    }
}

fn run_training<A: Architecture>(
    model: Model<A, f32>,
    resume: Option<&Checkpoint>,
    data: &Path,
    manifest: &SplitManifest,
    cfg: &TrainConfig,
) -> Result<()> {
    let (model, state) = match resume {
        Some(ck) => {
            let state = ck
                .state
                .clone()
                .ok_or_else(|| shuffleunet::Error::Checkpoint("checkpoint has no training state to resume".into()))?;
            (ck.to_model::<A>()?, Some(state))
        }
        None => (model, None),
    };
    info!("{}: {} trainable parameters", A::NAME, model.parameter_count());
    let train_set = load_pairs(data, &manifest.train)?;
    let val_set = load_pairs(data, &manifest.validation)?;
    let dir = cfg.checkpoint_dir.clone().unwrap_or_default();
    let log = MetricsLog::open(&dir.join("loss.csv"))?;
    let (_, outcome) = train_model(model, &train_set, &val_set, cfg, state, Some(&log))?;
    for e in &outcome.epochs {
        match e.validation_l1 {
            Some(v) => info!("epoch {}: train L1 {:.5}, validation L1 {:.5}", e.epoch, e.train_l1, v),
            None => info!("epoch {}: train L1 {:.5}", e.epoch, e.train_l1),
        }
    }
    info!("checkpoints in {}", dir.display());
    Ok(())
}

enum ArchConfig {
    Shuffle(ModelConfig),
    UNet(UNetConfig),
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut kv = match &a.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::new(),
    };
    for s in &a.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("--set {s:?}: expected KEY=VALUE")))?;
        kv.set(k.trim(), v.trim());
    }
    let arch = normalize_arch(
        a.arch
            .as_deref()
            .or(kv.get("run.architecture"))
            .unwrap_or(ShuffleUNetArch::NAME),
    )?;
    let section = if arch == ShuffleUNetArch::NAME { "model" } else { "unet" };
    if let Some(v) = a.epochs {
        kv.set("train.epochs", v);
    }
    if let Some(v) = a.batch_size {
        kv.set("train.batch_size", v);
    }
    if let Some(v) = a.learning_rate {
        kv.set("train.learning_rate", v);
    }
    if let Some(v) = &a.patch_size {
        kv.set("train.patch_size", v);
    }
    if let Some(v) = a.patches_per_volume {
        kv.set("train.patches_per_volume", v);
    }
    if let Some(v) = a.seed {
        kv.set("train.seed", v);
    }
    if a.deterministic {
        kv.set("train.deterministic", true);
    }
    if let Some(v) = a.levels {
        kv.set(format!("{section}.levels"), v);
    }
    if let Some(v) = a.base_filters {
        kv.set(format!("{section}.base_filters"), v);
    }
    let ckpt_dir = a
        .output
        .clone()
        .or_else(|| kv.get("train.checkpoint_dir").map(PathBuf::from))
        .unwrap_or_else(|| a.data.join("checkpoints").join(arch));
    kv.set("train.checkpoint_dir", ckpt_dir.display());
    kv.set("run.architecture", arch);
    let mut unknown: Vec<String> = kv
        .iter()
        .map(|(k, _)| k)
        .filter(|k| !["model.", "unet.", "train.", "run."].iter().any(|p| k.starts_with(p)))
        .map(str::to_string)
        .collect();
    unknown.extend(kv.unknown_keys("run", &["architecture"]));
    if !unknown.is_empty() {
        return Err(usage(format!("unknown configuration keys: {}", unknown.join(", "))));
    }
    let cfg = TrainConfig::from_kv(&kv)?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(ck) = &resume {
        if ck.architecture != arch {
            return Err(usage(format!(
                "--resume checkpoint holds a {} network but the run is configured for {arch}",
                ck.architecture
            )));
        }
    }
    require_dir("data", &a.data)?;
    let manifest = SplitManifest::load(&a.data.join(SPLIT_FILE))?;

    let arch_config = if arch == ShuffleUNetArch::NAME {
        ArchConfig::Shuffle(ModelConfig::from_kv(&kv)?)
    } else {
        ArchConfig::UNet(UNetConfig::from_kv(&kv)?)
    };

    create_dir(&ckpt_dir)?;
    std::fs::write(ckpt_dir.join("config.txt"), kv.to_string())
        .with_context(|| format!("writing {}", ckpt_dir.join("config.txt").display()))?;
    match arch_config {
        ArchConfig::Shuffle(mc) => {
            let seed = mc.init_seed;
            let model = Model::initialized(ShuffleUNetArch::new(mc)?, seed);
            run_training(model, resume.as_ref(), &a.data, &manifest, &cfg)
        }
        ArchConfig::UNet(uc) => {
            let model = Model::initialized(UNet3dArch::new(uc)?, uc.init_seed);
            run_training(model, resume.as_ref(), &a.data, &manifest, &cfg)
        }
    }
}

enum Network {
    Shuffle(Model<ShuffleUNetArch, f32>),
    UNet(Model<UNet3dArch, f32>),
}

impl Network {
    fn run(&self, v: &Volume, cfg: &InferConfig) -> shuffleunet::Result<Volume> {
        match self {
            Network::Shuffle(m) => infer_volume(m, v, cfg),
            Network::UNet(m) => infer_volume(m, v, cfg),
        }
    }
}

enum Upsampler {
    Learned(Network, InferConfig),
    Interpolator(Method, usize, Option<[usize; 3]>),
}

impl Upsampler {
    fn run(&self, v: &Volume) -> shuffleunet::Result<Volume> {
        match self {
            Upsampler::Learned(net, cfg) => net.run(v, cfg),
            Upsampler::Interpolator(m, factor, target) => {
                let t = target.unwrap_or_else(|| v.dims().map(|d| d * factor));
                interpolate(*m, v, t)
            }
        }
    }
}

fn is_nifti_path(p: &Path) -> bool {
    subject_id(p).is_some()
}

pub fn infer(a: InferArgs) -> Result<()> {
    let method: Method = a.method.parse().map_err(|e: shuffleunet::Error| usage(format!("--method: {e}")))?;
    let patch_size = triple("patch-size", &a.patch_size)?;
    let overlap = triple("overlap", &a.overlap)?;
    let target = a.target_dims.as_deref().map(|s| triple("target-dims", s)).transpose()?;
    if a.batch_size == 0 {
        return Err(usage("--batch-size must be at least 1"));
    }
    match (method.is_learned(), &a.checkpoint) {
        (true, None) => return Err(usage(format!("--method {method} requires --checkpoint"))),
        (false, Some(_)) => return Err(usage(format!("--method {method} does not take a --checkpoint"))),
        _ => {}
    }
    if !method.is_learned() && a.factor < 2 && target.is_none() {
        return Err(usage("--factor must be at least 2"));
    }
    if let Some(s) = &a.subset {
        if !["train", "validation", "test"].contains(&s.as_str()) {
            return Err(usage(format!("--subset {s:?}: expected train, validation or test")));
        }
    }
    let dir_mode = a.input.is_dir();
    if !dir_mode && !a.input.is_file() {
        return Err(usage(format!("--input: {} does not exist", a.input.display())));
    }
    if !dir_mode && !is_nifti_path(&a.output) {
        return Err(usage("--output must be a .nii or .nii.gz path when --input is a file"));
    }
    if !dir_mode && a.manifest.is_some() {
        return Err(usage("--manifest applies only to a directory --input"));
    }

    let upsampler = if let Some(ck_path) = &a.checkpoint {
        let ck = Checkpoint::load(ck_path)?;
        let cfg = InferConfig {
            patch_size,
            overlap,
            batch_size: a.batch_size,
        };
        let net = match (method, ck.architecture.as_str()) {
            (Method::ShuffleUNet, n) if n == ShuffleUNetArch::NAME => Network::Shuffle(ck.to_model()?),
            (Method::UNet, n) if n == UNet3dArch::NAME => Network::UNet(ck.to_model()?),
            (m, n) => return Err(usage(format!("--method {m} does not match the checkpoint's {n} network"))),
        };
        Upsampler::Learned(net, cfg)
    } else {
        Upsampler::Interpolator(method, a.factor, target)
    };

    let jobs: Vec<(Subject, PathBuf)> = if dir_mode {
        let mut subjects = list_subjects(&a.input)?;
        if let (Some(m), Some(section)) = (&a.manifest, &a.subset) {
            let manifest = SplitManifest::load(m)?;
            let keep = manifest.section(section).unwrap_or_default();
            subjects.retain(|s| keep.contains(&s.id));
        }
        subjects
            .into_iter()
            .map(|s| {
                let out = output_path(&a.output, &s.id);
                (s, out)
            })
            .collect()
    } else {
        let id = subject_id(&a.input).unwrap_or_else(|| "input".into());
        vec![(Subject { id, path: a.input.clone() }, a.output.clone())]
    };
    if jobs.is_empty() {
        bail!(shuffleunet::Error::Data(format!("no input volumes in {}", a.input.display())));
    }

    for (s, out) in &jobs {
        let frames = load_series(&s.path)?;
        let result = frames.iter().map(|f| upsampler.run(f)).collect::<shuffleunet::Result<Vec<_>>>()?;
        let out_dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
        if !out_dir.as_os_str().is_empty() {
            create_dir(&out_dir)?;
        }
        save_series(&result, out)?;
        if let Some((bval, bvec)) = s.gradients() {
            let oid = subject_id(out).unwrap_or_else(|| s.id.clone());
            for (src, ext) in [(bval, "bval"), (bvec, "bvec")] {
                let dst = out_dir.join(format!("{oid}.{ext}"));
                if src != dst {
                    std::fs::copy(&src, &dst).with_context(|| format!("copying {}", src.display()))?;
                }
            }
        }
        info!("{} ({method}): {:?} -> {:?}", s.id, frames[0].dims(), result[0].dims());
    }
    Ok(())
}

/// Replaces rows of `existing` that share (subject, method, metric) with a row of `new`.
fn merge_reports(existing: MetricReport, new: MetricReport) -> MetricReport {
    let mut rows: Vec<_> = existing
        .rows
        .into_iter()
        .filter(|r| {
            !new.rows
                .iter()
                .any(|n| n.subject_id == r.subject_id && n.method == r.method && n.metric == r.metric)
        })
        .collect();
    rows.extend(new.rows);
    MetricReport { rows }
}

fn write_report(path: &Path, report: MetricReport, append: bool) -> Result<MetricReport> {
    let merged = if append && path.is_file() {
        merge_reports(MetricReport::load(path)?, report)
    } else {
        report
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    merged.save(path)?;
    Ok(merged)
}

const METRICS: [&str; 3] = ["ssim", "rmse", "uqi"];

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let metrics: Vec<&str> = a.metrics.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if metrics.is_empty() {
        return Err(usage("--metrics is empty"));
    }
    for (i, m) in metrics.iter().enumerate() {
        if !METRICS.contains(m) {
            return Err(usage(format!("--metrics: unknown metric {m:?} (expected ssim, rmse, uqi)")));
        }
        if metrics[..i].contains(m) {
            return Err(usage(format!("--metrics: {m} listed twice")));
        }
    }
    require_dir("pred-dir", &a.pred_dir)?;
    require_dir("gt-dir", &a.gt_dir)?;
    let method = a.method.clone().unwrap_or_else(|| dir_label(&a.pred_dir));
    let preds = list_subjects(&a.pred_dir)?;
    if preds.is_empty() {
        bail!(shuffleunet::Error::Data(format!("no predictions in {}", a.pred_dir.display())));
    }

    let mut report = MetricReport::default();
    for p in &preds {
        let gt = find_subject(&a.gt_dir, &p.id).ok_or_else(|| {
            shuffleunet::Error::Data(format!("no ground truth for {} in {}", p.id, a.gt_dir.display()))
        })?;
        let pv = load_series(&p.path)?;
        let gv = load_series(&gt.path)?;
        if pv.len() != gv.len() {
            bail!(shuffleunet::Error::Data(format!(
                "{}: {} predicted volumes but {} ground-truth volumes",
                p.id,
                pv.len(),
                gv.len()
            )));
        }
        for m in &metrics {
            let mut sum = 0.0;
            for (x, y) in gv.iter().zip(&pv) {
                let (g, q) = (x.voxels.view(), y.voxels.view());
                sum += match *m {
                    "ssim" => ssim(g, q, &SsimParams::default(), None)?,
                    "rmse" => rmse(g, q, None)?,
                    _ => uqi(g, q, &UqiParams::default(), None)?,
                };
            }
            report.push(&p.id, &method, m, sum / pv.len() as f64);
        }
    }
    let merged = write_report(&a.output, report, a.append)?;
    print!("{}", merged.summary_table());
    info!("report written to {}", a.output.display());
    Ok(())
}

fn gradients_for(s: &Subject, shared: Option<&(Vec<f64>, Vec<[f64; 3]>)>) -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
    if let Some(g) = shared {
        return Ok(g.clone());
    }
    let (bval, bvec) = s.gradients().ok_or_else(|| {
        shuffleunet::Error::Data(format!("{}: no gradient tables (pass --bvals/--bvecs)", s.id))
    })?;
    Ok((read_bvals(&bval)?, read_bvecs(&bvec)?))
}

fn fit_subject(s: &Subject, shared: Option<&(Vec<f64>, Vec<[f64; 3]>)>) -> Result<TensorField> {
    let (bvals, bvecs) = gradients_for(s, shared)?;
    let study = DwiStudy::new(load_series(&s.path)?, bvals, bvecs)?;
    Ok(fit_tensor(&study).with_context(|| format!("fitting tensors for {}", s.id))?)
}

pub fn derive(a: DeriveArgs) -> Result<()> {
    require_dir("dwi-dir", &a.dwi_dir)?;
    if let Some(r) = &a.reference_dir {
        require_dir("reference-dir", r)?;
    }
    let shared = match (&a.bvals, &a.bvecs) {
        (Some(b), Some(v)) => Some((read_bvals(b)?, read_bvecs(v)?)),
        _ => None,
    };
    let subjects = list_subjects(&a.dwi_dir)?;
    if subjects.is_empty() {
        bail!(shuffleunet::Error::Data(format!("no DWI volumes in {}", a.dwi_dir.display())));
    }
    let method = a.method.clone().unwrap_or_else(|| dir_label(&a.dwi_dir));
    let mut report = MetricReport::default();
    for s in &subjects {
        let field = fit_subject(s, shared.as_ref())?;
        let n_clamped = field.clamped.iter().filter(|c| **c).count();
        field.write_maps(&a.output.join(&s.id))?;
        info!(
            "{}: design condition {:.2}, {} voxels with clamped eigenvalues",
            s.id, field.condition_number, n_clamped
        );
        if let Some(rdir) = &a.reference_dir {
            let r = find_subject(rdir, &s.id).ok_or_else(|| {
                shuffleunet::Error::Data(format!("no reference DWI for {} in {}", s.id, rdir.display()))
            })?;
            let reference = fit_subject(&r, shared.as_ref())?;
            report.extend(compare_derived(&reference, &field, &s.id, &method)?);
        }
    }
    if let Some(path) = &a.report {
        let merged = write_report(path, report, true)?;
        print!("{}", merged.summary_table());
    }
    Ok(())
}

fn single_method(report: &MetricReport, path: &Path, flag: &str) -> Result<String> {
    let methods = report.methods();
    match methods.as_slice() {
        [m] => Ok(m.clone()),
        _ => Err(usage(format!(
            "{} holds methods [{}]; choose one with --{flag}",
            path.display(),
            methods.join(", ")
        ))),
    }
}

pub fn stats(a: StatsArgs) -> Result<()> {
    if a.report_b.is_none() && (a.method_a.is_none() || a.method_b.is_none()) {
        return Err(usage("with a single report, pass both --method-a and --method-b"));
    }
    let ra = MetricReport::load(&a.report_a)?;
    let path_b = a.report_b.clone().unwrap_or_else(|| a.report_a.clone());
    let rb = MetricReport::load(&path_b)?;
    let ma = match &a.method_a {
        Some(m) => m.clone(),
        None => single_method(&ra, &a.report_a, "method-a")?,
    };
    let mb = match &a.method_b {
        Some(m) => m.clone(),
        None => single_method(&rb, &path_b, "method-b")?,
    };
    let sa = SampleSet::from_report(&ra, &ma, &a.metric)?;
    let sb = SampleSet::from_report(&rb, &mb, &a.metric)?;
    let model = if a.welch { VarianceModel::Welch } else { VarianceModel::Pooled };
    let t = ttest_independent(&sa, &sb, model);
    append_csv(&a.output, std::slice::from_ref(&t))?;
    println!(
        "{} {} vs {}: t = {:.4}, df = {:.2}, p = {:.4}{}{}",
        t.metric,
        t.method_a,
        t.method_b,
        t.t,
        t.df,
        t.p,
        if t.significant() { " (significant)" } else { "" },
        if t.degenerate { " [degenerate: zero variance]" } else { "" }
    );
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    let r = MetricReport::load(&a.csv)?;
    if r.rows.is_empty() {
        bail!(shuffleunet::Error::Data(format!("{} has no rows", a.csv.display())));
    }
    create_dir(&a.out)?;
    let agg = r.aggregate();
    for metric in r.metrics() {
        let bars: Vec<Bar> = agg
            .iter()
            .filter(|g| g.metric == metric)
            .map(|g| Bar {
                label: g.method.clone(),
                mean: g.mean,
                std: g.std,
            })
            .collect();
        let file: String = metric
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.' { c } else { '_' })
            .collect();
        bar_chart(&metric, &bars, &a.out.join(format!("{file}.png")))?;
    }
    let table = r.summary_table();
    std::fs::write(a.out.join("summary.txt"), &table).with_context(|| "writing summary.txt")?;
    print!("{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_fractions() {
        assert_eq!(split_counts("0.6,0.2,0.2", 8).unwrap(), (4, 2, 2));
        assert!(split_counts("0.5,0.5", 8).is_err());
        assert!(split_counts("0,0.5,0.5", 8).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&usage("x")), 1);
        assert_eq!(exit_code(&anyhow::Error::new(shuffleunet::Error::Numerical("nan".into()))), 3);
        assert_eq!(exit_code(&anyhow::Error::new(shuffleunet::Error::Data("bad".into())).context("while reading")), 2);
        assert_eq!(exit_code(&anyhow::Error::new(shuffleunet::Error::Config("bad".into()))), 1);
    }

    #[test]
    fn merge_replaces_matching_rows() {
        let mut a = MetricReport::default();
        a.push("s1", "sinc", "ssim", 0.5);
        a.push("s2", "sinc", "ssim", 0.6);
        let mut b = MetricReport::default();
        b.push("s1", "sinc", "ssim", 0.7);
        let m = merge_reports(a, b);
        assert_eq!(m.values("sinc", "ssim"), vec![0.6, 0.7]);
    }
}
