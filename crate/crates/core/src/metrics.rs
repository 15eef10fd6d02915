//! Full-reference quality metrics (SSIM, UQI, RMSE) and per-subject reports.
//!
//! SSIM uses a 3D Gaussian window (σ = 1.5, 11 voxels per axis) and UQI a uniform
//! 8-voxel cube, both evaluated at every position where the window fits entirely
//! inside the volume. Windows shrink to the volume size on short axes. Local
//! scores are computed in factored form so identical inputs give exactly 1.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array3, ArrayView3, Axis, Zip};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub sigma: f64,
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the intensities; `None` uses max − min over both inputs.
    pub data_range: Option<f64>,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            sigma: 1.5,
            window: 11,
            k1: 0.01,
            k2: 0.03,
            data_range: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UqiParams {
    pub window: usize,
}

impl Default for UqiParams {
    fn default() -> Self {
        UqiParams { window: 8 }
    }
}

fn check_dims<A, B>(a: &ArrayView3<A>, b: &ArrayView3<B>, mask: Option<&Array3<bool>>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("volumes differ in size: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if let Some(m) = mask {
        if m.shape() != a.shape() {
            return Err(Error::Shape(format!("mask {:?} does not match volume {:?}", m.shape(), a.shape())));
        }
    }
    if a.is_empty() {
        return Err(Error::Shape("empty volume".into()));
    }
    Ok(())
}

fn to_f64<A: Copy + Into<f64>>(a: &ArrayView3<A>) -> Array3<f64> {
    a.mapv(|v| v.into())
}

/// Root-mean-square difference, optionally restricted to `mask`.
pub fn rmse<A: Copy + Into<f64>>(a: ArrayView3<A>, b: ArrayView3<A>, mask: Option<&Array3<bool>>) -> Result<f64> {
    check_dims(&a, &b, mask)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (idx, x) in a.indexed_iter() {
        if mask.is_some_and(|m| !m[idx]) {
            continue;
        }
        let d: f64 = (*x).into() - b[idx].into();
        sum += d * d;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("mask selects no voxels".into()));
    }
    Ok((sum / n as f64).sqrt())
}

/// Valid-mode correlation of `x` with `k` along `axis`.
fn filter_axis(x: &Array3<f64>, k: &Array1<f64>, axis: usize) -> Array3<f64> {
    let n = x.shape()[axis];
    let w = k.len();
    let mut shape = [x.shape()[0], x.shape()[1], x.shape()[2]];
    shape[axis] = n + 1 - w;
    let mut out = Array3::zeros(shape);
    Zip::from(x.lanes(Axis(axis)))
        .and(out.lanes_mut(Axis(axis)))
        .for_each(|src, mut dst| {
            for (i, d) in dst.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    acc += kv * src[i + j];
                }
                *d = acc;
            }
        });
    out
}

fn filter3(x: &Array3<f64>, kernels: &[Array1<f64>; 3]) -> Array3<f64> {
    let y = filter_axis(x, &kernels[0], 0);
    let y = filter_axis(&y, &kernels[1], 1);
    filter_axis(&y, &kernels[2], 2)
}

/// Local first and second moments under a separable window.
struct Moments {
    mx: Array3<f64>,
    my: Array3<f64>,
    vx: Array3<f64>,
    vy: Array3<f64>,
    cxy: Array3<f64>,
}

fn moments(x: &Array3<f64>, y: &Array3<f64>, kernels: &[Array1<f64>; 3]) -> Moments {
    let mx = filter3(x, kernels);
    let my = filter3(y, kernels);
    let exx = filter3(&(x * x), kernels);
    let eyy = filter3(&(y * y), kernels);
    let exy = filter3(&(x * y), kernels);
    let vx = Zip::from(&exx).and(&mx).map_collect(|e, m| (e - m * m).max(0.0));
    let vy = Zip::from(&eyy).and(&my).map_collect(|e, m| (e - m * m).max(0.0));
    let cxy = Zip::from(&exy).and(&mx).and(&my).map_collect(|e, a, b| e - a * b);
    Moments { mx, my, vx, vy, cxy }
}

fn gaussian(len: usize, sigma: f64) -> Array1<f64> {
    let c = (len as f64 - 1.0) / 2.0;
    let k = Array1::from_shape_fn(len, |i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp());
    let s = k.sum();
    k / s
}

fn window_lengths(shape: &[usize], w: usize) -> [usize; 3] {
    [shape[0].min(w), shape[1].min(w), shape[2].min(w)]
}

/// Whether the window whose corner is `idx` is centred on a masked-in voxel.
fn window_selected(mask: Option<&Array3<bool>>, idx: (usize, usize, usize), w: [usize; 3]) -> bool {
    mask.map_or(true, |m| m[[idx.0 + (w[0] - 1) / 2, idx.1 + (w[1] - 1) / 2, idx.2 + (w[2] - 1) / 2]])
}

/// Mean local SSIM. With a mask, only windows centred on masked-in voxels count.
pub fn ssim<A: Copy + Into<f64>>(
    a: ArrayView3<A>,
    b: ArrayView3<A>,
    params: &SsimParams,
    mask: Option<&Array3<bool>>,
) -> Result<f64> {
    check_dims(&a, &b, mask)?;
    let x = to_f64(&a);
    let y = to_f64(&b);
    let range = match params.data_range {
        Some(r) if r > 0.0 => r,
        Some(r) => return Err(Error::Config(format!("data range must be positive, got {r}"))),
        None => {
            let (lo, hi) = x
                .iter()
                .chain(y.iter())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
            if hi > lo {
                hi - lo
            } else {
                1.0
            }
        }
    };
    let c1 = (params.k1 * range).powi(2);
    let c2 = (params.k2 * range).powi(2);
    let w = window_lengths(x.shape(), params.window);
    let kernels = w.map(|l| gaussian(l, params.sigma));
    let m = moments(&x, &y, &kernels);
    let mut sum = 0.0;
    let mut n = 0usize;
    for (idx, mx) in m.mx.indexed_iter() {
        if !window_selected(mask, idx, w) {
            continue;
        }
        let my = m.my[idx];
        let lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        let cs = (2.0 * m.cxy[idx] + c2) / (m.vx[idx] + m.vy[idx] + c2);
        sum += (lum * cs).clamp(-1.0, 1.0);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("mask selects no SSIM windows".into()));
    }
    Ok(sum / n as f64)
}

/// Local UQI of one window, `None` where it is undefined and skipped.
///
/// Windows whose variances vanish together count as 1 when both are the same
/// constant and are skipped otherwise. When both means are zero but the contents
/// vary, the luminance factor is taken as 1, leaving `2σxy / (σx² + σy²)`.
pub fn uqi_local(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> Option<f64> {
    let vs = vx + vy;
    let ms = mx * mx + my * my;
    if vs == 0.0 {
        return (mx == my).then_some(1.0);
    }
    let lum = if ms == 0.0 { 1.0 } else { 2.0 * mx * my / ms };
    Some((lum * (2.0 * cxy / vs)).clamp(-1.0, 1.0))
}

/// Mean local UQI over a uniform sliding window.
pub fn uqi<A: Copy + Into<f64>>(
    a: ArrayView3<A>,
    b: ArrayView3<A>,
    params: &UqiParams,
    mask: Option<&Array3<bool>>,
) -> Result<f64> {
    check_dims(&a, &b, mask)?;
    let x = to_f64(&a);
    let y = to_f64(&b);
    let w = window_lengths(x.shape(), params.window);
    let kernels = w.map(|l| Array1::from_elem(l, 1.0 / l as f64));
    let m = moments(&x, &y, &kernels);
    let mut sum = 0.0;
    let mut n = 0usize;
    for (idx, mx) in m.mx.indexed_iter() {
        if !window_selected(mask, idx, w) {
            continue;
        }
        if let Some(q) = uqi_local(*mx, m.my[idx], m.vx[idx], m.vy[idx], m.cxy[idx]) {
            sum += q;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Numerical("UQI is undefined: every window is degenerate".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityScores {
    pub ssim: f64,
    pub rmse: f64,
    pub uqi: f64,
}

/// All three metrics with default parameters; `reference` first.
pub fn evaluate_pair<A: Copy + Into<f64>>(
    reference: ArrayView3<A>,
    candidate: ArrayView3<A>,
    mask: Option<&Array3<bool>>,
) -> Result<QualityScores> {
    Ok(QualityScores {
        ssim: ssim(reference.view(), candidate.view(), &SsimParams::default(), mask)?,
        rmse: rmse(reference.view(), candidate.view(), mask)?,
        uqi: uqi(reference, candidate, &UqiParams::default(), mask)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub subject_id: String,
    pub method: String,
    pub metric: String,
    pub value: f64,
}

/// Mean ± population standard deviation of one (method, metric) group.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl std::fmt::Display for Aggregate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3}±{:.3}", self.mean, self.std)
    }
}

/// Long-format table of `(subject, method, metric, value)` rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push(&mut self, subject_id: &str, method: &str, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            subject_id: subject_id.to_string(),
            method: method.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    pub fn push_scores(&mut self, subject_id: &str, method: &str, s: &QualityScores) {
        self.push(subject_id, method, "ssim", s.ssim);
        self.push(subject_id, method, "rmse", s.rmse);
        self.push(subject_id, method, "uqi", s.uqi);
    }

    pub fn extend(&mut self, other: MetricReport) {
        self.rows.extend(other.rows);
    }

    /// Values of one group in row order.
    pub fn values(&self, method: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.method == method && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    pub fn metrics(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.metric) {
                out.push(r.metric.clone());
            }
        }
        out
    }

    /// Groups in first-appearance order of method, then metric.
    pub fn aggregate(&self) -> Vec<Aggregate> {
        let mut groups: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        let methods = self.methods();
        let metrics = self.metrics();
        for r in &self.rows {
            let key = (
                methods.iter().position(|m| *m == r.method).unwrap_or(0),
                metrics.iter().position(|m| *m == r.metric).unwrap_or(0),
            );
            groups.entry(key).or_default().push(r.value);
        }
        groups
            .into_iter()
            .map(|((mi, ki), v)| {
                let n = v.len();
                let mean = v.iter().sum::<f64>() / n as f64;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
                Aggregate {
                    method: methods[mi].clone(),
                    metric: metrics[ki].clone(),
                    mean,
                    std: var.sqrt(),
                    n,
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("subject,method,metric,value\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.subject_id, r.method, r.metric, r.value);
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next().map(str::trim) {
            Some("subject,method,metric,value") => {}
            other => return Err(Error::Data(format!("unexpected metric report header {other:?}"))),
        }
        let mut report = MetricReport::default();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(Error::Data(format!("report row {}: expected 4 fields, got {}", i + 2, f.len())));
            }
            let value = f[3]
                .parse()
                .map_err(|_| Error::Data(format!("report row {}: bad value {:?}", i + 2, f[3])))?;
            report.push(f[0], f[1], f[2], value);
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }

    /// Plain-text table of `mean±std` per method and metric.
    pub fn summary_table(&self) -> String {
        let metrics = self.metrics();
        let agg = self.aggregate();
        let mut s = format!("{:<14}", "method");
        for m in &metrics {
            let _ = write!(s, " {m:>16}");
        }
        s.push('\n');
        for method in self.methods() {
            let _ = write!(s, "{method:<14}");
            for m in &metrics {
                match agg.iter().find(|a| a.method == method && a.metric == *m) {
                    Some(a) => {
                        let _ = write!(s, " {:>16}", a.to_string());
                    }
                    None => {
                        let _ = write!(s, " {:>16}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}
