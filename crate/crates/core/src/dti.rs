//! Diffusion tensor fitting and derived maps.
//!
//! Each voxel is fitted by ordinary log-linear least squares:
//! `ln S_i = ln S0 − b_i g_iᵀ D g_i`, solved for `ln S0` and the six unique
//! coefficients of `D` through the pseudo-inverse of the design matrix. Scalar maps
//! use eigenvalues clamped at zero; the component maps keep the raw coefficients.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use ndarray::{Array3, Zip};

use crate::data::{DwiStudy, Volume, B0_THRESHOLD};
use crate::error::{Error, Result};
use crate::metrics::{rmse, uqi, MetricReport, UqiParams};

/// Signals are clamped to this before taking the logarithm.
pub const SIGNAL_FLOOR: f64 = 1e-8;
/// Voxels whose S0 is below this fraction of the volume maximum are background.
pub const BACKGROUND_FRACTION: f64 = 1e-6;
/// Names of the derived maps, in output order.
pub const MAP_NAMES: [&str; 9] = ["ad", "fa", "md", "e1", "e2", "e3", "e4", "e5", "e6"];

#[derive(Clone, Debug, PartialEq)]
pub struct GradientTable {
    pub bvals: Vec<f64>,
    pub bvecs: Vec<[f64; 3]>,
    pub b0_indices: Vec<usize>,
}

impl GradientTable {
    pub fn new(bvals: Vec<f64>, bvecs: Vec<[f64; 3]>) -> Result<Self> {
        if bvals.len() != bvecs.len() {
            return Err(Error::Data(format!(
                "{} b-values but {} b-vectors",
                bvals.len(),
                bvecs.len()
            )));
        }
        for (i, (b, g)) in bvals.iter().zip(&bvecs).enumerate() {
            if !b.is_finite() || *b < 0.0 {
                return Err(Error::Data(format!("b-value {i} is {b}")));
            }
            if *b > B0_THRESHOLD {
                let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-3 {
                    return Err(Error::Data(format!("b-vector {i} has norm {norm}, expected 1")));
                }
            }
        }
        let b0_indices = (0..bvals.len()).filter(|&i| bvals[i] <= B0_THRESHOLD).collect();
        Ok(GradientTable { bvals, bvecs, b0_indices })
    }

    pub fn from_study(study: &DwiStudy) -> Result<Self> {
        GradientTable::new(study.bvals.clone(), study.bvecs.clone())
    }

    pub fn len(&self) -> usize {
        self.bvals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bvals.is_empty()
    }

    /// One row per measurement: `[1, −b gx², −2b gxgy, −2b gxgz, −b gy², −2b gygz, −b gz²]`.
    pub fn design_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), 7, |i, j| {
            let b = self.bvals[i];
            let [x, y, z] = self.bvecs[i];
            match j {
                0 => 1.0,
                1 => -b * x * x,
                2 => -2.0 * b * x * y,
                3 => -2.0 * b * x * z,
                4 => -b * y * y,
                5 => -2.0 * b * y * z,
                _ => -b * z * z,
            }
        })
    }

    fn describe_directions(&self) -> String {
        let dirs: Vec<String> = self
            .bvals
            .iter()
            .zip(&self.bvecs)
            .filter(|(b, _)| **b > B0_THRESHOLD)
            .map(|(b, g)| format!("b={b} ({:.3}, {:.3}, {:.3})", g[0], g[1], g[2]))
            .collect();
        if dirs.is_empty() {
            "no diffusion-weighted directions".into()
        } else {
            dirs.join(", ")
        }
    }
}

/// Precomputed least-squares solver for one gradient table.
#[derive(Clone, Debug)]
pub struct TensorFitter {
    pub table: GradientTable,
    pub design: DMatrix<f64>,
    pinv: DMatrix<f64>,
    /// Ratio of largest to smallest singular value of the design matrix.
    pub condition_number: f64,
}

impl TensorFitter {
    pub fn new(table: GradientTable) -> Result<Self> {
        if table.len() < 7 {
            return Err(Error::Data(format!(
                "tensor fit needs at least 7 measurements, got {}",
                table.len()
            )));
        }
        let design = table.design_matrix();
        let svd = design.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let condition_number = smax / smin;
        if !(smin > smax * 1e-10) {
            return Err(Error::Numerical(format!(
                "design matrix is singular (condition {condition_number:e}); directions: {}",
                table.describe_directions()
            )));
        }
        let pinv = svd
            .pseudo_inverse(0.0)
            .map_err(|e| Error::Numerical(format!("pseudo-inverse failed: {e}")))?;
        Ok(TensorFitter {
            table,
            design,
            pinv,
            condition_number,
        })
    }

    /// Fits one voxel's signals, in gradient-table order.
    pub fn fit_signals(&self, signals: &[f64]) -> Result<VoxelFit> {
        if signals.len() != self.table.len() {
            return Err(Error::Shape(format!(
                "{} signals for {} measurements",
                signals.len(),
                self.table.len()
            )));
        }
        let y = DVector::from_iterator(signals.len(), signals.iter().map(|s| s.max(SIGNAL_FLOOR).ln()));
        let beta = &self.pinv * &y;
        let resid = &self.design * &beta - &y;
        Ok(VoxelFit {
            ln_s0: beta[0],
            coefficients: [beta[1], beta[2], beta[3], beta[4], beta[5], beta[6]],
            residual_rms: (resid.norm_squared() / y.len() as f64).sqrt(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelFit {
    pub ln_s0: f64,
    /// `(Dxx, Dxy, Dxz, Dyy, Dyz, Dzz)`.
    pub coefficients: [f64; 6],
    pub residual_rms: f64,
}

impl VoxelFit {
    pub fn tensor(&self) -> Matrix3<f64> {
        tensor_from_components(&self.coefficients)
    }
}

pub fn tensor_from_components(c: &[f64; 6]) -> Matrix3<f64> {
    Matrix3::new(c[0], c[1], c[2], c[1], c[3], c[4], c[2], c[4], c[5])
}

pub fn components_of(d: &Matrix3<f64>) -> [f64; 6] {
    [d[(0, 0)], d[(0, 1)], d[(0, 2)], d[(1, 1)], d[(1, 2)], d[(2, 2)]]
}

/// Eigenvalues sorted descending.
pub fn eigenvalues(d: &Matrix3<f64>) -> [f64; 3] {
    let e = SymmetricEigen::new(*d).eigenvalues;
    let mut l = [e[0], e[1], e[2]];
    l.sort_by(|a, b| b.total_cmp(a));
    l
}

pub fn axial_diffusivity(l: [f64; 3]) -> f64 {
    l[0]
}

pub fn mean_diffusivity(l: [f64; 3]) -> f64 {
    (l[0] + l[1] + l[2]) / 3.0
}

/// `sqrt(3/2) · |λ − MD| / |λ|`, with the zero tensor mapped to 0.
pub fn fractional_anisotropy(l: [f64; 3]) -> f64 {
    let norm2: f64 = l.iter().map(|x| x * x).sum();
    if norm2 == 0.0 {
        return 0.0;
    }
    let md = mean_diffusivity(l);
    let dev2: f64 = l.iter().map(|x| (x - md).powi(2)).sum();
    ((1.5 * dev2 / norm2).sqrt()).min(1.0)
}

/// Per-voxel fit results over a volume grid.
#[derive(Clone, Debug)]
pub struct TensorField {
    /// E1..E6 = `(Dxx, Dxy, Dxz, Dyy, Dyz, Dzz)` in mm²/s.
    pub components: [Array3<f64>; 6],
    /// λ1 ≥ λ2 ≥ λ3, unclamped.
    pub eigenvalues: [Array3<f64>; 3],
    /// Voxels where at least one eigenvalue was negative and clamped for the scalar maps.
    pub clamped: Array3<bool>,
    pub foreground: Array3<bool>,
    pub s0: Array3<f64>,
    pub spacing: [f64; 3],
    pub affine: nalgebra::Matrix4<f64>,
    pub condition_number: f64,
}

impl TensorField {
    pub fn dims(&self) -> [usize; 3] {
        let s = self.s0.shape();
        [s[0], s[1], s[2]]
    }

    fn scalar_map(&self, f: impl Fn([f64; 3]) -> f64) -> Array3<f64> {
        let [l1, l2, l3] = &self.eigenvalues;
        let mut out = Array3::zeros(self.s0.raw_dim());
        Zip::from(&mut out)
            .and(l1)
            .and(l2)
            .and(l3)
            .and(&self.foreground)
            .for_each(|o, a, b, c, fg| {
                if *fg {
                    *o = f([a.max(0.0), b.max(0.0), c.max(0.0)]);
                }
            });
        out
    }

    pub fn ad(&self) -> Array3<f64> {
        self.scalar_map(axial_diffusivity)
    }

    pub fn md(&self) -> Array3<f64> {
        self.scalar_map(mean_diffusivity)
    }

    pub fn fa(&self) -> Array3<f64> {
        self.scalar_map(fractional_anisotropy)
    }

    /// `(ad, md, fa)`.
    pub fn scalar_maps(&self) -> (Array3<f64>, Array3<f64>, Array3<f64>) {
        (self.ad(), self.md(), self.fa())
    }

    pub fn tensor_components(&self) -> &[Array3<f64>; 6] {
        &self.components
    }

    pub fn tensor_at(&self, idx: [usize; 3]) -> Matrix3<f64> {
        tensor_from_components(&self.components.each_ref().map(|c| c[idx]))
    }

    /// Every derived map, named as in [`MAP_NAMES`].
    pub fn maps(&self) -> Vec<(&'static str, Array3<f64>)> {
        let mut out = vec![("ad", self.ad()), ("fa", self.fa()), ("md", self.md())];
        for (name, c) in MAP_NAMES[3..].iter().zip(&self.components) {
            out.push((name, c.clone()));
        }
        out
    }

    /// Writes `<name>.nii.gz` for every map into `dir` with the source geometry.
    pub fn write_maps(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();
        for (name, map) in self.maps() {
            let v = Volume::with_affine(map.mapv(|x| x as f32), self.spacing, self.affine)?;
            let p = dir.join(format!("{name}.nii.gz"));
            v.save(&p)?;
            paths.push(p);
        }
        Ok(paths)
    }
}

fn fit_slab(
    fitter: &TensorFitter,
    study: &DwiStudy,
    s0: &Array3<f64>,
    threshold: f64,
    xs: std::ops::Range<usize>,
) -> Result<Vec<([usize; 3], [f64; 6], [f64; 3])>> {
    let [_, ny, nz] = study.volumes[0].dims();
    let mut out = Vec::new();
    let mut signals = vec![0.0; study.volumes.len()];
    for i in xs {
        for j in 0..ny {
            for k in 0..nz {
                if !(s0[[i, j, k]] >= threshold && s0[[i, j, k]] > 0.0) {
                    continue;
                }
                for (s, v) in signals.iter_mut().zip(&study.volumes) {
                    *s = v.voxels[[i, j, k]] as f64;
                }
                let fit = fitter.fit_signals(&signals)?;
                out.push(([i, j, k], fit.coefficients, eigenvalues(&fit.tensor())));
            }
        }
    }
    Ok(out)
}

/// Fits a tensor in every foreground voxel of `study`.
pub fn fit_tensor(study: &DwiStudy) -> Result<TensorField> {
    study.validate()?;
    let fitter = TensorFitter::new(GradientTable::from_study(study)?)?;
    let first = study.volumes.first().ok_or_else(|| Error::Data("empty study".into()))?;
    let dims = first.dims();
    let b0 = &fitter.table.b0_indices;
    let mut s0 = Array3::<f64>::zeros(dims);
    for &i in b0 {
        Zip::from(&mut s0)
            .and(&study.volumes[i].voxels)
            .for_each(|a, v| *a += *v as f64 / b0.len() as f64);
    }
    let smax = s0.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let threshold = BACKGROUND_FRACTION * smax;

    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(dims[0]).max(1);
    let chunk = dims[0].div_ceil(workers);
    let results: Vec<Result<Vec<_>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (fitter, s0) = (&fitter, &s0);
                let xs = (w * chunk).min(dims[0])..((w + 1) * chunk).min(dims[0]);
                scope.spawn(move || fit_slab(fitter, study, s0, threshold, xs))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Numerical("tensor fit worker panicked".into()))))
            .collect()
    });

    let mut components: [Array3<f64>; 6] = std::array::from_fn(|_| Array3::zeros(dims));
    let mut evals: [Array3<f64>; 3] = std::array::from_fn(|_| Array3::zeros(dims));
    let mut clamped = Array3::from_elem(dims, false);
    let mut foreground = Array3::from_elem(dims, false);
    for r in results {
        for (idx, c, l) in r? {
            for (m, v) in components.iter_mut().zip(c) {
                m[idx] = v;
            }
            for (m, v) in evals.iter_mut().zip(l) {
                m[idx] = v;
            }
            clamped[idx] = l.iter().any(|x| *x < 0.0);
            foreground[idx] = true;
        }
    }
    Ok(TensorField {
        components,
        eigenvalues: evals,
        clamped,
        foreground,
        s0,
        spacing: first.spacing,
        affine: first.affine,
        condition_number: fitter.condition_number,
    })
}

/// RMSE and UQI of every derived map of `candidate` against `reference`.
/// Metric names are `<map>.rmse` and `<map>.uqi`.
pub fn compare_derived(
    reference: &TensorField,
    candidate: &TensorField,
    subject_id: &str,
    method: &str,
) -> Result<MetricReport> {
    if reference.dims() != candidate.dims() {
        return Err(Error::Shape(format!(
            "tensor fields differ in grid: {:?} vs {:?}",
            reference.dims(),
            candidate.dims()
        )));
    }
    let mut report = MetricReport::default();
    for ((name, r), (_, c)) in reference.maps().into_iter().zip(candidate.maps()) {
        report.push(subject_id, method, &format!("{name}.rmse"), rmse(r.view(), c.view(), None)?);
        report.push(subject_id, method, &format!("{name}.uqi"), uqi(r.view(), c.view(), &UqiParams::default(), None)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::phantom::{dwi_signal, hemisphere_directions};

    fn table(n: usize) -> GradientTable {
        let mut bvals = vec![0.0];
        let mut bvecs = vec![[0.0; 3]];
        for g in hemisphere_directions(n) {
            bvals.push(1000.0);
            bvecs.push(g);
        }
        GradientTable::new(bvals, bvecs).unwrap()
    }

    #[test]
    fn isotropic_fit_recovers_coefficients() {
        let t = table(16);
        let f = TensorFitter::new(t.clone()).unwrap();
        let d = Matrix3::from_diagonal_element(0.8e-3);
        let s: Vec<f64> = t.bvals.iter().zip(&t.bvecs).map(|(b, g)| dwi_signal(500.0, &d, *b, *g)).collect();
        let fit = f.fit_signals(&s).unwrap();
        for (got, want) in fit.coefficients.iter().zip(components_of(&d)) {
            assert!((got - want).abs() < 1e-9);
        }
        assert!((fit.ln_s0 - 500f64.ln()).abs() < 1e-9);
        assert!(fit.residual_rms < 1e-12);
    }

    #[test]
    fn zero_diffusivity() {
        let t = table(16);
        let f = TensorFitter::new(t.clone()).unwrap();
        let fit = f.fit_signals(&vec![300.0; t.len()]).unwrap();
        let l = eigenvalues(&fit.tensor());
        assert!(fit.coefficients.iter().all(|c| c.abs() < 1e-12));
        assert!(mean_diffusivity(l).abs() < 1e-12 && axial_diffusivity(l).abs() < 1e-12);
    }

    #[test]
    fn too_few_or_degenerate_directions() {
        assert!(matches!(TensorFitter::new(table(5)), Err(Error::Data(_))));
        let bvals = vec![0.0, 1000.0, 1000.0, 1000.0, 1000.0, 1000.0, 1000.0, 1000.0];
        let mut bvecs = vec![[0.0; 3]];
        bvecs.extend(std::iter::repeat([1.0, 0.0, 0.0]).take(7));
        let err = TensorFitter::new(GradientTable::new(bvals, bvecs).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert!(err.to_string().contains("(1.000, 0.000, 0.000)"));
    }

    #[test]
    fn scalar_map_examples() {
        assert_eq!(fractional_anisotropy([2e-3; 3]), 0.0);
        assert_eq!(fractional_anisotropy([0.0; 3]), 0.0);
        assert!((fractional_anisotropy([1.0, 0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!((mean_diffusivity([1.0, 0.0, 0.0]) - 1.0 / 3.0).abs() < 1e-15);
        // brute-force FA from the tensor itself: sqrt(3/2)·‖D − MD·I‖_F / ‖D‖_F
        let l = [1.7e-3, 0.3e-3, 0.3e-3];
        let d = Matrix3::from_diagonal(&nalgebra::Vector3::from(l));
        let md = d.trace() / 3.0;
        let brute = (1.5f64).sqrt() * (d - Matrix3::identity() * md).norm() / d.norm();
        assert!((fractional_anisotropy(l) - brute).abs() < 1e-14);
    }

    #[test]
    fn component_round_trip() {
        let c = [1.0, 0.2, -0.1, 2.0, 0.3, 0.5];
        assert_eq!(components_of(&tensor_from_components(&c)), c);
    }
}
