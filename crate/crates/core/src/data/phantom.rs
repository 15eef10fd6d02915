//! Synthetic volumes for tests, demos and desk-scale experiments.

use nalgebra::{Matrix3, Rotation3, Vector3};
use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::volume::{DwiStudy, Volume};
use crate::error::Result;

/// Smooth Gaussian blobs plus a few sharp-edged ellipsoids on a non-negative background.
pub fn phantom_volume(dims: [usize; 3], spacing: [f64; 3], seed: u64) -> Result<Volume> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = dims.map(|d| d as f64);
    let mut blobs = Vec::new();
    for _ in 0..6 {
        let c = ext.map(|e| rng.gen_range(0.15..0.85) * e);
        let s = ext.map(|e| rng.gen_range(0.06..0.18) * e);
        blobs.push((c, s, rng.gen_range(0.3..1.0)));
    }
    let mut shapes = Vec::new();
    for _ in 0..4 {
        let c = ext.map(|e| rng.gen_range(0.2..0.8) * e);
        let r = ext.map(|e| rng.gen_range(0.08..0.25) * e);
        shapes.push((c, r, rng.gen_range(-0.4..0.8)));
    }
    let voxels = Array3::from_shape_fn(dims, |(i, j, k)| {
        let p = [i as f64, j as f64, k as f64];
        let mut v = 0.1;
        for (c, s, a) in &blobs {
            let q: f64 = (0..3).map(|t| ((p[t] - c[t]) / s[t]).powi(2)).sum();
            v += a * (-0.5 * q).exp();
        }
        for (c, r, a) in &shapes {
            let q: f64 = (0..3).map(|t| ((p[t] - c[t]) / r[t]).powi(2)).sum();
            if q <= 1.0 {
                v += a;
            }
        }
        v.max(0.0) as f32
    });
    Volume::new(voxels, spacing)
}

/// Roughly uniform unit directions on a hemisphere (Fibonacci spiral).
pub fn hemisphere_directions(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

/// Symmetric tensor with eigenvalues `evals` whose principal axis is `dir`.
pub fn tensor_along(dir: Vector3<f64>, evals: [f64; 3]) -> Matrix3<f64> {
    let rot = Rotation3::rotation_between(&Vector3::x(), &dir.normalize()).unwrap_or_else(|| {
        Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::PI)
    });
    let r = rot.matrix();
    r * Matrix3::from_diagonal(&Vector3::from(evals)) * r.transpose()
}

/// Noiseless signal `s0 * exp(-b gᵀ D g)`.
pub fn dwi_signal(s0: f64, d: &Matrix3<f64>, b: f64, g: [f64; 3]) -> f64 {
    let g = Vector3::from(g);
    s0 * (-b * g.dot(&(d * g))).exp()
}

/// A DWI phantom: one b=0 volume followed by `n_dirs` weighted volumes, with an
/// isotropic background, two crossing-free fibre bundles and a spherical CSF-like region.
pub fn dwi_phantom(dims: [usize; 3], n_dirs: usize, bval: f64, seed: u64) -> Result<DwiStudy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = dims.map(|d| d as f64);
    let tissue = Matrix3::from_diagonal_element(0.7e-3);
    let csf = Matrix3::from_diagonal_element(2.5e-3);
    let fibre_a = tensor_along(Vector3::new(1.0, rng.gen_range(-0.3..0.3), 0.2), [1.7e-3, 0.3e-3, 0.3e-3]);
    let fibre_b = tensor_along(Vector3::new(rng.gen_range(-0.3..0.3), 0.3, 1.0), [1.5e-3, 0.4e-3, 0.2e-3]);
    let centre = ext.map(|e| e / 2.0);
    let radius = ext.iter().cloned().fold(f64::INFINITY, f64::min) * 0.18;

    let field = |i: usize, j: usize, k: usize| -> (f64, Matrix3<f64>) {
        let p = [i as f64, j as f64, k as f64];
        let dc: f64 = (0..3).map(|t| (p[t] - centre[t]).powi(2)).sum::<f64>().sqrt();
        if dc < radius {
            return (1.4, csf);
        }
        if (p[1] - 0.3 * ext[1]).abs() < 0.12 * ext[1] && (p[2] - 0.5 * ext[2]).abs() < 0.15 * ext[2] {
            return (1.0, fibre_a);
        }
        if (p[0] - 0.7 * ext[0]).abs() < 0.1 * ext[0] && (p[1] - 0.7 * ext[1]).abs() < 0.12 * ext[1] {
            return (0.9, fibre_b);
        }
        let edge = (0..3).all(|t| p[t] > 0.08 * ext[t] && p[t] < 0.92 * ext[t]);
        (if edge { 0.8 } else { 0.05 }, tissue)
    };

    let mut bvals = vec![0.0];
    let mut bvecs = vec![[0.0; 3]];
    for g in hemisphere_directions(n_dirs) {
        bvals.push(bval);
        bvecs.push(g);
    }
    let volumes = bvals
        .iter()
        .zip(&bvecs)
        .map(|(b, g)| {
            let vox = Array3::from_shape_fn(dims, |(i, j, k)| {
                let (s0, d) = field(i, j, k);
                (1000.0 * dwi_signal(s0, &d, *b, *g)) as f32
            });
            Volume::new(vox, [1.75, 1.75, 2.35])
        })
        .collect::<Result<Vec<_>>>()?;
    DwiStudy::new(volumes, bvals, bvecs)
}
