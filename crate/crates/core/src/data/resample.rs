//! Band-limited resampling by Fourier truncation and zero-padding.
//!
//! Each axis is resampled independently. For a length-`N` input and length-`M`
//! output the kept frequencies are those representable on both grids. When the
//! smaller grid is even, its Nyquist bin is shared: downsampling folds both input
//! bins onto it, upsampling splits it in half between the two output bins. With
//! that convention sample `m` of a downsampled grid coincides with input sample
//! `m * N / M`, and constants are reproduced exactly.

use ndarray::{Array3, Axis, Zip};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::volume::Volume;
use crate::error::{Error, Result};

fn resample_lane(planner: &mut FftPlanner<f64>, input: &[f64], out_len: usize) -> Vec<f64> {
    let n = input.len();
    let m = out_len;
    let mut x: Vec<Complex<f64>> = input.iter().map(|v| Complex::new(*v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut x);

    let mut y = vec![Complex::new(0.0, 0.0); m];
    let k = n.min(m);
    let half = (k - 1) / 2;
    y[0] = x[0];
    for f in 1..=half {
        y[f] = x[f];
        y[m - f] = x[n - f];
    }
    if k % 2 == 0 && k > 1 {
        let f = k / 2;
        if n == m {
            y[f] = x[f];
        } else if m < n {
            y[f] = x[f] + x[n - f];
        } else {
            y[f] = x[f] * 0.5;
            y[m - f] = x[f] * 0.5;
        }
    }
    planner.plan_fft_inverse(m).process(&mut y);
    let scale = 1.0 / n as f64;
    y.into_iter().map(|c| c.re * scale).collect()
}

/// Resamples a volume to `dims` (any size ≥ 1 per axis) with the Fourier convention above.
pub fn fourier_resample(data: &Array3<f64>, dims: [usize; 3]) -> Array3<f64> {
    let mut planner = FftPlanner::new();
    let mut cur = data.clone();
    let mut lane = Vec::new();
    for axis in 0..3 {
        let n = cur.shape()[axis];
        let m = dims[axis];
        if n == m {
            continue;
        }
        let mut shape = [cur.shape()[0], cur.shape()[1], cur.shape()[2]];
        shape[axis] = m;
        let mut out = Array3::<f64>::zeros(shape);
        Zip::from(cur.lanes(Axis(axis)))
            .and(out.lanes_mut(Axis(axis)))
            .for_each(|src, mut dst| {
                lane.clear();
                lane.extend(src.iter().copied());
                for (d, v) in dst.iter_mut().zip(resample_lane(&mut planner, &lane, m)) {
                    *d = v;
                }
            });
        cur = out;
    }
    cur
}

pub(crate) fn regridded(v: &Volume, voxels: Array3<f64>, stretch: [f64; 3]) -> Result<Volume> {
    let mut affine = v.affine;
    for (c, s) in stretch.iter().enumerate() {
        for r in 0..3 {
            affine[(r, c)] *= s;
        }
    }
    let spacing = [0, 1, 2].map(|a| v.spacing[a] * stretch[a]);
    let mut out = Volume::with_affine(voxels.mapv(|x| x as f32), spacing, affine)?;
    out.intensity_scale = v.intensity_scale;
    Ok(out)
}

/// Simulates a low-resolution acquisition: ideal low-pass then subsample by `factor`
/// on every axis. Output dims are `ceil(dim / factor)`.
pub fn simulate_lowres(hr: &Volume, factor: usize) -> Result<Volume> {
    if factor < 2 {
        return Err(Error::Data(format!("downsampling factor must be >= 2, got {factor}")));
    }
    let dims = hr.dims();
    if let Some(a) = (0..3).find(|&a| dims[a] < factor) {
        return Err(Error::Data(format!(
            "axis {a} has {} voxels, fewer than the factor {factor}",
            dims[a]
        )));
    }
    let out_dims = dims.map(|n| n.div_ceil(factor));
    let stretch = [0, 1, 2].map(|a| dims[a] as f64 / out_dims[a] as f64);
    let lr = fourier_resample(&hr.voxels.mapv(|x| x as f64), out_dims);
    regridded(hr, lr, stretch)
}

/// Sinc (Fourier zero-padding) interpolation of `lr` onto a grid of `target` dims.
/// Each target dim must be one that [`simulate_lowres`] maps onto the lr dim for some
/// integer factor.
pub fn sinc_upsample(lr: &Volume, target: [usize; 3]) -> Result<Volume> {
    let dims = lr.dims();
    for a in 0..3 {
        let (m, t) = (dims[a], target[a]);
        let f = ((t as f64 / m as f64).round() as usize).max(1);
        if t < m || t.div_ceil(f) != m {
            return Err(Error::Data(format!(
                "target dims {target:?} are not an integer upsampling of {dims:?} (axis {a})"
            )));
        }
    }
    let stretch = [0, 1, 2].map(|a| dims[a] as f64 / target[a] as f64);
    let hr = fourier_resample(&lr.voxels.mapv(|x| x as f64), target);
    regridded(lr, hr, stretch)
}
