use ndarray::{s, Array3, ArrayView3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::volume::Volume;
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

/// Default training patch size (x, y, z).
pub const DEFAULT_PATCH: [usize; 3] = [96, 96, 48];
/// Default overlap between neighbouring inference tiles.
pub const DEFAULT_OVERLAP: [usize; 3] = [16, 16, 8];

/// One cropped training or inference patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    /// Shape (1, 1, sx, sy, sz).
    pub data: Tensor<f32>,
    pub origin: [usize; 3],
    pub subject_id: String,
    pub direction_index: usize,
}

/// Extends `voxels` by edge replication at the end of each axis until it is at least `size`.
pub fn pad_to(voxels: &Array3<f32>, size: [usize; 3]) -> Array3<f32> {
    let d = voxels.shape();
    let out = [d[0].max(size[0]), d[1].max(size[1]), d[2].max(size[2])];
    if out == [d[0], d[1], d[2]] {
        return voxels.clone();
    }
    Array3::from_shape_fn(out, |(i, j, k)| voxels[[i.min(d[0] - 1), j.min(d[1] - 1), k.min(d[2] - 1)]])
}

/// Copies a `size` crop at `origin` into a (1, 1, ...) tensor.
pub fn crop(voxels: ArrayView3<f32>, origin: [usize; 3], size: [usize; 3]) -> Result<Tensor<f32>> {
    let d = voxels.shape();
    if (0..3).any(|a| origin[a] + size[a] > d[a]) {
        return Err(Error::Shape(format!(
            "crop {size:?} at {origin:?} exceeds volume {:?}",
            [d[0], d[1], d[2]]
        )));
    }
    let view = voxels.slice(s![
        origin[0]..origin[0] + size[0],
        origin[1]..origin[1] + size[1],
        origin[2]..origin[2] + size[2]
    ]);
    Tensor::from_vec(Dims::new(1, 1, size[0], size[1], size[2]), view.iter().copied().collect())
}

/// Uniform random origins such that a `size` patch fits inside `dims`.
pub fn random_origins(dims: [usize; 3], size: [usize; 3], n: usize, rng: &mut impl Rng) -> Vec<[usize; 3]> {
    (0..n)
        .map(|_| [0, 1, 2].map(|a| rng.gen_range(0..=dims[a].saturating_sub(size[a]))))
        .collect()
}

/// Draws `n` patches at uniformly random origins, padding small volumes first.
pub fn extract_patches(
    v: &Volume,
    size: [usize; 3],
    n: usize,
    seed: u64,
    subject_id: &str,
    direction_index: usize,
) -> Result<Vec<PatchSample>> {
    if size.contains(&0) {
        return Err(Error::Config(format!("patch size {size:?} has a zero axis")));
    }
    let padded = pad_to(&v.voxels, size);
    let d = padded.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_origins([d[0], d[1], d[2]], size, n, &mut rng)
        .into_iter()
        .map(|origin| {
            Ok(PatchSample {
                data: crop(padded.view(), origin, size)?,
                origin,
                subject_id: subject_id.to_string(),
                direction_index,
            })
        })
        .collect()
}

/// Tile origins along one axis: stride `size - overlap`, plus a final tile flush with the end.
fn axis_origins(dim: usize, size: usize, overlap: usize) -> Vec<usize> {
    if dim <= size {
        return vec![0];
    }
    let stride = size - overlap;
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|o| o + size < dim).collect();
    out.push(dim - size);
    out
}

/// Origins of a tiling of `dims` by `size` patches overlapping by `overlap`.
pub fn tile_origins(dims: [usize; 3], size: [usize; 3], overlap: [usize; 3]) -> Result<Vec<[usize; 3]>> {
    if (0..3).any(|a| overlap[a] >= size[a]) {
        return Err(Error::Config(format!("overlap {overlap:?} must be smaller than patch {size:?}")));
    }
    let axes: Vec<Vec<usize>> = (0..3).map(|a| axis_origins(dims[a], size[a], overlap[a])).collect();
    let mut out = Vec::new();
    for &x in &axes[0] {
        for &y in &axes[1] {
            for &z in &axes[2] {
                out.push([x, y, z]);
            }
        }
    }
    Ok(out)
}

/// Averages overlapping patch outputs onto a `dims` grid. Patch voxels falling
/// outside the grid (padding) are dropped.
pub fn aggregate_patches(patches: &[([usize; 3], &Tensor<f32>)], dims: [usize; 3]) -> Result<Array3<f32>> {
    let mut sum = Array3::<f64>::zeros(dims);
    let mut count = Array3::<u32>::zeros(dims);
    for (origin, t) in patches {
        let td = t.dims();
        if td.n() != 1 || td.c() != 1 {
            return Err(Error::Shape(format!("patch outputs must be single-channel, got {td}")));
        }
        let [sx, sy, sz] = td.spatial();
        for i in 0..sx.min(dims[0].saturating_sub(origin[0])) {
            for j in 0..sy.min(dims[1].saturating_sub(origin[1])) {
                for k in 0..sz.min(dims[2].saturating_sub(origin[2])) {
                    let p = [origin[0] + i, origin[1] + j, origin[2] + k];
                    sum[p] += t.get([0, 0, i, j, k]) as f64;
                    count[p] += 1;
                }
            }
        }
    }
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut missing = 0usize;
    for ((i, j, k), c) in count.indexed_iter() {
        if *c == 0 {
            missing += 1;
            for (a, v) in [i, j, k].into_iter().enumerate() {
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
    }
    if missing > 0 {
        return Err(Error::Data(format!(
            "{missing} voxels not covered by any patch, within [{}..={}, {}..={}, {}..={}]",
            lo[0], hi[0], lo[1], hi[1], lo[2], hi[2]
        )));
    }
    Ok(ndarray::Zip::from(&sum)
        .and(&count)
        .map_collect(|s, c| (*s / *c as f64) as f32))
}
