use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Matrix4;
use ndarray::{Array3, Array4, ArrayD, Axis, Ix3, Ix4};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use crate::error::{Error, Result};

/// Min-max parameters of a normalised volume: `stored = (raw - offset) / range`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntensityScale {
    pub offset: f64,
    pub range: f64,
}

impl IntensityScale {
    pub const IDENTITY: IntensityScale = IntensityScale { offset: 0.0, range: 1.0 };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn apply(&self, raw: f32) -> f32 {
        ((raw as f64 - self.offset) / self.range) as f32
    }

    pub fn invert(&self, stored: f32) -> f32 {
        (stored as f64 * self.range + self.offset) as f32
    }
}

impl Default for IntensityScale {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// A 3D scalar volume on a regular grid. Axis order of `voxels` is (x, y, z).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub voxels: Array3<f32>,
    /// Voxel size in mm.
    pub spacing: [f64; 3],
    /// Voxel index to world (mm) transform.
    pub affine: Matrix4<f64>,
    pub intensity_scale: IntensityScale,
}

impl Volume {
    /// Volume with a diagonal affine built from `spacing`.
    pub fn new(voxels: Array3<f32>, spacing: [f64; 3]) -> Result<Self> {
        let affine = Matrix4::from_diagonal(&nalgebra::Vector4::new(spacing[0], spacing[1], spacing[2], 1.0));
        let v = Volume {
            voxels,
            spacing,
            affine,
            intensity_scale: IntensityScale::IDENTITY,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn with_affine(voxels: Array3<f32>, spacing: [f64; 3], affine: Matrix4<f64>) -> Result<Self> {
        let v = Volume {
            voxels,
            spacing,
            affine,
            intensity_scale: IntensityScale::IDENTITY,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Data(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        if self.voxels.is_empty() {
            return Err(Error::Data("volume has no voxels".into()));
        }
        let det = self.affine.fixed_view::<3, 3>(0, 0).determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::Data("affine is not invertible".into()));
        }
        if let Some(i) = self.voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite voxel at flat index {i}")));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[0], s[1], s[2]]
    }

    /// Same grid with different voxel values.
    pub fn with_voxels(&self, voxels: Array3<f32>) -> Volume {
        Volume {
            voxels,
            ..self.clone()
        }
    }

    pub fn mean(&self) -> f64 {
        self.voxels.iter().map(|v| *v as f64).sum::<f64>() / self.voxels.len() as f64
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.voxels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
    }

    /// Reads a 3D NIfTI file (a 4D file with a single frame is accepted).
    pub fn load(path: &Path) -> Result<Self> {
        let (header, data) = read_nifti(path)?;
        let data = match data.ndim() {
            3 => data,
            4 if data.shape()[3] == 1 => data.index_axis_move(Axis(3), 0),
            n => {
                return Err(Error::Data(format!(
                    "{}: expected a 3D volume, found {n} dimensions",
                    path.display()
                )))
            }
        };
        let voxels = data.into_dimensionality::<Ix3>().map_err(|e| Error::Data(e.to_string()))?;
        from_header(&header, voxels, path)
    }

    /// Writes a float32 NIfTI file; `.nii.gz` paths are compressed.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = header_for(self);
        WriterOptions::new(path)
            .reference_header(&header)
            .write_nifti(&self.voxels)
            .map_err(|e| Error::nifti(path, e))
    }
}

fn read_nifti(path: &Path) -> Result<(NiftiHeader, ArrayD<f32>)> {
    let obj = ReaderOptions::new().read_file(path).map_err(|e| Error::nifti(path, e))?;
    let header = obj.header().clone();
    let data = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| Error::nifti(path, e))?;
    Ok((header, data))
}

fn from_header(header: &NiftiHeader, voxels: Array3<f32>, path: &Path) -> Result<Volume> {
    let spacing = [
        header.pixdim[1].abs() as f64,
        header.pixdim[2].abs() as f64,
        header.pixdim[3].abs() as f64,
    ];
    let spacing = spacing.map(|s| if s > 0.0 { s } else { 1.0 });
    let affine = if header.sform_code != 0 || header.qform_code != 0 {
        header.affine::<f64>()
    } else {
        Matrix4::from_diagonal(&nalgebra::Vector4::new(spacing[0], spacing[1], spacing[2], 1.0))
    };
    Volume::with_affine(voxels, spacing, affine).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn header_for(v: &Volume) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    h.set_affine(&v.affine);
    h.pixdim[1] = v.spacing[0] as f32;
    h.pixdim[2] = v.spacing[1] as f32;
    h.pixdim[3] = v.spacing[2] as f32;
    h.xyzt_units = 2; // mm
    h
}

/// Default b-value below which a volume counts as unweighted.
pub const B0_THRESHOLD: f64 = 50.0;

/// A diffusion-weighted acquisition: one 3D volume per gradient entry.
#[derive(Clone, Debug, PartialEq)]
pub struct DwiStudy {
    pub volumes: Vec<Volume>,
    pub bvals: Vec<f64>,
    pub bvecs: Vec<[f64; 3]>,
}

impl DwiStudy {
    pub fn new(volumes: Vec<Volume>, bvals: Vec<f64>, bvecs: Vec<[f64; 3]>) -> Result<Self> {
        let s = DwiStudy { volumes, bvals, bvecs };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.volumes.len();
        if self.bvals.len() != n || self.bvecs.len() != n {
            return Err(Error::Data(format!(
                "{n} volumes but {} b-values and {} b-vectors",
                self.bvals.len(),
                self.bvecs.len()
            )));
        }
        for (i, (b, g)) in self.bvals.iter().zip(&self.bvecs).enumerate() {
            if *b > B0_THRESHOLD {
                let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-3 {
                    return Err(Error::Data(format!("b-vector {i} has norm {norm}, expected 1")));
                }
            }
        }
        if !self.bvals.iter().any(|b| *b <= B0_THRESHOLD) {
            return Err(Error::Data("study has no b=0 volume".into()));
        }
        if let Some(first) = self.volumes.first() {
            if let Some(i) = self.volumes.iter().position(|v| v.dims() != first.dims()) {
                return Err(Error::Data(format!("volume {i} has dims {:?}, expected {:?}", self.volumes[i].dims(), first.dims())));
            }
        }
        Ok(())
    }

    pub fn b0_indices(&self) -> Vec<usize> {
        (0..self.bvals.len()).filter(|&i| self.bvals[i] <= B0_THRESHOLD).collect()
    }

    /// Loads a 4D NIfTI with FSL-style `bval`/`bvec` tables.
    pub fn load(nifti: &Path, bval: &Path, bvec: &Path) -> Result<Self> {
        let volumes = load_series(nifti)?;
        let bvals = read_bvals(bval)?;
        let bvecs = read_bvecs(bvec)?;
        DwiStudy::new(volumes, bvals, bvecs)
    }

    pub fn save(&self, nifti: &Path, bval: &Path, bvec: &Path) -> Result<()> {
        save_series(&self.volumes, nifti)?;
        write_bvals(bval, &self.bvals)?;
        write_bvecs(bvec, &self.bvecs)
    }
}

/// Reads a 3D or 4D NIfTI file as a list of 3D frames.
pub fn load_series(path: &Path) -> Result<Vec<Volume>> {
    let (header, data) = read_nifti(path)?;
    let data = match data.ndim() {
        3 => data.insert_axis(Axis(3)),
        4 => data,
        n => return Err(Error::Data(format!("{}: expected 3D or 4D data, found {n} dimensions", path.display()))),
    };
    let data = data.into_dimensionality::<Ix4>().map_err(|e| Error::Data(e.to_string()))?;
    data.axis_iter(Axis(3))
        .map(|v| from_header(&header, v.to_owned(), path))
        .collect()
}

/// Writes frames to one NIfTI file: 3D for a single frame, 4D otherwise.
pub fn save_series(frames: &[Volume], path: &Path) -> Result<()> {
    let first = frames.first().ok_or_else(|| Error::Data("no volumes to write".into()))?;
    if frames.len() == 1 {
        return first.save(path);
    }
    if let Some(i) = frames.iter().position(|v| v.dims() != first.dims()) {
        return Err(Error::Data(format!("volume {i} has dims {:?}, expected {:?}", frames[i].dims(), first.dims())));
    }
    let [x, y, z] = first.dims();
    let mut data = Array4::<f32>::zeros((x, y, z, frames.len()));
    for (i, v) in frames.iter().enumerate() {
        data.index_axis_mut(Axis(3), i).assign(&v.voxels);
    }
    let mut header = header_for(first);
    header.pixdim[4] = 1.0;
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&data)
        .map_err(|e| Error::nifti(path, e))
}

fn parse_row(path: &Path, line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Data(format!("{}: cannot parse {t:?} as a number", path.display())))
        })
        .collect()
}

fn rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| parse_row(path, l))
        .collect()
}

/// Reads a one-row (or one-column) b-value table.
pub fn read_bvals(path: &Path) -> Result<Vec<f64>> {
    let r = rows(path)?;
    if r.len() == 1 {
        Ok(r.into_iter().next().unwrap_or_default())
    } else if r.iter().all(|row| row.len() == 1) {
        Ok(r.into_iter().map(|row| row[0]).collect())
    } else {
        Err(Error::Data(format!("{}: expected a single row of b-values", path.display())))
    }
}

/// Reads a three-row (x, y, z) b-vector table; the N×3 transpose is also accepted.
pub fn read_bvecs(path: &Path) -> Result<Vec<[f64; 3]>> {
    let r = rows(path)?;
    if r.len() == 3 && r[0].len() == r[1].len() && r[1].len() == r[2].len() {
        Ok((0..r[0].len()).map(|i| [r[0][i], r[1][i], r[2][i]]).collect())
    } else if r.iter().all(|row| row.len() == 3) {
        Ok(r.into_iter().map(|row| [row[0], row[1], row[2]]).collect())
    } else {
        Err(Error::Data(format!("{}: expected three rows of b-vector components", path.display())))
    }
}

fn join(values: impl Iterator<Item = f64>) -> String {
    let mut s = String::new();
    for (i, v) in values.enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v}");
    }
    s
}

pub fn write_bvals(path: &Path, bvals: &[f64]) -> Result<()> {
    let text = join(bvals.iter().copied()) + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_bvecs(path: &Path, bvecs: &[[f64; 3]]) -> Result<()> {
    let text: String = (0..3).map(|a| join(bvecs.iter().map(|g| g[a])) + "\n").collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Min-max scales a volume to [0, 1]; constant volumes map to zero.
/// The parameters are recorded so [`denormalize`] can undo the scaling.
pub fn normalize(v: &Volume) -> Volume {
    let (lo, hi) = v.min_max();
    let range = hi as f64 - lo as f64;
    let scale = IntensityScale {
        offset: lo as f64,
        range: if range > 0.0 { range } else { 1.0 },
    };
    normalize_with(v, scale)
}

/// Scales `v` with externally chosen parameters (for example those of a paired input).
pub fn normalize_with(v: &Volume, scale: IntensityScale) -> Volume {
    Volume {
        voxels: v.voxels.mapv(|x| scale.apply(x)),
        intensity_scale: scale,
        ..v.clone()
    }
}

pub fn denormalize(v: &Volume) -> Volume {
    let s = v.intensity_scale;
    Volume {
        voxels: v.voxels.mapv(|x| s.invert(x)),
        intensity_scale: IntensityScale::IDENTITY,
        ..v.clone()
    }
}
