//! Directory conventions shared by the commands.
//!
//! A subject is a NIfTI file `<id>.nii` or `<id>.nii.gz`, optionally with
//! `<id>.bval` and `<id>.bvec` sidecars. Prepared data sets hold `hr/`, `lr/`
//! and `sinc/` subdirectories plus `split.txt`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

pub const HR_DIR: &str = "hr";
pub const LR_DIR: &str = "lr";
pub const SINC_DIR: &str = "sinc";
pub const SPLIT_FILE: &str = "split.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subject {
    pub id: String,
    pub path: PathBuf,
}

impl Subject {
    pub fn sidecar(&self, ext: &str) -> PathBuf {
        self.path.with_file_name(format!("{}.{ext}", self.id))
    }

    /// Both gradient sidecars, if present.
    pub fn gradients(&self) -> Option<(PathBuf, PathBuf)> {
        let (bval, bvec) = (self.sidecar("bval"), self.sidecar("bvec"));
        (bval.is_file() && bvec.is_file()).then_some((bval, bvec))
    }
}

pub fn subject_id(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    name.strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .map(str::to_string)
}

/// NIfTI subjects in `dir`, sorted by id.
pub fn list_subjects(dir: &Path) -> Result<Vec<Subject>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(id) = subject_id(&path) {
            out.push(Subject { id, path });
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = out.windows(2).find(|w| w[0].id == w[1].id) {
        bail!("subject {} appears twice in {}", w[0].id, dir.display());
    }
    Ok(out)
}

pub fn find_subject(dir: &Path, id: &str) -> Option<Subject> {
    ["nii.gz", "nii"].iter().find_map(|ext| {
        let path = dir.join(format!("{id}.{ext}"));
        path.is_file().then(|| Subject { id: id.to_string(), path })
    })
}

pub fn output_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.nii.gz"))
}

/// Copies the `bval`/`bvec` sidecars of `subject` next to `target_dir/<id>.nii.gz`.
pub fn copy_gradients(subject: &Subject, target_dir: &Path) -> Result<()> {
    if let Some((bval, bvec)) = subject.gradients() {
        for (src, ext) in [(bval, "bval"), (bvec, "bvec")] {
            let dst = target_dir.join(format!("{}.{ext}", subject.id));
            if src != dst {
                std::fs::copy(&src, &dst).with_context(|| format!("copying {} to {}", src.display(), dst.display()))?;
            }
        }
    }
    Ok(())
}
