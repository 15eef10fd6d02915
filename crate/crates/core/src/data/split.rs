use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Disjoint train / validation / test subject lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Shuffles `subject_ids` with `seed` and cuts them into `(train, validation, test)` counts.
pub fn split_dataset(subject_ids: &[String], counts: (usize, usize, usize), seed: u64) -> Result<SplitManifest> {
    let (a, b, c) = counts;
    if a + b + c != subject_ids.len() {
        return Err(Error::Config(format!(
            "split counts {a}+{b}+{c} do not add up to {} subjects",
            subject_ids.len()
        )));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = subject_ids.iter().find(|s| !seen.insert(s.as_str())) {
        return Err(Error::Data(format!("duplicate subject id {dup:?}")));
    }
    let mut ids = subject_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = ids.split_off(a + b);
    let validation = ids.split_off(a);
    Ok(SplitManifest {
        train: ids,
        validation,
        test,
        seed,
    })
}

const SECTIONS: [&str; 3] = ["train", "validation", "test"];

impl SplitManifest {
    pub fn section(&self, name: &str) -> Option<&[String]> {
        match name {
            "train" => Some(&self.train),
            "validation" => Some(&self.validation),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# seed = {}\n", self.seed);
        for name in SECTIONS {
            s.push_str(&format!("[{name}]\n"));
            for id in self.section(name).unwrap_or_default() {
                s.push_str(id);
                s.push('\n');
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = SplitManifest {
            train: vec![],
            validation: vec![],
            test: vec![],
            seed: 0,
        };
        let mut seed = None;
        let mut current: Option<&mut Vec<String>> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once('=') {
                    if k.trim() == "seed" {
                        seed = Some(v.trim().parse().map_err(|_| {
                            Error::Data(format!("manifest line {}: bad seed {:?}", no + 1, v.trim()))
                        })?);
                    }
                }
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(match name {
                    "train" => &mut m.train,
                    "validation" => &mut m.validation,
                    "test" => &mut m.test,
                    other => return Err(Error::Data(format!("manifest line {}: unknown section {other:?}", no + 1))),
                });
                continue;
            }
            match current.as_mut() {
                Some(list) => list.push(line.to_string()),
                None => return Err(Error::Data(format!("manifest line {}: id outside a section", no + 1))),
            }
        }
        m.seed = seed.ok_or_else(|| Error::Data("manifest has no seed header".into()))?;
        let mut seen = HashSet::new();
        for id in m.train.iter().chain(&m.validation).chain(&m.test) {
            if !seen.insert(id) {
                return Err(Error::Data(format!("subject {id:?} appears in more than one split")));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
