//! On-disk phantom datasets: one directory of `RFSV` files plus a manifest.
//!
//! ```text
//! resfuse-dataset 1
//! seed 42
//! spec {"size":[32,32,32],...}
//! cases 4
//! case 0 train
//! case 1 train
//! case 2 train
//! case 3 val
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{self, PhantomSpec, Sample};
use crate::volume::{self, Volume};

pub const MANIFEST: &str = "manifest.txt";
const HEADER: &str = "resfuse-dataset 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (expected train or val)"
            ))),
        }
    }
}

/// The first `round(0.75 * total)` cases train, the rest validate.
pub fn split_for(index: usize, total: usize) -> Split {
    if index < (3 * total + 2) / 4 {
        Split::Train
    } else {
        Split::Val
    }
}

/// Generates `cases` samples in memory; case `i` uses `case_seed(seed, i)`.
pub fn generate_cases(spec: &PhantomSpec, cases: usize, seed: u64) -> Result<Vec<Sample>> {
    (0..cases)
        .into_par_iter()
        .map(|i| phantom::generate(spec, phantom::case_seed(seed, i)))
        .collect()
}

/// Splits in-memory cases the same way a manifest would.
pub fn split_cases(samples: Vec<Sample>) -> (Vec<Sample>, Vec<Sample>) {
    let total = samples.len();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, s) in samples.into_iter().enumerate() {
        match split_for(i, total) {
            Split::Train => train.push(s),
            Split::Val => val.push(s),
        }
    }
    (train, val)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseEntry {
    pub index: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub spec: PhantomSpec,
    pub seed: u64,
    pub cases: Vec<CaseEntry>,
}

fn case_path(root: &Path, index: usize, kind: &str) -> PathBuf {
    root.join(format!("case_{index}_{kind}.rfsv"))
}

impl Dataset {
    pub fn generate(
        root: impl Into<PathBuf>,
        spec: &PhantomSpec,
        cases: usize,
        seed: u64,
    ) -> Result<Self> {
        let root = root.into();
        spec.validate()?;
        fs::create_dir_all(&root)?;
        (0..cases).into_par_iter().try_for_each(|i| -> Result<()> {
            let s = phantom::generate(spec, phantom::case_seed(seed, i))?;
            volume::write(case_path(&root, i, "pre"), &Volume::Float(s.pre))?;
            volume::write(case_path(&root, i, "post"), &Volume::Float(s.post))?;
            volume::write(case_path(&root, i, "labels"), &s.labels.into())?;
            Ok(())
        })?;
        let dataset = Self {
            root,
            spec: spec.clone(),
            seed,
            cases: (0..cases)
                .map(|index| CaseEntry {
                    index,
                    split: split_for(index, cases),
                })
                .collect(),
        };
        fs::write(dataset.root.join(MANIFEST), dataset.manifest_text()?)?;
        Ok(dataset)
    }

    pub fn manifest_text(&self) -> Result<String> {
        let mut out = format!(
            "{HEADER}\nseed {}\nspec {}\ncases {}\n",
            self.seed,
            serde_json::to_string(&self.spec)?,
            self.cases.len()
        );
        for c in &self.cases {
            out.push_str(&format!("case {} {}\n", c.index, c.split));
        }
        Ok(out)
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::Dataset {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let bad = |reason: String| Error::Dataset {
            path: path.clone(),
            reason,
        };
        let mut lines = text.lines().enumerate();
        let mut next = |key: &str| -> Result<String> {
            let (n, line) = lines
                .next()
                .ok_or_else(|| bad(format!("missing `{key}` line")))?;
            if key == HEADER {
                return if line == HEADER {
                    Ok(String::new())
                } else {
                    Err(bad(format!("line {}: expected `{HEADER}`", n + 1)))
                };
            }
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(str::to_owned)
                .ok_or_else(|| bad(format!("line {}: expected `{key} ...`", n + 1)))
        };
        next(HEADER)?;
        let seed = next("seed")?
            .parse::<u64>()
            .map_err(|e| bad(format!("seed: {e}")))?;
        let spec: PhantomSpec =
            serde_json::from_str(&next("spec")?).map_err(|e| bad(format!("spec: {e}")))?;
        let count = next("cases")?
            .parse::<usize>()
            .map_err(|e| bad(format!("cases: {e}")))?;
        let mut cases = Vec::with_capacity(count);
        for _ in 0..count {
            let entry = next("case")?;
            let mut parts = entry.split(' ');
            let (Some(index), Some(split), None) = (parts.next(), parts.next(), parts.next())
            else {
                return Err(bad(format!("malformed case entry `{entry}`")));
            };
            let index = index
                .parse::<usize>()
                .map_err(|e| bad(format!("case index: {e}")))?;
            let split = split.parse::<Split>().map_err(|e| bad(e.to_string()))?;
            cases.push(CaseEntry { index, split });
        }
        if let Some((n, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(bad(format!("line {}: unexpected `{extra}`", n + 1)));
        }
        Ok(Self {
            root,
            spec,
            seed,
            cases,
        })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.cases
            .iter()
            .filter(|c| c.split == split)
            .map(|c| c.index)
            .collect()
    }

    pub fn load_case(&self, index: usize) -> Result<Sample> {
        let read = |kind| {
            let path = case_path(&self.root, index, kind);
            volume::read(&path).map_err(|e| Error::Dataset {
                path,
                reason: e.to_string(),
            })
        };
        let pre = read("pre")?.into_float()?;
        let post = read("post")?.into_float()?;
        let labels = read("labels")?.into_labels()?;
        let spatial = &pre.shape()[1..];
        if pre.shape() != post.shape() || pre.rank() != 4 || spatial != labels.dims {
            return Err(Error::Dataset {
                path: self.root.clone(),
                reason: format!("case {index}: pre, post and labels dims disagree"),
            });
        }
        Ok(Sample { pre, post, labels })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.indices(split)
            .into_par_iter()
            .map(|i| self.load_case(i))
            .collect()
    }
}
