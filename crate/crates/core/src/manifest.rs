//! Tab-separated dataset manifest.
//!
//! One record per line: `sample_id <TAB> path <TAB> class_label <TAB> group_id`.
//! Blank lines and lines starting with `#` are ignored. A `# classes=<C>`
//! directive fixes the class count; without it `C` is the largest label seen.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use tracing::warn;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleMeta {
    pub sample_id: String,
    pub path: PathBuf,
    /// One-based class label in `1..=C`.
    pub class_label: usize,
    /// Grouping key for leave-one-group-out evaluation (the user identity).
    pub group_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub classes: usize,
    pub samples: Vec<SampleMeta>,
}

impl DatasetManifest {
    pub fn new(classes: usize, samples: Vec<SampleMeta>) -> Result<Self> {
        if classes == 0 {
            return Err(Error::invalid("class count must be positive"));
        }
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.sample_id.as_str()) {
                return Err(Error::DuplicateSample(s.sample_id.clone()));
            }
            if s.class_label == 0 || s.class_label > classes {
                return Err(Error::invalid(format!(
                    "sample {:?}: label {} out of range 1..={classes}",
                    s.sample_id, s.class_label
                )));
            }
            if s.group_id.is_empty() {
                return Err(Error::invalid(format!("sample {:?}: empty group_id", s.sample_id)));
            }
        }
        let m = DatasetManifest { classes, samples };
        let missing = m.missing_classes();
        if !m.samples.is_empty() && !missing.is_empty() {
            warn!(?missing, "manifest has classes with no samples");
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Per-class sample counts, indexed by `label - 1`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for s in &self.samples {
            counts[s.class_label - 1] += 1;
        }
        counts
    }

    pub fn missing_classes(&self) -> Vec<usize> {
        self.class_counts()
            .iter()
            .enumerate()
            .filter(|(_, &n)| n == 0)
            .map(|(c, _)| c + 1)
            .collect()
    }

    /// Distinct group ids in sorted order.
    pub fn groups(&self) -> Vec<&str> {
        self.samples
            .iter()
            .map(|s| s.group_id.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut declared = None;
        let mut samples = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("classes=") {
                    let c = v.trim().parse::<usize>().map_err(|_| Error::Manifest {
                        line: line_no,
                        reason: format!("bad classes directive {v:?}"),
                    })?;
                    declared = Some(c);
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Manifest {
                    line: line_no,
                    reason: format!("missing field: expected 4 tab-separated fields, got {}", fields.len()),
                });
            }
            for (name, value) in ["sample_id", "path", "class_label", "group_id"].iter().zip(&fields) {
                if value.trim().is_empty() {
                    return Err(Error::Manifest {
                        line: line_no,
                        reason: format!("missing field {name}"),
                    });
                }
            }
            let class_label = fields[2].trim().parse::<usize>().map_err(|_| Error::Manifest {
                line: line_no,
                reason: format!("class_label {:?} is not a positive integer", fields[2]),
            })?;
            if class_label == 0 {
                return Err(Error::Manifest {
                    line: line_no,
                    reason: "class_label must be >= 1".into(),
                });
            }
            samples.push(SampleMeta {
                sample_id: fields[0].trim().to_string(),
                path: PathBuf::from(fields[1].trim()),
                class_label,
                group_id: fields[3].trim().to_string(),
            });
        }
        let max_label = samples.iter().map(|s| s.class_label).max().unwrap_or(0);
        let classes = match declared {
            Some(c) if max_label > c => {
                return Err(Error::invalid(format!("label {max_label} out of range 1..={c}")))
            }
            Some(c) => c,
            None => max_label.max(1),
        };
        Self::new(classes, samples)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# classes={}", self.classes);
        let _ = writeln!(out, "# sample_id\tpath\tclass_label\tgroup_id");
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                s.sample_id,
                s.path.display(),
                s.class_label,
                s.group_id
            );
        }
        out
    }

    /// Resolves a sample path relative to the directory holding the manifest.
    pub fn resolve(&self, manifest_path: &Path, sample: &SampleMeta) -> PathBuf {
        if sample.path.is_absolute() {
            sample.path.clone()
        } else {
            manifest_path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join(&sample.path)
        }
    }
}

pub fn parse_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::parse(&text)
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, manifest.to_text()).map_err(|e| Error::io(path, e))
}
