//! Manifest files: JSON Lines, one header record followed by one record per
//! video.
//!
//! ```text
//! {"split":"base","class_labels":[0,1],"class_names":["base_00","base_01"]}
//! {"video_id":"base_00_000","class_label":0,"feature_file":"base/base_00_000.segf","gt_intervals":[[3,9]],"roles":"NNNFFFFFFII"}
//! ```
//!
//! `feature_file` is relative to the manifest's directory. `roles` is
//! optional and carries the generator's per-segment F/I/N labels.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{segf, validate_intervals, Interval, SegmentFeatureSequence, SegmentRole};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Novel,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Base => "base",
            Split::Novel => "novel",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Split::Base),
            "novel" => Ok(Split::Novel),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    split: Split,
    class_labels: Vec<usize>,
    class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub video_id: String,
    pub class_label: usize,
    pub feature_file: PathBuf,
    pub gt_intervals: Vec<Interval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roles: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub split: Split,
    /// Class labels of this split; parallel to `class_names`.
    pub class_labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn to_jsonl(&self) -> String {
        let header = Header {
            split: self.split,
            class_labels: self.class_labels.clone(),
            class_names: self.class_names.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hl, header_line) = lines.next().ok_or_else(|| err(1, "empty manifest".into()))?;
        let header: Header = serde_json::from_str(header_line).map_err(|e| err(hl + 1, e.to_string()))?;
        if header.class_labels.len() != header.class_names.len() {
            return Err(err(hl + 1, "class_labels and class_names differ in length".into()));
        }
        let known: BTreeSet<usize> = header.class_labels.iter().copied().collect();
        let mut entries = Vec::new();
        for (i, line) in lines {
            let e: ManifestEntry = serde_json::from_str(line).map_err(|e| err(i + 1, e.to_string()))?;
            if !known.contains(&e.class_label) {
                return Err(err(i + 1, format!("class label {} not declared in header", e.class_label)));
            }
            if let Some(r) = &e.roles {
                if let Some(c) = r.chars().find(|&c| SegmentRole::from_code(c).is_none()) {
                    return Err(err(i + 1, format!("unknown role code {c:?}")));
                }
            }
            entries.push(e);
        }
        Ok(Self {
            split: header.split,
            class_labels: header.class_labels,
            class_names: header.class_names,
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    /// Fails if the two manifests share a class label.
    pub fn check_disjoint(&self, other: &DatasetManifest) -> Result<()> {
        let mine: BTreeSet<_> = self.class_labels.iter().collect();
        if let Some(shared) = other.class_labels.iter().find(|l| mine.contains(l)) {
            return Err(Error::Data(format!(
                "class {shared} appears in both {} and {} splits",
                self.split, other.split
            )));
        }
        Ok(())
    }

    /// Reads every feature file, resolving paths against `root`.
    pub fn load(&self, root: &Path) -> Result<LoadedSplit> {
        let mut sequences = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let features = segf::read_feature_file(&root.join(&e.feature_file))?;
            let roles = e
                .roles
                .as_ref()
                .map(|r| r.chars().filter_map(SegmentRole::from_code).collect());
            let seq = SegmentFeatureSequence {
                video_id: e.video_id.clone(),
                class_label: e.class_label,
                features,
                gt_intervals: e.gt_intervals.clone(),
                roles,
            };
            seq.validate()?;
            sequences.push(seq);
        }
        Ok(LoadedSplit {
            manifest: self.clone(),
            sequences,
        })
    }
}

/// A manifest together with its feature matrices, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSplit {
    pub manifest: DatasetManifest,
    pub sequences: Vec<SegmentFeatureSequence>,
}

impl LoadedSplit {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        manifest.load(root)
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.sequences.first().map(|s| s.feature_dim())
    }

    pub fn class_labels(&self) -> &[usize] {
        &self.manifest.class_labels
    }
}

pub(super) fn entry_for(seq: &SegmentFeatureSequence, feature_file: PathBuf) -> ManifestEntry {
    debug_assert!(validate_intervals(&seq.gt_intervals, seq.num_segments()).is_ok());
    ManifestEntry {
        video_id: seq.video_id.clone(),
        class_label: seq.class_label,
        feature_file,
        gt_intervals: seq.gt_intervals.clone(),
        roles: seq.roles.as_ref().map(|r| r.iter().map(|x| x.code()).collect()),
    }
}
