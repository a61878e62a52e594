//! Videos as segment-feature sequences: file I/O, manifests, the synthetic
//! generator and episodic sampling.

mod episode;
mod manifest;
pub mod segf;
mod synth;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use episode::{sample_episode, Episode};
pub use manifest::{DatasetManifest, LoadedSplit, ManifestEntry, Split};
pub use segf::{read_feature_file, write_feature_file};
pub use synth::{
    generate_synthetic_dataset, write_synthetic_dataset, ConceptCounts, SyntheticConfig, SyntheticDataset,
    SyntheticSummary,
};

use crate::error::{Error, Result};
use crate::numgrad::Tensor;

/// Half-open range of segment indices `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Interval {
    pub start: usize,
    pub end: usize,
}

impl Interval {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

impl From<(usize, usize)> for Interval {
    fn from((start, end): (usize, usize)) -> Self {
        Self { start, end }
    }
}

impl From<Interval> for (usize, usize) {
    fn from(i: Interval) -> Self {
        (i.start, i.end)
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// Generator ground truth for a segment. Not available for real data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SegmentRole {
    Foreground,
    InformativeBg,
    NonInformativeBg,
}

impl SegmentRole {
    pub fn code(self) -> char {
        match self {
            SegmentRole::Foreground => 'F',
            SegmentRole::InformativeBg => 'I',
            SegmentRole::NonInformativeBg => 'N',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        match c {
            'F' => Some(SegmentRole::Foreground),
            'I' => Some(SegmentRole::InformativeBg),
            'N' => Some(SegmentRole::NonInformativeBg),
            _ => None,
        }
    }
}

/// One untrimmed (or trimmed) video as `T` rows of raw segment features.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentFeatureSequence {
    pub video_id: String,
    pub class_label: usize,
    /// `T×d_in`.
    pub features: Tensor,
    pub gt_intervals: Vec<Interval>,
    /// Per-segment generator roles, when known.
    pub roles: Option<Vec<SegmentRole>>,
}

impl SegmentFeatureSequence {
    pub fn num_segments(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.num_segments();
        if !self.features.is_matrix() {
            return Err(Error::Data(format!("{}: features must be a matrix", self.video_id)));
        }
        if !self.features.all_finite() {
            return Err(Error::Data(format!("{}: non-finite features", self.video_id)));
        }
        validate_intervals(&self.gt_intervals, t).map_err(|m| Error::Data(format!("{}: {m}", self.video_id)))?;
        if let Some(roles) = &self.roles {
            if roles.len() != t {
                return Err(Error::Data(format!("{}: {} roles for {t} segments", self.video_id, roles.len())));
            }
        }
        Ok(())
    }
}

pub(crate) fn validate_intervals(intervals: &[Interval], t: usize) -> Result<(), String> {
    let mut prev_end = 0;
    for (i, iv) in intervals.iter().enumerate() {
        if iv.start >= iv.end || iv.end > t {
            return Err(format!("interval {iv} outside 0..{t} or empty"));
        }
        if i > 0 && iv.start < prev_end {
            return Err(format!("interval {iv} overlaps or is out of order"));
        }
        prev_end = iv.end;
    }
    Ok(())
}

/// Keeps only the annotated foreground segments, concatenated in order.
pub fn trim_support_video(seq: &SegmentFeatureSequence) -> Result<SegmentFeatureSequence> {
    if seq.gt_intervals.is_empty() {
        return Err(Error::Data(format!(
            "{}: support videos need temporal annotation to be trimmed",
            seq.video_id
        )));
    }
    let rows: Vec<usize> = seq.gt_intervals.iter().flat_map(|iv| iv.start..iv.end).collect();
    let features = seq.features.select_rows(&rows)?;
    let roles = seq
        .roles
        .as_ref()
        .map(|r| rows.iter().map(|&i| r[i]).collect());
    Ok(SegmentFeatureSequence {
        video_id: seq.video_id.clone(),
        class_label: seq.class_label,
        gt_intervals: vec![Interval::new(0, rows.len())],
        features,
        roles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(t: usize, gt: &[(usize, usize)]) -> SegmentFeatureSequence {
        SegmentFeatureSequence {
            video_id: "v".into(),
            class_label: 0,
            features: Tensor::new(vec![t, 2], (0..2 * t).map(|i| i as f64).collect()).unwrap(),
            gt_intervals: gt.iter().map(|&p| p.into()).collect(),
            roles: None,
        }
    }

    #[test]
    fn trim_single_interval() {
        let out = trim_support_video(&seq(10, &[(2, 5)])).unwrap();
        assert_eq!(out.num_segments(), 3);
        assert_eq!(out.features.row(0), seq(10, &[]).features.row(2));
        assert_eq!(out.features.row(2), seq(10, &[]).features.row(4));
        assert_eq!(out.gt_intervals, vec![Interval::new(0, 3)]);
    }

    #[test]
    fn trim_full_interval_is_identity() {
        let s = seq(10, &[(0, 10)]);
        assert_eq!(trim_support_video(&s).unwrap(), s);
    }

    #[test]
    fn trim_two_intervals() {
        let full = seq(10, &[(1, 3), (7, 9)]);
        let out = trim_support_video(&full).unwrap();
        assert_eq!(out.num_segments(), 4);
        for (k, src) in [1, 2, 7, 8].into_iter().enumerate() {
            assert_eq!(out.features.row(k), full.features.row(src));
        }
        assert_eq!(out.gt_intervals, vec![Interval::new(0, 4)]);
    }

    #[test]
    fn trim_requires_annotation() {
        assert!(trim_support_video(&seq(4, &[])).is_err());
    }

    #[test]
    fn interval_validation() {
        assert!(validate_intervals(&[Interval::new(0, 2), Interval::new(2, 4)], 4).is_ok());
        assert!(validate_intervals(&[Interval::new(1, 1)], 4).is_err());
        assert!(validate_intervals(&[Interval::new(0, 5)], 4).is_err());
        assert!(validate_intervals(&[Interval::new(2, 3), Interval::new(0, 1)], 4).is_err());
        assert!(validate_intervals(&[Interval::new(0, 3), Interval::new(2, 4)], 4).is_err());
    }
}
