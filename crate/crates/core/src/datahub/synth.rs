//! Synthetic untrimmed videos with foreground, informative background and
//! non-informative background segments.
//!
//! Every segment is a latent concept vector plus Gaussian noise:
//!
//! * foreground: the class concept, noise `noise_std`;
//! * informative BG: one of a shared pool of concepts, noise `noise_std`;
//! * non-informative BG: one of a few NBG concepts, noise `nbg_noise_std`,
//!   placed at the start and end of the video.
//!
//! Action and informative-BG concepts also share one common direction of
//! scale `informative_shared`, which non-informative BG lacks.
//!
//! A configurable share of novel classes take an informative-BG concept of
//! the base videos as their foreground, so what base training sees as
//! background is foreground at test time.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{entry_for, DatasetManifest, LoadedSplit, Split};
use super::{segf, Interval, SegmentFeatureSequence, SegmentRole};
use crate::error::{Error, Result};
use crate::numgrad::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptCounts {
    pub fg_per_class: usize,
    pub ibg: usize,
    pub nbg: usize,
}

impl Default for ConceptCounts {
    fn default() -> Self {
        Self {
            fg_per_class: 1,
            ibg: 16,
            nbg: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_base_classes: usize,
    pub n_novel_classes: usize,
    pub videos_per_class: usize,
    /// Segments per video (T).
    pub segments: usize,
    /// Raw feature dimension (d_in).
    pub feature_dim: usize,
    pub concepts: ConceptCounts,
    pub overlap_fraction: f64,
    pub noise_std: f64,
    pub nbg_noise_std: f64,
    /// Scale of a direction shared by every action and informative-BG
    /// concept and absent from non-informative BG.
    pub informative_shared: f64,
    pub seed: u64,
    /// Decides which action concepts become base vs novel classes.
    pub split_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_base_classes: 20,
            n_novel_classes: 10,
            videos_per_class: 30,
            segments: 20,
            feature_dim: 32,
            concepts: ConceptCounts::default(),
            overlap_fraction: 0.5,
            noise_std: 1.2,
            nbg_noise_std: 2.0,
            informative_shared: 4.0,
            seed: 7,
            split_seed: 11,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_base_classes", self.n_base_classes),
            ("n_novel_classes", self.n_novel_classes),
            ("videos_per_class", self.videos_per_class),
            ("segments", self.segments),
            ("feature_dim", self.feature_dim),
            ("concepts.fg_per_class", self.concepts.fg_per_class),
            ("concepts.ibg", self.concepts.ibg),
            ("concepts.nbg", self.concepts.nbg),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return Err(Error::Config(format!(
                "overlap_fraction must lie in [0, 1], got {}",
                self.overlap_fraction
            )));
        }
        if !(self.noise_std >= 0.0 && self.nbg_noise_std >= 0.0 && self.informative_shared >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        if self.overlapping_novel_classes() > self.concepts.ibg {
            return Err(Error::Config(format!(
                "{} overlapping novel classes need as many informative-BG concepts, have {}",
                self.overlapping_novel_classes(),
                self.concepts.ibg
            )));
        }
        Ok(())
    }

    /// ⌈overlap_fraction · n_novel_classes⌉.
    pub fn overlapping_novel_classes(&self) -> usize {
        let x = self.overlap_fraction * self.n_novel_classes as f64;
        // Absorb representation error such as 0.3 * 10 = 3.0000000000000004.
        (x - 1e-9).ceil().max(0.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub base: LoadedSplit,
    pub novel: LoadedSplit,
    /// Novel class labels whose foreground is a base informative-BG concept.
    pub overlap_classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticSummary {
    pub base_classes: usize,
    pub novel_classes: usize,
    pub base_videos: usize,
    pub novel_videos: usize,
    pub segments: usize,
    pub feature_dim: usize,
    pub overlap_classes: Vec<usize>,
}

impl SyntheticDataset {
    pub fn summary(&self) -> SyntheticSummary {
        SyntheticSummary {
            base_classes: self.base.manifest.class_labels.len(),
            novel_classes: self.novel.manifest.class_labels.len(),
            base_videos: self.base.sequences.len(),
            novel_videos: self.novel.sequences.len(),
            segments: self.config.segments,
            feature_dim: self.config.feature_dim,
            overlap_classes: self.overlap_classes.clone(),
        }
    }
}

struct ConceptPools {
    /// One group of `fg_per_class` vectors per action class, base and novel.
    actions: Vec<Vec<Vec<f64>>>,
    ibg: Vec<Vec<f64>>,
    nbg: Vec<Vec<f64>>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, std: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

pub fn generate_synthetic_dataset(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.feature_dim;
    let n_actions = cfg.n_base_classes + cfg.n_novel_classes;
    let mut pools = ConceptPools {
        actions: (0..n_actions)
            .map(|_| (0..cfg.concepts.fg_per_class).map(|_| gaussian_vec(&mut rng, d, 1.0)).collect())
            .collect(),
        ibg: (0..cfg.concepts.ibg).map(|_| gaussian_vec(&mut rng, d, 1.0)).collect(),
        nbg: (0..cfg.concepts.nbg).map(|_| gaussian_vec(&mut rng, d, 1.0)).collect(),
    };
    if cfg.informative_shared > 0.0 {
        let shared = gaussian_vec(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x51a3ed), d, cfg.informative_shared);
        for v in pools.actions.iter_mut().flatten().chain(pools.ibg.iter_mut()) {
            v.iter_mut().zip(&shared).for_each(|(x, s)| *x += s);
        }
    }

    let mut order: Vec<usize> = (0..n_actions).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.split_seed));
    let (base_slots, novel_slots) = order.split_at(cfg.n_base_classes);

    // Which novel classes borrow an informative-BG concept, and which one.
    let n_overlap = cfg.overlapping_novel_classes();
    let mut novel_pick: Vec<usize> = (0..cfg.n_novel_classes).collect();
    novel_pick.shuffle(&mut rng);
    let mut ibg_pick: Vec<usize> = (0..cfg.concepts.ibg).collect();
    ibg_pick.shuffle(&mut rng);
    let mut borrowed: Vec<Option<usize>> = vec![None; cfg.n_novel_classes];
    for (k, &c) in novel_pick.iter().take(n_overlap).enumerate() {
        borrowed[c] = Some(ibg_pick[k]);
    }

    let mut base = Vec::new();
    for (c, &slot) in base_slots.iter().enumerate() {
        let fg: Vec<&[f64]> = pools.actions[slot].iter().map(Vec::as_slice).collect();
        for v in 0..cfg.videos_per_class {
            let id = format!("base_{c:02}_{v:03}");
            base.push(synth_video(&mut rng, cfg, &pools, id, c, &fg, None));
        }
    }
    let mut novel = Vec::new();
    for (c, &slot) in novel_slots.iter().enumerate() {
        let label = cfg.n_base_classes + c;
        let fg: Vec<&[f64]> = match borrowed[c] {
            Some(i) => vec![pools.ibg[i].as_slice()],
            None => pools.actions[slot].iter().map(Vec::as_slice).collect(),
        };
        for v in 0..cfg.videos_per_class {
            let id = format!("novel_{c:02}_{v:03}");
            novel.push(synth_video(&mut rng, cfg, &pools, id, label, &fg, borrowed[c]));
        }
    }

    let base_labels: Vec<usize> = (0..cfg.n_base_classes).collect();
    let novel_labels: Vec<usize> = (cfg.n_base_classes..n_actions).collect();
    let overlap_classes = (0..cfg.n_novel_classes)
        .filter(|&c| borrowed[c].is_some())
        .map(|c| cfg.n_base_classes + c)
        .collect();
    Ok(SyntheticDataset {
        config: cfg.clone(),
        base: make_split(Split::Base, base_labels, base, "base"),
        novel: make_split(Split::Novel, novel_labels, novel, "novel"),
        overlap_classes,
    })
}

fn make_split(split: Split, labels: Vec<usize>, sequences: Vec<SegmentFeatureSequence>, dir: &str) -> LoadedSplit {
    let first = labels.first().copied().unwrap_or(0);
    let class_names = labels.iter().map(|l| format!("{dir}_{:02}", l - first)).collect();
    let entries = sequences
        .iter()
        .map(|s| entry_for(s, PathBuf::from(dir).join(format!("{}.segf", s.video_id))))
        .collect();
    LoadedSplit {
        manifest: DatasetManifest {
            split,
            class_labels: labels,
            class_names,
            entries,
        },
        sequences,
    }
}

fn synth_video(
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticConfig,
    pools: &ConceptPools,
    video_id: String,
    class_label: usize,
    fg: &[&[f64]],
    exclude_ibg: Option<usize>,
) -> SegmentFeatureSequence {
    let roles = layout(cfg.segments, rng);
    let ibg_choices: Vec<usize> = (0..pools.ibg.len()).filter(|&i| Some(i) != exclude_ibg).collect();
    let video_ibg: Vec<usize> = if ibg_choices.is_empty() {
        Vec::new()
    } else {
        ibg_choices.choose_multiple(rng, 2.min(ibg_choices.len())).copied().collect()
    };
    let video_nbg = rng.random_range(0..pools.nbg.len());

    let d = cfg.feature_dim;
    let mut data = Vec::with_capacity(cfg.segments * d);
    for &role in &roles {
        let (concept, std): (&[f64], f64) = match role {
            SegmentRole::Foreground => (fg[rng.random_range(0..fg.len())], cfg.noise_std),
            SegmentRole::InformativeBg if !video_ibg.is_empty() => {
                (&pools.ibg[video_ibg[rng.random_range(0..video_ibg.len())]], cfg.noise_std)
            }
            SegmentRole::InformativeBg | SegmentRole::NonInformativeBg => (&pools.nbg[video_nbg], cfg.nbg_noise_std),
        };
        for &c in concept {
            let z: f64 = StandardNormal.sample(rng);
            data.push(c + std * z);
        }
    }
    let mut features = Tensor::new(vec![cfg.segments, d], data).expect("shape matches");
    segf::quantize(&mut features);
    SegmentFeatureSequence {
        video_id,
        class_label,
        features,
        gt_intervals: foreground_runs(&roles),
        roles: Some(roles),
    }
}

pub(crate) fn foreground_runs(roles: &[SegmentRole]) -> Vec<Interval> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &r) in roles.iter().enumerate() {
        match (r == SegmentRole::Foreground, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(Interval::new(s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Interval::new(s, roles.len()));
    }
    out
}

/// Random composition of `total` into `parts` summands, each at least `min`.
fn composition(rng: &mut ChaCha8Rng, total: usize, parts: usize, min: usize) -> Vec<usize> {
    let mut out = vec![min; parts];
    for _ in 0..total - min * parts {
        let k = rng.random_range(0..parts);
        out[k] += 1;
    }
    out
}

/// Segment roles for one video: NBG at both ends, then 1–3 foreground runs
/// separated by informative background.
fn layout(t: usize, rng: &mut ChaCha8Rng) -> Vec<SegmentRole> {
    use SegmentRole::*;
    if t == 1 {
        return vec![Foreground];
    }
    let fg_lo = ((3 * t).div_ceil(10)).max(1);
    let fg_hi = (t / 2).max(fg_lo).min(t);
    let fg_total = rng.random_range(fg_lo..=fg_hi);
    let bg = t - fg_total;
    let mut n_nbg = (0.4 * bg as f64).round() as usize;
    if bg >= 3 {
        n_nbg = (n_nbg + rng.random_range(0..=2)).saturating_sub(1).min(bg);
    }
    let n_ibg = bg - n_nbg;
    let k_max = 3.min(fg_total).min(n_ibg + 1);
    let k = rng.random_range(1..=k_max);

    let fg_parts = composition(rng, fg_total, k, 1);
    // Inner gaps need at least one informative-BG segment.
    let mut gaps = composition(rng, n_ibg - (k - 1), k + 1, 0);
    gaps[1..k].iter_mut().for_each(|g| *g += 1);
    let prefix = rng.random_range(0..=n_nbg);

    let mut roles = Vec::with_capacity(t);
    roles.extend(std::iter::repeat_n(NonInformativeBg, prefix));
    for i in 0..k {
        roles.extend(std::iter::repeat_n(InformativeBg, gaps[i]));
        roles.extend(std::iter::repeat_n(Foreground, fg_parts[i]));
    }
    roles.extend(std::iter::repeat_n(InformativeBg, gaps[k]));
    roles.extend(std::iter::repeat_n(NonInformativeBg, n_nbg - prefix));
    debug_assert_eq!(roles.len(), t);
    roles
}

/// Writes `<dir>/base.jsonl`, `<dir>/novel.jsonl`, the SEGF files under
/// `<dir>/base/` and `<dir>/novel/`, and `<dir>/generator.json`.
pub fn write_synthetic_dataset(ds: &SyntheticDataset, dir: &Path) -> Result<()> {
    for split in [&ds.base, &ds.novel] {
        for (seq, entry) in split.sequences.iter().zip(&split.manifest.entries) {
            segf::write_feature_file(&seq.features, &dir.join(&entry.feature_file))?;
        }
        split
            .manifest
            .write(&dir.join(format!("{}.jsonl", split.manifest.split)))?;
    }
    #[derive(Serialize)]
    struct Meta<'a> {
        config: &'a SyntheticConfig,
        overlap_classes: &'a [usize],
    }
    let meta = serde_json::to_string_pretty(&Meta {
        config: &ds.config,
        overlap_classes: &ds.overlap_classes,
    })
    .expect("metadata serializes");
    let path = dir.join("generator.json");
    fs::write(&path, meta + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datahub::validate_intervals;
    use proptest::prelude::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n_base_classes: 4,
            n_novel_classes: 3,
            videos_per_class: 5,
            segments: 12,
            feature_dim: 6,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn desk_scale_counts() {
        let cfg = SyntheticConfig {
            segments: 20,
            videos_per_class: 30,
            n_base_classes: 20,
            n_novel_classes: 10,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(ds.base.manifest.entries.len(), 600);
        assert_eq!(ds.novel.manifest.entries.len(), 300);
        assert_eq!(ds.overlap_classes.len(), 5);
        ds.base.manifest.check_disjoint(&ds.novel.manifest).unwrap();
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic_dataset(&small()).unwrap();
        let b = generate_synthetic_dataset(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&SyntheticConfig { seed: 99, ..small() }).unwrap();
        assert_ne!(a.base.sequences, c.base.sequences);
    }

    #[test]
    fn zero_overlap_keeps_novel_fg_out_of_ibg_pool() {
        let cfg = SyntheticConfig {
            overlap_fraction: 0.0,
            noise_std: 0.0,
            ..small()
        };
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        assert!(ds.overlap_classes.is_empty());
        let ibg_rows: Vec<Vec<u64>> = ds
            .base
            .sequences
            .iter()
            .flat_map(|s| {
                let roles = s.roles.clone().unwrap();
                (0..s.num_segments())
                    .filter(move |&i| roles[i] == SegmentRole::InformativeBg)
                    .map(move |i| s.features.row(i).iter().map(|v| v.to_bits()).collect())
            })
            .collect();
        for s in &ds.novel.sequences {
            for iv in &s.gt_intervals {
                for i in iv.start..iv.end {
                    let row: Vec<u64> = s.features.row(i).iter().map(|v| v.to_bits()).collect();
                    assert!(!ibg_rows.contains(&row));
                }
            }
        }
    }

    #[test]
    fn overlap_count_is_ceiling() {
        for (frac, n, want) in [(0.5, 10, 5), (0.3, 10, 3), (0.31, 10, 4), (1.0, 7, 7), (0.01, 3, 1)] {
            let cfg = SyntheticConfig {
                overlap_fraction: frac,
                n_novel_classes: n,
                ..SyntheticConfig::default()
            };
            assert_eq!(cfg.overlapping_novel_classes(), want, "{frac} * {n}");
        }
    }

    #[test]
    fn overlapping_classes_share_ibg_concept() {
        let cfg = SyntheticConfig {
            noise_std: 0.0,
            overlap_fraction: 1.0,
            ..small()
        };
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(ds.overlap_classes, vec![4, 5, 6]);
        let base_ibg: Vec<&[f64]> = ds
            .base
            .sequences
            .iter()
            .flat_map(|s| {
                let roles = s.roles.as_ref().unwrap();
                (0..s.num_segments())
                    .filter(|&i| roles[i] == SegmentRole::InformativeBg)
                    .map(|i| s.features.row(i))
                    .collect::<Vec<_>>()
            })
            .collect();
        for s in &ds.novel.sequences {
            let fg = s.features.row(s.gt_intervals[0].start);
            assert!(base_ibg.contains(&fg));
        }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate_synthetic_dataset(&SyntheticConfig { overlap_fraction: 1.5, ..small() }).is_err());
        assert!(generate_synthetic_dataset(&SyntheticConfig { segments: 0, ..small() }).is_err());
        let cfg = SyntheticConfig {
            concepts: ConceptCounts { ibg: 2, ..ConceptCounts::default() },
            overlap_fraction: 1.0,
            ..small()
        };
        assert!(generate_synthetic_dataset(&cfg).is_err());
    }

    #[test]
    fn written_tree_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic_dataset(&small()).unwrap();
        write_synthetic_dataset(&ds, dir.path()).unwrap();
        let base = LoadedSplit::open(&dir.path().join("base.jsonl")).unwrap();
        let novel = LoadedSplit::open(&dir.path().join("novel.jsonl")).unwrap();
        assert_eq!(base, ds.base);
        assert_eq!(novel, ds.novel);
        assert!(dir.path().join("generator.json").exists());
    }

    proptest! {
        #[test]
        fn layout_partitions_every_video(t in 1usize..60, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let roles = layout(t, &mut rng);
            prop_assert_eq!(roles.len(), t);
            let runs = foreground_runs(&roles);
            prop_assert!((1..=3).contains(&runs.len()));
            prop_assert!(validate_intervals(&runs, t).is_ok());
            let covered: usize = runs.iter().map(Interval::len).sum();
            let fg = roles.iter().filter(|r| **r == SegmentRole::Foreground).count();
            prop_assert_eq!(covered, fg);
        }
    }
}
