use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{trim_support_video, LoadedSplit, SegmentFeatureSequence};
use crate::error::{Error, Result};

/// One K-way n-shot task: trimmed support videos and untrimmed queries.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    /// Global class label of each episode class; index = episode-local label.
    pub class_remap: Vec<usize>,
    /// `way·shot` trimmed videos, grouped by local class.
    pub support: Vec<SegmentFeatureSequence>,
    pub support_labels: Vec<usize>,
    /// `way·queries_per_class` untrimmed videos, grouped by local class.
    pub queries: Vec<SegmentFeatureSequence>,
    pub query_labels: Vec<usize>,
}

/// Samples `way` classes, then `shot + queries` distinct videos per class.
/// Deterministic in `seed`.
pub fn sample_episode(split: &LoadedSplit, way: usize, shot: usize, queries: usize, seed: u64) -> Result<Episode> {
    if way == 0 || shot == 0 {
        return Err(Error::Config("episodes need way >= 1 and shot >= 1".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = split
        .manifest
        .class_labels
        .iter()
        .map(|&c| (c, Vec::new()))
        .collect();
    for (i, s) in split.sequences.iter().enumerate() {
        by_class.entry(s.class_label).or_default().push(i);
    }
    let classes: Vec<usize> = by_class.keys().copied().collect();
    if way > classes.len() {
        return Err(Error::Data(format!(
            "{way}-way episode requested but the split has {} classes",
            classes.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<usize> = index::sample(&mut rng, classes.len(), way)
        .into_iter()
        .map(|i| classes[i])
        .collect();

    let mut ep = Episode {
        way,
        shot,
        queries_per_class: queries,
        class_remap: chosen.clone(),
        support: Vec::with_capacity(way * shot),
        support_labels: Vec::with_capacity(way * shot),
        queries: Vec::with_capacity(way * queries),
        query_labels: Vec::with_capacity(way * queries),
    };
    for (local, class) in chosen.iter().enumerate() {
        let pool = &by_class[class];
        let needed = shot + queries;
        if pool.len() < needed {
            return Err(Error::InsufficientVideos {
                class: *class,
                needed,
                available: pool.len(),
            });
        }
        let picks = index::sample(&mut rng, pool.len(), needed).into_vec();
        for &p in &picks[..shot] {
            ep.support.push(trim_support_video(&split.sequences[pool[p]])?);
            ep.support_labels.push(local);
        }
        for &p in &picks[shot..] {
            ep.queries.push(split.sequences[pool[p]].clone());
            ep.query_labels.push(local);
        }
    }
    Ok(ep)
}
