//! Episodic evaluation on novel classes.
//!
//! Support videos become cosine prototypes; each query is aggregated with the
//! trained weighting and classified by similarity to the prototypes. For
//! detection the same weights scale a per-segment class activation map from
//! which proposals are cut.

mod detection;

pub use detection::{
    average_precision, default_thresholds, extract_proposals, nms, tcam, temporal_iou, tiou_thresholds,
    DetectionResult, GroundTruth,
};

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datahub::{sample_episode, Episode, LoadedSplit};
use crate::error::{Error, Result};
use crate::losses::{aggregate_video_feature, self_weight, LossConfig};
use crate::model::ModelParams;
use crate::numgrad::Tensor;
use crate::pseudo::pseudo_label_bg;

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    /// Episode-local class index.
    pub class: usize,
    /// Unit norm, or all zeros when `degenerate`.
    pub vector: Vec<f64>,
    pub degenerate: bool,
}

fn mean_rows(f: &Tensor) -> Vec<f64> {
    let mut m = vec![0.0; f.cols()];
    for i in 0..f.rows() {
        for (a, b) in m.iter_mut().zip(f.row(i)) {
            *a += b;
        }
    }
    let t = f.rows().max(1) as f64;
    m.iter_mut().for_each(|x| *x /= t);
    m
}

/// Per class: mean over videos of the per-video segment mean, then L2
/// normalized. `embedded[i]` belongs to class `labels[i] < way`.
pub fn compute_prototypes(embedded: &[Tensor], labels: &[usize], way: usize) -> Result<Vec<Prototype>> {
    if embedded.len() != labels.len() {
        return Err(Error::Data("support features and labels differ in length".into()));
    }
    let dim = embedded.first().map(|f| f.cols()).unwrap_or(0);
    let mut sums = vec![vec![0.0; dim]; way];
    let mut counts = vec![0usize; way];
    for (f, &y) in embedded.iter().zip(labels) {
        if y >= way {
            return Err(Error::Data(format!("support label {y} out of range for {way}-way episode")));
        }
        if f.rows() == 0 {
            return Err(Error::Data("empty support video".into()));
        }
        for (s, m) in sums[y].iter_mut().zip(mean_rows(f)) {
            *s += m;
        }
        counts[y] += 1;
    }
    let mut out = Vec::with_capacity(way);
    for (class, (mut v, n)) in sums.into_iter().zip(counts).enumerate() {
        if n == 0 {
            return Err(Error::Data(format!("class {class} has no support videos")));
        }
        v.iter_mut().for_each(|x| *x /= n as f64);
        let norm = Tensor::norm(&v);
        let degenerate = norm < 1e-12;
        if degenerate {
            v.iter_mut().for_each(|x| *x = 0.0);
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        out.push(Prototype {
            class,
            vector: v,
            degenerate,
        });
    }
    Ok(out)
}

/// Cosine similarity; 0 if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = Tensor::norm(a);
    let nb = Tensor::norm(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        Tensor::dot(a, b) / (na * nb)
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub probs: Vec<f64>,
    /// Classes with probability above `t_a`.
    pub predicted_set: Vec<usize>,
    pub top1: usize,
}

/// Softmax over similarities, thresholded set and argmax.
pub fn classify_similarities(sims: &[f64], t_a: f64) -> Classification {
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let predicted_set = (0..probs.len()).filter(|&k| probs[k] > t_a).collect();
    let top1 = argmax_first(sims);
    Classification {
        probs,
        predicted_set,
        top1,
    }
}

/// `T×K` cosine logits of unit-norm segment features against prototypes.
pub fn prototype_logits(f: &Tensor, prototypes: &[Prototype]) -> Tensor {
    let k = prototypes.len();
    let mut out = Tensor::zeros(&[f.rows(), k]);
    for i in 0..f.rows() {
        for (c, p) in prototypes.iter().enumerate() {
            out.data_mut()[i * k + c] = Tensor::dot(f.row(i), &p.vector);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Classification,
    Detection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: usize,
    pub seed: u64,
    /// Threshold of the multi-label predicted set; accuracy uses argmax.
    pub t_a: f64,
    /// Relative proposal thresholds.
    pub thresholds: Vec<f64>,
    /// Worker threads; 1 evaluates sequentially.
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 1,
            queries: 5,
            episodes: 300,
            seed: 2024,
            t_a: 0.5,
            thresholds: default_thresholds(),
            jobs: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.way == 0 || self.shot == 0 || self.queries == 0 || self.episodes == 0 {
            return Err(Error::Config("K, n, q and episodes must all be at least 1".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::Config("proposal thresholds must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Seed of episode `i` under a run seed.
pub fn episode_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64)
}

/// Episode `i` of an evaluation run.
pub fn sample_eval_episode(split: &LoadedSplit, cfg: &EvalConfig, i: usize) -> Result<Episode> {
    sample_episode(split, cfg.way, cfg.shot, cfg.queries, episode_seed(cfg.seed, i))
}

/// A frozen model plus the weighting it was trained with.
#[derive(Debug, Clone, Copy)]
pub struct Evaluator<'a> {
    pub params: &'a ModelParams,
    pub loss: &'a LossConfig,
    pub t_a: f64,
}

/// Embedded query with its segment weights and prototype logits.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryView {
    pub features: Tensor,
    pub logits: Tensor,
    pub i_bg: usize,
    pub weights: Vec<f64>,
}

impl Evaluator<'_> {
    pub fn prototypes(&self, episode: &Episode) -> Result<Vec<Prototype>> {
        let embedded = episode
            .support
            .iter()
            .map(|s| self.params.embed_segments(&s.features))
            .collect::<Result<Vec<_>>>()?;
        compute_prototypes(&embedded, &episode.support_labels, episode.way)
    }

    /// Embeds a query and weights its segments: self-weighting around the
    /// least confident segment for models trained with it, otherwise the
    /// attention network or a uniform mean.
    pub fn view(&self, raw: &Tensor, prototypes: &[Prototype]) -> Result<QueryView> {
        let features = self.params.embed_segments(raw)?;
        let logits = prototype_logits(&features, prototypes);
        let i_bg = pseudo_label_bg(&logits);
        let ab = self.loss.ablation;
        let weights = if ab.sw {
            self_weight(&features, i_bg, self.loss.tau_s, self.loss.c)
        } else if ab.soft {
            self.params.baseline_attention(&features)?
        } else {
            vec![1.0; features.rows()]
        };
        Ok(QueryView {
            features,
            logits,
            i_bg,
            weights,
        })
    }

    pub fn classify(&self, raw: &Tensor, prototypes: &[Prototype]) -> Result<Classification> {
        let v = self.view(raw, prototypes)?;
        let video = aggregate_video_feature(&v.features, &v.weights)?;
        let sims: Vec<f64> = prototypes.iter().map(|p| cosine(&video, &p.vector)).collect();
        Ok(classify_similarities(&sims, self.t_a))
    }

    pub fn episode_accuracy(&self, episode: &Episode) -> Result<f64> {
        let protos = self.prototypes(episode)?;
        let mut correct = 0;
        for (q, &y) in episode.queries.iter().zip(&episode.query_labels) {
            if self.classify(&q.features, &protos)?.top1 == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / episode.queries.len().max(1) as f64)
    }

    /// Activation map of every query: `(video_id, A)`.
    pub fn episode_tcams(&self, episode: &Episode) -> Result<Vec<(String, Tensor)>> {
        let protos = self.prototypes(episode)?;
        episode
            .queries
            .iter()
            .map(|q| {
                let v = self.view(&q.features, &protos)?;
                Ok((q.video_id.clone(), tcam(&v.features, &v.weights, &protos)))
            })
            .collect()
    }

    /// Macro mAP over the episode's classes at each tIoU threshold.
    pub fn episode_map(&self, episode: &Episode, thresholds: &[f64], tious: &[f64]) -> Result<Vec<f64>> {
        let mut detections = Vec::new();
        for (id, a) in self.episode_tcams(episode)? {
            detections.extend(extract_proposals(&id, &a, thresholds));
        }
        Ok(episode_map_from(&detections, episode, tious))
    }
}

/// Macro mAP of episode-local detections at each tIoU threshold; classes
/// without ground truth are skipped.
pub fn episode_map_from(detections: &[DetectionResult], episode: &Episode, tious: &[f64]) -> Vec<f64> {
    let mut per_class = Vec::with_capacity(episode.way);
    for k in 0..episode.way {
        let dets: Vec<DetectionResult> = detections.iter().filter(|d| d.class == k).cloned().collect();
        let truths: Vec<GroundTruth> = episode
            .queries
            .iter()
            .zip(&episode.query_labels)
            .filter(|(_, &y)| y == k)
            .flat_map(|(q, _)| {
                q.gt_intervals.iter().map(|&iv| GroundTruth {
                    video_id: q.video_id.clone(),
                    interval: iv,
                })
            })
            .collect();
        per_class.push((dets, truths));
    }
    tious
        .iter()
        .map(|&thr| {
            let aps: Vec<f64> = per_class
                .iter()
                .filter_map(|(d, t)| average_precision(d, t, thr))
                .collect();
            if aps.is_empty() {
                0.0
            } else {
                aps.iter().sum::<f64>() / aps.len() as f64
            }
        })
        .collect()
}

/// Mean and 95% half-width `1.96·s/√E` with the sample standard deviation
/// (zero for a single value).
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    // Offsetting by the first value keeps constant inputs exact.
    let v0 = values[0];
    let mean = v0 + values.iter().map(|v| v - v0).sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRow {
    pub episode: usize,
    pub seed: u64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub name: String,
    pub mean: f64,
    pub ci: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub columns: Vec<String>,
    pub rows: Vec<EpisodeRow>,
    pub summary: Vec<MetricSummary>,
}

impl EvalReport {
    fn from_rows(mode: EvalMode, columns: Vec<String>, rows: Vec<EpisodeRow>, summarize: &[(usize, &str)]) -> Self {
        let summary = summarize
            .iter()
            .map(|&(col, name)| {
                let vals: Vec<f64> = rows.iter().map(|r| r.values[col]).collect();
                let (mean, ci) = mean_ci(&vals);
                MetricSummary {
                    name: name.to_string(),
                    mean,
                    ci,
                }
            })
            .collect();
        Self {
            mode,
            columns,
            rows,
            summary,
        }
    }

    /// Per-episode rows at full precision.
    pub fn csv(&self) -> String {
        let mut out = format!("episode,seed,{}\n", self.columns.join(","));
        for r in &self.rows {
            let vals: Vec<String> = r.values.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{},{},{}", r.episode, r.seed, vals.join(",")).unwrap();
        }
        out
    }

    /// `name: mean ± ci` in percent, two decimals.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for s in &self.summary {
            writeln!(out, "{}: {:.2} ± {:.2}", s.name, 100.0 * s.mean, 100.0 * s.ci).unwrap();
        }
        out
    }

    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.summary.iter().find(|s| s.name == name)
    }
}

fn run_episodes<T: Send>(cfg: &EvalConfig, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    if cfg.jobs <= 1 {
        return (0..cfg.episodes).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", cfg.jobs)))?;
    // Indexed collect keeps episode order regardless of scheduling.
    pool.install(|| (0..cfg.episodes).into_par_iter().map(f).collect())
}

/// Samples `cfg.episodes` episodes from `split` and scores them.
pub fn evaluate(split: &LoadedSplit, evaluator: &Evaluator<'_>, cfg: &EvalConfig, mode: EvalMode) -> Result<EvalReport> {
    cfg.validate()?;
    let tious = tiou_thresholds();
    let rows = run_episodes(cfg, |i| {
        let seed = episode_seed(cfg.seed, i);
        let ep = sample_eval_episode(split, cfg, i)?;
        let values = match mode {
            EvalMode::Classification => vec![evaluator.episode_accuracy(&ep)?],
            EvalMode::Detection => {
                let maps = evaluator.episode_map(&ep, &cfg.thresholds, &tious)?;
                let avg = maps.iter().sum::<f64>() / maps.len() as f64;
                let mut v = maps;
                v.push(avg);
                v
            }
        };
        Ok(EpisodeRow {
            episode: i,
            seed,
            values,
        })
    })?;
    Ok(match mode {
        EvalMode::Classification => {
            EvalReport::from_rows(mode, vec!["accuracy".into()], rows, &[(0, "accuracy")])
        }
        EvalMode::Detection => {
            let mut columns: Vec<String> = tious.iter().map(|t| format!("map_{t:.2}")).collect();
            columns.push("avg_map".into());
            EvalReport::from_rows(mode, columns, rows, &[(0, "mAP@0.5"), (tious.len(), "average mAP")])
        }
    })
}

/// Long-format activation maps: `video_id,segment,class,activation`.
pub fn tcam_csv(maps: &[(String, Tensor)]) -> String {
    let mut out = String::from("video_id,segment,class,activation\n");
    for (id, a) in maps {
        for i in 0..a.rows() {
            for k in 0..a.cols() {
                writeln!(out, "{id},{i},{k},{:?}", a.get(i, k)).unwrap();
            }
        }
    }
    out
}
