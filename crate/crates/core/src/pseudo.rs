//! Background pseudo-labeling from classifier confidence.
//!
//! The segment whose largest base-class logit is smallest is taken as the
//! video's background; if even that logit is below `t_n` the segment is
//! treated as non-informative background (NBG). The `M` most confident
//! segments stand in for foreground plus informative background.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datahub::LoadedSplit;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numgrad::Tensor;

/// How per-segment confidence is read off the logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Largest raw cosine logit.
    Logit,
    /// Largest entry of `softmax(tau · logits)`.
    Probability,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoConfig {
    pub t_n: f64,
    /// Size of the FG+IBG set; `None` means `max(2, ⌈T/8⌉)`.
    pub m: Option<usize>,
    pub mode: ScoreMode,
    /// Temperature used in probability mode.
    pub tau: f64,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self {
            t_n: 0.25,
            m: None,
            mode: ScoreMode::Logit,
            tau: 10.0,
        }
    }
}

impl PseudoConfig {
    /// FG+IBG count for a video of `t` segments, clamped to `t - 1`.
    pub fn m_for(&self, t: usize) -> usize {
        let m = self.m.unwrap_or_else(|| 2.max(t.div_ceil(8)));
        m.min(t.saturating_sub(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelRecord {
    pub i_bg: usize,
    pub is_nbg: bool,
    /// Ascending segment indices.
    pub fg_ibg_indices: Vec<usize>,
    pub max_logits: Vec<f64>,
}

/// Row-wise maximum of a `T×N` logit matrix.
pub fn max_logits(logits: &Tensor) -> Vec<f64> {
    (0..logits.rows())
        .map(|i| logits.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Per-segment confidence under `mode`.
pub fn segment_confidence(logits: &Tensor, mode: ScoreMode, tau: f64) -> Result<Vec<f64>> {
    match mode {
        ScoreMode::Logit => Ok(max_logits(logits)),
        ScoreMode::Probability => Ok(max_logits(&logits.map(|x| tau * x).softmax(1)?)),
    }
}

/// Index of the smallest score; ties go to the lowest index.
pub fn argmin_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s < scores[best] {
            best = i;
        }
    }
    best
}

/// `argmin_k max_c logits[k, c]`, lowest index on ties.
pub fn pseudo_label_bg(logits: &Tensor) -> usize {
    argmin_first(&max_logits(logits))
}

/// True iff the background segment's max logit is below `t_n`.
pub fn filter_nbg(i_bg: usize, logits: &Tensor, t_n: f64) -> bool {
    let max = logits.row(i_bg).iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max < t_n
}

/// The `m` highest scores among `candidates`, ties to the lower index,
/// returned in ascending index order.
pub fn top_m(scores: &[f64], candidates: impl Iterator<Item = usize>, m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = candidates.collect();
    idx.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    idx.truncate(m);
    idx.sort_unstable();
    idx
}

/// Indices of the `m` largest per-segment max logits.
pub fn select_fg_ibg(logits: &Tensor, m: usize) -> Result<Vec<usize>> {
    let t = logits.rows();
    if m == 0 || m >= t {
        return Err(Error::Config(format!("FG+IBG count {m} must lie in 1..={}", t.saturating_sub(1))));
    }
    Ok(top_m(&max_logits(logits), 0..t, m))
}

/// Full pseudo-label for one video from its `T×N` base-class logits.
///
/// The FG+IBG set is chosen among segments other than `i_bg`, which only
/// matters when several segments tie for the minimum.
pub fn pseudo_label(logits: &Tensor, cfg: &PseudoConfig) -> Result<PseudoLabelRecord> {
    let t = logits.rows();
    if t == 0 {
        return Err(Error::Data("cannot pseudo-label an empty video".into()));
    }
    let scores = segment_confidence(logits, cfg.mode, cfg.tau)?;
    let i_bg = argmin_first(&scores);
    let is_nbg = scores[i_bg] < cfg.t_n;
    let fg_ibg_indices = top_m(&scores, (0..t).filter(|&i| i != i_bg), cfg.m_for(t));
    Ok(PseudoLabelRecord {
        i_bg,
        is_nbg,
        fg_ibg_indices,
        max_logits: max_logits(logits),
    })
}

/// One line of the inspection CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct InspectRow {
    pub video_id: String,
    pub segment: usize,
    pub max_logit: f64,
    pub role: &'static str,
    /// Generator role code (`F`, `I`, `N`) when the manifest carries roles.
    pub true_role: Option<char>,
}

/// Pseudo-labels every video of `split` with the trained model.
pub fn inspect_split(params: &ModelParams, split: &LoadedSplit, cfg: &PseudoConfig) -> Result<Vec<InspectRow>> {
    let mut rows = Vec::new();
    for seq in &split.sequences {
        let f = params.embed_segments(&seq.features)?;
        let logits = params.segment_logits(&f, false)?;
        let rec = pseudo_label(&logits, cfg)?;
        for (k, &ml) in rec.max_logits.iter().enumerate() {
            let role = if k == rec.i_bg {
                if rec.is_nbg {
                    "NBG"
                } else {
                    "BG"
                }
            } else if rec.fg_ibg_indices.binary_search(&k).is_ok() {
                "FGIBG"
            } else {
                "other"
            };
            rows.push(InspectRow {
                video_id: seq.video_id.clone(),
                segment: k,
                max_logit: ml,
                role,
                true_role: seq.roles.as_ref().map(|r| r[k].code()),
            });
        }
    }
    Ok(rows)
}

pub fn inspect_csv(rows: &[InspectRow]) -> String {
    let mut out = String::from("video_id,segment,max_logit,role,true_role\n");
    for r in rows {
        let t = r.true_role.map(String::from).unwrap_or_default();
        writeln!(out, "{},{},{:?},{},{t}", r.video_id, r.segment, r.max_logit, r.role).unwrap();
    }
    out
}
