//! Training objectives and segment aggregation.
//!
//! The total objective for a batch of untrimmed base-class videos is
//!
//! ```text
//! L = L_cls + gamma1 * L_contrast + gamma2 * L_bg
//! ```
//!
//! where `L_cls` classifies the weighted video feature into N (+1 background)
//! classes, `L_bg` classifies pseudo-labeled non-informative background into
//! the background class, and `L_contrast` is a batch-level margin loss
//! between the NBG pool and the most confident segments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamVars};
use crate::numgrad::{sigmoid, Graph, Reduce, Tensor, Var};
use crate::pseudo::{pseudo_label, PseudoConfig, PseudoLabelRecord};

/// Which components are active. `soft` is the attention baseline; with it
/// off (and `sw` off) segments are averaged uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub soft: bool,
    pub bg: bool,
    pub sw: bool,
    pub cl: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        soft: true,
        bg: true,
        sw: true,
        cl: true,
    };
    pub const SOFT: Ablation = Ablation {
        soft: true,
        bg: false,
        sw: false,
        cl: false,
    };

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [(self.soft, "Soft"), (self.bg, "BG"), (self.sw, "SW"), (self.cl, "CL")] {
            if on {
                parts.push(name);
            }
        }
        if parts.is_empty() {
            "Mean".into()
        } else {
            parts.join("+")
        }
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Softmax temperature on cosine logits.
    pub tau: f64,
    /// Peakedness of the self-weighting sigmoid.
    pub tau_s: f64,
    /// Cosine center of the self-weighting sigmoid.
    pub c: f64,
    pub margin: f64,
    /// Weight of the contrastive hinge term.
    pub beta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Re-normalize the aggregated video feature before classification.
    pub renormalize_video: bool,
    pub ablation: Ablation,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 10.0,
            tau_s: 8.0,
            c: 0.5,
            margin: 2.0,
            beta: 1.0,
            gamma1: 0.05,
            gamma2: 0.05,
            renormalize_video: true,
            ablation: Ablation::FULL,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau_s > 0.0) {
            return Err(Error::Config("tau and tau_s must be positive".into()));
        }
        if !(0.0..=4.0).contains(&self.margin) {
            return Err(Error::Config(format!("margin must lie in [0, 4], got {}", self.margin)));
        }
        if !(self.gamma1 >= 0.0 && self.gamma2 >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("gamma1, gamma2 and beta must be non-negative".into()));
        }
        Ok(())
    }
}

/// `1 / (1 + exp(-tau_s (1 - c - cos)))`.
pub fn self_weight_value(cos: f64, tau_s: f64, c: f64) -> f64 {
    sigmoid(tau_s * (1.0 - c - cos))
}

/// Self-weights of every segment relative to segment `i_bg`.
pub fn self_weight(f: &Tensor, i_bg: usize, tau_s: f64, c: f64) -> Vec<f64> {
    let bg = f.row(i_bg);
    (0..f.rows())
        .map(|k| self_weight_value(Tensor::dot(bg, f.row(k)), tau_s, c))
        .collect()
}

/// Graph form of [`self_weight`]; returns a `T×1` column.
pub fn self_weight_var(g: &mut Graph, f: Var, i_bg: usize, tau_s: f64, c: f64) -> Result<Var> {
    let bg = g.select_rows(f, &[i_bg])?;
    let bgt = g.transpose(bg)?;
    let cos = g.matmul(f, bgt)?;
    let z = g.scale(cos, -tau_s);
    let z = g.add_scalar(z, tau_s * (1.0 - c));
    Ok(g.sigmoid(z))
}

/// `Σ_i (w_i / Σ_k w_k) f_i`.
pub fn aggregate_video_feature(f: &Tensor, weights: &[f64]) -> Result<Vec<f64>> {
    if weights.len() != f.rows() {
        return Err(Error::ShapeMismatch {
            op: "aggregate_video_feature",
            lhs: f.shape().to_vec(),
            rhs: vec![weights.len()],
        });
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::Data("aggregation weights must be non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Data("cannot aggregate with all-zero weights".into()));
    }
    let mut out = vec![0.0; f.cols()];
    for (i, &w) in weights.iter().enumerate() {
        let a = w / total;
        out.iter_mut().zip(f.row(i)).for_each(|(o, v)| *o += a * v);
    }
    Ok(out)
}

/// Graph form of [`aggregate_video_feature`]: `weights` is `T×1`, result `1×d`.
pub fn aggregate_var(g: &mut Graph, f: Var, weights: Var) -> Result<Var> {
    let total = g.sum(weights, Reduce::All)?;
    if g.value(total).item() <= 0.0 {
        return Err(Error::Data("cannot aggregate with all-zero weights".into()));
    }
    let w = g.div_scalar(weights, total)?;
    let wt = g.transpose(w)?;
    g.matmul(wt, f)
}

/// `-log softmax_y(tau · rows · x)` for each row of `x: R×d`, averaged.
fn tempered_nll(g: &mut Graph, x: Var, classifier: Var, tau: f64, labels: &[usize]) -> Result<Var> {
    let wt = g.transpose(classifier)?;
    let logits = g.matmul(x, wt)?;
    let logits = g.scale(logits, tau);
    let lsm = g.log_softmax(logits, 1)?;
    let classes = g.value(lsm).cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
    }
    let flat: Vec<usize> = labels.iter().enumerate().map(|(r, &y)| r * classes + y).collect();
    let picked = g.pick(lsm, &flat)?;
    let mean = g.mean(picked, Reduce::All)?;
    Ok(g.scale(mean, -1.0))
}

/// Classification loss of one video feature `x: 1×d` against `classifier`
/// rows (N, or N+1 with the background row). `y` is 0-based.
pub fn soft_cls_loss_var(g: &mut Graph, x: Var, y: usize, classifier: Var, tau: f64) -> Result<Var> {
    tempered_nll(g, x, classifier, tau, &[y])
}

/// Value form of [`soft_cls_loss_var`].
pub fn soft_cls_loss(x: &[f64], y: usize, classifier: &Tensor, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(Tensor::row_vector(x));
    let w = g.constant(classifier.clone());
    let l = soft_cls_loss_var(&mut g, xv, y, w, tau)?;
    Ok(g.value(l).item())
}

/// Background-class loss averaged over the rows of `nbg: K×d`; the last
/// classifier row is the background class and the softmax runs over all rows.
pub fn bg_cls_loss_var(g: &mut Graph, nbg: Var, classifier: Var, tau: f64) -> Result<Var> {
    let k = g.value(nbg).rows();
    let bg_row = g.value(classifier).rows() - 1;
    tempered_nll(g, nbg, classifier, tau, &vec![bg_row; k])
}

/// Value form of [`bg_cls_loss_var`]; zero for an empty pool.
pub fn bg_cls_loss(nbg: &[Vec<f64>], classifier: &Tensor, tau: f64) -> Result<f64> {
    if nbg.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(nbg)?);
    let w = g.constant(classifier.clone());
    let l = bg_cls_loss_var(&mut g, x, w, tau)?;
    Ok(g.value(l).item())
}

/// Squared Euclidean distance for every (row of `a` at `ia[p]`, row of `b`
/// at `ib[p]`) pair, as a `P×1` column.
fn pair_distances(g: &mut Graph, a: Var, ia: &[usize], b: Var, ib: &[usize]) -> Result<Var> {
    let x = g.select_rows(a, ia)?;
    let y = g.select_rows(b, ib)?;
    let d = g.sub(x, y)?;
    let d = g.square(d);
    g.sum(d, Reduce::Axis(1))
}

/// Batch contrastive loss:
/// `max_{j≠k} d(nb_j, nb_k) + beta · max(0, margin - min_{q,j} d(fg_q, nb_j))`.
///
/// The first term needs two NBG rows and the second needs both pools; a
/// missing term contributes nothing. Returns `None` when both are missing.
pub fn contrastive_loss_var(
    g: &mut Graph,
    nbg: Option<Var>,
    fg_ibg: Option<Var>,
    margin: f64,
    beta: f64,
) -> Result<Option<Var>> {
    let Some(nb) = nbg else { return Ok(None) };
    let n = g.value(nb).rows();
    let mut terms = Vec::new();
    if n >= 2 {
        let (ia, ib): (Vec<usize>, Vec<usize>) = (0..n).flat_map(|j| (j + 1..n).map(move |k| (j, k))).unzip();
        let d = pair_distances(g, nb, &ia, nb, &ib)?;
        terms.push(g.max(d, Reduce::All)?);
    }
    if let Some(fg) = fg_ibg {
        let q = g.value(fg).rows();
        if q > 0 && n > 0 {
            let (ia, ib): (Vec<usize>, Vec<usize>) = (0..q).flat_map(|i| (0..n).map(move |j| (i, j))).unzip();
            let d = pair_distances(g, fg, &ia, nb, &ib)?;
            let closest = g.min(d, Reduce::All)?;
            let slack = g.scale(closest, -1.0);
            let slack = g.add_scalar(slack, margin);
            let hinge = g.relu(slack);
            terms.push(g.scale(hinge, beta));
        }
    }
    match terms.as_slice() {
        [] => Ok(None),
        [t] => Ok(Some(*t)),
        [a, b] => Ok(Some(g.add(*a, *b)?)),
        _ => unreachable!(),
    }
}

/// Value form of [`contrastive_loss_var`]; 0 when both terms are absent.
pub fn contrastive_loss(nbg: &[Vec<f64>], fg_ibg: &[Vec<f64>], margin: f64, beta: f64) -> Result<f64> {
    let mut g = Graph::new();
    let nb = (!nbg.is_empty())
        .then(|| Tensor::from_rows(nbg))
        .transpose()?
        .map(|t| g.constant(t));
    let fg = (!fg_ibg.is_empty())
        .then(|| Tensor::from_rows(fg_ibg))
        .transpose()?
        .map(|t| g.constant(t));
    Ok(contrastive_loss_var(&mut g, nb, fg, margin, beta)?.map_or(0.0, |v| g.value(v).item()))
}

/// One training video: raw features and its 0-based base-class label.
#[derive(Debug, Clone, Copy)]
pub struct VideoSample<'a> {
    pub features: &'a Tensor,
    pub label: usize,
}

/// Loss nodes of one batch.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: Var,
    pub cls: Var,
    pub contrast: Option<Var>,
    pub bg: Option<Var>,
    pub pseudo: Vec<PseudoLabelRecord>,
}

impl BatchLoss {
    pub fn n_nbg(&self) -> usize {
        self.pseudo.iter().filter(|r| r.is_nbg).count()
    }
}

/// Scalar values of a [`BatchLoss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub cls: f64,
    pub contrast: f64,
    pub bg: f64,
    pub n_nbg: usize,
}

impl BatchLoss {
    pub fn values(&self, g: &Graph) -> LossValues {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item());
        LossValues {
            total: g.value(self.total).item(),
            cls: g.value(self.cls).item(),
            contrast: v(self.contrast),
            bg: v(self.bg),
            n_nbg: self.n_nbg(),
        }
    }
}

/// Segment weights of one embedded video under the configured ablation,
/// as a `T×1` column.
pub fn segment_weights_var(
    g: &mut Graph,
    vars: &ParamVars,
    f: Var,
    rec: &PseudoLabelRecord,
    cfg: &LossConfig,
) -> Result<Var> {
    let ab = cfg.ablation;
    if ab.sw {
        self_weight_var(g, f, rec.i_bg, cfg.tau_s, cfg.c)
    } else if ab.soft {
        vars.baseline_attention(g, f)
    } else {
        let t = g.value(f).rows();
        Ok(g.constant(Tensor::filled(&[t, 1], 1.0)))
    }
}

/// Records the full objective for `batch` on `g`.
pub fn total_loss(
    g: &mut Graph,
    vars: &ParamVars,
    batch: &[VideoSample<'_>],
    cfg: &LossConfig,
    pseudo_cfg: &PseudoConfig,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let ab = cfg.ablation;
    let n_classes = vars.num_classes;
    let cls_rows = vars.classifier_rows(g, ab.bg)?;

    let mut cls_terms = Vec::with_capacity(batch.len());
    let mut nbg_rows = Vec::new();
    let mut fg_rows = Vec::new();
    let mut records = Vec::with_capacity(batch.len());
    for s in batch {
        if s.label >= n_classes {
            return Err(Error::Data(format!("label {} out of range for {n_classes} classes", s.label)));
        }
        let raw = g.constant(s.features.clone());
        let f = vars.embed(g, raw)?;
        let base_logits = vars.segment_logits(g, f, false)?;
        let rec = pseudo_label(g.value(base_logits), pseudo_cfg)?;

        let w = segment_weights_var(g, vars, f, &rec, cfg)?;
        let mut video = aggregate_var(g, f, w)?;
        if cfg.renormalize_video {
            video = g.l2_normalize_rows(video)?;
        }
        cls_terms.push(soft_cls_loss_var(g, video, s.label, cls_rows, cfg.tau)?);

        if rec.is_nbg {
            nbg_rows.push(g.select_rows(f, &[rec.i_bg])?);
        }
        if !rec.fg_ibg_indices.is_empty() {
            fg_rows.push(g.select_rows(f, &rec.fg_ibg_indices)?);
        }
        records.push(rec);
    }

    let mut cls = cls_terms[0];
    for &t in &cls_terms[1..] {
        cls = g.add(cls, t)?;
    }
    let cls = g.scale(cls, 1.0 / batch.len() as f64);

    let nbg = if nbg_rows.is_empty() {
        None
    } else {
        Some(g.concat_rows(&nbg_rows)?)
    };
    let fg = if fg_rows.is_empty() {
        None
    } else {
        Some(g.concat_rows(&fg_rows)?)
    };

    let mut total = cls;
    let contrast = if ab.cl {
        contrastive_loss_var(g, nbg, fg, cfg.margin, cfg.beta)?
    } else {
        None
    };
    if let Some(c) = contrast {
        let w = g.scale(c, cfg.gamma1);
        total = g.add(total, w)?;
    }
    let bg = match (ab.bg, nbg) {
        (true, Some(nb)) => Some(bg_cls_loss_var(g, nb, vars.classifier, cfg.tau)?),
        _ => None,
    };
    if let Some(b) = bg {
        let w = g.scale(b, cfg.gamma2);
        total = g.add(total, w)?;
    }
    Ok(BatchLoss {
        total,
        cls,
        contrast,
        bg,
        pseudo: records,
    })
}

/// Loss values of `batch` under `params` without keeping the graph.
pub fn evaluate_loss(
    params: &ModelParams,
    batch: &[VideoSample<'_>],
    cfg: &LossConfig,
    pseudo_cfg: &PseudoConfig,
) -> Result<LossValues> {
    let mut g = Graph::new();
    let vars = params.register(&mut g, false);
    let loss = total_loss(&mut g, &vars, batch, cfg, pseudo_cfg)?;
    Ok(loss.values(&g))
}
