//! Base-class training: shuffled mini-batches, Nesterov momentum, unit-norm
//! classifier rows after every step.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datahub::LoadedSplit;
use crate::error::{Error, Result};
use crate::losses::{aggregate_video_feature, total_loss, LossConfig, LossValues, VideoSample};
use crate::model::{write_checkpoint, Checkpoint, ModelConfig, ModelParams, ParamVars};
use crate::numgrad::{grad_check, GradCheckReport, Graph, Tensor};
use crate::pseudo::{pseudo_label, PseudoConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub pseudo: PseudoConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 0.01,
            momentum: 0.9,
            seed: 1,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            pseudo: PseudoConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
    pub lr: f64,
    pub momentum: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, lr: f64, momentum: f64) -> Self {
        Self {
            velocity: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            lr,
            momentum,
        }
    }
}

/// `v ← μv − lr·g; p ← p + μv − lr·g`, in place.
pub fn nesterov_update(p: &mut Tensor, v: &mut Tensor, g: &Tensor, lr: f64, momentum: f64) -> Result<()> {
    p.require_same_shape(g, "nesterov_step")?;
    v.require_same_shape(g, "nesterov_step")?;
    for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
        *vi = momentum * *vi - lr * gi;
        *pi += momentum * *vi - lr * gi;
    }
    Ok(())
}

/// One optimizer step over all parameter tensors, then classifier rows are
/// re-normalized.
pub fn nesterov_step(params: &mut ModelParams, grads: &[Tensor], state: &mut OptimizerState) -> Result<()> {
    if grads.len() != state.velocity.len() {
        return Err(Error::ShapeMismatch {
            op: "nesterov_step",
            lhs: vec![state.velocity.len()],
            rhs: vec![grads.len()],
        });
    }
    for ((p, v), g) in params.tensors_mut().into_iter().zip(&mut state.velocity).zip(grads) {
        nesterov_update(p, v, g, state.lr, state.momentum)?;
    }
    params.normalize_classifier_rows()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: LossValues,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,L_total,L_cls,L_contrast,L_bg,n_nbg\n");
    for r in rows {
        let l = &r.loss;
        writeln!(out, "{},{},{},{},{},{}", r.step, l.total, l.cls, l.contrast, l.bg, l.n_nbg).unwrap();
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<LogRow>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where to write the last finite parameters if training diverges.
    pub last_good_path: Option<PathBuf>,
    /// Echoed into the last-good checkpoint.
    pub config_echo: String,
}

/// Maps the split's class labels to `0..N` in manifest order.
pub fn label_index(split: &LoadedSplit) -> impl Fn(usize) -> Result<usize> + '_ {
    move |label| {
        split
            .manifest
            .class_labels
            .iter()
            .position(|&l| l == label)
            .ok_or_else(|| Error::Data(format!("label {label} not in manifest")))
    }
}

/// Trains the head on the base split from a fresh initialization.
pub fn train_base(split: &LoadedSplit, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let input_dim = split
        .feature_dim()
        .ok_or_else(|| Error::Data("base split has no videos".into()))?;
    let num_classes = split.manifest.class_labels.len();
    let params = ModelParams::init(&cfg.model, input_dim, num_classes, cfg.seed)?;
    train_from(split, cfg, opts, params)
}

/// Trains starting from `params`.
pub fn train_from(split: &LoadedSplit, cfg: &TrainConfig, opts: &TrainOptions, mut params: ModelParams) -> Result<TrainOutcome> {
    cfg.loss.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if split.sequences.is_empty() {
        return Err(Error::Data("base split has no videos".into()));
    }
    let to_index = label_index(split);
    let labels: Vec<usize> = split
        .sequences
        .iter()
        .map(|s| to_index(s.class_label))
        .collect::<Result<_>>()?;
    if let Some(s) = split.sequences.iter().find(|s| s.feature_dim() != params.input_dim()) {
        return Err(Error::Data(format!(
            "{}: feature dim {} does not match model input {}",
            s.video_id,
            s.feature_dim(),
            params.input_dim()
        )));
    }

    let mut state = OptimizerState::new(&params, cfg.lr, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
    let mut order: Vec<usize> = (0..split.sequences.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<VideoSample<'_>> = chunk
                .iter()
                .map(|&i| VideoSample {
                    features: &split.sequences[i].features,
                    label: labels[i],
                })
                .collect();
            let mut g = Graph::new();
            let vars = params.register(&mut g, true);
            let loss = total_loss(&mut g, &vars, &batch, &cfg.loss, &cfg.pseudo)?;
            let values = loss.values(&g);
            if !values.total.is_finite() {
                return Err(abort(step, &params, opts));
            }
            let grads = g.backward(loss.total)?;
            let grads: Vec<Tensor> = vars
                .as_array()
                .iter()
                .zip(params.tensors())
                .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
                .collect();
            if grads.iter().any(|t| !t.all_finite()) {
                return Err(abort(step, &params, opts));
            }
            let before = params.clone();
            nesterov_step(&mut params, &grads, &mut state)?;
            if params.tensors().iter().any(|t| !t.all_finite()) {
                return Err(abort(step, &before, opts));
            }
            log.push(LogRow { step, loss: values });
            step += 1;
        }
    }
    Ok(TrainOutcome { params, log })
}

fn abort(step: usize, params: &ModelParams, opts: &TrainOptions) -> Error {
    let mut checkpoint = None;
    if let Some(path) = &opts.last_good_path {
        let ckpt = Checkpoint {
            params: params.clone(),
            config_echo: opts.config_echo.clone(),
        };
        if write_checkpoint(&ckpt, path).is_ok() {
            checkpoint = Some(path.clone());
        }
    }
    Error::NonFiniteLoss { step, checkpoint }
}

/// Video feature under the trained aggregation (self-weighting, attention or
/// uniform, per `loss.ablation`), re-normalized if configured.
pub fn video_feature(params: &ModelParams, f: &Tensor, cfg: &LossConfig, pseudo_cfg: &PseudoConfig) -> Result<Vec<f64>> {
    let weights = if cfg.ablation.sw {
        let logits = params.segment_logits(f, false)?;
        let rec = pseudo_label(&logits, pseudo_cfg)?;
        crate::losses::self_weight(f, rec.i_bg, cfg.tau_s, cfg.c)
    } else if cfg.ablation.soft {
        params.baseline_attention(f)?
    } else {
        vec![1.0; f.rows()]
    };
    let mut v = aggregate_video_feature(f, &weights)?;
    if cfg.renormalize_video {
        let n = Tensor::norm(&v) + crate::numgrad::NORM_EPS;
        v.iter_mut().for_each(|x| *x /= n);
    }
    Ok(v)
}

/// Fraction of base videos whose video feature is closest (by cosine) to the
/// classifier row of their own class among the N base rows.
pub fn base_accuracy(params: &ModelParams, split: &LoadedSplit, cfg: &TrainConfig) -> Result<f64> {
    let to_index = label_index(split);
    let mut correct = 0;
    for s in &split.sequences {
        let f = params.embed_segments(&s.features)?;
        let v = video_feature(params, &f, &cfg.loss, &cfg.pseudo)?;
        let scores: Vec<f64> = (0..params.num_classes())
            .map(|k| Tensor::dot(&v, params.classifier.row(k)))
            .collect();
        let pred = scores
            .iter()
            .enumerate()
            .fold(0, |best, (k, &s)| if s > scores[best] { k } else { best });
        if pred == to_index(s.class_label)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / split.sequences.len() as f64)
}

/// Central-difference check of the full objective on a random fixture: two
/// videos of 8 segments with 8-dimensional inputs and embedding, two base
/// classes. Returns the report and the loss terms at the fixture point.
pub fn grad_check_fixture(
    loss: &LossConfig,
    pseudo: &PseudoConfig,
    seed: u64,
    h: f64,
    tol: f64,
) -> Result<(GradCheckReport, LossValues)> {
    use rand_distr::{Distribution, StandardNormal};

    let (t, d) = (8, 8);
    let model = ModelConfig {
        embed_dim: d,
        kernel_width: 8,
        attn_hidden: 4,
    };
    let params = ModelParams::init(&model, d, 2, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let videos: Vec<Tensor> = (0..2)
        .map(|_| {
            let data = (0..t * d).map(|_| StandardNormal.sample(&mut rng)).collect();
            Tensor::new(vec![t, d], data)
        })
        .collect::<Result<_>>()?;
    let batch: Vec<VideoSample<'_>> = videos
        .iter()
        .enumerate()
        .map(|(i, f)| VideoSample { features: f, label: i })
        .collect();
    let values = crate::losses::evaluate_loss(&params, &batch, loss, pseudo)?;
    let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let report = grad_check(
        |g, vars| {
            let pv = ParamVars::from_slice(vars, 2);
            Ok(total_loss(g, &pv, &batch, loss, pseudo)?.total)
        },
        &tensors,
        h,
        tol,
    )?;
    Ok((report, values))
}

pub fn write_log(rows: &[LogRow], path: &Path) -> Result<()> {
    std::fs::write(path, log_csv(rows)).map_err(|e| Error::io(path, e))
}
