//! Run configuration as `key = value` text.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, and
//! unknown keys are rejected. [`RunConfig::echo`] writes every key back in
//! the same format so a checkpoint records the configuration it came from.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::datahub::SyntheticConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::pseudo::ScoreMode;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: SyntheticConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Dataset directory holding `base.jsonl` and `novel.jsonl`.
    pub data_dir: PathBuf,
    /// Output directory for checkpoints, logs and reports.
    pub out_dir: PathBuf,
    /// Checkpoint path; `None` means `<out_dir>/model.ckpt`.
    pub ckpt: Option<PathBuf>,
    pub grad_check_h: f64,
    pub grad_check_tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: SyntheticConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            ckpt: None,
            grad_check_h: 1e-5,
            grad_check_tol: 1e-4,
        }
    }
}

fn parse_into<T: FromStr>(slot: &mut T, key: &str, value: &str) -> Result<()> {
    *slot = value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))?;
    Ok(())
}

macro_rules! scalar_keys {
    ($($key:literal, $doc:literal => $($field:ident).+;)*) => {
        const SCALAR_KEYS: &[(&str, &str)] = &[$(($key, $doc)),*];

        impl RunConfig {
            fn set_scalar(&mut self, key: &str, value: &str) -> Option<Result<()>> {
                match key {
                    $($key => Some(parse_into(&mut self.$($field).+, key, value)),)*
                    _ => None,
                }
            }

            fn get_scalar(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(self.$($field).+.to_string()),)*
                    _ => None,
                }
            }
        }
    };
}

scalar_keys! {
    "data.base_classes", "number of base classes" => data.n_base_classes;
    "data.novel_classes", "number of novel classes" => data.n_novel_classes;
    "data.videos_per_class", "videos generated per class" => data.videos_per_class;
    "data.segments", "segments per untrimmed video (T)" => data.segments;
    "data.feature_dim", "input feature dimension" => data.feature_dim;
    "data.fg_concepts_per_class", "foreground concepts per class" => data.concepts.fg_per_class;
    "data.ibg_concepts", "size of the informative background pool" => data.concepts.ibg;
    "data.nbg_concepts", "size of the non-informative background pool" => data.concepts.nbg;
    "data.overlap_fraction", "fraction of novel classes whose action is a base-class background" => data.overlap_fraction;
    "data.noise_std", "per-segment noise on action and informative background" => data.noise_std;
    "data.nbg_noise_std", "per-segment noise on non-informative background" => data.nbg_noise_std;
    "data.informative_shared", "scale of a direction shared by action and informative-BG concepts" => data.informative_shared;
    "data.seed", "generator seed" => data.seed;
    "data.split_seed", "seed of the base/novel class assignment" => data.split_seed;
    "model.embed_dim", "embedding dimension d" => train.model.embed_dim;
    "model.kernel_width", "temporal kernel width" => train.model.kernel_width;
    "model.attn_hidden", "hidden width of the attention network" => train.model.attn_hidden;
    "loss.tau", "temperature of the cosine classifier" => train.loss.tau;
    "loss.tau_s", "peakedness of the self-weighting sigmoid" => train.loss.tau_s;
    "loss.c", "cosine center of the self-weighting sigmoid" => train.loss.c;
    "loss.margin", "contrastive margin" => train.loss.margin;
    "loss.beta", "weight of the contrastive hinge" => train.loss.beta;
    "loss.gamma1", "weight of the contrastive loss" => train.loss.gamma1;
    "loss.gamma2", "weight of the background classification loss" => train.loss.gamma2;
    "loss.renormalize_video", "L2-normalize the aggregated video feature" => train.loss.renormalize_video;
    "ablation.soft", "soft classification with the attention network" => train.loss.ablation.soft;
    "ablation.bg", "background class and its loss" => train.loss.ablation.bg;
    "ablation.sw", "self-weighting from the pseudo-labeled background" => train.loss.ablation.sw;
    "ablation.cl", "contrastive loss" => train.loss.ablation.cl;
    "pseudo.t_n", "non-informative background threshold" => train.pseudo.t_n;
    "pseudo.tau", "temperature of probability confidence" => train.pseudo.tau;
    "train.epochs", "training epochs" => train.epochs;
    "train.batch_size", "videos per batch" => train.batch_size;
    "train.lr", "learning rate" => train.lr;
    "train.momentum", "Nesterov momentum" => train.momentum;
    "train.seed", "initialization and shuffling seed" => train.seed;
    "eval.way", "classes per episode (K)" => eval.way;
    "eval.shot", "support videos per class (n)" => eval.shot;
    "eval.queries", "query videos per class (q)" => eval.queries;
    "eval.episodes", "number of episodes (E)" => eval.episodes;
    "eval.seed", "episode sampling seed" => eval.seed;
    "eval.t_a", "probability threshold of the predicted set" => eval.t_a;
    "eval.jobs", "worker threads over episodes" => eval.jobs;
    "grad_check.h", "finite-difference step" => grad_check_h;
    "grad_check.tol", "maximum relative error" => grad_check_tol;
}

const OTHER_KEYS: &[(&str, &str)] = &[
    ("pseudo.m", "size of the confident set, or auto for max(2, ceil(T/8))"),
    ("pseudo.mode", "confidence score: logit or probability"),
    ("eval.thresholds", "comma-separated relative proposal thresholds"),
    ("data.dir", "dataset directory"),
    ("out", "output directory"),
    ("ckpt", "checkpoint path; empty means <out>/model.ckpt"),
];

impl RunConfig {
    /// Every key with a one-line description, in echo order.
    pub fn keys() -> impl Iterator<Item = (&'static str, &'static str)> {
        SCALAR_KEYS.iter().chain(OTHER_KEYS).copied()
    }

    /// Key listing for `--help`.
    pub fn help_text() -> String {
        let defaults = RunConfig::default();
        let mut out = String::from("Config keys (key = value; default in brackets):\n");
        for (k, doc) in Self::keys() {
            let v = defaults.get(k).unwrap_or_default();
            out.push_str(&format!("  {k:<26} {doc} [{v}]\n"));
        }
        out
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        if let Some(r) = self.set_scalar(key, value) {
            return r;
        }
        match key {
            "pseudo.m" => {
                self.train.pseudo.m = if value == "auto" {
                    None
                } else {
                    let mut m = 0usize;
                    parse_into(&mut m, key, value)?;
                    Some(m)
                }
            }
            "pseudo.mode" => {
                self.train.pseudo.mode = match value {
                    "logit" => ScoreMode::Logit,
                    "probability" => ScoreMode::Probability,
                    _ => return Err(Error::Config(format!("{key}: expected logit or probability, got {value:?}"))),
                }
            }
            "eval.thresholds" => {
                self.eval.thresholds = value
                    .split(',')
                    .map(|s| {
                        let mut t = 0.0;
                        parse_into(&mut t, key, s.trim())?;
                        Ok(t)
                    })
                    .collect::<Result<_>>()?
            }
            "data.dir" => self.data_dir = PathBuf::from(value),
            "out" => self.out_dir = PathBuf::from(value),
            "ckpt" => self.ckpt = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        if let Some(v) = self.get_scalar(key) {
            return Some(v);
        }
        Some(match key {
            "pseudo.m" => self.train.pseudo.m.map_or("auto".into(), |m| m.to_string()),
            "pseudo.mode" => match self.train.pseudo.mode {
                ScoreMode::Logit => "logit".into(),
                ScoreMode::Probability => "probability".into(),
            },
            "eval.thresholds" => self
                .eval
                .thresholds
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "data.dir" => self.data_dir.display().to_string(),
            "out" => self.out_dir.display().to_string(),
            "ckpt" => self.ckpt.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key = value", origin.display(), n + 1))
            })?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("{}:{}: {}", origin.display(), n + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, Path::new("<config>"))?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    /// Every key as `key = value`, one per line.
    pub fn echo(&self) -> String {
        Self::keys()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.ckpt.clone().unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.loss.validate()?;
        self.eval.validate()?;
        if self.train.model.embed_dim == 0 || self.train.model.kernel_width == 0 {
            return Err(Error::Config("model.embed_dim and model.kernel_width must be at least 1".into()));
        }
        if !(self.grad_check_h > 0.0 && self.grad_check_tol > 0.0) {
            return Err(Error::Config("grad_check.h and grad_check.tol must be positive".into()));
        }
        Ok(())
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(msg) => msg.clone(),
        other => other.to_string(),
    }
}
