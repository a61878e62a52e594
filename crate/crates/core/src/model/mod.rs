//! Trainable head on top of pre-extracted segment features.
//!
//! Per segment: a linear transform to `d` channels, a depthwise temporal
//! convolution along the segment axis, then L2 normalization. Classifier rows
//! are unit-norm and bias-free, so segment logits are cosines. Row `N` of the
//! classifier is the background class.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};

use crate::error::{Error, Result};
use crate::numgrad::{sigmoid, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub kernel_width: usize,
    pub attn_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            kernel_width: 8,
            attn_hidden: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `d×d_in`.
    pub transform: Tensor,
    /// `d×w`.
    pub temporal_kernel: Tensor,
    /// `(N+1)×d`, rows unit-norm; the last row is the background class.
    pub classifier: Tensor,
    /// `h×d`.
    pub attn_hidden: Tensor,
    /// `1×h`.
    pub attn_out: Tensor,
}

pub const PARAM_NAMES: [&str; 5] = ["transform", "temporal_kernel", "classifier", "attn_hidden", "attn_out"];

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

impl ModelParams {
    /// Gaussian init with std `1/sqrt(fan_in)`; classifier rows normalized.
    pub fn init(cfg: &ModelConfig, input_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if cfg.embed_dim == 0 || cfg.kernel_width == 0 || cfg.attn_hidden == 0 || input_dim == 0 || num_classes == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let transform = gaussian(&mut rng, d, input_dim, 1.0 / (input_dim as f64).sqrt());
        let temporal_kernel = gaussian(&mut rng, d, cfg.kernel_width, 1.0 / (cfg.kernel_width as f64).sqrt());
        let classifier = gaussian(&mut rng, num_classes + 1, d, 1.0).l2_normalize_rows()?;
        let attn_hidden = gaussian(&mut rng, cfg.attn_hidden, d, 1.0 / (d as f64).sqrt());
        let attn_out = gaussian(&mut rng, 1, cfg.attn_hidden, 1.0 / (cfg.attn_hidden as f64).sqrt());
        Ok(Self {
            transform,
            temporal_kernel,
            classifier,
            attn_hidden,
            attn_out,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.transform.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.transform.cols()
    }

    pub fn kernel_width(&self) -> usize {
        self.temporal_kernel.cols()
    }

    /// Number of base classes N (the classifier has N+1 rows).
    pub fn num_classes(&self) -> usize {
        self.classifier.rows() - 1
    }

    pub fn tensors(&self) -> [&Tensor; 5] {
        [
            &self.transform,
            &self.temporal_kernel,
            &self.classifier,
            &self.attn_hidden,
            &self.attn_out,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.transform,
            &mut self.temporal_kernel,
            &mut self.classifier,
            &mut self.attn_hidden,
            &mut self.attn_out,
        ]
    }

    pub fn from_tensors(mut tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != 5 {
            return Err(Error::Data(format!("expected 5 parameter tensors, got {}", tensors.len())));
        }
        let attn_out = tensors.pop().unwrap();
        let attn_hidden = tensors.pop().unwrap();
        let classifier = tensors.pop().unwrap();
        let temporal_kernel = tensors.pop().unwrap();
        let transform = tensors.pop().unwrap();
        let p = Self {
            transform,
            temporal_kernel,
            classifier,
            attn_hidden,
            attn_out,
        };
        p.check_shapes()?;
        Ok(p)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let d = self.embed_dim();
        let h = self.attn_hidden.rows();
        let ok = self.tensors().iter().all(|t| t.is_matrix())
            && self.temporal_kernel.rows() == d
            && self.classifier.cols() == d
            && self.classifier.rows() >= 2
            && self.attn_hidden.cols() == d
            && self.attn_out.rows() == 1
            && self.attn_out.cols() == h;
        if !ok {
            return Err(Error::Data("inconsistent parameter shapes".into()));
        }
        Ok(())
    }

    pub fn normalize_classifier_rows(&mut self) -> Result<()> {
        self.classifier = self.classifier.l2_normalize_rows()?;
        Ok(())
    }

    /// `T×d_in` raw features to `T×d` unit-norm (or zero) segment embeddings.
    pub fn embed_segments(&self, raw: &Tensor) -> Result<Tensor> {
        check_input(raw, self.input_dim())?;
        raw.matmul(&self.transform.transpose()?)?
            .depthwise_conv(&self.temporal_kernel)?
            .l2_normalize_rows()
    }

    /// Cosine logits against the first N classifier rows, or all N+1.
    pub fn segment_logits(&self, f: &Tensor, include_bg_row: bool) -> Result<Tensor> {
        let w = self.classifier_rows(include_bg_row)?;
        f.matmul(&w.transpose()?)
    }

    fn classifier_rows(&self, include_bg_row: bool) -> Result<Tensor> {
        if include_bg_row {
            Ok(self.classifier.clone())
        } else {
            let rows: Vec<usize> = (0..self.num_classes()).collect();
            self.classifier.select_rows(&rows)
        }
    }

    /// Per-segment weights `sigmoid(attn_out · relu(attn_hidden · f_i))`.
    pub fn baseline_attention(&self, f: &Tensor) -> Result<Vec<f64>> {
        let hidden = f.matmul(&self.attn_hidden.transpose()?)?.map(|x| x.max(0.0));
        let out = hidden.matmul(&self.attn_out.transpose()?)?;
        Ok(out.data().iter().map(|&x| sigmoid(x)).collect())
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        let mut leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        ParamVars {
            transform: leaf(&self.transform),
            temporal_kernel: leaf(&self.temporal_kernel),
            classifier: leaf(&self.classifier),
            attn_hidden: leaf(&self.attn_hidden),
            attn_out: leaf(&self.attn_out),
            num_classes: self.num_classes(),
        }
    }
}

fn check_input(raw: &Tensor, input_dim: usize) -> Result<()> {
    if !raw.is_matrix() || raw.cols() != input_dim {
        return Err(Error::ShapeMismatch {
            op: "embed_segments",
            lhs: raw.shape().to_vec(),
            rhs: vec![input_dim],
        });
    }
    Ok(())
}

/// Parameter leaves of one graph.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub transform: Var,
    pub temporal_kernel: Var,
    pub classifier: Var,
    pub attn_hidden: Var,
    pub attn_out: Var,
    pub num_classes: usize,
}

impl ParamVars {
    pub fn as_array(&self) -> [Var; 5] {
        [
            self.transform,
            self.temporal_kernel,
            self.classifier,
            self.attn_hidden,
            self.attn_out,
        ]
    }

    /// Builds from leaves in [`PARAM_NAMES`] order.
    pub fn from_slice(vars: &[Var], num_classes: usize) -> Self {
        Self {
            transform: vars[0],
            temporal_kernel: vars[1],
            classifier: vars[2],
            attn_hidden: vars[3],
            attn_out: vars[4],
            num_classes,
        }
    }

    pub fn embed(&self, g: &mut Graph, raw: Var) -> Result<Var> {
        check_input(g.value(raw), g.value(self.transform).cols())?;
        let wt = g.transpose(self.transform)?;
        let x = g.matmul(raw, wt)?;
        let x = g.depthwise_conv(x, self.temporal_kernel)?;
        g.l2_normalize_rows(x)
    }

    pub fn classifier_rows(&self, g: &mut Graph, include_bg_row: bool) -> Result<Var> {
        if include_bg_row {
            Ok(self.classifier)
        } else {
            let rows: Vec<usize> = (0..self.num_classes).collect();
            g.select_rows(self.classifier, &rows)
        }
    }

    pub fn segment_logits(&self, g: &mut Graph, f: Var, include_bg_row: bool) -> Result<Var> {
        let w = self.classifier_rows(g, include_bg_row)?;
        let wt = g.transpose(w)?;
        g.matmul(f, wt)
    }

    /// `T×1` attention weights.
    pub fn baseline_attention(&self, g: &mut Graph, f: Var) -> Result<Var> {
        let ht = g.transpose(self.attn_hidden)?;
        let h = g.matmul(f, ht)?;
        let h = g.relu(h);
        let ot = g.transpose(self.attn_out)?;
        let o = g.matmul(h, ot)?;
        Ok(g.sigmoid(o))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny(d: usize, w: usize) -> ModelParams {
        ModelParams::init(
            &ModelConfig {
                embed_dim: d,
                kernel_width: w,
                attn_hidden: 3,
            },
            d,
            2,
            1,
        )
        .unwrap()
    }

    fn delta_kernel(d: usize, w: usize) -> Tensor {
        let mut k = Tensor::zeros(&[d, w]);
        for c in 0..d {
            k.data_mut()[c * w + (w - 1) / 2] = 1.0;
        }
        k
    }

    #[test]
    fn identity_head_reduces_to_normalization() {
        let mut p = tiny(2, 8);
        p.transform = Tensor::identity(2);
        p.temporal_kernel = delta_kernel(2, 8);
        let f = p.embed_segments(&Tensor::from_rows(&[[3.0, 4.0]]).unwrap()).unwrap();
        assert!((f.get(0, 0) - 0.6).abs() < 1e-12 && (f.get(0, 1) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn zero_input_embeds_to_zero() {
        let p = tiny(4, 8);
        let f = p.embed_segments(&Tensor::zeros(&[5, 4])).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logits_are_projections() {
        let mut p = tiny(2, 1);
        p.classifier = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]).unwrap();
        let f = Tensor::from_rows(&[[0.6, 0.8]]).unwrap();
        assert_eq!(p.segment_logits(&f, false).unwrap().data(), &[0.6, 0.8]);
        let bg = p.segment_logits(&f, true).unwrap();
        assert_eq!(bg.shape(), &[1, 3]);
        assert!((bg.get(0, 2) - 1.0).abs() < 1e-12);
        let orth = Tensor::from_rows(&[[0.0, 0.0]]).unwrap();
        assert!(p.segment_logits(&orth, true).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_attention_gives_half() {
        let mut p = tiny(4, 1);
        p.attn_hidden = Tensor::zeros(p.attn_hidden.shape());
        p.attn_out = Tensor::zeros(p.attn_out.shape());
        let f = p.embed_segments(&Tensor::filled(&[3, 4], 1.0)).unwrap();
        assert_eq!(p.baseline_attention(&f).unwrap(), vec![0.5; 3]);
    }

    #[test]
    fn graph_and_direct_paths_agree() {
        let p = tiny(4, 8);
        let raw = Tensor::new(vec![6, 4], (0..24).map(|i| ((i * 7) % 5) as f64 - 2.0).collect()).unwrap();
        let mut g = Graph::new();
        let vars = p.register(&mut g, true);
        let x = g.constant(raw.clone());
        let f = vars.embed(&mut g, x).unwrap();
        assert_eq!(g.value(f), &p.embed_segments(&raw).unwrap());
        let l = vars.segment_logits(&mut g, f, true).unwrap();
        assert_eq!(g.value(l), &p.segment_logits(&g.value(f).clone(), true).unwrap());
        let a = vars.baseline_attention(&mut g, f).unwrap();
        assert_eq!(g.value(a).data(), p.baseline_attention(g.value(f)).unwrap().as_slice());
    }

    #[test]
    fn dimension_mismatch() {
        assert!(tiny(4, 8).embed_segments(&Tensor::zeros(&[3, 5])).is_err());
    }

    proptest! {
        #[test]
        fn rows_are_unit_or_zero(seed in any::<u64>(), t in 1usize..12) {
            let p = ModelParams::init(&ModelConfig { embed_dim: 5, kernel_width: 8, attn_hidden: 4 }, 3, 4, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let raw = gaussian(&mut rng, t, 3, 2.0);
            let f = p.embed_segments(&raw).unwrap();
            for i in 0..t {
                let n = Tensor::norm(f.row(i));
                prop_assert!(n == 0.0 || (n - 1.0).abs() <= 1e-9);
            }
            let logits = p.segment_logits(&f, true).unwrap();
            prop_assert!(logits.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
            let w = p.baseline_attention(&f).unwrap();
            prop_assert!(w.iter().all(|&x| x > 0.0 && x < 1.0));
        }

        #[test]
        fn delta_kernel_is_permutation_equivariant(seed in any::<u64>(), t in 2usize..10) {
            let mut p = ModelParams::init(&ModelConfig { embed_dim: 4, kernel_width: 8, attn_hidden: 2 }, 3, 2, seed).unwrap();
            p.temporal_kernel = delta_kernel(4, 8);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw = gaussian(&mut rng, t, 3, 1.0);
            let perm: Vec<usize> = (0..t).rev().collect();
            let f = p.embed_segments(&raw).unwrap();
            let fp = p.embed_segments(&raw.select_rows(&perm).unwrap()).unwrap();
            prop_assert_eq!(fp, f.select_rows(&perm).unwrap());
            let w = p.baseline_attention(&f).unwrap();
            let wp = p.baseline_attention(&f.select_rows(&perm).unwrap()).unwrap();
            prop_assert_eq!(wp, perm.iter().map(|&i| w[i]).collect::<Vec<_>>());
        }
    }
}
