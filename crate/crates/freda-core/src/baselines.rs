//! Reference adapters sharing one harness interface: a static source model,
//! test-batch normalization (centralized and cluster-decentralized), and
//! entropy minimization over BN affine parameters.
//!
//! Adapters see [`ImageBatch`] values only — the type carries images and
//! nothing else, so ground-truth labels and domain tags are unreachable from
//! adaptation code by construction.

use crate::checkpoint::{Checkpoint, ParamMap};
use crate::clustering::{kmeans_step, ClusterState, FeatureRepository};
use crate::error::{Error, Result};
use crate::model::{
    argmax_rows, sgd_step, softmax_entropy, AdaptableSet, BnMode, LossSpec, SmallCnn, ARCH_ID,
};
use crate::rng::SeededRng;
use crate::spectral::high_freq_feature;
use crate::tensor::Tensor;

/// The only view of the stream an adapter ever receives: `[n, c, h, w]`
/// images.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    images: Tensor,
}

impl ImageBatch {
    pub fn new(images: Tensor) -> Result<Self> {
        if images.dims().len() != 4 {
            return Err(Error::shape(format!(
                "image batch must be [n, c, h, w], got {:?}",
                images.dims()
            )));
        }
        Ok(ImageBatch { images })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        false // tensors cannot have a zero extent
    }
}

/// Per-sample outputs of one adaptation step, in input order.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Argmax class per sample.
    pub predicted: Vec<usize>,
    /// Probability rows `[n, C]`.
    pub probs: Tensor,
    /// Prediction entropy per sample (nats).
    pub entropy: Vec<f64>,
    /// Cluster assignment per sample (all zero for non-clustering adapters).
    pub cluster: Vec<usize>,
    /// Samples examined by the training gate this step.
    pub considered: usize,
    /// Samples that entered a training update this step.
    pub selected: usize,
    /// Training loss, when a training step happened.
    pub loss: Option<f64>,
}

/// Uniform adapter interface: mutate internal state from one unlabeled batch
/// and emit exactly one prediction per input sample, in input order.
pub trait Adapter {
    fn name(&self) -> &'static str;
    fn step(&mut self, batch: &ImageBatch) -> Result<StepOutput>;

    /// Training steps skipped because a loss left the finite range.
    fn numeric_aborts(&self) -> usize {
        0
    }
}

fn check_arch(checkpoint: &Checkpoint) -> Result<()> {
    if checkpoint.arch() != ARCH_ID {
        return Err(Error::format(format!(
            "checkpoint architecture {:?} is not {ARCH_ID:?}",
            checkpoint.arch()
        )));
    }
    Ok(())
}

fn outputs_from_logits(logits: &Tensor, cluster: Vec<usize>) -> Result<StepOutput> {
    let (probs, entropy) = softmax_entropy(logits)?;
    Ok(StepOutput {
        predicted: argmax_rows(&probs),
        probs,
        entropy,
        cluster,
        considered: 0,
        selected: 0,
        loss: None,
    })
}

// ---------------------------------------------------------------------------
// Source: frozen model, stored statistics
// ---------------------------------------------------------------------------

pub struct SourceAdapter {
    model: SmallCnn,
    params: ParamMap,
}

impl SourceAdapter {
    pub fn new(model: SmallCnn, checkpoint: &Checkpoint) -> Result<Self> {
        check_arch(checkpoint)?;
        model.validate_params(checkpoint.params())?;
        Ok(SourceAdapter {
            model,
            params: checkpoint.params().clone(),
        })
    }
}

impl Adapter for SourceAdapter {
    fn name(&self) -> &'static str {
        "source"
    }

    fn step(&mut self, batch: &ImageBatch) -> Result<StepOutput> {
        let (logits, _) = self
            .model
            .forward(&self.params, batch.images(), BnMode::SourceStats)?;
        outputs_from_logits(&logits, vec![0; batch.len()])
    }
}

// ---------------------------------------------------------------------------
// TBN: current-batch statistics, no learning
// ---------------------------------------------------------------------------

pub struct TbnAdapter {
    model: SmallCnn,
    params: ParamMap,
}

impl TbnAdapter {
    pub fn new(model: SmallCnn, checkpoint: &Checkpoint) -> Result<Self> {
        check_arch(checkpoint)?;
        model.validate_params(checkpoint.params())?;
        Ok(TbnAdapter {
            model,
            params: checkpoint.params().clone(),
        })
    }
}

impl Adapter for TbnAdapter {
    fn name(&self) -> &'static str {
        "tbn"
    }

    fn step(&mut self, batch: &ImageBatch) -> Result<StepOutput> {
        let (logits, _) = self
            .model
            .forward(&self.params, batch.images(), BnMode::BatchStats)?;
        outputs_from_logits(&logits, vec![0; batch.len()])
    }
}

// ---------------------------------------------------------------------------
// Decentralized TBN: per-cluster batch statistics
// ---------------------------------------------------------------------------

/// Clusters each batch by high-frequency amplitude signature (warm-started
/// centroids persist across batches) and normalizes every cluster with its
/// own statistics. Size-1 clusters fall back to whole-batch statistics for
/// that sample.
pub struct TbnDecAdapter {
    model: SmallCnn,
    params: ParamMap,
    k: usize,
    state: ClusterState,
    rng: SeededRng,
}

impl TbnDecAdapter {
    pub fn new(model: SmallCnn, checkpoint: &Checkpoint, k: usize, rng: &SeededRng) -> Result<Self> {
        check_arch(checkpoint)?;
        model.validate_params(checkpoint.params())?;
        if k == 0 {
            return Err(Error::config("clusters", "need K ≥ 1"));
        }
        Ok(TbnDecAdapter {
            model,
            params: checkpoint.params().clone(),
            k,
            state: ClusterState::new(),
            rng: rng.substream("kmeans-init"),
        })
    }
}

impl Adapter for TbnDecAdapter {
    fn name(&self) -> &'static str {
        "tbn-dec"
    }

    fn step(&mut self, batch: &ImageBatch) -> Result<StepOutput> {
        let n = batch.len();
        if n < 2 * self.k {
            return Err(Error::shape(format!(
                "decentralized TBN needs batch ≥ 2K = {}, got {n}",
                2 * self.k
            )));
        }
        let feats: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let img = batch.images().gather_first(&[i])?.reshape(
                    batch.images().dims()[1..].to_vec(),
                )?;
                Ok(high_freq_feature(&img)?.into_data())
            })
            .collect::<Result<_>>()?;
        let mut repo = FeatureRepository::new(n);
        repo.push(&feats)?;
        self.state = kmeans_step(&repo, self.k, &self.state, 20, 1e-6, &mut self.rng)?;
        let labels = self.state.assignments.clone();

        let classes = self.model.num_classes;
        let mut flat = vec![0.0; n * classes];
        // Whole-batch fallback probabilities, computed once if needed.
        let needs_global = (0..self.k)
            .any(|k| labels.iter().filter(|&&l| l == k).count() == 1);
        let global = if needs_global {
            let (logits, _) = self
                .model
                .forward(&self.params, batch.images(), BnMode::BatchStats)?;
            Some(logits)
        } else {
            None
        };
        for k in 0..self.k {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == k).collect();
            if members.is_empty() {
                continue;
            }
            if members.len() == 1 {
                let g = global.as_ref().expect("global fallback precomputed");
                let i = members[0];
                flat[i * classes..(i + 1) * classes]
                    .copy_from_slice(&g.data()[i * classes..(i + 1) * classes]);
            } else {
                let sub = batch.images().gather_first(&members)?;
                let (logits, _) = self.model.forward(&self.params, &sub, BnMode::BatchStats)?;
                for (row, &i) in members.iter().enumerate() {
                    flat[i * classes..(i + 1) * classes]
                        .copy_from_slice(&logits.data()[row * classes..(row + 1) * classes]);
                }
            }
        }
        let logits = Tensor::new(vec![n, classes], flat)?;
        outputs_from_logits(&logits, labels)
    }
}

// ---------------------------------------------------------------------------
// TENT: entropy minimization over BN affine parameters
// ---------------------------------------------------------------------------

pub struct TentAdapter {
    model: SmallCnn,
    params: ParamMap,
    lr: f64,
    predict_before_update: bool,
}

impl TentAdapter {
    pub fn new(
        model: SmallCnn,
        checkpoint: &Checkpoint,
        lr: f64,
        predict_before_update: bool,
    ) -> Result<Self> {
        check_arch(checkpoint)?;
        model.validate_params(checkpoint.params())?;
        if !(lr >= 0.0) {
            return Err(Error::config("lr", "must be ≥ 0"));
        }
        Ok(TentAdapter {
            model,
            params: checkpoint.params().clone(),
            lr,
            predict_before_update,
        })
    }
}

impl Adapter for TentAdapter {
    fn name(&self) -> &'static str {
        "tent"
    }

    fn step(&mut self, batch: &ImageBatch) -> Result<StepOutput> {
        let n = batch.len();
        if n < 2 {
            return Err(Error::shape("entropy adaptation needs batch size ≥ 2"));
        }
        let pre = if self.predict_before_update {
            let (logits, _) = self
                .model
                .forward(&self.params, batch.images(), BnMode::BatchStats)?;
            Some(logits)
        } else {
            None
        };
        let result = self.model.grad(
            &self.params,
            batch.images(),
            BnMode::BatchStats,
            &LossSpec::Entropy { weights: None },
            AdaptableSet::BnAffine,
        )?;
        sgd_step(&mut self.params, &result.grads, self.lr)?;
        let logits = match pre {
            Some(logits) => logits,
            None => {
                self.model
                    .forward(&self.params, batch.images(), BnMode::BatchStats)?
                    .0
            }
        };
        let mut out = outputs_from_logits(&logits, vec![0; n])?;
        out.considered = n;
        out.selected = n;
        out.loss = Some(result.loss);
        Ok(out)
    }
}
