//! Frequency-driven decentralized adaptation.
//!
//! A heterogeneous test stream is un-mixed by clustering each sample's
//! high-frequency amplitude signature with warm-started k-means over a
//! sliding feature repository. Every cluster owns a local model branch with
//! its own sample pool and running prediction average; branches train on
//! confidence/novelty-gated samples with an entropy + amplitude-consistency
//! loss, and all branches are merged into a routing-weighted average every
//! `comm_interval` steps.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::baselines::{Adapter, ImageBatch, StepOutput};
use crate::checkpoint::{Checkpoint, ParamMap};
use crate::clustering::{kmeans_step, ClusterState, FeatureRepository};
use crate::error::{Error, Result};
use crate::model::{
    argmax_rows, sgd_step, softmax_entropy, weighted_average, AdaptableSet, BnMode, Cache,
    LossSpec, SmallCnn, ARCH_ID,
};
use crate::rng::SeededRng;
use crate::spectral::{augment, high_freq_feature};
use crate::tensor::Tensor;

/// Exponential-moving-average weight for each branch's running prediction
/// mean (the "seen before" reference of the novelty gate).
const YBAR_MOMENTUM: f64 = 0.1;
/// Lloyd iteration budget per stream step.
const KMEANS_MAX_ITER: usize = 20;
/// Centroid-drift convergence tolerance.
const KMEANS_TOL: f64 = 1e-6;

fn default_clusters() -> usize {
    4
}
fn default_kmeans_size() -> usize {
    512
}
fn default_comm_interval() -> usize {
    10
}
fn default_alpha() -> f64 {
    0.1
}
fn default_sigma() -> f64 {
    1.0
}
fn default_lambda() -> f64 {
    0.5
}
fn default_eps() -> f64 {
    0.05
}
fn default_lr() -> f64 {
    0.01
}
fn default_batch_size() -> usize {
    64
}

/// Tunable knobs of the decentralized adapter. `Default` gives the reference
/// configuration; every field can also be set from JSON (missing keys keep
/// their defaults).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FredaConfig {
    /// Number of clusters / local branches K.
    pub clusters: usize,
    /// Capacity N of the sliding feature repository.
    pub kmeans_size: usize,
    /// Aggregate branches every `comm_interval` steps.
    pub comm_interval: usize,
    /// Amplitude perturbation strength α.
    pub alpha: f64,
    /// Std-dev σ of the perturbation field.
    pub sigma: f64,
    /// Weight λ of the consistency term.
    pub lambda: f64,
    /// Entropy gate H₀ in nats; `None` resolves to `0.4·ln C`.
    pub h0: Option<f64>,
    /// Novelty gate: keep a sample only if `|cos(y, ȳ)| < eps`.
    pub eps: f64,
    /// SGD learning rate for BN affine parameters.
    pub lr: f64,
    /// Stream batch size; also the per-branch pool capacity.
    pub batch_size: usize,
    /// Ablation: skip frequency clustering and run one branch.
    pub disable_fd: bool,
    /// Ablation: drop the amplitude-augmentation consistency term.
    pub disable_fa: bool,
    /// Ablation: train on every pooled sample (no gating).
    pub disable_selection: bool,
    /// Measure novelty on mean-centered probability vectors instead of the
    /// raw ones (spreads the cosine over [−1, 1] for small class counts).
    pub cosine_centered: bool,
}

impl Default for FredaConfig {
    fn default() -> Self {
        FredaConfig {
            clusters: default_clusters(),
            kmeans_size: default_kmeans_size(),
            comm_interval: default_comm_interval(),
            alpha: default_alpha(),
            sigma: default_sigma(),
            lambda: default_lambda(),
            h0: None,
            eps: default_eps(),
            lr: default_lr(),
            batch_size: default_batch_size(),
            disable_fd: false,
            disable_fa: false,
            disable_selection: false,
            cosine_centered: false,
        }
    }
}

impl FredaConfig {
    /// Validates every field, naming the offending key on failure.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.clusters == 0 {
            return Err(Error::config("clusters", "need at least one cluster"));
        }
        if self.kmeans_size < self.clusters {
            return Err(Error::config(
                "kmeans_size",
                format!(
                    "repository capacity {} is smaller than clusters {}",
                    self.kmeans_size, self.clusters
                ),
            ));
        }
        if self.comm_interval == 0 {
            return Err(Error::config("comm_interval", "must be ≥ 1"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "must be finite and ≥ 0"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("sigma", "must be finite and > 0"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be finite and ≥ 0"));
        }
        let max_h = (num_classes as f64).ln();
        let h0 = self.entropy_gate(num_classes);
        if !(h0 > 0.0 && h0 <= max_h) {
            return Err(Error::config(
                "h0",
                format!("entropy gate must lie in (0, ln C] = (0, {max_h:.4}], got {h0}"),
            ));
        }
        if !(self.eps > 0.0 && self.eps <= 1.0) {
            return Err(Error::config("eps", "must lie in (0, 1]"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be finite and ≥ 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be ≥ 1"));
        }
        Ok(())
    }

    /// The resolved entropy gate: explicit `h0` or `0.4·ln C`.
    pub fn entropy_gate(&self, num_classes: usize) -> f64 {
        self.h0
            .unwrap_or_else(|| 0.4 * (num_classes as f64).ln())
    }

    /// Branch count after ablation: one when clustering is disabled.
    pub fn effective_clusters(&self) -> usize {
        if self.disable_fd {
            1
        } else {
            self.clusters
        }
    }
}

/// Cosine similarity between a probability row and the branch reference;
/// optionally on mean-centered vectors. Zero when either norm vanishes.
fn cosine(y: &[f64], ybar: &[f64], centered: bool) -> f64 {
    let c = y.len() as f64;
    let (my, mb) = if centered {
        (
            y.iter().sum::<f64>() / c,
            ybar.iter().sum::<f64>() / c,
        )
    } else {
        (0.0, 0.0)
    };
    let mut dot = 0.0;
    let mut ny = 0.0;
    let mut nb = 0.0;
    for (a, b) in y.iter().zip(ybar) {
        let a = a - my;
        let b = b - mb;
        dot += a * b;
        ny += a * a;
        nb += b * b;
    }
    let denom = (ny * nb).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        dot / denom
    }
}

/// Runs the confidence/novelty gate sequentially over pool-ordered
/// probability rows, updating the running mean `ybar` with each kept row.
/// Returns the kept row indices in order.
fn run_selection(
    probs: &Tensor,
    entropy: &[f64],
    ybar: &mut [f64],
    h0: f64,
    eps: f64,
    centered: bool,
) -> Vec<usize> {
    let classes = ybar.len();
    let mut keep = Vec::new();
    for (i, h) in entropy.iter().enumerate() {
        let row = &probs.data()[i * classes..(i + 1) * classes];
        if *h < h0 && cosine(row, ybar, centered).abs() < eps {
            keep.push(i);
            for (o, v) in ybar.iter_mut().zip(row) {
                *o = (1.0 - YBAR_MOMENTUM) * *o + YBAR_MOMENTUM * v;
            }
        }
    }
    keep
}

/// One cluster's local state: parameters, its sliding sample pool, the
/// running prediction mean, and routing count since the last aggregation.
struct LocalBranch {
    params: ParamMap,
    pool: VecDeque<Tensor>,
    ybar: Vec<f64>,
    count: usize,
    rng: SeededRng,
}

impl LocalBranch {
    fn pool_batch(&self) -> Result<Tensor> {
        let first = self.pool.front().expect("pool_batch on empty pool");
        let dims = first.dims().to_vec();
        let mut data = Vec::with_capacity(self.pool.len() * first.len());
        for img in &self.pool {
            data.extend_from_slice(img.data());
        }
        let mut full = vec![self.pool.len()];
        full.extend_from_slice(&dims);
        Tensor::new(full, data)
    }
}

/// The decentralized adapter. Implements [`Adapter`], so the harness drives
/// it exactly like the baselines.
pub struct FredaAdapter {
    model: SmallCnn,
    cfg: FredaConfig,
    h0: f64,
    branches: Vec<LocalBranch>,
    repo: FeatureRepository,
    state: ClusterState,
    kmeans_rng: SeededRng,
    steps_done: usize,
    numeric_aborts: usize,
}

impl FredaAdapter {
    pub fn new(
        model: SmallCnn,
        checkpoint: &Checkpoint,
        cfg: FredaConfig,
        rng: &SeededRng,
    ) -> Result<Self> {
        if checkpoint.arch() != ARCH_ID {
            return Err(Error::format(format!(
                "checkpoint architecture {:?} is not {ARCH_ID:?}",
                checkpoint.arch()
            )));
        }
        model.validate_params(checkpoint.params())?;
        cfg.validate(model.num_classes)?;
        let k = cfg.effective_clusters();
        let branches = (0..k)
            .map(|i| LocalBranch {
                params: checkpoint.params().clone(),
                pool: VecDeque::with_capacity(cfg.batch_size),
                ybar: vec![1.0 / model.num_classes as f64; model.num_classes],
                count: 0,
                rng: rng.substream(&format!("augment:cluster-{i}")),
            })
            .collect();
        Ok(FredaAdapter {
            model,
            h0: cfg.entropy_gate(model.num_classes),
            repo: FeatureRepository::new(cfg.kmeans_size),
            state: ClusterState::new(),
            kmeans_rng: rng.substream("kmeans"),
            branches,
            cfg,
            steps_done: 0,
            numeric_aborts: 0,
        })
    }

    /// Completed stream steps.
    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    /// Routes each sample to a branch. With clustering disabled everything
    /// goes to branch 0; otherwise the batch's high-frequency signatures are
    /// pushed into the repository and assigned by warm-started k-means.
    fn route(&mut self, batch: &ImageBatch) -> Result<Vec<usize>> {
        let n = batch.len();
        if self.cfg.disable_fd {
            return Ok(vec![0; n]);
        }
        let dims = batch.images().dims();
        let stride: usize = dims[1..].iter().product();
        let image_dims = dims[1..].to_vec();
        let mut feats = Vec::with_capacity(n);
        for i in 0..n {
            let img = Tensor::new(
                image_dims.clone(),
                batch.images().data()[i * stride..(i + 1) * stride].to_vec(),
            )?;
            feats.push(high_freq_feature(&img)?.into_data());
        }
        self.repo.push(&feats)?;
        debug_assert!(self.repo.len() <= self.cfg.kmeans_size);
        self.state = kmeans_step(
            &self.repo,
            self.cfg.effective_clusters(),
            &self.state,
            KMEANS_MAX_ITER,
            KMEANS_TOL,
            &mut self.kmeans_rng,
        )?;
        let all = &self.state.assignments;
        Ok(all[all.len() - n..].to_vec())
    }

    /// Routing-weighted merge of all branch parameters; every branch adopts
    /// the merged state and counts reset. Skipped when no samples were
    /// routed since the previous merge.
    fn aggregate(&mut self) -> Result<()> {
        let total: usize = self.branches.iter().map(|b| b.count).sum();
        if total == 0 {
            return Ok(());
        }
        let weights: Vec<f64> = self
            .branches
            .iter()
            .map(|b| b.count as f64 / total as f64)
            .collect();
        let maps: Vec<&ParamMap> = self.branches.iter().map(|b| &b.params).collect();
        let merged = weighted_average(&maps, &weights)?;
        for b in &mut self.branches {
            b.params = merged.clone();
            b.count = 0;
        }
        Ok(())
    }
}

impl Adapter for FredaAdapter {
    fn name(&self) -> &'static str {
        "freda"
    }

    /// Training steps aborted because the loss left the finite range
    /// (the branch keeps its pre-step parameters).
    fn numeric_aborts(&self) -> usize {
        self.numeric_aborts
    }

    fn step(&mut self, batch: &ImageBatch) -> Result<StepOutput> {
        let n = batch.len();
        let classes = self.model.num_classes;
        let labels = self.route(batch)?;
        let t = self.steps_done + 1;

        let dims = batch.images().dims().to_vec();
        let stride: usize = dims[1..].iter().product();
        let mut logits_flat = vec![0.0; n * classes];
        let mut considered = 0;
        let mut selected_total = 0;
        let mut loss_sum = 0.0;
        let mut loss_count = 0;

        for k in 0..self.branches.len() {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == k).collect();
            let branch = &mut self.branches[k];
            branch.count += members.len();
            for &i in &members {
                if branch.pool.len() == self.cfg.batch_size {
                    branch.pool.pop_front();
                }
                branch.pool.push_back(Tensor::new(
                    dims[1..].to_vec(),
                    batch.images().data()[i * stride..(i + 1) * stride].to_vec(),
                )?);
            }
            debug_assert!(branch.pool.len() <= self.cfg.batch_size);
            if members.is_empty() {
                continue;
            }

            let pool_batch = branch.pool_batch()?;
            let m = pool_batch.dims()[0];

            // Confidence/novelty gate over the pool, oldest first.
            let mut gate_logits: Option<Tensor> = None;
            let selected: Vec<usize> = if self.cfg.disable_selection {
                considered += m;
                (0..m).collect()
            } else if m >= 2 {
                considered += m;
                let (logits, _) =
                    self.model
                        .forward(&branch.params, &pool_batch, BnMode::BatchStats)?;
                let (probs, ent) = softmax_entropy(&logits)?;
                let picked = run_selection(
                    &probs,
                    &ent,
                    &mut branch.ybar,
                    self.h0,
                    self.cfg.eps,
                    self.cfg.cosine_centered,
                );
                gate_logits = Some(logits);
                picked
            } else {
                Vec::new()
            };
            selected_total += selected.len();

            // One batched SGD step on the gated pool samples.
            let mut updated = false;
            if selected.len() >= 2 {
                let sel_batch = pool_batch.gather_first(&selected)?;
                let spec = if self.cfg.disable_fa {
                    LossSpec::Entropy { weights: None }
                } else {
                    let sel_dims = sel_batch.dims().to_vec();
                    let img_len: usize = sel_dims[1..].iter().product();
                    let mut aug = Vec::with_capacity(sel_batch.len());
                    for s in 0..sel_dims[0] {
                        let img = Tensor::new(
                            sel_dims[1..].to_vec(),
                            sel_batch.data()[s * img_len..(s + 1) * img_len].to_vec(),
                        )?;
                        let perturbed =
                            augment(&img, self.cfg.alpha, self.cfg.sigma, &mut branch.rng)?;
                        aug.extend_from_slice(perturbed.data());
                    }
                    LossSpec::Combined {
                        lambda: self.cfg.lambda,
                        augmented: Tensor::new(sel_dims, aug)?,
                    }
                };
                match self.model.grad(
                    &branch.params,
                    &sel_batch,
                    BnMode::BatchStats,
                    &spec,
                    AdaptableSet::BnAffine,
                ) {
                    Ok(res) => {
                        sgd_step(&mut branch.params, &res.grads, self.cfg.lr)?;
                        loss_sum += res.loss;
                        loss_count += 1;
                        updated = true;
                    }
                    Err(Error::Numeric(_)) => {
                        // Loss left the finite range: skip the update and
                        // keep the branch's previous parameters.
                        self.numeric_aborts += 1;
                    }
                    Err(e) => return Err(e),
                }
            }

            // Post-update predictions for this batch's members: they are the
            // newest pool entries, so the last rows of the pool forward.
            // If no update landed, the gate forward already evaluated these
            // exact parameters on this exact pool, so its logits are reused.
            // A singleton pool cannot support batch statistics, so it falls
            // back to the stored source statistics.
            let member_logits: Vec<f64> = if m >= 2 {
                let logits = match gate_logits {
                    Some(l) if !updated => l,
                    _ => {
                        self.model
                            .forward(&branch.params, &pool_batch, BnMode::BatchStats)?
                            .0
                    }
                };
                logits.data()[(m - members.len()) * classes..].to_vec()
            } else {
                let (logits, _) =
                    self.model
                        .forward(&branch.params, &pool_batch, BnMode::SourceStats)?;
                logits.data().to_vec()
            };
            for (row, &i) in members.iter().enumerate() {
                logits_flat[i * classes..(i + 1) * classes]
                    .copy_from_slice(&member_logits[row * classes..(row + 1) * classes]);
            }
        }

        if t % self.cfg.comm_interval == 0 {
            self.aggregate()?;
        }
        self.steps_done = t;

        let logits = Tensor::new(vec![n, classes], logits_flat)?;
        let (probs, entropy) = softmax_entropy(&logits)?;
        Ok(StepOutput {
            predicted: argmax_rows(&probs),
            probs,
            entropy,
            cluster: labels,
            considered,
            selected: selected_total,
            loss: if loss_count > 0 {
                Some(loss_sum / loss_count as f64)
            } else {
                None
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::TentAdapter;
    use crate::model::{pretrain, PretrainConfig};
    use crate::stream::{apply_corruption, make_shapes_dataset, CorruptionKind, CorruptionSpec};

    fn setup() -> (SmallCnn, Checkpoint, Tensor) {
        let mut rng = SeededRng::from_seed(70);
        let ds = make_shapes_dataset(16, 2, 16, 16, &mut rng).unwrap();
        let model = SmallCnn::for_dataset(&ds).unwrap();
        let cfg = PretrainConfig {
            epochs: 1,
            lr: 0.02,
            batch_size: 8,
            momentum: 0.9,
        };
        let ck = pretrain(&model, &ds, &cfg, &SeededRng::from_seed(71)).unwrap();
        let batch = ds
            .images()
            .gather_first(&(0..8).collect::<Vec<_>>())
            .unwrap();
        (model, ck, batch)
    }

    #[test]
    fn config_validation_names_offending_keys() {
        let base = FredaConfig::default();
        let mut c = base.clone();
        c.clusters = 0;
        assert!(matches!(c.validate(4), Err(Error::InvalidConfig { ref key, .. }) if key == "clusters"));
        let mut c = base.clone();
        c.kmeans_size = 2;
        c.clusters = 3;
        assert!(matches!(c.validate(4), Err(Error::InvalidConfig { ref key, .. }) if key == "kmeans_size"));
        let mut c = base.clone();
        c.comm_interval = 0;
        assert!(matches!(c.validate(4), Err(Error::InvalidConfig { ref key, .. }) if key == "comm_interval"));
        let mut c = base.clone();
        c.h0 = Some(10.0); // above ln 4
        assert!(matches!(c.validate(4), Err(Error::InvalidConfig { ref key, .. }) if key == "h0"));
        let mut c = base.clone();
        c.eps = 0.0;
        assert!(matches!(c.validate(4), Err(Error::InvalidConfig { ref key, .. }) if key == "eps"));
        let mut c = base.clone();
        c.sigma = 0.0;
        assert!(matches!(c.validate(4), Err(Error::InvalidConfig { ref key, .. }) if key == "sigma"));
        assert!(base.validate(4).is_ok());
        assert!((base.entropy_gate(4) - 0.4 * 4.0_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn degenerate_configuration_matches_tent_bitwise() {
        // One cluster, no augmentation, no gating, merge every step: the
        // adapter must reproduce plain entropy minimization exactly.
        let (model, ck, batch) = setup();
        let cfg = FredaConfig {
            clusters: 1,
            comm_interval: 1,
            disable_fa: true,
            disable_selection: true,
            batch_size: 8,
            lr: 0.01,
            ..FredaConfig::default()
        };
        let mut freda = FredaAdapter::new(model, &ck, cfg, &SeededRng::from_seed(3)).unwrap();
        let mut tent = TentAdapter::new(model, &ck, 0.01, false).unwrap();
        for _ in 0..5 {
            let a = freda.step(&ImageBatch::new(batch.clone()).unwrap()).unwrap();
            let b = tent.step(&ImageBatch::new(batch.clone()).unwrap()).unwrap();
            assert_eq!(a.predicted, b.predicted);
            for (x, y) in a.probs.data().iter().zip(b.probs.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn aggregation_is_a_routing_weighted_average() {
        let (model, ck, _) = setup();
        let cfg = FredaConfig {
            clusters: 2,
            batch_size: 8,
            ..FredaConfig::default()
        };
        let mut adapter = FredaAdapter::new(model, &ck, cfg, &SeededRng::from_seed(4)).unwrap();
        for t in adapter.branches[0].params.values_mut() {
            for v in t.data_mut() {
                *v = 2.0;
            }
        }
        for t in adapter.branches[1].params.values_mut() {
            for v in t.data_mut() {
                *v = 4.0;
            }
        }
        adapter.branches[0].count = 1;
        adapter.branches[1].count = 3;
        adapter.aggregate().unwrap();
        // 2·(1/4) + 4·(3/4) = 3.5 exactly, on every parameter of every branch.
        for b in &adapter.branches {
            assert_eq!(b.count, 0);
            for t in b.params.values() {
                for v in t.data() {
                    assert_eq!(*v, 3.5);
                }
            }
        }
    }

    #[test]
    fn aggregation_skips_when_nothing_was_routed() {
        let (model, ck, _) = setup();
        let cfg = FredaConfig {
            clusters: 2,
            batch_size: 8,
            ..FredaConfig::default()
        };
        let mut adapter = FredaAdapter::new(model, &ck, cfg, &SeededRng::from_seed(5)).unwrap();
        for t in adapter.branches[0].params.values_mut() {
            for v in t.data_mut() {
                *v = 7.0;
            }
        }
        adapter.aggregate().unwrap();
        for v in adapter.branches[0].params.values().next().unwrap().data() {
            assert_eq!(*v, 7.0);
        }
    }

    #[test]
    fn selection_gate_filters_by_entropy_and_novelty() {
        // Rows: confident+novel (keep), uniform (entropy too high),
        // confident but aligned with the running mean (cosine too high).
        let probs = Tensor::new(
            vec![3, 3],
            vec![
                0.98, 0.01, 0.01, //
                1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, //
                0.01, 0.01, 0.98,
            ],
        )
        .unwrap();
        let ent: Vec<f64> = (0..3)
            .map(|i| {
                -probs.data()[i * 3..(i + 1) * 3]
                    .iter()
                    .map(|p| p * p.ln())
                    .sum::<f64>()
            })
            .collect();
        let h0 = 0.4 * 3.0_f64.ln();
        // Reference points away from class 0, towards class 2.
        let mut ybar = vec![0.01, 0.01, 0.98];
        let kept = run_selection(&probs, &ent, &mut ybar, h0, 0.05, false);
        assert_eq!(kept, vec![0]);
        // The kept row updated the running mean: ȳ = 0.9·old + 0.1·row.
        assert!((ybar[0] - (0.9 * 0.01 + 0.1 * 0.98)).abs() < 1e-12);
        assert!((ybar[2] - (0.9 * 0.98 + 0.1 * 0.01)).abs() < 1e-12);
    }

    #[test]
    fn selection_updates_reference_sequentially_in_pool_order() {
        let probs = Tensor::new(
            vec![2, 2],
            vec![0.95, 0.05, 0.05, 0.95],
        )
        .unwrap();
        let ent: Vec<f64> = (0..2)
            .map(|i| {
                -probs.data()[i * 2..(i + 1) * 2]
                    .iter()
                    .map(|p| p * p.ln())
                    .sum::<f64>()
            })
            .collect();
        let mut ybar = vec![0.5, 0.5];
        // eps = 1.0 disables the cosine clause; both rows pass the entropy
        // gate (H ≈ 0.199 < 0.277 = 0.4·ln 2) and update ȳ in order.
        let kept = run_selection(&probs, &ent, &mut ybar, 0.4 * 2.0_f64.ln(), 1.0, false);
        assert_eq!(kept, vec![0, 1]);
        let step1 = 0.9 * 0.5 + 0.1 * 0.95;
        let expect0 = 0.9 * step1 + 0.1 * 0.05;
        assert!((ybar[0] - expect0).abs() < 1e-12);
    }

    #[test]
    fn every_sample_gets_one_prediction_and_state_stays_bounded() {
        let (model, ck, batch) = setup();
        let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 5).unwrap();
        let mut crng = SeededRng::from_seed(80);
        let dims = batch.dims().to_vec();
        let stride: usize = dims[1..].iter().product();
        let mut data = Vec::new();
        for i in 0..8 {
            let img = Tensor::new(
                dims[1..].to_vec(),
                batch.data()[i * stride..(i + 1) * stride].to_vec(),
            )
            .unwrap();
            if i < 4 {
                data.extend_from_slice(img.data());
            } else {
                data.extend_from_slice(apply_corruption(&img, &spec, &mut crng).data());
            }
        }
        let mixed = Tensor::new(dims, data).unwrap();
        let cfg = FredaConfig {
            clusters: 2,
            kmeans_size: 32,
            batch_size: 8,
            eps: 1.0,
            comm_interval: 3,
            ..FredaConfig::default()
        };
        let mut adapter = FredaAdapter::new(model, &ck, cfg, &SeededRng::from_seed(6)).unwrap();
        for _ in 0..7 {
            let out = adapter.step(&ImageBatch::new(mixed.clone()).unwrap()).unwrap();
            assert_eq!(out.predicted.len(), 8);
            assert_eq!(out.cluster.len(), 8);
            for i in 0..8 {
                let s: f64 = out.probs.data()[i * 2..(i + 1) * 2].iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "row {i} sums to {s}");
            }
            assert!(adapter.repo.len() <= 32);
            for b in &adapter.branches {
                assert!(b.pool.len() <= 8);
            }
        }
        assert_eq!(adapter.steps_done(), 7);
    }

    #[test]
    fn adapter_is_seed_deterministic() {
        let (model, ck, batch) = setup();
        let cfg = FredaConfig {
            clusters: 2,
            batch_size: 8,
            eps: 1.0,
            ..FredaConfig::default()
        };
        let run = || {
            let mut adapter =
                FredaAdapter::new(model, &ck, cfg.clone(), &SeededRng::from_seed(9)).unwrap();
            let mut all = Vec::new();
            for _ in 0..4 {
                let out = adapter
                    .step(&ImageBatch::new(batch.clone()).unwrap())
                    .unwrap();
                all.extend(out.probs.data().to_vec());
            }
            all
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn disable_fd_forces_a_single_branch() {
        let (model, ck, batch) = setup();
        let cfg = FredaConfig {
            clusters: 4,
            disable_fd: true,
            batch_size: 8,
            ..FredaConfig::default()
        };
        let mut adapter = FredaAdapter::new(model, &ck, cfg, &SeededRng::from_seed(10)).unwrap();
        assert_eq!(adapter.branches.len(), 1);
        let out = adapter.step(&ImageBatch::new(batch).unwrap()).unwrap();
        assert!(out.cluster.iter().all(|&c| c == 0));
        assert_eq!(adapter.repo.len(), 0); // no features pushed
    }
}
