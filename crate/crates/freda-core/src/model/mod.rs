//! The adaptable network: a compact 3-block CNN with batch normalization,
//! forward in either statistics mode, exact reverse-mode gradients for a
//! designated adaptable parameter subset, SGD, pretraining, and the
//! parameter-space weighted average used for branch aggregation.

mod ops;
#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
mod sysblas;

use std::collections::BTreeMap;

use crate::checkpoint::{Checkpoint, ParamMap};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::stream::LabeledDataset;
use crate::tensor::Tensor;

use ops::{BnStats, ConvScratch};

/// Architecture identifier stored in checkpoints.
pub const ARCH_ID: &str = "small-cnn-v1";

/// Output channels of the three conv blocks.
const BLOCK_CHANNELS: [usize; 3] = [32, 64, 128];

thread_local! {
    /// Convolution workspace reused across forward/backward calls so the
    /// multi-megabyte im2col buffers are not reallocated per batch.
    static CONV_SCRATCH: std::cell::RefCell<ConvScratch> =
        std::cell::RefCell::new(ConvScratch::default());
}

/// Which statistics batch normalization uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Stored running statistics from pretraining.
    SourceStats,
    /// Statistics of the current batch (test-time batch normalization);
    /// requires batch size ≥ 2.
    BatchStats,
}

/// The parameter subset that receives gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptableSet {
    /// BN scale/shift only — the test-time adaptation convention.
    BnAffine,
    /// Every trainable parameter (pretraining); running stats stay
    /// EMA-updated, never gradient-trained.
    All,
}

impl AdaptableSet {
    /// Parameter names in this set, in a fixed order.
    pub fn names(self) -> Vec<String> {
        let mut out = Vec::new();
        for b in 1..=3 {
            if self == AdaptableSet::All {
                out.push(format!("conv{b}.weight"));
            }
            out.push(format!("bn{b}.gamma"));
            out.push(format!("bn{b}.beta"));
        }
        if self == AdaptableSet::All {
            out.push("fc.weight".into());
            out.push("fc.bias".into());
        }
        out
    }
}

/// Loss functional for [`SmallCnn::grad`]. The `batch` argument of `grad` is
/// always the tensor being forwarded and differentiated.
#[derive(Debug, Clone)]
pub enum LossSpec {
    /// Mean per-sample prediction entropy; optional per-sample weights
    /// (the mean divisor stays the batch size).
    Entropy { weights: Option<Vec<f64>> },
    /// Mean cross-entropy of the batch's probabilities against fixed soft
    /// targets (one probability row per sample).
    Consistency { targets: Tensor },
    /// Entropy of the batch plus `lambda` × cross-entropy of the augmented
    /// copy against the batch's own probabilities, detached.
    Combined { lambda: f64, augmented: Tensor },
}

/// Gradients of a loss with respect to the adaptable parameters.
#[derive(Debug, Clone)]
pub struct GradResult {
    pub loss: f64,
    pub grads: ParamMap,
}

/// Forward-pass bookkeeping needed for the backward pass.
pub struct Cache {
    mode: BnMode,
    n: usize,
    /// Pre-BN conv outputs per block.
    conv_out: Vec<Vec<f64>>,
    /// Post-pool activations per block (conv input of the next block).
    pool_out: Vec<Vec<f64>>,
    /// Normalization statistics actually used per block.
    stats: Vec<BnStats>,
    /// Global-average-pool output `[n·128]` (classifier input).
    pooled: Vec<f64>,
}

impl Cache {
    /// Batch statistics of block `b` (0-based) as (mean, biased variance);
    /// meaningful in `BatchStats` mode, running stats otherwise.
    pub fn block_stats(&self, b: usize) -> (&[f64], &[f64]) {
        (&self.stats[b].mean, &self.stats[b].var)
    }
}

/// Shape descriptor of the 3-block CNN:
/// `[conv 3×3 (no bias) → BN → ReLU → 2×2 avg pool] ×3 → global avg pool →
/// linear`. Channels 3→32→64→128.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SmallCnn {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl SmallCnn {
    pub fn new(in_channels: usize, height: usize, width: usize, num_classes: usize) -> Result<Self> {
        if height % 8 != 0 || width % 8 != 0 || height < 8 || width < 8 {
            return Err(Error::config(
                "size",
                format!("input sides must be multiples of 8, got {height}×{width}"),
            ));
        }
        if num_classes < 2 {
            return Err(Error::config("classes", "need at least 2 classes"));
        }
        if in_channels == 0 {
            return Err(Error::config("channels", "need at least 1 input channel"));
        }
        Ok(SmallCnn {
            in_channels,
            height,
            width,
            num_classes,
        })
    }

    pub fn for_dataset(ds: &LabeledDataset) -> Result<Self> {
        let (c, h, w) = ds.image_dims();
        SmallCnn::new(c, h, w, ds.num_classes())
    }

    /// Expected parameter names and shapes.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for (b, &cout) in BLOCK_CHANNELS.iter().enumerate() {
            let i = b + 1;
            out.push((format!("conv{i}.weight"), vec![cout, cin, 3, 3]));
            out.push((format!("bn{i}.gamma"), vec![cout]));
            out.push((format!("bn{i}.beta"), vec![cout]));
            out.push((format!("bn{i}.running_mean"), vec![cout]));
            out.push((format!("bn{i}.running_var"), vec![cout]));
            cin = cout;
        }
        out.push(("fc.weight".into(), vec![self.num_classes, BLOCK_CHANNELS[2]]));
        out.push(("fc.bias".into(), vec![self.num_classes]));
        out
    }

    /// He-style initialization; BN at identity, running stats at (0, 1).
    pub fn init_params(&self, rng: &mut SeededRng) -> ParamMap {
        let mut params = ParamMap::new();
        for (name, dims) in self.param_shapes() {
            let n: usize = dims.iter().product();
            let tensor = if name.starts_with("conv") {
                let fan_in = (dims[1] * dims[2] * dims[3]) as f64;
                let std = (2.0 / fan_in).sqrt();
                Tensor::new(dims, (0..n).map(|_| std * rng.normal()).collect()).unwrap()
            } else if name == "fc.weight" {
                let std = (1.0 / dims[1] as f64).sqrt();
                Tensor::new(dims, (0..n).map(|_| std * rng.normal()).collect()).unwrap()
            } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
                Tensor::full(dims, 1.0)
            } else {
                Tensor::zeros(dims)
            };
            params.insert(name, tensor);
        }
        params
    }

    /// Verifies the parameter map has exactly the expected names and shapes.
    pub fn validate_params(&self, params: &ParamMap) -> Result<()> {
        let expected = self.param_shapes();
        if params.len() != expected.len() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, dims) in &expected {
            let t = params
                .get(name)
                .ok_or_else(|| Error::shape(format!("missing parameter {name}")))?;
            if t.dims() != dims.as_slice() {
                return Err(Error::shape(format!(
                    "{name}: expected {dims:?}, got {:?}",
                    t.dims()
                )));
            }
        }
        Ok(())
    }

    fn validate_batch(&self, batch: &Tensor) -> Result<usize> {
        let d = batch.dims();
        if d.len() != 4 || d[1] != self.in_channels || d[2] != self.height || d[3] != self.width {
            return Err(Error::shape(format!(
                "batch {d:?} does not match {}×{}×{} input",
                self.in_channels, self.height, self.width
            )));
        }
        Ok(d[0])
    }

    /// Forward pass to logits `[n, C]`. In `BatchStats` mode the BN layers
    /// normalize with the current batch's per-channel mean and biased
    /// variance (ε = 1e−5); batches of one are rejected in that mode.
    pub fn forward(&self, params: &ParamMap, batch: &Tensor, mode: BnMode) -> Result<(Tensor, Cache)> {
        let n = self.validate_batch(batch)?;
        self.validate_params(params)?;
        if mode == BnMode::BatchStats && n < 2 {
            return Err(Error::shape("batch_stats mode needs batch size ≥ 2"));
        }
        let mut conv_out = Vec::with_capacity(3);
        let mut pool_out: Vec<Vec<f64>> = Vec::with_capacity(3);
        let mut stats = Vec::with_capacity(3);
        let mut cin = self.in_channels;
        let (mut h, mut w) = (self.height, self.width);
        CONV_SCRATCH.with(|cell| {
            let scratch = &mut *cell.borrow_mut();
            for (b, &cout) in BLOCK_CHANNELS.iter().enumerate() {
                let i = b + 1;
                let input: &[f64] = if b == 0 { batch.data() } else { &pool_out[b - 1] };
                let hw = h * w;
                let mut conv = vec![0.0; n * cout * hw];
                ops::conv_forward(
                    input,
                    n,
                    cin,
                    h,
                    w,
                    params[&format!("conv{i}.weight")].data(),
                    cout,
                    scratch,
                    &mut conv,
                );
                let st = match mode {
                    BnMode::BatchStats => ops::bn_batch_stats(&conv, n, cout, hw),
                    BnMode::SourceStats => ops::bn_running_stats(
                        params[&format!("bn{i}.running_mean")].data(),
                        params[&format!("bn{i}.running_var")].data(),
                    ),
                };
                let mut pooled = vec![0.0; n * cout * hw / 4];
                ops::bn_relu_pool_forward(
                    &conv,
                    &st,
                    params[&format!("bn{i}.gamma")].data(),
                    params[&format!("bn{i}.beta")].data(),
                    n,
                    cout,
                    h,
                    w,
                    &mut pooled,
                );
                conv_out.push(conv);
                stats.push(st);
                pool_out.push(pooled);
                cin = cout;
                h /= 2;
                w /= 2;
            }
        });
        // Global average pool over the final (h, w) grid.
        let feat = BLOCK_CHANNELS[2];
        let hw = h * w;
        let mut pooled = vec![0.0; n * feat];
        for i in 0..n {
            for c in 0..feat {
                let s: f64 = pool_out[2][(i * feat + c) * hw..][..hw].iter().sum();
                pooled[i * feat + c] = s / hw as f64;
            }
        }
        // Linear head.
        let fc_w = params["fc.weight"].data();
        let fc_b = params["fc.bias"].data();
        let classes = self.num_classes;
        let mut logits = vec![0.0; n * classes];
        for i in 0..n {
            for j in 0..classes {
                let mut acc = fc_b[j];
                for c in 0..feat {
                    acc += fc_w[j * feat + c] * pooled[i * feat + c];
                }
                logits[i * classes + j] = acc;
            }
        }
        Ok((
            Tensor::new(vec![n, classes], logits)?,
            Cache {
                mode,
                n,
                conv_out,
                pool_out,
                stats,
                pooled,
            },
        ))
    }

    /// Loss value only (no gradients). For `Combined`, the pseudo-targets are
    /// the batch's own probabilities under these parameters.
    pub fn loss_value(
        &self,
        params: &ParamMap,
        batch: &Tensor,
        mode: BnMode,
        loss: &LossSpec,
    ) -> Result<f64> {
        let (logits, _) = self.forward(params, batch, mode)?;
        let (probs, lnp, ent) = softmax_full(&logits);
        let n = batch.dims()[0];
        let value = match loss {
            LossSpec::Entropy { weights } => entropy_loss_value(&ent, weights.as_deref(), n)?,
            LossSpec::Consistency { targets } => {
                check_targets(targets, n, self.num_classes)?;
                cross_entropy_value(targets.data(), &lnp, n)
            }
            LossSpec::Combined { lambda, augmented } => {
                check_lambda(*lambda)?;
                let mut value = ent.iter().sum::<f64>() / n as f64;
                if *lambda > 0.0 {
                    let (logits_aug, _) = self.forward(params, augmented, mode)?;
                    if logits_aug.dims() != logits.dims() {
                        return Err(Error::shape("augmented batch size mismatch"));
                    }
                    let (_, lnp_aug, _) = softmax_full(&logits_aug);
                    value += lambda * cross_entropy_value(probs.data(), &lnp_aug, n);
                }
                value
            }
        };
        if !value.is_finite() {
            return Err(Error::numeric(format!("non-finite loss {value}")));
        }
        Ok(value)
    }

    /// Exact reverse-mode gradients of the mean loss w.r.t. the adaptable
    /// parameters. In `BatchStats` mode the gradient flows through the batch
    /// statistics themselves. Errors on a non-finite loss.
    pub fn grad(
        &self,
        params: &ParamMap,
        batch: &Tensor,
        mode: BnMode,
        loss: &LossSpec,
        adaptable: AdaptableSet,
    ) -> Result<GradResult> {
        let forward = self.forward(params, batch, mode)?;
        self.grad_from_forward(params, batch, forward, loss, adaptable)
    }

    /// [`Self::grad`] with the forward pass of `batch` under these exact
    /// parameters supplied by the caller — typically logits that were
    /// already computed for a selection gate. The forward pass is a pure
    /// function of (parameters, batch, statistics mode), so the result is
    /// identical to recomputing it.
    pub fn grad_from_forward(
        &self,
        params: &ParamMap,
        batch: &Tensor,
        forward: (Tensor, Cache),
        loss: &LossSpec,
        adaptable: AdaptableSet,
    ) -> Result<GradResult> {
        let (logits, cache) = forward;
        let mode = cache.mode;
        let (probs, lnp, ent) = softmax_full(&logits);
        let n = cache.n;
        let classes = self.num_classes;
        let (value, grads) = match loss {
            LossSpec::Entropy { weights } => {
                let value = entropy_loss_value(&ent, weights.as_deref(), n)?;
                let dlogits = entropy_dlogits(&probs, &lnp, &ent, weights.as_deref(), n);
                (
                    value,
                    self.backward_from_dlogits(params, batch, &cache, &dlogits, adaptable),
                )
            }
            LossSpec::Consistency { targets } => {
                check_targets(targets, n, classes)?;
                let value = cross_entropy_value(targets.data(), &lnp, n);
                let mut dlogits = vec![0.0; n * classes];
                for (d, (&p, &t)) in dlogits
                    .iter_mut()
                    .zip(probs.data().iter().zip(targets.data()))
                {
                    *d = (p - t) / n as f64;
                }
                (
                    value,
                    self.backward_from_dlogits(params, batch, &cache, &dlogits, adaptable),
                )
            }
            LossSpec::Combined { lambda, augmented } => {
                check_lambda(*lambda)?;
                let mut value = ent.iter().sum::<f64>() / n as f64;
                let dlogits = entropy_dlogits(&probs, &lnp, &ent, None, n);
                let mut grads =
                    self.backward_from_dlogits(params, batch, &cache, &dlogits, adaptable);
                if *lambda > 0.0 {
                    let (logits_aug, cache_aug) = self.forward(params, augmented, mode)?;
                    if logits_aug.dims() != logits.dims() {
                        return Err(Error::shape("augmented batch size mismatch"));
                    }
                    let (probs_aug, lnp_aug, _) = softmax_full(&logits_aug);
                    value += lambda * cross_entropy_value(probs.data(), &lnp_aug, n);
                    let mut dl_aug = vec![0.0; n * classes];
                    for (d, (&pa, &t)) in dl_aug
                        .iter_mut()
                        .zip(probs_aug.data().iter().zip(probs.data()))
                    {
                        *d = lambda * (pa - t) / n as f64;
                    }
                    let aug_grads = self.backward_from_dlogits(
                        params, augmented, &cache_aug, &dl_aug, adaptable,
                    );
                    add_grads(&mut grads, aug_grads);
                }
                (value, grads)
            }
        };
        if !value.is_finite() {
            return Err(Error::numeric(format!("non-finite loss {value}")));
        }
        Ok(GradResult { loss: value, grads })
    }

    /// Reverse pass from logit gradients down to the adaptable parameters.
    fn backward_from_dlogits(
        &self,
        params: &ParamMap,
        batch: &Tensor,
        cache: &Cache,
        dlogits: &[f64],
        adaptable: AdaptableSet,
    ) -> ParamMap {
        let n = cache.n;
        let classes = self.num_classes;
        let feat = BLOCK_CHANNELS[2];
        let (h3, w3) = (self.height / 8, self.width / 8);
        let hw3 = h3 * w3;
        let fc_w = params["fc.weight"].data();
        let mut grads = ParamMap::new();

        if adaptable == AdaptableSet::All {
            let mut dw = vec![0.0; classes * feat];
            let mut db = vec![0.0; classes];
            for i in 0..n {
                for j in 0..classes {
                    let g = dlogits[i * classes + j];
                    db[j] += g;
                    for c in 0..feat {
                        dw[j * feat + c] += g * cache.pooled[i * feat + c];
                    }
                }
            }
            grads.insert(
                "fc.weight".into(),
                Tensor::new(vec![classes, feat], dw).unwrap(),
            );
            grads.insert("fc.bias".into(), Tensor::new(vec![classes], db).unwrap());
        }

        // d(global-average-pool input): spread dpooled uniformly.
        let mut dcur = vec![0.0; n * feat * hw3];
        for i in 0..n {
            for c in 0..feat {
                let mut g = 0.0;
                for j in 0..classes {
                    g += dlogits[i * classes + j] * fc_w[j * feat + c];
                }
                let g = g / hw3 as f64;
                for v in &mut dcur[(i * feat + c) * hw3..][..hw3] {
                    *v = g;
                }
            }
        }

        CONV_SCRATCH.with(|cell| {
            let scratch = &mut *cell.borrow_mut();
            for b in (0..3).rev() {
                let i = b + 1;
                let cout = BLOCK_CHANNELS[b];
                let (hb, wb) = (self.height >> b, self.width >> b);
                let hw = hb * wb;
                // Average-pool backward: dcur is at the pool output of block b.
                let mut drelu = vec![0.0; n * cout * hw];
                ops::avgpool2_backward(&dcur, n, cout, hb, wb, &mut drelu);
                // ReLU mask, recomputed with the forward's exact expression;
                // the select form keeps the loop branch-free.
                let x = &cache.conv_out[b];
                let st = &cache.stats[b];
                let gamma = params[&format!("bn{i}.gamma")].data();
                let beta = params[&format!("bn{i}.beta")].data();
                for row in 0..n {
                    for ch in 0..cout {
                        let (mu, inv, g, be) = (st.mean[ch], st.invstd[ch], gamma[ch], beta[ch]);
                        let xs = &x[(row * cout + ch) * hw..][..hw];
                        let ds = &mut drelu[(row * cout + ch) * hw..][..hw];
                        for (d, v) in ds.iter_mut().zip(xs) {
                            *d = if g * (v - mu) * inv + be <= 0.0 { 0.0 } else { *d };
                        }
                    }
                }
                let want_dx = b > 0 || adaptable == AdaptableSet::All;
                let bg = match cache.mode {
                    BnMode::BatchStats => {
                        ops::bn_backward_batch(x, st, gamma, &drelu, n, cout, hw, want_dx)
                    }
                    BnMode::SourceStats => {
                        ops::bn_backward_source(x, st, gamma, &drelu, n, cout, hw, want_dx)
                    }
                };
                grads.insert(
                    format!("bn{i}.gamma"),
                    Tensor::new(vec![cout], bg.dgamma).unwrap(),
                );
                grads.insert(
                    format!("bn{i}.beta"),
                    Tensor::new(vec![cout], bg.dbeta).unwrap(),
                );
                if let Some(dconv) = bg.dx {
                    let cin_b = if b == 0 {
                        self.in_channels
                    } else {
                        BLOCK_CHANNELS[b - 1]
                    };
                    let input: &[f64] = if b == 0 {
                        batch.data()
                    } else {
                        &cache.pool_out[b - 1]
                    };
                    let (dw, dx) = ops::conv_backward(
                        input,
                        n,
                        cin_b,
                        hb,
                        wb,
                        params[&format!("conv{i}.weight")].data(),
                        cout,
                        &dconv,
                        adaptable == AdaptableSet::All,
                        b > 0,
                        scratch,
                    );
                    if let Some(dw) = dw {
                        grads.insert(
                            format!("conv{i}.weight"),
                            Tensor::new(vec![cout, cin_b, 3, 3], dw).unwrap(),
                        );
                    }
                    if let Some(dx) = dx {
                        dcur = dx;
                    }
                }
            }
        });
        grads
    }

    /// Accuracy on a labeled dataset using stored running statistics.
    pub fn evaluate(&self, params: &ParamMap, ds: &LabeledDataset, batch_size: usize) -> Result<f64> {
        if ds.is_empty() {
            return Err(Error::shape("evaluate: empty dataset"));
        }
        let idx: Vec<usize> = (0..ds.len()).collect();
        let mut correct = 0usize;
        for chunk in idx.chunks(batch_size.max(1)) {
            let images = ds.images().gather_first(chunk)?;
            let (logits, _) = self.forward(params, &images, BnMode::SourceStats)?;
            let preds = argmax_rows(&logits);
            for (&i, p) in chunk.iter().zip(preds) {
                if ds.labels()[i] == p {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / ds.len() as f64)
    }
}

/// Per-channel mean and biased variance of an `[n, c, h, w]` tensor — the
/// exact statistics a `BatchStats` BN layer would use on this data.
pub fn batch_channel_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = x.dims();
    if d.len() != 4 {
        return Err(Error::shape(format!("expected [n,c,h,w], got {d:?}")));
    }
    let st = ops::bn_batch_stats(x.data(), d[0], d[1], d[2] * d[3]);
    Ok((st.mean, st.var))
}

/// Numerically stabilized softmax with per-sample Shannon entropy (nats).
pub fn softmax_entropy(logits: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    if logits.dims().len() != 2 {
        return Err(Error::shape("softmax_entropy expects [n, C] logits"));
    }
    if !logits.all_finite() {
        return Err(Error::numeric("non-finite logits"));
    }
    let (probs, _, ent) = softmax_full(logits);
    Ok((probs, ent))
}

/// Row argmax; ties resolve to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let c = t.dims()[1];
    t.data()
        .chunks(c)
        .map(|row| {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// (probs, log-probs, entropy) with rowwise max-shift stabilization.
fn softmax_full(logits: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let n = logits.dims()[0];
    let c = logits.dims()[1];
    let mut probs = vec![0.0; n * c];
    let mut lnp = vec![0.0; n * c];
    let mut ent = vec![0.0; n];
    for i in 0..n {
        let row = &logits.data()[i * c..(i + 1) * c];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for &v in row {
            z += (v - m).exp();
        }
        let lz = z.ln();
        let mut h = 0.0;
        for j in 0..c {
            let lp = row[j] - m - lz;
            let p = lp.exp();
            probs[i * c + j] = p;
            lnp[i * c + j] = lp;
            h -= p * lp;
        }
        // Clamp the tiny negative rounding residue of near-one-hot rows, but
        // let NaN through (f64::max would silently swallow it).
        ent[i] = if h < 0.0 { 0.0 } else { h };
    }
    (Tensor::new(vec![n, c], probs).unwrap(), lnp, ent)
}

fn entropy_loss_value(ent: &[f64], weights: Option<&[f64]>, n: usize) -> Result<f64> {
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::shape(format!(
                "{} weights for batch of {n}",
                w.len()
            )));
        }
        Ok(ent.iter().zip(w).map(|(h, wi)| h * wi).sum::<f64>() / n as f64)
    } else {
        Ok(ent.iter().sum::<f64>() / n as f64)
    }
}

/// d(L)/d(logits) for the weighted mean entropy:
/// dH/dz_k = −p_k·(ln p_k + H).
fn entropy_dlogits(
    probs: &Tensor,
    lnp: &[f64],
    ent: &[f64],
    weights: Option<&[f64]>,
    n: usize,
) -> Vec<f64> {
    let c = probs.dims()[1];
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let w = weights.map_or(1.0, |w| w[i]) / n as f64;
        for j in 0..c {
            let p = probs.data()[i * c + j];
            out[i * c + j] = -w * p * (lnp[i * c + j] + ent[i]);
        }
    }
    out
}

/// −(1/n)·ΣΣ targets·ln p.
fn cross_entropy_value(targets: &[f64], lnp: &[f64], n: usize) -> f64 {
    -targets.iter().zip(lnp).map(|(t, l)| t * l).sum::<f64>() / n as f64
}

fn check_targets(targets: &Tensor, n: usize, c: usize) -> Result<()> {
    if targets.dims() != [n, c] {
        return Err(Error::shape(format!(
            "targets {:?} for batch [{n}, {c}]",
            targets.dims()
        )));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) {
        return Err(Error::config("lambda", "must be ≥ 0"));
    }
    Ok(())
}

fn add_grads(into: &mut ParamMap, other: ParamMap) {
    for (name, g) in other {
        let acc = into.get_mut(&name).expect("gradient key mismatch");
        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
    }
}

/// p ← p − lr·g for every named gradient; other parameters are untouched.
pub fn sgd_step(params: &mut ParamMap, grads: &ParamMap, lr: f64) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::shape(format!("unknown parameter {name}")))?;
        if p.dims() != g.dims() {
            return Err(Error::shape(format!(
                "{name}: param {:?} vs grad {:?}",
                p.dims(),
                g.dims()
            )));
        }
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

/// Elementwise θ = Σ w_k·θ_k over all parameters, computed in the affine
/// form θ_0 + Σ_{k≥1} w_k·(θ_k − θ_0) and clamped to the elementwise
/// [min, max] envelope, so identical inputs reproduce exactly and the result
/// always lies inside the inputs' range.
pub fn weighted_average(maps: &[&ParamMap], weights: &[f64]) -> Result<ParamMap> {
    if maps.is_empty() || maps.len() != weights.len() {
        return Err(Error::shape(format!(
            "{} parameter sets vs {} weights",
            maps.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::config("weights", "must be ≥ 0"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::config(
            "weights",
            format!("must sum to 1 (got {total})"),
        ));
    }
    let base = maps[0];
    for m in &maps[1..] {
        if m.len() != base.len() {
            return Err(Error::shape("parameter name sets differ"));
        }
    }
    let mut out = ParamMap::new();
    for (name, first) in base {
        // Elementwise envelope across all inputs (also validates shapes).
        let mut lo = first.data().to_vec();
        let mut hi = first.data().to_vec();
        for m in &maps[1..] {
            let t = m
                .get(name)
                .ok_or_else(|| Error::shape(format!("parameter {name} missing from one input")))?;
            if t.dims() != first.dims() {
                return Err(Error::shape(format!("{name}: shape mismatch")));
            }
            for (i, &v) in t.data().iter().enumerate() {
                if v < lo[i] {
                    lo[i] = v;
                }
                if v > hi[i] {
                    hi[i] = v;
                }
            }
        }
        // Affine accumulation around θ_0: the k=0 term contributes exactly
        // θ_0, so identical inputs (and the single-input case) reproduce
        // θ_0 bit-for-bit.
        let mut acc = first.data().to_vec();
        for (m, &w) in maps.iter().zip(weights).skip(1) {
            let t = &m[name];
            for (a, (&v, &b)) in acc.iter_mut().zip(t.data().iter().zip(first.data())) {
                *a += w * (v - b);
            }
        }
        for (a, (&l, &h)) in acc.iter_mut().zip(lo.iter().zip(hi.iter())) {
            *a = a.clamp(l, h);
        }
        out.insert(name.clone(), Tensor::new(first.dims().to_vec(), acc)?);
    }
    Ok(out)
}

/// [`weighted_average`] lifted to checkpoints (architectures must match).
pub fn weighted_average_checkpoints(
    checkpoints: &[&Checkpoint],
    weights: &[f64],
) -> Result<Checkpoint> {
    if checkpoints.is_empty() {
        return Err(Error::shape("no checkpoints"));
    }
    let arch = checkpoints[0].arch();
    if checkpoints.iter().any(|c| c.arch() != arch) {
        return Err(Error::shape("architecture mismatch"));
    }
    let maps: Vec<&ParamMap> = checkpoints.iter().map(|c| c.params()).collect();
    Checkpoint::new(arch, weighted_average(&maps, weights)?)
}

/// Pretraining settings (plain supervised cross-entropy with momentum SGD).
#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            lr: 0.05,
            batch_size: 64,
            momentum: 0.9,
        }
    }
}

/// Supervised pretraining on clean data: batch-stats forward, hard-label
/// cross-entropy, gradients for every trainable parameter, running BN stats
/// accumulated with momentum 0.1 (biased batch variance). Deterministic for
/// a fixed `rng`; errors if the loss leaves the finite range.
pub fn pretrain(
    model: &SmallCnn,
    ds: &LabeledDataset,
    cfg: &PretrainConfig,
    rng: &SeededRng,
) -> Result<Checkpoint> {
    let (c, h, w) = ds.image_dims();
    if (c, h, w) != (model.in_channels, model.height, model.width)
        || ds.num_classes() != model.num_classes
    {
        return Err(Error::shape("dataset does not match model shape"));
    }
    if ds.len() < 2 {
        return Err(Error::shape("pretraining needs at least 2 samples"));
    }
    let mut init_rng = rng.substream("init");
    let mut order_rng = rng.substream("pretrain");
    let mut params = model.init_params(&mut init_rng);
    let mut velocity: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let classes = model.num_classes;

    let mut indices: Vec<usize> = (0..ds.len()).collect();
    for _epoch in 0..cfg.epochs {
        order_rng.shuffle(&mut indices);
        for chunk in indices.chunks(cfg.batch_size.max(2)) {
            if chunk.len() < 2 {
                continue; // batch-stats BN cannot normalize a singleton
            }
            let images = ds.images().gather_first(chunk)?;
            let (logits, cache) = model.forward(&params, &images, BnMode::BatchStats)?;
            // Running-stats EMA with the batch's biased statistics.
            for b in 0..3 {
                let (mean, var) = cache.block_stats(b);
                let (mean, var) = (mean.to_vec(), var.to_vec());
                let rm = params.get_mut(&format!("bn{}.running_mean", b + 1)).unwrap();
                for (o, m) in rm.data_mut().iter_mut().zip(&mean) {
                    *o = 0.9 * *o + 0.1 * m;
                }
                let rv = params.get_mut(&format!("bn{}.running_var", b + 1)).unwrap();
                for (o, v) in rv.data_mut().iter_mut().zip(&var) {
                    *o = 0.9 * *o + 0.1 * v;
                }
            }
            let (probs, lnp, _) = softmax_full(&logits);
            let m = chunk.len() as f64;
            let mut loss = 0.0;
            let mut dlogits = vec![0.0; chunk.len() * classes];
            for (row, &i) in chunk.iter().enumerate() {
                let y = ds.labels()[i];
                loss -= lnp[row * classes + y] / m;
                for j in 0..classes {
                    let t = if j == y { 1.0 } else { 0.0 };
                    dlogits[row * classes + j] = (probs.data()[row * classes + j] - t) / m;
                }
            }
            if !loss.is_finite() {
                return Err(Error::numeric("pretraining loss diverged"));
            }
            let grads =
                model.backward_from_dlogits(&params, &images, &cache, &dlogits, AdaptableSet::All);
            for (name, g) in &grads {
                let v = velocity
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; g.len()]);
                let p = params.get_mut(name).unwrap();
                for ((vi, gi), pi) in v.iter_mut().zip(g.data()).zip(p.data_mut().iter_mut()) {
                    *vi = cfg.momentum * *vi + gi;
                    *pi -= cfg.lr * *vi;
                }
            }
        }
    }
    Checkpoint::new(ARCH_ID, params)
}
