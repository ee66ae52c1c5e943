//! Independent reference implementations ("oracles") used by the acceptance
//! and property suites. Everything here is written as plain nested loops with
//! no shared code paths into the library, so each check is a genuine
//! dual-route comparison. Frozen: changes here require re-justification in
//! the project notes.

#![allow(dead_code)]

use std::collections::BTreeMap;

use freda_core::checkpoint::ParamMap;
use freda_core::tensor::Tensor;

// ---------------------------------------------------------------------------
// Spectral oracle
// ---------------------------------------------------------------------------

/// Direct O((hw)²) unnormalized forward DFT of a `[c, h, w]` real image.
/// Returns (real, imag) tensors of the same shape.
pub fn naive_dft2(image: &Tensor) -> (Tensor, Tensor) {
    let dims = image.dims();
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    let mut re = vec![0.0; c * h * w];
    let mut im = vec![0.0; c * h * w];
    let tau = std::f64::consts::TAU;
    for ch in 0..c {
        for u in 0..h {
            for v in 0..w {
                let mut sr = 0.0;
                let mut si = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        let angle = -tau * (u as f64 * y as f64 / h as f64
                            + v as f64 * x as f64 / w as f64);
                        let val = image.data()[ch * h * w + y * w + x];
                        sr += val * angle.cos();
                        si += val * angle.sin();
                    }
                }
                re[ch * h * w + u * w + v] = sr;
                im[ch * h * w + u * w + v] = si;
            }
        }
    }
    (
        Tensor::new(dims.to_vec(), re).unwrap(),
        Tensor::new(dims.to_vec(), im).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// Gradient oracle
// ---------------------------------------------------------------------------

/// Central finite differences of `eval` at `base` over every scalar of the
/// named tensors. `step` is the probe half-width.
pub fn fd_gradient(
    eval: &mut dyn FnMut(&ParamMap) -> f64,
    base: &ParamMap,
    names: &[String],
    step: f64,
) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for name in names {
        let tensor = base.get(name).expect("fd_gradient: unknown name");
        let mut grads = vec![0.0; tensor.len()];
        for i in 0..tensor.len() {
            let mut plus = base.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += step;
            let lp = eval(&plus);
            let mut minus = base.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= step;
            let lm = eval(&minus);
            grads[i] = (lp - lm) / (2.0 * step);
        }
        out.insert(name.clone(), Tensor::new(tensor.dims().to_vec(), grads).unwrap());
    }
    out
}

/// Max relative disagreement between analytic and finite-difference
/// gradients, floored at 1e−4 so near-zero pairs compare absolutely.
pub fn max_rel_grad_error(
    analytic: &BTreeMap<String, Tensor>,
    fd: &BTreeMap<String, Tensor>,
) -> f64 {
    let mut worst = 0.0f64;
    for (name, a) in analytic {
        let f = fd.get(name).expect("fd missing tensor");
        for (&av, &fv) in a.data().iter().zip(f.data()) {
            let scale = av.abs().max(fv.abs()).max(1e-4);
            worst = worst.max((av - fv).abs() / scale);
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Parameter-averaging oracle
// ---------------------------------------------------------------------------

/// Literal Σ_k w_k·θ_k, elementwise, no algebraic rearrangement.
pub fn brute_weighted_average(maps: &[&ParamMap], weights: &[f64]) -> ParamMap {
    assert_eq!(maps.len(), weights.len());
    let mut out = ParamMap::new();
    for (name, first) in maps[0] {
        let mut acc = vec![0.0; first.len()];
        for (m, &w) in maps.iter().zip(weights) {
            for (a, &v) in acc.iter_mut().zip(m[name].data()) {
                *a += w * v;
            }
        }
        out.insert(name.clone(), Tensor::new(first.dims().to_vec(), acc).unwrap());
    }
    out
}

// ---------------------------------------------------------------------------
// Batch-normalization statistics oracle
// ---------------------------------------------------------------------------

/// Per-channel mean and biased variance of the selected rows of an
/// `[n, c, h, w]` tensor, computed independently of the library.
pub fn subset_channel_stats(data: &Tensor, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let dims = data.dims();
    let (c, h, w) = (dims[1], dims[2], dims[3]);
    let hw = h * w;
    let count = (rows.len() * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for &r in rows {
            for s in 0..hw {
                sum += data.data()[r * c * hw + ch * hw + s];
            }
        }
        mean[ch] = sum / count;
        let mut sq = 0.0;
        for &r in rows {
            for s in 0..hw {
                let d = data.data()[r * c * hw + ch * hw + s] - mean[ch];
                sq += d * d;
            }
        }
        var[ch] = sq / count;
    }
    (mean, var)
}

// ---------------------------------------------------------------------------
// Nearest-centroid oracle
// ---------------------------------------------------------------------------

/// Brute-force assignment: squared Euclidean distance, ties to the lowest
/// centroid index.
pub fn naive_assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (k, c) in centroids.iter().enumerate() {
                let d: f64 = p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Network forward oracle
// ---------------------------------------------------------------------------

/// Plain loop-nest forward pass of the 3-block CNN (conv 3×3 pad 1 →
/// batch-norm → ReLU → 2×2 average pool, ×3, then global average pool and a
/// linear head). Written without im2col, GEMM, or caching so it exercises a
/// completely different computation order than the library.
pub fn naive_forward(
    in_channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    params: &ParamMap,
    batch: &Tensor,
    batch_stats: bool,
) -> Vec<Vec<f64>> {
    let n = batch.dims()[0];
    let widths = [32usize, 64, 128];
    let mut x: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let stride = in_channels * height * width;
            batch.data()[i * stride..(i + 1) * stride].to_vec()
        })
        .collect();
    let (mut cin, mut h, mut w) = (in_channels, height, width);

    for (b, &cout) in widths.iter().enumerate() {
        let wt = &params[&format!("conv{}.weight", b + 1)];
        // conv 3×3, stride 1, pad 1, no bias
        let mut conv: Vec<Vec<f64>> = vec![vec![0.0; cout * h * w]; n];
        for (i, xi) in x.iter().enumerate() {
            for co in 0..cout {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let yy = y as isize + dy as isize - 1;
                                    let xs = xx as isize + dx as isize - 1;
                                    if yy < 0 || xs < 0 || yy >= h as isize || xs >= w as isize {
                                        continue;
                                    }
                                    let wv = wt.data()
                                        [((co * cin + ci) * 3 + dy) * 3 + dx];
                                    acc += wv
                                        * xi[ci * h * w + yy as usize * w + xs as usize];
                                }
                            }
                        }
                        conv[i][co * h * w + y * w + xx] = acc;
                    }
                }
            }
        }
        // batch norm
        let gamma = &params[&format!("bn{}.gamma", b + 1)];
        let beta = &params[&format!("bn{}.beta", b + 1)];
        let (mean, var) = if batch_stats {
            let count = (n * h * w) as f64;
            let mut mean = vec![0.0; cout];
            let mut var = vec![0.0; cout];
            for c in 0..cout {
                let mut s = 0.0;
                for row in conv.iter() {
                    for v in &row[c * h * w..(c + 1) * h * w] {
                        s += v;
                    }
                }
                mean[c] = s / count;
                let mut q = 0.0;
                for row in conv.iter() {
                    for v in &row[c * h * w..(c + 1) * h * w] {
                        q += (v - mean[c]) * (v - mean[c]);
                    }
                }
                var[c] = q / count;
            }
            (mean, var)
        } else {
            (
                params[&format!("bn{}.running_mean", b + 1)].data().to_vec(),
                params[&format!("bn{}.running_var", b + 1)].data().to_vec(),
            )
        };
        for row in conv.iter_mut() {
            for c in 0..cout {
                let inv = 1.0 / (var[c] + 1e-5).sqrt();
                for v in &mut row[c * h * w..(c + 1) * h * w] {
                    *v = gamma.data()[c] * (*v - mean[c]) * inv + beta.data()[c];
                    // ReLU
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
        // 2×2 average pool
        let (ph, pw) = (h / 2, w / 2);
        let mut pooled: Vec<Vec<f64>> = vec![vec![0.0; cout * ph * pw]; n];
        for (i, row) in conv.iter().enumerate() {
            for c in 0..cout {
                for y in 0..ph {
                    for xx in 0..pw {
                        let mut acc = 0.0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                acc += row[c * h * w + (2 * y + dy) * w + 2 * xx + dx];
                            }
                        }
                        pooled[i][c * ph * pw + y * pw + xx] = acc / 4.0;
                    }
                }
            }
        }
        x = pooled;
        cin = cout;
        h = ph;
        w = pw;
    }

    // global average pool + linear head
    let fc_w = &params["fc.weight"];
    let fc_b = &params["fc.bias"];
    let mut logits = vec![vec![0.0; num_classes]; n];
    for (i, xi) in x.iter().enumerate() {
        let mut feat = vec![0.0; cin];
        for c in 0..cin {
            feat[c] = xi[c * h * w..(c + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
        }
        for j in 0..num_classes {
            let mut acc = fc_b.data()[j];
            for c in 0..cin {
                acc += fc_w.data()[j * cin + c] * feat[c];
            }
            logits[i][j] = acc;
        }
    }
    logits
}

/// Straightforward softmax probabilities of one logit row (no shared code
/// with the library's stabilized version).
pub fn naive_softmax(row: &[f64]) -> Vec<f64> {
    let z: f64 = row.iter().map(|v| v.exp()).sum();
    row.iter().map(|v| v.exp() / z).collect()
}

/// Shannon entropy of a probability row in nats.
pub fn naive_entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}
