//! Numeric kernels for the network: convolution as one GEMM per layer over
//! an im2col matrix, batch normalization (both statistics modes, with true
//! backprop through batch statistics), ReLU, pooling, and the linear head.
//!
//! Layouts: activations are `[n, c, h, w]` C-order slices; the im2col matrix
//! is `[cin·9, n·h·w]` with columns batch-major so one `dgemm` covers the
//! whole batch.

pub(crate) const BN_EPS: f64 = 1e-5;

/// Row-major C[m×n] = A[m×k]·B[k×n] with explicit strides.
///
/// Prefers the lazily-loaded system BLAS (see `sysblas`) and falls back to
/// the bundled pure-Rust kernel. Either backend overwrites all of `c[..m*n]`
/// in a single pass (β = 0), and each is single-threaded and deterministic
/// on a given machine.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    #[cfg(all(target_os = "linux", target_arch = "x86_64"))]
    if super::sysblas::dgemm(m, k, n, a, rsa, csa, b, rsb, csb, c) {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Expands `x` `[n, cin, h, w]` into `col` `[cin·9, n·h·w]` for a 3×3
/// convolution with stride 1 and zero padding 1. Row `(ci·3+dy)·3+dx` holds
/// the input shifted by `(dy−1, dx−1)`; out-of-image taps are zero.
///
/// Every element of `col` is written explicitly (padding zeros included), so
/// a reused buffer never needs a full clear beforehand.
pub(crate) fn im2col(x: &[f64], n: usize, cin: usize, h: usize, w: usize, col: &mut Vec<f64>) {
    let hw = h * w;
    let cols = n * hw;
    resize_uninit(col, cin * 9 * cols);
    for ci in 0..cin {
        for dy in 0..3usize {
            for dx in 0..3usize {
                let row = &mut col[((ci * 3 + dy) * 3 + dx) * cols..][..cols];
                for i in 0..n {
                    let img = &x[(i * cin + ci) * hw..][..hw];
                    for y in 0..h {
                        let sy = y + dy;
                        let dst = &mut row[i * hw + y * w..][..w];
                        if sy < 1 || sy > h {
                            dst.fill(0.0); // padded row
                            continue;
                        }
                        let src = &img[(sy - 1) * w..][..w];
                        match dx {
                            0 => {
                                dst[0] = 0.0;
                                dst[1..w].copy_from_slice(&src[..w - 1]);
                            }
                            1 => dst.copy_from_slice(src),
                            _ => {
                                dst[..w - 1].copy_from_slice(&src[1..w]);
                                dst[w - 1] = 0.0;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Ensures `buf` has at least `len` elements without clearing existing
/// content; callers overwrite their whole logical region, so the buffer is
/// only zero-filled once when it grows past its high-water mark.
fn resize_uninit(buf: &mut Vec<f64>, len: usize) {
    if buf.len() < len {
        buf.resize(len, 0.0);
    }
}

/// Scatter-adds the im2col-shaped gradient back onto the input image grid
/// (exact adjoint of [`im2col`]). `dx_out` must arrive zeroed: the routine
/// accumulates contributions from the nine taps.
fn col2im(dcol: &[f64], n: usize, cin: usize, h: usize, w: usize, dx_out: &mut [f64]) {
    let hw = h * w;
    let cols = n * hw;
    for ci in 0..cin {
        for dy in 0..3usize {
            for dx in 0..3usize {
                let row = &dcol[((ci * 3 + dy) * 3 + dx) * cols..][..cols];
                for i in 0..n {
                    let img = &mut dx_out[(i * cin + ci) * hw..][..hw];
                    for y in 0..h {
                        let sy = y + dy;
                        if sy < 1 || sy > h {
                            continue;
                        }
                        let dst = &mut img[(sy - 1) * w..][..w];
                        let src = &row[i * hw + y * w..][..w];
                        match dx {
                            0 => {
                                for (d, s) in dst[..w - 1].iter_mut().zip(&src[1..w]) {
                                    *d += s;
                                }
                            }
                            1 => {
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                            _ => {
                                for (d, s) in dst[1..w].iter_mut().zip(&src[..w - 1]) {
                                    *d += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Reusable scratch buffers so per-step allocation stays flat.
#[derive(Default)]
pub(crate) struct ConvScratch {
    col: Vec<f64>,
    mat: Vec<f64>,
    dy_mat: Vec<f64>,
}

/// 3×3 stride-1 pad-1 convolution, no bias: `y[n, cout, h, w]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward(
    x: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    scratch: &mut ConvScratch,
    y: &mut [f64],
) {
    let hw = h * w;
    let cols = n * hw;
    let k = cin * 9;
    im2col(x, n, cin, h, w, &mut scratch.col);
    resize_uninit(&mut scratch.mat, cout * cols);
    gemm_strided(
        cout,
        k,
        cols,
        weight,
        k as isize,
        1,
        &scratch.col,
        cols as isize,
        1,
        &mut scratch.mat,
    );
    // [cout, n·hw] → [n, cout, hw]
    for co in 0..cout {
        let src = &scratch.mat[co * cols..][..cols];
        for i in 0..n {
            y[(i * cout + co) * hw..][..hw].copy_from_slice(&src[i * hw..][..hw]);
        }
    }
}

/// Backward of [`conv_forward`]: optionally weight gradient (needs the
/// original input for im2col recomputation) and/or input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    x: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    dy: &[f64],
    want_dw: bool,
    want_dx: bool,
    scratch: &mut ConvScratch,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let hw = h * w;
    let cols = n * hw;
    let k = cin * 9;
    // [n, cout, hw] → [cout, n·hw]
    resize_uninit(&mut scratch.dy_mat, cout * cols);
    for co in 0..cout {
        let dst = &mut scratch.dy_mat[co * cols..][..cols];
        for i in 0..n {
            dst[i * hw..][..hw].copy_from_slice(&dy[(i * cout + co) * hw..][..hw]);
        }
    }
    let dw = if want_dw {
        im2col(x, n, cin, h, w, &mut scratch.col);
        let mut dw = vec![0.0; cout * k];
        // dW = dY_mat · colᵀ; colᵀ is col with swapped strides.
        gemm_strided(
            cout,
            cols,
            k,
            &scratch.dy_mat,
            cols as isize,
            1,
            &scratch.col,
            1,
            cols as isize,
            &mut dw,
        );
        Some(dw)
    } else {
        None
    };
    let dx = if want_dx {
        resize_uninit(&mut scratch.mat, k * cols);
        // dcol = Wᵀ · dY_mat; Wᵀ is weight with swapped strides.
        gemm_strided(
            k,
            cout,
            cols,
            weight,
            1,
            k as isize,
            &scratch.dy_mat,
            cols as isize,
            1,
            &mut scratch.mat,
        );
        let mut dx = vec![0.0; n * cin * hw];
        col2im(&scratch.mat, n, cin, h, w, &mut dx);
        Some(dx)
    } else {
        None
    };
    (dw, dx)
}

/// Per-channel normalization statistics used by one BN layer.
#[derive(Debug, Clone)]
pub(crate) struct BnStats {
    pub mean: Vec<f64>,
    /// Biased variance (denominator n·h·w).
    pub var: Vec<f64>,
    pub invstd: Vec<f64>,
}

/// Mean and biased variance per channel over `(n, h·w)` of `[n, c, hw]` data.
pub(crate) fn bn_batch_stats(x: &[f64], n: usize, c: usize, hw: usize) -> BnStats {
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let mut s = 0.0;
            for v in &x[(i * c + ch) * hw..][..hw] {
                s += v;
            }
            mean[ch] += s;
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    let mut var = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let mu = mean[ch];
            let mut s = 0.0;
            for v in &x[(i * c + ch) * hw..][..hw] {
                let d = v - mu;
                s += d * d;
            }
            var[ch] += s;
        }
    }
    for v in &mut var {
        *v /= count;
    }
    let invstd = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    BnStats { mean, var, invstd }
}

/// Stats view of stored running mean/var.
pub(crate) fn bn_running_stats(mean: &[f64], var: &[f64]) -> BnStats {
    BnStats {
        mean: mean.to_vec(),
        var: var.to_vec(),
        invstd: var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect(),
    }
}

/// y = γ·(x−μ)·invstd + β, channelwise. Reference implementation for the
/// fused path; production forwards use [`bn_relu_pool_forward`].
#[cfg_attr(not(test), allow(dead_code))]
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_forward(
    x: &[f64],
    stats: &BnStats,
    gamma: &[f64],
    beta: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    y: &mut [f64],
) {
    for i in 0..n {
        for ch in 0..c {
            let (mu, inv, g, b) = (stats.mean[ch], stats.invstd[ch], gamma[ch], beta[ch]);
            let src = &x[(i * c + ch) * hw..][..hw];
            let dst = &mut y[(i * c + ch) * hw..][..hw];
            for (o, v) in dst.iter_mut().zip(src) {
                *o = g * (v - mu) * inv + b;
            }
        }
    }
}

/// Fused normalize → ReLU → 2×2 average pool: `y[n, c, h/2, w/2]` from
/// `x[n, c, h, w]` without materializing the full-resolution activation.
/// Element arithmetic matches `bn_forward` + clamp-at-zero + `avgpool2_forward`
/// exactly (same operations, same order), so swapping the fused and unfused
/// paths does not change results.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_relu_pool_forward(
    x: &[f64],
    stats: &BnStats,
    gamma: &[f64],
    beta: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    y: &mut [f64],
) {
    let hw = h * w;
    let (ph, pw) = (h / 2, w / 2);
    for i in 0..n {
        for ch in 0..c {
            let (mu, inv, g, b) = (stats.mean[ch], stats.invstd[ch], gamma[ch], beta[ch]);
            let src = &x[(i * c + ch) * hw..][..hw];
            let dst = &mut y[(i * c + ch) * ph * pw..][..ph * pw];
            for py in 0..ph {
                let r0 = &src[2 * py * w..][..w];
                let r1 = &src[(2 * py + 1) * w..][..w];
                for px in 0..pw {
                    let o = 2 * px;
                    let v00 = (g * (r0[o] - mu) * inv + b).max(0.0);
                    let v01 = (g * (r0[o + 1] - mu) * inv + b).max(0.0);
                    let v10 = (g * (r1[o] - mu) * inv + b).max(0.0);
                    let v11 = (g * (r1[o + 1] - mu) * inv + b).max(0.0);
                    dst[py * pw + px] = 0.25 * (v00 + v01 + v10 + v11);
                }
            }
        }
    }
}

pub(crate) struct BnGrads {
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
    pub dx: Option<Vec<f64>>,
}

/// Backward through batch-statistics normalization: gradients flow through
/// the per-channel mean and variance. With N = n·hw per channel:
/// dx = invstd/N · (N·dxhat − Σdxhat − x̂·Σ(dxhat·x̂)), dxhat = dy·γ.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_backward_batch(
    x: &[f64],
    stats: &BnStats,
    gamma: &[f64],
    dy: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    want_dx: bool,
) -> BnGrads {
    let count = (n * hw) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut sum_dxhat = vec![0.0; c];
    let mut sum_dxhat_xhat = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let (mu, inv, g) = (stats.mean[ch], stats.invstd[ch], gamma[ch]);
            let xs = &x[(i * c + ch) * hw..][..hw];
            let ds = &dy[(i * c + ch) * hw..][..hw];
            let (mut s_db, mut s_dg, mut s_dh, mut s_dhx) = (0.0, 0.0, 0.0, 0.0);
            for (xv, dv) in xs.iter().zip(ds) {
                let xhat = (xv - mu) * inv;
                s_db += dv;
                s_dg += dv * xhat;
                let dxhat = dv * g;
                s_dh += dxhat;
                s_dhx += dxhat * xhat;
            }
            dbeta[ch] += s_db;
            dgamma[ch] += s_dg;
            sum_dxhat[ch] += s_dh;
            sum_dxhat_xhat[ch] += s_dhx;
        }
    }
    let dx = if want_dx {
        let mut dx = vec![0.0; x.len()];
        for i in 0..n {
            for ch in 0..c {
                let (mu, inv, g) = (stats.mean[ch], stats.invstd[ch], gamma[ch]);
                let (sh, shx) = (sum_dxhat[ch], sum_dxhat_xhat[ch]);
                let xs = &x[(i * c + ch) * hw..][..hw];
                let ds = &dy[(i * c + ch) * hw..][..hw];
                let out = &mut dx[(i * c + ch) * hw..][..hw];
                for ((o, xv), dv) in out.iter_mut().zip(xs).zip(ds) {
                    let xhat = (xv - mu) * inv;
                    let dxhat = dv * g;
                    *o = inv * (dxhat - (sh + xhat * shx) / count);
                }
            }
        }
        Some(dx)
    } else {
        None
    };
    BnGrads { dgamma, dbeta, dx }
}

/// Backward when normalization used fixed running statistics (no coupling
/// through the stats): dx = dy·γ·invstd.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_backward_source(
    x: &[f64],
    stats: &BnStats,
    gamma: &[f64],
    dy: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    want_dx: bool,
) -> BnGrads {
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut dx = if want_dx { vec![0.0; x.len()] } else { Vec::new() };
    for i in 0..n {
        for ch in 0..c {
            let (mu, inv, g) = (stats.mean[ch], stats.invstd[ch], gamma[ch]);
            let xs = &x[(i * c + ch) * hw..][..hw];
            let ds = &dy[(i * c + ch) * hw..][..hw];
            let (mut s_db, mut s_dg) = (0.0, 0.0);
            for (xv, dv) in xs.iter().zip(ds) {
                s_db += dv;
                s_dg += dv * (xv - mu) * inv;
            }
            dbeta[ch] += s_db;
            dgamma[ch] += s_dg;
            if want_dx {
                let out = &mut dx[(i * c + ch) * hw..][..hw];
                for (o, dv) in out.iter_mut().zip(ds) {
                    *o = dv * g * inv;
                }
            }
        }
    }
    BnGrads {
        dgamma,
        dbeta,
        dx: if want_dx { Some(dx) } else { None },
    }
}

/// 2×2 average pool, stride 2: `[n, c, h, w]` → `[n, c, h/2, w/2]`.
/// Reference implementation for the fused path's bitwise check.
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) fn avgpool2_forward(x: &[f64], n: usize, c: usize, h: usize, w: usize, y: &mut [f64]) {
    let (ph, pw) = (h / 2, w / 2);
    for ic in 0..n * c {
        let src = &x[ic * h * w..][..h * w];
        let dst = &mut y[ic * ph * pw..][..ph * pw];
        for py in 0..ph {
            for px in 0..pw {
                let o = 2 * py * w + 2 * px;
                dst[py * pw + px] = 0.25 * (src[o] + src[o + 1] + src[o + w] + src[o + w + 1]);
            }
        }
    }
}

/// Backward of the 2×2 average pool: each input cell gets dy/4.
pub(crate) fn avgpool2_backward(dy: &[f64], n: usize, c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let (ph, pw) = (h / 2, w / 2);
    for ic in 0..n * c {
        let src = &dy[ic * ph * pw..][..ph * pw];
        let dst = &mut dx[ic * h * w..][..h * w];
        for py in 0..ph {
            for px in 0..pw {
                let g = 0.25 * src[py * pw + px];
                let o = 2 * py * w + 2 * px;
                dst[o] = g;
                dst[o + 1] = g;
                dst[o + w] = g;
                dst[o + w + 1] = g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn randv(n: usize, rng: &mut SeededRng) -> Vec<f64> {
        (0..n).map(|_| rng.normal()).collect()
    }

    /// Plain six-loop 3×3 pad-1 convolution for cross-checking the GEMM path.
    fn naive_conv(
        x: &[f64],
        n: usize,
        cin: usize,
        h: usize,
        w: usize,
        wt: &[f64],
        cout: usize,
    ) -> Vec<f64> {
        let mut y = vec![0.0; n * cout * h * w];
        for i in 0..n {
            for co in 0..cout {
                for yy in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for dy in -1..=1isize {
                                for dx in -1..=1isize {
                                    let (sy, sx) = (yy + dy, xx + dx);
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    acc += wt[((co * cin + ci) * 3 + (dy + 1) as usize) * 3
                                        + (dx + 1) as usize]
                                        * x[(i * cin + ci) * h * w
                                            + sy as usize * w
                                            + sx as usize];
                                }
                            }
                        }
                        y[(i * cout + co) * h * w + yy as usize * w + xx as usize] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_forward_matches_naive_loops() {
        let mut rng = SeededRng::from_seed(1);
        for &(n, cin, cout, h, w) in &[(1usize, 1usize, 2usize, 4usize, 4usize), (3, 2, 5, 6, 8)] {
            let x = randv(n * cin * h * w, &mut rng);
            let wt = randv(cout * cin * 9, &mut rng);
            let mut y = vec![0.0; n * cout * h * w];
            conv_forward(&x, n, cin, h, w, &wt, cout, &mut ConvScratch::default(), &mut y);
            let reference = naive_conv(&x, n, cin, h, w, &wt, cout);
            for (a, b) in y.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_is_the_adjoint() {
        // ⟨conv(x), dy⟩ must equal ⟨x, conv_backward_dx(dy)⟩ and likewise for
        // weights — the defining property of a correct adjoint pair.
        let mut rng = SeededRng::from_seed(2);
        let (n, cin, cout, h, w) = (2usize, 3usize, 4usize, 6usize, 6usize);
        let x = randv(n * cin * h * w, &mut rng);
        let wt = randv(cout * cin * 9, &mut rng);
        let dy = randv(n * cout * h * w, &mut rng);
        let mut scratch = ConvScratch::default();
        let mut y = vec![0.0; n * cout * h * w];
        conv_forward(&x, n, cin, h, w, &wt, cout, &mut scratch, &mut y);
        let (dw, dx) = conv_backward(
            &x, n, cin, h, w, &wt, cout, &dy, true, true, &mut scratch,
        );
        let (dw, dx) = (dw.unwrap(), dx.unwrap());
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let rhs_x: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        // perturb x slightly? adjoint identity: <Ax, dy> = <x, Aᵀdy> for the
        // linear-in-x map at fixed weights.
        assert!((lhs - rhs_x).abs() < 1e-8 * lhs.abs().max(1.0), "{lhs} vs {rhs_x}");
        // and linear-in-w at fixed x:
        let rhs_w: f64 = wt.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-8 * lhs.abs().max(1.0), "{lhs} vs {rhs_w}");
    }

    #[test]
    fn bn_batch_stats_normalize_to_zero_mean_unit_var() {
        let mut rng = SeededRng::from_seed(3);
        let (n, c, hw) = (4usize, 3usize, 25usize);
        let x: Vec<f64> = (0..n * c * hw).map(|_| 2.0 + 1.5 * rng.normal()).collect();
        let stats = bn_batch_stats(&x, n, c, hw);
        let gamma = vec![1.0; c];
        let beta = vec![0.0; c];
        let mut y = vec![0.0; x.len()];
        bn_forward(&x, &stats, &gamma, &beta, n, c, hw, &mut y);
        for ch in 0..c {
            let vals: Vec<f64> = (0..n)
                .flat_map(|i| y[(i * c + ch) * hw..][..hw].to_vec())
                .collect();
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let v: f64 = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6, "mean {m}");
            assert!((v - 1.0).abs() < 1e-4, "var {v}"); // 1 − ε/(σ²+ε) ≈ 1
        }
    }

    #[test]
    fn fused_bn_relu_pool_matches_unfused_path_bitwise() {
        let mut rng = SeededRng::from_seed(5);
        let (n, c, h, w) = (3usize, 4usize, 8usize, 6usize);
        let x = randv(n * c * h * w, &mut rng);
        let st = bn_batch_stats(&x, n, c, h * w);
        let gamma: Vec<f64> = (0..c).map(|_| 0.5 + rng.uniform()).collect();
        let beta: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
        let mut act = vec![0.0; x.len()];
        bn_forward(&x, &st, &gamma, &beta, n, c, h * w, &mut act);
        for v in &mut act {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let mut want = vec![0.0; x.len() / 4];
        avgpool2_forward(&act, n, c, h, w, &mut want);
        let mut got = vec![0.0; x.len() / 4];
        bn_relu_pool_forward(&x, &st, &gamma, &beta, n, c, h, w, &mut got);
        for (a, b) in want.iter().zip(&got) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn avgpool_round_trip_shapes_and_adjoint() {
        let mut rng = SeededRng::from_seed(4);
        let (n, c, h, w) = (2usize, 3usize, 4usize, 6usize);
        let x = randv(n * c * h * w, &mut rng);
        let mut y = vec![0.0; n * c * h * w / 4];
        avgpool2_forward(&x, n, c, h, w, &mut y);
        let dy = randv(y.len(), &mut rng);
        let mut dx = vec![0.0; x.len()];
        avgpool2_backward(&dy, n, c, h, w, &mut dx);
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    #[ignore]
    fn bench_components_scratch() {
        use std::time::Instant;
        let mut rng = SeededRng::from_seed(9);
        let n = 64usize;
        let blocks = [(3usize, 32usize, 32usize, 32usize), (32, 64, 16, 16), (64, 128, 8, 8)];
        for &(cin, cout, h, w) in &blocks {
            let hw = h * w;
            let cols = n * hw;
            let k = cin * 9;
            let x = randv(n * cin * hw, &mut rng);
            let wt = randv(cout * k, &mut rng);
            let mut scratch = ConvScratch::default();
            let mut y = vec![0.0; n * cout * hw];
            let reps = 10;
            let mut best = [f64::MAX; 8];
            for _ in 0..reps {
                let t = Instant::now();
                let alloc: Vec<f64> = vec![0.0; n * cout * hw];
                best[0] = best[0].min(t.elapsed().as_secs_f64());
                drop(alloc);

                let t = Instant::now();
                im2col(&x, n, cin, h, w, &mut scratch.col);
                best[1] = best[1].min(t.elapsed().as_secs_f64());

                scratch.mat.clear();
                scratch.mat.resize(cout * cols, 0.0);
                let t = Instant::now();
                gemm_strided(cout, k, cols, &wt, k as isize, 1, &scratch.col, cols as isize, 1, &mut scratch.mat);
                best[2] = best[2].min(t.elapsed().as_secs_f64());

                let t = Instant::now();
                for co in 0..cout {
                    let src = &scratch.mat[co * cols..][..cols];
                    for i in 0..n {
                        y[(i * cout + co) * hw..][..hw].copy_from_slice(&src[i * hw..][..hw]);
                    }
                }
                best[3] = best[3].min(t.elapsed().as_secs_f64());

                let t = Instant::now();
                let st = bn_batch_stats(&y, n, cout, hw);
                best[4] = best[4].min(t.elapsed().as_secs_f64());

                let gamma = vec![1.0; cout];
                let beta = vec![0.0; cout];
                let mut act = vec![0.0; y.len()];
                let t = Instant::now();
                bn_forward(&y, &st, &gamma, &beta, n, cout, hw, &mut act);
                best[5] = best[5].min(t.elapsed().as_secs_f64());

                let t = Instant::now();
                for v in &mut act {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                best[6] = best[6].min(t.elapsed().as_secs_f64());

                let mut pooled = vec![0.0; act.len() / 4];
                let t = Instant::now();
                avgpool2_forward(&act, n, cout, h, w, &mut pooled);
                best[7] = best[7].min(t.elapsed().as_secs_f64());
            }
            eprintln!(
                "block cin={cin} cout={cout} {h}x{w}: alloc={:.2}ms im2col={:.2}ms gemm={:.2}ms transpose={:.2}ms bnstats={:.2}ms bnfwd={:.2}ms relu={:.2}ms pool={:.2}ms",
                best[0] * 1e3, best[1] * 1e3, best[2] * 1e3, best[3] * 1e3,
                best[4] * 1e3, best[5] * 1e3, best[6] * 1e3, best[7] * 1e3
            );
            // Backward pieces.
            let dy = randv(n * cout * hw, &mut rng);
            let mut best_b = [f64::MAX; 4];
            for _ in 0..reps {
                let t = Instant::now();
                let mut dy_mat = vec![0.0; cout * cols];
                for co in 0..cout {
                    let dst = &mut dy_mat[co * cols..][..cols];
                    for i in 0..n {
                        dst[i * hw..][..hw].copy_from_slice(&dy[(i * cout + co) * hw..][..hw]);
                    }
                }
                best_b[0] = best_b[0].min(t.elapsed().as_secs_f64());

                im2col(&x, n, cin, h, w, &mut scratch.col);
                let mut dw = vec![0.0; cout * k];
                let t = Instant::now();
                gemm_strided(cout, cols, k, &dy_mat, cols as isize, 1, &scratch.col, 1, cols as isize, &mut dw);
                best_b[1] = best_b[1].min(t.elapsed().as_secs_f64());

                scratch.mat.clear();
                scratch.mat.resize(k * cols, 0.0);
                let t = Instant::now();
                gemm_strided(k, cout, cols, &wt, 1, k as isize, &dy_mat, cols as isize, 1, &mut scratch.mat);
                best_b[2] = best_b[2].min(t.elapsed().as_secs_f64());

                let mut dx = vec![0.0; n * cin * hw];
                let t = Instant::now();
                col2im(&scratch.mat, n, cin, h, w, &mut dx);
                best_b[3] = best_b[3].min(t.elapsed().as_secs_f64());
            }
            eprintln!(
                "  backward: dy_mat={:.2}ms dW_gemm={:.2}ms dcol_gemm={:.2}ms col2im={:.2}ms",
                best_b[0] * 1e3, best_b[1] * 1e3, best_b[2] * 1e3, best_b[3] * 1e3
            );
        }
    }
}
