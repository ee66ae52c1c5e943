//! Fourier-domain machinery: per-channel 2-D DFT, amplitude/phase
//! decomposition, centered high-frequency masking and feature vectorization,
//! and the amplitude-perturbation augmentation.
//!
//! Conventions: images and spectra are channel-major `[c, h, w]`. The forward
//! DFT is unnormalized (`X(u,v) = Σ x(a,b)·e^{−2πi(ua/h + vb/w)}`); the
//! inverse carries the `1/(hw)` factor. The high-frequency mask applies to a
//! *centered* spectrum, so the kept border band is genuinely high-frequency.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Per-channel complex frequency representation.
#[derive(Debug, Clone)]
pub struct Spectrum {
    /// Real part, `[c, h, w]`.
    pub real: Tensor,
    /// Imaginary part, `[c, h, w]`.
    pub imag: Tensor,
    /// Whether the DC bin has been shifted to `(⌊h/2⌋, ⌊w/2⌋)`.
    pub centered: bool,
}

/// Polar form of a spectrum.
#[derive(Debug, Clone)]
pub struct AmplitudePhase {
    /// Nonnegative magnitudes, `[c, h, w]`.
    pub amplitude: Tensor,
    /// Angles in `(−π, π]`, `[c, h, w]`.
    pub phase: Tensor,
    pub centered: bool,
}

/// Binary high-pass mask over a centered spectrum.
///
/// A bin is masked OUT (0) exactly when it lies in the closed central square
/// `|u − ⌊h/2⌋| ≤ h/4 ∧ |v − ⌊w/2⌋| ≤ w/4`; the kept border band is 1.
#[derive(Debug, Clone)]
pub struct FreqMask {
    mask: Tensor,
}

impl FreqMask {
    pub fn new(h: usize, w: usize) -> Self {
        let ch = h / 2;
        let cw = w / 2;
        let mut data = vec![0.0; h * w];
        for u in 0..h {
            for v in 0..w {
                let du = 4 * u.abs_diff(ch);
                let dv = 4 * v.abs_diff(cw);
                let masked_out = du <= h && dv <= w;
                data[u * w + v] = if masked_out { 0.0 } else { 1.0 };
            }
        }
        FreqMask {
            mask: Tensor::new(vec![h, w], data).expect("mask dims"),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.mask
    }

    /// Number of kept (1) bins.
    pub fn kept_count(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == 1.0).count()
    }
}

fn check_image(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.dims() {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(Error::shape(format!(
            "expected [c, h, w] image, got {other:?}"
        ))),
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, forward: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if forward {
            p.plan_fft_forward(len)
        } else {
            p.plan_fft_inverse(len)
        }
    })
}

/// 2-D transform of one channel, in place over a row-major `h×w` grid.
fn fft2_channel(grid: &mut [Complex<f64>], h: usize, w: usize, forward: bool) {
    let row_fft = plan(w, forward);
    for row in grid.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = plan(h, forward);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for v in 0..w {
        for u in 0..h {
            col[u] = grid[u * w + v];
        }
        col_fft.process(&mut col);
        for u in 0..h {
            grid[u * w + v] = col[u];
        }
    }
}

/// Unnormalized forward DFT per channel. Input `[c, h, w]`, output uncentered.
pub fn dft2(image: &Tensor) -> Result<Spectrum> {
    let (c, h, w) = check_image(image)?;
    let mut real = vec![0.0; c * h * w];
    let mut imag = vec![0.0; c * h * w];
    let mut grid = vec![Complex::new(0.0, 0.0); h * w];
    for ch in 0..c {
        let src = &image.data()[ch * h * w..(ch + 1) * h * w];
        for (g, &x) in grid.iter_mut().zip(src) {
            *g = Complex::new(x, 0.0);
        }
        fft2_channel(&mut grid, h, w, true);
        for (i, g) in grid.iter().enumerate() {
            real[ch * h * w + i] = g.re;
            imag[ch * h * w + i] = g.im;
        }
    }
    Ok(Spectrum {
        real: Tensor::new(vec![c, h, w], real)?,
        imag: Tensor::new(vec![c, h, w], imag)?,
        centered: false,
    })
}

/// Inverse DFT with `1/(hw)` normalization. Returns the real part and the
/// largest discarded imaginary magnitude (the caller decides how strict to
/// be; Hermitian inputs leave only rounding noise).
pub fn idft2(spectrum: &Spectrum) -> Result<(Tensor, f64)> {
    if spectrum.centered {
        return Err(Error::shape(
            "idft2 requires an uncentered spectrum (call center_unshift first)",
        ));
    }
    let (c, h, w) = check_image(&spectrum.real)?;
    let norm = 1.0 / (h * w) as f64;
    let mut out = vec![0.0; c * h * w];
    let mut residue: f64 = 0.0;
    let mut grid = vec![Complex::new(0.0, 0.0); h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..h * w {
            grid[i] = Complex::new(spectrum.real.data()[base + i], spectrum.imag.data()[base + i]);
        }
        fft2_channel(&mut grid, h, w, false);
        for (i, g) in grid.iter().enumerate() {
            out[base + i] = g.re * norm;
            residue = residue.max((g.im * norm).abs());
        }
    }
    Ok((Tensor::new(vec![c, h, w], out)?, residue))
}

/// Polar decomposition `A = √(R²+I²)`, `P = atan2(I, R)` (zero bin → `P=0`).
pub fn amplitude_phase(spectrum: &Spectrum) -> AmplitudePhase {
    let n = spectrum.real.len();
    let mut amplitude = Vec::with_capacity(n);
    let mut phase = Vec::with_capacity(n);
    for i in 0..n {
        let re = spectrum.real.data()[i];
        let im = spectrum.imag.data()[i];
        amplitude.push(re.hypot(im));
        phase.push(if re == 0.0 && im == 0.0 {
            0.0
        } else {
            im.atan2(re)
        });
    }
    let dims = spectrum.real.dims().to_vec();
    AmplitudePhase {
        amplitude: Tensor::new(dims.clone(), amplitude).expect("dims"),
        phase: Tensor::new(dims, phase).expect("dims"),
        centered: spectrum.centered,
    }
}

/// Rebuilds the rectangular form `R = A·cos P`, `I = A·sin P`.
pub fn reconstruct(ap: &AmplitudePhase) -> Spectrum {
    let n = ap.amplitude.len();
    let mut real = Vec::with_capacity(n);
    let mut imag = Vec::with_capacity(n);
    for i in 0..n {
        let a = ap.amplitude.data()[i];
        let p = ap.phase.data()[i];
        real.push(a * p.cos());
        imag.push(a * p.sin());
    }
    let dims = ap.amplitude.dims().to_vec();
    Spectrum {
        real: Tensor::new(dims.clone(), real).expect("dims"),
        imag: Tensor::new(dims, imag).expect("dims"),
        centered: ap.centered,
    }
}

fn cyclic_shift(t: &Tensor, dy: usize, dx: usize) -> Tensor {
    let (c, h, w) = (t.dims()[0], t.dims()[1], t.dims()[2]);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for u in 0..h {
            let su = (u + dy) % h;
            for v in 0..w {
                let sv = (v + dx) % w;
                out[base + su * w + sv] = t.data()[base + u * w + v];
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("dims")
}

/// Moves the DC bin from `(0,0)` to `(⌊h/2⌋, ⌊w/2⌋)`.
pub fn center_shift(spectrum: &Spectrum) -> Result<Spectrum> {
    if spectrum.centered {
        return Err(Error::shape("spectrum is already centered"));
    }
    let (_, h, w) = check_image(&spectrum.real)?;
    Ok(Spectrum {
        real: cyclic_shift(&spectrum.real, h / 2, w / 2),
        imag: cyclic_shift(&spectrum.imag, h / 2, w / 2),
        centered: true,
    })
}

/// Inverse of [`center_shift`].
pub fn center_unshift(spectrum: &Spectrum) -> Result<Spectrum> {
    if !spectrum.centered {
        return Err(Error::shape("spectrum is not centered"));
    }
    let (_, h, w) = check_image(&spectrum.real)?;
    Ok(Spectrum {
        real: cyclic_shift(&spectrum.real, h - h / 2, w - w / 2),
        imag: cyclic_shift(&spectrum.imag, h - h / 2, w - w / 2),
        centered: false,
    })
}

/// The clustering signature of a domain: the flattened centered amplitude
/// spectrum with the central low-frequency square zeroed. Output length is
/// `c·h·w` (zeros kept in place), channels concatenated in C-order.
pub fn high_freq_feature(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = check_image(image)?;
    if h < 4 || w < 4 {
        return Err(Error::shape(format!(
            "high_freq_feature needs h, w ≥ 4, got {h}×{w}"
        )));
    }
    let spec = center_shift(&dft2(image)?)?;
    let ap = amplitude_phase(&spec);
    let mask = FreqMask::new(h, w);
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..h * w {
            out.push(ap.amplitude.data()[base + i] * mask.tensor().data()[i]);
        }
    }
    Tensor::new(vec![c * h * w], out)
}

/// Options for the amplitude perturbation.
#[derive(Debug, Clone, Copy)]
pub struct AugmentOptions {
    /// Perturbation magnitude (0 disables).
    pub alpha: f64,
    /// Std-dev of the Gaussian field Δ.
    pub sigma: f64,
    /// Draw an independent Δ per channel instead of one shared field.
    pub per_channel_delta: bool,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        AugmentOptions {
            alpha: 0.1,
            sigma: 1.0,
            per_channel_delta: false,
        }
    }
}

/// Applies `Ã = max(0, (1 + α·Δ)·A)` with `Δ ~ N(0, σ²)` per spatial bin,
/// shared across channels unless `per_channel_delta`, then Hermitian-
/// symmetrized so reconstruction stays real. Phase is untouched.
pub fn perturb_amplitude(
    ap: &AmplitudePhase,
    alpha: f64,
    sigma: f64,
    per_channel_delta: bool,
    rng: &mut SeededRng,
) -> Result<AmplitudePhase> {
    if ap.centered {
        return Err(Error::shape("perturb_amplitude requires an uncentered spectrum"));
    }
    if alpha < 0.0 || sigma <= 0.0 {
        return Err(Error::numeric(format!(
            "perturb_amplitude needs alpha ≥ 0 and sigma > 0, got {alpha}, {sigma}"
        )));
    }
    let (c, h, w) = check_image(&ap.amplitude)?;
    let fields = if per_channel_delta { c } else { 1 };
    let mut delta = vec![0.0; fields * h * w];
    for d in &mut delta {
        *d = sigma * rng.normal();
    }
    // Hermitian symmetrization: average each bin with its frequency mirror.
    let mut sym = vec![0.0; fields * h * w];
    for f in 0..fields {
        let base = f * h * w;
        for u in 0..h {
            let mu = (h - u) % h;
            for v in 0..w {
                let mv = (w - v) % w;
                sym[base + u * w + v] =
                    (delta[base + u * w + v] + delta[base + mu * w + mv]) / 2.0;
            }
        }
    }
    let mut amplitude = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let field = if per_channel_delta { ch } else { 0 } * h * w;
        for i in 0..h * w {
            let a = ap.amplitude.data()[ch * h * w + i];
            amplitude.push(((1.0 + alpha * sym[field + i]) * a).max(0.0));
        }
    }
    Ok(AmplitudePhase {
        amplitude: Tensor::new(vec![c, h, w], amplitude)?,
        phase: ap.phase.clone(),
        centered: false,
    })
}

/// Frequency-domain augmentation: perturb the amplitude spectrum, keep the
/// phase, reconstruct. Errors if the imaginary residue exceeds
/// `1e−6·‖out‖∞` (which would indicate a symmetry bug).
pub fn augment_with(image: &Tensor, opts: &AugmentOptions, rng: &mut SeededRng) -> Result<Tensor> {
    let ap = amplitude_phase(&dft2(image)?);
    let perturbed = perturb_amplitude(&ap, opts.alpha, opts.sigma, opts.per_channel_delta, rng)?;
    let (out, residue) = idft2(&reconstruct(&perturbed))?;
    let bound = 1e-6 * out.max_abs().max(f64::MIN_POSITIVE);
    if residue > bound {
        return Err(Error::numeric(format!(
            "augment imaginary residue {residue:e} exceeds {bound:e}"
        )));
    }
    Ok(out)
}

/// [`augment_with`] using a shared-channel Δ (the default convention).
pub fn augment(image: &Tensor, alpha: f64, sigma: f64, rng: &mut SeededRng) -> Result<Tensor> {
    augment_with(
        image,
        &AugmentOptions {
            alpha,
            sigma,
            per_channel_delta: false,
        },
        rng,
    )
}
