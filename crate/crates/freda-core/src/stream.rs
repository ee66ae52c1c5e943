//! Data provisioning: the synthetic glyph dataset, parametric corruption
//! families (the latent domains), and the mixed/continual scenario builders.
//!
//! Streams are lazy single-consumer iterators; every draw comes from one
//! sequential generator, so a (dataset, specs, length, seed) tuple fixes the
//! event sequence byte-for-byte regardless of which adapter consumes it.

use crate::container::Container;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// A labeled image collection; images are `n×c×h×w` in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let dims = images.dims();
        if dims.len() != 4 {
            return Err(Error::shape(format!(
                "dataset images must be n×c×h×w, got {dims:?}"
            )));
        }
        if dims[0] != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                dims[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::shape(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if !images.all_finite() {
            return Err(Error::numeric("dataset images contain non-finite values"));
        }
        Ok(LabeledDataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// Channel/height/width of one image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let d = self.images.dims();
        (d[1], d[2], d[3])
    }

    /// Copies image `i` out as a `[c, h, w]` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        let (c, h, w) = self.image_dims();
        let stride = c * h * w;
        Tensor::new(
            vec![c, h, w],
            self.images.data()[i * stride..(i + 1) * stride].to_vec(),
        )
        .expect("image dims")
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut c = Container::new();
        c.insert_tensor("images", &self.images)?;
        let bytes: Vec<u8> = self.labels.iter().map(|&l| l as u8).collect();
        c.insert_bytes("labels", vec![bytes.len()], bytes)?;
        c.write(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let c = Container::read(path)?;
        let images = c.tensor("images")?;
        let labels: Vec<usize> = c.bytes("labels")?.iter().map(|&b| b as usize).collect();
        let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
        LabeledDataset::new(images, labels, num_classes)
    }
}

/// The corruption families standing in for benchmark domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    GaussianBlur,
    Contrast,
    Pixelate,
    Identity,
}

impl CorruptionKind {
    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "gaussian_noise" => CorruptionKind::GaussianNoise,
            "impulse_noise" => CorruptionKind::ImpulseNoise,
            "gaussian_blur" => CorruptionKind::GaussianBlur,
            "contrast" => CorruptionKind::Contrast,
            "pixelate" => CorruptionKind::Pixelate,
            "identity" => CorruptionKind::Identity,
            other => {
                return Err(Error::config(
                    "corruptions",
                    format!("unknown corruption kind {other:?}"),
                ))
            }
        })
    }
}

/// Severity tables (index = severity − 1), chosen so severity 5 visibly
/// degrades a pretrained model.
const NOISE_SIGMA: [f64; 5] = [0.04, 0.06, 0.08, 0.12, 0.18];
const IMPULSE_FRACTION: [f64; 5] = [0.01, 0.02, 0.04, 0.07, 0.10];
const BLUR_SIGMA: [f64; 5] = [0.4, 0.6, 0.9, 1.2, 1.6];
const CONTRAST_GAMMA: [f64; 5] = [0.75, 0.6, 0.45, 0.3, 0.2];
const PIXELATE_BLOCK: [usize; 5] = [2, 3, 4, 6, 8];

/// One latent domain: a corruption kind at a severity in `1..=5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::config(
                "severity",
                format!("severity must be 1..=5, got {severity}"),
            ));
        }
        Ok(CorruptionSpec { kind, severity })
    }

    /// Stable report label, e.g. `gaussian_noise_s5`.
    pub fn label(&self) -> String {
        format!("{}_s{}", self.kind.name(), self.severity)
    }

    fn sev(&self) -> usize {
        self.severity as usize - 1
    }
}

fn clip01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Applies a corruption; output stays in `[0, 1]`. Deterministic given
/// `(spec, rng state, image)`; `identity` is a bit-identical no-op.
pub fn apply_corruption(image: &Tensor, spec: &CorruptionSpec, rng: &mut SeededRng) -> Tensor {
    let dims = image.dims();
    debug_assert_eq!(dims.len(), 3, "apply_corruption expects [c, h, w]");
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    match spec.kind {
        CorruptionKind::Identity => image.clone(),
        CorruptionKind::GaussianNoise => {
            let sigma = NOISE_SIGMA[spec.sev()];
            let mut out = image.clone();
            for v in out.data_mut() {
                *v = clip01(*v + sigma * rng.normal());
            }
            out
        }
        CorruptionKind::ImpulseNoise => {
            let frac = IMPULSE_FRACTION[spec.sev()];
            let mut out = image.clone();
            for y in 0..h {
                for x in 0..w {
                    if rng.uniform() < frac {
                        let value = if rng.uniform() < 0.5 { 0.0 } else { 1.0 };
                        for ch in 0..c {
                            out.data_mut()[ch * h * w + y * w + x] = value;
                        }
                    }
                }
            }
            out
        }
        CorruptionKind::GaussianBlur => gaussian_blur(image, BLUR_SIGMA[spec.sev()]),
        CorruptionKind::Contrast => {
            let gamma = CONTRAST_GAMMA[spec.sev()];
            let mut out = image.clone();
            for v in out.data_mut() {
                *v = clip01(0.5 + gamma * (*v - 0.5));
            }
            out
        }
        CorruptionKind::Pixelate => pixelate(image, PIXELATE_BLOCK[spec.sev()]),
    }
}

/// Separable Gaussian blur, kernel truncated at 4σ, edges clamped.
fn gaussian_blur(image: &Tensor, sigma: f64) -> Tensor {
    let dims = image.dims();
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }

    let mut tmp = vec![0.0; c * h * w];
    let src = image.data();
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let xx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += kv * src[base + y * w + xx];
                }
                tmp[base + y * w + x] = acc;
            }
        }
    }
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let yy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[base + yy * w + x];
                }
                out[base + y * w + x] = clip01(acc);
            }
        }
    }
    Tensor::new(dims.to_vec(), out).expect("dims")
}

/// Average-pool `block×block` tiles (partial tiles at edges averaged over
/// what exists), then nearest-neighbor upsample back.
fn pixelate(image: &Tensor, block: usize) -> Tensor {
    let dims = image.dims();
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    let mut out = vec![0.0; c * h * w];
    let src = image.data();
    for ch in 0..c {
        let base = ch * h * w;
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let y_end = (by + block).min(h);
                let x_end = (bx + block).min(w);
                let mut acc = 0.0;
                for y in by..y_end {
                    for x in bx..x_end {
                        acc += src[base + y * w + x];
                    }
                }
                let mean = acc / ((y_end - by) * (x_end - bx)) as f64;
                for y in by..y_end {
                    for x in bx..x_end {
                        out[base + y * w + x] = clip01(mean);
                    }
                }
            }
        }
    }
    Tensor::new(dims.to_vec(), out).expect("dims")
}

/// One test sample. The label and domain tag exist for post-hoc evaluation
/// only; adaptation code receives image batches, never events.
#[derive(Debug, Clone)]
pub struct StreamEvent {
    /// Position in the stream.
    pub index: usize,
    /// `[c, h, w]` image.
    pub image: Tensor,
    true_label: usize,
    true_domain: usize,
}

impl StreamEvent {
    /// Ground-truth class — evaluation only.
    pub fn true_label(&self) -> usize {
        self.true_label
    }

    /// Latent domain index (position in the corruption list) — evaluation only.
    pub fn true_domain(&self) -> usize {
        self.true_domain
    }
}

/// Per-class index lists for uniform exemplar draws.
fn class_indices(ds: &LabeledDataset) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); ds.num_classes()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    by_class
}

/// Lazy mixed-domains stream: every event draws (domain, class, exemplar)
/// independently and uniformly, then corrupts the exemplar.
pub struct MixedStream<'a> {
    ds: &'a LabeledDataset,
    specs: &'a [CorruptionSpec],
    by_class: Vec<Vec<usize>>,
    length: usize,
    next: usize,
    rng: SeededRng,
}

impl Iterator for MixedStream<'_> {
    type Item = StreamEvent;

    fn next(&mut self) -> Option<StreamEvent> {
        if self.next >= self.length {
            return None;
        }
        let domain = self.rng.index(self.specs.len());
        let class = self.rng.index(self.by_class.len());
        let exemplar = self.by_class[class][self.rng.index(self.by_class[class].len())];
        let image = apply_corruption(&self.ds.image(exemplar), &self.specs[domain], &mut self.rng);
        let event = StreamEvent {
            index: self.next,
            image,
            true_label: class,
            true_domain: domain,
        };
        self.next += 1;
        Some(event)
    }
}

/// Builds a mixed stream (needs ≥ 2 domains and a nonempty dataset with
/// every class represented).
pub fn mixed_stream<'a>(
    ds: &'a LabeledDataset,
    specs: &'a [CorruptionSpec],
    length: usize,
    rng: SeededRng,
) -> Result<MixedStream<'a>> {
    if specs.len() < 2 {
        return Err(Error::config(
            "corruptions",
            "mixed scenario needs at least 2 domains",
        ));
    }
    if ds.is_empty() {
        return Err(Error::shape("mixed_stream: empty dataset"));
    }
    let by_class = class_indices(ds);
    if by_class.iter().any(|c| c.is_empty()) {
        return Err(Error::shape("mixed_stream: a class has no exemplars"));
    }
    Ok(MixedStream {
        ds,
        specs,
        by_class,
        length,
        next: 0,
        rng,
    })
}

/// Lazy continual stream: domains appear contiguously in the given order,
/// `per_domain_length` events each; classes random within.
pub struct ContinualStream<'a> {
    ds: &'a LabeledDataset,
    specs: &'a [CorruptionSpec],
    by_class: Vec<Vec<usize>>,
    per_domain: usize,
    next: usize,
    rng: SeededRng,
}

impl Iterator for ContinualStream<'_> {
    type Item = StreamEvent;

    fn next(&mut self) -> Option<StreamEvent> {
        if self.next >= self.per_domain * self.specs.len() {
            return None;
        }
        let domain = self.next / self.per_domain;
        let class = self.rng.index(self.by_class.len());
        let exemplar = self.by_class[class][self.rng.index(self.by_class[class].len())];
        let image = apply_corruption(&self.ds.image(exemplar), &self.specs[domain], &mut self.rng);
        let event = StreamEvent {
            index: self.next,
            image,
            true_label: class,
            true_domain: domain,
        };
        self.next += 1;
        Some(event)
    }
}

pub fn continual_stream<'a>(
    ds: &'a LabeledDataset,
    specs: &'a [CorruptionSpec],
    per_domain_length: usize,
    rng: SeededRng,
) -> Result<ContinualStream<'a>> {
    if specs.is_empty() {
        return Err(Error::config("corruptions", "need at least 1 domain"));
    }
    if ds.is_empty() {
        return Err(Error::shape("continual_stream: empty dataset"));
    }
    let by_class = class_indices(ds);
    if by_class.iter().any(|c| c.is_empty()) {
        return Err(Error::shape("continual_stream: a class has no exemplars"));
    }
    Ok(ContinualStream {
        ds,
        specs,
        by_class,
        per_domain: per_domain_length,
        next: 0,
        rng,
    })
}

/// Chunks an event iterator into batches of `n`; the final partial batch is
/// emitted as-is.
pub struct Batched<I: Iterator> {
    inner: I,
    n: usize,
}

impl<I: Iterator> Iterator for Batched<I> {
    type Item = Vec<I::Item>;

    fn next(&mut self) -> Option<Vec<I::Item>> {
        let mut out = Vec::with_capacity(self.n);
        for _ in 0..self.n {
            match self.inner.next() {
                Some(item) => out.push(item),
                None => break,
            }
        }
        if out.is_empty() {
            None
        } else {
            Some(out)
        }
    }
}

pub fn batch<I: Iterator>(iter: I, n: usize) -> Batched<I> {
    assert!(n > 0, "batch size must be positive");
    Batched { inner: iter, n }
}

// ---------------------------------------------------------------------------
// Synthetic glyph dataset
// ---------------------------------------------------------------------------

/// Signed distance to an axis-aligned box with half-extents (a, b).
fn sd_box(u: f64, v: f64, a: f64, b: f64) -> f64 {
    (u.abs() - a).max(v.abs() - b)
}

fn sd_circle(u: f64, v: f64, r: f64) -> f64 {
    (u * u + v * v).sqrt() - r
}

/// Signed distance (negative inside) for glyph `id` at glyph-local coords.
fn glyph_distance(id: usize, u: f64, v: f64) -> f64 {
    match id {
        0 => sd_circle(u, v, 0.75),
        1 => (sd_circle(u, v, 0.0) - 0.62).abs() - 0.22, // ring
        2 => sd_box(u, v, 0.85, 0.24).min(sd_box(u, v, 0.24, 0.85)), // plus
        3 => {
            // diagonal cross: rotate 45° then plus
            let ru = (u + v) * std::f64::consts::FRAC_1_SQRT_2;
            let rv = (u - v) * std::f64::consts::FRAC_1_SQRT_2;
            sd_box(ru, rv, 0.95, 0.22).min(sd_box(ru, rv, 0.22, 0.95))
        }
        4 => {
            // horizontal bars
            let period = 0.62;
            let dv = (v + 1.0).rem_euclid(period) - period / 2.0;
            (dv.abs() - 0.17).max(sd_box(u, v, 0.8, 0.82))
        }
        5 => {
            // vertical bars
            let period = 0.62;
            let du = (u + 1.0).rem_euclid(period) - period / 2.0;
            (du.abs() - 0.17).max(sd_box(u, v, 0.82, 0.8))
        }
        6 => {
            // checkerboard: hard parity of 0.45-unit cells inside a box
            let cu = ((u + 2.0) / 0.45) as i64;
            let cv = ((v + 2.0) / 0.45) as i64;
            let inside = sd_box(u, v, 0.8, 0.8);
            if (cu + cv) % 2 == 0 {
                inside
            } else {
                inside.max(0.08)
            }
        }
        7 => {
            // upward triangle via three half-planes
            let e1 = v - 0.65; // below bottom edge
            let e2 = 0.87 * u - 0.5 * v - 0.55;
            let e3 = -0.87 * u - 0.5 * v - 0.55;
            e1.max(e2).max(e3)
        }
        8 => sd_box(u, v, 0.68, 0.68),
        9 => u.abs() + v.abs() - 0.92, // diamond
        10 => sd_box(u, v, 0.72, 0.72).abs() - 0.17, // hollow square
        11 => sd_circle(u, v, 0.8).max(-v), // half disk
        12 => sd_circle(u - 0.45, v, 0.38).min(sd_circle(u + 0.45, v, 0.38)), // two dots
        13 => sd_box(u + 0.42, v, 0.22, 0.8).min(sd_box(u + 0.05, v + 0.58, 0.6, 0.22)), // L
        14 => sd_box(u, v + 0.55, 0.8, 0.22).min(sd_box(u, v - 0.08, 0.22, 0.56)), // T
        15 => {
            // 2×2 dot grid
            sd_circle(u - 0.45, v - 0.45, 0.3)
                .min(sd_circle(u + 0.45, v - 0.45, 0.3))
                .min(sd_circle(u - 0.45, v + 0.45, 0.3))
                .min(sd_circle(u + 0.45, v + 0.45, 0.3))
        }
        _ => unreachable!("glyph id out of range"),
    }
}

const MAX_CLASSES: usize = 16;

/// Spectral magnitude of the background ripple added to every generated image.
const TEXTURE_AMP: f64 = 2.3;

/// Band-limited background texture: constant DFT magnitude [`TEXTURE_AMP`] on
/// every high-frequency bin (the band outside the central quarter block),
/// independent random phase per bin, Hermitian-symmetrized so the field is
/// real. Constant magnitude matters: it gives each clean image the same
/// high-frequency energy profile, so spectral differences between images are
/// dominated by whatever transformation the image went through rather than by
/// glyph content. Returns an `h·w` field with zero mean.
fn band_ripple(h: usize, w: usize, rng: &mut SeededRng) -> Result<Vec<f64>> {
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let pu = (h - u) % h;
            let pv = (w - v) % w;
            if (u, v) > (pu, pv) {
                continue; // conjugate partner already filled
            }
            let kept = 4 * u.min(h - u) > h || 4 * v.min(w - v) > w;
            if !kept {
                continue;
            }
            if (u, v) == (pu, pv) {
                // Self-conjugate bin: must stay real, so only the sign is free.
                let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                re[u * w + v] = sign * TEXTURE_AMP;
            } else {
                let phi = rng.range(0.0, std::f64::consts::TAU);
                re[u * w + v] = TEXTURE_AMP * phi.cos();
                im[u * w + v] = TEXTURE_AMP * phi.sin();
                re[pu * w + pv] = re[u * w + v];
                im[pu * w + pv] = -im[u * w + v];
            }
        }
    }
    let spectrum = crate::spectral::Spectrum {
        real: Tensor::new(vec![1, h, w], re)?,
        imag: Tensor::new(vec![1, h, w], im)?,
        centered: false,
    };
    let (field, _residue) = crate::spectral::idft2(&spectrum)?;
    Ok(field.data().to_vec())
}

/// Renders `C` distinguishable glyph classes with position/scale jitter,
/// per-image palettes, a soft background gradient, and a band-limited
/// background ripple of fixed spectral magnitude and random phase.
pub fn make_shapes_dataset(
    n_per_class: usize,
    num_classes: usize,
    h: usize,
    w: usize,
    rng: &mut SeededRng,
) -> Result<LabeledDataset> {
    if !(2..=MAX_CLASSES).contains(&num_classes) {
        return Err(Error::config(
            "classes",
            format!("supported class counts are 2..=16, got {num_classes}"),
        ));
    }
    if h != w || !(h == 16 || h == 32) {
        return Err(Error::config(
            "size",
            format!("supported sizes are 16 or 32 square, got {h}×{w}"),
        ));
    }
    let c = 3;
    let n = n_per_class * num_classes;
    let mut images = vec![0.0; n * c * h * w];
    let mut labels = Vec::with_capacity(n);
    let edge = 0.09; // soft edge width in glyph-local units

    for class in 0..num_classes {
        for item in 0..n_per_class {
            let idx = class * n_per_class + item;
            labels.push(class);

            let jx = rng.range(-0.15, 0.15);
            let jy = rng.range(-0.15, 0.15);
            let scale = rng.range(0.55, 0.8);
            // Palette ranges leave headroom for the ripple so clipping stays
            // rare (clipping would distort the texture's fixed spectrum).
            let bg: Vec<f64> = (0..3).map(|_| rng.range(0.22, 0.45)).collect();
            let fg: Vec<f64> = (0..3).map(|_| rng.range(0.55, 0.82)).collect();
            let grad_amp = rng.range(0.0, 0.08);
            let grad_theta = rng.range(0.0, std::f64::consts::TAU);
            let (gx, gy) = (grad_theta.cos(), grad_theta.sin());
            let texture = band_ripple(h, w, rng)?;

            let base = idx * c * h * w;
            for y in 0..h {
                let ny = (2.0 * y as f64 + 1.0) / h as f64 - 1.0;
                for x in 0..w {
                    let nx = (2.0 * x as f64 + 1.0) / w as f64 - 1.0;
                    let d = glyph_distance(class, (nx - jx) / scale, (ny - jy) / scale);
                    let cov = (0.5 - d / (2.0 * edge)).clamp(0.0, 1.0);
                    let grad = grad_amp * (gx * nx + gy * ny) / 2.0;
                    let ripple = texture[y * w + x];
                    for ch in 0..3 {
                        let v = bg[ch] * (1.0 - cov) + fg[ch] * cov + grad + ripple;
                        images[base + ch * h * w + y * w + x] = clip01(v);
                    }
                }
            }
        }
    }
    LabeledDataset::new(Tensor::new(vec![n, c, h, w], images)?, labels, num_classes)
}
