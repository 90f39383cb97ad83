//! Random transforms that destroy perturbation structure before
//! purification: patch masking (RT1), Gaussian noise then masking (RT2), and
//! N complementary masks over one shared noisy image (RT3).
//!
//! Masks are sampled with an exact missing-patch count, so RT3's masks
//! partition the patch grid exactly. Noisy images are clipped to `[0, 1]`
//! before masking.

use atop_tensor::{Element, Tensor};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransformKind {
    #[serde(rename = "RT1")]
    Rt1,
    #[serde(rename = "RT2")]
    Rt2,
    #[serde(rename = "RT3")]
    Rt3,
}

impl TransformKind {
    pub const ALL: [TransformKind; 3] = [TransformKind::Rt1, TransformKind::Rt2, TransformKind::Rt3];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Rt1 => "RT1",
            TransformKind::Rt2 => "RT2",
            TransformKind::Rt3 => "RT3",
        }
    }

    fn noisy(self) -> bool {
        !matches!(self, TransformKind::Rt1)
    }
}

impl std::fmt::Display for TransformKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformConfig {
    pub kind: TransformKind,
    /// Gaussian noise standard deviation (pixel units). Ignored by RT1.
    #[serde(default = "default_sigma")]
    pub sigma: f32,
    /// Patch side in pixels; `None` means one eighth of the image side.
    #[serde(default)]
    pub patch: Option<usize>,
    /// Fraction of patches removed by each mask.
    #[serde(default = "default_rate")]
    pub rate: f64,
    /// Number of complementary masks (RT3 only).
    #[serde(default = "default_n_masks")]
    pub n_masks: usize,
}

fn default_sigma() -> f32 {
    0.25
}
fn default_rate() -> f64 {
    0.25
}
fn default_n_masks() -> usize {
    4
}

impl TransformConfig {
    /// Defaults: sigma 0.25, patch side/8, rate 0.25, four masks.
    pub fn new(kind: TransformKind) -> Self {
        Self {
            kind,
            sigma: default_sigma(),
            patch: None,
            rate: default_rate(),
            n_masks: default_n_masks(),
        }
    }

    pub fn with_sigma(mut self, sigma: f32) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_rate(mut self, rate: f64) -> Self {
        self.rate = rate;
        self
    }

    pub fn with_patch(mut self, patch: usize) -> Self {
        self.patch = Some(patch);
        self
    }

    /// RT3 with `n` masks; the rate follows as `1/n`.
    pub fn with_masks(mut self, n: usize) -> Self {
        self.n_masks = n;
        if n > 0 {
            self.rate = 1.0 / n as f64;
        }
        self
    }

    pub fn patch_for(&self, height: usize) -> usize {
        self.patch.unwrap_or(height / 8)
    }

    /// Checks the config against an image size.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidConfig(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::InvalidConfig(format!(
                "rate must lie in [0, 1], got {}",
                self.rate
            )));
        }
        let p = self.patch_for(height);
        let grid = patch_grid((height, width), p)?;
        match self.kind {
            TransformKind::Rt1 | TransformKind::Rt2 => {
                missing_count(grid.0 * grid.1, self.rate)?;
            }
            TransformKind::Rt3 => {
                let np = grid.0 * grid.1;
                if self.n_masks == 0 || np % self.n_masks != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "{} masks do not divide the {np}-patch grid",
                        self.n_masks
                    )));
                }
                if (self.rate * self.n_masks as f64 - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidConfig(format!(
                        "RT3 needs rate * n_masks = 1, got {} * {}",
                        self.rate, self.n_masks
                    )));
                }
            }
        }
        Ok(())
    }
}

fn patch_grid(shape: (usize, usize), p: usize) -> Result<(usize, usize)> {
    let (h, w) = shape;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::InvalidConfig(format!(
            "patch side {p} must divide the image sides {h}x{w}"
        )));
    }
    Ok((h / p, w / p))
}

fn missing_count(num_patches: usize, rate: f64) -> Result<usize> {
    let exact = rate * num_patches as f64;
    let k = exact.round();
    if (exact - k).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "rate {rate} over {num_patches} patches is not a whole number of patches"
        )));
    }
    Ok(k as usize)
}

/// A binary keep-mask (1 kept, 0 missing), constant on each `p x p` patch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    patch: usize,
    keep: Vec<u8>,
}

impl Mask {
    fn from_missing_patches(shape: (usize, usize), p: usize, missing: &[usize]) -> Self {
        let (h, w) = shape;
        let gw = w / p;
        let mut keep = vec![1u8; h * w];
        for &patch in missing {
            let (pi, pj) = (patch / gw, patch % gw);
            for i in pi * p..(pi + 1) * p {
                keep[i * w + pj * p..i * w + (pj + 1) * p].fill(0);
            }
        }
        Self {
            height: h,
            width: w,
            patch: p,
            keep,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    /// Row-major `H x W` values in `{0, 1}`.
    pub fn values(&self) -> &[u8] {
        &self.keep
    }

    pub fn missing_pixels(&self) -> usize {
        self.keep.iter().filter(|&&v| v == 0).count()
    }

    /// Indices (row-major over the patch grid) of missing patches.
    pub fn missing_patches(&self) -> Vec<usize> {
        let p = self.patch;
        let gw = self.width / p;
        let gh = self.height / p;
        (0..gh * gw)
            .filter(|&k| self.keep[(k / gw) * p * self.width + (k % gw) * p] == 0)
            .collect()
    }
}

/// Masks whose missing regions partition the image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    pub masks: Vec<Mask>,
}

impl MaskSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Zeroes exactly `rate * num_patches` patches chosen uniformly without
/// replacement.
pub fn sample_patch_mask(rng: &mut SeededRng, shape: (usize, usize), p: usize, rate: f64) -> Result<Mask> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidConfig(format!("rate must lie in [0, 1], got {rate}")));
    }
    let (gh, gw) = patch_grid(shape, p)?;
    let np = gh * gw;
    let k = missing_count(np, rate)?;
    let missing = sample(rng, np, k).into_vec();
    Ok(Mask::from_missing_patches(shape, p, &missing))
}

/// A uniformly random partition of the patch grid into `n` equal missing
/// sets, one per mask.
pub fn sample_partition_masks(rng: &mut SeededRng, shape: (usize, usize), p: usize, n: usize) -> Result<MaskSet> {
    let (gh, gw) = patch_grid(shape, p)?;
    let np = gh * gw;
    if n == 0 || np % n != 0 {
        return Err(Error::InvalidConfig(format!(
            "{n} masks do not divide the {np}-patch grid"
        )));
    }
    let mut order: Vec<usize> = (0..np).collect();
    order.shuffle(rng);
    let per = np / n;
    let masks = order
        .chunks(per)
        .map(|chunk| Mask::from_missing_patches(shape, p, chunk))
        .collect();
    Ok(MaskSet { masks })
}

/// Pre-clip Gaussian noise `eta ~ N(0, sigma^2)` of the given shape.
pub fn sample_noise(shape: &[usize], sigma: f32, rng: &mut SeededRng) -> Result<Tensor<f32>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidConfig(format!("sigma must be >= 0, got {sigma}")));
    }
    Ok(Tensor::from_fn(shape.to_vec(), |_| {
        let z: f32 = StandardNormal.sample(rng);
        sigma * z
    }))
}

/// `clip(x + eta, 0, 1)` with fresh noise. `sigma = 0` returns `x` unchanged.
pub fn add_gaussian_noise(x: &Tensor<f32>, sigma: f32, rng: &mut SeededRng) -> Result<Tensor<f32>> {
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let eta = sample_noise(x.shape(), sigma, rng)?;
    Ok(x.zip_map(&eta, |a, b| (a + b).clamp(0.0, 1.0)))
}

/// All randomness of one transform application to a batch.
#[derive(Clone, Debug)]
pub struct TransformDraw {
    pub kind: TransformKind,
    /// Pre-clip noise for the whole batch; `None` for RT1 or `sigma = 0`.
    pub noise: Option<Tensor<f32>>,
    /// `views[v][n]`: mask of view `v` for image `n`. One view for RT1/RT2,
    /// `n_masks` views for RT3.
    pub views: Vec<Vec<Mask>>,
}

impl TransformDraw {
    /// Samples masks image by image, then the batch noise.
    pub fn sample(cfg: &TransformConfig, batch_shape: [usize; 4], rng: &mut SeededRng) -> Result<Self> {
        let [n, _, h, w] = batch_shape;
        cfg.validate(h, w)?;
        let p = cfg.patch_for(h);
        let views = match cfg.kind {
            TransformKind::Rt1 | TransformKind::Rt2 => {
                let masks = (0..n)
                    .map(|_| sample_patch_mask(rng, (h, w), p, cfg.rate))
                    .collect::<Result<Vec<_>>>()?;
                vec![masks]
            }
            TransformKind::Rt3 => {
                let sets = (0..n)
                    .map(|_| sample_partition_masks(rng, (h, w), p, cfg.n_masks))
                    .collect::<Result<Vec<_>>>()?;
                (0..cfg.n_masks)
                    .map(|v| sets.iter().map(|s| s.masks[v].clone()).collect())
                    .collect()
            }
        };
        let noise = if cfg.kind.noisy() && cfg.sigma > 0.0 {
            Some(sample_noise(&batch_shape, cfg.sigma, rng)?)
        } else {
            None
        };
        Ok(Self {
            kind: cfg.kind,
            noise,
            views,
        })
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn batch_len(&self) -> usize {
        self.views.first().map_or(0, Vec::len)
    }

    /// Keep-mask of view `v` broadcast to `[N, channels, H, W]`.
    pub fn mask_tensor<T: Element>(&self, v: usize, channels: usize) -> Tensor<T> {
        let masks = &self.views[v];
        let (h, w) = (masks[0].height, masks[0].width);
        let mut data = Vec::with_capacity(masks.len() * channels * h * w);
        for m in masks {
            for _ in 0..channels {
                data.extend(m.keep.iter().map(|&b| if b == 1 { T::one() } else { T::zero() }));
            }
        }
        Tensor::new(vec![masks.len(), channels, h, w], data)
    }

    /// `clip(x + eta, 0, 1)`, or `x` when there is no noise.
    pub fn noisy<T: Element>(&self, x: &Tensor<T>) -> Tensor<T> {
        match &self.noise {
            Some(eta) => {
                let eta: Tensor<T> = eta.cast();
                x.zip_map(&eta, |a, b| (a + b).max(T::zero()).min(T::one()))
            }
            None => x.clone(),
        }
    }

    /// The masked views `x_t^v = m_v * noisy(x)`.
    pub fn apply<T: Element>(&self, x: &Tensor<T>) -> Result<TransformOutput<T>> {
        let (n, c, h, w) = x.dims4();
        let m0 = &self.views[0][0];
        if n != self.batch_len() || h != m0.height || w != m0.width {
            return Err(Error::Shape(format!(
                "transform drawn for {} images of {}x{} applied to {n} images of {h}x{w}",
                self.batch_len(),
                m0.height,
                m0.width
            )));
        }
        if let Some(eta) = &self.noise {
            if eta.shape() != x.shape() {
                return Err(Error::Shape("noise shape differs from the batch".into()));
            }
        }
        let noisy = self.noisy(x);
        let views = (0..self.num_views())
            .map(|v| noisy.zip_map(&self.mask_tensor(v, c), |a, m| a * m))
            .collect();
        Ok(TransformOutput { noisy, views })
    }
}

/// Result of applying a [`TransformDraw`] to concrete images.
#[derive(Clone, Debug)]
pub struct TransformOutput<T> {
    /// The clipped noisy image shared by all views.
    pub noisy: Tensor<T>,
    pub views: Vec<Tensor<T>>,
}

/// Samples a draw for `x` and applies it.
pub fn apply_transform(
    x: &Tensor<f32>,
    cfg: &TransformConfig,
    rng: &mut SeededRng,
) -> Result<(TransformOutput<f32>, TransformDraw)> {
    if x.shape().len() != 4 {
        return Err(Error::Shape(format!("expected NCHW images, got {:?}", x.shape())));
    }
    let (n, c, h, w) = x.dims4();
    let draw = TransformDraw::sample(cfg, [n, c, h, w], rng)?;
    let out = draw.apply(x)?;
    Ok((out, draw))
}

/// `x_hat = sum_v (1 - m_v) * x_g^v`: every pixel is taken from the one
/// purifier pass for which it was missing. `keep_masks` are broadcast masks
/// as returned by [`TransformDraw::mask_tensor`].
pub fn aggregate_rt3<T: Element>(purified: &[Tensor<T>], keep_masks: &[Tensor<T>]) -> Result<Tensor<T>> {
    if purified.is_empty() || purified.len() != keep_masks.len() {
        return Err(Error::Shape(format!(
            "{} purified views for {} masks",
            purified.len(),
            keep_masks.len()
        )));
    }
    let mut out = Tensor::zeros(purified[0].shape().to_vec());
    for (xg, m) in purified.iter().zip(keep_masks) {
        if xg.shape() != out.shape() || m.shape() != out.shape() {
            return Err(Error::Shape("purified view and mask shapes differ".into()));
        }
        for ((o, &g), &k) in out.data_mut().iter_mut().zip(xg.data()).zip(m.data()) {
            *o = *o + (T::one() - k) * g;
        }
    }
    Ok(out)
}
