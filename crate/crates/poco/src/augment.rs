//! Stochastic view generation for contrastive pairs.
//!
//! Every view is produced by a dedicated counter-based RNG stream
//! ([`RngStream`]), so view k of sample i is the same no matter which
//! worker generates it or in which order. Each augmentation draws its
//! eight underlying uniforms in a fixed order regardless of which effects
//! end up applied, keeping streams aligned across config changes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imagebuf::ImageBuf;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// random square crop, side fraction drawn from this range
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    pub grayscale_prob: f64,
    /// brightness/contrast/saturation factors, each drawn from this range
    pub jitter: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale: (0.6, 1.0),
            flip_prob: 0.5,
            grayscale_prob: 0.2,
            jitter: (0.6, 1.4),
        }
    }
}

impl AugmentConfig {
    /// Configuration whose draws leave the image unchanged; used to bypass
    /// augmentation while keeping RNG streams aligned.
    pub fn identity() -> Self {
        AugmentConfig {
            crop_scale: (1.0, 1.0),
            flip_prob: 0.0,
            grayscale_prob: 0.0,
            jitter: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!(
                "augment: crop_scale ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("grayscale_prob", self.grayscale_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("augment: {name} {p} must be in [0, 1]")));
            }
        }
        let (jlo, jhi) = self.jitter;
        if !(jlo >= 0.0 && jlo <= jhi && jhi.is_finite()) {
            return Err(Error::config(format!(
                "augment: jitter ({jlo}, {jhi}) must satisfy 0 <= lo <= hi"
            )));
        }
        Ok(())
    }
}

/// Address of one deterministic random stream: `seed` is the experiment
/// seed, `stream` identifies (sample, view, purpose).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Concrete augmentation choices after sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub crop_scale: f64,
    /// offsets as fractions of the unused span
    pub crop_x: f64,
    pub crop_y: f64,
    pub flip: bool,
    pub grayscale: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

fn lerp(u: f64, range: (f64, f64)) -> f64 {
    range.0 + u * (range.1 - range.0)
}

/// Draw the eight uniforms in their fixed order: crop scale, crop x,
/// crop y, flip, grayscale, brightness, contrast, saturation.
pub fn draw_params(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> AugmentParams {
    let u_scale: f64 = rng.random();
    let u_x: f64 = rng.random();
    let u_y: f64 = rng.random();
    let u_flip: f64 = rng.random();
    let u_gray: f64 = rng.random();
    let u_b: f64 = rng.random();
    let u_c: f64 = rng.random();
    let u_s: f64 = rng.random();
    AugmentParams {
        crop_scale: lerp(u_scale, cfg.crop_scale),
        crop_x: u_x,
        crop_y: u_y,
        flip: u_flip < cfg.flip_prob,
        grayscale: u_gray < cfg.grayscale_prob,
        brightness: lerp(u_b, cfg.jitter),
        contrast: lerp(u_c, cfg.jitter),
        saturation: lerp(u_s, cfg.jitter),
    }
}

/// Apply drawn parameters: crop-and-resize, flip, grayscale, then
/// brightness, contrast and saturation jitter, clamped back to [0, 1].
pub fn apply_params(img: &ImageBuf, p: &AugmentParams) -> Result<ImageBuf> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let crop_w = p.crop_scale * w;
    let crop_h = p.crop_scale * h;
    let x = p.crop_x * (w - crop_w);
    let y = p.crop_y * (h - crop_h);
    let mut out = img.crop_resize(x, y, crop_w, crop_h, img.width(), img.height())?;
    if p.flip {
        out = out.flip_horizontal();
    }
    if p.grayscale {
        out = out.desaturated();
    }
    // brightness
    if p.brightness != 1.0 {
        for v in out.data_mut() {
            *v *= p.brightness as f32;
        }
    }
    // contrast about the mean luma
    if p.contrast != 1.0 {
        let mean = out.luma().mean() as f32;
        let f = p.contrast as f32;
        for v in out.data_mut() {
            *v = mean + f * (*v - mean);
        }
    }
    // saturation about the per-pixel luma; no-op for single-channel input
    if p.saturation != 1.0 && out.channels() == 3 {
        let f = p.saturation as f32;
        for px in out.data_mut().chunks_exact_mut(3) {
            let l = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            for v in px {
                *v = l + f * (*v - l);
            }
        }
    }
    out.clamp01();
    Ok(out)
}

/// One augmented view of `img`, fully determined by the stream.
pub fn augment(img: &ImageBuf, cfg: &AugmentConfig, stream: RngStream) -> Result<ImageBuf> {
    cfg.validate()?;
    let mut rng = stream.rng();
    let params = draw_params(cfg, &mut rng);
    apply_params(img, &params)
}

/// Two views of the same image from two distinct streams. Identical
/// streams would yield identical views, which collapses the positive pair
/// into a trivial one, so that is rejected.
pub fn make_positive_pair(
    img: &ImageBuf,
    cfg: &AugmentConfig,
    first: RngStream,
    second: RngStream,
) -> Result<(ImageBuf, ImageBuf)> {
    if first == second {
        return Err(Error::invalid(format!(
            "make_positive_pair: both views use stream (seed {}, stream {})",
            first.seed, first.stream
        )));
    }
    Ok((augment(img, cfg, first)?, augment(img, cfg, second)?))
}
