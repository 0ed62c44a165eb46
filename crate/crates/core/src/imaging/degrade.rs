//! Undersampled-acquisition proxy: point decimation, speckle-like noise,
//! bicubic ×2 back onto the original grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::resize::resize_plane;
use super::Image;
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradeConfig {
    /// Standard deviation of the noise at mid intensity.
    pub noise_amplitude: f32,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            noise_amplitude: 0.04,
        }
    }
}

/// [`degrade_with`] using the default noise level.
pub fn degrade(hr: &Image, noise_seed: u64) -> Result<Image> {
    degrade_with(hr, noise_seed, &DegradeConfig::default())
}

pub fn degrade_with(hr: &Image, noise_seed: u64, cfg: &DegradeConfig) -> Result<Image> {
    let (h, w) = hr.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return invalid(format!("degrade needs even dims, got {h}x{w}"));
    }
    let (lh, lw) = (h / 2, w / 2);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let mut low = Vec::with_capacity(lh * lw);
    for y in 0..lh {
        for x in 0..lw {
            let v = hr.get(2 * y, 2 * x) as f64;
            let n = normal.sample(&mut rng);
            // Intensity-dependent noise, like speckle on flow signal.
            let noisy = v + cfg.noise_amplitude as f64 * n * (0.5 + v);
            low.push(noisy.clamp(0.0, 1.0));
        }
    }
    let up = resize_plane(&low, (lh, lw), (h, w));
    Image::from_clamped(h, w, up.into_iter().map(|v| v as f32).collect())
}
