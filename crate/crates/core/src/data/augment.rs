use rand::Rng;

use super::image::resize;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ERASE_RETRIES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct ErasingConfig {
    pub enabled: bool,
    pub prob: f64,
    /// Erased area as a fraction of the image area.
    pub area: (f64, f64),
    /// Height / width of the erased rectangle.
    pub aspect: (f64, f64),
    /// Pixel-space fill per channel (the dataset mean).
    pub fill: [f32; 3],
}

impl Default for ErasingConfig {
    fn default() -> Self {
        ErasingConfig {
            enabled: false,
            prob: 0.5,
            area: (0.02, 0.4),
            aspect: (0.3, 3.33),
            fill: [0.5; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub erasing: ErasingConfig,
    /// Network input `(H, W)`.
    pub resolution: (usize, usize),
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            erasing: ErasingConfig::default(),
            resolution: (64, 64),
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.resolution;
        if h == 0 || w == 0 {
            return Err(Error::config("data.resolution", "extents must be positive"));
        }
        if w < h {
            log::warn!("input width {w} is below height {h}; square or wide inputs are recommended");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("data.flip_prob", "must lie in [0, 1]"));
        }
        let e = &self.erasing;
        if !(0.0..=1.0).contains(&e.prob) {
            return Err(Error::config("data.erasing_prob", "must lie in [0, 1]"));
        }
        if !(0.0 < e.area.0 && e.area.0 <= e.area.1 && e.area.1 <= 1.0) {
            return Err(Error::config("data.erasing_area", "need 0 < lo <= hi <= 1"));
        }
        if !(0.0 < e.aspect.0 && e.aspect.0 <= e.aspect.1) {
            return Err(Error::config("data.erasing_aspect", "need 0 < lo <= hi"));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::config("data.std", "must be positive"));
        }
        Ok(())
    }
}

/// Mirror a `[C,H,W]` image along the width axis.
pub fn flip_horizontal(x: &Tensor<f32>) -> Tensor<f32> {
    let w = x.shape()[2];
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

/// Overwrite rows `top..top+h` and columns `left..left+w` with a per-channel value.
pub fn erase_rect(x: &mut Tensor<f32>, top: usize, left: usize, h: usize, w: usize, fill: [f32; 3]) {
    let (c, ih, iw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = x.data_mut();
    for ch in 0..c {
        for r in top..(top + h).min(ih) {
            let base = (ch * ih + r) * iw;
            d[base + left..base + (left + w).min(iw)].fill(fill[ch.min(2)]);
        }
    }
}

/// Draw an erasing rectangle `(top, left, h, w)`; `None` when no attempt fits.
pub fn sample_erase<R: Rng>(rng: &mut R, h: usize, w: usize, cfg: &ErasingConfig) -> Option<(usize, usize, usize, usize)> {
    let area = (h * w) as f64;
    for _ in 0..ERASE_RETRIES {
        let target = area * rng.random_range(cfg.area.0..=cfg.area.1);
        let aspect = rng.random_range(cfg.aspect.0..=cfg.aspect.1);
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh > 0 && ew > 0 && eh < h && ew < w {
            let top = rng.random_range(0..=h - eh);
            let left = rng.random_range(0..=w - ew);
            return Some((top, left, eh, ew));
        }
    }
    None
}

/// `(x - mean) / std` per channel.
pub fn normalize(x: &Tensor<f32>, mean: [f32; 3], std: [f32; 3]) -> Tensor<f32> {
    let plane = x.shape()[1] * x.shape()[2];
    let mut out = x.clone();
    for (ch, p) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        let (m, s) = (mean[ch.min(2)], std[ch.min(2)]);
        for v in p {
            *v = (*v - m) / s;
        }
    }
    out
}

/// Training-time transform of a `[3,H,W]` image in `[0,1]`: resize, flip, erase, normalize.
pub fn augment<R: Rng>(x: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor<f32>> {
    let (h, w) = cfg.resolution;
    let mut img = resize(x, h, w)?;
    if rng.random_bool(cfg.flip_prob) {
        img = flip_horizontal(&img);
    }
    if cfg.erasing.enabled && rng.random_bool(cfg.erasing.prob) {
        if let Some((t, l, eh, ew)) = sample_erase(rng, h, w, &cfg.erasing) {
            erase_rect(&mut img, t, l, eh, ew, cfg.erasing.fill);
        }
    }
    Ok(normalize(&img, cfg.mean, cfg.std))
}

/// Evaluation transform: resize and normalize only.
pub fn prepare_eval(x: &Tensor<f32>, cfg: &AugmentConfig) -> Result<Tensor<f32>> {
    let (h, w) = cfg.resolution;
    Ok(normalize(&resize(x, h, w)?, cfg.mean, cfg.std))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Init;

    fn img() -> Tensor<f32> {
        Tensor::alloc([3, 8, 8], Init::Gaussian { mean: 0.5, std: 0.2, seed: 4 }).unwrap()
    }

    #[test]
    fn double_flip_is_identity() {
        let x = img();
        assert!(flip_horizontal(&flip_horizontal(&x)).bit_eq(&x));
        assert_eq!(flip_horizontal(&x).get(&[1, 2, 0]), x.get(&[1, 2, 7]));
    }

    #[test]
    fn erased_pixels_equal_fill() {
        let x = img();
        let mut y = x.clone();
        erase_rect(&mut y, 2, 3, 3, 2, [0.1, 0.2, 0.3]);
        for c in 0..3 {
            for r in 0..8 {
                for q in 0..8 {
                    let inside = (2..5).contains(&r) && (3..5).contains(&q);
                    let v = y.get(&[c, r, q]);
                    if inside {
                        assert_eq!(v, [0.1, 0.2, 0.3][c]);
                    } else {
                        assert_eq!(v, x.get(&[c, r, q]));
                    }
                }
            }
        }
    }

    #[test]
    fn no_erasing_means_flip_and_normalize() {
        let cfg = AugmentConfig { resolution: (8, 8), flip_prob: 1.0, ..Default::default() };
        let x = img();
        let y = augment(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(y.bit_eq(&normalize(&flip_horizontal(&x), cfg.mean, cfg.std)));
    }

    #[test]
    fn reproducible_under_seed() {
        let mut cfg = AugmentConfig { resolution: (8, 8), ..Default::default() };
        cfg.erasing.enabled = true;
        let a = augment(&img(), &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = augment(&img(), &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn erase_sampling_fits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            if let Some((t, l, h, w)) = sample_erase(&mut rng, 16, 16, &ErasingConfig::default()) {
                assert!(t + h <= 16 && l + w <= 16 && h > 0 && w > 0);
            }
        }
    }
}
