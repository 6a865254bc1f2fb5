//! Procedural texture identities: each identity is a patterned body whose coat
//! (hue, spots, stripes) is fixed, photographed under varying pose and light.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::encode_ppm;
use super::manifest::Manifest;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_ids: usize,
    pub imgs_per_id: usize,
    /// `(H, W)` of the written images.
    pub resolution: (usize, usize),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_ids: 16,
            imgs_per_id: 12,
            resolution: (64, 64),
            seed: 0,
        }
    }
}

/// Fixed coat parameters of one identity.
#[derive(Debug, Clone)]
pub struct Coat {
    pub base: [f64; 3],
    pub accent: [f64; 3],
    pub dark: [f64; 3],
    /// Spot centers and radii in body coordinates.
    pub spots: Vec<(f64, f64, f64)>,
    pub stripe_freq: f64,
    pub stripe_angle: f64,
    pub stripe_phase: f64,
    pub striped: bool,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl Coat {
    /// `slot` places the hue in one of `n_ids` equal bands so identities stay distinct.
    pub fn random(rng: &mut ChaCha8Rng, slot: usize, n_ids: usize) -> Coat {
        let hue = (slot as f64 + rng.random_range(0.2..0.8)) / n_ids as f64;
        let sat = rng.random_range(0.55..0.95);
        let val = rng.random_range(0.6..0.95);
        let accent_shift = rng.random_range(0.25..0.75);
        let n_spots = rng.random_range(4..=12);
        let scale = rng.random_range(0.08..0.2);
        let spots = (0..n_spots)
            .map(|_| {
                (
                    rng.random_range(-0.75..0.75),
                    rng.random_range(-0.5..0.5),
                    scale * rng.random_range(0.7..1.3),
                )
            })
            .collect();
        Coat {
            base: hsv(hue, sat, val),
            accent: hsv(hue + accent_shift, sat, val * 0.9),
            dark: hsv(hue, sat, val * 0.35),
            spots,
            stripe_freq: rng.random_range(6.0..16.0),
            stripe_angle: rng.random_range(0.0..PI),
            stripe_phase: rng.random_range(0.0..2.0 * PI),
            striped: rng.random_bool(0.5),
        }
    }

    fn color_at(&self, u: f64, v: f64) -> [f64; 3] {
        if self.spots.iter().any(|&(su, sv, r)| (u - su).powi(2) + (v - sv).powi(2) < r * r) {
            return self.accent;
        }
        if self.striped {
            let t = u * self.stripe_angle.cos() + v * self.stripe_angle.sin();
            if (self.stripe_freq * t + self.stripe_phase).sin() > 0.3 {
                return self.dark;
            }
        }
        self.base
    }
}

/// Render one view: rotation within ±20°, translation within ±10%, brightness
/// within ±20%, noisy background.
pub fn render(coat: &Coat, rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f32> {
    let angle = rng.random_range(-20.0..=20.0) * PI / 180.0;
    let (tx, ty) = (rng.random_range(-0.2..=0.2), rng.random_range(-0.2..=0.2));
    let bright = rng.random_range(0.8..=1.2);
    let bg = rng.random_range(0.15..0.85);
    let (sin, cos) = angle.sin_cos();
    let (ru, rv) = (0.78, 0.52);
    let plane = h * w;
    let mut data = vec![0f32; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let px = (x as f64 + 0.5) / w as f64 * 2.0 - 1.0 - tx;
            let py = (y as f64 + 0.5) / h as f64 * 2.0 - 1.0 - ty;
            let u = cos * px + sin * py;
            let v = -sin * px + cos * py;
            let rgb = if (u / ru).powi(2) + (v / rv).powi(2) <= 1.0 {
                let c = coat.color_at(u, v);
                [0, 1, 2].map(|k| c[k] * bright + rng.random_range(-0.03..0.03))
            } else {
                [0, 1, 2].map(|_| bg + rng.random_range(-0.12..0.12))
            };
            for k in 0..3 {
                data[k * plane + y * w + x] = rgb[k].clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::from_vec([3, h, w], data).expect("extents match")
}

/// All images in identity-major order, with identity indices.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<(usize, Tensor<f32>)>> {
    if cfg.n_ids < 2 {
        return Err(Error::config("synth.ids", "need at least 2 identities"));
    }
    if cfg.imgs_per_id == 0 || cfg.resolution.0 == 0 || cfg.resolution.1 == 0 {
        return Err(Error::config("synth.images", "image count and resolution must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut slots: Vec<usize> = (0..cfg.n_ids).collect();
    slots.shuffle(&mut rng);
    let coats: Vec<Coat> = slots.iter().map(|&s| Coat::random(&mut rng, s, cfg.n_ids)).collect();
    let (h, w) = cfg.resolution;
    let mut out = Vec::with_capacity(cfg.n_ids * cfg.imgs_per_id);
    for (id, coat) in coats.iter().enumerate() {
        for _ in 0..cfg.imgs_per_id {
            out.push((id, render(coat, &mut rng, h, w)));
        }
    }
    Ok(out)
}

pub fn identity_name(id: usize) -> String {
    format!("id{id:03}")
}

/// Write the corpus as PPM files plus `manifest.csv` under `out_dir`.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    let images = generate(cfg)?;
    let mut pairs = Vec::with_capacity(images.len());
    let mut counters = vec![0usize; cfg.n_ids];
    for (id, img) in &images {
        let name = identity_name(*id);
        let dir = out_dir.join(&name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let rel = format!("{name}/{:03}.ppm", counters[*id]);
        counters[*id] += 1;
        let path = out_dir.join(&rel);
        std::fs::write(&path, encode_ppm(img)?).map_err(|e| Error::io(&path, e))?;
        pairs.push((rel, name));
    }
    let m = Manifest::from_pairs(out_dir, pairs)?;
    m.save(&out_dir.join(MANIFEST_NAME))?;
    Ok(m)
}
