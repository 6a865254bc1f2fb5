//! Manifests, splits, sampling, decoding, augmentation and the synthetic corpus.

mod augment;
mod image;
mod manifest;
mod sampler;
mod split;
mod synth;

use rand::Rng;
use rayon::prelude::*;

pub use augment::{
    augment, erase_rect, flip_horizontal, normalize, prepare_eval, sample_erase, AugmentConfig, ErasingConfig,
    ERASE_RETRIES,
};
pub use image::{decode_any, decode_art, decode_image, decode_pgm, decode_ppm, encode_art, encode_pgm, encode_ppm, resize, ART_MAGIC};
pub use manifest::{load_manifest, Entry, Manifest, MANIFEST_HEADER};
pub use sampler::PkSampler;
pub use split::{
    closed_set_split, make_splits, partition_identities, SplitReport, SplitSpec, DEFAULT_QUERIES_PER_ID,
};
pub use synth::{generate, identity_name, render, synth_generate, Coat, SynthConfig, MANIFEST_NAME};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decode the given manifest entries, resized to `(H, W)` with values in `[0,1]`.
/// Decoding runs in parallel; the result keeps the order of `indices`.
pub fn load_images(m: &Manifest, indices: &[usize], resolution: (usize, usize)) -> Result<Vec<Tensor<f32>>> {
    indices
        .par_iter()
        .map(|&i| {
            let img = decode_image(&m.resolve(i))?;
            resize(&img, resolution.0, resolution.1)
        })
        .collect()
}

/// Stack equally shaped `[3,H,W]` images into `[N,3,H,W]`.
pub fn stack(images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("cannot stack an empty batch".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for im in images {
        if im.shape() != shape.as_slice() {
            return Err(Error::Shape(format!("batch mixes shapes {shape:?} and {:?}", im.shape())));
        }
        data.extend_from_slice(im.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::from_vec(full, data)
}

/// Augment pre-loaded images in a fixed order. Each image gets its own rng seeded
/// from the caller's stream, so results do not depend on worker scheduling.
pub fn augment_batch<R: Rng>(
    images: &[&Tensor<f32>],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    use rand::SeedableRng;
    let seeds: Vec<u64> = images.iter().map(|_| rng.next_u64()).collect();
    let out: Vec<Tensor<f32>> = images
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(im, &s)| augment(im, cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(s)))
        .collect::<Result<_>>()?;
    stack(&out)
}

/// Eval-time preprocessing of pre-loaded images into one batch.
pub fn eval_batch(images: &[&Tensor<f32>], cfg: &AugmentConfig) -> Result<Tensor<f32>> {
    let out: Vec<Tensor<f32>> = images.iter().map(|im| prepare_eval(im, cfg)).collect::<Result<_>>()?;
    stack(&out)
}
