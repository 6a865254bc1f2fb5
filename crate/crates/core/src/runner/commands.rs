//! The four user-facing commands. The binary only parses arguments and calls these.

use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::trainer::{run_training, training_split, RunPaths, TrainState, Trainer};
use crate::data::{decode_any, load_manifest, resize, synth_generate, Manifest, SplitSpec, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{extract_embeddings, heatmap, heatmap_path, rank, write_heatmap, MetricsReport};
use crate::model::ReidModel;
use crate::tensor::Tensor;

/// Train from a fresh state, or continue from `resume`. Returns the final checkpoint path.
pub fn cmd_train(cfg: &RunConfig, manifest: &Path, out: &Path, resume: Option<&Path>) -> Result<PathBuf> {
    let m = load_manifest(manifest)?;
    let mut trainer = match resume {
        Some(c) => Trainer::resume(&Checkpoint::load(c)?, &m)?,
        None => Trainer::new(cfg, &m)?,
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let split_path = out.join("split.csv");
    std::fs::write(&split_path, trainer.data.split.report().to_string()).map_err(|e| Error::io(&split_path, e))?;
    run_training(&mut trainer, out, None)?;
    Ok(RunPaths::new(out).final_ckpt())
}

/// Evaluation result with the split it was computed on.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub split: SplitSpec,
    pub probe_paths: Vec<String>,
}

/// Model and config restored from a checkpoint, ready for inference.
pub fn load_model(ckpt: &Path) -> Result<(RunConfig, ReidModel<f32>)> {
    let st = TrainState::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    Ok((st.cfg, st.model))
}

/// Decode manifest entries for inference, rejecting channel counts the model cannot take.
fn load_eval_images(m: &Manifest, indices: &[usize], cfg: &RunConfig) -> Result<Vec<Tensor<f32>>> {
    use rayon::prelude::*;
    let (h, w) = cfg.aug.resolution;
    indices
        .par_iter()
        .map(|&i| {
            let path = m.resolve(i);
            let img = decode_any(&path)?;
            if img.rank() != 3 || img.shape()[0] != 3 {
                return Err(Error::Contract(format!(
                    "`{}` decodes to {:?}; the model takes 3-channel images",
                    path.display(),
                    img.shape()
                )));
            }
            resize(&img, h, w)
        })
        .collect()
}

/// Rank probe against gallery under the checkpoint's model. `split_seed` defaults
/// to the seed used at training time; `on_train` evaluates the training identities.
pub fn evaluate(ckpt: &Path, m: &Manifest, split_seed: Option<u64>, on_train: bool) -> Result<EvalOutcome> {
    let (mut cfg, model) = load_model(ckpt)?;
    if let Some(s) = split_seed {
        if s != cfg.split_seed {
            log::warn!(
                "split seed {s} differs from the training split seed {}; test identities may overlap training",
                cfg.split_seed
            );
        }
        cfg.split_seed = s;
    }
    cfg.validate()
        .map_err(|e| Error::Contract(format!("checkpoint config is not usable for evaluation: {e}")))?;
    let base = training_split(&cfg, m)?;
    let split = if on_train && !base.closed_set { base.on_train(m)? } else { base };
    if split.closed_set {
        log::warn!("sanity mode: evaluating on training identities");
    }
    let probe = load_eval_images(m, &split.probe, &cfg)?;
    let gallery = load_eval_images(m, &split.gallery, &cfg)?;
    let q = extract_embeddings(&model, &probe.iter().collect::<Vec<_>>(), &cfg.aug, cfg.eval_batch)?;
    let g = extract_embeddings(&model, &gallery.iter().collect::<Vec<_>>(), &cfg.aug, cfg.eval_batch)?;
    let ids = |v: &[usize]| v.iter().map(|&i| m.entries[i].identity).collect::<Vec<_>>();
    let r = rank(&q, &ids(&split.probe), &g, &ids(&split.gallery))?;
    let report = MetricsReport::from_ranking(&r)?;
    let probe_paths = split.probe.iter().map(|&i| m.entries[i].path.clone()).collect();
    Ok(EvalOutcome {
        report,
        split,
        probe_paths,
    })
}

/// Write `metrics.txt` (or `metrics.sanity.txt`), `per_query.csv` and `split.csv`.
pub fn cmd_eval(ckpt: &Path, manifest: &Path, split_seed: Option<u64>, out: &Path, on_train: bool) -> Result<EvalOutcome> {
    let m = load_manifest(manifest)?;
    let res = evaluate(ckpt, &m, split_seed, on_train)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let name = if res.split.closed_set { "metrics.sanity.txt" } else { "metrics.txt" };
    let files = [
        (name, res.report.to_string()),
        ("per_query.csv", res.report.per_query_csv(&res.probe_paths)),
        ("split.csv", res.split.report().to_string()),
    ];
    for (f, text) in files {
        let p = out.join(f);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(res)
}

pub fn cmd_synth(cfg: &SynthConfig, out: &Path) -> Result<Manifest> {
    synth_generate(cfg, out)
}

/// One `<stem>.heat.pgm` per input image; returns the written paths.
pub fn cmd_heatmap(ckpt: &Path, images: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    // Inputs from different folders can share a stem; refuse rather than overwrite.
    let mut seen = std::collections::HashMap::new();
    for path in images {
        if let Some(prev) = seen.insert(heatmap_path(path, out), path) {
            return Err(Error::Contract(format!(
                "`{}` and `{}` would both write {}",
                prev.display(),
                path.display(),
                heatmap_path(path, out).display()
            )));
        }
    }
    let (cfg, model) = load_model(ckpt)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::with_capacity(images.len());
    for path in images {
        let img = crate::data::decode_image(path)?;
        let img = resize(&img, cfg.aug.resolution.0, cfg.aug.resolution.1)?;
        let map = heatmap(&model, &img, &cfg.aug)?;
        let dst = heatmap_path(path, out);
        write_heatmap(&map, &dst)?;
        written.push(dst);
    }
    Ok(written)
}
