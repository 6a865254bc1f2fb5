//! The training loop and its checkpointable state.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, RecordData};
use super::config::{parse_config, RunConfig};
use crate::autodiff::Tape;
use crate::data::{augment_batch, closed_set_split, load_images, make_splits, Manifest, PkSampler, SplitSpec};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossReport};
use crate::model::ReidModel;
use crate::nn::{Ctx, Mode};
use crate::optim::{apply_freeze, cosine_lr, Adam, Moments};
use crate::tensor::Tensor;

pub const LOG_HEADER: &str = "step,epoch,lr,loss_total,loss_tp,loss_ce";
pub const LOG_NAME: &str = "train_log.csv";
pub const LATEST_NAME: &str = "latest.arbc";
pub const FINAL_NAME: &str = "final.arbc";

const SAMPLER_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Split used for training: open-set unless the train fraction is 1.
pub fn training_split(cfg: &RunConfig, m: &Manifest) -> Result<SplitSpec> {
    if cfg.train_fraction >= 1.0 {
        closed_set_split(m, cfg.queries_per_id, cfg.split_seed)
    } else {
        make_splits(m, cfg.train_fraction, cfg.queries_per_id, cfg.split_seed)
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub cfg: RunConfig,
    pub model: ReidModel<f32>,
    pub adam: Adam<f32>,
    /// Completed optimizer steps.
    pub step: u64,
    pub sampler_rng: ChaCha8Rng,
    pub augment_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn fresh(cfg: &RunConfig, num_classes: usize) -> Result<Self> {
        Ok(TrainState {
            cfg: cfg.clone(),
            model: ReidModel::new(&cfg.model, Some(num_classes), cfg.seed)?,
            adam: Adam::new(cfg.adam),
            step: 0,
            sampler_rng: stream_rng(cfg.seed, SAMPLER_STREAM),
            augment_rng: stream_rng(cfg.seed, AUGMENT_STREAM),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint {
            config: self.cfg.to_text(),
            records: Vec::new(),
        };
        let u64s = |v: Vec<u64>| RecordData::U64 { shape: vec![v.len()], data: v };
        c.push("step", u64s(vec![self.step]));
        c.push(
            "num_classes",
            u64s(vec![self.model.num_classes().unwrap_or(0) as u64]),
        );
        for (name, t) in self.model.named_tensors() {
            c.push(format!("model.{name}"), RecordData::F32(t.clone()));
        }
        c.push("adam.t", u64s(vec![self.adam.t]));
        for (name, mo) in &self.adam.state {
            c.push(format!("adam.m.{name}"), RecordData::F32(mo.m.clone()));
            c.push(format!("adam.v.{name}"), RecordData::F32(mo.v.clone()));
        }
        c.push("rng.sampler", u64s(rng_words(&self.sampler_rng)));
        c.push("rng.augment", u64s(rng_words(&self.augment_rng)));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let cfg = parse_config(&c.config, &[])?;
        let num_classes = scalar_u64(c, "num_classes")? as usize;
        let mut model = ReidModel::new(&cfg.model, (num_classes > 0).then_some(num_classes), cfg.seed)?;
        let mut tensors = HashMap::new();
        let mut m = HashMap::new();
        let mut v = HashMap::new();
        for r in &c.records {
            let f32_of = |d: &RecordData| match d {
                RecordData::F32(t) => Ok(t.clone()),
                _ => Err(Error::Corruption(format!("record `{}` should hold f32 values", r.name))),
            };
            if let Some(name) = r.name.strip_prefix("model.") {
                tensors.insert(name.to_string(), f32_of(&r.data)?);
            } else if let Some(name) = r.name.strip_prefix("adam.m.") {
                m.insert(name.to_string(), f32_of(&r.data)?);
            } else if let Some(name) = r.name.strip_prefix("adam.v.") {
                v.insert(name.to_string(), f32_of(&r.data)?);
            }
        }
        model.load_tensors(tensors)?;
        let mut adam = Adam::new(cfg.adam);
        adam.t = scalar_u64(c, "adam.t")?;
        for (name, m) in m {
            let v = v
                .remove(&name)
                .ok_or_else(|| Error::Corruption(format!("optimizer state for `{name}` lacks its second moment")))?;
            adam.state.insert(name, Moments { m, v });
        }
        if let Some(name) = v.keys().next() {
            return Err(Error::Corruption(format!("optimizer state for `{name}` lacks its first moment")));
        }
        Ok(TrainState {
            step: scalar_u64(c, "step")?,
            sampler_rng: rng_from(c, "rng.sampler")?,
            augment_rng: rng_from(c, "rng.augment")?,
            cfg,
            model,
            adam,
        })
    }
}

fn rng_words(r: &ChaCha8Rng) -> Vec<u64> {
    let seed = r.get_seed();
    let mut w: Vec<u64> = seed.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
    let pos = r.get_word_pos();
    w.extend([r.get_stream(), pos as u64, (pos >> 64) as u64]);
    w
}

fn rng_from(c: &Checkpoint, name: &str) -> Result<ChaCha8Rng> {
    let Some(RecordData::U64 { data, .. }) = c.get(name) else {
        return Err(Error::Corruption(format!("missing rng record `{name}`")));
    };
    let [s0, s1, s2, s3, stream, lo, hi] = data[..] else {
        return Err(Error::Corruption(format!("rng record `{name}` has {} words, expected 7", data.len())));
    };
    let mut seed = [0u8; 32];
    for (i, w) in [s0, s1, s2, s3].iter().enumerate() {
        seed[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
    }
    let mut r = ChaCha8Rng::from_seed(seed);
    r.set_stream(stream);
    r.set_word_pos(((hi as u128) << 64) | lo as u128);
    Ok(r)
}

fn scalar_u64(c: &Checkpoint, name: &str) -> Result<u64> {
    match c.get(name) {
        Some(RecordData::U64 { data, .. }) if data.len() == 1 => Ok(data[0]),
        _ => Err(Error::Corruption(format!("missing or malformed record `{name}`"))),
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub report: LossReport,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!("{},{},{},{},{},{}", self.step, self.epoch, self.lr, r.total, r.triplet_mean, r.ce_mean)
    }
}

/// Decoded training images with their class labels and the batch sampler.
pub struct TrainData {
    pub split: SplitSpec,
    pub images: Vec<Tensor<f32>>,
    pub entries: Vec<usize>,
    pub sampler: PkSampler,
}

impl TrainData {
    pub fn load(cfg: &RunConfig, m: &Manifest) -> Result<Self> {
        let split = training_split(cfg, m)?;
        let pairs = split.train_labels(m);
        let entries: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let sampler = PkSampler::new(&labels, cfg.p, cfg.k)?;
        let images = load_images(m, &entries, cfg.aug.resolution)?;
        Ok(TrainData {
            split,
            images,
            entries,
            sampler,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.split.num_classes()
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.sampler.epoch_len() as u64
    }
}

/// Drives `TrainState` over `TrainData`.
pub struct Trainer {
    pub state: TrainState,
    pub data: TrainData,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, m: &Manifest) -> Result<Self> {
        let data = TrainData::load(cfg, m)?;
        let state = TrainState::fresh(cfg, data.num_classes())?;
        Ok(Trainer { state, data })
    }

    pub fn resume(c: &Checkpoint, m: &Manifest) -> Result<Self> {
        let state = TrainState::from_checkpoint(c)?;
        let data = TrainData::load(&state.cfg, m)?;
        if state.model.num_classes() != Some(data.num_classes()) {
            return Err(Error::Contract(format!(
                "checkpoint has {:?} classes, the manifest split gives {}",
                state.model.num_classes(),
                data.num_classes()
            )));
        }
        Ok(Trainer { state, data })
    }

    pub fn total_steps(&self) -> u64 {
        self.state.cfg.epochs as u64 * self.data.steps_per_epoch()
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    /// One sample/augment/forward/backward/update cycle.
    pub fn step(&mut self) -> Result<StepLog> {
        let total = self.total_steps();
        let st = &mut self.state;
        let schedule = st.cfg.schedule(total);
        let t = st.step;
        let lr = cosine_lr(t, &schedule);
        let mask = apply_freeze(t, &schedule);
        let batch = self.data.sampler.next_batch(&mut st.sampler_rng);
        let labels: Vec<usize> = batch.iter().map(|&i| self.data.sampler.label(i)).collect();
        let imgs: Vec<&Tensor<f32>> = batch.iter().map(|&i| &self.data.images[i]).collect();
        let x = augment_batch(&imgs, &st.cfg.aug, &mut st.augment_rng)?;

        let tape = Tape::new();
        let ctx = Ctx::new(&tape, Mode::Train, mask.clone());
        let out = st.model.forward(&ctx, ctx.input(x))?;
        let (loss, report) = total_loss(&out, &labels, &st.cfg.loss)?;
        if !report.total.is_finite() {
            let mut dump = String::new();
            for &i in &batch {
                let _ = write!(dump, " {}", self.data.entries[i]);
            }
            return Err(Error::Numeric(format!(
                "loss is {} at step {t}; batch manifest indices:{dump}",
                report.total
            )));
        }
        let grads = tape.backward(loss)?;
        let stats = ctx.take_stats();
        drop(out);
        st.adam.step(&mut st.model, grads.by_name(), lr, &mask)?;
        st.model.commit_stats(&stats)?;
        st.step += 1;
        Ok(StepLog {
            step: t,
            epoch: t / self.data.steps_per_epoch(),
            lr,
            report,
        })
    }
}

/// Output locations of one training run.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        RunPaths { dir: dir.to_path_buf() }
    }
    pub fn log(&self) -> PathBuf {
        self.dir.join(LOG_NAME)
    }
    pub fn latest(&self) -> PathBuf {
        self.dir.join(LATEST_NAME)
    }
    pub fn final_ckpt(&self) -> PathBuf {
        self.dir.join(FINAL_NAME)
    }
}

/// Train until done (or until `stop_after_epochs` more epochs when given),
/// checkpointing after each epoch and at the end. Log rows are appended, so a
/// resumed run continues the same file.
pub fn run_training(trainer: &mut Trainer, out: &Path, stop_after_epochs: Option<u64>) -> Result<()> {
    let paths = RunPaths::new(out);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = paths.log();
    let mut log = if trainer.state.step == 0 || !log_path.exists() {
        format!("{LOG_HEADER}\n")
    } else {
        std::fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?
    };
    std::fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
    let per_epoch = trainer.data.steps_per_epoch();
    let total = trainer.total_steps();
    let stop_at = stop_after_epochs.map_or(total, |e| (trainer.state.step / per_epoch + e) * per_epoch).min(total);
    log::info!(
        "training {} classes, {} images, {per_epoch} steps per epoch, {total} steps",
        trainer.data.num_classes(),
        trainer.data.images.len()
    );
    while trainer.state.step < stop_at {
        let row = trainer.step()?;
        log.push_str(&row.csv_row());
        log.push('\n');
        if trainer.state.step.is_multiple_of(per_epoch) {
            std::fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
            trainer.state.to_checkpoint().save(&paths.latest())?;
            log::info!(
                "epoch {} done: loss {:.4} (triplet {:.4}, ce {:.4}), lr {:.3e}",
                row.epoch + 1,
                row.report.total,
                row.report.triplet_mean,
                row.report.ce_mean,
                row.lr
            );
        }
    }
    std::fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
    let ckpt = trainer.state.to_checkpoint();
    ckpt.save(&paths.latest())?;
    if trainer.is_done() {
        ckpt.save(&paths.final_ckpt())?;
    }
    Ok(())
}
