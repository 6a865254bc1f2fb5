//! Line-based `key = value` run configuration with named profiles.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::{BackboneConfig, BranchTag};
use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::nn::PoolKind;
use crate::optim::{AdamConfig, Schedule};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: String,
    pub model: ModelConfig,
    pub aug: AugmentConfig,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub lr: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub freeze_iters: u64,
    pub constant_lr: bool,
    pub p: usize,
    pub k: usize,
    pub seed: u64,
    /// Fraction of identities used for training; 1.0 selects closed-set (sanity) mode.
    pub train_fraction: f64,
    pub queries_per_id: usize,
    pub split_seed: u64,
    pub eval_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            profile: "default".into(),
            model: ModelConfig::default(),
            aug: AugmentConfig::default(),
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            lr: 3.5e-4,
            lr_min: 7.7e-6,
            epochs: 40,
            freeze_iters: 0,
            constant_lr: false,
            p: 4,
            k: 16,
            seed: 0,
            train_fraction: 0.5,
            queries_per_id: 2,
            split_seed: 0,
            eval_batch: 32,
        }
    }
}

pub const PROFILES: [&str; 3] = ["default", "arbase", "bot"];

impl RunConfig {
    pub fn profile(name: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        match name {
            "default" => {}
            "arbase" => {
                c.profile = name.into();
                c.aug.resolution = (48, 48);
                c.aug.erasing.enabled = false;
                c.model.backbone = BackboneConfig {
                    last_stride: 1,
                    use_ibn: true,
                    branches: vec![BranchTag::Global, BranchTag::Parts2, BranchTag::Parts3],
                    ..BackboneConfig::default()
                };
                c.model.head.bnneck = true;
                c.loss.label_smoothing = true;
                c.constant_lr = false;
            }
            "bot" => {
                c.profile = name.into();
                c.aug.resolution = (64, 32);
                c.aug.erasing.enabled = true;
                c.model.backbone = BackboneConfig {
                    last_stride: 1,
                    use_ibn: false,
                    branches: vec![BranchTag::Global],
                    ..BackboneConfig::default()
                };
                c.model.head.bnneck = true;
                c.loss.label_smoothing = true;
                c.constant_lr = true;
            }
            other => {
                return Err(Error::config(
                    "profile",
                    format!("unknown profile `{other}` ({})", PROFILES.join("|")),
                ))
            }
        }
        Ok(c)
    }

    pub fn schedule(&self, total_steps: u64) -> Schedule {
        Schedule {
            lr_base: self.lr,
            lr_min: self.lr_min,
            total_steps,
            freeze_iters: self.freeze_iters,
            constant: self.constant_lr,
        }
    }

    /// Set one dotted key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let b = &mut self.model.backbone;
        let h = &mut self.model.head;
        match key {
            "profile" => return Err(Error::config(key, "a profile can only be selected in the config file")),
            "data.resolution" => self.aug.resolution = parse_resolution(key, v)?,
            "data.flip_prob" => self.aug.flip_prob = parse(key, v)?,
            "data.random_erasing" => self.aug.erasing.enabled = parse_bool(key, v)?,
            "data.erasing_prob" => self.aug.erasing.prob = parse(key, v)?,
            "data.mean" => self.aug.mean = parse_triple(key, v)?,
            "data.std" => self.aug.std = parse_triple(key, v)?,
            "data.train_fraction" => self.train_fraction = parse(key, v)?,
            "data.queries_per_id" => self.queries_per_id = parse(key, v)?,
            "data.split_seed" => self.split_seed = parse(key, v)?,
            "backbone.blocks" => {
                let list: Vec<usize> = parse_list(key, v)?;
                b.blocks = list
                    .try_into()
                    .map_err(|_| Error::config(key, "expected four comma-separated block counts"))?;
            }
            "backbone.base_channels" => b.base_channels = parse(key, v)?,
            "backbone.last_stride" => b.last_stride = parse(key, v)?,
            "backbone.use_ibn" => b.use_ibn = parse_bool(key, v)?,
            "backbone.ibn_stages" => b.ibn_stages = parse_list(key, v)?,
            "backbone.use_nonlocal" => b.use_nonlocal = parse_bool(key, v)?,
            "backbone.branches" => b.branches = parse_list(key, v)?,
            "head.embed_dim" => h.embed_dim = parse(key, v)?,
            "head.bnneck" => h.bnneck = parse_bool(key, v)?,
            "head.pooling" => h.pooling = parse::<PoolKind>(key, v)?,
            "head.parts_in_test" => h.parts_in_test = parse_bool(key, v)?,
            "loss.margin" => self.loss.margin = parse(key, v)?,
            "loss.epsilon" => self.loss.epsilon = parse(key, v)?,
            "loss.soft_margin" => self.loss.soft_margin = parse_bool(key, v)?,
            "loss.label_smoothing" => self.loss.label_smoothing = parse_bool(key, v)?,
            "loss.w_tp" => self.loss.w_tp = parse(key, v)?,
            "loss.w_ce" => self.loss.w_ce = parse(key, v)?,
            "optim.lr" => self.lr = parse(key, v)?,
            "optim.lr_min" => self.lr_min = parse(key, v)?,
            "optim.epochs" => self.epochs = parse(key, v)?,
            "optim.freeze_iters" => self.freeze_iters = parse(key, v)?,
            "optim.schedule" => {
                self.constant_lr = match v {
                    "cosine" => false,
                    "constant" => true,
                    _ => return Err(Error::config(key, format!("expected cosine|constant, got `{v}`"))),
                }
            }
            "optim.weight_decay" => self.adam.weight_decay = parse(key, v)?,
            "optim.beta1" => self.adam.beta1 = parse(key, v)?,
            "optim.beta2" => self.adam.beta2 = parse(key, v)?,
            "optim.eps" => self.adam.eps = parse(key, v)?,
            "sampler.P" => self.p = parse(key, v)?,
            "sampler.K" => self.k = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "precision" => {
                if v != "f32" {
                    return Err(Error::config(key, format!("training runs in f32 only, got `{v}`")));
                }
            }
            "eval.batch_size" => self.eval_batch = parse(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order. Parsing the result
    /// restores this configuration.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let b = &self.model.backbone;
        let h = &self.model.head;
        let join = |v: &[String]| v.join(",");
        let list = |v: &[usize]| join(&v.iter().map(|x| x.to_string()).collect::<Vec<_>>());
        let triple = |t: &[f32; 3]| join(&t.iter().map(|x| x.to_string()).collect::<Vec<_>>());
        vec![
            ("data.resolution", format!("{}x{}", self.aug.resolution.0, self.aug.resolution.1)),
            ("data.flip_prob", self.aug.flip_prob.to_string()),
            ("data.random_erasing", self.aug.erasing.enabled.to_string()),
            ("data.erasing_prob", self.aug.erasing.prob.to_string()),
            ("data.mean", triple(&self.aug.mean)),
            ("data.std", triple(&self.aug.std)),
            ("data.train_fraction", self.train_fraction.to_string()),
            ("data.queries_per_id", self.queries_per_id.to_string()),
            ("data.split_seed", self.split_seed.to_string()),
            ("backbone.blocks", list(&b.blocks)),
            ("backbone.base_channels", b.base_channels.to_string()),
            ("backbone.last_stride", b.last_stride.to_string()),
            ("backbone.use_ibn", b.use_ibn.to_string()),
            ("backbone.ibn_stages", list(&b.ibn_stages)),
            ("backbone.use_nonlocal", b.use_nonlocal.to_string()),
            ("backbone.branches", join(&b.branches.iter().map(|x| x.to_string()).collect::<Vec<_>>())),
            ("head.embed_dim", h.embed_dim.to_string()),
            ("head.bnneck", h.bnneck.to_string()),
            ("head.pooling", h.pooling.to_string()),
            ("head.parts_in_test", h.parts_in_test.to_string()),
            ("loss.margin", self.loss.margin.to_string()),
            ("loss.epsilon", self.loss.epsilon.to_string()),
            ("loss.soft_margin", self.loss.soft_margin.to_string()),
            ("loss.label_smoothing", self.loss.label_smoothing.to_string()),
            ("loss.w_tp", self.loss.w_tp.to_string()),
            ("loss.w_ce", self.loss.w_ce.to_string()),
            ("optim.lr", self.lr.to_string()),
            ("optim.lr_min", self.lr_min.to_string()),
            ("optim.epochs", self.epochs.to_string()),
            ("optim.freeze_iters", self.freeze_iters.to_string()),
            ("optim.schedule", if self.constant_lr { "constant" } else { "cosine" }.into()),
            ("optim.weight_decay", self.adam.weight_decay.to_string()),
            ("optim.beta1", self.adam.beta1.to_string()),
            ("optim.beta2", self.adam.beta2.to_string()),
            ("optim.eps", self.adam.eps.to_string()),
            ("sampler.P", self.p.to_string()),
            ("sampler.K", self.k.to_string()),
            ("seed", self.seed.to_string()),
            ("precision", "f32".into()),
            ("eval.batch_size", self.eval_batch.to_string()),
        ]
    }

    /// Full text form: the profile line followed by every key.
    pub fn to_text(&self) -> String {
        let mut s = format!("profile = {}\n", self.profile);
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.model.backbone;
        b.validate()?;
        self.aug.validate()?;
        self.loss.validate()?;
        self.schedule(u64::MAX).validate()?;
        if self.model.head.embed_dim == 0 {
            return Err(Error::config("head.embed_dim", "must be positive"));
        }
        if self.p < 2 {
            return Err(Error::config("sampler.P", "need at least 2 identities per batch"));
        }
        if self.k < 2 {
            return Err(Error::config("sampler.K", "need at least 2 samples per identity"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::config("data.train_fraction", "must lie in (0, 1]"));
        }
        if self.queries_per_id == 0 {
            return Err(Error::config("data.queries_per_id", "must be positive"));
        }
        if self.eval_batch == 0 {
            return Err(Error::config("eval.batch_size", "must be positive"));
        }
        for (name, beta) in [("optim.beta1", self.adam.beta1), ("optim.beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::config(name, "must lie in [0, 1)"));
            }
        }
        if !(self.adam.eps > 0.0) || !(self.adam.weight_decay >= 0.0) {
            return Err(Error::config("optim.eps", "eps must be positive and weight decay non-negative"));
        }
        let (hh, ww) = self.aug.resolution;
        let stride = b.total_stride();
        if hh % stride != 0 || ww % stride != 0 {
            return Err(Error::config(
                "data.resolution",
                format!("{hh}x{ww} is not a multiple of the total stride {stride}"),
            ));
        }
        // Stride-2 stages need even inputs all the way down.
        if hh % 16 != 0 || ww % 16 != 0 {
            return Err(Error::config("data.resolution", "extents must be multiples of 16"));
        }
        let hf = hh / stride;
        for br in &b.branches {
            if br.parts() > 0 && !hf.is_multiple_of(br.parts()) {
                return Err(Error::config(
                    "data.resolution",
                    format!("feature height {hf} cannot be split into {} strips for `{br}`", br.parts()),
                ));
            }
        }
        Ok(())
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e: T::Err| Error::config(key, format!("cannot parse `{v}`: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(key, format!("expected true|false, got `{v}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

fn parse_triple(key: &str, v: &str) -> Result<[f32; 3]> {
    let list: Vec<f32> = parse_list(key, v)?;
    match list.as_slice() {
        [x] => Ok([*x; 3]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(Error::config(key, "expected one or three values")),
    }
}

/// `N` (square) or `HxW`.
fn parse_resolution(key: &str, v: &str) -> Result<(usize, usize)> {
    match v.split_once('x') {
        Some((h, w)) => Ok((parse(key, h.trim())?, parse(key, w.trim())?)),
        None => {
            let n = parse(key, v)?;
            Ok((n, n))
        }
    }
}

/// Parse config text, expand the profile, apply file keys, then `key=value` overrides.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("expected `key = value`, found `{line}`"),
        })?;
        rows.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut seen = std::collections::HashSet::new();
    for (k, _) in &rows {
        if !seen.insert(k.as_str()) {
            return Err(Error::config(k.clone(), "key given twice"));
        }
    }
    let profile = rows.iter().find(|(k, _)| k == "profile").map(|(_, v)| v.as_str()).unwrap_or("default");
    let mut cfg = RunConfig::profile(profile)?;
    for (k, v) in rows.iter().filter(|(k, _)| k != "profile") {
        cfg.set(k, v)?;
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::config(o.clone(), "override must look like key=value"))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, overrides)
}
