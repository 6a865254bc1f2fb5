//! Miniature residual backbone: a strided stem and four stages of basic blocks.
//!
//! Stages 1-3 are shared. The fourth stage is replicated once per enabled branch,
//! each copy with its own parameters. With stage strides `(1, 2, 2, last_stride)`
//! and a stride-2 stem, the final map is `R/8` for `last_stride = 1` and `R/16`
//! for `last_stride = 2`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{batch_norm, Conv, Ctx, Ibn, Module, NonLocal, Norm, NormLayer, Slot, SlotMut};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BranchTag {
    Global,
    Parts2,
    Parts3,
}

impl BranchTag {
    /// Number of horizontal strips this branch contributes (zero for the global branch).
    pub fn parts(self) -> usize {
        match self {
            BranchTag::Global => 0,
            BranchTag::Parts2 => 2,
            BranchTag::Parts3 => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BranchTag::Global => "global",
            BranchTag::Parts2 => "parts2",
            BranchTag::Parts3 => "parts3",
        }
    }
}

impl fmt::Display for BranchTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BranchTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "global" => Ok(BranchTag::Global),
            "parts2" => Ok(BranchTag::Parts2),
            "parts3" => Ok(BranchTag::Parts3),
            other => Err(format!("unknown branch `{other}` (global|parts2|parts3)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub blocks: [usize; 4],
    pub base_channels: usize,
    pub last_stride: usize,
    pub use_ibn: bool,
    /// 1-based stage indices whose blocks use IBN in their first normalization.
    pub ibn_stages: Vec<usize>,
    pub use_nonlocal: bool,
    pub branches: Vec<BranchTag>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            blocks: [1, 1, 1, 1],
            base_channels: 16,
            last_stride: 2,
            use_ibn: false,
            ibn_stages: vec![1, 2, 3],
            use_nonlocal: false,
            branches: vec![BranchTag::Global],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::config("backbone.base_channels", "must be positive"));
        }
        if self.blocks.contains(&0) {
            return Err(Error::config("backbone.blocks", "every stage needs at least one block"));
        }
        if !matches!(self.last_stride, 1 | 2) {
            return Err(Error::config(
                "backbone.last_stride",
                format!("must be 1 or 2, got {}", self.last_stride),
            ));
        }
        if self.branches.is_empty() {
            return Err(Error::config("backbone.branches", "at least one branch is required"));
        }
        if !self.branches.contains(&BranchTag::Global) {
            return Err(Error::config("backbone.branches", "part branches require the global branch"));
        }
        let mut sorted = self.branches.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.branches.len() {
            return Err(Error::config("backbone.branches", "duplicate branch"));
        }
        if let Some(&s) = self.ibn_stages.iter().find(|&&s| !(1..=4).contains(&s)) {
            return Err(Error::config("backbone.ibn_stages", format!("stage {s} outside 1..=4")));
        }
        if self.use_ibn && self.base_channels < 2 {
            return Err(Error::config("backbone.use_ibn", "IBN needs at least 2 channels per stage"));
        }
        Ok(())
    }

    /// Branches in canonical order: global, parts2, parts3.
    pub fn ordered_branches(&self) -> Vec<BranchTag> {
        let mut b = self.branches.clone();
        b.sort();
        b
    }

    pub fn stage_channels(&self) -> [usize; 4] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b, 8 * b]
    }

    pub fn stage_strides(&self) -> [usize; 4] {
        [1, 2, 2, self.last_stride]
    }

    pub fn out_channels(&self) -> usize {
        self.stage_channels()[3]
    }

    /// Total downsampling from input to final feature map.
    pub fn total_stride(&self) -> usize {
        2 * self.stage_strides().iter().product::<usize>()
    }

    fn ibn_at(&self, stage: usize) -> bool {
        self.use_ibn && self.ibn_stages.contains(&stage)
    }
}

#[derive(Debug, Clone)]
pub struct BasicBlock<T> {
    pub conv1: Conv<T>,
    pub norm1: NormLayer<T>,
    pub conv2: Conv<T>,
    pub norm2: Norm<T>,
    pub downsample: Option<(Conv<T>, Norm<T>)>,
}

impl<T: Scalar> BasicBlock<T> {
    fn new(name: &str, c_in: usize, c_out: usize, stride: usize, ibn: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let norm1 = if ibn {
            NormLayer::Ibn(Ibn::new(&format!("{name}.norm1"), c_out, c_out / 2)?)
        } else {
            NormLayer::Batch(Norm::batch(&format!("{name}.norm1"), c_out))
        };
        let downsample = if stride != 1 || c_in != c_out {
            Some((
                Conv::new(&format!("{name}.down.conv"), c_in, c_out, 1, stride, 0, false, rng)?,
                Norm::batch(&format!("{name}.down.norm"), c_out),
            ))
        } else {
            None
        };
        Ok(BasicBlock {
            conv1: Conv::new(&format!("{name}.conv1"), c_in, c_out, 3, stride, 1, false, rng)?,
            norm1,
            conv2: Conv::new(&format!("{name}.conv2"), c_out, c_out, 3, 1, 1, false, rng)?,
            norm2: Norm::batch(&format!("{name}.norm2"), c_out),
            downsample,
        })
    }

    fn forward<'t>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.norm1.forward(ctx, self.conv1.forward(ctx, x)?)?.relu();
        let y = batch_norm(ctx, self.conv2.forward(ctx, y)?, &self.norm2)?;
        let shortcut = match &self.downsample {
            Some((conv, norm)) => batch_norm(ctx, conv.forward(ctx, x)?, norm)?,
            None => x,
        };
        Ok(y.add(shortcut)?.relu())
    }
}

#[derive(Debug, Clone)]
pub struct Stage<T> {
    pub blocks: Vec<BasicBlock<T>>,
    pub nonlocal: Option<NonLocal<T>>,
}

impl<T: Scalar> Stage<T> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        name: &str,
        n_blocks: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        ibn: bool,
        nonlocal: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(n_blocks);
        for i in 0..n_blocks {
            let (ci, s) = if i == 0 { (c_in, stride) } else { (c_out, 1) };
            blocks.push(BasicBlock::new(&format!("{name}.block{i}"), ci, c_out, s, ibn, rng)?);
        }
        let nonlocal = if nonlocal {
            Some(NonLocal::new(&format!("{name}.nonlocal"), c_out, rng)?)
        } else {
            None
        };
        Ok(Stage { blocks, nonlocal })
    }

    fn forward<'t>(&self, ctx: &Ctx<'t, T>, mut x: Var<'t, T>) -> Result<Var<'t, T>> {
        for b in &self.blocks {
            x = b.forward(ctx, x)?;
        }
        if let Some(nl) = &self.nonlocal {
            x = nl.forward(ctx, x)?;
        }
        Ok(x)
    }
}

/// An output feature map, tagged with the branch that produced it.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap<'t, T: Scalar> {
    pub tensor: Var<'t, T>,
    pub tag: BranchTag,
}

#[derive(Debug, Clone)]
pub struct Backbone<T> {
    pub cfg: BackboneConfig,
    pub stem: Conv<T>,
    pub stem_norm: Norm<T>,
    pub shared: Vec<Stage<T>>,
    pub branches: Vec<(BranchTag, Stage<T>)>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(cfg, &mut rng)
    }

    pub fn with_rng(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.stage_channels();
        let st = cfg.stage_strides();
        let stem = Conv::new("backbone.stem.conv", 3, ch[0], 3, 2, 1, false, rng)?;
        let stem_norm = Norm::batch("backbone.stem.norm", ch[0]);
        let mut shared = Vec::with_capacity(3);
        let mut c_in = ch[0];
        for s in 0..3 {
            // non-local blocks close stages 2 and 3
            let nl = cfg.use_nonlocal && (s == 1 || s == 2);
            shared.push(Stage::new(
                &format!("backbone.stage{}", s + 1),
                cfg.blocks[s],
                c_in,
                ch[s],
                st[s],
                cfg.ibn_at(s + 1),
                nl,
                rng,
            )?);
            c_in = ch[s];
        }
        let mut branches = Vec::new();
        for tag in cfg.ordered_branches() {
            branches.push((
                tag,
                Stage::new(
                    &format!("backbone.{tag}.stage4"),
                    cfg.blocks[3],
                    ch[2],
                    ch[3],
                    st[3],
                    cfg.ibn_at(4),
                    false,
                    rng,
                )?,
            ));
        }
        Ok(Backbone {
            cfg: cfg.clone(),
            stem,
            stem_norm,
            shared,
            branches,
        })
    }

    /// One feature map per branch, in canonical branch order.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Vec<FeatureMap<'t, T>>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!("backbone expects [N,3,H,W], got {shape:?}")));
        }
        if !shape[2].is_multiple_of(16) || !shape[3].is_multiple_of(16) || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::Shape(format!(
                "input resolution {}x{} must be a positive multiple of 16",
                shape[2], shape[3]
            )));
        }
        let mut y = batch_norm(ctx, self.stem.forward(ctx, x)?, &self.stem_norm)?.relu();
        for s in &self.shared {
            y = s.forward(ctx, y)?;
        }
        self.branches
            .iter()
            .map(|(tag, stage)| {
                Ok(FeatureMap {
                    tensor: stage.forward(ctx, y)?,
                    tag: *tag,
                })
            })
            .collect()
    }
}

/// Cut `[N,C,H,W]` into `k` equal-height strips, top to bottom.
pub fn horizontal_split<'t, T: Scalar>(x: Var<'t, T>, k: usize) -> Result<Vec<Var<'t, T>>> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("horizontal_split expects [N,C,H,W], got {shape:?}")));
    }
    let h = shape[2];
    if k == 0 || !h.is_multiple_of(k) {
        return Err(Error::Shape(format!(
            "feature-map height {h} is not divisible into {k} strips"
        )));
    }
    let strip = h / k;
    (0..k).map(|i| x.slice(2, i * strip..(i + 1) * strip)).collect()
}

impl<T: Scalar> Module<T> for BasicBlock<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(Slot<'a, T>)) {
        self.conv1.visit(f);
        self.norm1.visit(f);
        self.conv2.visit(f);
        self.norm2.visit(f);
        if let Some((c, n)) = &self.downsample {
            c.visit(f);
            n.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(SlotMut<'_, T>)) {
        self.conv1.visit_mut(f);
        self.norm1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.norm2.visit_mut(f);
        if let Some((c, n)) = &mut self.downsample {
            c.visit_mut(f);
            n.visit_mut(f);
        }
    }
}

impl<T: Scalar> Module<T> for Stage<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(Slot<'a, T>)) {
        self.blocks.visit(f);
        self.nonlocal.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(SlotMut<'_, T>)) {
        self.blocks.visit_mut(f);
        self.nonlocal.visit_mut(f);
    }
}

impl<T: Scalar> Module<T> for Backbone<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(Slot<'a, T>)) {
        self.stem.visit(f);
        self.stem_norm.visit(f);
        self.shared.visit(f);
        for (_, s) in &self.branches {
            s.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(SlotMut<'_, T>)) {
        self.stem.visit_mut(f);
        self.stem_norm.visit_mut(f);
        self.shared.visit_mut(f);
        for (_, s) in &mut self.branches {
            s.visit_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{concat, Tape};
    use crate::tensor::{Init, Tensor};

    fn input(n: usize, r: usize) -> Tensor<f32> {
        Tensor::alloc([n, 3, r, r], Init::Gaussian { mean: 0.0, std: 1.0, seed: 11 }).unwrap()
    }

    fn out_hw(cfg: &BackboneConfig, r: usize) -> Vec<(BranchTag, Vec<usize>)> {
        let bb = Backbone::<f32>::new(cfg, 0).unwrap();
        let tape = Tape::no_grad();
        let ctx = Ctx::eval(&tape);
        bb.forward(&ctx, ctx.input(input(1, r)))
            .unwrap()
            .into_iter()
            .map(|f| (f.tag, f.tensor.shape()))
            .collect()
    }

    #[test]
    fn stride_arithmetic() {
        let mut cfg = BackboneConfig::default();
        assert_eq!(out_hw(&cfg, 64), vec![(BranchTag::Global, vec![1, 128, 4, 4])]);
        cfg.last_stride = 1;
        assert_eq!(out_hw(&cfg, 64)[0].1[2..], [8, 8]);
    }

    #[test]
    fn three_branches_give_three_tagged_maps() {
        let cfg = BackboneConfig {
            branches: vec![BranchTag::Parts3, BranchTag::Global, BranchTag::Parts2],
            ..Default::default()
        };
        let tags: Vec<_> = out_hw(&cfg, 32).into_iter().map(|(t, _)| t).collect();
        assert_eq!(tags, vec![BranchTag::Global, BranchTag::Parts2, BranchTag::Parts3]);
    }

    #[test]
    fn indivisible_resolution_is_rejected() {
        let bb = Backbone::<f32>::new(&BackboneConfig::default(), 0).unwrap();
        let tape = Tape::no_grad();
        let ctx = Ctx::eval(&tape);
        let x = ctx.input(Tensor::zeros([1, 3, 40, 48]));
        assert!(matches!(bb.forward(&ctx, x), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation() {
        let bad = |f: &dyn Fn(&mut BackboneConfig)| {
            let mut c = BackboneConfig::default();
            f(&mut c);
            Backbone::<f32>::new(&c, 0).is_err()
        };
        assert!(bad(&|c| c.base_channels = 0));
        assert!(bad(&|c| c.last_stride = 3));
        assert!(bad(&|c| c.blocks[2] = 0));
        assert!(bad(&|c| c.branches = vec![]));
        assert!(bad(&|c| c.branches = vec![BranchTag::Parts2]));
    }

    #[test]
    fn no_instance_norm_without_ibn() {
        let count_in = |use_ibn| {
            let cfg = BackboneConfig { use_ibn, ..Default::default() };
            let bb = Backbone::<f32>::new(&cfg, 0).unwrap();
            let mut n = 0;
            let mut visit = |b: &BasicBlock<f32>| {
                if matches!(b.norm1, NormLayer::Ibn(_)) {
                    n += 1;
                }
            };
            bb.shared.iter().flat_map(|s| &s.blocks).for_each(&mut visit);
            bb.branches.iter().flat_map(|(_, s)| &s.blocks).for_each(&mut visit);
            n
        };
        assert_eq!(count_in(false), 0);
        // default IBN placement: stages 1-3
        assert_eq!(count_in(true), 3);
    }

    #[test]
    fn deterministic_initialization() {
        let cfg = BackboneConfig::default();
        let a = Backbone::<f32>::new(&cfg, 5).unwrap();
        let b = Backbone::<f32>::new(&cfg, 5).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.name, pb.name);
            assert!(pa.value.bit_eq(&pb.value));
        }
    }

    #[test]
    fn split_rows_and_reassembly() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec([1, 1, 6, 1], (0..6).map(f64::from).collect()).unwrap());
        let parts = horizontal_split(x, 3).unwrap();
        assert_eq!(parts[0].value().data(), &[0.0, 1.0]);
        assert_eq!(parts[1].value().data(), &[2.0, 3.0]);
        assert_eq!(parts[2].value().data(), &[4.0, 5.0]);
        assert_eq!(concat(&parts, 2).unwrap().value().data(), x.value().data());
        assert!(horizontal_split(x, 4).is_err());
    }
}
