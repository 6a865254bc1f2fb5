//! Per-branch pooling, embedding projection, BNNeck and identity classifiers.
//!
//! Every branch contributes one branch-level embedding; part branches add one
//! embedding per horizontal strip. Embeddings are ordered: branch-level embeddings
//! in branch order (global, parts2, parts3), then parts2 strips top to bottom, then
//! parts3 strips top to bottom.

use std::fmt;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{concat, Var};
use crate::backbone::{horizontal_split, BranchTag, FeatureMap};
use crate::error::{Error, Result};
use crate::nn::{batch_norm, pool, Ctx, Linear, Mode, Module, Norm, Param, PoolKind, Slot, SlotMut, GEM_INIT_P};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CLASSIFIER_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub embed_dim: usize,
    pub bnneck: bool,
    pub pooling: PoolKind,
    /// Whether part embeddings join the test-time descriptor.
    pub parts_in_test: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            embed_dim: 64,
            bnneck: true,
            pooling: PoolKind::Avg,
            parts_in_test: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    Branch(BranchTag),
    Part { branch: BranchTag, index: usize },
}

impl EmbeddingKind {
    pub fn is_branch(self) -> bool {
        matches!(self, EmbeddingKind::Branch(_))
    }
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbeddingKind::Branch(b) => write!(f, "{b}"),
            EmbeddingKind::Part { branch, index } => write!(f, "{branch}.part{index}"),
        }
    }
}

/// Canonical embedding order for a set of branches.
pub fn embedding_layout(branches: &[BranchTag]) -> Vec<EmbeddingKind> {
    let mut sorted = branches.to_vec();
    sorted.sort();
    let mut out: Vec<EmbeddingKind> = sorted.iter().map(|&b| EmbeddingKind::Branch(b)).collect();
    for &b in &sorted {
        out.extend((0..b.parts()).map(|index| EmbeddingKind::Part { branch: b, index }));
    }
    out
}

#[derive(Debug, Clone)]
pub struct EmbeddingSlot<T> {
    pub kind: EmbeddingKind,
    pub gem_p: Option<Param<T>>,
    pub embed: Linear<T>,
    pub neck: Option<Norm<T>>,
    pub classifier: Option<Linear<T>>,
}

#[derive(Debug, Clone)]
pub struct Head<T> {
    pub cfg: HeadConfig,
    pub num_classes: Option<usize>,
    pub slots: Vec<EmbeddingSlot<T>>,
}

/// Forward result of the head. All lists are aligned with `kinds`.
pub struct HeadOutput<'t, T: Scalar> {
    pub kinds: Vec<EmbeddingKind>,
    /// Triplet-space embeddings, before BNNeck.
    pub pre_bn: Vec<Var<'t, T>>,
    /// Classifier-space embeddings, after BNNeck (identical to `pre_bn` without it).
    pub post_bn: Vec<Var<'t, T>>,
    /// Identity logits; empty when the head has no classifier.
    pub logits: Vec<Var<'t, T>>,
}

impl<T: Scalar> Head<T> {
    pub fn new(
        cfg: &HeadConfig,
        branches: &[BranchTag],
        in_channels: usize,
        num_classes: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if cfg.embed_dim == 0 {
            return Err(Error::config("head.embed_dim", "must be positive"));
        }
        if num_classes == Some(0) {
            return Err(Error::config("head.num_classes", "must be positive"));
        }
        let d = cfg.embed_dim;
        let slots = embedding_layout(branches)
            .into_iter()
            .map(|kind| {
                let name = format!("head.{kind}");
                let gem_p = (cfg.pooling == PoolKind::Gem)
                    .then(|| Param::new(format!("{name}.gem_p"), Tensor::full([1], T::from_f64_lossy(GEM_INIT_P))));
                let neck = cfg.bnneck.then(|| {
                    let mut n = Norm::batch(&format!("{name}.neck"), d);
                    n.beta.trainable = false;
                    n
                });
                let classifier = num_classes
                    .map(|nc| Linear::with_std(&format!("{name}.classifier"), d, nc, CLASSIFIER_STD, rng))
                    .transpose()?;
                Ok(EmbeddingSlot {
                    kind,
                    gem_p,
                    embed: Linear::new(&format!("{name}.embed"), in_channels, d, true, rng)?,
                    neck,
                    classifier,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Head {
            cfg: cfg.clone(),
            num_classes,
            slots,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, T>, features: &[FeatureMap<'t, T>]) -> Result<HeadOutput<'t, T>> {
        if ctx.mode() == Mode::Train && self.num_classes.is_none() {
            return Err(Error::config("head.num_classes", "training requires the number of identities"));
        }
        let mut pooled_in: Vec<(EmbeddingKind, Var<'t, T>)> = Vec::new();
        for fm in features {
            pooled_in.push((EmbeddingKind::Branch(fm.tag), fm.tensor));
        }
        for fm in features {
            let k = fm.tag.parts();
            if k > 0 {
                for (index, strip) in horizontal_split(fm.tensor, k)?.into_iter().enumerate() {
                    pooled_in.push((EmbeddingKind::Part { branch: fm.tag, index }, strip));
                }
            }
        }
        if pooled_in.len() != self.slots.len() || pooled_in.iter().zip(&self.slots).any(|((k, _), s)| *k != s.kind) {
            return Err(Error::Contract("feature maps do not match the head's branch layout".into()));
        }
        let mut out = HeadOutput {
            kinds: Vec::with_capacity(self.slots.len()),
            pre_bn: Vec::with_capacity(self.slots.len()),
            post_bn: Vec::with_capacity(self.slots.len()),
            logits: Vec::with_capacity(self.slots.len()),
        };
        for ((kind, x), slot) in pooled_in.into_iter().zip(&self.slots) {
            let p = slot.gem_p.as_ref().map(|p| ctx.param(p));
            let pooled = pool(x, self.cfg.pooling, p)?;
            let pre = slot.embed.forward(ctx, pooled)?;
            let post = match &slot.neck {
                Some(n) => batch_norm(ctx, pre, n)?,
                None => pre,
            };
            if let Some(cls) = &slot.classifier {
                out.logits.push(cls.forward(ctx, post)?);
            }
            out.kinds.push(kind);
            out.pre_bn.push(pre);
            out.post_bn.push(post);
        }
        Ok(out)
    }
}

/// Concatenation of pre-BNNeck embeddings in layout order.
pub fn test_embedding<'t, T: Scalar>(out: &HeadOutput<'t, T>, include_parts: bool) -> Result<Var<'t, T>> {
    let parts: Vec<Var<'t, T>> = out
        .kinds
        .iter()
        .zip(&out.pre_bn)
        .filter(|(k, _)| include_parts || k.is_branch())
        .map(|(_, v)| *v)
        .collect();
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    concat(&parts, 1)
}

impl<T: Scalar> Module<T> for EmbeddingSlot<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(Slot<'a, T>)) {
        if let Some(p) = &self.gem_p {
            f(Slot::Param(p));
        }
        self.embed.visit(f);
        self.neck.visit(f);
        self.classifier.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(SlotMut<'_, T>)) {
        if let Some(p) = &mut self.gem_p {
            f(SlotMut::Param(p));
        }
        self.embed.visit_mut(f);
        self.neck.visit_mut(f);
        self.classifier.visit_mut(f);
    }
}

impl<T: Scalar> Module<T> for Head<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(Slot<'a, T>)) {
        self.slots.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(SlotMut<'_, T>)) {
        self.slots.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Init;

    fn fmap<'t>(ctx: &Ctx<'t, f64>, tag: BranchTag, n: usize, c: usize, seed: u64) -> FeatureMap<'t, f64> {
        let t: Tensor<f64> = Tensor::alloc([n, c, 6, 4], Init::Gaussian { mean: 1.0, std: 1.0, seed }).unwrap();
        FeatureMap { tensor: ctx.input(t.map(|v: f64| v.abs())), tag }
    }

    #[test]
    fn layout_and_dimensions() {
        let branches = [BranchTag::Global, BranchTag::Parts2, BranchTag::Parts3];
        let layout = embedding_layout(&branches);
        assert_eq!(layout.len(), 8);
        assert_eq!(layout[1], EmbeddingKind::Branch(BranchTag::Parts2));
        assert_eq!(layout[3], EmbeddingKind::Part { branch: BranchTag::Parts2, index: 0 });
        let cfg = HeadConfig { embed_dim: 8, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = Head::<f64>::new(&cfg, &branches, 4, Some(5), &mut rng).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::train(&tape);
        let feats: Vec<_> = branches.iter().enumerate().map(|(i, &b)| fmap(&ctx, b, 3, 4, i as u64)).collect();
        let out = head.forward(&ctx, &feats).unwrap();
        assert_eq!(out.logits[0].shape(), vec![3, 5]);
        assert_eq!(test_embedding(&out, true).unwrap().shape(), vec![3, 64]);
        assert_eq!(test_embedding(&out, false).unwrap().shape(), vec![3, 24]);
    }

    #[test]
    fn bnneck_off_passes_embeddings_through() {
        let cfg = HeadConfig { embed_dim: 8, bnneck: false, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = Head::<f64>::new(&cfg, &[BranchTag::Global], 4, Some(5), &mut rng).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::train(&tape);
        let out = head.forward(&ctx, &[fmap(&ctx, BranchTag::Global, 3, 4, 1)]).unwrap();
        assert_eq!(out.post_bn[0].id(), out.pre_bn[0].id());
        assert_eq!(test_embedding(&out, true).unwrap().id(), out.pre_bn[0].id());
    }

    #[test]
    fn train_mode_needs_class_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = Head::<f64>::new(&HeadConfig::default(), &[BranchTag::Global], 4, None, &mut rng).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::train(&tape);
        let feats = [fmap(&ctx, BranchTag::Global, 2, 4, 0)];
        assert!(matches!(head.forward(&ctx, &feats), Err(Error::Config { .. })));
        let ctx = Ctx::eval(&tape);
        assert!(head.forward(&ctx, &feats).unwrap().logits.is_empty());
    }

    #[test]
    fn eval_neck_with_unit_stats_is_affine() {
        let cfg = HeadConfig { embed_dim: 8, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = Head::<f64>::new(&cfg, &[BranchTag::Global], 4, Some(3), &mut rng).unwrap();
        let tape = Tape::no_grad();
        let ctx = Ctx::eval(&tape);
        let out = head.forward(&ctx, &[fmap(&ctx, BranchTag::Global, 2, 4, 0)]).unwrap();
        let pre = out.pre_bn[0].value();
        let post = out.post_bn[0].value();
        for (a, b) in pre.data().iter().zip(post.data().iter()) {
            let (a, b): (&f64, &f64) = (a, b);
            assert!((a - b).abs() < 1e-4 * (1.0 + a.abs()));
        }
    }
}
