//! Backbone plus head, wired as one trainable model.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::head::{test_embedding, Head, HeadConfig, HeadOutput};
use crate::nn::{Ctx, Module, Slot, SlotMut, StatUpdate, NORM_MOMENTUM};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Name prefix shared by every backbone parameter.
pub const BACKBONE_PREFIX: &str = "backbone.";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
}

#[derive(Debug, Clone)]
pub struct ReidModel<T> {
    pub cfg: ModelConfig,
    pub backbone: Backbone<T>,
    pub head: Head<T>,
}

impl<T: Scalar> ReidModel<T> {
    pub fn new(cfg: &ModelConfig, num_classes: Option<usize>, seed: u64) -> Result<Self> {
        cfg.backbone.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::with_rng(&cfg.backbone, &mut rng)?;
        let head = Head::new(
            &cfg.head,
            &cfg.backbone.ordered_branches(),
            cfg.backbone.out_channels(),
            num_classes,
            &mut rng,
        )?;
        Ok(ReidModel {
            cfg: cfg.clone(),
            backbone,
            head,
        })
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.head.num_classes
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<HeadOutput<'t, T>> {
        let features = self.backbone.forward(ctx, x)?;
        self.head.forward(ctx, &features)
    }

    /// Eval-mode test descriptors for a batch `[N,3,H,W]`, without recording gradients.
    pub fn embed(&self, images: Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let ctx = Ctx::eval(&tape);
        let out = self.forward(&ctx, ctx.input(images))?;
        let e = test_embedding(&out, self.cfg.head.parts_in_test)?;
        Ok((*e.value()).clone())
    }

    pub fn embedding_dim(&self) -> usize {
        self.cfg.head.embed_dim * self.head.slots.iter().filter(|s| self.cfg.head.parts_in_test || s.kind.is_branch()).count()
    }

    /// Fold batch statistics from a train-mode forward into the running buffers.
    pub fn commit_stats(&mut self, updates: &[StatUpdate<T>]) -> Result<()> {
        let by_name: HashMap<&str, &StatUpdate<T>> = updates.iter().map(|u| (u.name.as_str(), u)).collect();
        let mut applied = 0;
        self.visit_mut(&mut |s| {
            if let SlotMut::Buffer(name, rs) = s {
                if let Some(u) = by_name.get(name) {
                    rs.absorb(u, NORM_MOMENTUM);
                    applied += 1;
                }
            }
        });
        if applied != by_name.len() {
            return Err(Error::Contract(format!(
                "{} of {} statistic updates matched no buffer",
                by_name.len() - applied,
                by_name.len()
            )));
        }
        Ok(())
    }

    /// Parameter and buffer tensors by name, in visiting order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |s| match s {
            Slot::Param(p) => out.push((p.name.clone(), &p.value)),
            Slot::Buffer(name, rs) => {
                out.push((format!("{name}.running_mean"), &rs.mean));
                out.push((format!("{name}.running_var"), &rs.var));
            }
        });
        out
    }

    /// Overwrite parameters and buffers from named tensors; every slot must be present
    /// with a matching shape.
    pub fn load_tensors(&mut self, mut tensors: HashMap<String, Tensor<T>>) -> Result<()> {
        let mut failure: Option<Error> = None;
        let mut put = |name: String, dst: &mut Tensor<T>, failure: &mut Option<Error>| {
            if failure.is_some() {
                return;
            }
            match tensors.remove(&name) {
                Some(t) if t.shape() == dst.shape() => *dst = t,
                Some(t) => {
                    *failure = Some(Error::Shape(format!(
                        "tensor `{name}` has shape {:?}, model expects {:?}",
                        t.shape(),
                        dst.shape()
                    )))
                }
                None => *failure = Some(Error::Contract(format!("missing tensor `{name}`"))),
            }
        };
        self.visit_mut(&mut |s| match s {
            SlotMut::Param(p) => put(p.name.clone(), &mut p.value, &mut failure),
            SlotMut::Buffer(name, rs) => {
                put(format!("{name}.running_mean"), &mut rs.mean, &mut failure);
                put(format!("{name}.running_var"), &mut rs.var, &mut failure);
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Contract(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }
}

impl<T: Scalar> Module<T> for ReidModel<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(Slot<'a, T>)) {
        self.backbone.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(SlotMut<'_, T>)) {
        self.backbone.visit_mut(f);
        self.head.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BranchTag;
    use crate::tensor::Init;

    fn small() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                base_channels: 4,
                branches: vec![BranchTag::Global, BranchTag::Parts2],
                ..Default::default()
            },
            head: HeadConfig { embed_dim: 6, ..Default::default() },
        }
    }

    #[test]
    fn embed_has_declared_width() {
        let m = ReidModel::<f32>::new(&small(), Some(3), 1).unwrap();
        let x = Tensor::alloc([2, 3, 32, 16], Init::Gaussian { mean: 0.0, std: 1.0, seed: 2 }).unwrap();
        let e = m.embed(x).unwrap();
        assert_eq!(e.shape(), &[2, m.embedding_dim()]);
        assert_eq!(m.embedding_dim(), 6 * 4);
    }

    #[test]
    fn stats_commit_moves_running_mean() {
        let mut m = ReidModel::<f32>::new(&small(), Some(3), 1).unwrap();
        let x = Tensor::alloc([4, 3, 32, 16], Init::Gaussian { mean: 2.0, std: 1.0, seed: 2 }).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::train(&tape);
        m.forward(&ctx, ctx.input(x)).unwrap();
        let stats = ctx.take_stats();
        assert!(!stats.is_empty());
        let before = m.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect::<Vec<_>>();
        m.commit_stats(&stats).unwrap();
        let after = m.named_tensors();
        let changed = before.iter().zip(&after).filter(|((_, a), (_, b))| !a.bit_eq(b)).count();
        assert_eq!(changed, 2 * stats.len());
    }

    #[test]
    fn tensors_round_trip() {
        let a = ReidModel::<f32>::new(&small(), Some(3), 1).unwrap();
        let mut b = ReidModel::<f32>::new(&small(), Some(3), 2).unwrap();
        let map = a.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        b.load_tensors(map).unwrap();
        for ((na, ta), (nb, tb)) in a.named_tensors().iter().zip(b.named_tensors().iter()) {
            assert_eq!(na, nb);
            assert!(ta.bit_eq(tb));
        }
        let mut short: HashMap<_, _> = a.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        short.remove("backbone.stem.conv.weight");
        assert!(b.load_tensors(short).is_err());
    }
}
