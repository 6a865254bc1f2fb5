use crate::autodiff::{concat, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::param::{Ctx, Mode, Module, Param, RunningStats, Slot, SlotMut, StatUpdate};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

/// Per-channel affine normalization. Batch normalization carries running
/// statistics; instance normalization does not.
#[derive(Debug, Clone)]
pub struct Norm<T> {
    pub name: String,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running: Option<RunningStats<T>>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> Norm<T> {
    pub fn batch(name: &str, channels: usize) -> Self {
        Norm {
            running: Some(RunningStats {
                mean: Tensor::zeros([channels]),
                var: Tensor::ones([channels]),
            }),
            ..Self::instance(name, channels)
        }
    }

    pub fn instance(name: &str, channels: usize) -> Self {
        Norm {
            name: name.to_string(),
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones([channels])),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros([channels])),
            running: None,
            momentum: NORM_MOMENTUM,
            eps: NORM_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn is_instance(&self) -> bool {
        self.running.is_none()
    }

    fn affine<'t>(&self, ctx: &Ctx<'t, T>, xhat: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = xhat.shape();
        let g = ctx.param(&self.gamma).reshape(&channel_shape(shape.len(), self.channels()))?;
        let b = ctx.param(&self.beta).reshape(&channel_shape(shape.len(), self.channels()))?;
        xhat.mul(g.broadcast_to(&shape)?)?.add(b.broadcast_to(&shape)?)
    }

    /// Apply a running-stat update observed in train mode.
    pub fn commit(&mut self, update: &StatUpdate<T>) {
        if let Some(rs) = self.running.as_mut() {
            rs.absorb(update, self.momentum);
        }
    }
}

fn channel_shape(rank: usize, c: usize) -> Vec<usize> {
    let mut s = vec![1; rank];
    s[1] = c;
    s
}

fn normalize<'t, T: Scalar>(x: Var<'t, T>, axes: &[usize], eps: f64) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
    let shape = x.shape();
    let mean = x.mean(axes, true)?;
    let xc = x.sub(mean.broadcast_to(&shape)?)?;
    let var = xc.mul(xc)?.mean(axes, true)?;
    let std = var.add_scalar(eps).sqrt()?;
    Ok((xc.div(std.broadcast_to(&shape)?)?, mean, var))
}

/// Batch normalization over every axis except the channel axis (axis 1).
/// Accepts `[N,C]` and `[N,C,H,W]`.
pub fn batch_norm<'t, T: Scalar>(ctx: &Ctx<'t, T>, x: Var<'t, T>, s: &Norm<T>) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if shape.len() < 2 || shape[1] != s.channels() {
        return Err(Error::Shape(format!(
            "batch_norm `{}` expects [N,{},..], got {shape:?}",
            s.name,
            s.channels()
        )));
    }
    let running = s
        .running
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("`{}` has no running statistics", s.name)))?;
    let axes: Vec<usize> = std::iter::once(0).chain(2..shape.len()).collect();
    let count: usize = axes.iter().map(|&a| shape[a]).product();
    if count == 0 {
        return Err(Error::Contract(format!("batch_norm `{}` on an empty batch", s.name)));
    }
    let cs = channel_shape(shape.len(), s.channels());
    match ctx.mode() {
        Mode::Train => {
            if count < 2 {
                return Err(Error::Contract(format!(
                    "batch_norm `{}` in train mode needs at least 2 values per channel",
                    s.name
                )));
            }
            let (xhat, mean, var) = normalize(x, &axes, s.eps)?;
            ctx.push_stats(StatUpdate {
                name: s.name.clone(),
                mean: mean.value().data().to_vec(),
                var: var.value().data().to_vec(),
            });
            s.affine(ctx, xhat)
        }
        Mode::Eval => {
            let mean = ctx.input(running.mean.clone().reshaped(cs.clone())?);
            let std = ctx.input(running.var.map(|v| (v + T::from_f64_lossy(s.eps)).sqrt()).reshaped(cs.clone())?);
            let xhat = x.sub(mean.broadcast_to(&shape)?)?.div(std.broadcast_to(&shape)?)?;
            s.affine(ctx, xhat)
        }
    }
}

/// Instance normalization: each `(n, c)` plane normalized over its spatial extent.
pub fn instance_norm<'t, T: Scalar>(ctx: &Ctx<'t, T>, x: Var<'t, T>, s: &Norm<T>) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != s.channels() {
        return Err(Error::Shape(format!(
            "instance_norm `{}` expects [N,{},H,W], got {shape:?}",
            s.name,
            s.channels()
        )));
    }
    if shape[2] * shape[3] < 2 {
        return Err(Error::Contract(format!(
            "instance_norm `{}` needs planes of at least 2 pixels, got {}x{}",
            s.name, shape[2], shape[3]
        )));
    }
    let (xhat, _, _) = normalize(x, &[2, 3], s.eps)?;
    s.affine(ctx, xhat)
}

/// Instance-batch normalization: channels `[0, split)` instance-normalized,
/// `[split, C)` batch-normalized.
#[derive(Debug, Clone)]
pub struct Ibn<T> {
    pub instance: Norm<T>,
    pub batch: Norm<T>,
    pub split: usize,
}

impl<T: Scalar> Ibn<T> {
    pub fn new(name: &str, channels: usize, split: usize) -> Result<Self> {
        if split == 0 || split >= channels {
            return Err(Error::Shape(format!(
                "IBN split {split} must lie strictly inside (0, {channels})"
            )));
        }
        Ok(Ibn {
            instance: Norm::instance(&format!("{name}.in"), split),
            batch: Norm::batch(&format!("{name}.bn"), channels - split),
            split,
        })
    }

    pub fn channels(&self) -> usize {
        self.split + self.batch.channels()
    }
}

pub fn ibn<'t, T: Scalar>(ctx: &Ctx<'t, T>, x: Var<'t, T>, s: &Ibn<T>) -> Result<Var<'t, T>> {
    let c = x.shape().get(1).copied().unwrap_or(0);
    if c != s.channels() {
        return Err(Error::Shape(format!("IBN expects {} channels, got {c}", s.channels())));
    }
    let a = instance_norm(ctx, x.slice(1, 0..s.split)?, &s.instance)?;
    let b = batch_norm(ctx, x.slice(1, s.split..c)?, &s.batch)?;
    concat(&[a, b], 1)
}

/// The normalization slot of a residual block.
#[derive(Debug, Clone)]
pub enum NormLayer<T> {
    Batch(Norm<T>),
    Ibn(Ibn<T>),
}

impl<T: Scalar> NormLayer<T> {
    pub fn forward<'t>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            NormLayer::Batch(n) => batch_norm(ctx, x, n),
            NormLayer::Ibn(n) => ibn(ctx, x, n),
        }
    }
}

impl<T: Scalar> Module<T> for Norm<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(Slot<'a, T>)) {
        f(Slot::Param(&self.gamma));
        f(Slot::Param(&self.beta));
        if let Some(r) = &self.running {
            f(Slot::Buffer(&self.name, r));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(SlotMut<'_, T>)) {
        f(SlotMut::Param(&mut self.gamma));
        f(SlotMut::Param(&mut self.beta));
        if let Some(r) = &mut self.running {
            f(SlotMut::Buffer(&self.name, r));
        }
    }
}

impl<T: Scalar> Module<T> for Ibn<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(Slot<'a, T>)) {
        self.instance.visit(f);
        self.batch.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(SlotMut<'_, T>)) {
        self.instance.visit_mut(f);
        self.batch.visit_mut(f);
    }
}

impl<T: Scalar> Module<T> for NormLayer<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(Slot<'a, T>)) {
        match self {
            NormLayer::Batch(n) => n.visit(f),
            NormLayer::Ibn(n) => n.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(SlotMut<'_, T>)) {
        match self {
            NormLayer::Batch(n) => n.visit_mut(f),
            NormLayer::Ibn(n) => n.visit_mut(f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn plane(vals: &[f64], shape: [usize; 4]) -> Tensor<f64> {
        Tensor::from_vec(shape, vals.to_vec()).unwrap()
    }

    #[test]
    fn two_values_normalize_to_plus_minus_one() {
        let tape = Tape::<f64>::new();
        let ctx = Ctx::train(&tape);
        let mut n = Norm::batch("bn", 1);
        n.eps = 0.0;
        let x = ctx.input(plane(&[1.0, 3.0], [2, 1, 1, 1]));
        let y = batch_norm(&ctx, x, &n).unwrap();
        assert_eq!(y.value().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn eval_mode_with_unit_stats_is_near_identity() {
        let tape = Tape::<f64>::new();
        let ctx = Ctx::eval(&tape);
        let n = Norm::batch("bn", 2);
        let vals = [0.5, -2.0, 3.0, 1.5];
        let x = ctx.input(plane(&vals, [1, 2, 2, 1]));
        let y = batch_norm(&ctx, x, &n).unwrap().value();
        for (a, b) in y.data().iter().zip(vals) {
            assert!((a - b).abs() < 1e-4);
        }
        assert!(ctx.take_stats().is_empty());
    }

    #[test]
    fn running_stats_follow_momentum_rule() {
        let tape = Tape::<f64>::new();
        let ctx = Ctx::train(&tape);
        let mut n = Norm::batch("bn", 1);
        let vals = [1.0, 2.0, 4.0, 9.0];
        let x = ctx.input(plane(&vals, [4, 1, 1, 1]));
        batch_norm(&ctx, x, &n).unwrap();
        let ups = ctx.take_stats();
        n.commit(&ups[0]);
        // direct recomputation
        let mean = vals.iter().sum::<f64>() / 4.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        let rs = n.running.as_ref().unwrap();
        assert!((rs.mean.data()[0] - 0.1 * mean).abs() < 1e-12);
        assert!((rs.var.data()[0] - (0.9 + 0.1 * var)).abs() < 1e-12);
    }

    #[test]
    fn train_mode_rejects_single_value_channels() {
        let tape = Tape::<f64>::new();
        let ctx = Ctx::train(&tape);
        let n = Norm::batch("bn", 1);
        let x = ctx.input(plane(&[1.0], [1, 1, 1, 1]));
        assert!(matches!(batch_norm(&ctx, x, &n), Err(Error::Contract(_))));
        let empty = ctx.input(Tensor::zeros([0, 1, 1, 1]));
        assert!(matches!(batch_norm(&ctx, empty, &n), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_plane_instance_norms_to_zero() {
        let tape = Tape::<f64>::new();
        let ctx = Ctx::train(&tape);
        let n = Norm::instance("in", 1);
        let x = ctx.input(plane(&[5.0; 4], [1, 1, 2, 2]));
        let y = instance_norm(&ctx, x, &n).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        let one = ctx.input(plane(&[5.0], [1, 1, 1, 1]));
        assert!(matches!(instance_norm(&ctx, one, &n), Err(Error::Contract(_))));
    }

    #[test]
    fn ibn_split_bounds() {
        assert!(Ibn::<f32>::new("ibn", 4, 0).is_err());
        assert!(Ibn::<f32>::new("ibn", 4, 4).is_err());
        let s = Ibn::<f32>::new("ibn", 4, 3).unwrap();
        assert_eq!(s.batch.channels(), 1);
    }
}
