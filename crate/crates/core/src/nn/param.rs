use std::cell::RefCell;

use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Init, Tensor};

/// A named, optionally trainable model parameter.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Permanent flag. Temporary freezing goes through [`TrainableMask`].
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            name: name.into(),
            value,
            trainable: true,
        }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            trainable: false,
            ..Self::new(name, value)
        }
    }

    /// He-normal initialization, `std = sqrt(2 / fan_in)`.
    pub fn he(name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::gaussian(name, shape, (2.0 / fan_in as f64).sqrt(), rng)
    }

    pub fn gaussian(name: impl Into<String>, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let value = Tensor::alloc(
            shape.to_vec(),
            Init::Gaussian {
                mean: 0.0,
                std,
                seed: rng.next_u64(),
            },
        )?;
        Ok(Self::new(name, value))
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Non-trainable per-channel statistics carried by batch normalization.
#[derive(Debug, Clone)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    /// Exponential moving average toward a batch observation.
    pub fn absorb(&mut self, update: &StatUpdate<T>, momentum: f64) {
        let m = T::from_f64_lossy(momentum);
        let keep = T::one() - m;
        for (r, &b) in self.mean.data_mut().iter_mut().zip(&update.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(&update.var) {
            *r = keep * *r + m * b;
        }
    }
}

pub enum Slot<'a, T> {
    Param(&'a Param<T>),
    Buffer(&'a str, &'a RunningStats<T>),
}

pub enum SlotMut<'a, T> {
    Param(&'a mut Param<T>),
    Buffer(&'a str, &'a mut RunningStats<T>),
}

/// Anything holding parameters or normalization buffers.
pub trait Module<T: Scalar> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(Slot<'a, T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(SlotMut<'_, T>));

    fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        self.visit(&mut |s| {
            if let Slot::Param(p) = s {
                out.push(p);
            }
        });
        out
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Vec<M> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(Slot<'a, T>)) {
        for m in self {
            m.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(SlotMut<'_, T>)) {
        for m in self {
            m.visit_mut(f);
        }
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Option<M> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(Slot<'a, T>)) {
        if let Some(m) = self {
            m.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(SlotMut<'_, T>)) {
        if let Some(m) = self {
            m.visit_mut(f);
        }
    }
}

/// Which parameters may receive gradients and updates at the current step.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainableMask {
    frozen_prefixes: Vec<String>,
}

impl TrainableMask {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn freeze_prefix(prefix: impl Into<String>) -> Self {
        TrainableMask {
            frozen_prefixes: vec![prefix.into()],
        }
    }

    pub fn allows<T>(&self, p: &Param<T>) -> bool {
        p.trainable && !self.frozen_prefixes.iter().any(|pre| p.name.starts_with(pre.as_str()))
    }

    pub fn is_all_trainable(&self) -> bool {
        self.frozen_prefixes.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed in train mode, applied to running stats after the step.
#[derive(Debug, Clone)]
pub struct StatUpdate<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Forward-pass context: the tape, the mode, and the trainability mask.
pub struct Ctx<'t, T: Scalar> {
    tape: &'t Tape<T>,
    mode: Mode,
    mask: TrainableMask,
    stats: RefCell<Vec<StatUpdate<T>>>,
}

impl<'t, T: Scalar> Ctx<'t, T> {
    pub fn new(tape: &'t Tape<T>, mode: Mode, mask: TrainableMask) -> Self {
        Ctx {
            tape,
            mode,
            mask,
            stats: RefCell::new(Vec::new()),
        }
    }

    pub fn train(tape: &'t Tape<T>) -> Self {
        Self::new(tape, Mode::Train, TrainableMask::all())
    }

    pub fn eval(tape: &'t Tape<T>) -> Self {
        Self::new(tape, Mode::Eval, TrainableMask::all())
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn mask(&self) -> &TrainableMask {
        &self.mask
    }

    /// Bind a parameter as a leaf of the tape.
    pub fn param(&self, p: &Param<T>) -> Var<'t, T> {
        let rg = self.mask.allows(p);
        self.tape.param(&p.name, p.value.clone(), rg)
    }

    pub fn input(&self, x: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(x)
    }

    pub(crate) fn push_stats(&self, update: StatUpdate<T>) {
        self.stats.borrow_mut().push(update);
    }

    pub fn take_stats(&self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stats.borrow_mut())
    }
}
