//! Stateful layers built on the autodiff core.

mod layers;
mod nonlocal;
mod norm;
mod param;
mod pool;

pub use layers::{linear, Conv, Linear};
pub use nonlocal::NonLocal;
pub use norm::{batch_norm, ibn, instance_norm, Ibn, Norm, NormLayer, NORM_EPS, NORM_MOMENTUM};
pub use param::{Ctx, Mode, Module, Param, RunningStats, Slot, SlotMut, StatUpdate, TrainableMask};
pub use pool::{pool, PoolKind, GEM_CLAMP, GEM_INIT_P};
