// Tensor arithmetic returns `Result` (shape checks), so it cannot be the std operator traits.
#![allow(clippy::should_implement_trait)]

pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod head;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod runner;
pub mod scalar;
pub mod tensor;
