use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::param::{Ctx, Module, Param, Slot, SlotMut};

/// Fully connected layer, weight stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Linear {
            weight: Param::he(format!("{name}.weight"), &[d_in, d_out], d_in, rng)?,
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros([d_out]))),
        })
    }

    /// Bias-free layer with weights drawn at a fixed standard deviation.
    pub fn with_std(name: &str, d_in: usize, d_out: usize, std: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Linear {
            weight: Param::gaussian(format!("{name}.weight"), &[d_in, d_out], std, rng)?,
            bias: None,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        linear(x, ctx.param(&self.weight), self.bias.as_ref().map(|b| ctx.param(b)))
    }
}

/// `x[N,Din] * w[Din,Dout] (+ bias[Dout])`.
pub fn linear<'t, T: Scalar>(x: Var<'t, T>, w: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
    let y = x.matmul(w)?;
    match bias {
        None => Ok(y),
        Some(b) => {
            let shape = y.shape();
            if b.shape() != [shape[1]] {
                return Err(Error::Shape(format!("linear bias {:?} for output {shape:?}", b.shape())));
            }
            y.add(b.reshape(&[1, shape[1]])?.broadcast_to(&shape)?)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv<T> {
    /// Square `k x k` convolution, He-initialized.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Conv {
            weight: Param::he(format!("{name}.weight"), &[c_out, c_in, k, k], c_in * k * k, rng)?,
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros([c_out]))),
            stride,
            padding,
        })
    }

    pub fn zeroed(name: &str, c_in: usize, c_out: usize) -> Self {
        Conv {
            weight: Param::new(format!("{name}.weight"), Tensor::zeros([c_out, c_in, 1, 1])),
            bias: Some(Param::new(format!("{name}.bias"), Tensor::zeros([c_out]))),
            stride: 1,
            padding: 0,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(
            ctx.param(&self.weight),
            self.bias.as_ref().map(|b| ctx.param(b)),
            self.stride,
            self.padding,
        )
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(Slot<'a, T>)) {
        f(Slot::Param(&self.weight));
        if let Some(b) = &self.bias {
            f(Slot::Param(b));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(SlotMut<'_, T>)) {
        f(SlotMut::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(SlotMut::Param(b));
        }
    }
}

impl<T: Scalar> Module<T> for Conv<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(Slot<'a, T>)) {
        f(Slot::Param(&self.weight));
        if let Some(b) = &self.bias {
            f(Slot::Param(b));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(SlotMut<'_, T>)) {
        f(SlotMut::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(SlotMut::Param(b));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn identity_weight_passes_input_through() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec([2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap());
        let w = tape.constant(Tensor::from_vec([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::zeros([2]));
        assert_eq!(linear(x, w, Some(b)).unwrap().value().data(), x.value().data());
    }

    #[test]
    fn row_times_ones_column() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec([1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.constant(Tensor::from_vec([2, 1], vec![1.0, 1.0]).unwrap());
        assert_eq!(linear(x, w, None).unwrap().value().data(), &[3.0]);
        let bad = tape.constant(Tensor::zeros([3, 1]));
        assert!(linear(x, bad, None).is_err());
    }
}
