use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::layers::Conv;
use super::param::{Ctx, Module, Slot, SlotMut};

/// Non-local self-attention block with a residual connection.
///
/// `theta`, `phi` and `g` project to `C/2` channels; `out` projects back and starts at
/// zero, so a fresh block is the identity.
#[derive(Debug, Clone)]
pub struct NonLocal<T> {
    pub theta: Conv<T>,
    pub phi: Conv<T>,
    pub g: Conv<T>,
    pub out: Conv<T>,
    pub channels: usize,
}

impl<T: Scalar> NonLocal<T> {
    pub fn new(name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(2) {
            return Err(Error::config(
                "backbone.use_nonlocal",
                format!("non-local block needs an even channel count, got {channels}"),
            ));
        }
        let inner = channels / 2;
        Ok(NonLocal {
            theta: Conv::new(&format!("{name}.theta"), channels, inner, 1, 1, 0, true, rng)?,
            phi: Conv::new(&format!("{name}.phi"), channels, inner, 1, 1, 0, true, rng)?,
            g: Conv::new(&format!("{name}.g"), channels, inner, 1, 1, 0, true, rng)?,
            out: Conv::zeroed(&format!("{name}.out"), inner, channels),
            channels,
        })
    }

    pub fn inner(&self) -> usize {
        self.channels / 2
    }

    /// Attention weights `[N, HW, HW]` (rows sum to one) and the block output.
    pub fn forward_with_attention<'t>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::Shape(format!(
                "non-local block expects [N,{},H,W], got {shape:?}",
                self.channels
            )));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let ci = self.inner();
        let hw = h * w;
        let theta = self.theta.forward(ctx, x)?.reshape(&[n, ci, hw])?.transpose(1, 2)?;
        let phi = self.phi.forward(ctx, x)?.reshape(&[n, ci, hw])?;
        let g = self.g.forward(ctx, x)?.reshape(&[n, ci, hw])?.transpose(1, 2)?;
        let scale = 1.0 / (ci as f64).sqrt();
        let attn = theta.bmm(phi)?.mul_scalar(scale).softmax(2)?;
        let y = attn.bmm(g)?.transpose(1, 2)?.reshape(&[n, ci, h, w])?;
        let z = self.out.forward(ctx, y)?.add(x)?;
        Ok((attn, z))
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.forward_with_attention(ctx, x)?.1)
    }
}

impl<T: Scalar> Module<T> for NonLocal<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(Slot<'a, T>)) {
        self.theta.visit(f);
        self.phi.visit(f);
        self.g.visit(f);
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(SlotMut<'_, T>)) {
        self.theta.visit_mut(f);
        self.phi.visit_mut(f);
        self.g.visit_mut(f);
        self.out.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::{Init, Tensor};

    #[test]
    fn fresh_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let nl = NonLocal::<f64>::new("nl", 4, &mut rng).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let x = Tensor::alloc([2, 4, 3, 3], Init::Gaussian { mean: 0.0, std: 1.0, seed: 3 }).unwrap();
        let (attn, z) = nl.forward_with_attention(&ctx, ctx.input(x.clone())).unwrap();
        assert_eq!(z.value().data(), x.data());
        let a = attn.value();
        for r in 0..2 * 9 {
            let s: f64 = a.data()[r * 9..(r + 1) * 9].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn odd_channels_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(NonLocal::<f32>::new("nl", 3, &mut rng), Err(Error::Config { .. })));
    }
}
