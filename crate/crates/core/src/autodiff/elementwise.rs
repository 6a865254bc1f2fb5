use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::tape::Var;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Bcast {
    None,
    Left,
    Right,
}

fn resolve(a: &[usize], b: &[usize], an: usize, bn: usize) -> Result<(Vec<usize>, Bcast)> {
    if a == b {
        Ok((a.to_vec(), Bcast::None))
    } else if bn == 1 {
        Ok((a.to_vec(), Bcast::Right))
    } else if an == 1 {
        Ok((b.to_vec(), Bcast::Left))
    } else {
        Err(Error::Shape(format!(
            "elementwise operands {a:?} and {b:?} differ and neither is a scalar"
        )))
    }
}

type Partial<T> = fn(T, T, T, T) -> T;

impl<'t, T: Scalar> Var<'t, T> {
    fn binary(
        self,
        other: Var<'t, T>,
        f: fn(T, T) -> T,
        da: Partial<T>,
        db: Partial<T>,
    ) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let (shape, bc) = resolve(a.shape(), b.shape(), a.numel(), b.numel())?;
        let n = shape.iter().product::<usize>();
        let data: Vec<T> = match bc {
            Bcast::None => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Right => {
                let y = b.data()[0];
                a.data().iter().map(|&x| f(x, y)).collect()
            }
            Bcast::Left => {
                let x = a.data()[0];
                b.data().iter().map(|&y| f(x, y)).collect()
            }
        };
        debug_assert_eq!(data.len(), n);
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.derive(
            out,
            &[self, other],
            Box::new(move |c| {
                let a = &c.inputs[0];
                let b = &c.inputs[1];
                let g = c.grad.data();
                let o = c.output.data();
                let at = |i: usize| if bc == Bcast::Left { a.data()[0] } else { a.data()[i] };
                let bt = |i: usize| if bc == Bcast::Right { b.data()[0] } else { b.data()[i] };
                let ga = c.needs[0].then(|| {
                    let full: Vec<T> = (0..g.len()).map(|i| da(g[i], at(i), bt(i), o[i])).collect();
                    if bc == Bcast::Left {
                        Tensor::from_vec(a.shape().to_vec(), vec![full.into_iter().sum()]).unwrap()
                    } else {
                        Tensor::from_vec(a.shape().to_vec(), full).unwrap()
                    }
                });
                let gb = c.needs[1].then(|| {
                    let full: Vec<T> = (0..g.len()).map(|i| db(g[i], at(i), bt(i), o[i])).collect();
                    if bc == Bcast::Right {
                        Tensor::from_vec(b.shape().to_vec(), vec![full.into_iter().sum()]).unwrap()
                    } else {
                        Tensor::from_vec(b.shape().to_vec(), full).unwrap()
                    }
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, |a, b| a + b, |g, _, _, _| g, |g, _, _, _| g)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, |a, b| a - b, |g, _, _, _| g, |g, _, _, _| -g)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, |a, b| a * b, |g, _, b, _| g * b, |g, a, _, _| g * a)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(
            other,
            |a, b| a / b,
            |g, _, b, _| g / b,
            |g, _, b, o| -g * o / b,
        )
    }

    /// Elementwise map with derivative `d(x, y)` expressed through input and output.
    fn unary(self, f: impl Fn(T) -> T, d: fn(T, T) -> T) -> Var<'t, T> {
        let out = self.with_value(|x| x.map(f));
        self.derive(
            out,
            &[self],
            Box::new(move |c| {
                let x = c.inputs[0].data();
                let y = c.output.data();
                let g = c.grad.data();
                let data = (0..g.len()).map(|i| g[i] * d(x[i], y[i])).collect();
                vec![Some(Tensor::from_vec(c.grad.shape().to_vec(), data).unwrap())]
            }),
        )
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn log(self) -> Result<Var<'t, T>> {
        if let Some(bad) = self.with_value(|x| x.data().iter().copied().find(|&v| !(v > T::zero()))) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(|x| x.ln(), |x, _| T::one() / x))
    }

    pub fn sqrt(self) -> Result<Var<'t, T>> {
        if let Some(bad) = self.with_value(|x| x.data().iter().copied().find(|&v| !(v >= T::zero()))) {
            return Err(Error::Domain(format!("sqrt of negative value {bad}")));
        }
        Ok(self.unary(|x| x.sqrt(), |_, y| T::one() / (y + y)))
    }

    /// `x^k` for a constant exponent. Negative bases need an integral `k`.
    pub fn pow(self, k: f64) -> Result<Var<'t, T>> {
        if k.fract() != 0.0 {
            if let Some(bad) = self.with_value(|x| x.data().iter().copied().find(|&v| v < T::zero())) {
                return Err(Error::Domain(format!("pow({k}) of negative value {bad}")));
            }
        }
        let kt = T::from_f64_lossy(k);
        let out = self.with_value(|x| x.map(|v| v.powf(kt)));
        Ok(self.derive(
            out,
            &[self],
            Box::new(move |c| {
                let x = c.inputs[0].data();
                let g = c.grad.data();
                let km1 = kt - T::one();
                let data = (0..g.len()).map(|i| g[i] * kt * x[i].powf(km1)).collect();
                vec![Some(Tensor::from_vec(c.grad.shape().to_vec(), data).unwrap())]
            }),
        ))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        let ct = T::from_f64_lossy(c);
        self.unary(move |x| x + ct, |_, _| T::one())
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t, T> {
        let ct = T::from_f64_lossy(c);
        let out = self.with_value(|x| x.map(|v| v * ct));
        self.derive(
            out,
            &[self],
            Box::new(move |cx| vec![Some(cx.grad.map(|g| g * ct))]),
        )
    }

    /// `max(x, floor)`; gradient passes where `x > floor`.
    pub fn clamp_min(self, floor: f64) -> Var<'t, T> {
        let ft = T::from_f64_lossy(floor);
        let out = self.with_value(|x| x.map(|v| if v > ft { v } else { ft }));
        self.derive(
            out,
            &[self],
            Box::new(move |c| {
                let x = c.inputs[0].data();
                let g = c.grad.data();
                let data = (0..g.len())
                    .map(|i| if x[i] > ft { g[i] } else { T::zero() })
                    .collect();
                vec![Some(Tensor::from_vec(c.grad.shape().to_vec(), data).unwrap())]
            }),
        )
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t, T> {
        self.unary(
            |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            |x, _| T::one() / (T::one() + (-x).exp()),
        )
    }
}
