use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::tape::Var;

fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<()> {
    if axis >= x.rank() {
        return Err(Error::Shape(format!("softmax axis {axis} out of range for {:?}", x.shape())));
    }
    if !x.all_finite() {
        return Err(Error::Domain("softmax of non-finite input".into()));
    }
    Ok(())
}

/// Apply `f(lane_values, out)` to each 1-D lane along the axis.
fn per_lane<T: Scalar>(
    data: &[T],
    (outer, dim, inner): (usize, usize, usize),
    mut f: impl FnMut(&[T], &mut [T]),
) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    let mut lane = vec![T::zero(); dim];
    let mut res = vec![T::zero(); dim];
    for o in 0..outer {
        for i in 0..inner {
            for d in 0..dim {
                lane[d] = data[(o * dim + d) * inner + i];
            }
            f(&lane, &mut res);
            for d in 0..dim {
                out[(o * dim + d) * inner + i] = res[d];
            }
        }
    }
    out
}

fn log_softmax_lane<T: Scalar>(x: &[T], out: &mut [T]) {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = x.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Softmax along `axis`, shifted by the lane maximum.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        check(&x, axis)?;
        let geo = lanes(x.shape(), axis);
        let data = per_lane(x.data(), geo, |lane, out| {
            log_softmax_lane(lane, out);
            out.iter_mut().for_each(|v| *v = v.exp());
        });
        let out = Tensor::from_vec(x.shape().to_vec(), data)?;
        Ok(self.derive(
            out,
            &[self],
            Box::new(move |c| {
                let (outer, dim, inner) = geo;
                let y = c.output.data();
                let g = c.grad.data();
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |d: usize| (o * dim + d) * inner + i;
                        let dot: T = (0..dim).map(|d| g[at(d)] * y[at(d)]).sum();
                        for d in 0..dim {
                            gx[at(d)] = y[at(d)] * (g[at(d)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_vec(c.output.shape().to_vec(), gx).unwrap())]
            }),
        ))
    }

    /// `log(softmax(x))` in log-sum-exp form.
    pub fn log_softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        check(&x, axis)?;
        let geo = lanes(x.shape(), axis);
        let data = per_lane(x.data(), geo, log_softmax_lane);
        let out = Tensor::from_vec(x.shape().to_vec(), data)?;
        Ok(self.derive(
            out,
            &[self],
            Box::new(move |c| {
                let (outer, dim, inner) = geo;
                let y = c.output.data();
                let g = c.grad.data();
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |d: usize| (o * dim + d) * inner + i;
                        let gsum: T = (0..dim).map(|d| g[at(d)]).sum();
                        for d in 0..dim {
                            gx[at(d)] = g[at(d)] - y[at(d)].exp() * gsum;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(c.output.shape().to_vec(), gx).unwrap())]
            }),
        ))
    }
}
