use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{strides, Tensor};

use super::tape::Var;

/// For every linear index of `shape`, the linear index into the tensor obtained by
/// collapsing each `collapsed` axis to extent 1.
pub(crate) fn collapse_map(shape: &[usize], collapsed: &[bool]) -> Vec<usize> {
    let small: Vec<usize> = shape
        .iter()
        .zip(collapsed)
        .map(|(&d, &c)| if c { 1 } else { d })
        .collect();
    let st = strides(&small);
    let eff: Vec<usize> = st
        .iter()
        .zip(collapsed)
        .map(|(&s, &c)| if c { 0 } else { s })
        .collect();
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let rank = shape.len();
    if rank == 0 {
        out.push(0);
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let last = rank - 1;
    loop {
        for i in 0..shape[last] {
            out.push(off + i * eff[last]);
        }
        // carry into the outer axes
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn axis_mask(shape: &[usize], axes: &[usize]) -> Result<Vec<bool>> {
    let mut mask = vec![false; shape.len()];
    for &a in axes {
        if a >= shape.len() {
            return Err(Error::Shape(format!("axis {a} out of range for {shape:?}")));
        }
        if mask[a] {
            return Err(Error::Shape(format!("axis {a} repeated in {axes:?}")));
        }
        mask[a] = true;
    }
    Ok(mask)
}

fn reduced_shape(shape: &[usize], mask: &[bool], keepdim: bool) -> Vec<usize> {
    shape
        .iter()
        .zip(mask)
        .filter_map(|(&d, &m)| match (m, keepdim) {
            (true, true) => Some(1),
            (true, false) => None,
            (false, _) => Some(d),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Reduce over `axes`. Reduced axes are dropped, or kept with extent 1 when `keepdim`.
    pub fn reduce(self, op: ReduceOp, axes: &[usize], keepdim: bool) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let mask = axis_mask(&shape, axes)?;
        let out_shape = reduced_shape(&shape, &mask, keepdim);
        let out_n: usize = out_shape.iter().product();
        let group: usize = shape
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(&d, _)| d)
            .product();
        let map = collapse_map(&shape, &mask);
        match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                let mut acc = vec![T::zero(); out_n];
                for (&v, &o) in x.data().iter().zip(&map) {
                    acc[o] = acc[o] + v;
                }
                let scale = if op == ReduceOp::Mean {
                    if group == 0 {
                        return Err(Error::Domain("mean over an empty axis".into()));
                    }
                    T::one() / T::from_usize(group).unwrap()
                } else {
                    T::one()
                };
                if op == ReduceOp::Mean {
                    acc.iter_mut().for_each(|a| *a = *a * scale);
                }
                let out = Tensor::from_vec(out_shape, acc)?;
                Ok(self.derive(
                    out,
                    &[self],
                    Box::new(move |c| {
                        let g = c.grad.data();
                        let data = map.iter().map(|&o| g[o] * scale).collect();
                        vec![Some(Tensor::from_vec(c.inputs[0].shape().to_vec(), data).unwrap())]
                    }),
                ))
            }
            ReduceOp::Max => {
                if group == 0 || x.numel() == 0 {
                    return Err(Error::Domain("max over an empty reduction".into()));
                }
                let mut best: Vec<Option<(T, usize)>> = vec![None; out_n];
                for (i, (&v, &o)) in x.data().iter().zip(&map).enumerate() {
                    // strict comparison keeps the lowest linear index on ties
                    match best[o] {
                        Some((b, _)) if !(v > b) => {}
                        _ => best[o] = Some((v, i)),
                    }
                }
                let arg: Vec<usize> = best.iter().map(|b| b.unwrap().1).collect();
                let data = best.iter().map(|b| b.unwrap().0).collect();
                let out = Tensor::from_vec(out_shape, data)?;
                Ok(self.derive(
                    out,
                    &[self],
                    Box::new(move |c| {
                        let mut gx = Tensor::zeros(c.inputs[0].shape().to_vec());
                        let gd = gx.data_mut();
                        for (o, &i) in arg.iter().enumerate() {
                            gd[i] = gd[i] + c.grad.data()[o];
                        }
                        vec![Some(gx)]
                    }),
                ))
            }
        }
    }

    pub fn sum(self, axes: &[usize], keepdim: bool) -> Result<Var<'t, T>> {
        self.reduce(ReduceOp::Sum, axes, keepdim)
    }

    pub fn mean(self, axes: &[usize], keepdim: bool) -> Result<Var<'t, T>> {
        self.reduce(ReduceOp::Mean, axes, keepdim)
    }

    pub fn max(self, axes: &[usize], keepdim: bool) -> Result<Var<'t, T>> {
        self.reduce(ReduceOp::Max, axes, keepdim)
    }

    pub fn sum_all(self) -> Var<'t, T> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum(&axes, false).expect("all axes are valid")
    }

    pub fn mean_all(self) -> Result<Var<'t, T>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.mean(&axes, false)
    }

    /// Expand extent-1 axes to `target` (same rank). Gradient sums over expanded axes.
    pub fn broadcast_to(self, target: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.len() != target.len()
            || shape.iter().zip(target).any(|(&s, &t)| s != t && s != 1)
        {
            return Err(Error::Shape(format!("cannot broadcast {shape:?} to {target:?}")));
        }
        if shape == target {
            return Ok(self);
        }
        let mask: Vec<bool> = shape.iter().zip(target).map(|(&s, &t)| s == 1 && t != 1).collect();
        let map = collapse_map(target, &mask);
        let data = map.iter().map(|&i| x.data()[i]).collect();
        let out = Tensor::from_vec(target.to_vec(), data)?;
        Ok(self.derive(
            out,
            &[self],
            Box::new(move |c| {
                let mut gx = Tensor::zeros(c.inputs[0].shape().to_vec());
                let gd = gx.data_mut();
                for (&i, &g) in map.iter().zip(c.grad.data()) {
                    gd[i] = gd[i] + g;
                }
                vec![Some(gx)]
            }),
        ))
    }
}
