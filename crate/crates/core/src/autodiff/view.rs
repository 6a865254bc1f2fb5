use std::ops::Range;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{checked_numel, strides, Tensor};

use super::tape::Var;

fn permute_data<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    if x.rank() == 0 {
        return x.clone();
    }
    let shape = x.shape();
    let in_st = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // input strides reordered to walk the output in row-major order
    let walk: Vec<usize> = perm.iter().map(|&p| in_st[p]).collect();
    let n = x.numel();
    let mut data = Vec::with_capacity(n);
    if n > 0 {
        let rank = out_shape.len();
        let mut idx = vec![0usize; rank];
        let src = x.data();
        'outer: loop {
            let off: usize = idx.iter().zip(&walk).map(|(i, s)| i * s).sum();
            let inner = walk[rank - 1];
            for i in 0..out_shape[rank - 1] {
                data.push(src[off + i * inner]);
            }
            let mut ax = rank - 1;
            loop {
                if ax == 0 {
                    break 'outer;
                }
                ax -= 1;
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
    }
    Tensor::from_vec(out_shape, data).unwrap()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if checked_numel(shape)? != x.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                x.shape()
            )));
        }
        let out = (*x).clone().reshaped(shape.to_vec())?;
        Ok(self.derive(
            out,
            &[self],
            Box::new(|c| {
                vec![Some(
                    c.grad.clone().reshaped(c.inputs[0].shape().to_vec()).unwrap(),
                )]
            }),
        ))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!(
                "{perm:?} is not a permutation of {rank} axes"
            )));
        }
        let out = permute_data(&x, perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.derive(
            out,
            &[self],
            Box::new(move |c| vec![Some(permute_data(c.grad, &inverse))]),
        ))
    }

    /// Swap two axes.
    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'t, T>> {
        let rank = self.shape().len();
        if a >= rank || b >= rank {
            return Err(Error::Shape(format!("transpose axes ({a},{b}) out of range for rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Sub-range `range` along `axis`.
    pub fn slice(self, axis: usize, range: Range<usize>) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || range.start > range.end || range.end > shape[axis] {
            return Err(Error::Shape(format!(
                "slice {range:?} on axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let len = range.end - range.start;
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + range.start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let out = Tensor::from_vec(out_shape, data)?;
        let start = range.start;
        Ok(self.derive(
            out,
            &[self],
            Box::new(move |c| {
                let mut gx = Tensor::zeros(c.inputs[0].shape().to_vec());
                let gd = gx.data_mut();
                let g = c.grad.data();
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    gd[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Pick elements by flat (row-major) index into a rank-1 result.
    pub fn gather(self, indices: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.numel()) {
            return Err(Error::Shape(format!(
                "gather index {bad} out of range for {} elements",
                x.numel()
            )));
        }
        let data = indices.iter().map(|&i| x.data()[i]).collect();
        let out = Tensor::from_vec([indices.len()], data)?;
        let idx = indices.to_vec();
        Ok(self.derive(
            out,
            &[self],
            Box::new(move |c| {
                let mut gx = Tensor::zeros(c.inputs[0].shape().to_vec());
                let gd = gx.data_mut();
                for (&i, &g) in idx.iter().zip(c.grad.data()) {
                    gd[i] = gd[i] + g;
                }
                vec![Some(gx)]
            }),
        ))
    }
}

/// Join variables along `axis`; all other extents must agree.
pub fn concat<'t, T: Scalar>(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::Shape(format!("concat axis {axis} out of range for {base:?}")));
    }
    for v in &values[1..] {
        let s = v.shape();
        if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
            return Err(Error::Shape(format!("concat extents {s:?} and {base:?} disagree off axis {axis}")));
        }
    }
    let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = extents.iter().sum();
    let mut out_shape = base.clone();
    out_shape[axis] = total;
    let (outer, _, inner) = split_axis(&base, axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &e) in values.iter().zip(&extents) {
            let src = o * e * inner;
            data.extend_from_slice(&v.data()[src..src + e * inner]);
        }
    }
    let out = Tensor::from_vec(out_shape, data)?;
    Ok(first.derive(
        out,
        parts,
        Box::new(move |c| {
            let g = c.grad.data();
            let mut grads: Vec<Vec<T>> = extents
                .iter()
                .map(|&e| Vec::with_capacity(outer * e * inner))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (buf, &e) in grads.iter_mut().zip(&extents) {
                    buf.extend_from_slice(&g[off..off + e * inner]);
                    off += e * inner;
                }
            }
            grads
                .into_iter()
                .zip(c.inputs)
                .zip(c.needs)
                .map(|((buf, inp), &need)| {
                    need.then(|| Tensor::from_vec(inp.shape().to_vec(), buf).unwrap())
                })
                .collect()
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn reshape_values() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec([4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let r = x.reshape(&[2, 2]).unwrap();
        assert_eq!(r.value().get(&[1, 0]), 3.0);
        assert!(x.reshape(&[3]).is_err());
    }

    #[test]
    fn slice_concat_partition_identity() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let top = x.slice(0, 0..1).unwrap();
        let bottom = x.slice(0, 1..2).unwrap();
        let back = concat(&[top, bottom], 0).unwrap();
        assert_eq!(back.value().data(), x.value().data());
        assert!(matches!(x.slice(0, 1..3), Err(Error::Shape(_))));
    }

    #[test]
    fn concat_splits_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros([1, 2]), true);
        let b = tape.leaf(Tensor::zeros([1, 3]), true);
        let c = concat(&[a, b], 1).unwrap();
        let w = tape.constant(Tensor::from_vec([1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let g = tape.backward(c.mul(w).unwrap().sum_all()).unwrap();
        assert_eq!(g.wrt(a).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(g.wrt(b).unwrap().data(), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn permute_matches_index_formula() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec([2, 3, 4], (0..24).map(f64::from).collect()).unwrap());
        let p = x.permute(&[2, 0, 1]).unwrap().value();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(p.get(&[k, i, j]), x.value().get(&[i, j, k]));
                }
            }
        }
        assert!(x.permute(&[0, 0, 1]).is_err());
    }
}
