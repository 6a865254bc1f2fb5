use crate::error::{Error, Result};
use crate::scalar::{MatRef, Scalar};
use crate::tensor::Tensor;

use super::tape::Var;

/// `a(m x k) * b(k x n)` for row-major slices, optionally reading either operand transposed.
pub(crate) fn matmul_raw<T: Scalar>(
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let am = if a_t { MatRef::transposed(a, m) } else { MatRef::row_major(a, k) };
    let bm = if b_t { MatRef::transposed(b, k) } else { MatRef::row_major(b, n) };
    T::gemm(m, k, n, T::one(), am, bm, T::zero(), &mut c);
    c
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Matrix product of `[M,K]` and `[K,N]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = Tensor::from_vec([m, n], matmul_raw(a.data(), false, b.data(), false, m, k, n))?;
        Ok(self.derive(
            out,
            &[self, other],
            Box::new(move |c| {
                let g = c.grad.data();
                let ga = c.needs[0].then(|| {
                    // dA = G * B^T
                    let d = matmul_raw(g, false, c.inputs[1].data(), true, m, n, k);
                    Tensor::from_vec([m, k], d).unwrap()
                });
                let gb = c.needs[1].then(|| {
                    // dB = A^T * G
                    let d = matmul_raw(c.inputs[0].data(), true, g, false, k, m, n);
                    Tensor::from_vec([k, n], d).unwrap()
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Batched matrix product of `[B,M,K]` and `[B,K,N]`.
    pub fn bmm(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape(format!("bmm of {sa:?} and {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = Vec::with_capacity(bs * m * n);
        for i in 0..bs {
            data.extend(matmul_raw(
                &a.data()[i * m * k..(i + 1) * m * k],
                false,
                &b.data()[i * k * n..(i + 1) * k * n],
                false,
                m,
                k,
                n,
            ));
        }
        let out = Tensor::from_vec([bs, m, n], data)?;
        Ok(self.derive(
            out,
            &[self, other],
            Box::new(move |c| {
                let g = c.grad.data();
                let (ad, bd) = (c.inputs[0].data(), c.inputs[1].data());
                let ga = c.needs[0].then(|| {
                    let mut d = Vec::with_capacity(bs * m * k);
                    for i in 0..bs {
                        d.extend(matmul_raw(
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bd[i * k * n..(i + 1) * k * n],
                            true,
                            m,
                            n,
                            k,
                        ));
                    }
                    Tensor::from_vec([bs, m, k], d).unwrap()
                });
                let gb = c.needs[1].then(|| {
                    let mut d = Vec::with_capacity(bs * k * n);
                    for i in 0..bs {
                        d.extend(matmul_raw(
                            &ad[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            k,
                            m,
                            n,
                        ));
                    }
                    Tensor::from_vec([bs, k, n], d).unwrap()
                });
                vec![ga, gb]
            }),
        ))
    }
}
