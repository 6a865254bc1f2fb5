use crate::error::{Error, Result};
use crate::scalar::{MatRef, Scalar};
use crate::tensor::Tensor;

use super::tape::Var;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Column matrix `[C*kh*kw, N*oh*ow]`, zero where the window hits padding.
fn im2col<T: Scalar>(x: &[T], g: &Geometry) -> Vec<T> {
    let cols_n = g.n * g.positions();
    let mut cols = vec![T::zero(); g.patch() * cols_n];
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + i) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let base = n * g.positions() + oy * g.ow;
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + j) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry) -> Vec<T> {
    let cols_n = g.n * g.positions();
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.n {
                    let plane_off = (n * g.c + c) * g.h * g.w;
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + i) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = n * g.positions() + oy * g.ow;
                        let dst = plane_off + iy as usize * g.w;
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + j) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                let d = &mut x[dst + ix as usize];
                                *d = *d + src_row[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

impl<'t, T: Scalar> Var<'t, T> {
    /// 2-D cross-correlation of `[N,C,H,W]` with `[F,C,kh,kw]`, zero padding.
    pub fn conv2d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = weight.value();
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Shape(format!("conv2d expects rank-4 input and weight, got {xs:?}, {ws:?}")));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be >= 1".into()));
        }
        if xs[1] != ws[1] {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {}, weight expects {}",
                xs[1], ws[1]
            )));
        }
        let (kh, kw) = (ws[2], ws[3]);
        if kh > xs[2] + 2 * padding || kw > xs[3] + 2 * padding {
            return Err(Error::Shape(format!("kernel {kh}x{kw} larger than padded input {xs:?}")));
        }
        let f = ws[0];
        let g = Geometry {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            kh,
            kw,
            stride,
            pad: padding,
            oh: (xs[2] + 2 * padding - kh) / stride + 1,
            ow: (xs[3] + 2 * padding - kw) / stride + 1,
        };
        if let Some(b) = &bias {
            if b.shape() != [f] {
                return Err(Error::Shape(format!("conv2d bias must be [{f}], got {:?}", b.shape())));
            }
        }
        let p = g.positions();
        let cols_n = g.n * p;
        let cols = im2col(x.data(), &g);
        // [F, N*P]
        let mut out_mat = vec![T::zero(); f * cols_n];
        T::gemm(
            f,
            g.patch(),
            cols_n,
            T::one(),
            MatRef::row_major(w.data(), g.patch()),
            MatRef::row_major(&cols, cols_n),
            T::zero(),
            &mut out_mat,
        );
        let bias_v = bias.map(|b| b.value());
        let mut out = Vec::with_capacity(g.n * f * p);
        for n in 0..g.n {
            for fi in 0..f {
                let b = bias_v.as_ref().map_or(T::zero(), |b| b.data()[fi]);
                let src = &out_mat[fi * cols_n + n * p..fi * cols_n + (n + 1) * p];
                out.extend(src.iter().map(|&v| v + b));
            }
        }
        let out = Tensor::from_vec([g.n, f, g.oh, g.ow], out)?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.derive(
            out,
            &parents,
            Box::new(move |c| {
                let gd = c.grad.data();
                // gradient as [F, N*P]
                let mut gm = vec![T::zero(); f * cols_n];
                for n in 0..g.n {
                    for fi in 0..f {
                        let src = &gd[(n * f + fi) * p..(n * f + fi + 1) * p];
                        gm[fi * cols_n + n * p..fi * cols_n + (n + 1) * p].copy_from_slice(src);
                    }
                }
                let xv = c.inputs[0].data();
                let wv = c.inputs[1].data();
                // columns are rebuilt rather than kept alive between passes
                let cols = if c.needs[1] { im2col(xv, &g) } else { Vec::new() };
                let gx = c.needs[0].then(|| {
                    let mut dcols = vec![T::zero(); g.patch() * cols_n];
                    T::gemm(
                        g.patch(),
                        f,
                        cols_n,
                        T::one(),
                        MatRef::transposed(wv, g.patch()),
                        MatRef::row_major(&gm, cols_n),
                        T::zero(),
                        &mut dcols,
                    );
                    Tensor::from_vec(c.inputs[0].shape().to_vec(), col2im(&dcols, &g)).unwrap()
                });
                let gw = c.needs[1].then(|| {
                    let mut dw = vec![T::zero(); f * g.patch()];
                    T::gemm(
                        f,
                        cols_n,
                        g.patch(),
                        T::one(),
                        MatRef::row_major(&gm, cols_n),
                        MatRef::transposed(&cols, cols_n),
                        T::zero(),
                        &mut dw,
                    );
                    Tensor::from_vec(c.inputs[1].shape().to_vec(), dw).unwrap()
                });
                let mut grads = vec![gx, gw];
                if c.inputs.len() == 3 {
                    grads.push(c.needs[2].then(|| {
                        let db = (0..f)
                            .map(|fi| gm[fi * cols_n..(fi + 1) * cols_n].iter().copied().sum())
                            .collect();
                        Tensor::from_vec([f], db).unwrap()
                    }));
                }
                grads
            }),
        ))
    }
}
