//! Differentiable operations on [`Var`].
//!
//! Images are rank-3 `[channels, height, width]`; vectors are rank-1;
//! matrices are rank-2 row-major. One sample per graph.

use std::rc::Rc;

use crate::gemm::{gemm, Mat};
use crate::{Tensor, Var};

fn unary<'t>(
    x: &Var<'t>,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Var<'t> {
    let xv = x.value();
    let out = xv.map(f);
    let out_rc = Rc::new(out.clone());
    x.tape().push_op(out, &[*x], move |g, _| {
        let data = g
            .data()
            .iter()
            .zip(xv.data())
            .zip(out_rc.data())
            .map(|((&g, &x), &y)| g * df(x, y))
            .collect();
        vec![Some(Tensor::new(g.shape(), data))]
    })
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    // ---- elementwise -------------------------------------------------

    pub fn add(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add");
        let out = a.zip_map(&b, |x, y| x + y);
        self.tape()
            .push_op(out, &[*self, *other], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub");
        let out = a.zip_map(&b, |x, y| x - y);
        self.tape().push_op(out, &[*self, *other], |g, _| {
            vec![Some(g.clone()), Some(g.scale(-1.0))]
        })
    }

    pub fn mul(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul");
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape().push_op(out, &[*self, *other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |g, y| g * y)),
                need[1].then(|| g.zip_map(&a, |g, x| g * x)),
            ]
        })
    }

    pub fn div(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "div");
        let out = a.zip_map(&b, |x, y| x / y);
        self.tape().push_op(out, &[*self, *other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |g, y| g / y)),
                need[1].then(|| {
                    let num = g.zip_map(&a, |g, x| g * x);
                    num.zip_map(&b, |n, y| -n / (y * y))
                }),
            ]
        })
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let out = self.value().scale(c);
        self.tape()
            .push_op(out, &[*self], move |g, _| vec![Some(g.scale(c))])
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v + c);
        self.tape().push_op(out, &[*self], |g, _| vec![Some(g.clone())])
    }

    pub fn square(&self) -> Var<'t> {
        unary(self, |v| v * v, |x, _| 2.0 * x)
    }

    /// Square root. The derivative at exactly zero is taken as zero so that
    /// distance losses stay finite at a perfect match.
    pub fn sqrt(&self) -> Var<'t> {
        unary(
            self,
            f64::sqrt,
            |_, y| if y > 0.0 { 0.5 / y } else { 0.0 },
        )
    }

    pub fn recip(&self) -> Var<'t> {
        unary(self, |v| 1.0 / v, |_, y| -y * y)
    }

    pub fn exp(&self) -> Var<'t> {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        unary(self, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Var<'t> {
        unary(self, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(&self) -> Var<'t> {
        unary(self, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        unary(
            self,
            move |v| if v > 0.0 { v } else { slope * v },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    // ---- scalar broadcasting ------------------------------------------

    /// Multiplies every element by a one-element `s`.
    pub fn mul_scalar_var(&self, s: &Var<'t>) -> Var<'t> {
        let (x, sv) = (self.value(), s.value());
        assert_eq!(sv.len(), 1, "mul_scalar_var needs a one-element factor");
        let k = sv.item();
        let out = x.scale(k);
        let s_shape = sv.shape().to_vec();
        self.tape().push_op(out, &[*self, *s], move |g, need| {
            vec![
                need[0].then(|| g.scale(k)),
                need[1].then(|| {
                    let d: f64 = g.data().iter().zip(x.data()).map(|(g, x)| g * x).sum();
                    Tensor::new(s_shape.clone(), vec![d])
                }),
            ]
        })
    }

    /// Adds a one-element `s` to every element.
    pub fn add_scalar_var(&self, s: &Var<'t>) -> Var<'t> {
        let (x, sv) = (self.value(), s.value());
        assert_eq!(sv.len(), 1, "add_scalar_var needs a one-element term");
        let k = sv.item();
        let out = x.map(|v| v + k);
        let s_shape = sv.shape().to_vec();
        self.tape().push_op(out, &[*self, *s], move |g, need| {
            vec![
                need[0].then(|| g.clone()),
                need[1].then(|| Tensor::new(s_shape.clone(), vec![g.sum()])),
            ]
        })
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.tape().push_op(out, &[*self], move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.item()))]
        })
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over the last axis: `[.., m] -> [..]`.
    pub fn sum_last_axis(&self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(!shape.is_empty(), "sum_last_axis on a scalar");
        let m = *shape.last().unwrap();
        let out_shape = shape[..shape.len() - 1].to_vec();
        let data: Vec<f64> = x.data().chunks(m).map(|c| c.iter().sum()).collect();
        let out = Tensor::new(out_shape, data);
        self.tape().push_op(out, &[*self], move |g, _| {
            let data = g
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v, m))
                .collect();
            vec![Some(Tensor::new(shape.clone(), data))]
        })
    }

    // ---- shape ---------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshape(shape.to_vec());
        self.tape().push_op(out, &[*self], move |g, _| {
            vec![Some(g.clone().reshape(old.clone()))]
        })
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn narrow(&self, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = x.narrow(start, len);
        self.tape().push_op(out, &[*self], move |g, _| {
            let inner: usize = shape[1..].iter().product();
            let mut full = Tensor::zeros(shape.clone());
            full.data_mut()[start * inner..(start + len) * inner].copy_from_slice(g.data());
            vec![Some(full)]
        })
    }

    /// Row `i` of the leading axis with that axis removed.
    pub fn row(&self, i: usize) -> Var<'t> {
        let shape = self.shape();
        self.narrow(i, 1).reshape(&shape[1..])
    }

    /// Concatenation along the leading axis.
    pub fn concat(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat(&refs);
        let rows: Vec<usize> = values.iter().map(|v| v.shape()[0]).collect();
        parts[0].tape().push_op(out, parts, move |g, need| {
            let mut start = 0;
            rows.iter()
                .zip(need)
                .map(|(&r, &n)| {
                    let piece = n.then(|| g.narrow(start, r));
                    start += r;
                    piece
                })
                .collect()
        })
    }

    /// Stacks equally shaped values along a new leading axis.
    pub fn stack(parts: &[Var<'t>]) -> Var<'t> {
        let inner = parts[0].shape();
        let mut row_shape = vec![1];
        row_shape.extend_from_slice(&inner);
        let rows: Vec<Var<'t>> = parts.iter().map(|p| p.reshape(&row_shape)).collect();
        Var::concat(&rows)
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Var<'t> {
        let x = self.value();
        let out = permute_tensor(&x, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.tape().push_op(out, &[*self], move |g, _| {
            vec![Some(permute_tensor(g, &inverse))]
        })
    }

    // ---- linear algebra ------------------------------------------------

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert!(a.rank() == 2 && b.rank() == 2, "matmul needs matrices");
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        assert_eq!(k, b.shape()[0], "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(Mat::new(a.data(), m, k), Mat::new(b.data(), k, n), &mut out, 0.0);
        let out = Tensor::new([m, n], out);
        self.tape().push_op(out, &[*self, *other], move |g, need| {
            let gm = Mat::new(g.data(), m, n);
            vec![
                need[0].then(|| {
                    let mut da = vec![0.0; m * k];
                    gemm(gm, Mat::new(b.data(), k, n).t(), &mut da, 0.0);
                    Tensor::new([m, k], da)
                }),
                need[1].then(|| {
                    let mut db = vec![0.0; k * n];
                    gemm(Mat::new(a.data(), m, k).t(), gm, &mut db, 0.0);
                    Tensor::new([k, n], db)
                }),
            ]
        })
    }

    /// Affine map `x · wᵀ + b` with `w: [out, in]`, `b: [out]`.
    /// A rank-1 `x` is treated as a single row and the result is rank-1.
    pub fn linear(&self, weight: &Var<'t>, bias: &Var<'t>) -> Var<'t> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let vector_in = x.rank() == 1;
        let (rows, fan_in) = if vector_in {
            (1, x.shape()[0])
        } else {
            assert_eq!(x.rank(), 2, "linear input must be rank 1 or 2");
            (x.shape()[0], x.shape()[1])
        };
        assert_eq!(w.rank(), 2, "linear weight must be [out, in]");
        let fan_out = w.shape()[0];
        assert_eq!(w.shape()[1], fan_in, "linear fan-in mismatch");
        assert_eq!(b.shape(), &[fan_out], "linear bias shape mismatch");

        let mut out = Vec::with_capacity(rows * fan_out);
        for _ in 0..rows {
            out.extend_from_slice(b.data());
        }
        gemm(
            Mat::new(x.data(), rows, fan_in),
            Mat::new(w.data(), fan_out, fan_in).t(),
            &mut out,
            1.0,
        );
        let out = if vector_in {
            Tensor::new([fan_out], out)
        } else {
            Tensor::new([rows, fan_out], out)
        };
        let x_shape = x.shape().to_vec();
        self.tape()
            .push_op(out, &[*self, *weight, *bias], move |g, need| {
                let gm = Mat::new(g.data(), rows, fan_out);
                vec![
                    need[0].then(|| {
                        let mut dx = vec![0.0; rows * fan_in];
                        gemm(gm, Mat::new(w.data(), fan_out, fan_in), &mut dx, 0.0);
                        Tensor::new(x_shape.clone(), dx)
                    }),
                    need[1].then(|| {
                        let mut dw = vec![0.0; fan_out * fan_in];
                        gemm(gm.t(), Mat::new(x.data(), rows, fan_in), &mut dw, 0.0);
                        Tensor::new([fan_out, fan_in], dw)
                    }),
                    need[2].then(|| {
                        let mut db = vec![0.0; fan_out];
                        for r in g.data().chunks(fan_out) {
                            for (d, v) in db.iter_mut().zip(r) {
                                *d += v;
                            }
                        }
                        Tensor::new([fan_out], db)
                    }),
                ]
            })
    }

    /// Row-wise softmax of a `[n, m]` matrix.
    pub fn softmax_rows(&self) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.rank(), 2, "softmax_rows needs a matrix");
        let m = x.shape()[1];
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            out.extend(exps.into_iter().map(|e| e / z));
        }
        let out = Tensor::new(x.shape(), out);
        let y = Rc::new(out.clone());
        self.tape().push_op(out, &[*self], move |g, _| {
            let mut dx = Vec::with_capacity(g.len());
            for (gr, yr) in g.data().chunks(m).zip(y.data().chunks(m)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                dx.extend(gr.iter().zip(yr).map(|(g, y)| y * (g - dot)));
            }
            vec![Some(Tensor::new(g.shape(), dx))]
        })
    }
}

pub(crate) fn permute_tensor(x: &Tensor, perm: &[usize]) -> Tensor {
    let shape = x.shape();
    assert_eq!(perm.len(), shape.len(), "permutation rank mismatch");
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.len() {
        let offset: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(x.data()[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out)
}
