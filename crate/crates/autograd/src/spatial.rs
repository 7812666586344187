//! Image-shaped operations on `[channels, height, width]` values.

use crate::gemm::{gemm, Mat};
use crate::{Tensor, Var};

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    /// Output side length for an input side `n` and kernel `k`.
    pub fn output_size(&self, n: usize, k: usize) -> usize {
        assert!(n + 2 * self.padding >= k, "kernel larger than padded input");
        (n + 2 * self.padding - k) / self.stride + 1
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    oh: usize,
    ow: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let Geometry {
            c,
            h,
            w,
            k,
            oh,
            ow,
            spec,
        } = *self;
        let p = oh * ow;
        let mut cols = vec![0.0; c * k * k * p];
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let Geometry {
            c,
            h,
            w,
            k,
            oh,
            ow,
            spec,
        } = *self;
        let p = oh * ow;
        let mut x = vec![0.0; c * h * w];
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..ow {
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                x[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

fn chw(t: &Tensor, op: &str) -> (usize, usize, usize) {
    assert_eq!(t.rank(), 3, "{op} needs a [c, h, w] value, got {:?}", t.shape());
    (t.shape()[0], t.shape()[1], t.shape()[2])
}

/// Interpolation matrix `[out, inp]` for half-pixel-centred bilinear
/// resampling along one axis, clamped at the borders.
fn bilinear_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        m[o * inp + i0] += 1.0 - frac;
        m[o * inp + i1] += frac;
    }
    m
}

impl<'t> Var<'t> {
    /// Cross-correlation of `[c, h, w]` with weights `[o, c, k, k]`.
    pub fn conv2d(&self, weight: &Var<'t>, spec: Conv2dSpec) -> Var<'t> {
        let (x, wt) = (self.value(), weight.value());
        let (c, h, w) = chw(&x, "conv2d");
        assert_eq!(wt.rank(), 4, "conv2d weight must be [o, c, k, k]");
        let (o, k) = (wt.shape()[0], wt.shape()[2]);
        assert_eq!(wt.shape()[1], c, "conv2d channel mismatch");
        assert_eq!(wt.shape()[3], k, "conv2d kernel must be square");
        let geo = Geometry {
            c,
            h,
            w,
            k,
            oh: spec.output_size(h, k),
            ow: spec.output_size(w, k),
            spec,
        };
        let p = geo.oh * geo.ow;
        let ckk = c * k * k;
        let cols = geo.im2col(x.data());
        let mut out = vec![0.0; o * p];
        gemm(Mat::new(wt.data(), o, ckk), Mat::new(&cols, ckk, p), &mut out, 0.0);
        let out = Tensor::new([o, geo.oh, geo.ow], out);
        let w_shape = wt.shape().to_vec();
        self.tape().push_op(out, &[*self, *weight], move |g, need| {
            let gm = Mat::new(g.data(), o, p);
            vec![
                need[0].then(|| {
                    let mut dcols = vec![0.0; ckk * p];
                    gemm(Mat::new(wt.data(), o, ckk).t(), gm, &mut dcols, 0.0);
                    Tensor::new([c, h, w], geo.col2im(&dcols))
                }),
                need[1].then(|| {
                    let cols = geo.im2col(x.data());
                    let mut dw = vec![0.0; o * ckk];
                    gemm(gm, Mat::new(&cols, ckk, p).t(), &mut dw, 0.0);
                    Tensor::new(w_shape.clone(), dw)
                }),
            ]
        })
    }

    /// Adds `b[c]` to every position of channel `c` (any trailing shape).
    pub fn add_channels(&self, b: &Var<'t>) -> Var<'t> {
        let (x, bv) = (self.value(), b.value());
        let c = x.shape()[0];
        assert_eq!(bv.shape(), &[c], "add_channels bias shape mismatch");
        let inner = x.len() / c;
        let mut out = (*x).clone();
        for (chunk, &bias) in out.data_mut().chunks_mut(inner).zip(bv.data()) {
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        self.tape().push_op(out, &[*self, *b], move |g, need| {
            vec![
                need[0].then(|| g.clone()),
                need[1].then(|| {
                    Tensor::new([c], g.data().chunks(inner).map(|r| r.iter().sum()).collect())
                }),
            ]
        })
    }

    /// Multiplies channel `c` by `s[c]` (any trailing shape).
    pub fn mul_channels(&self, s: &Var<'t>) -> Var<'t> {
        let (x, sv) = (self.value(), s.value());
        let c = x.shape()[0];
        assert_eq!(sv.shape(), &[c], "mul_channels scale shape mismatch");
        let inner = x.len() / c;
        let mut out = (*x).clone();
        for (chunk, &k) in out.data_mut().chunks_mut(inner).zip(sv.data()) {
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        self.tape().push_op(out, &[*self, *s], move |g, need| {
            vec![
                need[0].then(|| {
                    let mut dx = g.clone();
                    for (chunk, &k) in dx.data_mut().chunks_mut(inner).zip(sv.data()) {
                        chunk.iter_mut().for_each(|v| *v *= k);
                    }
                    dx
                }),
                need[1].then(|| {
                    let ds = g
                        .data()
                        .chunks(inner)
                        .zip(x.data().chunks(inner))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    Tensor::new([c], ds)
                }),
            ]
        })
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2x(&self) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = chw(&x, "upsample2x");
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ci * oh + y) * ow + xx] = x.data()[(ci * h + y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new([c, oh, ow], out);
        self.tape().push_op(out, &[*self], move |g, _| {
            let mut dx = vec![0.0; c * h * w];
            for ci in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        dx[(ci * h + y / 2) * w + xx / 2] += g.data()[(ci * oh + y) * ow + xx];
                    }
                }
            }
            vec![Some(Tensor::new([c, h, w], dx))]
        })
    }

    /// Non-overlapping `k × k` average pooling.
    pub fn avg_pool(&self, k: usize) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = chw(&x, "avg_pool");
        assert!(h % k == 0 && w % k == 0, "avg_pool needs divisible sides");
        let (oh, ow) = (h / k, w / k);
        let norm = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[(ci * oh + y / k) * ow + xx / k] += x.data()[(ci * h + y) * w + xx] * norm;
                }
            }
        }
        let out = Tensor::new([c, oh, ow], out);
        self.tape().push_op(out, &[*self], move |g, _| {
            let mut dx = vec![0.0; c * h * w];
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        dx[(ci * h + y) * w + xx] = g.data()[(ci * oh + y / k) * ow + xx / k] * norm;
                    }
                }
            }
            vec![Some(Tensor::new([c, h, w], dx))]
        })
    }

    /// Mean over the spatial axes: `[c, h, w] -> [c]`.
    pub fn global_avg_pool(&self) -> Var<'t> {
        let shape = self.shape();
        assert_eq!(shape.len(), 3, "global_avg_pool needs [c, h, w]");
        let hw = (shape[1] * shape[2]) as f64;
        self.reshape(&[shape[0], shape[1] * shape[2]])
            .sum_last_axis()
            .scale(1.0 / hw)
    }

    /// Bilinear resampling to `out_h × out_w` (half-pixel centres, no
    /// antialiasing). Returns `self` unchanged when the size already matches.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = chw(&x, "resize_bilinear");
        if (h, w) == (out_h, out_w) {
            return *self;
        }
        let ry = bilinear_matrix(out_h, h);
        let rx = bilinear_matrix(out_w, w);
        let mut out = vec![0.0; c * out_h * out_w];
        let mut tmp = vec![0.0; out_h * w];
        for ci in 0..c {
            let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
            gemm(Mat::new(&ry, out_h, h), Mat::new(plane, h, w), &mut tmp, 0.0);
            gemm(
                Mat::new(&tmp, out_h, w),
                Mat::new(&rx, out_w, w).t(),
                &mut out[ci * out_h * out_w..(ci + 1) * out_h * out_w],
                0.0,
            );
        }
        let out = Tensor::new([c, out_h, out_w], out);
        self.tape().push_op(out, &[*self], move |g, _| {
            let mut dx = vec![0.0; c * h * w];
            let mut tmp = vec![0.0; h * out_w];
            for ci in 0..c {
                let gp = &g.data()[ci * out_h * out_w..(ci + 1) * out_h * out_w];
                gemm(Mat::new(&ry, out_h, h).t(), Mat::new(gp, out_h, out_w), &mut tmp, 0.0);
                gemm(
                    Mat::new(&tmp, h, out_w),
                    Mat::new(&rx, out_w, w),
                    &mut dx[ci * h * w..(ci + 1) * h * w],
                    0.0,
                );
            }
            vec![Some(Tensor::new([c, h, w], dx))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn conv_identity_kernel() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 2, 2], vec![1., 2., 3., 4.]));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.constant(Tensor::new([1, 1, 3, 3], k));
        let y = x.conv2d(&w, Conv2dSpec::new(1, 1));
        assert_eq!(y.value().data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn strided_conv_output_size() {
        assert_eq!(Conv2dSpec::new(2, 1).output_size(16, 3), 8);
        assert_eq!(Conv2dSpec::new(2, 1).output_size(2, 3), 1);
        assert_eq!(Conv2dSpec::new(1, 0).output_size(4, 1), 4);
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (o, i) in [(7, 3), (3, 7), (112, 32), (1, 5)] {
            let m = bilinear_matrix(o, i);
            for r in m.chunks(i) {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_same_size_is_identity() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 2, 2], vec![1., 2., 3., 4.]));
        let y = x.resize_bilinear(2, 2);
        assert_eq!(y.id(), x.id());
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([2, 2, 2], (0..8).map(f64::from).collect()));
        let y = x.upsample2x().avg_pool(2);
        assert_eq!(*y.value(), *x.value());
    }
}
