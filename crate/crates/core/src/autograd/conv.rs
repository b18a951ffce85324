//! 2-D convolution and transposed convolution via im2col + GEMM.

use super::Var;
use crate::tensor::Tensor;

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

pub fn conv_transpose_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

#[derive(Clone, Copy)]
struct Geometry {
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], g: Geometry) -> Vec<f64> {
    let (rows, ncol) = (g.rows(), g.cols());
    let mut out = vec![0.0; rows * ncol];
    for c in 0..g.channels {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut out[row * ncol..(row + 1) * ncol];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..(c * g.h + ii as usize + 1) * g.w];
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[oi * g.wo + oj] = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im(cols: &[f64], g: Geometry) -> Vec<f64> {
    let ncol = g.cols();
    let mut out = vec![0.0; g.channels * g.h * g.w];
    for c in 0..g.channels {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + ii as usize) * g.w;
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            out[base + jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `C (m×n) = op(A) · op(B)` with row-major storage; `ta`/`tb` mean the
/// operand is stored transposed (`k×m` / `n×k`).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices have exactly the extents described by (m, k, n) and the strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad(g: &Tensor, channels: usize, plane: usize) -> Tensor {
    Tensor::from_parts(
        vec![channels],
        g.data().chunks(plane).map(|c| c.iter().sum()).collect(),
    )
}

impl<'g> Var<'g> {
    /// Cross-correlation of `self: [C, H, W]` with `weight: [O, C, k, k]`.
    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, stride: usize, pad: usize) -> Var<'g> {
        let x = self.value();
        let w = weight.value();
        let (c, h, wd) = x.dims3();
        let ws = w.shape();
        assert_eq!(ws.len(), 4, "conv weight must be [O, C, k, k]");
        assert_eq!(ws[1], c, "conv weight expects {} input channels, got {}", ws[1], c);
        let (o, k) = (ws[0], ws[2]);
        let geo = Geometry {
            channels: c,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho: conv_out_size(h, k, stride, pad),
            wo: conv_out_size(wd, k, stride, pad),
        };
        let cols = std::rc::Rc::new(im2col(x.data(), geo));
        let (rows, l) = (geo.rows(), geo.cols());
        let mut out = vec![0.0; o * l];
        gemm(o, rows, l, w.data(), false, &cols, false, &mut out);
        let bias_val = bias.map(|b| b.value());
        if let Some(b) = &bias_val {
            add_bias(&mut out, b.data(), l);
        }
        let y = Tensor::from_parts(vec![o, geo.ho, geo.wo], out);
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph.op(y, &parents, move |g, mask| {
            let gd = g.data();
            let dx = mask[0].then(|| {
                let mut dcols = vec![0.0; rows * l];
                gemm(rows, o, l, w.data(), true, gd, false, &mut dcols);
                Tensor::from_parts(vec![c, h, wd], col2im(&dcols, geo))
            });
            let dw = mask[1].then(|| {
                let mut d = vec![0.0; o * rows];
                gemm(o, l, rows, gd, false, &cols, true, &mut d);
                Tensor::from_parts(vec![o, c, k, k], d)
            });
            let mut res = vec![dx, dw];
            if mask.len() > 2 {
                res.push(mask[2].then(|| bias_grad(g, o, l)));
            }
            res
        })
    }

    /// Transposed convolution of `self: [Cin, H, W]` with `weight: [Cin, Cout, k, k]`,
    /// the adjoint of [`Var::conv2d`] with the same stride and padding.
    pub fn conv_transpose2d(
        self,
        weight: Var<'g>,
        bias: Option<Var<'g>>,
        stride: usize,
        pad: usize,
    ) -> Var<'g> {
        let x = self.value();
        let w = weight.value();
        let (cin, h, wd) = x.dims3();
        let ws = w.shape();
        assert_eq!(ws.len(), 4, "conv-transpose weight must be [Cin, Cout, k, k]");
        assert_eq!(ws[0], cin, "conv-transpose weight expects {} input channels, got {}", ws[0], cin);
        let (cout, k) = (ws[1], ws[2]);
        let geo = Geometry {
            channels: cout,
            h: conv_transpose_out_size(h, k, stride, pad),
            w: conv_transpose_out_size(wd, k, stride, pad),
            k,
            stride,
            pad,
            ho: h,
            wo: wd,
        };
        let (rows, l) = (geo.rows(), geo.cols());
        let mut cols = vec![0.0; rows * l];
        gemm(rows, cin, l, w.data(), true, x.data(), false, &mut cols);
        let mut out = col2im(&cols, geo);
        let plane = geo.h * geo.w;
        if let Some(b) = bias.map(|b| b.value()) {
            add_bias(&mut out, b.data(), plane);
        }
        let y = Tensor::from_parts(vec![cout, geo.h, geo.w], out);
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph.op(y, &parents, move |g, mask| {
            let gcols = im2col(g.data(), geo);
            let dx = mask[0].then(|| {
                let mut d = vec![0.0; cin * l];
                gemm(cin, rows, l, w.data(), false, &gcols, false, &mut d);
                Tensor::from_parts(vec![cin, h, wd], d)
            });
            let dw = mask[1].then(|| {
                let mut d = vec![0.0; cin * rows];
                gemm(cin, l, rows, x.data(), false, &gcols, true, &mut d);
                Tensor::from_parts(vec![cin, cout, k, k], d)
            });
            let mut res = vec![dx, dw];
            if mask.len() > 2 {
                res.push(mask[2].then(|| bias_grad(g, cout, plane)));
            }
            res
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{max_relative_error, numeric_gradient, Graph};
    use super::*;

    fn sample(shape: &[usize], salt: usize) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n)
                .map(|i| (((i + salt) * 2654435761 % 1000) as f64 / 500.0) - 1.0)
                .collect(),
        )
        .unwrap()
    }

    /// Direct nested-loop convolution used as an oracle.
    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (c, h, wd) = x.dims3();
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let (ho, wo) = (conv_out_size(h, k, stride, pad), conv_out_size(wd, k, stride, pad));
        let mut out = Tensor::zeros(&[o, ho, wo]);
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ii = (i * stride + ki) as isize - pad as isize;
                                let jj = (j * stride + kj) as isize - pad as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                                    acc += x.data()[(ic * h + ii as usize) * wd + jj as usize]
                                        * w.data()[((oc * c + ic) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                    out.data_mut()[(oc * ho + i) * wo + j] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0), (2, 0)] {
            let x = sample(&[3, 7, 6], 1);
            let w = sample(&[4, 3, 3, 3], 2);
            let g = Graph::new();
            let y = g.constant(x.clone()).conv2d(g.constant(w.clone()), None, stride, pad);
            let expect = naive_conv(&x, &w, stride, pad);
            assert_eq!(y.shape(), expect.shape());
            for (a, b) in y.value().data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(u), v> == <u, conv_t(v)> for the same weight.
        let u = sample(&[2, 8, 8], 3);
        let w_t = sample(&[3, 2, 4, 4], 4); // conv_t weight [Cin=3, Cout=2]
        let v = sample(&[3, 4, 4], 5);
        let g = Graph::new();
        let wt = g.constant(w_t.clone());
        let ct = g.constant(v.clone()).conv_transpose2d(wt, None, 2, 1);
        assert_eq!(ct.shape(), vec![2, 8, 8]);
        let conv = g.constant(u.clone()).conv2d(wt, None, 2, 1);
        let lhs: f64 = conv.value().data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.data().iter().zip(ct.value().data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_gradients() {
        let x = sample(&[2, 5, 5], 6);
        let w = sample(&[3, 2, 3, 3], 7);
        let b = sample(&[3], 8);
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor, transpose: bool| {
            let g = Graph::new();
            let (xv, wv, bv) = (g.leaf(x.clone()), g.leaf(w.clone()), g.leaf(b.clone()));
            let y = if transpose {
                xv.conv_transpose2d(wv, Some(bv), 2, 1)
            } else {
                xv.conv2d(wv, Some(bv), 2, 1)
            };
            let out = y.square().sum();
            let grads = g.backward(out);
            (
                out.item(),
                grads.get_or_zeros(xv),
                grads.get_or_zeros(wv),
                grads.get_or_zeros(bv),
            )
        };
        for transpose in [false, true] {
            let w = if transpose { sample(&[2, 3, 4, 4], 9) } else { w.clone() };
            let (_, dx, dw, db) = loss(&x, &w, &b, transpose);
            let nx = numeric_gradient(|t| loss(t, &w, &b, transpose).0, &x, 1e-5);
            let nw = numeric_gradient(|t| loss(&x, t, &b, transpose).0, &w, 1e-5);
            let nb = numeric_gradient(|t| loss(&x, &w, t, transpose).0, &b, 1e-5);
            assert!(max_relative_error(&dx, &nx, 1e-6) < 1e-6);
            assert!(max_relative_error(&dw, &nw, 1e-6) < 1e-6);
            assert!(max_relative_error(&db, &nb, 1e-6) < 1e-6);
        }
    }
}
