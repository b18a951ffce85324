use std::ops::{Add, Mul, Neg, Sub};

use super::Var;
use crate::tensor::Tensor;

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl<'g> Var<'g> {
    /// Elementwise op whose derivative is expressed through the input `x` and output `y`.
    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'g> {
        let x = self.value();
        let y = x.map(f);
        let yv = std::rc::Rc::new(y.clone());
        self.graph.op(y, &[self], move |g, _| {
            let d = Tensor::from_parts(
                g.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(x.data())
                    .zip(yv.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect(),
            );
            vec![Some(d)]
        })
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn silu(self) -> Var<'g> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn scale(self, k: f64) -> Var<'g> {
        self.unary(move |x| k * x, move |_, _| k)
    }

    pub fn add_scalar(self, k: f64) -> Var<'g> {
        self.unary(move |x| x + k, |_, _| 1.0)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    fn binary(
        self,
        other: Var<'g>,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        assert_eq!(
            a.shape(),
            b.shape(),
            "elementwise op on mismatched shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        let y = a.zip_map(&b, f);
        self.graph.op(y, &[self, other], move |g, mask| {
            let grad = |d: &dyn Fn(f64, f64) -> f64| {
                Tensor::from_parts(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(a.data().iter().zip(b.data()))
                        .map(|(&g, (&a, &b))| g * d(a, b))
                        .collect(),
                )
            };
            vec![
                mask[0].then(|| grad(&da)),
                mask[1].then(|| grad(&db)),
            ]
        })
    }

    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.graph.op(Tensor::scalar(x.sum()), &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Maximum over all elements. Ties go to the first index.
    pub fn max(self) -> Var<'g> {
        let x = self.value();
        let (arg, &m) = x
            .data()
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        let shape = x.shape().to_vec();
        self.graph.op(Tensor::scalar(m), &[self], move |g, _| {
            let mut d = Tensor::zeros(&shape);
            d.data_mut()[arg] = g.item();
            vec![Some(d)]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = (*x).clone().reshaped(shape).expect("reshape");
        self.graph.op(y, &[self], move |g, _| {
            vec![Some(g.clone().reshaped(&old).expect("reshape back"))]
        })
    }

    /// Channels `start..end` of a `[C, H, W]` tensor.
    pub fn slice_channels(self, start: usize, end: usize) -> Var<'g> {
        let x = self.value();
        let (c, h, w) = x.dims3();
        assert!(start < end && end <= c, "channel slice {start}..{end} of {c}");
        let plane = h * w;
        let y = Tensor::from_parts(
            vec![end - start, h, w],
            x.data()[start * plane..end * plane].to_vec(),
        );
        self.graph.op(y, &[self], move |g, _| {
            let mut d = Tensor::zeros(&[c, h, w]);
            d.data_mut()[start * plane..end * plane].copy_from_slice(g.data());
            vec![Some(d)]
        })
    }

    /// Softmax across the channel axis of a `[C, H, W]` tensor, per pixel.
    pub fn softmax_channels(self) -> Var<'g> {
        let x = self.value();
        let (c, h, w) = x.dims3();
        let plane = h * w;
        let mut y = Tensor::zeros(&[c, h, w]);
        {
            let xd = x.data();
            let yd = y.data_mut();
            for p in 0..plane {
                let m = (0..c).map(|k| xd[k * plane + p]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..c {
                    let e = (xd[k * plane + p] - m).exp();
                    yd[k * plane + p] = e;
                    z += e;
                }
                for k in 0..c {
                    yd[k * plane + p] /= z;
                }
            }
        }
        let yv = std::rc::Rc::new(y.clone());
        self.graph.op(y, &[self], move |g, _| {
            let mut d = Tensor::zeros(&[c, h, w]);
            let (gd, yd) = (g.data(), yv.data());
            let dd = d.data_mut();
            for p in 0..plane {
                let dot: f64 = (0..c).map(|k| gd[k * plane + p] * yd[k * plane + p]).sum();
                for k in 0..c {
                    dd[k * plane + p] = yd[k * plane + p] * (gd[k * plane + p] - dot);
                }
            }
            vec![Some(d)]
        })
    }

    /// Adds a per-channel bias `[C]` to a `[C, H, W]` tensor.
    pub fn add_channel_bias(self, bias: Var<'g>) -> Var<'g> {
        let x = self.value();
        let b = bias.value();
        let (c, h, w) = x.dims3();
        assert_eq!(b.shape(), [c], "channel bias shape");
        let plane = h * w;
        let mut y = (*x).clone();
        for (k, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
            let bk = b.data()[k];
            chunk.iter_mut().for_each(|v| *v += bk);
        }
        self.graph.op(y, &[self, bias], move |g, mask| {
            let db = mask[1].then(|| {
                Tensor::from_parts(vec![c], g.data().chunks(plane).map(|ch| ch.iter().sum()).collect())
            });
            vec![mask[0].then(|| g.clone()), db]
        })
    }

    /// `W x + b` for a vector `x: [n]`, `W: [m, n]`, `b: [m]`.
    pub fn linear(self, weight: Var<'g>, bias: Var<'g>) -> Var<'g> {
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        let n = x.len();
        let m = b.len();
        assert_eq!(w.shape(), [m, n], "linear weight shape");
        let y: Vec<f64> = (0..m)
            .map(|i| {
                b.data()[i]
                    + w.data()[i * n..(i + 1) * n]
                        .iter()
                        .zip(x.data())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect();
        self.graph
            .op(Tensor::from_parts(vec![m], y), &[self, weight, bias], move |g, mask| {
                let gd = g.data();
                let dx = mask[0].then(|| {
                    let mut d = vec![0.0; n];
                    for i in 0..m {
                        for (j, dj) in d.iter_mut().enumerate() {
                            *dj += w.data()[i * n + j] * gd[i];
                        }
                    }
                    Tensor::from_parts(x.shape().to_vec(), d)
                });
                let dw = mask[1].then(|| {
                    let mut d = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] = gd[i] * x.data()[j];
                        }
                    }
                    Tensor::from_parts(vec![m, n], d)
                });
                vec![dx, dw, mask[2].then(|| g.clone())]
            })
    }

    /// Non-overlapping `f × f` average pooling of a `[C, H, W]` tensor.
    pub fn avg_pool(self, f: usize) -> Var<'g> {
        if f == 1 {
            return self;
        }
        let x = self.value();
        let (c, h, w) = x.dims3();
        assert!(h % f == 0 && w % f == 0, "avg_pool factor {f} does not divide {h}x{w}");
        let (ho, wo) = (h / f, w / f);
        let inv = 1.0 / (f * f) as f64;
        let mut y = Tensor::zeros(&[c, ho, wo]);
        {
            let yd = y.data_mut();
            let xd = x.data();
            for k in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        yd[(k * ho + i / f) * wo + j / f] += xd[(k * h + i) * w + j] * inv;
                    }
                }
            }
        }
        self.graph.op(y, &[self], move |g, _| {
            let mut d = Tensor::zeros(&[c, h, w]);
            let dd = d.data_mut();
            let gd = g.data();
            for k in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        dd[(k * h + i) * w + j] = gd[(k * ho + i / f) * wo + j / f] * inv;
                    }
                }
            }
            vec![Some(d)]
        })
    }
}

impl<'g> Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }
}

impl<'g> Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }
}

impl<'g> Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, |a, b| a * b, |_, b| b, |a, _| a)
    }
}

impl<'g> Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{max_relative_error, numeric_gradient, Graph};
    use crate::tensor::Tensor;

    fn check(x: Tensor, f: impl for<'g> Fn(super::Var<'g>) -> super::Var<'g>) {
        let g = Graph::new();
        let v = g.leaf(x.clone());
        let out = f(v);
        let grads = g.backward(out);
        let analytic = grads.get_or_zeros(v);
        let numeric = numeric_gradient(
            |t| {
                let g = Graph::new();
                f(g.constant(t.clone())).item()
            },
            &x,
            1e-5,
        );
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-5, "relative error {err}");
    }

    fn sample(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|i| ((i * 7919 % 23) as f64 / 11.0) - 1.03).collect(),
        )
        .unwrap()
    }

    #[test]
    fn elementwise_gradients() {
        check(sample(&[2, 3, 3]), |v| v.sigmoid().sum());
        check(sample(&[2, 3, 3]), |v| v.tanh().square().mean());
        check(sample(&[2, 3, 3]), |v| v.silu().sum());
        check(sample(&[2, 3, 3]), |v| v.leaky_relu(0.1).exp().sum());
        check(sample(&[2, 3, 3]), |v| (v * v.sigmoid() - v.scale(0.3)).sum());
        check(sample(&[4]), |v| v.square().add_scalar(1.0).ln().sum());
    }

    #[test]
    fn structural_gradients() {
        check(sample(&[3, 2, 2]), |v| v.softmax_channels().slice_channels(1, 3).square().sum());
        check(sample(&[2, 4, 4]), |v| v.avg_pool(2).square().sum());
        check(sample(&[2, 2, 3]), |v| v.max());
        check(sample(&[2, 2, 3]), |v| v.reshape(&[12]).square().sum());
    }

    #[test]
    fn linear_and_bias_gradients() {
        let w = sample(&[3, 4]);
        let b = sample(&[3]);
        check(sample(&[4]), {
            let (w, b) = (w.clone(), b.clone());
            move |v| {
                let g = v.graph();
                v.linear(g.constant(w.clone()), g.constant(b.clone())).square().sum()
            }
        });
        let x = sample(&[4]);
        check(w.clone(), {
            let (x, b) = (x.clone(), b.clone());
            move |v| {
                let g = v.graph();
                g.constant(x.clone()).linear(v, g.constant(b.clone())).square().sum()
            }
        });
        let img = sample(&[3, 2, 2]);
        check(b, move |v| v.graph().constant(img.clone()).add_channel_bias(v).square().sum());
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        let g = Graph::new();
        let v = g.leaf(Tensor::scalar(3.0));
        let out = v * v + v;
        let grads = g.backward(out);
        assert_eq!(grads.get(v).unwrap().item(), 7.0);
    }
}
