//! Elementwise, reduction, activation and shape operations with their
//! backward rules. Binary operations require equal shapes; use
//! [`Tensor::broadcast_to`] after a keep-dims reduction to line ranks up.

use super::Tensor;
use crate::{sc, Scalar};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn check_same_shape(a: &[usize], b: &[usize], op: &str) {
    assert!(
        a == b,
        "shape mismatch in {op}: lhs {a:?} vs rhs {b:?} (shapes must be equal)"
    );
}

impl<S: Scalar> Tensor<S> {
    fn zip_op(
        &self,
        rhs: &Tensor<S>,
        name: &str,
        f: impl Fn(S, S) -> S,
        backward: impl Fn(&[S], &Tensor<S>, &Tensor<S>) + 'static,
    ) -> Tensor<S> {
        let shape = self.shape();
        check_same_shape(&shape, &rhs.shape(), name);
        let out: Vec<S> = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        let (pa, pb) = (self.clone(), rhs.clone());
        Tensor::from_op(shape, out, &[self, rhs], move |g| backward(g, &pa, &pb))
    }

    pub fn add(&self, rhs: &Tensor<S>) -> Tensor<S> {
        self.zip_op(rhs, "add", |a, b| a + b, |g, pa, pb| {
            pa.accumulate_grad(g);
            pb.accumulate_grad(g);
        })
    }

    pub fn sub(&self, rhs: &Tensor<S>) -> Tensor<S> {
        self.zip_op(rhs, "sub", |a, b| a - b, |g, pa, pb| {
            pa.accumulate_grad(g);
            let neg: Vec<S> = g.iter().map(|&v| -v).collect();
            pb.accumulate_grad(&neg);
        })
    }

    pub fn mul(&self, rhs: &Tensor<S>) -> Tensor<S> {
        self.zip_op(rhs, "mul", |a, b| a * b, |g, pa, pb| {
            if pa.tracks() {
                let b = pb.data();
                let da: Vec<S> = g.iter().zip(b.iter()).map(|(&g, &b)| g * b).collect();
                drop(b);
                pa.accumulate_grad(&da);
            }
            if pb.tracks() {
                let a = pa.data();
                let db: Vec<S> = g.iter().zip(a.iter()).map(|(&g, &a)| g * a).collect();
                drop(a);
                pb.accumulate_grad(&db);
            }
        })
    }

    pub fn div(&self, rhs: &Tensor<S>) -> Tensor<S> {
        {
            let b = rhs.data();
            assert!(
                b.iter().all(|&v| v != S::zero()),
                "division by zero: rhs of div contains a zero element"
            );
        }
        self.zip_op(rhs, "div", |a, b| a / b, |g, pa, pb| {
            if pa.tracks() {
                let b = pb.data();
                let da: Vec<S> = g.iter().zip(b.iter()).map(|(&g, &b)| g / b).collect();
                drop(b);
                pa.accumulate_grad(&da);
            }
            if pb.tracks() {
                let a = pa.data();
                let b = pb.data();
                let db: Vec<S> = g
                    .iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(&g, (&a, &b))| -g * a / (b * b))
                    .collect();
                drop(a);
                drop(b);
                pb.accumulate_grad(&db);
            }
        })
    }

    /// Elementwise `self ^ rhs`. The gradient w.r.t. the exponent uses
    /// `ln(base)` and therefore requires a strictly positive base when the
    /// exponent participates in the graph.
    pub fn pow(&self, rhs: &Tensor<S>) -> Tensor<S> {
        self.zip_op(rhs, "pow", |a, b| a.powf(b), |g, pa, pb| {
            if pa.tracks() {
                let a = pa.data();
                let b = pb.data();
                let da: Vec<S> = g
                    .iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(&g, (&a, &b))| g * b * a.powf(b - S::one()))
                    .collect();
                drop(a);
                drop(b);
                pa.accumulate_grad(&da);
            }
            if pb.tracks() {
                let a = pa.data();
                let b = pb.data();
                let db: Vec<S> = g
                    .iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(&g, (&a, &b))| g * a.powf(b) * a.ln())
                    .collect();
                drop(a);
                drop(b);
                pb.accumulate_grad(&db);
            }
        })
    }

    fn map_op(
        &self,
        f: impl Fn(S) -> S,
        backward: impl Fn(&[S], &Tensor<S>) + 'static,
    ) -> Tensor<S> {
        let out: Vec<S> = self.data().iter().map(|&x| f(x)).collect();
        let p = self.clone();
        Tensor::from_op(self.shape(), out, &[self], move |g| backward(g, &p))
    }

    pub fn add_scalar(&self, v: f64) -> Tensor<S> {
        let v = sc::<S>(v);
        self.map_op(|x| x + v, |g, p| p.accumulate_grad(g))
    }

    pub fn mul_scalar(&self, v: f64) -> Tensor<S> {
        let v = sc::<S>(v);
        self.map_op(
            move |x| x * v,
            move |g, p| {
                let d: Vec<S> = g.iter().map(|&g| g * v).collect();
                p.accumulate_grad(&d);
            },
        )
    }

    pub fn neg(&self) -> Tensor<S> {
        self.mul_scalar(-1.0)
    }

    pub fn pow_scalar(&self, e: f64) -> Tensor<S> {
        let e = sc::<S>(e);
        self.map_op(
            move |x| x.powf(e),
            move |g, p| {
                let a = p.data();
                let d: Vec<S> = g
                    .iter()
                    .zip(a.iter())
                    .map(|(&g, &a)| g * e * a.powf(e - S::one()))
                    .collect();
                drop(a);
                p.accumulate_grad(&d);
            },
        )
    }

    /// `max(x, v)` with pass-through gradient on the unclamped side.
    pub fn clamp_min(&self, v: f64) -> Tensor<S> {
        let v = sc::<S>(v);
        self.map_op(
            move |x| if x > v { x } else { v },
            move |g, p| {
                let a = p.data();
                let d: Vec<S> = g
                    .iter()
                    .zip(a.iter())
                    .map(|(&g, &a)| if a >= v { g } else { S::zero() })
                    .collect();
                drop(a);
                p.accumulate_grad(&d);
            },
        )
    }

    pub fn abs(&self) -> Tensor<S> {
        self.map_op(
            |x| x.abs(),
            |g, p| {
                let a = p.data();
                let d: Vec<S> = g
                    .iter()
                    .zip(a.iter())
                    .map(|(&g, &a)| {
                        if a > S::zero() {
                            g
                        } else if a < S::zero() {
                            -g
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                drop(a);
                p.accumulate_grad(&d);
            },
        )
    }

    pub fn exp(&self) -> Tensor<S> {
        let out: Vec<S> = self.data().iter().map(|&x| x.exp()).collect();
        let saved = out.clone();
        let p = self.clone();
        Tensor::from_op(self.shape(), out, &[self], move |g| {
            let d: Vec<S> = g.iter().zip(saved.iter()).map(|(&g, &y)| g * y).collect();
            p.accumulate_grad(&d);
        })
    }

    /// Natural logarithm. Inputs must be strictly positive; callers clamp
    /// with [`Tensor::clamp_min`] first where underflow is possible.
    pub fn ln(&self) -> Tensor<S> {
        {
            let a = self.data();
            if let Some(&bad) = a.iter().find(|&&v| v <= S::zero()) {
                panic!("log requires strictly positive inputs; got {bad}");
            }
        }
        self.map_op(
            |x| x.ln(),
            |g, p| {
                let a = p.data();
                let d: Vec<S> = g.iter().zip(a.iter()).map(|(&g, &a)| g / a).collect();
                drop(a);
                p.accumulate_grad(&d);
            },
        )
    }

    pub fn relu(&self) -> Tensor<S> {
        self.lrelu(0.0)
    }

    /// Leaky ReLU with slope `alpha` on the negative side.
    pub fn lrelu(&self, alpha: f64) -> Tensor<S> {
        let a = sc::<S>(alpha);
        self.map_op(
            move |x| if x > S::zero() { x } else { x * a },
            move |g, p| {
                let x = p.data();
                let d: Vec<S> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &x)| if x > S::zero() { g } else { g * a })
                    .collect();
                drop(x);
                p.accumulate_grad(&d);
            },
        )
    }

    pub fn tanh(&self) -> Tensor<S> {
        let out: Vec<S> = self.data().iter().map(|&x| x.tanh()).collect();
        let saved = out.clone();
        let p = self.clone();
        Tensor::from_op(self.shape(), out, &[self], move |g| {
            let d: Vec<S> = g
                .iter()
                .zip(saved.iter())
                .map(|(&g, &y)| g * (S::one() - y * y))
                .collect();
            p.accumulate_grad(&d);
        })
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        let out: Vec<S> = self
            .data()
            .iter()
            .map(|&x| S::one() / (S::one() + (-x).exp()))
            .collect();
        let saved = out.clone();
        let p = self.clone();
        Tensor::from_op(self.shape(), out, &[self], move |g| {
            let d: Vec<S> = g
                .iter()
                .zip(saved.iter())
                .map(|(&g, &y)| g * y * (S::one() - y))
                .collect();
            p.accumulate_grad(&d);
        })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Tensor<S> {
        let shape = self.shape();
        assert!(
            axis < shape.len(),
            "softmax axis {axis} out of range for shape {shape:?}"
        );
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = out[base];
                for j in 1..len {
                    mx = mx.max(out[base + j * inner]);
                }
                let mut sum = S::zero();
                for j in 0..len {
                    let e = (out[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let saved = out.clone();
        let p = self.clone();
        Tensor::from_op(shape, out, &[self], move |g| {
            let mut d = vec![S::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = S::zero();
                    for j in 0..len {
                        let k = base + j * inner;
                        dot += g[k] * saved[k];
                    }
                    for j in 0..len {
                        let k = base + j * inner;
                        d[k] = saved[k] * (g[k] - dot);
                    }
                }
            }
            p.accumulate_grad(&d);
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<S> {
        let numel: usize = shape.iter().product();
        assert!(
            numel == self.numel(),
            "reshape to {shape:?} ({numel} elements) from shape {:?} ({} elements)",
            self.shape(),
            self.numel()
        );
        let p = self.clone();
        Tensor::from_op(shape.to_vec(), self.to_vec(), &[self], move |g| {
            p.accumulate_grad(g);
        })
    }

    // ---- reductions ----

    fn reduce_prepare(&self, axes: &[usize], keepdim: bool) -> (Vec<usize>, Vec<bool>, usize) {
        let shape = self.shape();
        assert!(!axes.is_empty(), "reduction over an empty axis set");
        let mut mask = vec![false; shape.len()];
        for &ax in axes {
            assert!(
                ax < shape.len(),
                "reduction axis {ax} out of range for shape {shape:?}"
            );
            mask[ax] = true;
        }
        let count: usize = shape
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(&d, _)| d)
            .product();
        assert!(count > 0, "reduction over zero elements");
        let out_shape: Vec<usize> = if keepdim {
            shape
                .iter()
                .zip(&mask)
                .map(|(&d, &m)| if m { 1 } else { d })
                .collect()
        } else {
            shape
                .iter()
                .zip(&mask)
                .filter(|(_, &m)| !m)
                .map(|(&d, _)| d)
                .collect()
        };
        (out_shape, mask, count)
    }

    /// Map every flat input index to its flat output index for a reduction.
    fn reduce_index_map(shape: &[usize], mask: &[bool], keepdim: bool) -> Vec<usize> {
        let in_strides = strides(shape);
        let out_shape: Vec<usize> = if keepdim {
            shape
                .iter()
                .zip(mask)
                .map(|(&d, &m)| if m { 1 } else { d })
                .collect()
        } else {
            shape
                .iter()
                .zip(mask)
                .filter(|(_, &m)| !m)
                .map(|(&d, _)| d)
                .collect()
        };
        let out_strides = strides(&out_shape);
        let numel: usize = shape.iter().product();
        let mut map = vec![0usize; numel];
        for (i, slot) in map.iter_mut().enumerate() {
            let mut rem = i;
            let mut o = 0usize;
            let mut oax = 0usize;
            for (ax, &st) in in_strides.iter().enumerate() {
                let idx = rem / st;
                rem %= st;
                if mask[ax] {
                    continue;
                }
                if keepdim {
                    o += idx * out_strides[ax];
                } else {
                    o += idx * out_strides[oax];
                    oax += 1;
                }
            }
            *slot = o;
        }
        map
    }

    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Tensor<S> {
        let (out_shape, mask, _) = self.reduce_prepare(axes, keepdim);
        let map = Self::reduce_index_map(&self.shape(), &mask, keepdim);
        let numel_out: usize = out_shape.iter().product();
        let mut out = vec![S::zero(); numel_out.max(1)];
        {
            let x = self.data();
            for (i, &v) in x.iter().enumerate() {
                out[map[i]] += v;
            }
        }
        let p = self.clone();
        let map_b = map.clone();
        Tensor::from_op(out_shape, out, &[self], move |g| {
            let d: Vec<S> = map_b.iter().map(|&o| g[o]).collect();
            p.accumulate_grad(&d);
        })
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Tensor<S> {
        let (_, _, count) = self.reduce_prepare(axes, keepdim);
        self.sum_axes(axes, keepdim).mul_scalar(1.0 / count as f64)
    }

    /// Biased variance (divide by N) over `axes`, matching instance
    /// statistics used by the normalization layers.
    pub fn var_axes(&self, axes: &[usize], keepdim: bool) -> Tensor<S> {
        let mean = self.mean_axes(axes, true);
        let shape = self.shape();
        let centered = self.sub(&mean.broadcast_to(&shape));
        let sq = centered.mul(&centered);
        sq.mean_axes(axes, keepdim)
    }

    pub fn sum_all(&self) -> Tensor<S> {
        let total: S = self.data().iter().copied().fold(S::zero(), |a, b| a + b);
        let n = self.numel();
        let p = self.clone();
        Tensor::from_op(vec![], vec![total], &[self], move |g| {
            let d = vec![g[0]; n];
            p.accumulate_grad(&d);
        })
    }

    pub fn mean_all(&self) -> Tensor<S> {
        let n = self.numel();
        assert!(n > 0, "mean of an empty tensor");
        self.sum_all().mul_scalar(1.0 / n as f64)
    }

    /// Expand size-1 axes to `target` (same rank). Gradient sums the
    /// replicated contributions back.
    pub fn broadcast_to(&self, target: &[usize]) -> Tensor<S> {
        let shape = self.shape();
        assert!(
            shape.len() == target.len(),
            "broadcast_to requires equal rank: {shape:?} vs {target:?}"
        );
        for (ax, (&s, &t)) in shape.iter().zip(target).enumerate() {
            assert!(
                s == t || s == 1,
                "cannot broadcast {shape:?} to {target:?}: axis {ax} ({s} vs {t})"
            );
        }
        if shape == target {
            // No-op broadcast still records so gradients flow.
            let p = self.clone();
            return Tensor::from_op(shape, self.to_vec(), &[self], move |g| {
                p.accumulate_grad(g);
            });
        }
        let in_strides = strides(&shape);
        let out_strides = strides(target);
        let numel_out: usize = target.iter().product();
        let rank = shape.len();
        let src_of = {
            let shape = shape.clone();
            let target = target.to_vec();
            move |o: usize| -> usize {
                let mut rem = o;
                let mut src = 0usize;
                for ax in 0..rank {
                    let idx = rem / out_strides[ax];
                    rem %= out_strides[ax];
                    if shape[ax] == target[ax] {
                        src += idx * in_strides[ax];
                    }
                }
                src
            }
        };
        let mut out = vec![S::zero(); numel_out];
        {
            let x = self.data();
            for (o, slot) in out.iter_mut().enumerate() {
                *slot = x[src_of(o)];
            }
        }
        let p = self.clone();
        let n_in = self.numel();
        Tensor::from_op(target.to_vec(), out, &[self], move |g| {
            let mut d = vec![S::zero(); n_in];
            for (o, &gv) in g.iter().enumerate() {
                d[src_of(o)] += gv;
            }
            p.accumulate_grad(&d);
        })
    }

    /// Spatial crop of a `[b, c, h, w]` tensor.
    pub fn crop2d(&self, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<S> {
        let shape = self.shape();
        assert!(shape.len() == 4, "crop2d expects [b, c, h, w], got {shape:?}");
        let (b, c, ih, iw) = (shape[0], shape[1], shape[2], shape[3]);
        assert!(
            y0 + h <= ih && x0 + w <= iw,
            "crop ({y0},{x0})+({h},{w}) exceeds spatial size ({ih},{iw})"
        );
        let mut out = vec![S::zero(); b * c * h * w];
        {
            let x = self.data();
            let mut o = 0usize;
            for bi in 0..b {
                for ci in 0..c {
                    let plane = (bi * c + ci) * ih * iw;
                    for y in 0..h {
                        let row = plane + (y0 + y) * iw + x0;
                        out[o..o + w].copy_from_slice(&x[row..row + w]);
                        o += w;
                    }
                }
            }
        }
        let p = self.clone();
        let n_in = self.numel();
        Tensor::from_op(vec![b, c, h, w], out, &[self], move |g| {
            let mut d = vec![S::zero(); n_in];
            let mut o = 0usize;
            for bi in 0..b {
                for ci in 0..c {
                    let plane = (bi * c + ci) * ih * iw;
                    for y in 0..h {
                        let row = plane + (y0 + y) * iw + x0;
                        d[row..row + w].copy_from_slice(&g[o..o + w]);
                        o += w;
                    }
                }
            }
            p.accumulate_grad(&d);
        })
    }
}
