//! Spatial resampling ops and the residual block shared by the encoders,
//! generators and segmentation network.

use super::conv::{Conv2d, ConvSpec};
use super::norm::{instance_norm, Spade};
use crate::tensor::Tensor;
use crate::Scalar;
use rand_chacha::ChaCha8Rng;

/// Replicate every pixel into a 2×2 block. The gradient of each input pixel
/// sums its four output contributions.
pub fn upsample_nearest2x<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let shape = x.shape();
    assert!(shape.len() == 4, "upsample expects [b, c, h, w], got {shape:?}");
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![S::zero(); b * c * oh * ow];
    {
        let xd = x.data();
        for p in 0..b * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..h {
                for xx in 0..w {
                    let v = src[y * w + xx];
                    let o = 2 * y * ow + 2 * xx;
                    dst[o] = v;
                    dst[o + 1] = v;
                    dst[o + ow] = v;
                    dst[o + ow + 1] = v;
                }
            }
        }
    }
    let px = x.clone();
    Tensor::from_op(vec![b, c, oh, ow], out, &[x], move |g| {
        let mut d = vec![S::zero(); b * c * h * w];
        for p in 0..b * c {
            let gd = &g[p * oh * ow..(p + 1) * oh * ow];
            let dd = &mut d[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let o = 2 * y * ow + 2 * xx;
                    dd[y * w + xx] = gd[o] + gd[o + 1] + gd[o + ow] + gd[o + ow + 1];
                }
            }
        }
        px.accumulate_grad(&d);
    })
}

/// Nearest-neighbor resize to `(oh, ow)`; source index is `floor(o·in/out)`.
/// Nearest keeps class identity intact when the input is a score map.
pub fn resize_nearest<S: Scalar>(x: &Tensor<S>, oh: usize, ow: usize) -> Tensor<S> {
    let shape = x.shape();
    assert!(shape.len() == 4, "resize expects [b, c, h, w], got {shape:?}");
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if h == oh && w == ow {
        let px = x.clone();
        return Tensor::from_op(shape, x.to_vec(), &[x], move |g| px.accumulate_grad(g));
    }
    let ys: Vec<usize> = (0..oh).map(|y| y * h / oh).collect();
    let xs: Vec<usize> = (0..ow).map(|xx| xx * w / ow).collect();
    let mut out = vec![S::zero(); b * c * oh * ow];
    {
        let xd = x.data();
        for p in 0..b * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (oy, &iy) in ys.iter().enumerate() {
                let row = iy * w;
                for (ox, &ix) in xs.iter().enumerate() {
                    dst[oy * ow + ox] = src[row + ix];
                }
            }
        }
    }
    let px = x.clone();
    Tensor::from_op(vec![b, c, oh, ow], out, &[x], move |g| {
        let mut d = vec![S::zero(); b * c * h * w];
        for p in 0..b * c {
            let gd = &g[p * oh * ow..(p + 1) * oh * ow];
            let dd = &mut d[p * h * w..(p + 1) * h * w];
            for (oy, &iy) in ys.iter().enumerate() {
                let row = iy * w;
                for (ox, &ix) in xs.iter().enumerate() {
                    dd[row + ix] += gd[oy * ow + ox];
                }
            }
        }
        px.accumulate_grad(&d);
    })
}

/// 2×2 mean pooling (even spatial sizes), used to feed the lower
/// discriminator scales.
pub fn avg_pool2x<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let shape = x.shape();
    assert!(shape.len() == 4, "avg_pool expects [b, c, h, w], got {shape:?}");
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2x needs even spatial sizes, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let quarter = crate::sc::<S>(0.25);
    let mut out = vec![S::zero(); b * c * oh * ow];
    {
        let xd = x.data();
        for p in 0..b * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * ow + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
    }
    let px = x.clone();
    Tensor::from_op(vec![b, c, oh, ow], out, &[x], move |g| {
        let mut d = vec![S::zero(); b * c * h * w];
        for p in 0..b * c {
            let gd = &g[p * oh * ow..(p + 1) * oh * ow];
            let dd = &mut d[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let gv = gd[y * ow + xx] * quarter;
                    let i = 2 * y * w + 2 * xx;
                    dd[i] = gv;
                    dd[i + 1] = gv;
                    dd[i + w] = gv;
                    dd[i + w + 1] = gv;
                }
            }
        }
        px.accumulate_grad(&d);
    })
}

/// Which normalization a residual block applies before each convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockNorm {
    Instance,
    /// Instance statistics denormalized from the semantic guidance.
    Spade,
}

/// Pre-activation residual block: `x + conv(act(norm(conv(act(norm(x))))))`.
/// Channel count is preserved.
pub struct ResidualBlock<S: Scalar> {
    pub conv1: Conv2d<S>,
    pub conv2: Conv2d<S>,
    pub norm: BlockNorm,
    pub spade1: Option<Spade<S>>,
    pub spade2: Option<Spade<S>>,
    pub eps: f64,
}

impl<S: Scalar> ResidualBlock<S> {
    pub fn new(
        name: &str,
        channels: usize,
        norm: BlockNorm,
        guidance_channels: usize,
        spade_hidden: usize,
        spectral_norm: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let spec = ConvSpec::new(3, 1, channels, channels);
        let conv1 = Conv2d::new(&format!("{name}.conv1"), spec, spectral_norm, rng);
        let conv2 = Conv2d::new(&format!("{name}.conv2"), spec, spectral_norm, rng);
        let (spade1, spade2) = if norm == BlockNorm::Spade {
            (
                Some(Spade::new(
                    &format!("{name}.spade1"),
                    guidance_channels,
                    spade_hidden,
                    channels,
                    spectral_norm,
                    rng,
                )),
                Some(Spade::new(
                    &format!("{name}.spade2"),
                    guidance_channels,
                    spade_hidden,
                    channels,
                    spectral_norm,
                    rng,
                )),
            )
        } else {
            (None, None)
        };
        ResidualBlock {
            conv1,
            conv2,
            norm,
            spade1,
            spade2,
            eps: 1e-5,
        }
    }

    fn normed(&self, x: &Tensor<S>, which: usize, guidance: Option<&Tensor<S>>) -> Tensor<S> {
        match self.norm {
            BlockNorm::Instance => instance_norm(x, self.eps),
            BlockNorm::Spade => {
                let m = guidance.unwrap_or_else(|| {
                    panic!(
                        "residual block {}: semantic normalization requires a guidance map",
                        self.conv1.name
                    )
                });
                let spade = if which == 1 { &self.spade1 } else { &self.spade2 };
                spade.as_ref().unwrap().forward(x, m)
            }
        }
    }

    pub fn forward(&self, x: &Tensor<S>, guidance: Option<&Tensor<S>>) -> Tensor<S> {
        let h = self.conv1.forward(&self.normed(x, 1, guidance).relu());
        let h = self.conv2.forward(&self.normed(&h, 2, guidance).relu());
        x.add(&h)
    }

    pub fn params(&self, out: &mut Vec<(String, Tensor<S>)>) {
        self.conv1.params(out);
        self.conv2.params(out);
        if let Some(s) = &self.spade1 {
            s.params(out);
        }
        if let Some(s) = &self.spade2 {
            s.params(out);
        }
    }

    pub fn state(&self, out: &mut Vec<(String, Vec<S>)>) {
        self.conv1.state(out);
        self.conv2.state(out);
        if let Some(s) = &self.spade1 {
            s.state(out);
        }
        if let Some(s) = &self.spade2 {
            s.state(out);
        }
    }

    pub fn load_state(&self, name: &str, values: &[S]) -> bool {
        self.conv1.load_state(name, values)
            || self.conv2.load_state(name, values)
            || self.spade1.as_ref().is_some_and(|s| s.load_state(name, values))
            || self.spade2.as_ref().is_some_and(|s| s.load_state(name, values))
    }
}
