//! 2-D convolution as im2col plus matrix kernels.

use super::matmul::{matmul_abt_acc, matmul_acc, matmul_atb_acc};
use super::spectral::SpectralState;
use crate::tensor::Tensor;
use crate::{rng, Scalar};
use rand_chacha::ChaCha8Rng;

/// Shape contract of one convolution. Stride-1 layers preserve the spatial
/// size, stride-2 layers halve it (even inputs); padding is derived from the
/// kernel so that holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_size: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn new(kernel_size: usize, stride: usize, in_channels: usize, out_channels: usize) -> Self {
        assert!(
            kernel_size % 2 == 1 || kernel_size == 4,
            "kernel size must be odd or 4, got {kernel_size}"
        );
        assert!(stride == 1 || stride == 2, "stride must be 1 or 2, got {stride}");
        assert!(in_channels > 0 && out_channels > 0);
        ConvSpec {
            kernel_size,
            stride,
            in_channels,
            out_channels,
        }
    }

    /// Zero padding: (k−1)/2 for odd kernels, 1 for the 4×4 stride-2 case.
    pub fn padding(&self) -> usize {
        if self.kernel_size % 2 == 1 {
            (self.kernel_size - 1) / 2
        } else {
            1
        }
    }

    pub fn out_size(&self, input: usize) -> usize {
        (input + 2 * self.padding() - self.kernel_size) / self.stride + 1
    }
}

fn im2col<S: Scalar>(
    x: &[S],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    cols: &mut [S],
) {
    let n = h_out * w_out;
    let mut row = 0usize;
    for ci in 0..c_in {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * n..(row + 1) * n];
                row += 1;
                let mut idx = 0usize;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst[idx..idx + w_out].fill(S::zero());
                        idx += w_out;
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[idx] = if ix >= 0 && ix < w as isize {
                            plane[base + ix as usize]
                        } else {
                            S::zero()
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_acc<S: Scalar>(
    cols: &[S],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    dx: &mut [S],
) {
    let n = h_out * w_out;
    let mut row = 0usize;
    for ci in 0..c_in {
        let plane_off = ci * h * w;
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * n..(row + 1) * n];
                row += 1;
                let mut idx = 0usize;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        idx += w_out;
                        continue;
                    }
                    let base = plane_off + iy as usize * w;
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Convolve `x: [b, c_in, h, w]` with `weight: [c_out, c_in, k, k]` and a
/// per-channel `bias: [c_out]`. Differentiable w.r.t. all three inputs; the
/// backward rule skips work for inputs that do not take gradients.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Tensor<S> {
    let xs = x.shape();
    let ws = weight.shape();
    assert!(xs.len() == 4, "conv2d expects [b, c, h, w] input, got {xs:?}");
    assert!(ws.len() == 4, "conv2d expects [o, i, k, k] weights, got {ws:?}");
    let (b, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, wc_in, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
    assert!(k == k2, "conv2d kernels must be square, got {ws:?}");
    assert!(
        c_in == wc_in,
        "conv2d channel mismatch: input has {c_in} channels, weights expect {wc_in}"
    );
    assert_eq!(bias.shape(), vec![c_out], "conv2d bias must be [c_out]");

    let h_out = (h + 2 * pad - k) / stride + 1;
    let w_out = (w + 2 * pad - k) / stride + 1;
    let n = h_out * w_out;
    let kk = c_in * k * k;

    let mut cols_all = vec![S::zero(); b * kk * n];
    let mut out = vec![S::zero(); b * c_out * n];
    {
        let xd = x.data();
        let wd = weight.data();
        let bd = bias.data();
        for bi in 0..b {
            let cols = &mut cols_all[bi * kk * n..(bi + 1) * kk * n];
            im2col(
                &xd[bi * c_in * h * w..(bi + 1) * c_in * h * w],
                c_in,
                h,
                w,
                k,
                stride,
                pad,
                h_out,
                w_out,
                cols,
            );
            let ob = &mut out[bi * c_out * n..(bi + 1) * c_out * n];
            for co in 0..c_out {
                ob[co * n..(co + 1) * n].fill(bd[co]);
            }
            matmul_acc(ob, &wd, cols, c_out, kk, n);
        }
    }

    let (px, pw, pb) = (x.clone(), weight.clone(), bias.clone());
    Tensor::from_op(
        vec![b, c_out, h_out, w_out],
        out,
        &[x, weight, bias],
        move |g| {
            let want_dx = px.tracks();
            let want_dw = pw.tracks();
            let want_db = pb.tracks();
            if want_dw || want_db {
                let mut dw = vec![S::zero(); c_out * kk];
                let mut db = vec![S::zero(); c_out];
                for bi in 0..b {
                    let gb = &g[bi * c_out * n..(bi + 1) * c_out * n];
                    if want_dw {
                        let cols = &cols_all[bi * kk * n..(bi + 1) * kk * n];
                        matmul_abt_acc(&mut dw, gb, cols, c_out, n, kk);
                    }
                    for co in 0..c_out {
                        for &gv in &gb[co * n..(co + 1) * n] {
                            db[co] += gv;
                        }
                    }
                }
                if want_dw {
                    pw.accumulate_grad(&dw);
                }
                if want_db {
                    pb.accumulate_grad(&db);
                }
            }
            if want_dx {
                let wd = pw.data();
                let mut dx = vec![S::zero(); b * c_in * h * w];
                let mut dcols = vec![S::zero(); kk * n];
                for bi in 0..b {
                    dcols.fill(S::zero());
                    let gb = &g[bi * c_out * n..(bi + 1) * c_out * n];
                    matmul_atb_acc(&mut dcols, &wd, gb, c_out, kk, n);
                    col2im_acc(
                        &dcols,
                        c_in,
                        h,
                        w,
                        k,
                        stride,
                        pad,
                        h_out,
                        w_out,
                        &mut dx[bi * c_in * h * w..(bi + 1) * c_in * h * w],
                    );
                }
                drop(wd);
                px.accumulate_grad(&dx);
            }
        },
    )
}

/// Convolution layer: weights, bias and optional spectral normalization.
pub struct Conv2d<S: Scalar> {
    pub name: String,
    pub spec: ConvSpec,
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub spectral: Option<SpectralState<S>>,
}

impl<S: Scalar> Conv2d<S> {
    /// GAN-standard init: weights from N(0, 0.02), bias zero.
    pub fn new(name: &str, spec: ConvSpec, spectral_norm: bool, rng: &mut ChaCha8Rng) -> Self {
        let k = spec.kernel_size;
        let numel = spec.out_channels * spec.in_channels * k * k;
        let data: Vec<S> = (0..numel).map(|_| rng::normal(rng, 0.0, 0.02)).collect();
        let weight = Tensor::from_vec(&[spec.out_channels, spec.in_channels, k, k], data)
            .requiring_grad();
        let bias = Tensor::zeros(&[spec.out_channels]).requiring_grad();
        let spectral = spectral_norm.then(|| SpectralState::new(spec.out_channels, rng));
        Conv2d {
            name: name.to_string(),
            spec,
            weight,
            bias,
            spectral,
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        let xs = x.shape();
        assert!(
            xs.len() == 4 && xs[1] == self.spec.in_channels,
            "layer {}: expected {} input channels, got shape {xs:?}",
            self.name,
            self.spec.in_channels
        );
        let weight = match &self.spectral {
            Some(state) => state.normalize(&self.weight),
            None => self.weight.clone(),
        };
        conv2d(x, &weight, &self.bias, self.spec.stride, self.spec.padding())
    }

    pub fn set_bias_constant(&self, v: S) {
        let n = self.bias.numel();
        self.bias.set_data(&vec![v; n]);
    }

    pub fn params(&self, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{}.weight", self.name), self.weight.clone()));
        out.push((format!("{}.bias", self.name), self.bias.clone()));
    }

    /// Non-trained buffers that still belong in a checkpoint.
    pub fn state(&self, out: &mut Vec<(String, Vec<S>)>) {
        if let Some(s) = &self.spectral {
            out.push((format!("{}.sn_u", self.name), s.u_vec()));
        }
    }

    pub fn load_state(&self, name: &str, values: &[S]) -> bool {
        if let Some(s) = &self.spectral {
            if name == format!("{}.sn_u", self.name) {
                s.set_u(values);
                return true;
            }
        }
        false
    }
}
