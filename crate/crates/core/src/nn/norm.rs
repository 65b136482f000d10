//! Normalization layers: instance norm, layer norm with per-channel affine,
//! and the semantically adaptive denormalization that turns segmentation
//! scores into per-pixel scale and shift.

use super::blocks::resize_nearest;
use super::conv::{Conv2d, ConvSpec};
use crate::tensor::Tensor;
use crate::Scalar;
use rand_chacha::ChaCha8Rng;

/// Per-(sample, channel) normalization over the spatial axes,
/// `(x − μ) / sqrt(σ² + eps)` with biased σ².
pub fn instance_norm<S: Scalar>(x: &Tensor<S>, eps: f64) -> Tensor<S> {
    let shape = x.shape();
    assert!(shape.len() == 4, "instance_norm expects [b, c, h, w], got {shape:?}");
    assert!(shape[2] * shape[3] >= 2, "instance_norm needs at least 2 spatial elements");
    let mu = x.mean_axes(&[2, 3], true);
    let var = x.var_axes(&[2, 3], true);
    let denom = var.add_scalar(eps).pow_scalar(0.5);
    x.sub(&mu.broadcast_to(&shape)).div(&denom.broadcast_to(&shape))
}

/// Per-sample normalization over channels and space jointly, followed by a
/// learned per-channel affine.
pub struct LayerNorm<S: Scalar> {
    pub name: String,
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub eps: f64,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(name: &str, channels: usize) -> Self {
        LayerNorm {
            name: name.to_string(),
            gamma: Tensor::ones(&[channels]).requiring_grad(),
            beta: Tensor::zeros(&[channels]).requiring_grad(),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        let shape = x.shape();
        assert!(shape.len() == 4, "layer_norm expects [b, c, h, w], got {shape:?}");
        assert!(
            shape[1] * shape[2] * shape[3] >= 2,
            "layer_norm needs at least 2 elements per sample"
        );
        assert_eq!(shape[1], self.gamma.numel(), "layer {}: channel mismatch", self.name);
        let mu = x.mean_axes(&[1, 2, 3], true);
        let var = x.var_axes(&[1, 2, 3], true);
        let denom = var.add_scalar(self.eps).pow_scalar(0.5);
        let normed = x.sub(&mu.broadcast_to(&shape)).div(&denom.broadcast_to(&shape));
        let cshape = [1, shape[1], 1, 1];
        normed
            .mul(&self.gamma.reshape(&cshape).broadcast_to(&shape))
            .add(&self.beta.reshape(&cshape).broadcast_to(&shape))
    }

    pub fn params(&self, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{}.gamma", self.name), self.gamma.clone()));
        out.push((format!("{}.beta", self.name), self.beta.clone()));
    }
}

/// Semantically adaptive denormalization.
///
/// The guidance map (unnormalized class scores) is nearest-neighbor resized
/// to the activation size, run through a shared 3×3 convolution and ReLU,
/// and two 3×3 heads predict per-pixel γ and β. The activation is instance
/// normalized and denormalized as `γ · (x − μ)/σ + β`. The γ head's bias
/// starts at 1 so training begins at identity denormalization.
pub struct Spade<S: Scalar> {
    pub shared: Conv2d<S>,
    pub gamma_head: Conv2d<S>,
    pub beta_head: Conv2d<S>,
    pub eps: f64,
}

impl<S: Scalar> Spade<S> {
    pub fn new(
        name: &str,
        guidance_channels: usize,
        hidden: usize,
        channels: usize,
        spectral_norm: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let shared = Conv2d::new(
            &format!("{name}.shared"),
            ConvSpec::new(3, 1, guidance_channels, hidden),
            spectral_norm,
            rng,
        );
        let gamma_head = Conv2d::new(
            &format!("{name}.gamma"),
            ConvSpec::new(3, 1, hidden, channels),
            spectral_norm,
            rng,
        );
        let beta_head = Conv2d::new(
            &format!("{name}.beta"),
            ConvSpec::new(3, 1, hidden, channels),
            spectral_norm,
            rng,
        );
        gamma_head.set_bias_constant(S::one());
        Spade {
            shared,
            gamma_head,
            beta_head,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<S>, guidance: &Tensor<S>) -> Tensor<S> {
        let shape = x.shape();
        assert_eq!(
            self.gamma_head.spec.out_channels, shape[1],
            "layer {}: denormalization heads emit {} channels but activation has {}",
            self.gamma_head.name, self.gamma_head.spec.out_channels, shape[1]
        );
        let m = resize_nearest(guidance, shape[2], shape[3]);
        let hidden = self.shared.forward(&m).relu();
        let gamma = self.gamma_head.forward(&hidden);
        let beta = self.beta_head.forward(&hidden);
        instance_norm(x, self.eps).mul(&gamma).add(&beta)
    }

    pub fn params(&self, out: &mut Vec<(String, Tensor<S>)>) {
        self.shared.params(out);
        self.gamma_head.params(out);
        self.beta_head.params(out);
    }

    pub fn state(&self, out: &mut Vec<(String, Vec<S>)>) {
        self.shared.state(out);
        self.gamma_head.state(out);
        self.beta_head.state(out);
    }

    pub fn load_state(&self, name: &str, values: &[S]) -> bool {
        self.shared.load_state(name, values)
            || self.gamma_head.load_state(name, values)
            || self.beta_head.load_state(name, values)
    }
}
