//! The concrete networks: domain encoders, semantically guided generators,
//! multi-scale patch discriminators, the segmentation network and the
//! output-space discriminator, plus the bundle that owns them all.

use crate::nn::{
    avg_pool2x, instance_norm, upsample_nearest2x, BlockNorm, Conv2d, ConvSpec, LayerNorm,
    ResidualBlock,
};
use crate::tensor::Tensor;
use crate::{rng, Scalar};
use rand_chacha::ChaCha8Rng;

/// Unnormalized per-pixel class scores `[b, K, H, W]` produced by the
/// segmentation network; the guidance signal for the generators.
pub type SemanticMap<S> = Tensor<S>;

const NORM_EPS: f64 = 1e-5;

/// Architecture hyper-parameters shared by every network in a bundle.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Base channel width `w`; all layer widths are multiples of it.
    pub width: usize,
    /// Number of semantic classes `K`.
    pub classes: usize,
    /// Square training resolution.
    pub image_size: usize,
    /// Generator normalization: semantic denormalization on, or plain
    /// instance norm (the ablation's "SPADE off" arm).
    pub use_spade: bool,
}

impl ModelConfig {
    pub fn new(width: usize, classes: usize, image_size: usize) -> Self {
        ModelConfig {
            width,
            classes,
            image_size,
            use_spade: true,
        }
    }

    /// Hidden width of the denormalization trunk, scaled with `width`.
    pub fn spade_hidden(&self) -> usize {
        self.width.max(4)
    }

    /// Discriminator pyramid depth: every scale needs at least 16 px after
    /// its downsampling, so small toy resolutions drop the coarsest scales.
    pub fn discriminator_scales(&self) -> usize {
        let mut scales = 0usize;
        let mut size = self.image_size;
        while scales < 3 && size >= 16 {
            scales += 1;
            size /= 2;
        }
        assert!(
            scales > 0,
            "image size {} too small for any discriminator scale",
            self.image_size
        );
        scales
    }
}

/// Domain encoder: 7×7 stem, two stride-2 downsamplers, four residual
/// blocks; instance norm, ReLU and spectral normalization throughout.
/// Maps `[b, 3, H, W]` to a latent `[b, 4w, H/4, W/4]`.
pub struct Encoder<S: Scalar> {
    stem: Conv2d<S>,
    down1: Conv2d<S>,
    down2: Conv2d<S>,
    blocks: Vec<ResidualBlock<S>>,
}

impl<S: Scalar> Encoder<S> {
    pub fn new(name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = cfg.width;
        let stem = Conv2d::new(&format!("{name}.stem"), ConvSpec::new(7, 1, 3, w), true, rng);
        let down1 = Conv2d::new(&format!("{name}.down1"), ConvSpec::new(4, 2, w, 2 * w), true, rng);
        let down2 =
            Conv2d::new(&format!("{name}.down2"), ConvSpec::new(4, 2, 2 * w, 4 * w), true, rng);
        let blocks = (0..4)
            .map(|i| {
                ResidualBlock::new(
                    &format!("{name}.block{i}"),
                    4 * w,
                    BlockNorm::Instance,
                    cfg.classes,
                    cfg.spade_hidden(),
                    true,
                    rng,
                )
            })
            .collect();
        Encoder {
            stem,
            down1,
            down2,
            blocks,
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        let shape = x.shape();
        assert!(
            shape.len() == 4 && shape[2] % 4 == 0 && shape[3] % 4 == 0,
            "encoder {}: spatial size must be divisible by 4, got {shape:?}",
            self.stem.name
        );
        let h = instance_norm(&self.stem.forward(x), NORM_EPS).relu();
        let h = instance_norm(&self.down1.forward(&h), NORM_EPS).relu();
        let mut h = instance_norm(&self.down2.forward(&h), NORM_EPS).relu();
        for b in &self.blocks {
            h = b.forward(&h, None);
        }
        h
    }

    pub fn params(&self, out: &mut Vec<(String, Tensor<S>)>) {
        self.stem.params(out);
        self.down1.params(out);
        self.down2.params(out);
        for b in &self.blocks {
            b.params(out);
        }
    }

    pub fn state(&self, out: &mut Vec<(String, Vec<S>)>) {
        self.stem.state(out);
        self.down1.state(out);
        self.down2.state(out);
        for b in &self.blocks {
            b.state(out);
        }
    }

    pub fn load_state(&self, name: &str, values: &[S]) -> bool {
        self.stem.load_state(name, values)
            || self.down1.load_state(name, values)
            || self.down2.load_state(name, values)
            || self.blocks.iter().any(|b| b.load_state(name, values))
    }
}

/// Semantically guided generator: four residual blocks with semantic
/// denormalization (the fourth upsampled), two 5×5 layer-normalized
/// upsampling stages and a 7×7 tanh head. Maps a latent `[b, 4w, H/4, W/4]`
/// plus guidance back to an image in (−1, 1).
pub struct Generator<S: Scalar> {
    blocks: Vec<ResidualBlock<S>>,
    up1: Conv2d<S>,
    ln1: LayerNorm<S>,
    up2: Conv2d<S>,
    ln2: LayerNorm<S>,
    head: Conv2d<S>,
    use_spade: bool,
}

impl<S: Scalar> Generator<S> {
    pub fn new(name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = cfg.width;
        let norm = if cfg.use_spade {
            BlockNorm::Spade
        } else {
            BlockNorm::Instance
        };
        let blocks = (0..4)
            .map(|i| {
                ResidualBlock::new(
                    &format!("{name}.block{i}"),
                    4 * w,
                    norm,
                    cfg.classes,
                    cfg.spade_hidden(),
                    true,
                    rng,
                )
            })
            .collect();
        let up1 = Conv2d::new(&format!("{name}.up1"), ConvSpec::new(5, 1, 4 * w, 2 * w), true, rng);
        let ln1 = LayerNorm::new(&format!("{name}.ln1"), 2 * w);
        let up2 = Conv2d::new(&format!("{name}.up2"), ConvSpec::new(5, 1, 2 * w, w), true, rng);
        let ln2 = LayerNorm::new(&format!("{name}.ln2"), w);
        let head = Conv2d::new(&format!("{name}.head"), ConvSpec::new(7, 1, w, 3), true, rng);
        Generator {
            blocks,
            up1,
            ln1,
            up2,
            ln2,
            head,
            use_spade: cfg.use_spade,
        }
    }

    pub fn forward(&self, z: &Tensor<S>, guidance: &SemanticMap<S>) -> Tensor<S> {
        let m = self.use_spade.then_some(guidance);
        let mut h = z.clone();
        for b in &self.blocks {
            h = b.forward(&h, m);
        }
        let h = upsample_nearest2x(&h);
        let h = self.ln1.forward(&self.up1.forward(&h)).relu();
        let h = upsample_nearest2x(&h);
        let h = self.ln2.forward(&self.up2.forward(&h)).relu();
        self.head.forward(&h).tanh()
    }

    pub fn params(&self, out: &mut Vec<(String, Tensor<S>)>) {
        for b in &self.blocks {
            b.params(out);
        }
        self.up1.params(out);
        self.ln1.params(out);
        self.up2.params(out);
        self.ln2.params(out);
        self.head.params(out);
    }

    pub fn state(&self, out: &mut Vec<(String, Vec<S>)>) {
        for b in &self.blocks {
            b.state(out);
        }
        self.up1.state(out);
        self.up2.state(out);
        self.head.state(out);
    }

    pub fn load_state(&self, name: &str, values: &[S]) -> bool {
        self.blocks.iter().any(|b| b.load_state(name, values))
            || self.up1.load_state(name, values)
            || self.up2.load_state(name, values)
            || self.head.load_state(name, values)
    }
}

/// One patch discriminator: 4×4 stride-2 chain with leaky ReLU and spectral
/// normalization, no normalization layers, 1×1 head to a score map.
pub struct PatchDiscriminator<S: Scalar> {
    convs: Vec<Conv2d<S>>,
    head: Conv2d<S>,
}

impl<S: Scalar> PatchDiscriminator<S> {
    pub fn new(name: &str, in_channels: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let chain = [in_channels, width, 2 * width, 4 * width, 8 * width];
        let convs = (0..4)
            .map(|i| {
                Conv2d::new(
                    &format!("{name}.conv{i}"),
                    ConvSpec::new(4, 2, chain[i], chain[i + 1]),
                    true,
                    rng,
                )
            })
            .collect();
        let head = Conv2d::new(
            &format!("{name}.head"),
            ConvSpec::new(1, 1, 8 * width, 1),
            true,
            rng,
        );
        PatchDiscriminator { convs, head }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        let shape = x.shape();
        assert!(
            shape[2] >= 16 && shape[3] >= 16,
            "discriminator {}: input {}x{} is smaller than the receptive field (needs >= 16)",
            self.head.name,
            shape[2],
            shape[3]
        );
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(&h).lrelu(0.2);
        }
        self.head.forward(&h)
    }

    pub fn params(&self, out: &mut Vec<(String, Tensor<S>)>) {
        for c in &self.convs {
            c.params(out);
        }
        self.head.params(out);
    }

    pub fn state(&self, out: &mut Vec<(String, Vec<S>)>) {
        for c in &self.convs {
            c.state(out);
        }
        self.head.state(out);
    }

    pub fn load_state(&self, name: &str, values: &[S]) -> bool {
        self.convs.iter().any(|c| c.load_state(name, values)) || self.head.load_state(name, values)
    }
}

/// Image discriminator bank: scale `i` scores the input mean-pooled `i`
/// times, one score map per receptive patch.
pub struct MultiScaleDiscriminator<S: Scalar> {
    pub scales: Vec<PatchDiscriminator<S>>,
}

impl<S: Scalar> MultiScaleDiscriminator<S> {
    pub fn new(name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let scales = (0..cfg.discriminator_scales())
            .map(|i| PatchDiscriminator::new(&format!("{name}.scale{i}"), 3, cfg.width, rng))
            .collect();
        MultiScaleDiscriminator { scales }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Vec<Tensor<S>> {
        let mut input = x.clone();
        let mut out = Vec::with_capacity(self.scales.len());
        for (i, d) in self.scales.iter().enumerate() {
            if i > 0 {
                input = avg_pool2x(&input);
            }
            out.push(d.forward(&input));
        }
        out
    }

    pub fn params(&self, out: &mut Vec<(String, Tensor<S>)>) {
        for d in &self.scales {
            d.params(out);
        }
    }

    pub fn state(&self, out: &mut Vec<(String, Vec<S>)>) {
        for d in &self.scales {
            d.state(out);
        }
    }

    pub fn load_state(&self, name: &str, values: &[S]) -> bool {
        self.scales.iter().any(|d| d.load_state(name, values))
    }
}

/// Small encoder–decoder segmentation network: three stride-2 blocks, two
/// residual blocks, three upsample+conv blocks and a 1×1 head emitting
/// unnormalized class logits at input resolution.
pub struct SegNet<S: Scalar> {
    down: Vec<Conv2d<S>>,
    blocks: Vec<ResidualBlock<S>>,
    up: Vec<Conv2d<S>>,
    head: Conv2d<S>,
}

impl<S: Scalar> SegNet<S> {
    pub fn new(name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = cfg.width;
        let down_chain = [3, w, 2 * w, 4 * w];
        let down = (0..3)
            .map(|i| {
                Conv2d::new(
                    &format!("{name}.down{i}"),
                    ConvSpec::new(3, 2, down_chain[i], down_chain[i + 1]),
                    false,
                    rng,
                )
            })
            .collect();
        let blocks = (0..2)
            .map(|i| {
                ResidualBlock::new(
                    &format!("{name}.block{i}"),
                    4 * w,
                    BlockNorm::Instance,
                    cfg.classes,
                    cfg.spade_hidden(),
                    false,
                    rng,
                )
            })
            .collect();
        let up_chain = [4 * w, 2 * w, w, w];
        let up = (0..3)
            .map(|i| {
                Conv2d::new(
                    &format!("{name}.up{i}"),
                    ConvSpec::new(3, 1, up_chain[i], up_chain[i + 1]),
                    false,
                    rng,
                )
            })
            .collect();
        let head = Conv2d::new(
            &format!("{name}.head"),
            ConvSpec::new(1, 1, w, cfg.classes),
            false,
            rng,
        );
        SegNet {
            down,
            blocks,
            up,
            head,
        }
    }

    /// Unnormalized logits `[b, K, H, W]`; callers apply softmax where
    /// probabilities are needed. Inputs are expected in [−1, 1].
    pub fn forward(&self, x: &Tensor<S>) -> SemanticMap<S> {
        let shape = x.shape();
        assert!(
            shape[2] % 8 == 0 && shape[3] % 8 == 0,
            "segmentation network: spatial size must be divisible by 8, got {shape:?}"
        );
        let mut h = x.clone();
        for c in &self.down {
            h = instance_norm(&c.forward(&h), NORM_EPS).relu();
        }
        for b in &self.blocks {
            h = b.forward(&h, None);
        }
        for c in &self.up {
            h = upsample_nearest2x(&h);
            h = instance_norm(&c.forward(&h), NORM_EPS).relu();
        }
        self.head.forward(&h)
    }

    pub fn params(&self, out: &mut Vec<(String, Tensor<S>)>) {
        for c in &self.down {
            c.params(out);
        }
        for b in &self.blocks {
            b.params(out);
        }
        for c in &self.up {
            c.params(out);
        }
        self.head.params(out);
    }
}

/// Output-space discriminator over softmax segmentation maps: four 4×4
/// stride-2 convolutions, 1×1 head, sigmoid score map in (0, 1).
pub struct SegDiscriminator<S: Scalar> {
    convs: Vec<Conv2d<S>>,
    head: Conv2d<S>,
}

impl<S: Scalar> SegDiscriminator<S> {
    pub fn new(name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = cfg.width;
        let chain = [cfg.classes, w, 2 * w, 4 * w, 8 * w];
        let convs = (0..4)
            .map(|i| {
                Conv2d::new(
                    &format!("{name}.conv{i}"),
                    ConvSpec::new(4, 2, chain[i], chain[i + 1]),
                    false,
                    rng,
                )
            })
            .collect();
        let head = Conv2d::new(&format!("{name}.head"), ConvSpec::new(1, 1, 8 * w, 1), false, rng);
        SegDiscriminator { convs, head }
    }

    pub fn forward(&self, p: &Tensor<S>) -> Tensor<S> {
        let mut h = p.clone();
        for c in &self.convs {
            h = c.forward(&h).lrelu(0.2);
        }
        self.head.forward(&h).sigmoid()
    }

    pub fn params(&self, out: &mut Vec<(String, Tensor<S>)>) {
        for c in &self.convs {
            c.params(out);
        }
        self.head.params(out);
    }
}

/// Named parameter collections for every network; the unit of checkpointing
/// and the thing a training stage owns.
pub struct ModelBundle<S: Scalar> {
    pub config: ModelConfig,
    pub enc_s: Encoder<S>,
    pub enc_t: Encoder<S>,
    pub gen_s: Generator<S>,
    pub gen_t: Generator<S>,
    pub disc_s: MultiScaleDiscriminator<S>,
    pub disc_t: MultiScaleDiscriminator<S>,
    pub seg: SegNet<S>,
    pub seg_disc: SegDiscriminator<S>,
}

impl<S: Scalar> ModelBundle<S> {
    pub fn new(config: &ModelConfig, seed: u64) -> Self {
        let r = |label: &str| rng::stream(seed, label);
        ModelBundle {
            config: config.clone(),
            enc_s: Encoder::new("e_s", config, &mut r("init.e_s")),
            enc_t: Encoder::new("e_t", config, &mut r("init.e_t")),
            gen_s: Generator::new("g_s", config, &mut r("init.g_s")),
            gen_t: Generator::new("g_t", config, &mut r("init.g_t")),
            disc_s: MultiScaleDiscriminator::new("d_s", config, &mut r("init.d_s")),
            disc_t: MultiScaleDiscriminator::new("d_t", config, &mut r("init.d_t")),
            seg: SegNet::new("m", config, &mut r("init.m")),
            seg_disc: SegDiscriminator::new("d_seg", config, &mut r("init.d_seg")),
        }
    }

    /// Fresh output-space discriminator (re-initialized every learning
    /// round).
    pub fn reinit_seg_disc(&mut self, seed: u64) {
        self.seg_disc =
            SegDiscriminator::new("d_seg", &self.config, &mut rng::stream(seed, "init.d_seg"));
    }

    /// Generator-side translation parameters (both encoders and generators).
    pub fn translation_params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.enc_s.params(&mut out);
        self.enc_t.params(&mut out);
        self.gen_s.params(&mut out);
        self.gen_t.params(&mut out);
        out
    }

    pub fn image_discriminator_params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.disc_s.params(&mut out);
        self.disc_t.params(&mut out);
        out
    }

    pub fn seg_params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.seg.params(&mut out);
        out
    }

    pub fn seg_disc_params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.seg_disc.params(&mut out);
        out
    }

    pub fn all_params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = self.translation_params();
        out.extend(self.image_discriminator_params());
        out.extend(self.seg_params());
        out.extend(self.seg_disc_params());
        out
    }

    /// Non-trained buffers (spectral-norm vectors) for checkpointing.
    pub fn all_state(&self) -> Vec<(String, Vec<S>)> {
        let mut out = Vec::new();
        self.enc_s.state(&mut out);
        self.enc_t.state(&mut out);
        self.gen_s.state(&mut out);
        self.gen_t.state(&mut out);
        self.disc_s.state(&mut out);
        self.disc_t.state(&mut out);
        out
    }

    pub fn load_state_entry(&self, name: &str, values: &[S]) -> bool {
        self.enc_s.load_state(name, values)
            || self.enc_t.load_state(name, values)
            || self.gen_s.load_state(name, values)
            || self.gen_t.load_state(name, values)
            || self.disc_s.load_state(name, values)
            || self.disc_t.load_state(name, values)
    }

    fn set_group_requires_grad(params: &[(String, Tensor<S>)], value: bool) {
        for (_, p) in params {
            p.set_requires_grad(value);
        }
    }

    /// Freeze/unfreeze the segmentation network's parameters.
    pub fn set_seg_trainable(&self, value: bool) {
        Self::set_group_requires_grad(&self.seg_params(), value);
    }

    /// Freeze/unfreeze every translation-side network.
    pub fn set_translation_trainable(&self, value: bool) {
        Self::set_group_requires_grad(&self.translation_params(), value);
        Self::set_group_requires_grad(&self.image_discriminator_params(), value);
    }
}

/// Translate `x` with encoder `enc` and generator `gen`, guided by the
/// segmentation of `x` itself (or an explicit guidance map, for the
/// mismatched-guidance probe).
pub fn translate<S: Scalar>(
    x: &Tensor<S>,
    enc: &Encoder<S>,
    gen: &Generator<S>,
    seg: &SegNet<S>,
    guidance: Option<&SemanticMap<S>>,
) -> Tensor<S> {
    let m = match guidance {
        Some(g) => g.clone(),
        None => seg.forward(x),
    };
    gen.forward(&enc.forward(x), &m)
}

/// Per-pixel argmax over the class axis of `[b, K, H, W]` logits, one label
/// map per batch item. Ties resolve to the lowest class index.
pub fn argmax_classes<S: Scalar>(logits: &Tensor<S>) -> Vec<Vec<i32>> {
    let shape = logits.shape();
    assert!(shape.len() == 4, "argmax_classes expects [b, K, h, w], got {shape:?}");
    let (b, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let d = logits.data();
    let hw = h * w;
    (0..b)
        .map(|bi| {
            let base = bi * k * hw;
            (0..hw)
                .map(|p| {
                    let mut best = 0usize;
                    let mut best_v = d[base + p];
                    for c in 1..k {
                        let v = d[base + c * hw + p];
                        if v > best_v {
                            best_v = v;
                            best = c;
                        }
                    }
                    best as i32
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::no_grad;
    use rand::Rng;

    fn image<S: Scalar>(size: usize, seed: u64) -> Tensor<S> {
        let mut r = rng::stream(seed, "modelimg");
        let data: Vec<S> = (0..3 * size * size)
            .map(|_| crate::sc::<S>(r.random_range(-1.0..1.0f64)))
            .collect();
        Tensor::from_vec(&[1, 3, size, size], data)
    }

    #[test]
    fn encoder_latent_shape() {
        let cfg = ModelConfig::new(16, 5, 64);
        let enc = Encoder::<f32>::new("e", &cfg, &mut rng::stream(1, "enc"));
        let z = enc.forward(&image(64, 2));
        assert_eq!(z.shape(), vec![1, 64, 16, 16]);
    }

    #[test]
    fn encoder_is_deterministic() {
        // Inference mode: the spectral-norm state is read, not advanced.
        let cfg = ModelConfig::new(8, 5, 32);
        let enc = Encoder::<f32>::new("e", &cfg, &mut rng::stream(3, "enc"));
        let x = image(32, 4);
        let (a, b) = no_grad(|| (enc.forward(&x).to_vec(), enc.forward(&x).to_vec()));
        assert_eq!(a, b);
    }

    #[test]
    #[should_panic(expected = "divisible by 4")]
    fn encoder_rejects_indivisible_input() {
        let cfg = ModelConfig::new(8, 5, 32);
        let enc = Encoder::<f32>::new("e", &cfg, &mut rng::stream(5, "enc"));
        let _ = enc.forward(&Tensor::zeros(&[1, 3, 30, 30]));
    }

    #[test]
    fn encoder_gradient_reaches_input() {
        let cfg = ModelConfig::new(4, 5, 16);
        let enc = Encoder::<f32>::new("e", &cfg, &mut rng::stream(6, "enc"));
        let x = image::<f32>(16, 7).requiring_grad();
        let z = enc.forward(&x);
        z.mul(&z).sum_all().backward();
        let g = x.grad().unwrap();
        assert!(g.iter().any(|&v| v != 0.0), "no gradient reached the input");
    }

    #[test]
    fn generator_output_shape_and_range() {
        let cfg = ModelConfig::new(16, 5, 64);
        let mut r = rng::stream(8, "gen");
        let gen = Generator::<f32>::new("g", &cfg, &mut r);
        let z = Tensor::from_vec(
            &[1, 64, 16, 16],
            (0..64 * 256).map(|i| ((i % 17) as f32 - 8.0) / 8.0).collect(),
        );
        let m = Tensor::<f32>::zeros(&[1, 5, 64, 64]);
        let y = gen.forward(&z, &m);
        assert_eq!(y.shape(), vec![1, 3, 64, 64]);
        assert!(y.data().iter().all(|&v| v > -1.0 && v < 1.0), "tanh range");
    }

    #[test]
    fn generator_responds_to_guidance() {
        let cfg = ModelConfig::new(8, 5, 32);
        let gen = Generator::<f32>::new("g", &cfg, &mut rng::stream(9, "gen"));
        // latent must be 4w = 32 channels; build from noise
        let mut r = rng::stream(11, "gen");
        let z = Tensor::<f32>::from_vec(
            &[1, 32, 8, 8],
            (0..32 * 64).map(|_| r.random_range(-1.0..1.0)).collect(),
        );
        let m1 = Tensor::<f32>::from_vec(
            &[1, 5, 32, 32],
            (0..5 * 1024).map(|_| r.random_range(-2.0..2.0)).collect(),
        );
        let m2 = Tensor::<f32>::from_vec(
            &[1, 5, 32, 32],
            (0..5 * 1024).map(|_| r.random_range(-2.0..2.0)).collect(),
        );
        let y1 = gen.forward(&z, &m1);
        let y2 = gen.forward(&z, &m2);
        let diff: f32 = y1
            .data()
            .iter()
            .zip(y2.data().iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / y1.numel() as f32;
        assert!(diff > 0.0, "guidance must influence the generated image");
    }

    #[test]
    fn discriminator_score_map_sizes() {
        let cfg = ModelConfig::new(16, 5, 64);
        assert_eq!(cfg.discriminator_scales(), 3);
        let d = MultiScaleDiscriminator::<f32>::new("d", &cfg, &mut rng::stream(12, "disc"));
        let maps = d.forward(&image(64, 13));
        let sizes: Vec<Vec<usize>> = maps.iter().map(|m| m.shape()).collect();
        assert_eq!(
            sizes,
            vec![vec![1, 1, 4, 4], vec![1, 1, 2, 2], vec![1, 1, 1, 1]]
        );
    }

    #[test]
    #[should_panic(expected = "receptive field")]
    fn discriminator_rejects_tiny_input() {
        let cfg = ModelConfig::new(8, 5, 64);
        let d = PatchDiscriminator::<f32>::new("d", 3, cfg.width, &mut rng::stream(14, "disc"));
        let _ = d.forward(&Tensor::zeros(&[1, 3, 8, 8]));
    }

    #[test]
    fn discriminator_batch_independence() {
        let cfg = ModelConfig::new(8, 5, 32);
        let d = PatchDiscriminator::<f32>::new("d", 3, cfg.width, &mut rng::stream(15, "disc"));
        let a = image::<f32>(32, 16);
        let b = image::<f32>(32, 17);
        let mut ab = a.to_vec();
        ab.extend(b.to_vec());
        let mut ba = b.to_vec();
        ba.extend(a.to_vec());
        let (sab, sba) = no_grad(|| {
            (
                d.forward(&Tensor::from_vec(&[2, 3, 32, 32], ab)).to_vec(),
                d.forward(&Tensor::from_vec(&[2, 3, 32, 32], ba)).to_vec(),
            )
        });
        let half = sab.len() / 2;
        assert_eq!(&sab[..half], &sba[half..]);
        assert_eq!(&sab[half..], &sba[..half]);
    }

    #[test]
    fn discriminator_constant_zero_weights_output_bias() {
        let cfg = ModelConfig::new(8, 5, 32);
        let d = PatchDiscriminator::<f32>::new("d", 3, cfg.width, &mut rng::stream(18, "disc"));
        let mut params = Vec::new();
        d.params(&mut params);
        for (name, p) in &params {
            if name.ends_with(".weight") {
                p.set_data(&vec![0.0; p.numel()]);
            }
            if name == "d.head.bias" {
                p.set_data(&[0.7]);
            }
        }
        let scores = d.forward(&image(32, 19));
        assert!(scores.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn segnet_logits_shape_and_argmax() {
        let cfg = ModelConfig::new(16, 5, 64);
        let m = SegNet::<f32>::new("m", &cfg, &mut rng::stream(20, "seg"));
        let logits = m.forward(&image(64, 21));
        assert_eq!(logits.shape(), vec![1, 5, 64, 64]);
        let labels = argmax_classes(&logits);
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0].len(), 64 * 64);
        assert!(labels[0].iter().all(|&l| (0..5).contains(&l)));
    }

    #[test]
    fn seg_discriminator_scores_in_unit_interval() {
        let cfg = ModelConfig::new(8, 5, 32);
        let d = SegDiscriminator::<f32>::new("ds", &cfg, &mut rng::stream(22, "segd"));
        let mut r = rng::stream(23, "segd");
        let logits = Tensor::<f32>::from_vec(
            &[1, 5, 32, 32],
            (0..5 * 1024).map(|_| r.random_range(-3.0..3.0)).collect(),
        );
        let p = logits.softmax(1);
        let s1 = d.forward(&p);
        assert!(s1.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let s2 = d.forward(&p);
        assert_eq!(s1.to_vec(), s2.to_vec(), "deterministic given parameters");
    }

    #[test]
    fn width_scaling_preserves_shape_contracts() {
        for &w in &[8usize, 16, 32, 64] {
            let size = 32usize;
            let cfg = ModelConfig::new(w, 5, size);
            let seed = 100 + w as u64;
            let bundle = ModelBundle::<f32>::new(&cfg, seed);
            let x = image(size, seed);
            no_grad(|| {
                let z = bundle.enc_s.forward(&x);
                assert_eq!(z.shape(), vec![1, 4 * w, size / 4, size / 4]);
                let m = bundle.seg.forward(&x);
                assert_eq!(m.shape(), vec![1, 5, size, size]);
                let y = bundle.gen_t.forward(&z, &m);
                assert_eq!(y.shape(), vec![1, 3, size, size]);
                let maps = bundle.disc_t.forward(&y);
                assert_eq!(maps.len(), cfg.discriminator_scales());
                let p = m.softmax(1);
                let s = bundle.seg_disc.forward(&p);
                assert_eq!(s.shape()[0..2], [1, 1]);
            });
        }
    }

    #[test]
    fn bundle_outputs_finite_with_default_init() {
        let cfg = ModelConfig::new(8, 5, 32);
        let bundle = ModelBundle::<f32>::new(&cfg, 42);
        let x = image(32, 43);
        no_grad(|| {
            let z = bundle.enc_s.forward(&x);
            let m = bundle.seg.forward(&x);
            let y = bundle.gen_t.forward(&z, &m);
            for t in [&z, &m, &y] {
                assert!(t.data().iter().all(|v| v.is_finite()));
            }
        });
    }

    #[test]
    fn translate_is_shape_preserving_and_guidance_sensitive() {
        let cfg = ModelConfig::new(8, 5, 32);
        let bundle = ModelBundle::<f32>::new(&cfg, 44);
        let x1 = image(32, 45);
        let x2 = image(32, 46);
        no_grad(|| {
            let direct = translate(&x1, &bundle.enc_s, &bundle.gen_t, &bundle.seg, None);
            assert_eq!(direct.shape(), vec![1, 3, 32, 32]);
            // Guidance taken from the image itself must match the default path.
            let m1 = bundle.seg.forward(&x1);
            let same = translate(&x1, &bundle.enc_s, &bundle.gen_t, &bundle.seg, Some(&m1));
            assert_eq!(direct.to_vec(), same.to_vec());
            // Guidance from a different scene must change the output.
            let m2 = bundle.seg.forward(&x2);
            let probed = translate(&x1, &bundle.enc_s, &bundle.gen_t, &bundle.seg, Some(&m2));
            let diff: f32 = direct
                .data()
                .iter()
                .zip(probed.data().iter())
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(diff > 0.0, "mismatched guidance must alter the translation");
        });
    }

    #[test]
    fn frozen_seg_gets_no_parameter_gradients() {
        let cfg = ModelConfig::new(4, 5, 16);
        let bundle = ModelBundle::<f32>::new(&cfg, 47);
        bundle.set_seg_trainable(false);
        let x = image::<f32>(16, 48).requiring_grad();
        let logits = bundle.seg.forward(&x);
        logits.mul(&logits).mean_all().backward();
        for (name, p) in bundle.seg_params() {
            assert!(p.grad().is_none(), "{name} should be frozen");
        }
        assert!(x.grad().is_some(), "gradient must still flow through to x");
        bundle.set_seg_trainable(true);
    }
}
