//! Training objectives for both stages, each independently testable.
//!
//! Expectations are means over batch, pixels and discriminator scales, which
//! keeps the λ weights resolution-independent. Logarithms are always taken
//! as `log(max(x, 1e-8))` since predicted probabilities may underflow.

use crate::models::SegDiscriminator;
use crate::tensor::Tensor;
use crate::Scalar;

/// Probability floor inside every log.
pub const LOG_EPS: f64 = 1e-8;

fn safe_log<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    t.clamp_min(LOG_EPS).ln()
}

/// λ weights of the translation objective; defaults are the published ones.
#[derive(Debug, Clone, Copy)]
pub struct TranslationLossWeights {
    pub recon: f64,
    pub gan: f64,
    pub cycle_image: f64,
    pub cycle_latent: f64,
    pub sce: f64,
}

impl Default for TranslationLossWeights {
    fn default() -> Self {
        TranslationLossWeights {
            recon: 10.0,
            gan: 1.0,
            cycle_image: 10.0,
            cycle_latent: 1.0,
            sce: 10.0,
        }
    }
}

impl TranslationLossWeights {
    pub fn validate(&self) {
        assert!(
            self.recon >= 0.0
                && self.gan >= 0.0
                && self.cycle_image >= 0.0
                && self.cycle_latent >= 0.0
                && self.sce >= 0.0,
            "loss weights must be non-negative"
        );
    }
}

/// λ weights of the segmentation objective.
#[derive(Debug, Clone, Copy)]
pub struct SegLossWeights {
    pub seg: f64,
    pub ssl: f64,
    pub adv: f64,
}

impl Default for SegLossWeights {
    fn default() -> Self {
        SegLossWeights {
            seg: 1.0,
            ssl: 1.0,
            adv: 1e-3,
        }
    }
}

/// Least-squares GAN label convention. The published equations label real
/// samples 0 and fakes 1 (with the generator driving fakes toward 0); the
/// conventional flip is exposed for comparison since the fixed point is the
/// same either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GanLabels {
    #[default]
    AsPrinted,
    Conventional,
}

impl GanLabels {
    fn targets(self) -> (f64, f64) {
        match self {
            GanLabels::AsPrinted => (0.0, 1.0),
            GanLabels::Conventional => (1.0, 0.0),
        }
    }
}

fn l1<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, what: &str) -> Tensor<S> {
    assert!(
        a.shape() == b.shape(),
        "{what}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    a.sub(b).abs().mean_all()
}

/// Mean absolute difference between a reconstruction and its source.
pub fn loss_recon<S: Scalar>(x_rec: &Tensor<S>, x: &Tensor<S>) -> Tensor<S> {
    l1(x_rec, x, "loss_recon")
}

/// Image-space cycle consistency.
pub fn loss_cycle_image<S: Scalar>(x_cyc: &Tensor<S>, x: &Tensor<S>) -> Tensor<S> {
    l1(x_cyc, x, "loss_cycle_image")
}

/// Latent-space cycle consistency.
pub fn loss_cycle_latent<S: Scalar>(z_cyc: &Tensor<S>, z: &Tensor<S>) -> Tensor<S> {
    l1(z_cyc, z, "loss_cycle_latent")
}

fn mean_sq_to<S: Scalar>(scores: &[Tensor<S>], target: f64) -> Tensor<S> {
    assert!(!scores.is_empty(), "discriminator produced no score maps");
    let mut acc = scores[0].add_scalar(-target).pow_scalar(2.0).mean_all();
    for s in &scores[1..] {
        acc = acc.add(&s.add_scalar(-target).pow_scalar(2.0).mean_all());
    }
    acc.mul_scalar(1.0 / scores.len() as f64)
}

/// Discriminator side of the least-squares objective, averaged over scales.
pub fn loss_lsgan_d<S: Scalar>(
    scores_real: &[Tensor<S>],
    scores_fake: &[Tensor<S>],
    labels: GanLabels,
) -> Tensor<S> {
    let (real_target, fake_target) = labels.targets();
    mean_sq_to(scores_real, real_target)
        .mul_scalar(0.5)
        .add(&mean_sq_to(scores_fake, fake_target).mul_scalar(0.5))
}

/// Generator side: drive fake scores toward the real label.
pub fn loss_lsgan_g<S: Scalar>(scores_fake: &[Tensor<S>], labels: GanLabels) -> Tensor<S> {
    let (real_target, _) = labels.targets();
    mean_sq_to(scores_fake, real_target).mul_scalar(0.5)
}

/// One direction of the symmetric cross-entropy: the target distribution is
/// detached (it acts as ground truth), the prediction keeps its gradient.
fn sce_half<S: Scalar>(target_logits: &Tensor<S>, pred_logits: &Tensor<S>) -> Tensor<S> {
    let q_target = target_logits.softmax(1).detach();
    let log_q_pred = safe_log(&pred_logits.softmax(1));
    q_target
        .mul(&log_q_pred)
        .sum_axes(&[1], false)
        .mean_all()
        .neg()
}

/// Symmetric cross-entropy between two logit maps `[b, K, H, W]`. Each term
/// treats the other map as frozen ground truth; the value is symmetric under
/// argument exchange.
pub fn loss_sce<S: Scalar>(logits_a: &Tensor<S>, logits_b: &Tensor<S>) -> Tensor<S> {
    assert!(
        logits_a.shape() == logits_b.shape(),
        "loss_sce: shape mismatch {:?} vs {:?}",
        logits_a.shape(),
        logits_b.shape()
    );
    sce_half(logits_b, logits_a).add(&sce_half(logits_a, logits_b))
}

/// The per-domain terms of the translation objective.
pub struct TranslationLossTerms<S: Scalar> {
    pub recon_s: Tensor<S>,
    pub recon_t: Tensor<S>,
    pub gan_s: Tensor<S>,
    pub gan_t: Tensor<S>,
    pub cycle_image_s: Tensor<S>,
    pub cycle_image_t: Tensor<S>,
    pub cycle_latent_s: Tensor<S>,
    pub cycle_latent_t: Tensor<S>,
    pub sce_s: Tensor<S>,
    pub sce_t: Tensor<S>,
}

/// Weighted sum of all translation terms, each λ applied to the sum of its
/// two domain components.
pub fn total_translation_loss<S: Scalar>(
    terms: &TranslationLossTerms<S>,
    w: &TranslationLossWeights,
) -> Tensor<S> {
    w.validate();
    terms
        .recon_s
        .add(&terms.recon_t)
        .mul_scalar(w.recon)
        .add(&terms.gan_s.add(&terms.gan_t).mul_scalar(w.gan))
        .add(
            &terms
                .cycle_image_s
                .add(&terms.cycle_image_t)
                .mul_scalar(w.cycle_image),
        )
        .add(
            &terms
                .cycle_latent_s
                .add(&terms.cycle_latent_t)
                .mul_scalar(w.cycle_latent),
        )
        .add(&terms.sce_s.add(&terms.sce_t).mul_scalar(w.sce))
}

/// Outcome of a cross-entropy evaluation; `all_ignored` flags batches whose
/// every pixel carried the ignore index.
pub struct CeOutcome<S: Scalar> {
    pub loss: Tensor<S>,
    pub valid_pixels: usize,
    pub all_ignored: bool,
}

/// Cross-entropy of logits `[b, K, H, W]` against integer labels `[b·H·W]`
/// in {0..K−1} with −1 ignored. The mean runs over non-ignored pixels only;
/// an all-ignored batch yields a zero loss and a warning flag.
pub fn loss_seg_ce<S: Scalar>(logits: &Tensor<S>, labels: &[i32]) -> CeOutcome<S> {
    let shape = logits.shape();
    assert!(shape.len() == 4, "loss_seg_ce expects [b, K, h, w], got {shape:?}");
    let (b, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    assert!(
        labels.len() == b * hw,
        "loss_seg_ce: {} labels for {} pixels",
        labels.len(),
        b * hw
    );

    let mut mask = vec![S::zero(); b * k * hw];
    let mut valid = 0usize;
    for bi in 0..b {
        for p in 0..hw {
            let y = labels[bi * hw + p];
            if y < 0 {
                continue;
            }
            assert!(
                (y as usize) < k,
                "loss_seg_ce: label {y} out of range for {k} classes"
            );
            mask[bi * k * hw + (y as usize) * hw + p] = S::one();
            valid += 1;
        }
    }
    if valid == 0 {
        return CeOutcome {
            loss: Tensor::scalar(S::zero()),
            valid_pixels: 0,
            all_ignored: true,
        };
    }
    let mask_t = Tensor::from_vec(&shape, mask);
    let log_q = safe_log(&logits.softmax(1));
    let picked = log_q.mul(&mask_t).sum_all();
    CeOutcome {
        loss: picked.mul_scalar(-1.0 / valid as f64),
        valid_pixels: valid,
        all_ignored: false,
    }
}

/// Output-space discriminator objective: score target maps as 1 and
/// translated-source maps as 0 (the printed labels, negated into a loss).
/// Callers pass detached maps when updating the discriminator.
pub fn loss_outputspace_adv_d<S: Scalar>(
    p_target: &Tensor<S>,
    p_trans: &Tensor<S>,
    d_seg: &SegDiscriminator<S>,
) -> Tensor<S> {
    let s_target = d_seg.forward(p_target);
    let s_trans = d_seg.forward(p_trans);
    safe_log(&s_target)
        .mean_all()
        .neg()
        .add(&safe_log(&s_trans.neg().add_scalar(1.0)).mean_all().neg())
}

/// Adversarial term for the segmentation network: drive target-domain maps
/// toward the source-like label so the output-space distributions align.
pub fn loss_outputspace_adv_m<S: Scalar>(
    p_target: &Tensor<S>,
    d_seg: &SegDiscriminator<S>,
) -> Tensor<S> {
    let s_target = d_seg.forward(p_target);
    safe_log(&s_target.neg().add_scalar(1.0)).mean_all().neg()
}

/// Weighted sum of the segmentation-stage terms.
pub fn total_seg_loss<S: Scalar>(
    seg: &Tensor<S>,
    ssl: &Tensor<S>,
    adv: &Tensor<S>,
    w: &SegLossWeights,
) -> Tensor<S> {
    assert!(
        w.seg >= 0.0 && w.ssl >= 0.0 && w.adv >= 0.0,
        "loss weights must be non-negative"
    );
    seg.mul_scalar(w.seg)
        .add(&ssl.mul_scalar(w.ssl))
        .add(&adv.mul_scalar(w.adv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelConfig, SegDiscriminator};
    use crate::tensor::finite_diff_check;
    use crate::{rng, sc};
    use rand::Rng;

    type T32 = Tensor<f32>;

    fn rand_logits<S: Scalar>(shape: &[usize], seed: u64) -> Tensor<S> {
        let mut r = rng::stream(seed, "losslogits");
        let n: usize = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n).map(|_| sc::<S>(r.random_range(-3.0..3.0f64))).collect(),
        )
    }

    #[test]
    fn recon_examples() {
        let x = rand_logits::<f32>(&[1, 3, 4, 4], 1);
        assert_eq!(loss_recon(&x, &x).item(), 0.0);
        let shifted = x.add_scalar(0.5);
        assert!((loss_recon(&shifted, &x).item() - 0.5).abs() < 1e-6);
        let y = rand_logits::<f32>(&[1, 3, 4, 4], 2);
        assert_eq!(loss_recon(&x, &y).item(), loss_recon(&y, &x).item());
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn recon_shape_mismatch() {
        let _ = loss_recon(&T32::zeros(&[1, 3, 2, 2]), &T32::zeros(&[1, 3, 4, 4]));
    }

    #[test]
    fn lsgan_examples_as_printed() {
        let real0 = vec![T32::zeros(&[1, 1, 2, 2])];
        let fake1 = vec![T32::ones(&[1, 1, 2, 2])];
        assert_eq!(loss_lsgan_d(&real0, &fake1, GanLabels::AsPrinted).item(), 0.0);

        let real = vec![T32::full(&[1, 1, 1, 1], 0.2)];
        let fake = vec![T32::full(&[1, 1, 1, 1], 0.9)];
        let v = loss_lsgan_d(&real, &fake, GanLabels::AsPrinted).item();
        assert!((v - 0.025).abs() < 1e-7, "{v}");

        let real1 = vec![T32::ones(&[1, 1, 2, 2])];
        let fake0 = vec![T32::zeros(&[1, 1, 2, 2])];
        assert_eq!(loss_lsgan_d(&real1, &fake0, GanLabels::AsPrinted).item(), 1.0);

        assert_eq!(loss_lsgan_g(&fake0, GanLabels::AsPrinted).item(), 0.0);
        assert_eq!(loss_lsgan_g(&fake1, GanLabels::AsPrinted).item(), 0.5);
        let fake_neg = vec![T32::full(&[1, 1, 2, 2], -1.0)];
        assert_eq!(loss_lsgan_g(&fake_neg, GanLabels::AsPrinted).item(), 0.5);
    }

    #[test]
    fn lsgan_conventional_flips_targets() {
        let real1 = vec![T32::ones(&[1, 1, 2, 2])];
        let fake0 = vec![T32::zeros(&[1, 1, 2, 2])];
        assert_eq!(loss_lsgan_d(&real1, &fake0, GanLabels::Conventional).item(), 0.0);
        assert_eq!(loss_lsgan_g(&real1, GanLabels::Conventional).item(), 0.0);
    }

    #[test]
    fn lsgan_averages_over_scales() {
        let real = vec![T32::zeros(&[1, 1, 2, 2]), T32::ones(&[1, 1, 1, 1])];
        let fake = vec![T32::ones(&[1, 1, 2, 2]), T32::ones(&[1, 1, 1, 1])];
        // real: (0 + 1)/2 = 0.5 → ×½ = 0.25; fake hits its target exactly.
        let v = loss_lsgan_d(&real, &fake, GanLabels::AsPrinted).item();
        assert!((v - 0.25).abs() < 1e-7);
    }

    #[test]
    fn sce_uniform_value() {
        let a = T32::zeros(&[1, 2, 2, 2]);
        let b = T32::zeros(&[1, 2, 2, 2]);
        let v = loss_sce(&a, &b).item();
        assert!((v - 2.0 * std::f32::consts::LN_2).abs() < 1e-5, "{v}");
    }

    #[test]
    fn sce_sharp_identical_is_tiny() {
        let mut r = rng::stream(55, "sharp");
        let mut data = vec![-20.0f32; 2 * 3 * 4];
        for p in 0..8 {
            let class = r.random_range(0..3usize);
            data[class * 4 + (p % 4) + (p / 4) * 12] = 20.0;
        }
        let a = T32::from_vec(&[2, 3, 2, 2], data);
        let v = loss_sce(&a, &a).item();
        assert!(v.abs() < 1e-3, "{v}");
    }

    #[test]
    fn sce_symmetry_bitwise_over_seeds() {
        for seed in 0..100 {
            let a = rand_logits::<f32>(&[1, 4, 3, 3], 100 + seed);
            let b = rand_logits::<f32>(&[1, 4, 3, 3], 200 + seed);
            assert_eq!(
                loss_sce(&a, &b).item().to_bits(),
                loss_sce(&b, &a).item().to_bits(),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn sce_gradient_only_through_prediction_side() {
        // The detached ground-truth factor carries no gradient, so the full
        // loss and its prediction-side half must produce the same gradient
        // w.r.t. `a` — and that half is an ordinary differentiable function
        // that central differences can verify.
        let a = rand_logits::<f64>(&[1, 3, 2, 2], 7).requiring_grad();
        let b = rand_logits::<f64>(&[1, 3, 2, 2], 8);

        a.zero_grad();
        loss_sce(&a, &b).backward();
        let grad_full = a.grad().unwrap();

        a.zero_grad();
        sce_half(&b, &a).backward();
        let grad_half = a.grad().unwrap();
        for (x, y) in grad_full.iter().zip(&grad_half) {
            assert!((x - y).abs() < 1e-15, "stop-gradient leaked: {x} vs {y}");
        }

        let mut f = || sce_half(&b, &a);
        let report = finite_diff_check(&mut f, &[("a".into(), a.clone())], 1e-4, 1e-3).unwrap();
        assert!(report.all_ok(), "{:?}", report.failures().collect::<Vec<_>>());
    }

    #[test]
    fn total_translation_weighting() {
        let zero = || T32::scalar(0.0);
        let terms = TranslationLossTerms {
            recon_s: T32::scalar(1.0),
            recon_t: zero(),
            gan_s: zero(),
            gan_t: zero(),
            cycle_image_s: zero(),
            cycle_image_t: zero(),
            cycle_latent_s: zero(),
            cycle_latent_t: zero(),
            sce_s: zero(),
            sce_t: zero(),
        };
        let w = TranslationLossWeights::default();
        assert_eq!(total_translation_loss(&terms, &w).item(), 10.0);

        let doubled = TranslationLossWeights {
            recon: 20.0,
            gan: 2.0,
            cycle_image: 20.0,
            cycle_latent: 2.0,
            sce: 20.0,
        };
        assert_eq!(total_translation_loss(&terms, &doubled).item(), 20.0);

        let all_zero = TranslationLossTerms {
            recon_s: zero(),
            recon_t: zero(),
            gan_s: zero(),
            gan_t: zero(),
            cycle_image_s: zero(),
            cycle_image_t: zero(),
            cycle_latent_s: zero(),
            cycle_latent_t: zero(),
            sce_s: zero(),
            sce_t: zero(),
        };
        assert_eq!(total_translation_loss(&all_zero, &w).item(), 0.0);
    }

    #[test]
    fn seg_ce_examples() {
        // Prob 1 on the true class → 0.
        let sharp = T32::from_vec(&[1, 2, 1, 1], vec![30.0, -30.0]);
        let out = loss_seg_ce(&sharp, &[0]);
        assert!(out.loss.item().abs() < 1e-6);
        assert_eq!(out.valid_pixels, 1);

        // Prob 0.5 on the true class → ln 2.
        let even = T32::from_vec(&[1, 2, 1, 1], vec![0.0, 0.0]);
        let out = loss_seg_ce(&even, &[1]);
        assert!((out.loss.item() - std::f32::consts::LN_2).abs() < 1e-6);

        // All ignored → zero with the warning flag.
        let out = loss_seg_ce(&even, &[-1]);
        assert!(out.all_ignored && out.loss.item() == 0.0);
    }

    #[test]
    fn seg_ce_matches_per_pixel_oracle() {
        for seed in 0..20 {
            let logits = rand_logits::<f64>(&[1, 3, 4, 4], 300 + seed);
            let mut r = rng::stream(400 + seed, "celab");
            let labels: Vec<i32> = (0..16)
                .map(|_| {
                    if r.random_range(0.0..1.0f64) < 0.3 {
                        -1
                    } else {
                        r.random_range(0..3)
                    }
                })
                .collect();
            let out = loss_seg_ce(&logits, &labels);

            // Brute-force per-pixel loop.
            let q = logits.softmax(1);
            let qd = q.to_vec();
            let mut total = 0.0f64;
            let mut n = 0usize;
            for p in 0..16 {
                let y = labels[p];
                if y < 0 {
                    continue;
                }
                total -= qd[(y as usize) * 16 + p].max(1e-8).ln();
                n += 1;
            }
            if n == 0 {
                assert!(out.all_ignored);
                continue;
            }
            let expect = total / n as f64;
            assert!(
                (out.loss.item() - expect).abs() < 1e-6,
                "seed {seed}: {} vs {expect}",
                out.loss.item()
            );
        }
    }

    #[test]
    fn seg_ce_half_ignored_equals_ce_over_kept() {
        let logits = rand_logits::<f64>(&[1, 3, 2, 4], 999);
        let labels = [0, 1, 2, 0, -1, -1, -1, -1];
        let masked = loss_seg_ce(&logits, &labels);
        let kept = logits.crop2d(0, 0, 1, 4);
        let kept_out = loss_seg_ce(&kept, &labels[..4]);
        assert!((masked.loss.item() - kept_out.loss.item()).abs() < 1e-9);
    }

    fn seg_disc(seed: u64) -> SegDiscriminator<f32> {
        let cfg = ModelConfig::new(8, 5, 32);
        SegDiscriminator::new("ds", &cfg, &mut rng::stream(seed, "advd"))
    }

    #[test]
    fn outputspace_adv_values() {
        let d = seg_disc(1);
        let mut params = Vec::new();
        d.params(&mut params);
        // Zero weights and bias force the sigmoid output to 0.5 everywhere.
        for (_, p) in &params {
            p.set_data(&vec![0.0; p.numel()]);
        }
        let p_t = rand_logits::<f32>(&[1, 5, 32, 32], 2).softmax(1);
        let p_s = rand_logits::<f32>(&[1, 5, 32, 32], 3).softmax(1);
        let d_loss = loss_outputspace_adv_d(&p_t, &p_s, &d).item();
        assert!((d_loss - 2.0 * std::f32::consts::LN_2).abs() < 1e-5, "{d_loss}");
        let m_loss = loss_outputspace_adv_m(&p_t, &d).item();
        assert!((m_loss - std::f32::consts::LN_2).abs() < 1e-5, "{m_loss}");
    }

    #[test]
    fn outputspace_adv_perfect_discriminator_near_zero() {
        // Saturating the head bias makes D output ~1 on target maps, so the
        // target half of the discriminator objective vanishes.
        let d = seg_disc(4);
        let mut params = Vec::new();
        d.params(&mut params);
        for (name, p) in &params {
            if name.ends_with("head.bias") {
                p.set_data(&[30.0]);
            } else if name.ends_with(".weight") {
                p.set_data(&vec![0.0; p.numel()]);
            }
        }
        let p_t = rand_logits::<f32>(&[1, 5, 32, 32], 5).softmax(1);
        let target_half = safe_log(&d.forward(&p_t)).mean_all().neg().item();
        assert!(target_half.abs() < 1e-4, "{target_half}");
    }

    #[test]
    fn total_seg_weighting() {
        let w = SegLossWeights::default();
        let two = T32::scalar(2.0);
        let zero = T32::scalar(0.0);
        assert_eq!(total_seg_loss(&two, &zero, &zero, &w).item(), 2.0);
        let one = T32::scalar(1.0);
        let v = total_seg_loss(&zero, &zero, &one, &w).item();
        assert!((v - 1e-3).abs() < 1e-9);
        assert_eq!(total_seg_loss(&zero, &zero, &zero, &w).item(), 0.0);
    }

    #[test]
    fn losses_non_negative_and_finite() {
        for seed in 0..30 {
            let a = rand_logits::<f32>(&[1, 3, 4, 4], 500 + seed);
            let b = rand_logits::<f32>(&[1, 3, 4, 4], 600 + seed);
            let scores = vec![rand_logits::<f32>(&[1, 1, 2, 2], 700 + seed)];
            let mut r = rng::stream(800 + seed, "nonneg");
            let labels: Vec<i32> = (0..16).map(|_| r.random_range(-1..3)).collect();
            for v in [
                loss_recon(&a, &b).item(),
                loss_cycle_image(&a, &b).item(),
                loss_cycle_latent(&a, &b).item(),
                loss_lsgan_d(&scores, &scores, GanLabels::AsPrinted).item(),
                loss_lsgan_g(&scores, GanLabels::AsPrinted).item(),
                loss_sce(&a, &b).item(),
                loss_seg_ce(&a, &labels).loss.item(),
            ] {
                assert!(v.is_finite() && v >= 0.0, "seed {seed}: {v}");
            }
        }
    }
}
