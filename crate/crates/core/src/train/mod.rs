//! The two training stages and the bidirectional learning loop.
//!
//! Translation training updates the encoders/generators against the full
//! objective and then the image discriminators on detached fakes, with the
//! discriminators running at a TTUR multiple of the generator rate.
//! Segmentation training combines supervision on translated source images,
//! self-supervision on pseudo-labeled target images and output-space
//! adversarial alignment. The loop alternates the two, re-materializing
//! translations and regenerating pseudo-labels every round.


use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::losses::{
    loss_cycle_image, loss_cycle_latent, loss_lsgan_d, loss_lsgan_g, loss_outputspace_adv_d,
    loss_outputspace_adv_m, loss_recon, loss_sce, loss_seg_ce, total_seg_loss,
    total_translation_loss, GanLabels, SegLossWeights, TranslationLossTerms,
    TranslationLossWeights,
};
use crate::metrics::{miou, ConfusionMatrix, MiouResult};
use crate::models::{argmax_classes, ModelBundle, SegNet};
use crate::optim::{Adam, PolySchedule};
use crate::tensor::{no_grad, Tensor};
use crate::{rng, Scalar};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Ordered name→value pairs of one optimization step.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub entries: Vec<(&'static str, f64)>,
}

impl LossReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
    }

    pub fn keys(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(k, _)| *k).collect()
    }
}

/// Hyper-parameters of translation training.
#[derive(Debug, Clone)]
pub struct TranslationHp {
    pub lr0: f64,
    /// Total schedule length (the poly decay reaches zero here).
    pub total_steps: u64,
    /// Discriminator learning rate = `ttur_ratio` × generator rate.
    pub ttur_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: TranslationLossWeights,
    pub gan_labels: GanLabels,
    /// Square crop size; 0 trains on full frames.
    pub crop: usize,
}

impl Default for TranslationHp {
    fn default() -> Self {
        TranslationHp {
            lr0: 1e-4,
            total_steps: 2000,
            ttur_ratio: 4.0,
            beta1: 0.9,
            beta2: 0.99,
            weights: TranslationLossWeights::default(),
            gan_labels: GanLabels::AsPrinted,
            crop: 0,
        }
    }
}

/// Owns the optimizer state of the translation stage; the bundle itself is
/// borrowed per step.
pub struct TranslationTrainer<S: Scalar> {
    gen_params: Vec<(String, Tensor<S>)>,
    disc_params: Vec<(String, Tensor<S>)>,
    opt_gen: Adam<S>,
    opt_disc: Adam<S>,
    schedule: PolySchedule,
    hp: TranslationHp,
    step: u64,
}

impl<S: Scalar> TranslationTrainer<S> {
    pub fn new(bundle: &ModelBundle<S>, hp: TranslationHp) -> Self {
        let gen_params = bundle.translation_params();
        let disc_params = bundle.image_discriminator_params();
        let opt_gen = Adam::with_betas(&gen_params, hp.beta1, hp.beta2);
        let opt_disc = Adam::with_betas(&disc_params, hp.beta1, hp.beta2);
        let schedule = PolySchedule::new(hp.lr0, hp.total_steps);
        TranslationTrainer {
            gen_params,
            disc_params,
            opt_gen,
            opt_disc,
            schedule,
            hp,
            step: 0,
        }
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    fn maybe_crop(&self, x: &Tensor<S>, rng: &mut ChaCha8Rng) -> Tensor<S> {
        let c = self.hp.crop;
        let shape = x.shape();
        if c == 0 || c >= shape[2] {
            return x.clone();
        }
        let y0 = rng.random_range(0..=shape[2] - c);
        let x0 = rng.random_range(0..=shape[3] - c);
        x.crop2d(y0, x0, c, c)
    }

    /// One training step on a source/target image pair. The segmentation
    /// network must be frozen; all five objective components are computed
    /// for both domain directions, then the discriminators update on the
    /// same batch with detached fakes.
    pub fn step(
        &mut self,
        bundle: &ModelBundle<S>,
        x_s: &Tensor<S>,
        x_t: &Tensor<S>,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossReport> {
        debug_assert!(
            bundle.seg_params().iter().all(|(_, p)| !p.requires_grad()),
            "segmentation network must be frozen during translation training"
        );
        let x_s = self.maybe_crop(x_s, rng);
        let x_t = self.maybe_crop(x_t, rng);

        for (_, p) in &self.gen_params {
            p.zero_grad();
        }

        // Guidance on leaf images is constant (the segmentation network is
        // frozen and the inputs carry no gradient).
        let m_s = no_grad(|| bundle.seg.forward(&x_s));
        let m_t = no_grad(|| bundle.seg.forward(&x_t));

        let z_s = bundle.enc_s.forward(&x_s);
        let z_t = bundle.enc_t.forward(&x_t);

        // Within-domain reconstructions.
        let x_ss = bundle.gen_s.forward(&z_s, &m_s);
        let x_tt = bundle.gen_t.forward(&z_t, &m_t);
        let recon_s = loss_recon(&x_ss, &x_s);
        let recon_t = loss_recon(&x_tt, &x_t);

        // Cross-domain translations and the generator-side GAN terms.
        let x_st = bundle.gen_t.forward(&z_s, &m_s);
        let x_ts = bundle.gen_s.forward(&z_t, &m_t);
        let gan_t = loss_lsgan_g(&bundle.disc_t.forward(&x_st), self.hp.gan_labels);
        let gan_s = loss_lsgan_g(&bundle.disc_s.forward(&x_ts), self.hp.gan_labels);

        // Semantic consistency between an image and its translation; the
        // translated map is recorded through the generator.
        let m_st = bundle.seg.forward(&x_st);
        let m_ts = bundle.seg.forward(&x_ts);
        let sce_s = loss_sce(&m_s, &m_st);
        let sce_t = loss_sce(&m_t, &m_ts);

        // Image and latent cycles.
        let z_st = bundle.enc_t.forward(&x_st);
        let z_ts = bundle.enc_s.forward(&x_ts);
        let x_sts = bundle.gen_s.forward(&z_st, &m_st);
        let x_tst = bundle.gen_t.forward(&z_ts, &m_ts);
        let cycle_image_s = loss_cycle_image(&x_sts, &x_s);
        let cycle_image_t = loss_cycle_image(&x_tst, &x_t);
        let cycle_latent_s = loss_cycle_latent(&z_st, &z_s);
        let cycle_latent_t = loss_cycle_latent(&z_ts, &z_t);

        let terms = TranslationLossTerms {
            recon_s,
            recon_t,
            gan_s,
            gan_t,
            cycle_image_s,
            cycle_image_t,
            cycle_latent_s,
            cycle_latent_t,
            sce_s,
            sce_t,
        };
        let total = total_translation_loss(&terms, &self.hp.weights);
        let total_v = total.item().to_f64().unwrap();
        if !total_v.is_finite() {
            let f = |t: &Tensor<S>| t.item().to_f64().unwrap();
            return Err(Error::Train(format!(
                "non-finite translation loss at step {}: recon=({:.4},{:.4}) gan=({:.4},{:.4}) cc_i=({:.4},{:.4}) cc_h=({:.4},{:.4}) sce=({:.4},{:.4})",
                self.step,
                f(&terms.recon_s),
                f(&terms.recon_t),
                f(&terms.gan_s),
                f(&terms.gan_t),
                f(&terms.cycle_image_s),
                f(&terms.cycle_image_t),
                f(&terms.cycle_latent_s),
                f(&terms.cycle_latent_t),
                f(&terms.sce_s),
                f(&terms.sce_t),
            )));
        }
        total.backward();
        let lr_g = self.schedule.lr(self.step);
        self.opt_gen.step(&self.gen_params, lr_g)?;

        // Discriminator update on the same batch, fakes detached.
        for (_, p) in &self.disc_params {
            p.zero_grad();
        }
        let d_t = loss_lsgan_d(
            &bundle.disc_t.forward(&x_t),
            &bundle.disc_t.forward(&x_st.detach()),
            self.hp.gan_labels,
        );
        let d_s = loss_lsgan_d(
            &bundle.disc_s.forward(&x_s),
            &bundle.disc_s.forward(&x_ts.detach()),
            self.hp.gan_labels,
        );
        let d_total = d_t.add(&d_s);
        if !d_total.item().is_finite() {
            return Err(Error::Train(format!(
                "non-finite discriminator loss at step {}",
                self.step
            )));
        }
        d_total.backward();
        self.opt_disc.step(&self.disc_params, lr_g * self.hp.ttur_ratio)?;

        self.step += 1;
        let f = |t: &Tensor<S>| t.item().to_f64().unwrap();
        Ok(LossReport {
            entries: vec![
                ("recon_s", f(&terms.recon_s)),
                ("recon_t", f(&terms.recon_t)),
                ("gan_s", f(&terms.gan_s)),
                ("gan_t", f(&terms.gan_t)),
                ("cc_i_s", f(&terms.cycle_image_s)),
                ("cc_i_t", f(&terms.cycle_image_t)),
                ("cc_h_s", f(&terms.cycle_latent_s)),
                ("cc_h_t", f(&terms.cycle_latent_t)),
                ("sce_s", f(&terms.sce_s)),
                ("sce_t", f(&terms.sce_t)),
                ("d_s", f(&d_s)),
                ("d_t", f(&d_t)),
            ],
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PseudoLabelStats {
    pub labeled: usize,
    pub total: usize,
}

impl PseudoLabelStats {
    pub fn coverage(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.labeled as f64 / self.total as f64
        }
    }
}

/// Per-pixel pseudo-labels: argmax where the max softmax probability
/// reaches the confidence threshold (inclusive), ignore index −1 elsewhere.
pub fn generate_pseudo_labels<S: Scalar>(
    seg: &SegNet<S>,
    images: &[Tensor<S>],
    th_ssl: f64,
) -> (Vec<LabelMap>, PseudoLabelStats) {
    assert!(th_ssl > 0.0 && th_ssl <= 1.0, "th_ssl must lie in (0, 1]");
    let th = crate::sc::<S>(th_ssl);
    let mut labeled = 0usize;
    let mut total = 0usize;
    let maps = images
        .iter()
        .map(|img| {
            let shape = img.shape();
            let (h, w) = (shape[1], shape[2]);
            let batched = img.reshape(&[1, 3, h, w]);
            no_grad(|| {
                let probs = seg.forward(&batched).softmax(1);
                let d = probs.data();
                let k = probs.shape()[1];
                let hw = h * w;
                let mut data = Vec::with_capacity(hw);
                for p in 0..hw {
                    let mut best = 0usize;
                    let mut best_v = d[p];
                    for c in 1..k {
                        let v = d[c * hw + p];
                        if v > best_v {
                            best_v = v;
                            best = c;
                        }
                    }
                    total += 1;
                    if best_v >= th {
                        labeled += 1;
                        data.push(best as i32);
                    } else {
                        data.push(-1);
                    }
                }
                LabelMap { data, h, w }
            })
        })
        .collect();
    (maps, PseudoLabelStats { labeled, total })
}

/// Hyper-parameters of segmentation training.
#[derive(Debug, Clone)]
pub struct SegmentationHp {
    pub lr0: f64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: SegLossWeights,
    /// Validation cadence (steps between mIoU evaluations).
    pub eval_interval: u64,
    /// Plateau bar: stop when mIoU fails to improve by more than this many
    /// points for `patience` consecutive evaluations.
    pub plateau_delta_points: f64,
    pub patience: usize,
}

impl Default for SegmentationHp {
    fn default() -> Self {
        SegmentationHp {
            lr0: 1e-4,
            total_steps: 2000,
            beta1: 0.9,
            beta2: 0.99,
            weights: SegLossWeights::default(),
            eval_interval: 200,
            plateau_delta_points: 0.2,
            patience: 3,
        }
    }
}

pub struct SegTrainer<S: Scalar> {
    seg_params: Vec<(String, Tensor<S>)>,
    disc_params: Vec<(String, Tensor<S>)>,
    opt_seg: Adam<S>,
    opt_disc: Adam<S>,
    schedule: PolySchedule,
    weights: SegLossWeights,
    step: u64,
}

impl<S: Scalar> SegTrainer<S> {
    pub fn new(bundle: &ModelBundle<S>, hp: &SegmentationHp) -> Self {
        let seg_params = bundle.seg_params();
        let disc_params = bundle.seg_disc_params();
        let opt_seg = Adam::with_betas(&seg_params, hp.beta1, hp.beta2);
        let opt_disc = Adam::with_betas(&disc_params, hp.beta1, hp.beta2);
        SegTrainer {
            seg_params,
            disc_params,
            opt_seg,
            opt_disc,
            schedule: PolySchedule::new(hp.lr0, hp.total_steps),
            weights: hp.weights,
            step: 0,
        }
    }

    /// One segmentation step: supervision on a translated source image,
    /// self-supervision on a target image, the output-space adversarial
    /// term; then the discriminator updates on detached maps.
    pub fn step(
        &mut self,
        bundle: &ModelBundle<S>,
        x_trans: &Tensor<S>,
        y_source: &[i32],
        x_target: &Tensor<S>,
        y_pseudo: &[i32],
    ) -> Result<LossReport> {
        for (_, p) in &self.seg_params {
            p.zero_grad();
        }
        let logits_trans = bundle.seg.forward(x_trans);
        let seg_out = loss_seg_ce(&logits_trans, y_source);
        let logits_t = bundle.seg.forward(x_target);
        let ssl_out = loss_seg_ce(&logits_t, y_pseudo);
        let p_t = logits_t.softmax(1);
        let adv = loss_outputspace_adv_m(&p_t, &bundle.seg_disc);
        let total = total_seg_loss(&seg_out.loss, &ssl_out.loss, &adv, &self.weights);
        if !total.item().is_finite() {
            return Err(Error::Train(format!(
                "non-finite segmentation loss at step {}",
                self.step
            )));
        }
        total.backward();
        let lr = self.schedule.lr(self.step);
        self.opt_seg.step(&self.seg_params, lr)?;

        for (_, p) in &self.disc_params {
            p.zero_grad();
        }
        let p_t_d = p_t.detach();
        let p_st_d = logits_trans.softmax(1).detach();
        let d_loss = loss_outputspace_adv_d(&p_t_d, &p_st_d, &bundle.seg_disc);
        if !d_loss.item().is_finite() {
            return Err(Error::Train(format!(
                "non-finite output-space discriminator loss at step {}",
                self.step
            )));
        }
        d_loss.backward();
        self.opt_disc.step(&self.disc_params, lr)?;

        self.step += 1;
        let f = |t: &Tensor<S>| t.item().to_f64().unwrap();
        Ok(LossReport {
            entries: vec![
                ("seg", f(&seg_out.loss)),
                ("ssl", f(&ssl_out.loss)),
                ("adv", f(&adv)),
                ("d_seg", f(&d_loss)),
            ],
        })
    }
}

/// Mean IoU of the segmentation network over an image/label set.
pub fn evaluate_miou<S: Scalar>(
    seg: &SegNet<S>,
    images: &[Tensor<S>],
    labels: &[LabelMap],
    classes: usize,
    include_zero_union: bool,
) -> Result<MiouResult> {
    let mut cm = ConfusionMatrix::new(classes);
    for (img, lab) in images.iter().zip(labels) {
        let pred = no_grad(|| argmax_classes(&seg.forward(&as_batched(img))));
        cm.accumulate(&lab.data, &pred[0])?;
    }
    miou(&cm, include_zero_union)
}

/// Translate every source image with the current models (inference mode).
pub fn materialize_translations<S: Scalar>(
    bundle: &ModelBundle<S>,
    images_s: &[Tensor<S>],
) -> Vec<Tensor<S>> {
    images_s
        .iter()
        .map(|x| {
            let shape = x.shape();
            let batched = as_batched(x);
            no_grad(|| {
                let m = bundle.seg.forward(&batched);
                let z = bundle.enc_s.forward(&batched);
                bundle.gen_t.forward(&z, &m).reshape(&shape)
            })
        })
        .collect()
}

fn as_batched<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let shape = x.shape();
    if shape.len() == 3 {
        x.reshape(&[1, shape[0], shape[1], shape[2]])
    } else {
        x.clone()
    }
}

/// Run translation training for `steps` steps, sampling one image per
/// domain per step.
pub fn run_translation_steps<S: Scalar>(
    trainer: &mut TranslationTrainer<S>,
    bundle: &ModelBundle<S>,
    images_s: &[Tensor<S>],
    images_t: &[Tensor<S>],
    steps: u64,
    sample_rng: &mut ChaCha8Rng,
) -> Result<Vec<LossReport>> {
    assert!(!images_s.is_empty() && !images_t.is_empty(), "empty training split");
    let mut reports = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let i = sample_rng.random_range(0..images_s.len());
        let j = sample_rng.random_range(0..images_t.len());
        let xs = as_batched(&images_s[i]);
        let xt = as_batched(&images_t[j]);
        reports.push(trainer.step(bundle, &xs, &xt, sample_rng)?);
    }
    Ok(reports)
}

/// Outcome of one segmentation stage.
pub struct SegStageOutcome {
    pub reports: Vec<LossReport>,
    pub best_miou_points: f64,
    pub evaluations: Vec<(u64, f64)>,
    pub steps_run: u64,
}

/// Train the segmentation network until the validation mIoU plateaus (no
/// improvement > `plateau_delta_points` for `patience` evaluations) or the
/// step budget runs out.
#[allow(clippy::too_many_arguments)]
pub fn run_segmentation_stage<S: Scalar>(
    bundle: &ModelBundle<S>,
    hp: &SegmentationHp,
    x_trans: &[Tensor<S>],
    y_source: &[LabelMap],
    x_target: &[Tensor<S>],
    y_pseudo: &[LabelMap],
    val_images: &[Tensor<S>],
    val_labels: &[LabelMap],
    classes: usize,
    sample_rng: &mut ChaCha8Rng,
) -> Result<SegStageOutcome> {
    assert!(!x_trans.is_empty() && !x_target.is_empty(), "empty training split");
    assert_eq!(x_trans.len(), y_source.len());
    assert_eq!(x_target.len(), y_pseudo.len());
    let mut trainer = SegTrainer::new(bundle, hp);
    let mut reports = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut evals = Vec::new();
    let mut stale = 0usize;
    let mut steps_run = 0u64;
    for step in 0..hp.total_steps {
        let i = sample_rng.random_range(0..x_trans.len());
        let j = sample_rng.random_range(0..x_target.len());
        reports.push(trainer.step(
            bundle,
            &as_batched(&x_trans[i]),
            &y_source[i].data,
            &as_batched(&x_target[j]),
            &y_pseudo[j].data,
        )?);
        steps_run = step + 1;
        if steps_run % hp.eval_interval == 0 || steps_run == hp.total_steps {
            let result = evaluate_miou(&bundle.seg, val_images, val_labels, classes, false)?;
            let points = result.mean * 100.0;
            evals.push((steps_run, points));
            if points > best + hp.plateau_delta_points {
                best = points;
                stale = 0;
            } else {
                best = best.max(points);
                stale += 1;
                if stale >= hp.patience {
                    break;
                }
            }
        }
    }
    Ok(SegStageOutcome {
        reports,
        best_miou_points: best,
        evaluations: evals,
        steps_run,
    })
}

/// Per-round record of the bidirectional loop.
#[derive(Debug, Clone)]
pub struct RoundMetrics {
    pub round: usize,
    pub miou_points: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub pseudo_coverage: f64,
    pub translation_steps: u64,
    pub seg_steps: u64,
}

/// Hyper-parameters of the full loop.
#[derive(Debug, Clone)]
pub struct LoopHp {
    pub rounds: usize,
    pub i2i_steps_per_round: u64,
    pub translation: TranslationHp,
    pub segmentation: SegmentationHp,
}

/// Hook invoked after materialization each round, before segmentation
/// training; the command layer uses it to write the translated dataset and
/// pseudo-labels to disk.
pub type RoundSink<'a, S> = &'a mut dyn FnMut(usize, &[Tensor<S>], &[LabelMap]) -> Result<()>;

/// The bidirectional learning loop: per round, (1) train translation with
/// the current segmentation network as guidance, (2) re-materialize the
/// translated source set, (3) regenerate pseudo-labels, (4) train the
/// segmentation network until its validation mIoU plateaus.
///
/// Translation networks warm-start across rounds under one continuous decay
/// schedule; the output-space discriminator is re-initialized every round.
#[allow(clippy::too_many_arguments)]
pub fn bidirectional_loop<S: Scalar>(
    bundle: &mut ModelBundle<S>,
    hp: &LoopHp,
    seed: u64,
    images_s: &[Tensor<S>],
    labels_s: &[LabelMap],
    images_t: &[Tensor<S>],
    val_images: &[Tensor<S>],
    val_labels: &[LabelMap],
    th_ssl: f64,
    mut sink: Option<RoundSink<'_, S>>,
) -> Result<Vec<RoundMetrics>> {
    assert!(hp.rounds >= 1, "the loop needs at least one round");
    let classes = bundle.config.classes;
    let mut translation_hp = hp.translation.clone();
    translation_hp.total_steps = hp.i2i_steps_per_round * hp.rounds as u64;
    let mut i2i_trainer: Option<TranslationTrainer<S>> = None;
    let mut metrics = Vec::with_capacity(hp.rounds);

    for round in 1..=hp.rounds {
        // (1) pixel-level alignment with the current guidance.
        bundle.set_seg_trainable(false);
        bundle.set_translation_trainable(true);
        let trainer = i2i_trainer
            .get_or_insert_with(|| TranslationTrainer::new(bundle, translation_hp.clone()));
        let mut i2i_rng = rng::stream(seed, &format!("loop.round{round}.i2i"));
        run_translation_steps(
            trainer,
            bundle,
            images_s,
            images_t,
            hp.i2i_steps_per_round,
            &mut i2i_rng,
        )
        .map_err(|e| Error::Train(format!("round {round}: {e}")))?;

        // (2) materialize the translated source set.
        let x_trans = materialize_translations(bundle, images_s);

        // (3) regenerate pseudo-labels from scratch.
        let (pseudo, stats) = generate_pseudo_labels(&bundle.seg, images_t, th_ssl);
        if let Some(sink) = sink.as_mut() {
            sink(round, &x_trans, &pseudo)
                .map_err(|e| Error::Train(format!("round {round}: {e}")))?;
        }

        // (4) feature-level alignment until the validation mIoU plateaus.
        bundle.set_translation_trainable(false);
        bundle.set_seg_trainable(true);
        bundle.reinit_seg_disc(rng::derive_seed(seed, &format!("loop.round{round}.dseg")));
        let mut seg_rng = rng::stream(seed, &format!("loop.round{round}.seg"));
        let outcome = run_segmentation_stage(
            bundle,
            &hp.segmentation,
            &x_trans,
            labels_s,
            images_t,
            &pseudo,
            val_images,
            val_labels,
            classes,
            &mut seg_rng,
        )
        .map_err(|e| Error::Train(format!("round {round}: {e}")))?;

        let final_eval = evaluate_miou(&bundle.seg, val_images, val_labels, classes, false)?;
        metrics.push(RoundMetrics {
            round,
            miou_points: final_eval.mean * 100.0,
            per_class_iou: final_eval.per_class,
            pseudo_coverage: stats.coverage(),
            translation_steps: trainer.steps_done(),
            seg_steps: outcome.steps_run,
        });
        bundle.set_translation_trainable(true);
    }
    Ok(metrics)
}
