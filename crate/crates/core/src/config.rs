//! Flat key=value run configuration. Every knob of the pipeline lives here
//! with its default; a config file overrides defaults, CLI flags override
//! the file, and the fully resolved config is echoed into the run directory
//! so a run can be reproduced from its own artifacts.

use crate::error::{Error, Result};
use crate::losses::{GanLabels, SegLossWeights, TranslationLossWeights};
use crate::models::ModelConfig;
use crate::train::{LoopHp, SegmentationHp, TranslationHp};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    pub width: usize,
    pub classes: usize,
    pub use_spade: bool,
    pub data_root: String,
    pub run_dir: String,
    pub train_s: usize,
    pub train_t: usize,
    pub val_t: usize,
    pub batch_size: usize,
    // translation stage
    pub i2i_steps: u64,
    pub lr0: f64,
    pub ttur_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_recon: f64,
    pub lambda_gan: f64,
    pub lambda_cc_i: f64,
    pub lambda_cc_h: f64,
    pub lambda_sce: f64,
    pub lsgan_conventional_labels: bool,
    pub crop_size: usize,
    // segmentation stage
    pub seg_steps: u64,
    pub seg_lr0: f64,
    pub lambda_seg: f64,
    pub lambda_ssl: f64,
    pub lambda_adv: f64,
    pub th_ssl: f64,
    pub eval_interval: u64,
    pub plateau_delta: f64,
    pub patience: usize,
    // loop
    pub rounds: usize,
    // evaluation
    pub miou_include_zero_union: bool,
    pub fid_count: usize,
    // per-invocation paths (may be empty)
    pub checkpoint: String,
    pub input: String,
    pub guidance: String,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            image_size: 64,
            width: 16,
            classes: 5,
            use_spade: true,
            data_root: "runs/data".into(),
            run_dir: "runs/default".into(),
            train_s: 200,
            train_t: 200,
            val_t: 50,
            batch_size: 1,
            i2i_steps: 2000,
            lr0: 1e-4,
            ttur_ratio: 4.0,
            beta1: 0.9,
            beta2: 0.99,
            lambda_recon: 10.0,
            lambda_gan: 1.0,
            lambda_cc_i: 10.0,
            lambda_cc_h: 1.0,
            lambda_sce: 10.0,
            lsgan_conventional_labels: false,
            crop_size: 0,
            seg_steps: 2000,
            seg_lr0: 1e-4,
            lambda_seg: 1.0,
            lambda_ssl: 1.0,
            lambda_adv: 1e-3,
            th_ssl: 0.9,
            eval_interval: 200,
            plateau_delta: 0.2,
            patience: 3,
            rounds: 2,
            miou_include_zero_union: false,
            fid_count: 64,
            checkpoint: String::new(),
            input: String::new(),
            guidance: String::new(),
            out_dir: String::new(),
        }
    }
}

macro_rules! config_keys {
    ($self:ident, $apply:ident) => {
        $apply!(seed, u64);
        $apply!(image_size, usize);
        $apply!(width, usize);
        $apply!(classes, usize);
        $apply!(use_spade, bool);
        $apply!(data_root, String);
        $apply!(run_dir, String);
        $apply!(train_s, usize);
        $apply!(train_t, usize);
        $apply!(val_t, usize);
        $apply!(batch_size, usize);
        $apply!(i2i_steps, u64);
        $apply!(lr0, f64);
        $apply!(ttur_ratio, f64);
        $apply!(beta1, f64);
        $apply!(beta2, f64);
        $apply!(lambda_recon, f64);
        $apply!(lambda_gan, f64);
        $apply!(lambda_cc_i, f64);
        $apply!(lambda_cc_h, f64);
        $apply!(lambda_sce, f64);
        $apply!(lsgan_conventional_labels, bool);
        $apply!(crop_size, usize);
        $apply!(seg_steps, u64);
        $apply!(seg_lr0, f64);
        $apply!(lambda_seg, f64);
        $apply!(lambda_ssl, f64);
        $apply!(lambda_adv, f64);
        $apply!(th_ssl, f64);
        $apply!(eval_interval, u64);
        $apply!(plateau_delta, f64);
        $apply!(patience, usize);
        $apply!(rounds, usize);
        $apply!(miou_include_zero_union, bool);
        $apply!(fid_count, usize);
        $apply!(checkpoint, String);
        $apply!(input, String);
        $apply!(guidance, String);
        $apply!(out_dir, String);
    };
}

impl RunConfig {
    /// Apply one `key=value` override. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! apply {
            ($field:ident, String) => {
                if key == stringify!($field) {
                    self.$field = value.to_string();
                    return Ok(());
                }
            };
            ($field:ident, bool) => {
                if key == stringify!($field) {
                    self.$field = match value {
                        "true" | "1" => true,
                        "false" | "0" => false,
                        other => {
                            return Err(Error::Config(format!(
                                "key {key}: expected true/false, got '{other}'"
                            )))
                        }
                    };
                    return Ok(());
                }
            };
            ($field:ident, $ty:ty) => {
                if key == stringify!($field) {
                    self.$field = value.parse::<$ty>().map_err(|_| {
                        Error::Config(format!("key {key}: cannot parse '{value}'"))
                    })?;
                    return Ok(());
                }
            };
        }
        config_keys!(self, apply);
        Err(Error::Config(format!("unknown config key '{key}'")))
    }

    /// Canonical text form; parsing it back reproduces the config exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        macro_rules! apply {
            ($field:ident, $ty:tt) => {
                out.push_str(&format!("{}={}\n", stringify!($field), self.$field));
            };
        }
        config_keys!(self, apply);
        out
    }

    pub fn parse_text(text: &str, source: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.merge_text(text, source)?;
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{source}: line {}: expected key=value", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse_text(&text, &path.display().to_string())
    }

    /// Sanity checks after all overrides are in.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size != 1 {
            return bad("batch_size: only 1 is supported".into());
        }
        if !(self.th_ssl > 0.0 && self.th_ssl <= 1.0) {
            return bad(format!("th_ssl must lie in (0, 1], got {}", self.th_ssl));
        }
        if self.image_size % 8 != 0 || self.image_size < 16 {
            return bad(format!(
                "image_size must be a multiple of 8 and at least 16, got {}",
                self.image_size
            ));
        }
        if self.rounds == 0 || self.i2i_steps == 0 || self.seg_steps == 0 {
            return bad("step budgets and rounds must be positive".into());
        }
        for (name, v) in [
            ("lambda_recon", self.lambda_recon),
            ("lambda_gan", self.lambda_gan),
            ("lambda_cc_i", self.lambda_cc_i),
            ("lambda_cc_h", self.lambda_cc_h),
            ("lambda_sce", self.lambda_sce),
            ("lambda_seg", self.lambda_seg),
            ("lambda_ssl", self.lambda_ssl),
            ("lambda_adv", self.lambda_adv),
        ] {
            if v < 0.0 {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }

    /// Write the resolved config into the run directory.
    pub fn echo(&self, run_dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join("config.resolved");
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            width: self.width,
            classes: self.classes,
            image_size: self.image_size,
            use_spade: self.use_spade,
        }
    }

    pub fn gan_labels(&self) -> GanLabels {
        if self.lsgan_conventional_labels {
            GanLabels::Conventional
        } else {
            GanLabels::AsPrinted
        }
    }

    pub fn translation_weights(&self) -> TranslationLossWeights {
        TranslationLossWeights {
            recon: self.lambda_recon,
            gan: self.lambda_gan,
            cycle_image: self.lambda_cc_i,
            cycle_latent: self.lambda_cc_h,
            sce: self.lambda_sce,
        }
    }

    pub fn seg_weights(&self) -> SegLossWeights {
        SegLossWeights {
            seg: self.lambda_seg,
            ssl: self.lambda_ssl,
            adv: self.lambda_adv,
        }
    }

    pub fn translation_hp(&self) -> TranslationHp {
        TranslationHp {
            lr0: self.lr0,
            total_steps: self.i2i_steps,
            ttur_ratio: self.ttur_ratio,
            beta1: self.beta1,
            beta2: self.beta2,
            weights: self.translation_weights(),
            gan_labels: self.gan_labels(),
            crop: self.crop_size,
        }
    }

    pub fn segmentation_hp(&self) -> SegmentationHp {
        SegmentationHp {
            lr0: self.seg_lr0,
            total_steps: self.seg_steps,
            beta1: self.beta1,
            beta2: self.beta2,
            weights: self.seg_weights(),
            eval_interval: self.eval_interval.max(1),
            plateau_delta_points: self.plateau_delta,
            patience: self.patience,
        }
    }

    pub fn loop_hp(&self) -> LoopHp {
        LoopHp {
            rounds: self.rounds,
            i2i_steps_per_round: self.i2i_steps,
            translation: self.translation_hp(),
            segmentation: self.segmentation_hp(),
        }
    }
}
