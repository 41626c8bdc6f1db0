//! Run configuration, serialized as JSON next to every run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::depthhead::DepthConfig;
use crate::encoder2d::EncoderConfig;
use crate::error::{Error, Result};
use crate::gcn::{DecoderConfig, InceptionConfig};
use crate::losses::LossConfig;

/// Step decay: `init` until `decay_epoch`, then `init * decay_factor`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub init: f64,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            init: 1e-4,
            decay_epoch: 40,
            decay_factor: 0.1,
            epochs: 50,
        }
    }
}

impl LrSchedule {
    /// Learning rate used during zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.init * self.decay_factor
        } else {
            self.init
        }
    }
}

/// Scene sampling for the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub template: String,
    pub image_size: usize,
    /// Base focal length in pixels; `fx = fy`.
    pub focal: f64,
    /// Relative focal jitter, uniform in `[-j, j]`.
    pub focal_jitter: f64,
    /// Principal point offset from the image centre, uniform in `[-j, j]` px.
    pub principal_jitter: f64,
    /// Normalized root depth band the scenes are drawn from.
    pub depth_band: [f64; 2],
    /// Largest absolute joint flexion in degrees.
    pub max_flex_deg: f64,
    pub max_abduction_deg: f64,
    /// Out-of-plane tilt about the camera x and y axes, degrees.
    pub max_tilt_deg: f64,
    /// In-plane rotation about the optical axis, degrees.
    pub max_roll_deg: f64,
    /// Every projected vertex must keep this distance from the border, px.
    pub margin_px: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            template: "toy".into(),
            image_size: 64,
            focal: 100.0,
            focal_jitter: 0.05,
            principal_jitter: 1.0,
            depth_band: [3.8, 8.0],
            max_flex_deg: 60.0,
            max_abduction_deg: 15.0,
            max_tilt_deg: 40.0,
            max_roll_deg: 180.0,
            margin_px: 1.0,
        }
    }
}

/// On-the-fly geometric augmentation applied to training batches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub max_rotation_deg: f64,
    /// Zoom factor drawn uniformly from `[1 - s, 1 + s]`.
    pub max_scale: f64,
    pub max_translate_px: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            max_rotation_deg: 15.0,
            max_scale: 0.05,
            max_translate_px: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Dataset directory written by `gen-data`; when absent the training set
    /// is synthesized in memory from `synth` and the run seed.
    pub train_dir: Option<PathBuf>,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub synth: SynthConfig,
    pub augment: AugmentConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_dir: None,
            train_samples: 512,
            eval_samples: 128,
            synth: SynthConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// `"toy"`, `"toy-dense"` or a path to a topology file.
    pub topology: String,
    pub image_size: usize,
    pub hierarchy_levels: usize,
    pub encoder: EncoderConfig,
    pub latent_blocks: usize,
    pub decoder: DecoderConfig,
    pub depth: DepthConfig,
    pub loss: LossConfig,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub seed: u64,
    pub data: DataConfig,
    /// Write a checkpoint after every this many epochs (the last epoch always gets one).
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// 64x64 images, toy template, batch 8.
    pub fn desk() -> Self {
        RunConfig {
            topology: "toy".into(),
            image_size: 64,
            hierarchy_levels: 3,
            encoder: EncoderConfig {
                in_channels: 3,
                feat_channels: 32,
                pose_hidden: 32,
            },
            latent_blocks: 2,
            decoder: DecoderConfig {
                latent_dim: 256,
                channels: vec![96, 48, 24],
                inception: InceptionConfig::default(),
                final_order: 3,
            },
            depth: DepthConfig {
                bins: 16,
                embed: 32,
                patch: 4,
                queries: 16,
                d_min: 3.5,
                d_max: 8.5,
                eps: 1e-3,
            },
            loss: LossConfig::default(),
            schedule: LrSchedule::default(),
            batch_size: 8,
            seed: 0,
            data: DataConfig::default(),
            checkpoint_every: 1,
            max_steps: None,
        }
    }

    /// 224x224 images, batch 32, full-width decoder and the original depth range.
    pub fn paper_scale() -> Self {
        let mut c = Self::desk();
        c.image_size = 224;
        c.encoder.feat_channels = 64;
        c.decoder = DecoderConfig::default();
        c.depth = DepthConfig::default();
        c.batch_size = 32;
        c.data.synth.image_size = 224;
        c.data.synth.focal = 500.0;
        c.data.synth.depth_band = [1.0, 2.35];
        c.data.augment.max_translate_px = 10.0;
        c
    }

    /// Eight fixed samples, one batch per step, no augmentation.
    pub fn overfit() -> Self {
        let mut c = Self::desk();
        c.data.train_samples = 8;
        c.data.eval_samples = 0;
        c.data.augment.enabled = false;
        c.batch_size = 8;
        c.schedule = LrSchedule {
            init: 1e-3,
            decay_epoch: 400,
            decay_factor: 0.1,
            epochs: 500,
        };
        c.checkpoint_every = 500;
        c
    }

    /// Tiny network for fast tests.
    pub fn tiny() -> Self {
        let mut c = Self::desk();
        c.image_size = 32;
        c.data.synth.image_size = 32;
        c.data.synth.focal = 50.0;
        c.encoder.feat_channels = 8;
        c.encoder.pose_hidden = 8;
        c.latent_blocks = 1;
        c.decoder.latent_dim = 32;
        c.decoder.channels = vec![16, 8, 8];
        c.depth.embed = 8;
        c.depth.patch = 2;
        c.depth.bins = 4;
        c.depth.queries = 4;
        c.depth.d_min = 7.5;
        c.depth.d_max = 14.5;
        c.data.synth.depth_band = [8.0, 14.0];
        c.data.train_samples = 4;
        c.data.eval_samples = 2;
        c.batch_size = 2;
        c.schedule = LrSchedule {
            init: 1e-3,
            decay_epoch: 1,
            decay_factor: 0.1,
            epochs: 2,
        };
        c
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("hierarchy_levels", self.hierarchy_levels),
            ("encoder.feat_channels", self.encoder.feat_channels),
            ("encoder.pose_hidden", self.encoder.pose_hidden),
            ("decoder.latent_dim", self.decoder.latent_dim),
            ("decoder.final_order", self.decoder.final_order),
            ("depth.bins", self.depth.bins),
            ("depth.embed", self.depth.embed),
            ("depth.patch", self.depth.patch),
            ("depth.queries", self.depth.queries),
            ("batch_size", self.batch_size),
            ("schedule.epochs", self.schedule.epochs),
            ("checkpoint_every", self.checkpoint_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.decoder.channels.iter().any(|&c| c == 0) || self.decoder.inception.orders.iter().any(|&k| k == 0) {
            return Err(Error::invalid("decoder channels and orders must be positive"));
        }
        if !(self.schedule.init > 0.0 && self.schedule.decay_factor > 0.0) {
            return Err(Error::invalid("learning rate and decay factor must be positive"));
        }
        let w = self.loss.weights.as_array();
        if w.iter().any(|&x| !(x >= 0.0)) || !(self.loss.si_lambda > 0.0) {
            return Err(Error::invalid("loss weights must be non-negative and the SI weight positive"));
        }
        if self.data.synth.image_size != self.image_size {
            return Err(Error::invalid(format!(
                "synthetic image size {} differs from model input {}",
                self.data.synth.image_size, self.image_size
            )));
        }
        let [lo, hi] = self.data.synth.depth_band;
        if !(0.0 < lo && lo < hi) {
            return Err(Error::invalid("synthetic depth band must be a positive interval"));
        }
        if lo < self.depth.d_min || hi > self.depth.d_max {
            return Err(Error::invalid(format!(
                "synthetic depth band [{lo}, {hi}] exceeds the bin range [{}, {}]",
                self.depth.d_min, self.depth.d_max
            )));
        }
        if self.data.train_dir.is_none() && self.data.train_samples == 0 {
            return Err(Error::invalid("no training data: set train_dir or train_samples"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
