//! 2D feature aggregation: a one-stage hourglass, pose pooling and the 2D pose head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn::{Conv2d, Linear};
use crate::tensor::{ParamStore, Tape, Var};

pub const NUM_JOINTS: usize = 21;
/// Wrist index in the joint ordering; used as the root joint.
pub const ROOT_JOINT: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Channel count of the high-resolution features.
    pub feat_channels: usize,
    pub pose_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            feat_channels: 64,
            pose_hidden: 32,
        }
    }
}

/// Encoder outputs for one batch.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMaps {
    /// `[B, C_t, H/2, W/2]`
    pub t: Var,
    /// `[B, C_t, H/4, W/4]`
    pub t_d: Var,
    /// `[B, 21, H/4, W/4]`
    pub t_p: Var,
}

/// One hourglass stage: three pooled levels down, three upsampled levels back
/// with skip branches, then a learned stride-2 reduction to half resolution.
#[derive(Clone, Debug)]
pub struct Hourglass {
    pub stem: Conv2d,
    pub down: Vec<Conv2d>,
    pub skip: Vec<Conv2d>,
    pub bottom: Conv2d,
    pub up: Vec<Conv2d>,
    pub reduce: Conv2d,
}

impl Hourglass {
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, ch: usize, rng: &mut impl Rng) -> Self {
        let conv3 = |store: &mut ParamStore, n: String, rng: &mut _| Conv2d::new(store, &n, ch, ch, 3, 1, 1, rng);
        let stem = Conv2d::new(store, &format!("{name}.stem"), in_ch, ch, 3, 1, 1, rng);
        let down = (0..3).map(|i| conv3(store, format!("{name}.down{i}"), rng)).collect();
        let skip = (0..3).map(|i| conv3(store, format!("{name}.skip{i}"), rng)).collect();
        let bottom = conv3(store, format!("{name}.bottom"), rng);
        let up = (0..3).map(|i| conv3(store, format!("{name}.up{i}"), rng)).collect();
        let reduce = Conv2d::new(store, &format!("{name}.reduce"), ch, ch, 2, 2, 0, rng);
        Hourglass {
            stem,
            down,
            skip,
            bottom,
            up,
            reduce,
        }
    }

    /// `[B, C_in, H, W] -> [B, C_t, H/2, W/2]`; `H` and `W` must be divisible by 8.
    pub fn forward(&self, tape: &mut Tape, img: Var) -> Result<Var> {
        let s = tape.shape(img).to_vec();
        if s.len() != 4 || s[2] % 8 != 0 || s[3] % 8 != 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::shape(
                "hourglass",
                format!("image must be [B, C, H, W] with H, W divisible by 8, got {s:?}"),
            ));
        }
        let x = self.stem.forward(tape, img)?;
        let mut x = tape.relu(x);
        let mut skips = Vec::with_capacity(3);
        for (down, skip) in self.down.iter().zip(&self.skip) {
            let sk = skip.forward(tape, x)?;
            skips.push(tape.relu(sk));
            let p = tape.max_pool2d(x, 2)?;
            let d = down.forward(tape, p)?;
            x = tape.relu(d);
        }
        let b = self.bottom.forward(tape, x)?;
        let mut y = tape.relu(b);
        for (up, sk) in self.up.iter().zip(skips.iter().rev()) {
            let u = tape.upsample_nearest(y, 2)?;
            let u = tape.add(u, *sk)?;
            let c = up.forward(tape, u)?;
            y = tape.relu(c);
        }
        let r = self.reduce.forward(tape, y)?;
        Ok(tape.relu(r))
    }
}

/// `T_p = conv1x1(maxpool(T) * bilinear(T, size of maxpool(T)))`.
#[derive(Clone, Debug)]
pub struct PosePool {
    pub align: Conv2d,
}

impl PosePool {
    pub fn new(store: &mut ParamStore, name: &str, feat_ch: usize, rng: &mut impl Rng) -> Self {
        PosePool {
            align: Conv2d::new(store, &format!("{name}.align"), feat_ch, NUM_JOINTS, 1, 1, 0, rng),
        }
    }

    /// Returns `(T_d, T_d * interp(T))`.
    pub fn fuse(&self, tape: &mut Tape, t: Var) -> Result<(Var, Var)> {
        let td = tape.max_pool2d(t, 2)?;
        let (h, w) = (tape.shape(td)[2], tape.shape(td)[3]);
        let interp = tape.bilinear_resize(t, h, w)?;
        let prod = tape.mul(td, interp)?;
        Ok((td, prod))
    }

    pub fn forward(&self, tape: &mut Tape, t: Var) -> Result<(Var, Var)> {
        let (td, prod) = self.fuse(tape, t)?;
        Ok((td, self.align.forward(tape, prod)?))
    }
}

/// Per-joint MLP shared across joints: `[B, 21, h, w] -> [B, 21, 2]` in normalized image units.
#[derive(Clone, Debug)]
pub struct Pose2dHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub spatial: usize,
}

impl Pose2dHead {
    pub fn new(store: &mut ParamStore, name: &str, spatial: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Pose2dHead {
            fc1: Linear::new(store, &format!("{name}.fc1"), spatial, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, 2, true, rng),
            spatial,
        }
    }

    pub fn forward(&self, tape: &mut Tape, tp: Var) -> Result<Var> {
        let s = tape.shape(tp).to_vec();
        if s.len() != 4 || s[2] * s[3] != self.spatial {
            return Err(Error::shape(
                "pose2d_head",
                format!("expected [B, J, h, w] with h*w = {}, got {s:?}", self.spatial),
            ));
        }
        let flat = tape.reshape(tp, &[s[0], s[1], self.spatial])?;
        let h = self.fc1.forward(tape, flat)?;
        let h = tape.relu(h);
        self.fc2.forward(tape, h)
    }
}

/// Hourglass, pose pooling and 2D pose head for a fixed input resolution.
#[derive(Clone, Debug)]
pub struct Encoder2d {
    pub hourglass: Hourglass,
    pub pose_pool: PosePool,
    pub pose_head: Pose2dHead,
    pub height: usize,
    pub width: usize,
}

impl Encoder2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        height: usize,
        width: usize,
        cfg: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if height % 8 != 0 || width % 8 != 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "image size {height}x{width} must be divisible by 8"
            )));
        }
        Ok(Encoder2d {
            hourglass: Hourglass::new(store, &format!("{name}.hg"), cfg.in_channels, cfg.feat_channels, rng),
            pose_pool: PosePool::new(store, &format!("{name}.pool"), cfg.feat_channels, rng),
            pose_head: Pose2dHead::new(store, &format!("{name}.pose"), (height / 4) * (width / 4), cfg.pose_hidden, rng),
            height,
            width,
        })
    }

    pub fn features(&self, tape: &mut Tape, img: Var) -> Result<FeatureMaps> {
        let s = tape.shape(img);
        if s.len() != 4 || s[2] != self.height || s[3] != self.width {
            return Err(Error::shape(
                "encoder",
                format!("expected [B, C, {}, {}], got {s:?}", self.height, self.width),
            ));
        }
        let t = self.hourglass.forward(tape, img)?;
        let (t_d, t_p) = self.pose_pool.forward(tape, t)?;
        Ok(FeatureMaps { t, t_d, t_p })
    }

    /// Features plus normalized 2D joints `[B, 21, 2]`.
    pub fn forward(&self, tape: &mut Tape, img: Var) -> Result<(FeatureMaps, Var)> {
        let f = self.features(tape, img)?;
        let j = self.pose_head.forward(tape, f.t_p)?;
        Ok((f, j))
    }
}
