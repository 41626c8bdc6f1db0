//! Root depth by adaptive bins: bin widths regressed from spatial queries,
//! bin confidences from global-local cross-attention, depth as their expectation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder2d::FeatureMaps;
use crate::error::{Error, Result};
use crate::tensor::nn::{Conv1d, Conv2d, Linear};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::invalid(format!("invalid camera intrinsics {self:?}")));
        }
        Ok(())
    }

    /// `sqrt(fx * fy)`, the depth normalization factor.
    pub fn focal_scale(&self) -> f64 {
        (self.fx * self.fy).sqrt()
    }

    pub fn project(&self, p: [f64; 3]) -> [f64; 2] {
        [self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy]
    }
}

/// `d / sqrt(fx * fy)`; `d` may be in any length unit, the result carries the same unit per pixel.
pub fn normalize_depth(d: f64, cam: &CameraIntrinsics) -> Result<f64> {
    cam.validate()?;
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::invalid(format!("depth must be positive, got {d}")));
    }
    Ok(d / cam.focal_scale())
}

pub fn denormalize_depth(d_hat: f64, cam: &CameraIntrinsics) -> f64 {
    d_hat * cam.focal_scale()
}

/// Pinhole back-projection of pixel `(u, v)` at depth `d`.
pub fn backproject_root(uv: [f64; 2], d: f64, cam: &CameraIntrinsics) -> [f64; 3] {
    [(uv[0] - cam.cx) * d / cam.fx, (uv[1] - cam.cy) * d / cam.fy, d]
}

/// `b_i = (max(y_i, 0) + eps) / sum_j (max(y_j, 0) + eps)`.
pub fn compute_bin_widths(y: &[f64], eps: f64) -> Vec<f64> {
    let shifted: Vec<f64> = y.iter().map(|&v| v.max(0.0) + eps).collect();
    let total: f64 = shifted.iter().sum();
    shifted.into_iter().map(|v| v / total).collect()
}

/// Bin midpoints `d_min + (d_max - d_min) * (b_i / 2 + sum_{j<i} b_j)`.
pub fn compute_bin_centers(b: &[f64], d_min: f64, d_max: f64) -> Result<Vec<f64>> {
    if !(d_min < d_max) {
        return Err(Error::invalid(format!("depth range ({d_min}, {d_max}) is empty")));
    }
    let span = d_max - d_min;
    let mut before = 0.0;
    Ok(b
        .iter()
        .map(|&w| {
            let c = d_min + span * (w / 2.0 + before);
            before += w;
            c
        })
        .collect())
}

pub fn depth_from_bins(centers: &[f64], probs: &[f64]) -> f64 {
    centers.iter().zip(probs).map(|(c, p)| c * p).sum()
}

/// Tape version of [`compute_bin_widths`] over the last axis of `[B, N]`.
pub fn bin_widths(tape: &mut Tape, y: Var, eps: f64) -> Result<Var> {
    let r = tape.relu(y);
    let shifted = tape.add_scalar(r, eps);
    let total = tape.sum_axis(shifted, 1)?;
    let b = tape.shape(total)[0];
    let total = tape.reshape(total, &[b, 1])?;
    let total = tape.broadcast_to(total, &tape.shape(shifted).to_vec())?;
    tape.div(shifted, total)
}

/// Tape version of [`compute_bin_centers`]; the exclusive prefix sum is a
/// product with a constant strictly triangular matrix.
pub fn bin_centers(tape: &mut Tape, widths: Var, d_min: f64, d_max: f64) -> Result<Var> {
    if !(d_min < d_max) {
        return Err(Error::invalid(format!("depth range ({d_min}, {d_max}) is empty")));
    }
    let n = tape.shape(widths)[1];
    let mut tri = vec![0.0; n * n];
    for j in 0..n {
        for i in j + 1..n {
            tri[j * n + i] = 1.0;
        }
    }
    let tri = tape.constant(Tensor::new([n, n], tri)?);
    let before = tape.matmul(widths, tri)?;
    let half = tape.scale(widths, 0.5);
    let frac = tape.add(half, before)?;
    let scaled = tape.scale(frac, d_max - d_min);
    Ok(tape.add_scalar(scaled, d_min))
}

/// `sum_i centers_i * probs_i` per row: `[B, N] -> [B]`.
pub fn expected_depth(tape: &mut Tape, centers: Var, probs: Var) -> Result<Var> {
    let prod = tape.mul(centers, probs)?;
    tape.sum_axis(prod, 1)
}

/// Scaled dot-product attention with a residual: `q + softmax(q k^T / sqrt(d)) v`
/// when `residual` is set. Shapes `[B, Nq, d]`, `[B, P, d]`, `[B, P, d]`.
pub fn cross_attention(tape: &mut Tape, q: Var, k: Var, v: Var, residual: bool) -> Result<Var> {
    let d = *tape.shape(q).last().unwrap_or(&1) as f64;
    let kt = tape.permute(k, &[0, 2, 1])?;
    let scores = tape.bmm(q, kt)?;
    let scores = tape.scale(scores, 1.0 / d.sqrt());
    let attn = tape.softmax(scores, 2)?;
    let out = tape.bmm(attn, v)?;
    if residual {
        tape.add(q, out)
    } else {
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthConfig {
    pub bins: usize,
    pub embed: usize,
    pub patch: usize,
    pub queries: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub eps: f64,
}

impl Default for DepthConfig {
    fn default() -> Self {
        DepthConfig {
            bins: 16,
            embed: 64,
            patch: 4,
            queries: 16,
            d_min: 0.1,
            d_max: 2.5,
            eps: 1e-3,
        }
    }
}

/// Per-batch outputs of the depth head; all `[B, N]` except `depth` which is `[B]`.
#[derive(Clone, Copy, Debug)]
pub struct DepthOutput {
    pub widths: Var,
    pub centers: Var,
    pub probs: Var,
    pub depth: Var,
}

#[derive(Clone, Debug)]
pub struct DepthHead {
    pub cfg: DepthConfig,
    pub decode: Conv2d,
    pub patch: Conv2d,
    pub block: [Conv2d; 2],
    pub regressor: [Conv1d; 2],
    pub width_out: Linear,
    pub pose_decode: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub logits: Linear,
    pub tokens: usize,
}

impl DepthHead {
    /// `feat_ch` and `(feat_h, feat_w)` describe the high-resolution features.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        feat_ch: usize,
        feat_h: usize,
        feat_w: usize,
        cfg: &DepthConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let s = cfg.patch;
        if s == 0 || feat_h % s != 0 || feat_w % s != 0 {
            return Err(Error::invalid(format!(
                "feature size {feat_h}x{feat_w} not divisible by patch size {s}"
            )));
        }
        let tokens = (feat_h / s) * (feat_w / s);
        if cfg.queries > tokens {
            return Err(Error::invalid(format!(
                "{} queries requested but only {tokens} patch tokens",
                cfg.queries
            )));
        }
        if cfg.queries < cfg.bins || cfg.bins == 0 {
            return Err(Error::invalid(format!(
                "need at least as many queries ({}) as bins ({})",
                cfg.queries, cfg.bins
            )));
        }
        if !(cfg.d_min < cfg.d_max) || !(cfg.eps > 0.0) {
            return Err(Error::invalid("depth range must be non-empty and eps positive"));
        }
        let e = cfg.embed;
        let width_out = Linear::new(store, &format!("{name}.width"), e, 1, true, rng);
        Ok(DepthHead {
            cfg: cfg.clone(),
            decode: Conv2d::new(store, &format!("{name}.decode"), feat_ch, feat_ch, 1, 1, 0, rng),
            patch: Conv2d::new(store, &format!("{name}.patch"), feat_ch, e, s, s, 0, rng),
            block: [
                Conv2d::new(store, &format!("{name}.block0"), e, e, 3, 1, 1, rng),
                Conv2d::new(store, &format!("{name}.block1"), e, e, 3, 1, 1, rng),
            ],
            regressor: [
                Conv1d::new(store, &format!("{name}.reg0"), e, e, 3, rng),
                Conv1d::new(store, &format!("{name}.reg1"), e, e, 3, rng),
            ],
            width_out,
            pose_decode: Conv2d::new(store, &format!("{name}.pose_decode"), crate::encoder2d::NUM_JOINTS, e, 1, 1, 0, rng),
            key: Conv2d::unbiased(store, &format!("{name}.key"), e, e, 1, 1, 0, rng),
            value: Conv2d::new(store, &format!("{name}.value"), e, e, 1, 1, 0, rng),
            logits: Linear::new(store, &format!("{name}.logits"), e, cfg.bins, true, rng),
            tokens,
        })
    }

    fn to_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let flat = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        tape.permute(flat, &[0, 2, 1])
    }

    /// Spatial query tokens `[B, N_q, S_E]` from the high-resolution features.
    pub fn queries(&self, tape: &mut Tape, t: Var) -> Result<Var> {
        let d = self.decode.forward(tape, t)?;
        let d = tape.relu(d);
        let p = self.patch.forward(tape, d)?;
        let mut h = p;
        for conv in &self.block {
            let c = conv.forward(tape, h)?;
            h = tape.relu(c);
        }
        let tokens = Self::to_tokens(tape, h)?;
        tape.narrow(tokens, 1, 0, self.cfg.queries)
    }

    /// Unnormalized bin-width scores `[B, N]` from the first `N` queries.
    pub fn width_scores(&self, tape: &mut Tape, queries: Var) -> Result<Var> {
        let q = tape.narrow(queries, 1, 0, self.cfg.bins)?;
        let mut h = q;
        for conv in &self.regressor {
            let c = conv.forward(tape, h)?;
            h = tape.relu(c);
        }
        let y = self.width_out.forward(tape, h)?;
        let b = tape.shape(y)[0];
        tape.reshape(y, &[b, self.cfg.bins])
    }

    /// Residual attention maps `[B, N_q, S_E]` from queries and pose-aligned features.
    pub fn attention(&self, tape: &mut Tape, queries: Var, t_p: Var) -> Result<Var> {
        let pd = self.pose_decode.forward(tape, t_p)?;
        let pd = tape.relu(pd);
        let k = self.key.forward(tape, pd)?;
        let v = self.value.forward(tape, pd)?;
        let k = Self::to_tokens(tape, k)?;
        let v = Self::to_tokens(tape, v)?;
        cross_attention(tape, queries, k, v, true)
    }

    /// Bin confidences `[B, N]`: per-token projection, average over tokens, softmax.
    pub fn confidences(&self, tape: &mut Tape, attn: Var) -> Result<Var> {
        let l = self.logits.forward(tape, attn)?;
        let l = tape.mean_axis(l, 1)?;
        tape.softmax(l, 1)
    }

    pub fn forward(&self, tape: &mut Tape, feats: &FeatureMaps) -> Result<DepthOutput> {
        let q = self.queries(tape, feats.t)?;
        let y = self.width_scores(tape, q)?;
        let widths = bin_widths(tape, y, self.cfg.eps)?;
        let centers = bin_centers(tape, widths, self.cfg.d_min, self.cfg.d_max)?;
        let a = self.attention(tape, q, feats.t_p)?;
        let probs = self.confidences(tape, a)?;
        let depth = expected_depth(tape, centers, probs)?;
        Ok(DepthOutput {
            widths,
            centers,
            probs,
            depth,
        })
    }
}
