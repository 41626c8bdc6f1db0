//! Small parameterized layers built from tape primitives.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Kaiming-normal weights: N(0, 2 / fan_in), scaled by `gain`.
pub fn kaiming_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let numel = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..numel).map(|_| normal.sample(rng)).collect())
        .expect("shape matches numel")
}

/// Affine map over the last axis: `[.., in] -> [.., out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self::with_gain(store, name, in_dim, out_dim, bias, 1.0, rng)
    }

    pub fn with_gain(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_normal(rng, &[in_dim, out_dim], in_dim, gain),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::shape(
                "Linear",
                format!("expected last axis {}, got {:?}", self.in_dim, shape),
            ));
        }
        let rows = shape[..shape.len() - 1].iter().product();
        let flat = tape.reshape(x, &[rows, self.in_dim])?;
        let w = tape.param(self.weight);
        let mut y = tape.matmul(flat, w)?;
        if let Some(b) = self.bias {
            let b = tape.param(b);
            y = tape.add_bcast(y, b)?;
        }
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = self.out_dim;
        tape.reshape(y, &oshape)
    }
}

/// 2D convolution with a square kernel and per-filter bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_normal(rng, &[out_ch, in_ch, kernel, kernel], fan_in, 1.0),
        );
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros([out_ch])));
        Conv2d {
            weight,
            bias,
            kernel,
            stride,
            pad,
        }
    }

    /// Same as [`Conv2d::new`] without a bias term.
    #[allow(clippy::too_many_arguments)]
    pub fn unbiased(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_normal(rng, &[out_ch, in_ch, kernel, kernel], fan_in, 1.0),
        );
        Conv2d {
            weight,
            bias: None,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.conv2d(x, w, self.stride, self.pad)?;
        match self.bias {
            Some(b) => add_channel_bias(tape, y, b),
            None => Ok(y),
        }
    }
}

fn add_channel_bias(tape: &mut Tape, y: Var, bias: ParamId) -> Result<Var> {
    let c = tape.shape(y)[1];
    let b = tape.param(bias);
    let b = tape.reshape(b, &[1, c, 1, 1])?;
    tape.add_bcast(y, b)
}

/// 1D convolution along the token axis of `[B, L, C]` ("same" padding, odd kernel).
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "Conv1d kernel must be odd");
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_normal(rng, &[out_ch, in_ch, 1, kernel], in_ch * kernel, 1.0),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_ch]));
        Conv1d { weight, bias, kernel }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("Conv1d", format!("expected [B, L, C], got {s:?}")));
        }
        let (b, l, c) = (s[0], s[1], s[2]);
        let xt = tape.permute(x, &[0, 2, 1])?;
        let img = tape.reshape(xt, &[b, c, 1, l])?;
        let w = tape.param(self.weight);
        let y = tape.conv2d_padded(img, w, 1, 0, self.kernel / 2)?;
        let y = add_channel_bias(tape, y, self.bias)?;
        let f = tape.shape(y)[1];
        let y = tape.reshape(y, &[b, f, l])?;
        tape.permute(y, &[0, 2, 1])
    }
}
