//! Chebyshev spectral graph convolutions and the coarse-to-fine mesh decoder.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meshgraph::{build_scaled_laplacian, GraphHierarchy, MeshGraph};
use crate::tensor::nn::{kaiming_normal, Linear};
use crate::tensor::{CsrMatrix, ParamId, ParamStore, Tape, Tensor, Var};

/// `y = sum_k T_k(L) x W_k + bias` on features shaped `[B, N, C_in]`.
#[derive(Clone, Debug)]
pub struct ChebConvLayer {
    pub order: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[order, in_ch, out_ch]`
    pub weight: ParamId,
    pub bias: ParamId,
    pub laplacian: Arc<CsrMatrix>,
}

impl ChebConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        laplacian: Arc<CsrMatrix>,
        order: usize,
        in_ch: usize,
        out_ch: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if order < 1 {
            return Err(Error::invalid("Chebyshev order must be at least 1"));
        }
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_normal(rng, &[order, in_ch, out_ch], order * in_ch, gain),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_ch]));
        Ok(ChebConvLayer {
            order,
            in_ch,
            out_ch,
            weight,
            bias,
            laplacian,
        })
    }

    /// Stacks `T_0 x .. T_{K-1} x` along the channel axis.
    pub fn basis(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut terms = vec![x];
        if self.order > 1 {
            terms.push(tape.spmm(&self.laplacian, x)?);
        }
        for k in 2..self.order {
            let lx = tape.spmm(&self.laplacian, terms[k - 1])?;
            let twice = tape.scale(lx, 2.0);
            terms.push(tape.sub(twice, terms[k - 2])?);
        }
        if terms.len() == 1 {
            Ok(x)
        } else {
            tape.concat(&terms, 2)
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.laplacian.rows() || s[2] != self.in_ch {
            return Err(Error::shape(
                "cheb_conv",
                format!(
                    "expected [B, {}, {}], got {s:?}",
                    self.laplacian.rows(),
                    self.in_ch
                ),
            ));
        }
        let (b, n) = (s[0], s[1]);
        let basis = self.basis(tape, x)?;
        let flat = tape.reshape(basis, &[b * n, self.order * self.in_ch])?;
        let w = tape.param(self.weight);
        let w = tape.reshape(w, &[self.order * self.in_ch, self.out_ch])?;
        let y = tape.matmul(flat, w)?;
        let bias = tape.param(self.bias);
        let y = tape.add_bcast(y, bias)?;
        tape.reshape(y, &[b, n, self.out_ch])
    }
}

/// Channel attention: `x * sigmoid(W2 relu(W1 mean_v(x)))`.
#[derive(Clone, Debug)]
pub struct SEGate {
    pub reduce: Linear,
    pub expand: Linear,
}

impl SEGate {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, ratio: usize, rng: &mut impl Rng) -> Self {
        let hidden = (channels / ratio.max(1)).max(1);
        SEGate {
            reduce: Linear::new(store, &format!("{name}.reduce"), channels, hidden, false, rng),
            expand: Linear::new(store, &format!("{name}.expand"), hidden, channels, false, rng),
        }
    }

    /// Per-sample channel gates `[B, C]` from `[B, N, C]`, averaging only over `rows` when given.
    pub fn gates(&self, tape: &mut Tape, x: Var, rows: Option<&Arc<Vec<usize>>>) -> Result<Var> {
        let pooled_src = match rows {
            Some(r) => tape.index_select(x, 1, r)?,
            None => x,
        };
        let m = tape.mean_axis(pooled_src, 1)?;
        let h = self.reduce.forward(tape, m)?;
        let h = tape.relu(h);
        let s = self.expand.forward(tape, h)?;
        Ok(tape.sigmoid(s))
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, rows: Option<&Arc<Vec<usize>>>) -> Result<Var> {
        let s = self.gates(tape, x, rows)?;
        let (b, c) = (tape.shape(s)[0], tape.shape(s)[1]);
        let s = tape.reshape(s, &[b, 1, c])?;
        tape.mul_bcast(x, s)
    }
}

/// How the three branches of an inception sub-block are wired.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchLayout {
    /// Every branch reads the sub-block input.
    #[default]
    Parallel,
    /// Each branch reads the previous branch's output.
    Serial,
}

#[derive(Clone, Debug)]
pub struct InceptionSubBlock {
    pub branches: Vec<ChebConvLayer>,
    pub mix: Linear,
    pub layout: BranchLayout,
    pub residual: bool,
}

impl InceptionSubBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        laplacian: &Arc<CsrMatrix>,
        orders: &[usize],
        in_ch: usize,
        out_ch: usize,
        layout: BranchLayout,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut branches = Vec::with_capacity(orders.len());
        for (i, &k) in orders.iter().enumerate() {
            let cin = if layout == BranchLayout::Serial && i > 0 { out_ch } else { in_ch };
            branches.push(ChebConvLayer::new(
                store,
                &format!("{name}.branch{i}"),
                Arc::clone(laplacian),
                k,
                cin,
                out_ch,
                1.0,
                rng,
            )?);
        }
        let mix = Linear::new(store, &format!("{name}.mix"), orders.len() * out_ch, out_ch, true, rng);
        Ok(InceptionSubBlock {
            branches,
            mix,
            layout,
            residual: in_ch == out_ch,
        })
    }

    /// `relu(mix(concat(branches)))`, without the residual.
    pub fn body(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.branches.len());
        let mut cur = x;
        for br in &self.branches {
            let src = match self.layout {
                BranchLayout::Parallel => x,
                BranchLayout::Serial => cur,
            };
            cur = br.forward(tape, src)?;
            outs.push(cur);
        }
        let cat = tape.concat(&outs, 2)?;
        let y = self.mix.forward(tape, cat)?;
        Ok(tape.relu(y))
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = self.body(tape, x)?;
        if self.residual {
            tape.add(y, x)
        } else {
            Ok(y)
        }
    }

    /// Largest hop distance that can influence an output row.
    pub fn receptive_radius(&self) -> usize {
        let r = self.branches.iter().map(|b| b.order - 1);
        match self.layout {
            BranchLayout::Parallel => r.max().unwrap_or(0),
            BranchLayout::Serial => r.sum(),
        }
    }
}

/// Two inception sub-blocks in series, the second gated by an [`SEGate`].
#[derive(Clone, Debug)]
pub struct InceptionGraphBlock {
    pub first: InceptionSubBlock,
    pub second: InceptionSubBlock,
    pub gate: SEGate,
    /// Non-fake vertex rows, used for the gate's vertex average.
    pub real_rows: Option<Arc<Vec<usize>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InceptionConfig {
    pub orders: Vec<usize>,
    pub se_ratio: usize,
    pub layout: BranchLayout,
}

impl Default for InceptionConfig {
    fn default() -> Self {
        InceptionConfig {
            orders: vec![2, 3, 4],
            se_ratio: 4,
            layout: BranchLayout::Parallel,
        }
    }
}

impl InceptionGraphBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        laplacian: &Arc<CsrMatrix>,
        real_rows: Option<Arc<Vec<usize>>>,
        in_ch: usize,
        out_ch: usize,
        cfg: &InceptionConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.orders.is_empty() || cfg.orders.windows(2).any(|w| w[0] >= w[1]) || cfg.orders[0] < 1 {
            return Err(Error::invalid(format!(
                "branch orders must be positive and strictly increasing, got {:?}",
                cfg.orders
            )));
        }
        let first = InceptionSubBlock::new(store, &format!("{name}.sub0"), laplacian, &cfg.orders, in_ch, out_ch, cfg.layout, rng)?;
        let second = InceptionSubBlock::new(store, &format!("{name}.sub1"), laplacian, &cfg.orders, out_ch, out_ch, cfg.layout, rng)?;
        let gate = SEGate::new(store, &format!("{name}.se"), out_ch, cfg.se_ratio, rng);
        Ok(InceptionGraphBlock {
            first,
            second,
            gate,
            real_rows,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h1 = self.first.forward(tape, x)?;
        let body = self.second.body(tape, h1)?;
        let gated = self.gate.forward(tape, body, self.real_rows.as_ref())?;
        tape.add(gated, h1)
    }
}

/// Two-layer residual MLP block: `relu(x + W2 relu(W1 x))`.
#[derive(Clone, Debug)]
pub struct ResidualFc {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ResidualFc {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        ResidualFc {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim, true, rng),
            fc2: Linear::with_gain(store, &format!("{name}.fc2"), dim, dim, true, 0.5, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.relu(h);
        let h = self.fc2.forward(tape, h)?;
        let y = tape.add(x, h)?;
        Ok(tape.relu(y))
    }
}

/// Maps the encoder's high-resolution features and pose-aligned features to a latent vector.
#[derive(Clone, Debug)]
pub struct LatentHead {
    pub input: Linear,
    pub blocks: Vec<ResidualFc>,
}

impl LatentHead {
    /// `feat_ch` channels are average-pooled; `pose_len` is the flattened pose-feature length.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        feat_ch: usize,
        pose_len: usize,
        dim: usize,
        num_blocks: usize,
        rng: &mut impl Rng,
    ) -> Self {
        LatentHead {
            input: Linear::new(store, &format!("{name}.input"), feat_ch + pose_len, dim, true, rng),
            blocks: (0..num_blocks)
                .map(|i| ResidualFc::new(store, &format!("{name}.res{i}"), dim, rng))
                .collect(),
        }
    }

    /// `feat`: `[B, C, H, W]`; `pose`: `[B, J, h, w]`. Returns `[B, D]`.
    pub fn forward(&self, tape: &mut Tape, feat: Var, pose: Var) -> Result<Var> {
        let fs = tape.shape(feat).to_vec();
        let ps = tape.shape(pose).to_vec();
        if fs.len() != 4 || ps.len() != 4 || fs[0] != ps[0] {
            return Err(Error::shape("latent", format!("features {fs:?}, pose features {ps:?}")));
        }
        let b = fs[0];
        let flat = tape.reshape(feat, &[b, fs[1], fs[2] * fs[3]])?;
        let pooled = tape.mean_axis(flat, 2)?;
        let pose_flat = tape.reshape(pose, &[b, ps[1] * ps[2] * ps[3]])?;
        let cat = tape.concat(&[pooled, pose_flat], 1)?;
        let h = self.input.forward(tape, cat)?;
        let mut h = tape.relu(h);
        for blk in &self.blocks {
            h = blk.forward(tape, h)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub latent_dim: usize,
    /// Channels entering each inception stage, coarse to fine, followed by the
    /// width fed to the final convolution. Its length minus one is the number
    /// of upsampling stages.
    pub channels: Vec<usize>,
    pub inception: InceptionConfig,
    pub final_order: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            latent_dim: 512,
            channels: vec![256, 128, 64],
            inception: InceptionConfig::default(),
            final_order: 3,
        }
    }
}

/// Latent vector to root-relative mesh vertices, coarse to fine.
#[derive(Clone, Debug)]
pub struct MeshDecoder {
    pub fc: Linear,
    pub blocks: Vec<InceptionGraphBlock>,
    pub upsample: Vec<Arc<Vec<usize>>>,
    pub output: ChebConvLayer,
    pub start_level: usize,
    pub start_vertices: usize,
    pub start_channels: usize,
    pub num_vertices: usize,
}

impl MeshDecoder {
    /// `base` is the original mesh; `hierarchy` must have been coarsened from it.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        base: &MeshGraph,
        hierarchy: &GraphHierarchy,
        cfg: &DecoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let stages = cfg.channels.len().saturating_sub(1);
        if stages == 0 || stages > hierarchy.num_coarse_levels() {
            return Err(Error::invalid(format!(
                "decoder needs 1..={} upsampling stages, channel plan {:?} gives {stages}",
                hierarchy.num_coarse_levels(),
                cfg.channels
            )));
        }
        if hierarchy.num_original() != base.num_vertices {
            return Err(Error::invalid("hierarchy was built for a different mesh"));
        }
        let start_vertices = hierarchy.levels[stages].num_vertices;
        let fc = Linear::new(store, &format!("{name}.fc"), cfg.latent_dim, start_vertices * cfg.channels[0], true, rng);
        let mut blocks = Vec::with_capacity(stages);
        let mut upsample = Vec::with_capacity(stages);
        for (i, level) in (1..=stages).rev().enumerate() {
            let g = &hierarchy.levels[level];
            let lap = Arc::new(build_scaled_laplacian(g)?.matrix);
            let real: Vec<usize> = (0..g.num_vertices).filter(|&v| !hierarchy.fake_mask[level][v]).collect();
            blocks.push(InceptionGraphBlock::new(
                store,
                &format!("{name}.block{i}"),
                &lap,
                Some(Arc::new(real)),
                cfg.channels[i],
                cfg.channels[i + 1],
                &cfg.inception,
                rng,
            )?);
            upsample.push(Arc::new(hierarchy.upsample_index(level - 1)?));
        }
        let base_lap = Arc::new(build_scaled_laplacian(base)?.matrix);
        let output = ChebConvLayer::new(
            store,
            &format!("{name}.out"),
            base_lap,
            cfg.final_order,
            cfg.channels[stages],
            3,
            0.01,
            rng,
        )?;
        Ok(MeshDecoder {
            fc,
            blocks,
            upsample,
            output,
            start_level: stages,
            start_vertices,
            start_channels: cfg.channels[0],
            num_vertices: base.num_vertices,
        })
    }

    /// `[B, D] -> [B, N, 3]` root-relative vertices in metres, original vertex order.
    pub fn forward(&self, tape: &mut Tape, latent: Var) -> Result<Var> {
        let s = tape.shape(latent).to_vec();
        if s.len() != 2 || s[1] != self.fc.in_dim {
            return Err(Error::shape("mesh_decoder", format!("expected [B, {}], got {s:?}", self.fc.in_dim)));
        }
        let h = self.fc.forward(tape, latent)?;
        let mut h = tape.reshape(h, &[s[0], self.start_vertices, self.start_channels])?;
        for (blk, up) in self.blocks.iter().zip(&self.upsample) {
            h = blk.forward(tape, h)?;
            h = tape.index_select(h, 1, up)?;
        }
        self.output.forward(tape, h)
    }
}

/// `[J, N]` regressor times `[B, N, 3]` vertices gives `[B, J, 3]` joints.
pub fn regress_joints(tape: &mut Tape, regressor: Var, verts: Var) -> Result<Var> {
    let s = tape.shape(verts).to_vec();
    let r = tape.shape(regressor).to_vec();
    if s.len() != 3 || r.len() != 2 || r[1] != s[1] {
        return Err(Error::shape("regress_joints", format!("{r:?} by {s:?}")));
    }
    let (b, n, c) = (s[0], s[1], s[2]);
    let p = tape.permute(verts, &[1, 0, 2])?;
    let p = tape.reshape(p, &[n, b * c])?;
    let j = tape.matmul(regressor, p)?;
    let j = tape.reshape(j, &[r[0], b, c])?;
    tape.permute(j, &[1, 0, 2])
}
