//! Training objective: 2D pose, root depth, bin placement, mesh, 3D pose,
//! surface normal and edge length terms.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meshgraph::{face_normals, MeshGraph};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub p2d: f64,
    pub depth: f64,
    pub bins: f64,
    pub mesh: f64,
    pub p3d: f64,
    pub normal: f64,
    pub edge: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            p2d: 1.0,
            depth: 10.0,
            bins: 10.0,
            mesh: 1.0,
            p3d: 1.0,
            normal: 0.1,
            edge: 1.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 7] {
        [self.p2d, self.depth, self.bins, self.mesh, self.p3d, self.normal, self.edge]
    }

    pub fn scaled(&self, s: f64) -> Self {
        let a = self.as_array().map(|w| w * s);
        LossWeights {
            p2d: a[0],
            depth: a[1],
            bins: a[2],
            mesh: a[3],
            p3d: a[4],
            normal: a[5],
            edge: a[6],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Variance weight inside the scale-invariant depth loss.
    pub si_lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            si_lambda: 0.85,
        }
    }
}

pub const TERM_NAMES: [&str; 7] = ["p2d", "d", "b", "v", "p3d", "n", "e"];

/// Scalar loss components, in [`TERM_NAMES`] order.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub p2d: Var,
    pub depth: Var,
    pub bins: Var,
    pub mesh: Var,
    pub p3d: Var,
    pub normal: Var,
    pub edge: Var,
}

impl LossTerms {
    pub fn as_array(&self) -> [Var; 7] {
        [self.p2d, self.depth, self.bins, self.mesh, self.p3d, self.normal, self.edge]
    }
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    Ok(())
}

fn check_finite(tape: &Tape, what: &str, v: Var) -> Result<()> {
    if let Some(i) = tape.value(v).data().iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { what: what.to_string(), index: i });
    }
    Ok(())
}

/// Mean over joints of the per-joint L1 norm `|dx| + |dy|`; inputs `[B, J, 2]`.
pub fn loss_p2d(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    same_shape(tape, "loss_p2d", pred, gt)?;
    check_finite(tape, "2D pose prediction", pred)?;
    check_finite(tape, "2D pose target", gt)?;
    let d = tape.sub(pred, gt)?;
    let a = tape.abs(d);
    let per_joint = tape.sum_axis(a, 2)?;
    Ok(tape.mean(per_joint))
}

/// Scale-invariant log loss per row of `[G, N]`, averaged over rows.
pub fn loss_si_depth(tape: &mut Tape, pred: Var, gt: Var, lambda: f64) -> Result<Var> {
    same_shape(tape, "loss_si_depth", pred, gt)?;
    for (v, what) in [(pred, "predicted"), (gt, "target")] {
        if let Some(i) = tape.value(v).data().iter().position(|&x| !(x > 0.0)) {
            return Err(Error::invalid(format!("{what} depth at index {i} is not positive")));
        }
    }
    let s = tape.shape(pred).to_vec();
    if s.len() != 2 || s[1] == 0 {
        return Err(Error::shape("loss_si_depth", format!("expected [G, N], got {s:?}")));
    }
    let n = s[1] as f64;
    let lp = tape.ln(pred);
    let lg = tape.ln(gt);
    let g = tape.sub(lp, lg)?;
    let g2 = tape.square(g);
    let msq = tape.mean_axis(g2, 1)?;
    let sum = tape.sum_axis(g, 1)?;
    let sum2 = tape.square(sum);
    let corr = tape.scale(sum2, lambda / (n * n));
    let inner = tape.sub(msq, corr)?;
    // guards against tiny negative values from rounding
    let inner = tape.relu(inner);
    let per_row = tape.sqrt(inner);
    Ok(tape.mean(per_row))
}

/// Bidirectional squared Chamfer distance between each row of `centers`
/// (`[B, N]`) and the point set `targets` (`[M]`), averaged over rows.
pub fn loss_chamfer_bins(tape: &mut Tape, centers: Var, targets: Var) -> Result<Var> {
    let cs = tape.shape(centers).to_vec();
    let ts = tape.shape(targets).to_vec();
    if cs.len() != 2 || ts.len() != 1 || cs[1] == 0 || ts[0] == 0 {
        return Err(Error::invalid(format!(
            "chamfer needs non-empty sets, got centers {cs:?} and targets {ts:?}"
        )));
    }
    let (b, n, m) = (cs[0], cs[1], ts[0]);
    let c = tape.reshape(centers, &[b, n, 1])?;
    let c = tape.broadcast_to(c, &[b, n, m])?;
    let x = tape.reshape(targets, &[1, 1, m])?;
    let x = tape.broadcast_to(x, &[b, n, m])?;
    let d = tape.sub(c, x)?;
    let d2 = tape.square(d);
    let to_target = tape.min_axis(d2, 2)?;
    let to_center = tape.min_axis(d2, 1)?;
    let a = tape.sum(to_target);
    let bsum = tape.sum(to_center);
    let total = tape.add(a, bsum)?;
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// Elementwise mean absolute difference.
pub fn loss_l1_mean(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    same_shape(tape, "loss_l1_mean", pred, gt)?;
    let d = tape.sub(pred, gt)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Vertex term and joint term: elementwise mean absolute differences of
/// `[B, V, 3]` vertices and of `[B, J, 3]` regressed joints.
pub fn loss_mesh_and_pose3d(
    tape: &mut Tape,
    pred_verts: Var,
    gt_verts: Var,
    pred_joints: Var,
    gt_joints: Var,
) -> Result<(Var, Var)> {
    Ok((
        loss_l1_mean(tape, pred_verts, gt_verts)?,
        loss_l1_mean(tape, pred_joints, gt_joints)?,
    ))
}

/// Face edge endpoints in `(0,1), (1,2), (2,0)` order per face.
#[derive(Clone, Debug)]
pub struct FaceEdges {
    pub start: Arc<Vec<usize>>,
    pub end: Arc<Vec<usize>>,
    pub faces: Vec<[usize; 3]>,
}

impl FaceEdges {
    pub fn new(mesh: &MeshGraph) -> Self {
        let mut start = Vec::with_capacity(3 * mesh.faces.len());
        let mut end = Vec::with_capacity(3 * mesh.faces.len());
        for f in &mesh.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                start.push(a);
                end.push(b);
            }
        }
        FaceEdges {
            start: Arc::new(start),
            end: Arc::new(end),
            faces: mesh.faces.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start.is_empty()
    }

    /// Edge vectors `v[end] - v[start]`, shape `[B, E, 3]`.
    pub fn vectors(&self, tape: &mut Tape, verts: Var) -> Result<Var> {
        let a = tape.index_select(verts, 1, &self.start)?;
        let b = tape.index_select(verts, 1, &self.end)?;
        tape.sub(b, a)
    }
}

/// Result of the normal term with the number of edges that entered it.
#[derive(Clone, Copy, Debug)]
pub struct NormalLoss {
    pub value: Var,
    pub used_edges: usize,
    pub skipped_edges: usize,
}

fn rows3(t: &Tensor, b: usize) -> Vec<[f64; 3]> {
    let n = t.shape()[1];
    (0..n)
        .map(|i| {
            let o = (b * n + i) * 3;
            [t.data()[o], t.data()[o + 1], t.data()[o + 2]]
        })
        .collect()
}

/// Mean over face edges of `|unit(edge) . n_gt|`. Edges shorter than 1e-9 in the
/// prediction, and edges of degenerate target faces, are skipped.
pub fn loss_normal(tape: &mut Tape, pred_verts: Var, gt_verts: &Tensor, mesh: &MeshGraph, edges: &FaceEdges) -> Result<NormalLoss> {
    let s = tape.shape(pred_verts).to_vec();
    if s != gt_verts.shape() || s.len() != 3 || s[2] != 3 {
        return Err(Error::shape("loss_normal", format!("{s:?} vs {:?}", gt_verts.shape())));
    }
    let (b, e) = (s[0], edges.len());
    let mut normals = Vec::with_capacity(b * e * 3);
    let mut gt_ok = Vec::with_capacity(b * e);
    for bi in 0..b {
        let n = face_normals(mesh, &rows3(gt_verts, bi))?;
        for nf in &n {
            let ok = nf.iter().any(|&v| v != 0.0);
            for _ in 0..3 {
                normals.extend_from_slice(nf);
                gt_ok.push(ok);
            }
        }
    }
    let ev = edges.vectors(tape, pred_verts)?;
    let sq = tape.square(ev);
    let len2 = tape.sum_axis(sq, 2)?;
    let lens: Vec<f64> = tape.value(len2).data().iter().map(|v| v.sqrt()).collect();
    let mask: Vec<f64> = lens
        .iter()
        .zip(&gt_ok)
        .map(|(&l, &ok)| if ok && l >= 1e-9 { 1.0 } else { 0.0 })
        .collect();
    let used = mask.iter().filter(|&&m| m > 0.0).count();
    let skipped = mask.len() - used;
    if skipped > 0 {
        log::debug!("normal loss skipped {skipped} degenerate edges");
    }
    let mask_t = Tensor::new([b, e], mask.clone())?;
    let fill_t = Tensor::new([b, e], mask.iter().map(|m| 1.0 - m).collect())?;
    let len = tape.sqrt(len2);
    let fill = tape.constant(fill_t);
    let safe_len = tape.add(len, fill)?;
    let safe_len = tape.reshape(safe_len, &[b, e, 1])?;
    let safe_len = tape.broadcast_to(safe_len, &[b, e, 3])?;
    let unit = tape.div(ev, safe_len)?;
    let nt = tape.constant(Tensor::new([b, e, 3], normals)?);
    let dots = tape.mul(unit, nt)?;
    let dots = tape.sum_axis(dots, 2)?;
    let dots = tape.abs(dots);
    let m = tape.constant(mask_t);
    let masked = tape.mul(dots, m)?;
    let total = tape.sum(masked);
    let value = tape.scale(total, 1.0 / used.max(1) as f64);
    Ok(NormalLoss {
        value,
        used_edges: used,
        skipped_edges: skipped,
    })
}

/// Mean over face edges of `| |e_pred|^2 - |e_gt|^2 |`.
pub fn loss_edge(tape: &mut Tape, pred_verts: Var, gt_verts: &Tensor, edges: &FaceEdges) -> Result<Var> {
    let s = tape.shape(pred_verts).to_vec();
    if s != gt_verts.shape() {
        return Err(Error::shape("loss_edge", format!("{s:?} vs {:?}", gt_verts.shape())));
    }
    let gt = tape.constant(gt_verts.clone());
    let ep = edges.vectors(tape, pred_verts)?;
    let eg = edges.vectors(tape, gt)?;
    let sp = tape.square(ep);
    let lp = tape.sum_axis(sp, 2)?;
    let sg = tape.square(eg);
    let lg = tape.sum_axis(sg, 2)?;
    let d = tape.sub(lp, lg)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Weighted sum of the seven terms; a non-finite term is reported by name.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    let vars = terms.as_array();
    for (v, name) in vars.iter().zip(TERM_NAMES) {
        let x = tape.value(*v);
        if x.len() != 1 {
            return Err(Error::shape("total_loss", format!("term {name} is not scalar")));
        }
        if !x.item().is_finite() {
            return Err(Error::NonFinite {
                what: format!("loss term {name}"),
                index: 0,
            });
        }
    }
    let mut acc: Option<Var> = None;
    for (v, wt) in vars.iter().zip(w.as_array()) {
        let s = tape.scale(*v, wt);
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    Ok(acc.expect("seven terms"))
}
