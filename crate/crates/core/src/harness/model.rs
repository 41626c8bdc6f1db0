//! The full network: image encoder, latent head, spectral mesh decoder and
//! adaptive-bin root depth, plus loss assembly and camera-space prediction.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::synth::{offset, Sample};
use super::template::HandTemplate;
use crate::depthhead::{backproject_root, CameraIntrinsics, DepthHead, DepthOutput};
use crate::encoder2d::{Encoder2d, NUM_JOINTS, ROOT_JOINT};
use crate::error::{Error, Result};
use crate::gcn::{regress_joints, LatentHead, MeshDecoder};
use crate::losses::{
    loss_chamfer_bins, loss_edge, loss_mesh_and_pose3d, loss_normal, loss_p2d, loss_si_depth, total_loss, FaceEdges,
    LossConfig, LossTerms,
};
use crate::meshgraph::{coarsen_hierarchy, load_topology, GraphHierarchy, MeshGraph, Topology};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Built-in template name or topology file path.
pub fn resolve_topology(spec: &str) -> Result<Topology> {
    match spec {
        "toy" | "toy-dense" => Ok(HandTemplate::by_name(spec)?.topology),
        path => {
            let t = load_topology(Path::new(path))?;
            if t.joint_regressor.is_none() {
                return Err(Error::invalid(format!("{path}: topology has no joint regressor")));
            }
            Ok(t)
        }
    }
}

/// Training targets for one batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 3, H, W]`.
    pub images: Tensor,
    /// `[B, 21, 2]`, pixel coordinates divided by the image size.
    pub j2d: Tensor,
    /// `[B, N, 3]` root-relative metres.
    pub verts: Tensor,
    /// `[B, 21, 3]` root-relative metres.
    pub joints: Tensor,
    /// `[B]` normalized root depth.
    pub depth: Tensor,
    pub cams: Vec<CameraIntrinsics>,
}

/// `[B, 3, H, W]` from grayscale samples.
pub fn images_tensor(samples: &[&Sample]) -> Result<Tensor> {
    let size = samples.first().map_or(0, |s| s.size);
    let plane = size * size;
    let mut data = Vec::with_capacity(samples.len() * 3 * plane);
    for s in samples {
        if s.size != size || s.gray.len() != plane {
            return Err(Error::shape("images", "samples differ in image size"));
        }
        for _ in 0..3 {
            data.extend_from_slice(&s.gray);
        }
    }
    Tensor::new([samples.len(), 3, size, size], data)
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let b = samples.len();
        let n = samples[0].v3d_rel.len();
        let size = samples[0].size as f64;
        let mut j2d = Vec::with_capacity(b * NUM_JOINTS * 2);
        let mut verts = Vec::with_capacity(b * n * 3);
        let mut joints = Vec::with_capacity(b * NUM_JOINTS * 3);
        for s in samples {
            if s.v3d_rel.len() != n || s.j3d_rel.len() != NUM_JOINTS || s.j2d.len() != NUM_JOINTS {
                return Err(Error::shape("batch", "samples differ in vertex or joint count"));
            }
            j2d.extend(s.j2d.iter().flat_map(|p| [p[0] / size, p[1] / size]));
            verts.extend(s.v3d_rel.iter().flatten());
            joints.extend(s.j3d_rel.iter().flatten());
        }
        Ok(Batch {
            images: images_tensor(samples)?,
            j2d: Tensor::new([b, NUM_JOINTS, 2], j2d)?,
            verts: Tensor::new([b, n, 3], verts)?,
            joints: Tensor::new([b, NUM_JOINTS, 3], joints)?,
            depth: Tensor::new([b], samples.iter().map(|s| s.depth_norm()).collect())?,
            cams: samples.iter().map(|s| s.cam).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.cams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cams.is_empty()
    }
}

/// Tape outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `[B, 21, 2]` normalized image coordinates.
    pub j2d: Var,
    /// `[B, N, 3]` root-relative metres.
    pub verts: Var,
    /// `[B, 21, 3]` root-relative metres.
    pub joints: Var,
    pub depth: DepthOutput,
}

/// Camera-space reconstruction of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub j2d: Vec<[f64; 2]>,
    pub verts_rel: Vec<[f64; 3]>,
    pub joints_rel: Vec<[f64; 3]>,
    pub depth_norm: f64,
    /// Back-projected root, metres.
    pub root: [f64; 3],
    pub verts_cam: Vec<[f64; 3]>,
    pub joints_cam: Vec<[f64; 3]>,
}

#[derive(Clone, Debug)]
pub struct HandMeshModel {
    pub encoder: Encoder2d,
    pub latent: LatentHead,
    pub decoder: MeshDecoder,
    pub depth: DepthHead,
    pub regressor: Tensor,
    pub mesh: MeshGraph,
    pub edges: FaceEdges,
    pub hierarchy: GraphHierarchy,
    pub image_size: usize,
    pub loss: LossConfig,
}

impl HandMeshModel {
    /// Registers all parameters in `store`, initialized from the run seed.
    pub fn build(cfg: &RunConfig, topology: &Topology, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mesh = topology.mesh.clone();
        let reg = topology
            .joint_regressor
            .as_ref()
            .ok_or_else(|| Error::invalid("topology has no joint regressor"))?;
        if reg.len() != NUM_JOINTS {
            return Err(Error::invalid(format!("regressor has {} rows, expected {NUM_JOINTS}", reg.len())));
        }
        let regressor = Tensor::from_rows(reg)?;
        let hierarchy = coarsen_hierarchy(&mesh, cfg.hierarchy_levels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let size = cfg.image_size;
        let encoder = Encoder2d::new(store, "enc", size, size, &cfg.encoder, &mut rng)?;
        let c = cfg.encoder.feat_channels;
        let pose_len = NUM_JOINTS * (size / 4) * (size / 4);
        let latent = LatentHead::new(store, "latent", c, pose_len, cfg.decoder.latent_dim, cfg.latent_blocks, &mut rng);
        let decoder = MeshDecoder::new(store, "dec", &mesh, &hierarchy, &cfg.decoder, &mut rng)?;
        let depth = DepthHead::new(store, "depth", c, size / 2, size / 2, &cfg.depth, &mut rng)?;
        Ok(HandMeshModel {
            encoder,
            latent,
            decoder,
            depth,
            regressor,
            edges: FaceEdges::new(&mesh),
            mesh,
            hierarchy,
            image_size: size,
            loss: cfg.loss,
        })
    }

    pub fn forward(&self, tape: &mut Tape, images: Var) -> Result<ModelOutput> {
        let (feats, j2d) = self.encoder.forward(tape, images)?;
        let z = self.latent.forward(tape, feats.t, feats.t_p)?;
        let verts = self.decoder.forward(tape, z)?;
        let reg = tape.constant(self.regressor.clone());
        let joints = regress_joints(tape, reg, verts)?;
        let depth = self.depth.forward(tape, &feats)?;
        Ok(ModelOutput { j2d, verts, joints, depth })
    }

    /// Weighted total and the seven individual terms.
    pub fn losses(&self, tape: &mut Tape, out: &ModelOutput, batch: &Batch) -> Result<(Var, LossTerms)> {
        let b = batch.len();
        let j2d = tape.constant(batch.j2d.clone());
        let p2d = loss_p2d(tape, out.j2d, j2d)?;
        let gt_d = tape.constant(batch.depth.clone());
        let pred_d = tape.reshape(out.depth.depth, &[b, 1])?;
        let gt_d2 = tape.reshape(gt_d, &[b, 1])?;
        let depth = loss_si_depth(tape, pred_d, gt_d2, self.loss.si_lambda)?;
        let bins = loss_chamfer_bins(tape, out.depth.centers, gt_d)?;
        let gv = tape.constant(batch.verts.clone());
        let gj = tape.constant(batch.joints.clone());
        let (mesh, p3d) = loss_mesh_and_pose3d(tape, out.verts, gv, out.joints, gj)?;
        let normal = loss_normal(tape, out.verts, &batch.verts, &self.mesh, &self.edges)?.value;
        let edge = loss_edge(tape, out.verts, &batch.verts, &self.edges)?;
        let terms = LossTerms { p2d, depth, bins, mesh, p3d, normal, edge };
        let total = total_loss(tape, &terms, &self.loss.weights)?;
        Ok((total, terms))
    }

    /// Camera-space predictions for a batch of images with known intrinsics.
    pub fn predict(&self, store: &ParamStore, images: &Tensor, cams: &[CameraIntrinsics]) -> Result<Vec<Prediction>> {
        let b = images.shape()[0];
        if cams.len() != b {
            return Err(Error::invalid(format!("{b} images but {} cameras", cams.len())));
        }
        let mut tape = Tape::with_params(store);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, x)?;
        let n = self.mesh.num_vertices;
        let size = self.image_size as f64;
        let j2d = tape.value(out.j2d).data();
        let verts = tape.value(out.verts).data();
        let joints = tape.value(out.joints).data();
        let depth = tape.value(out.depth.depth).data();
        let mut preds = Vec::with_capacity(b);
        for (i, cam) in cams.iter().enumerate() {
            cam.validate()?;
            let j2 = (0..NUM_JOINTS)
                .map(|j| {
                    let o = (i * NUM_JOINTS + j) * 2;
                    [j2d[o] * size, j2d[o + 1] * size]
                })
                .collect::<Vec<_>>();
            let rows = |src: &[f64], count: usize| -> Vec<[f64; 3]> {
                (0..count)
                    .map(|k| {
                        let o = (i * count + k) * 3;
                        [src[o], src[o + 1], src[o + 2]]
                    })
                    .collect()
            };
            let verts_rel = rows(verts, n);
            let joints_rel = rows(joints, NUM_JOINTS);
            let depth_m = depth[i] * cam.focal_scale() / 1000.0;
            let root = backproject_root(j2[ROOT_JOINT], depth_m, cam);
            preds.push(Prediction {
                verts_cam: offset(&verts_rel, root),
                joints_cam: offset(&joints_rel, root),
                j2d: j2,
                verts_rel,
                joints_rel,
                depth_norm: depth[i],
                root,
            });
        }
        Ok(preds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::gen_samples;

    #[test]
    fn forward_shapes_and_finite_losses() {
        let cfg = RunConfig::tiny();
        let topo = resolve_topology("toy").unwrap();
        let mut store = ParamStore::new();
        let model = HandMeshModel::build(&cfg, &topo, &mut store).unwrap();
        let t = HandTemplate::toy();
        let samples = gen_samples(&t, &cfg.data.synth, 2, 1).unwrap();
        let refs: Vec<&Sample> = samples.iter().collect();
        let batch = Batch::from_samples(&refs).unwrap();
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(batch.images.clone());
        let out = model.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(out.j2d), &[2, 21, 2]);
        assert_eq!(tape.shape(out.verts), &[2, 227, 3]);
        assert_eq!(tape.shape(out.joints), &[2, 21, 3]);
        assert_eq!(tape.shape(out.depth.depth), &[2]);
        let (total, terms) = model.losses(&mut tape, &out, &batch).unwrap();
        assert!(tape.value(total).item().is_finite());
        for v in terms.as_array() {
            assert!(tape.value(v).item() >= 0.0);
        }
        let preds = model.predict(&store, &batch.images, &batch.cams).unwrap();
        assert_eq!(preds.len(), 2);
        for (p, cam) in preds.iter().zip(&batch.cams) {
            let d = p.depth_norm;
            assert!(d > cfg.depth.d_min && d < cfg.depth.d_max);
            assert!((p.root[2] - d * cam.focal_scale() / 1000.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_topology_is_an_error() {
        assert!(resolve_topology("/nonexistent/topology.json").is_err());
    }
}
