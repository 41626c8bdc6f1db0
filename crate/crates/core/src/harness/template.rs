//! Procedural articulated hand template: an elliptical palm tube with five
//! tapered finger tubes, a 21-joint regressor and rigid per-segment skinning.

use nalgebra::{Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meshgraph::{MeshGraph, Topology};

const PALM_LENGTH: f64 = 0.09;

struct FingerSpec {
    base: [f64; 3],
    /// In-plane direction, radians from +y toward +x.
    angle: f64,
    length: f64,
    radius_base: f64,
    radius_tip: f64,
}

fn finger_specs() -> [FingerSpec; 5] {
    let deg = f64::to_radians;
    [
        FingerSpec { base: [0.030, 0.025, -0.004], angle: deg(50.0), length: 0.065, radius_base: 0.0100, radius_tip: 0.0070 },
        FingerSpec { base: [0.027, 0.090, 0.0], angle: deg(8.0), length: 0.075, radius_base: 0.0085, radius_tip: 0.0065 },
        FingerSpec { base: [0.009, 0.093, 0.0], angle: deg(0.0), length: 0.082, radius_base: 0.0088, radius_tip: 0.0068 },
        FingerSpec { base: [-0.010, 0.090, 0.0], angle: deg(-6.0), length: 0.076, radius_base: 0.0083, radius_tip: 0.0063 },
        FingerSpec { base: [-0.027, 0.083, 0.0], angle: deg(-14.0), length: 0.062, radius_base: 0.0075, radius_tip: 0.0058 },
    ]
}

/// Resolution of the procedural mesh.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemplateResolution {
    pub palm_rings: usize,
    pub palm_ring_size: usize,
    pub finger_rings: usize,
    pub finger_ring_size: usize,
}

impl TemplateResolution {
    /// 227 vertices.
    pub const TOY: Self = TemplateResolution { palm_rings: 5, palm_ring_size: 8, finger_rings: 6, finger_ring_size: 6 };
    /// 778 vertices, the size of the reference hand topology.
    pub const DENSE: Self = TemplateResolution { palm_rings: 8, palm_ring_size: 12, finger_rings: 15, finger_ring_size: 9 };

    pub fn num_vertices(&self) -> usize {
        self.palm_rings * self.palm_ring_size + 2 + 5 * (self.finger_rings * self.finger_ring_size + 1)
    }
}

#[derive(Clone, Debug)]
struct Finger {
    base: Vector3<f64>,
    axis: Vector3<f64>,
    lateral: Vector3<f64>,
    normal: Vector3<f64>,
    length: f64,
    /// Axial fraction of each ring.
    ring_fracs: Vec<f64>,
    pip_ring: usize,
    dip_ring: usize,
}

/// Rigid segment a vertex follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Segment {
    Palm,
    Finger { finger: usize, bone: usize },
}

/// Per-finger articulation in radians: abduction, then flexion at the three joints.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FingerPose {
    pub abduction: f64,
    pub flex: [f64; 3],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HandPose {
    pub fingers: [FingerPose; 5],
}

#[derive(Clone, Debug)]
pub struct HandTemplate {
    pub name: String,
    pub topology: Topology,
    fingers: Vec<Finger>,
    segments: Vec<Segment>,
    /// Vertex index of each joint's pivot ring, per finger: MCP, PIP, DIP.
    pub wrist_vertex: usize,
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn nearest_ring(fracs: &[f64], target: f64) -> usize {
    let mut best = 0;
    for (i, f) in fracs.iter().enumerate() {
        if (f - target).abs() < (fracs[best] - target).abs() {
            best = i;
        }
    }
    best
}

impl HandTemplate {
    pub fn toy() -> Self {
        Self::build("toy", TemplateResolution::TOY)
    }

    pub fn dense() -> Self {
        Self::build("toy-dense", TemplateResolution::DENSE)
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "toy-dense" => Ok(Self::dense()),
            other => Err(Error::invalid(format!(
                "no procedural template named {other:?} (expected \"toy\" or \"toy-dense\")"
            ))),
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.topology.mesh.num_vertices
    }

    pub fn mesh(&self) -> &MeshGraph {
        &self.topology.mesh
    }

    pub fn regressor(&self) -> &[Vec<f64>] {
        self.topology.joint_regressor.as_deref().expect("template has a regressor")
    }

    pub fn rest_positions(&self) -> &[[f64; 3]] {
        self.topology.mesh.positions.as_deref().expect("template has positions")
    }

    fn build(name: &str, res: TemplateResolution) -> Self {
        let mut pos: Vec<[f64; 3]> = Vec::with_capacity(res.num_vertices());
        let mut segments = Vec::with_capacity(res.num_vertices());
        let mut faces: Vec<[usize; 3]> = Vec::new();
        let tube = |faces: &mut Vec<[usize; 3]>, rings: &[usize], size: usize| {
            for k in 0..rings.len() - 1 {
                for m in 0..size {
                    let (a, b) = (rings[k] + m, rings[k] + (m + 1) % size);
                    let (c, d) = (rings[k + 1] + m, rings[k + 1] + (m + 1) % size);
                    faces.push([a, b, d]);
                    faces.push([a, d, c]);
                }
            }
        };

        // palm: wrist cap centre first, so the root joint is vertex 0
        let wrist = 0;
        pos.push([0.0, 0.0, 0.0]);
        segments.push(Segment::Palm);
        let mut palm_rings = Vec::with_capacity(res.palm_rings);
        for k in 0..res.palm_rings {
            let y = PALM_LENGTH * k as f64 / (res.palm_rings - 1) as f64;
            let half_w = 0.028 + 0.014 * y / PALM_LENGTH;
            palm_rings.push(pos.len());
            for m in 0..res.palm_ring_size {
                let phi = std::f64::consts::TAU * m as f64 / res.palm_ring_size as f64;
                pos.push([half_w * phi.cos(), y, 0.013 * phi.sin()]);
                segments.push(Segment::Palm);
            }
        }
        let top = pos.len();
        pos.push([0.0, PALM_LENGTH, 0.0]);
        segments.push(Segment::Palm);
        tube(&mut faces, &palm_rings, res.palm_ring_size);
        for m in 0..res.palm_ring_size {
            let n = (m + 1) % res.palm_ring_size;
            faces.push([wrist, palm_rings[0] + n, palm_rings[0] + m]);
            let last = palm_rings[res.palm_rings - 1];
            faces.push([top, last + m, last + n]);
        }
        let palm_count = pos.len();

        let mut fingers = Vec::with_capacity(5);
        let mut regressor = vec![vec![0.0; res.num_vertices()]; 21];
        regressor[0][wrist] = 1.0;
        for (fi, spec) in finger_specs().iter().enumerate() {
            let base = v3(spec.base);
            let axis = Vector3::new(spec.angle.sin(), spec.angle.cos(), 0.0);
            let lateral = Vector3::new(spec.angle.cos(), -spec.angle.sin(), 0.0);
            let normal = Vector3::z();
            let ring_fracs: Vec<f64> = (0..res.finger_rings)
                .map(|k| 0.92 * k as f64 / (res.finger_rings - 1) as f64)
                .collect();
            let pip_ring = nearest_ring(&ring_fracs, 0.45);
            let dip_ring = nearest_ring(&ring_fracs, 0.75);
            let mut rings = Vec::with_capacity(res.finger_rings);
            for (k, &f) in ring_fracs.iter().enumerate() {
                let r = spec.radius_base + (spec.radius_tip - spec.radius_base) * f;
                let center = base + axis * (f * spec.length);
                let bone = if k < pip_ring { 0 } else if k < dip_ring { 1 } else { 2 };
                rings.push(pos.len());
                for m in 0..res.finger_ring_size {
                    let phi = std::f64::consts::TAU * m as f64 / res.finger_ring_size as f64;
                    let p = center + (lateral * phi.cos() + normal * phi.sin()) * r;
                    pos.push([p.x, p.y, p.z]);
                    segments.push(Segment::Finger { finger: fi, bone });
                }
            }
            let tip = pos.len();
            let tp = base + axis * spec.length;
            pos.push([tp.x, tp.y, tp.z]);
            segments.push(Segment::Finger { finger: fi, bone: 2 });
            tube(&mut faces, &rings, res.finger_ring_size);
            let last = rings[res.finger_rings - 1];
            for m in 0..res.finger_ring_size {
                let n = (m + 1) % res.finger_ring_size;
                faces.push([tip, last + m, last + n]);
            }
            // bridge the finger base to the closest palm vertex
            let anchor = (0..palm_count)
                .min_by(|&a, &b| {
                    let da = (v3(pos[a]) - base).norm();
                    let db = (v3(pos[b]) - base).norm();
                    da.total_cmp(&db)
                })
                .expect("palm has vertices");
            for m in 0..res.finger_ring_size {
                let n = (m + 1) % res.finger_ring_size;
                faces.push([anchor, rings[0] + n, rings[0] + m]);
            }
            let row0 = 1 + 4 * fi;
            let w = 1.0 / res.finger_ring_size as f64;
            for (j, ring) in [rings[0], rings[pip_ring], rings[dip_ring]].into_iter().enumerate() {
                for m in 0..res.finger_ring_size {
                    regressor[row0 + j][ring + m] = w;
                }
            }
            regressor[row0 + 3][tip] = 1.0;
            fingers.push(Finger {
                base,
                axis,
                lateral,
                normal,
                length: spec.length,
                ring_fracs,
                pip_ring,
                dip_ring,
            });
        }
        debug_assert_eq!(pos.len(), res.num_vertices());
        let mesh = MeshGraph::from_faces(pos.len(), faces)
            .and_then(|m| m.with_positions(pos))
            .expect("procedural template is valid");
        HandTemplate {
            name: name.to_string(),
            topology: Topology { mesh, joint_regressor: Some(regressor) },
            fingers,
            segments,
            wrist_vertex: wrist,
        }
    }

    /// Posed vertices (metres, wrist at the origin) under rigid per-bone skinning.
    pub fn articulate(&self, pose: &HandPose) -> Vec<[f64; 3]> {
        // per finger: (pivot, rotation) for each of the three bones
        let frames: Vec<[(Vector3<f64>, Vector3<f64>, Rotation3<f64>); 3]> = self
            .fingers
            .iter()
            .zip(&pose.fingers)
            .map(|(f, p)| {
                let lat = Unit::new_normalize(f.lateral);
                let nrm = Unit::new_normalize(f.normal);
                let r1 = Rotation3::from_axis_angle(&nrm, p.abduction) * Rotation3::from_axis_angle(&lat, -p.flex[0]);
                let r2 = r1 * Rotation3::from_axis_angle(&lat, -p.flex[1]);
                let r3 = r2 * Rotation3::from_axis_angle(&lat, -p.flex[2]);
                let pip_rest = f.base + f.axis * (f.ring_fracs[f.pip_ring] * f.length);
                let dip_rest = f.base + f.axis * (f.ring_fracs[f.dip_ring] * f.length);
                let pip = f.base + r1 * (pip_rest - f.base);
                let dip = pip + r2 * (dip_rest - pip_rest);
                [(f.base, f.base, r1), (pip_rest, pip, r2), (dip_rest, dip, r3)]
            })
            .collect();
        self.rest_positions()
            .iter()
            .zip(&self.segments)
            .map(|(p, seg)| match *seg {
                Segment::Palm => *p,
                Segment::Finger { finger, bone } => {
                    let (rest_pivot, pivot, rot) = &frames[finger][bone];
                    let q = pivot + rot * (v3(*p) - rest_pivot);
                    [q.x, q.y, q.z]
                }
            })
            .collect()
    }

    /// Joint positions from the regressor.
    pub fn joints(&self, verts: &[[f64; 3]]) -> Vec<[f64; 3]> {
        regress(self.regressor(), verts)
    }
}

pub fn regress(reg: &[Vec<f64>], verts: &[[f64; 3]]) -> Vec<[f64; 3]> {
    reg.iter()
        .map(|row| {
            let mut j = [0.0; 3];
            for (w, v) in row.iter().zip(verts) {
                if *w != 0.0 {
                    for k in 0..3 {
                        j[k] += w * v[k];
                    }
                }
            }
            j
        })
        .collect()
}
