//! Synthetic hand dataset: articulated template, random camera placement,
//! z-buffer rendering and exact ground truth, stored as PGM plus JSON.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{AugmentConfig, SynthConfig};
use super::raster::rasterize_mesh;
use super::template::{regress, FingerPose, HandPose, HandTemplate};
use crate::depthhead::{backproject_root, normalize_depth, CameraIntrinsics};
use crate::error::{Error, Result};
use crate::meshgraph::{load_topology, Topology};

/// One rendered scene with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Grayscale `size * size` raster in `[0, 1]`, replicated to three channels on batching.
    pub gray: Vec<f64>,
    pub size: usize,
    /// 2D joints in pixels.
    pub j2d: Vec<[f64; 2]>,
    /// Root-relative vertices in metres.
    pub v3d_rel: Vec<[f64; 3]>,
    /// Root-relative joints in metres.
    pub j3d_rel: Vec<[f64; 3]>,
    /// Root (wrist) depth in metres.
    pub root_depth: f64,
    pub cam: CameraIntrinsics,
    pub seed: u64,
}

impl Sample {
    /// Camera-space root position in metres.
    pub fn root(&self) -> [f64; 3] {
        backproject_root(self.j2d[0], self.root_depth, &self.cam)
    }

    /// Normalized root depth, with the depth taken in millimetres.
    pub fn depth_norm(&self) -> f64 {
        self.root_depth * 1000.0 / self.cam.focal_scale()
    }

    pub fn verts_cam(&self) -> Vec<[f64; 3]> {
        offset(&self.v3d_rel, self.root())
    }

    pub fn joints_cam(&self) -> Vec<[f64; 3]> {
        offset(&self.j3d_rel, self.root())
    }
}

pub(crate) fn offset(p: &[[f64; 3]], o: [f64; 3]) -> Vec<[f64; 3]> {
    p.iter().map(|v| [v[0] + o[0], v[1] + o[1], v[2] + o[2]]).collect()
}

/// Per-sample metadata written next to each image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub seed: u64,
    pub image: String,
    pub cam: CameraIntrinsics,
    pub root_depth: f64,
    pub depth_norm: f64,
    pub pose: HandPose,
    pub j2d: Vec<[f64; 2]>,
    pub j3d_rel: Vec<[f64; 3]>,
    pub v3d_rel: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub seed: u64,
    pub synth: SynthConfig,
    pub samples: Vec<String>,
}

/// A loaded or generated dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub topology: Topology,
}

/// Seed of sample `index` in a dataset generated from `base`.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    // splitmix64 finalizer over the combined state
    let mut z = base
        .wrapping_add((index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn random_pose(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> HandPose {
    let flex = cfg.max_flex_deg.to_radians();
    let abd = cfg.max_abduction_deg.to_radians();
    let mut pose = HandPose::default();
    for f in &mut pose.fingers {
        *f = FingerPose {
            abduction: uniform(rng, -abd, abd),
            flex: [uniform(rng, -flex / 3.0, flex), uniform(rng, 0.0, flex), uniform(rng, 0.0, flex)],
        };
    }
    pose
}

/// Renders one scene; `seed` fully determines the result.
pub fn gen_sample(template: &HandTemplate, cfg: &SynthConfig, seed: u64) -> Result<(Sample, HandPose)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.image_size;
    let side = size as f64;
    let margin = cfg.margin_px;
    for _ in 0..1000 {
        let pose = random_pose(&mut rng, cfg);
        let tilt = cfg.max_tilt_deg.to_radians();
        let roll = cfg.max_roll_deg.to_radians();
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), uniform(&mut rng, -roll, roll))
            * Rotation3::from_axis_angle(&Vector3::x_axis(), uniform(&mut rng, -tilt, tilt))
            * Rotation3::from_axis_angle(&Vector3::y_axis(), uniform(&mut rng, -tilt, tilt));
        let v_rel: Vec<[f64; 3]> = template
            .articulate(&pose)
            .iter()
            .map(|p| {
                let q = rot * Vector3::new(p[0], p[1], p[2]);
                [q.x, q.y, q.z]
            })
            .collect();
        let f = cfg.focal * (1.0 + uniform(&mut rng, -cfg.focal_jitter, cfg.focal_jitter));
        let cam = CameraIntrinsics {
            fx: f,
            fy: f,
            cx: side / 2.0 + uniform(&mut rng, -cfg.principal_jitter, cfg.principal_jitter),
            cy: side / 2.0 + uniform(&mut rng, -cfg.principal_jitter, cfg.principal_jitter),
        };
        let d_hat = uniform(&mut rng, cfg.depth_band[0], cfg.depth_band[1]);
        let depth = d_hat * cam.focal_scale() / 1000.0;
        for _ in 0..50 {
            let uv = [uniform(&mut rng, margin, side - margin), uniform(&mut rng, margin, side - margin)];
            let root = backproject_root(uv, depth, &cam);
            let verts = offset(&v_rel, root);
            let inside = verts.iter().all(|v| {
                v[2] > 0.0 && {
                    let p = cam.project(*v);
                    p[0] >= margin && p[0] <= side - margin && p[1] >= margin && p[1] <= side - margin
                }
            });
            if !inside {
                continue;
            }
            let raster = match rasterize_mesh(&verts, &template.mesh().faces, &cam, size, size) {
                Ok(r) => r,
                Err(_) => break,
            };
            let gray = raster.iter().map(|&v| f64::from(quantize(v)) / 255.0).collect();
            let j3d_rel = regress(template.regressor(), &v_rel);
            let j2d = offset(&j3d_rel, root).iter().map(|j| cam.project(*j)).collect();
            let sample = Sample {
                gray,
                size,
                j2d,
                v3d_rel: v_rel,
                j3d_rel,
                root_depth: depth,
                cam,
                seed,
            };
            return Ok((sample, pose));
        }
    }
    Err(Error::invalid(format!(
        "could not place the hand inside a {size}x{size} image for seed {seed}; widen the depth band"
    )))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Generates `n` samples in memory.
pub fn gen_samples(template: &HandTemplate, cfg: &SynthConfig, n: usize, seed: u64) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| gen_sample(template, cfg, sample_seed(seed, i)).map(|(s, _)| s))
        .collect()
}

/// Writes `n` samples plus `topology.json` and `manifest.json` into `out`.
pub fn gen_synthetic_dataset(n: usize, cfg: &SynthConfig, seed: u64, out: &Path) -> Result<Dataset> {
    let template = HandTemplate::by_name(&cfg.template)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut samples = Vec::with_capacity(n);
    let mut names = Vec::with_capacity(n);
    for i in 0..n {
        let (s, pose) = gen_sample(&template, cfg, sample_seed(seed, i))?;
        let name = format!("sample_{i:05}");
        write_pgm(&out.join(format!("{name}.pgm")), &s.gray, s.size, s.size)?;
        let rec = SampleRecord {
            seed: s.seed,
            image: format!("{name}.pgm"),
            cam: s.cam,
            root_depth: s.root_depth,
            depth_norm: s.depth_norm(),
            pose,
            j2d: s.j2d.clone(),
            j3d_rel: s.j3d_rel.clone(),
            v3d_rel: s.v3d_rel.clone(),
        };
        write_json(&out.join(format!("{name}.json")), &rec)?;
        names.push(name);
        samples.push(s);
    }
    template.topology.save_json(&out.join("topology.json"))?;
    let manifest = Manifest {
        count: n,
        seed,
        synth: cfg.clone(),
        samples: names,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(Dataset {
        samples,
        topology: template.topology,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let topology = load_topology(&dir.join("topology.json"))?;
    let mut samples = Vec::with_capacity(manifest.count);
    for name in &manifest.samples {
        samples.push(load_sample(&dir.join(format!("{name}.json")))?);
    }
    Ok(Dataset { samples, topology })
}

/// Reads a sample record and the image it names (relative to the record).
pub fn load_sample(json_path: &Path) -> Result<Sample> {
    let text = fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    let rec: SampleRecord = serde_json::from_str(&text)?;
    let img_path: PathBuf = json_path.parent().unwrap_or(Path::new(".")).join(&rec.image);
    let (gray, w, h) = read_pgm(&img_path)?;
    if w != h {
        return Err(Error::invalid(format!("{}: image must be square, got {w}x{h}", img_path.display())));
    }
    Ok(Sample {
        gray,
        size: w,
        j2d: rec.j2d,
        v3d_rel: rec.v3d_rel,
        j3d_rel: rec.j3d_rel,
        root_depth: rec.root_depth,
        cam: rec.cam,
        seed: rec.seed,
    })
}

/// Binary 8-bit PGM.
pub fn write_pgm(path: &Path, gray: &[f64], w: usize, h: usize) -> Result<()> {
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend(gray.iter().map(|&v| quantize(v)));
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Returns pixels scaled to `[0, 1]`, width and height.
pub fn read_pgm(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::invalid(format!("{}: {msg}", path.display()));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PGM header number"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let data = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated PGM data"))?;
    Ok((data.iter().map(|&b| f64::from(b) / maxval as f64).collect(), w, h))
}

/// Random zoom, in-plane rotation and shift about the principal point.
///
/// The camera absorbs the zoom (focal length) and the shift (principal point),
/// the 3D ground truth absorbs the rotation, and the image is resampled
/// bilinearly, so every label stays exact.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    let rot = cfg.max_rotation_deg.to_radians();
    let theta = if rot > 0.0 { rng.random_range(-rot..rot) } else { 0.0 };
    let s = if cfg.max_scale > 0.0 {
        rng.random_range(1.0 - cfg.max_scale..1.0 + cfg.max_scale)
    } else {
        1.0
    };
    let t = cfg.max_translate_px;
    let (tx, ty) = if t > 0.0 {
        (rng.random_range(-t..t), rng.random_range(-t..t))
    } else {
        (0.0, 0.0)
    };
    warp(sample, theta, s, [tx, ty])
}

/// Applies `u' = c + t + s R(theta) (u - c)` to the image and labels.
pub fn warp(sample: &Sample, theta: f64, scale: f64, shift: [f64; 2]) -> Sample {
    let (c, sn) = (theta.cos(), theta.sin());
    let cam = sample.cam;
    let fwd = |p: [f64; 2]| {
        let (x, y) = (p[0] - cam.cx, p[1] - cam.cy);
        [
            cam.cx + shift[0] + scale * (c * x - sn * y),
            cam.cy + shift[1] + scale * (sn * x + c * y),
        ]
    };
    let n = sample.size;
    let mut gray = vec![0.0; n * n];
    for row in 0..n {
        for col in 0..n {
            let (x, y) = (col as f64 + 0.5 - cam.cx - shift[0], row as f64 + 0.5 - cam.cy - shift[1]);
            let sx = cam.cx + (c * x + sn * y) / scale - 0.5;
            let sy = cam.cy + (-sn * x + c * y) / scale - 0.5;
            gray[row * n + col] = bilinear(&sample.gray, n, sx, sy);
        }
    }
    let rot3 = |p: &[f64; 3]| [c * p[0] - sn * p[1], sn * p[0] + c * p[1], p[2]];
    Sample {
        gray,
        size: n,
        j2d: sample.j2d.iter().map(|&p| fwd(p)).collect(),
        v3d_rel: sample.v3d_rel.iter().map(rot3).collect(),
        j3d_rel: sample.j3d_rel.iter().map(rot3).collect(),
        root_depth: sample.root_depth,
        cam: CameraIntrinsics {
            fx: cam.fx * scale,
            fy: cam.fy * scale,
            cx: cam.cx + shift[0],
            cy: cam.cy + shift[1],
        },
        seed: sample.seed,
    }
}

fn bilinear(img: &[f64], n: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let px = |r: f64, c: f64| -> f64 {
        if r < 0.0 || c < 0.0 || r >= n as f64 || c >= n as f64 {
            0.0
        } else {
            img[r as usize * n + c as usize]
        }
    };
    (1.0 - fy) * ((1.0 - fx) * px(y0, x0) + fx * px(y0, x0 + 1.0))
        + fy * ((1.0 - fx) * px(y0 + 1.0, x0) + fx * px(y0 + 1.0, x0 + 1.0))
}

/// Checks the depth of a sample against a normalized band.
pub fn depth_in_band(s: &Sample, band: [f64; 2]) -> Result<bool> {
    let d = normalize_depth(s.root_depth * 1000.0, &s.cam)?;
    Ok(d >= band[0] && d <= band[1])
}
