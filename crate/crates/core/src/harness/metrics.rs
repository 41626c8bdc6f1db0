//! Pose and mesh error metrics: Procrustes-aligned and camera-space mean
//! errors in millimetres, and the area under the PCK curve.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::model::Prediction;
use super::synth::Sample;
use crate::error::{Error, Result};

/// Similarity-aligned prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub aligned: Vec<[f64; 3]>,
    pub scale: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    /// Set when the cross-covariance was rank-deficient and only translation
    /// and scale were fitted.
    pub fallback: bool,
}

fn centroid(p: &[[f64; 3]]) -> Vector3<f64> {
    let mut c = Vector3::zeros();
    for v in p {
        c += Vector3::new(v[0], v[1], v[2]);
    }
    c / p.len() as f64
}

/// Scale, proper rotation and translation minimizing `sum |s R p + t - g|^2`.
pub fn procrustes_align(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<Alignment> {
    if pred.len() != gt.len() || pred.len() < 3 {
        return Err(Error::invalid(format!(
            "alignment needs matching sets of at least 3 points, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let mp = centroid(pred);
    let mg = centroid(gt);
    let p: Vec<Vector3<f64>> = pred.iter().map(|v| Vector3::new(v[0], v[1], v[2]) - mp).collect();
    let g: Vec<Vector3<f64>> = gt.iter().map(|v| Vector3::new(v[0], v[1], v[2]) - mg).collect();
    let var_g: f64 = g.iter().map(|v| v.norm_squared()).sum();
    if !(var_g > 0.0) {
        return Err(Error::invalid("ground-truth points are all coincident"));
    }
    let var_p: f64 = p.iter().map(|v| v.norm_squared()).sum();
    let mut cov = Matrix3::zeros();
    for (a, b) in p.iter().zip(&g) {
        cov += b * a.transpose();
    }
    let svd = cov.svd(true, true);
    let sv = svd.singular_values;
    let top = sv.max();
    let rank_ok = var_p > 0.0 && top > 0.0 && sv.iter().filter(|&&s| s > 1e-12 * top).count() >= 2;
    let (rot, scale, fallback) = if rank_ok {
        let u = svd.u.expect("requested U");
        let vt = svd.v_t.expect("requested V^T");
        let mut d = Matrix3::identity();
        if (u * vt).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        let rot = u * d * vt;
        let trace: f64 = (0..3).map(|i| sv[i] * d[(i, i)]).sum();
        (rot, trace / var_p, false)
    } else {
        let dot: f64 = p.iter().zip(&g).map(|(a, b)| a.dot(b)).sum();
        let s = if var_p > 0.0 { dot / var_p } else { 0.0 };
        (Matrix3::identity(), s, true)
    };
    let t = mg - rot * mp * scale;
    let aligned = pred
        .iter()
        .map(|v| {
            let q = rot * Vector3::new(v[0], v[1], v[2]) * scale + t;
            [q.x, q.y, q.z]
        })
        .collect();
    let mut r = [[0.0; 3]; 3];
    for (i, row) in r.iter_mut().enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            *x = rot[(i, j)];
        }
    }
    Ok(Alignment {
        aligned,
        scale,
        rotation: r,
        translation: [t.x, t.y, t.z],
        fallback,
    })
}

/// Per-point Euclidean distances.
pub fn point_errors(a: &[[f64; 3]], b: &[[f64; 3]]) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Thresholds `0, 1, ..., 50`.
pub fn pck_thresholds() -> Vec<f64> {
    (0..=50).map(f64::from).collect()
}

/// Fraction of errors at or below each threshold.
pub fn pck_curve(errors: &[f64], thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&t| {
            if errors.is_empty() {
                0.0
            } else {
                errors.iter().filter(|&&e| e <= t).count() as f64 / errors.len() as f64
            }
        })
        .collect()
}

/// Trapezoidal area under the PCK curve, divided by the threshold span.
pub fn pck_auc(errors: &[f64], thresholds: &[f64]) -> f64 {
    let curve = pck_curve(errors, thresholds);
    let span = thresholds.last().unwrap_or(&0.0) - thresholds.first().unwrap_or(&0.0);
    if span <= 0.0 {
        return curve.first().copied().unwrap_or(0.0);
    }
    let area: f64 = thresholds
        .windows(2)
        .zip(curve.windows(2))
        .map(|(t, c)| (t[1] - t[0]) * (c[0] + c[1]) / 2.0)
        .sum();
    area / span
}

/// Which keypoint errors feed the PCK curve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PckSpace {
    /// Camera-space 3D joint errors in millimetres.
    #[default]
    Camera3d,
    /// Image-plane 2D joint errors in pixels.
    Image2d,
}

/// The five reported numbers; errors in millimetres.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "PJ")]
    pub pj: f64,
    #[serde(rename = "PV")]
    pub pv: f64,
    #[serde(rename = "CJ")]
    pub cj: f64,
    #[serde(rename = "CV")]
    pub cv: f64,
    #[serde(rename = "AUC")]
    pub auc: f64,
}

impl Metrics {
    pub fn as_array(&self) -> [f64; 5] {
        [self.pj, self.pv, self.cj, self.cv, self.auc]
    }

    fn from_array(a: [f64; 5]) -> Self {
        Metrics { pj: a[0], pv: a[1], cj: a[2], cv: a[3], auc: a[4] }
    }

    pub const NAMES: [&'static str; 5] = ["PJ", "PV", "CJ", "CV", "AUC"];
}

/// Metrics plus the mean absolute normalized root-depth error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub metrics: Metrics,
    pub depth_error: f64,
    /// Number of alignments that fell back to translation and scale only.
    pub fallbacks: usize,
}

/// Metrics of predictions against their samples.
pub fn compute_metrics(preds: &[Prediction], samples: &[Sample], pck: PckSpace) -> Result<EvalResult> {
    if preds.len() != samples.len() || preds.is_empty() {
        return Err(Error::invalid(format!(
            "{} predictions for {} samples",
            preds.len(),
            samples.len()
        )));
    }
    let (mut pj, mut pv, mut cj, mut cv, mut pck_err, mut derr) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    let mut fallbacks = 0;
    let mm = |v: Vec<f64>| v.into_iter().map(|e| e * 1000.0).collect::<Vec<_>>();
    for (p, s) in preds.iter().zip(samples) {
        let gj = s.joints_cam();
        let gv = s.verts_cam();
        let aj = procrustes_align(&p.joints_cam, &gj)?;
        let av = procrustes_align(&p.verts_cam, &gv)?;
        fallbacks += usize::from(aj.fallback) + usize::from(av.fallback);
        pj.extend(mm(point_errors(&aj.aligned, &gj)));
        pv.extend(mm(point_errors(&av.aligned, &gv)));
        let ej = mm(point_errors(&p.joints_cam, &gj));
        match pck {
            PckSpace::Camera3d => pck_err.extend(ej.iter().copied()),
            PckSpace::Image2d => pck_err.extend(
                p.j2d
                    .iter()
                    .zip(&s.j2d)
                    .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()),
            ),
        }
        cj.extend(ej);
        cv.extend(mm(point_errors(&p.verts_cam, &gv)));
        derr.push((p.depth_norm - s.depth_norm()).abs());
    }
    Ok(EvalResult {
        metrics: Metrics {
            pj: mean(&pj),
            pv: mean(&pv),
            cj: mean(&cj),
            cv: mean(&cv),
            auc: pck_auc(&pck_err, &pck_thresholds()),
        },
        depth_error: mean(&derr),
        fallbacks,
    })
}

/// Mean and population standard deviation over repeated evaluations.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsSummary {
    pub mean: Metrics,
    pub std: Metrics,
    pub runs: Vec<Metrics>,
}

impl MetricsSummary {
    pub fn from_runs(runs: Vec<Metrics>) -> Self {
        let n = runs.len().max(1) as f64;
        let mut m = [0.0; 5];
        for r in &runs {
            for (a, b) in m.iter_mut().zip(r.as_array()) {
                *a += b / n;
            }
        }
        let mut s = [0.0; 5];
        for r in &runs {
            for ((a, b), mu) in s.iter_mut().zip(r.as_array()).zip(m) {
                *a += (b - mu).powi(2) / n;
            }
        }
        MetricsSummary {
            mean: Metrics::from_array(m),
            std: Metrics::from_array(s.map(f64::sqrt)),
            runs,
        }
    }
}
