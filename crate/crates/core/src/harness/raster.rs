//! Software z-buffer rasterizer producing depth-shaded grayscale images.

use crate::depthhead::CameraIntrinsics;
use crate::error::{Error, Result};

/// Darkest shade a covered pixel can take; the background is 0.
pub const MIN_SHADE: f64 = 0.25;

/// Fills every face with perspective-correct inverse depth and returns an
/// `h * w` row-major raster. Covered pixels map the nearest-to-farthest vertex
/// inverse depths onto `[MIN_SHADE, 1]`; uncovered pixels are 0.
///
/// Pixel `(row, col)` samples the point `(col + 0.5, row + 0.5)`. Either
/// triangle winding is accepted.
pub fn rasterize_mesh(
    verts: &[[f64; 3]],
    faces: &[[usize; 3]],
    cam: &CameraIntrinsics,
    h: usize,
    w: usize,
) -> Result<Vec<f64>> {
    cam.validate()?;
    let mut out = vec![0.0; h * w];
    if faces.is_empty() {
        return Ok(out);
    }
    let mut inv_lo = f64::INFINITY;
    let mut inv_hi = 0.0f64;
    let mut screen = Vec::with_capacity(verts.len());
    for (i, v) in verts.iter().enumerate() {
        if !(v[2] > 0.0) || !v.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid(format!(
                "vertex {i} at depth {} is not in front of the camera",
                v[2]
            )));
        }
        let inv = 1.0 / v[2];
        inv_lo = inv_lo.min(inv);
        inv_hi = inv_hi.max(inv);
        let p = cam.project(*v);
        screen.push([p[0], p[1], inv]);
    }
    let span = inv_hi - inv_lo;
    let mut zbuf = vec![0.0f64; h * w];
    for f in faces {
        if f.iter().any(|&i| i >= verts.len()) {
            return Err(Error::invalid(format!("face {f:?} references a missing vertex")));
        }
        let [a, b, c] = [screen[f[0]], screen[f[1]], screen[f[2]]];
        let area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        if area.abs() < 1e-12 {
            continue;
        }
        let min_x = a[0].min(b[0]).min(c[0]);
        let max_x = a[0].max(b[0]).max(c[0]);
        let min_y = a[1].min(b[1]).min(c[1]);
        let max_y = a[1].max(b[1]).max(c[1]);
        let col0 = (min_x - 0.5).ceil().max(0.0) as usize;
        let row0 = (min_y - 0.5).ceil().max(0.0) as usize;
        let col1 = ((max_x - 0.5).floor().min(w as f64 - 1.0)).max(-1.0);
        let row1 = ((max_y - 0.5).floor().min(h as f64 - 1.0)).max(-1.0);
        if col1 < 0.0 || row1 < 0.0 {
            continue;
        }
        for row in row0..=row1 as usize {
            let py = row as f64 + 0.5;
            for col in col0..=col1 as usize {
                let px = col as f64 + 0.5;
                let w0 = ((b[0] - px) * (c[1] - py) - (b[1] - py) * (c[0] - px)) / area;
                let w1 = ((c[0] - px) * (a[1] - py) - (c[1] - py) * (a[0] - px)) / area;
                let w2 = 1.0 - w0 - w1;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let inv = w0 * a[2] + w1 * b[2] + w2 * c[2];
                let k = row * w + col;
                if inv > zbuf[k] {
                    zbuf[k] = inv;
                    let t = if span > 0.0 { (inv - inv_lo) / span } else { 1.0 };
                    out[k] = MIN_SHADE + (1.0 - MIN_SHADE) * t.clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(out)
}
