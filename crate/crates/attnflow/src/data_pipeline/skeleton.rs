//! Skeleton rasterization: per-keypoint Gaussian heatmaps plus one limb
//! connectivity channel.

use super::{KeypointSet, KEYPOINT_NAMES};
use crate::deform_net::SkeletonMap;
use crate::error::Result;
use ndarray::Array3;

/// Heatmap standard deviation in pixels at the keypoints' own resolution;
/// rasterizing to another resolution scales it proportionally.
pub const HEATMAP_SIGMA: f64 = 1.5;

/// Limb-line softness in pixels at the keypoints' own resolution.
pub const LIMB_SIGMA: f64 = 1.0;

/// Keypoint index pairs connected by limbs.
pub const LIMB_PAIRS: [(usize, usize); 17] = [
    (1, 2),
    (1, 5),
    (2, 3),
    (3, 4),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (1, 11),
    (11, 12),
    (12, 13),
    (1, 0),
    (0, 14),
    (14, 16),
    (0, 15),
    (15, 17),
];

/// Squared distance from point `p` to segment `a`-`b`.
fn dist2_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    dx * dx + dy * dy
}

/// Rasterize keypoints to `(18 + 1, h, w)`: channel `i < 18` holds the Gaussian
/// heatmap of keypoint `i` (zero when the keypoint is missing), channel 18 the
/// limb connectivity map. Out-of-frame keypoints yield truncated Gaussians.
pub fn rasterize_skeleton(k: &KeypointSet, h: usize, w: usize) -> Result<SkeletonMap> {
    let j = KEYPOINT_NAMES.len();
    let (kh, kw) = k.resolution();
    let sx = w as f64 / kw as f64;
    let sy = h as f64 / kh as f64;
    // Isotropic sigma scaled by the geometric mean of the axis scalings.
    let scale = (sx * sy).sqrt();
    let sigma = HEATMAP_SIGMA * scale;
    let limb_sigma = LIMB_SIGMA * scale;

    let mut data = Array3::<f64>::zeros((j + 1, h, w));
    let pts: Vec<(f64, f64, bool)> = k
        .points()
        .iter()
        .map(|p| (p.x * sx, p.y * sy, p.confidence > 0.0))
        .collect();

    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for (i, &(px, py, present)) in pts.iter().enumerate() {
        if !present {
            continue;
        }
        for r in 0..h {
            for c in 0..w {
                let d2 = (c as f64 - px).powi(2) + (r as f64 - py).powi(2);
                data[(i, r, c)] = (-d2 * inv2s2).exp();
            }
        }
    }

    let inv2l2 = 1.0 / (2.0 * limb_sigma * limb_sigma);
    for &(a, b) in LIMB_PAIRS.iter() {
        if !pts[a].2 || !pts[b].2 {
            continue;
        }
        let pa = (pts[a].0, pts[a].1);
        let pb = (pts[b].0, pts[b].1);
        for r in 0..h {
            for c in 0..w {
                let d2 = dist2_to_segment((c as f64, r as f64), pa, pb);
                let v = (-d2 * inv2l2).exp();
                if v > data[(j, r, c)] {
                    data[(j, r, c)] = v;
                }
            }
        }
    }

    SkeletonMap::new(data)
}
