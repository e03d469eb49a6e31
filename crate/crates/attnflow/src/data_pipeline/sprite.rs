//! Procedural articulated-sprite pairs with analytic ground-truth flow.
//!
//! A sprite is a 2-D figure (torso + head + four single-segment limbs), each
//! part carrying a smooth procedural texture in its own local frame. A pair
//! renders the same figure under two poses; because every part moves rigidly,
//! the flow that maps each target pixel back onto the reference image is known
//! in closed form from the per-part transforms.
//!
//! The stored validity mask marks target pixels with a well-defined, bilinear
//! resample-safe correspondence: the pixel and its 8-neighborhood show the
//! same part in the target render, and all four bilinear taps of the mapped
//! source position show that part in the reference render. Silhouette pixels
//! and occluded correspondences are excluded, so
//! `flow_warp(x_r, w_gt)` reproduces `x_t` on the mask up to texture
//! resampling error.

use super::{Keypoint, KeypointSet};
use crate::warp_ops::FlowField;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pose parameters of the articulated figure; angles in radians, the torso
/// center in pixels. Screen coordinates: x right, y down, angles clockwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpritePose {
    pub center: (f64, f64),
    pub rot: f64,
    pub head_tilt: f64,
    /// Angle offsets for [right arm, left arm, right leg, left leg].
    pub limb_angles: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Part {
    Head,
    ArmR,
    ArmL,
    Torso,
    LegR,
    LegL,
}

/// Hit-test order, topmost first: arms over the torso, head over everything,
/// legs underneath. Arms crossing the torso self-occlude it.
const Z_ORDER: [Part; 6] = [
    Part::Head,
    Part::ArmR,
    Part::ArmL,
    Part::Torso,
    Part::LegR,
    Part::LegL,
];

/// Resolution-relative geometry.
struct Geometry {
    torso_hw: f64,
    torso_hh: f64,
    head_r: f64,
    head_anchor: (f64, f64),
    arm_len: f64,
    arm_w: f64,
    leg_len: f64,
    leg_w: f64,
    arm_anchor_x: f64,
    arm_anchor_y: f64,
    leg_anchor_x: f64,
    leg_anchor_y: f64,
}

impl Geometry {
    fn at(res: usize) -> Geometry {
        let r = res as f64;
        Geometry {
            torso_hw: 0.14 * r,
            torso_hh: 0.20 * r,
            head_r: 0.095 * r,
            head_anchor: (0.0, -0.27 * r),
            arm_len: 0.24 * r,
            arm_w: 0.045 * r,
            leg_len: 0.26 * r,
            leg_w: 0.05 * r,
            arm_anchor_x: 0.14 * r,
            arm_anchor_y: -0.14 * r,
            leg_anchor_x: 0.07 * r,
            leg_anchor_y: 0.20 * r,
        }
    }
}

fn rot(a: f64, p: (f64, f64)) -> (f64, f64) {
    let (s, c) = a.sin_cos();
    (c * p.0 - s * p.1, s * p.0 + c * p.1)
}

/// Rigid map: local part coordinates -> image pixels (and its inverse).
#[derive(Debug, Clone, Copy)]
struct Rigid {
    angle: f64,
    origin: (f64, f64),
}

impl Rigid {
    fn apply(&self, l: (f64, f64)) -> (f64, f64) {
        let p = rot(self.angle, l);
        (p.0 + self.origin.0, p.1 + self.origin.1)
    }
    fn invert(&self, p: (f64, f64)) -> (f64, f64) {
        rot(-self.angle, (p.0 - self.origin.0, p.1 - self.origin.1))
    }
}

/// Rest directions of [arm R, arm L, leg R, leg L] (from +x, y down).
const REST: [f64; 4] = [
    std::f64::consts::FRAC_PI_2 + 0.45,
    std::f64::consts::FRAC_PI_2 - 0.45,
    std::f64::consts::FRAC_PI_2 + 0.12,
    std::f64::consts::FRAC_PI_2 - 0.12,
];

struct Figure {
    geo: Geometry,
    transforms: [Rigid; 6], // indexed by Part order: Head, ArmR, ArmL, Torso, LegR, LegL
}

fn part_index(p: Part) -> usize {
    match p {
        Part::Head => 0,
        Part::ArmR => 1,
        Part::ArmL => 2,
        Part::Torso => 3,
        Part::LegR => 4,
        Part::LegL => 5,
    }
}

impl Figure {
    fn new(res: usize, pose: &SpritePose) -> Figure {
        let geo = Geometry::at(res);
        let anchor = |a: (f64, f64)| -> (f64, f64) {
            let p = rot(pose.rot, a);
            (p.0 + pose.center.0, p.1 + pose.center.1)
        };
        let torso = Rigid {
            angle: pose.rot,
            origin: pose.center,
        };
        let head = Rigid {
            angle: pose.rot + pose.head_tilt,
            origin: anchor(geo.head_anchor),
        };
        let arm_r = Rigid {
            angle: pose.rot + REST[0] + pose.limb_angles[0],
            origin: anchor((-geo.arm_anchor_x, geo.arm_anchor_y)),
        };
        let arm_l = Rigid {
            angle: pose.rot + REST[1] + pose.limb_angles[1],
            origin: anchor((geo.arm_anchor_x, geo.arm_anchor_y)),
        };
        let leg_r = Rigid {
            angle: pose.rot + REST[2] + pose.limb_angles[2],
            origin: anchor((-geo.leg_anchor_x, geo.leg_anchor_y)),
        };
        let leg_l = Rigid {
            angle: pose.rot + REST[3] + pose.limb_angles[3],
            origin: anchor((geo.leg_anchor_x, geo.leg_anchor_y)),
        };
        Figure {
            geo,
            transforms: [head, arm_r, arm_l, torso, leg_r, leg_l],
        }
    }

    fn inside(&self, part: Part, l: (f64, f64)) -> bool {
        let g = &self.geo;
        match part {
            Part::Torso => l.0.abs() <= g.torso_hw && l.1.abs() <= g.torso_hh,
            Part::Head => l.0 * l.0 + l.1 * l.1 <= g.head_r * g.head_r,
            Part::ArmR | Part::ArmL | Part::LegR | Part::LegL => {
                let (len, w) = if matches!(part, Part::ArmR | Part::ArmL) {
                    (g.arm_len, g.arm_w)
                } else {
                    (g.leg_len, g.leg_w)
                };
                let capsule = (0.0..=len).contains(&l.0) && l.1.abs() <= w;
                let cap0 = l.0 * l.0 + l.1 * l.1 <= w * w;
                let cap1 = (l.0 - len) * (l.0 - len) + l.1 * l.1 <= w * w;
                capsule || cap0 || cap1
            }
        }
    }

    /// Topmost part covering pixel `p`, with its local coordinates.
    fn part_at(&self, p: (f64, f64)) -> Option<(Part, (f64, f64))> {
        for &part in Z_ORDER.iter() {
            let l = self.transforms[part_index(part)].invert(p);
            if self.inside(part, l) {
                return Some((part, l));
            }
        }
        None
    }
}

/// Per-seed color palette.
struct Palette {
    background: [f64; 3],
    torso: [f64; 3],
    head: [f64; 3],
    arm: [f64; 3],
    leg: [f64; 3],
}

impl Palette {
    fn sample(rng: &mut ChaCha8Rng) -> Palette {
        fn col(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
            [
                rng.random_range(lo..hi),
                rng.random_range(lo..hi),
                rng.random_range(lo..hi),
            ]
        }
        let background = col(rng, 0.82, 0.95);
        let torso = col(rng, 0.25, 0.65);
        let head = [
            rng.random_range(0.65..0.8),
            rng.random_range(0.5..0.65),
            rng.random_range(0.4..0.55),
        ];
        let arm = col(rng, 0.3, 0.7);
        let leg = col(rng, 0.2, 0.6);
        Palette {
            background,
            torso,
            head,
            arm,
            leg,
        }
    }
}

/// The torso's high-frequency logo zone, in torso-local coordinates.
fn in_logo_zone(geo: &Geometry, l: (f64, f64)) -> bool {
    l.0.abs() <= 0.6 * geo.torso_hw && l.1 >= -0.65 * geo.torso_hh && l.1 <= -0.05 * geo.torso_hh
}

/// Smooth part texture in local coordinates; intensities in [0.02, 0.98].
fn texture(pal: &Palette, geo: &Geometry, part: Part, l: (f64, f64)) -> [f64; 3] {
    use std::f64::consts::TAU;
    let mut c = match part {
        Part::Torso => pal.torso,
        Part::Head => pal.head,
        Part::ArmR | Part::ArmL => pal.arm,
        Part::LegR | Part::LegL => pal.leg,
    };
    match part {
        Part::Torso => {
            let stripe = 0.10 * (TAU * l.1 / 11.0).sin();
            for v in c.iter_mut() {
                *v += stripe;
            }
            if in_logo_zone(geo, l) {
                // High-frequency checker: this is the texture the flow branch
                // exists to preserve.
                let checker = 0.30 * (TAU * l.0 / 6.0).sin() * (TAU * l.1 / 6.0).sin();
                c[0] += checker;
                c[1] -= 0.6 * checker;
                c[2] += 0.3 * checker;
            } else {
                let diag = 0.06 * (TAU * (l.0 + l.1) / 9.0).sin();
                for v in c.iter_mut() {
                    *v += diag;
                }
            }
        }
        Part::Head => {
            let r = geo.head_r;
            let eye = |ex: f64| {
                let (dx, dy) = (l.0 - ex, l.1 + 0.15 * r);
                let s2 = (0.16 * r) * (0.16 * r);
                0.35 * (-(dx * dx + dy * dy) / (2.0 * s2)).exp()
            };
            let mouth = {
                let dx = l.0 / (0.45 * r);
                let dy = (l.1 - 0.45 * r) / (0.16 * r);
                0.30 * (-(dx * dx + dy * dy) / 2.0).exp()
            };
            let dark = eye(-0.35 * r) + eye(0.35 * r) + mouth;
            for v in c.iter_mut() {
                *v -= dark;
            }
        }
        Part::ArmR | Part::ArmL => {
            let band = 0.08 * (TAU * l.0 / 10.0).sin();
            for v in c.iter_mut() {
                *v += band;
            }
        }
        Part::LegR | Part::LegL => {
            let band = 0.08 * (TAU * l.0 / 12.0).sin();
            c[0] += band;
            c[2] -= 0.5 * band;
        }
    }
    for v in c.iter_mut() {
        *v = v.clamp(0.02, 0.98);
    }
    c
}

fn render(fig: &Figure, pal: &Palette, res: usize) -> Array3<f64> {
    let mut img = Array3::<f64>::zeros((3, res, res));
    for r in 0..res {
        for c in 0..res {
            let px = (c as f64, r as f64);
            let rgb = match fig.part_at(px) {
                Some((part, l)) => texture(pal, &fig.geo, part, l),
                None => pal.background,
            };
            for ch in 0..3 {
                img[(ch, r, c)] = rgb[ch];
            }
        }
    }
    img
}

fn keypoints(fig: &Figure, res: usize) -> KeypointSet {
    let g = &fig.geo;
    let t = |part: Part, l: (f64, f64)| -> (f64, f64) { fig.transforms[part_index(part)].apply(l) };
    let arm_tip = 0.95 * g.arm_len;
    let leg_tip = 0.95 * g.leg_len;
    let coords: [(f64, f64); 18] = [
        t(Part::Head, (0.0, 0.10 * g.head_r)),        // nose
        t(Part::Torso, (0.0, -g.torso_hh)),           // neck
        t(Part::ArmR, (0.0, 0.0)),                    // right shoulder
        t(Part::ArmR, (0.5 * g.arm_len, 0.0)),        // right elbow
        t(Part::ArmR, (arm_tip, 0.0)),                // right wrist
        t(Part::ArmL, (0.0, 0.0)),                    // left shoulder
        t(Part::ArmL, (0.5 * g.arm_len, 0.0)),        // left elbow
        t(Part::ArmL, (arm_tip, 0.0)),                // left wrist
        t(Part::LegR, (0.0, 0.0)),                    // right hip
        t(Part::LegR, (0.5 * g.leg_len, 0.0)),        // right knee
        t(Part::LegR, (leg_tip, 0.0)),                // right ankle
        t(Part::LegL, (0.0, 0.0)),                    // left hip
        t(Part::LegL, (0.5 * g.leg_len, 0.0)),        // left knee
        t(Part::LegL, (leg_tip, 0.0)),                // left ankle
        t(Part::Head, (-0.35 * g.head_r, -0.15 * g.head_r)), // right eye
        t(Part::Head, (0.35 * g.head_r, -0.15 * g.head_r)),  // left eye
        t(Part::Head, (-0.85 * g.head_r, 0.0)),       // right ear
        t(Part::Head, (0.85 * g.head_r, 0.0)),        // left ear
    ];
    let points = coords.map(|(x, y)| Keypoint {
        x,
        y,
        confidence: 1.0,
    });
    KeypointSet::new(points, res, res).expect("sprite keypoints are valid")
}

/// A rendered pair with analytic ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    /// Reference image, `(3, H, W)` in `[0, 1]`.
    pub x_r: Array3<f64>,
    /// Target image, `(3, H, W)` in `[0, 1]`.
    pub x_t: Array3<f64>,
    pub s_r: KeypointSet,
    pub s_t: KeypointSet,
    /// Flow at full resolution mapping target pixels onto the reference.
    pub w_gt: FlowField,
    /// Target pixels with a valid, resample-safe correspondence.
    pub mask: Array2<bool>,
    pub seed: u64,
}

fn sample_pose(rng: &mut ChaCha8Rng, res: usize) -> SpritePose {
    let r = res as f64;
    SpritePose {
        center: (
            r * 0.5 + rng.random_range(-0.05 * r..0.05 * r),
            r * 0.5 + rng.random_range(-0.04 * r..0.04 * r),
        ),
        rot: rng.random_range(-0.15..0.15),
        head_tilt: rng.random_range(-0.10..0.10),
        limb_angles: [
            rng.random_range(-0.30..0.30),
            rng.random_range(-0.30..0.30),
            rng.random_range(-0.25..0.25),
            rng.random_range(-0.25..0.25),
        ],
    }
}

fn sample_delta(rng: &mut ChaCha8Rng, res: usize, base: &SpritePose) -> SpritePose {
    let r = res as f64;
    SpritePose {
        center: (
            (base.center.0 + rng.random_range(-0.08 * r..0.08 * r)).clamp(0.38 * r, 0.62 * r),
            (base.center.1 + rng.random_range(-0.06 * r..0.06 * r)).clamp(0.42 * r, 0.58 * r),
        ),
        rot: (base.rot + rng.random_range(-0.20..0.20)).clamp(-0.3, 0.3),
        head_tilt: (base.head_tilt + rng.random_range(-0.12..0.12)).clamp(-0.2, 0.2),
        limb_angles: [
            (base.limb_angles[0] + rng.random_range(-0.35..0.35)).clamp(-0.55, 0.55),
            (base.limb_angles[1] + rng.random_range(-0.35..0.35)).clamp(-0.55, 0.55),
            (base.limb_angles[2] + rng.random_range(-0.30..0.30)).clamp(-0.45, 0.45),
            (base.limb_angles[3] + rng.random_range(-0.30..0.30)).clamp(-0.45, 0.45),
        ],
    }
}

/// Fraction of seeds rendered as identity pairs (target pose == reference pose).
pub const IDENTITY_PAIR_FRACTION: f64 = 0.1;

/// Deterministic pair at the desk-scale resolution of 64.
pub fn generate_sprite_pair(seed: u64) -> SyntheticPair {
    generate_sprite_pair_at(seed, 64)
}

/// Deterministic pair at an arbitrary square resolution.
pub fn generate_sprite_pair_at(seed: u64, res: usize) -> SyntheticPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pal = Palette::sample(&mut rng);
    let pose_r = sample_pose(&mut rng, res);
    let identity = rng.random::<f64>() < IDENTITY_PAIR_FRACTION;
    let pose_t = if identity {
        pose_r
    } else {
        sample_delta(&mut rng, res, &pose_r)
    };
    render_pair_with_poses(seed, res, &pose_r, &pose_t, pal)
}

/// Render a pair for explicit poses (the seed only selects the palette).
pub fn generate_pair_with_poses(
    seed: u64,
    res: usize,
    pose_r: &SpritePose,
    pose_t: &SpritePose,
) -> SyntheticPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pal = Palette::sample(&mut rng);
    render_pair_with_poses(seed, res, pose_r, pose_t, pal)
}

fn render_pair_with_poses(
    seed: u64,
    res: usize,
    pose_r: &SpritePose,
    pose_t: &SpritePose,
    pal: Palette,
) -> SyntheticPair {
    let fig_r = Figure::new(res, pose_r);
    let fig_t = Figure::new(res, pose_t);
    let x_r = render(&fig_r, &pal, res);
    let x_t = render(&fig_t, &pal, res);

    // Part-id maps used for the validity mask.
    let id_at = |fig: &Figure, x: f64, y: f64| -> i8 {
        match fig.part_at((x, y)) {
            Some((p, _)) => part_index(p) as i8,
            None => -1,
        }
    };
    let mut id_t = Array2::<i8>::from_elem((res, res), -1);
    let mut id_r = Array2::<i8>::from_elem((res, res), -1);
    for r in 0..res {
        for c in 0..res {
            id_t[(r, c)] = id_at(&fig_t, c as f64, r as f64);
            id_r[(r, c)] = id_at(&fig_r, c as f64, r as f64);
        }
    }

    let mut w_gt = Array3::<f64>::zeros((2, res, res));
    let mut mask = Array2::<bool>::from_elem((res, res), false);
    for r in 0..res {
        for c in 0..res {
            let pid = id_t[(r, c)];
            if pid < 0 {
                continue;
            }
            let part_t = Z_ORDER
                .iter()
                .copied()
                .find(|&p| part_index(p) as i8 == pid)
                .unwrap();
            let l = fig_t.transforms[pid as usize].invert((c as f64, r as f64));
            let src = fig_r.transforms[pid as usize].apply(l);
            w_gt[(0, r, c)] = src.0 - c as f64;
            w_gt[(1, r, c)] = src.1 - r as f64;
            let _ = part_t;

            // Interior in the target: the 8-neighborhood shows the same part.
            let mut interior = r > 0 && c > 0 && r + 1 < res && c + 1 < res;
            if interior {
                'nb: for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        if id_t[((r as i64 + dr) as usize, (c as i64 + dc) as usize)] != pid {
                            interior = false;
                            break 'nb;
                        }
                    }
                }
            }
            if !interior {
                continue;
            }
            // Visible in the reference: the four bilinear taps of the mapped
            // position show the same part.
            let (x0, y0) = (src.0.floor(), src.1.floor());
            let mut visible = x0 >= 0.0 && y0 >= 0.0 && x0 + 1.0 < res as f64 && y0 + 1.0 < res as f64;
            if visible {
                let (x0, y0) = (x0 as usize, y0 as usize);
                for (ty, tx) in [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)] {
                    if id_r[(ty, tx)] != pid {
                        visible = false;
                        break;
                    }
                }
            }
            mask[(r, c)] = visible;
        }
    }

    SyntheticPair {
        x_r,
        x_t,
        s_r: keypoints(&fig_r, res),
        s_t: keypoints(&fig_t, res),
        w_gt: FlowField::new(w_gt).expect("sprite flow is finite"),
        mask,
        seed,
    }
}

/// Region masks in the target frame for texture-selectivity checks:
/// `textured` marks sprite pixels whose material point lies in the torso's
/// high-frequency logo zone, `flat` marks background pixels.
pub struct RegionMasks {
    pub textured: Array2<bool>,
    pub flat: Array2<bool>,
}

pub fn sprite_region_masks(seed: u64, res: usize) -> RegionMasks {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let _pal = Palette::sample(&mut rng);
    let pose_r = sample_pose(&mut rng, res);
    let identity = rng.random::<f64>() < IDENTITY_PAIR_FRACTION;
    let pose_t = if identity {
        pose_r
    } else {
        sample_delta(&mut rng, res, &pose_r)
    };
    let fig_t = Figure::new(res, &pose_t);
    let geo = Geometry::at(res);
    let mut textured = Array2::<bool>::from_elem((res, res), false);
    let mut flat = Array2::<bool>::from_elem((res, res), false);
    for r in 0..res {
        for c in 0..res {
            match fig_t.part_at((c as f64, r as f64)) {
                Some((Part::Torso, l)) => {
                    if in_logo_zone(&geo, l) {
                        textured[(r, c)] = true;
                    }
                }
                None => flat[(r, c)] = true,
                _ => {}
            }
        }
    }
    RegionMasks { textured, flat }
}
