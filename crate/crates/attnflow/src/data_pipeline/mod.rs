//! Keypoint ingestion, paired-sample loading, batching, and the synthetic
//! articulated-sprite generator used for desk-scale verification.
//!
//! # Keypoint JSON schema
//!
//! ```json
//! {
//!   "resolution": { "width": 64, "height": 64 },
//!   "keypoints": [
//!     { "name": "nose", "x": 31.5, "y": 12.25, "confidence": 1.0 },
//!     ...exactly 18 entries in the canonical order of [`KEYPOINT_NAMES`]...
//!   ]
//! }
//! ```
//!
//! Coordinates are pixels at the stated resolution; a missing keypoint is
//! flagged by `confidence = 0`.
//!
//! # Dataset directory layout
//!
//! ```text
//! data/
//!   pair_0000/
//!     ref.png   ref_keypoints.json
//!     tgt.png   tgt_keypoints.json
//!     flow.flo  (optional ground-truth flow, target onto reference)
//!   pair_0001/ ...
//! ```
//!
//! Images are PNG; in memory they are `(3, H, W)` tensors. Raw files and
//! [`SyntheticPair`]s use `[0, 1]` intensities; the batch iterator emits
//! training pairs normalized to `[-1, 1]`.

pub mod skeleton;
pub mod sprite;

pub use sprite::{generate_sprite_pair, generate_sprite_pair_at, sprite_region_masks, SyntheticPair};

use crate::deform_net::SkeletonMap;
use crate::error::{Error, Result};
use crate::warp_ops::FlowField;
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Canonical 18-keypoint layout (heatmap channel order).
pub const KEYPOINT_NAMES: [&str; 18] = [
    "nose",
    "neck",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_eye",
    "left_eye",
    "right_ear",
    "left_ear",
];

/// Keypoint indices that outline the face (nose, eyes, ears).
pub const FACE_KEYPOINTS: [usize; 5] = [0, 14, 15, 16, 17];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct KeypointFileEntry {
    name: String,
    x: f64,
    y: f64,
    confidence: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResolutionEntry {
    width: usize,
    height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct KeypointFile {
    resolution: ResolutionEntry,
    keypoints: Vec<KeypointFileEntry>,
}

/// 18 keypoints in the canonical order plus the image resolution they refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    points: [Keypoint; 18],
    width: usize,
    height: usize,
}

impl KeypointSet {
    pub fn new(points: [Keypoint; 18], width: usize, height: usize) -> Result<Self> {
        if width < 1 || height < 1 {
            return Err(Error::validation("keypoint resolution must be positive"));
        }
        for (i, p) in points.iter().enumerate() {
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(Error::validation(format!(
                    "keypoint {} has non-finite coordinates",
                    KEYPOINT_NAMES[i]
                )));
            }
            if !(0.0..=1.0).contains(&p.confidence) {
                return Err(Error::validation(format!(
                    "keypoint {}: confidence {} outside [0, 1]",
                    KEYPOINT_NAMES[i], p.confidence
                )));
            }
        }
        Ok(KeypointSet {
            points,
            width,
            height,
        })
    }

    pub fn points(&self) -> &[Keypoint; 18] {
        &self.points
    }
    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Rasterize to heatmaps + limb channel at the given resolution.
    pub fn rasterize(&self, h: usize, w: usize) -> Result<SkeletonMap> {
        skeleton::rasterize_skeleton(self, h, w)
    }
}

/// Parse a keypoint JSON file; schema violations name the offending field.
pub fn load_keypoints(path: impl AsRef<Path>) -> Result<KeypointSet> {
    let text = std::fs::read_to_string(path.as_ref())?;
    parse_keypoints(&text)
}

pub fn parse_keypoints(text: &str) -> Result<KeypointSet> {
    let file: KeypointFile =
        serde_json::from_str(text).map_err(|e| Error::parse(format!("keypoint json: {e}")))?;
    if file.keypoints.len() != 18 {
        return Err(Error::parse(format!(
            "keypoints: expected 18 entries, got {}",
            file.keypoints.len()
        )));
    }
    let mut points = [Keypoint {
        x: 0.0,
        y: 0.0,
        confidence: 0.0,
    }; 18];
    for (i, e) in file.keypoints.iter().enumerate() {
        if e.name != KEYPOINT_NAMES[i] {
            return Err(Error::parse(format!(
                "name: entry {i} is '{}', expected '{}'",
                e.name, KEYPOINT_NAMES[i]
            )));
        }
        if !e.x.is_finite() || !e.y.is_finite() {
            return Err(Error::parse(format!("x/y: keypoint '{}' not finite", e.name)));
        }
        if !(0.0..=1.0).contains(&e.confidence) {
            return Err(Error::parse(format!(
                "confidence: keypoint '{}' has {} outside [0, 1]",
                e.name, e.confidence
            )));
        }
        points[i] = Keypoint {
            x: e.x,
            y: e.y,
            confidence: e.confidence,
        };
    }
    if file.resolution.width < 1 || file.resolution.height < 1 {
        return Err(Error::parse("resolution: must be positive"));
    }
    KeypointSet::new(points, file.resolution.width, file.resolution.height)
}

pub fn save_keypoints(path: impl AsRef<Path>, k: &KeypointSet) -> Result<()> {
    let file = KeypointFile {
        resolution: ResolutionEntry {
            width: k.width,
            height: k.height,
        },
        keypoints: k
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| KeypointFileEntry {
                name: KEYPOINT_NAMES[i].to_string(),
                x: p.x,
                y: p.y,
                confidence: p.confidence,
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::parse(format!("keypoint json: {e}")))?;
    std::fs::write(path.as_ref(), text)?;
    Ok(())
}

// ---- image helpers ---------------------------------------------------------

/// Load an RGB PNG as `(3, H, W)` with intensities in `[0, 1]`.
pub fn load_png(path: impl AsRef<Path>) -> Result<Array3<f64>> {
    let img = image::open(path.as_ref())
        .map_err(|e| Error::parse(format!("png: {e}")))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Save a `(3, H, W)` tensor with intensities in `[0, 1]` as an RGB PNG.
pub fn save_png(path: impl AsRef<Path>, img: &Array3<f64>) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::validation(format!("expected 3 channels, got {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        for ch in 0..3 {
            let v = img[(ch, y as usize, x as usize)].clamp(0.0, 1.0);
            p.0[ch] = (v * 255.0).round() as u8;
        }
    }
    buf.save(path.as_ref())
        .map_err(|e| Error::parse(format!("png: {e}")))?;
    Ok(())
}

/// `[0, 1]` intensities to the model's `[-1, 1]` range.
pub fn to_model_range(img: &Array3<f64>) -> Array3<f64> {
    img.mapv(|v| v * 2.0 - 1.0)
}

/// `[-1, 1]` model outputs back to `[0, 1]` intensities.
pub fn to_unit_range(img: &Array3<f64>) -> Array3<f64> {
    img.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

// ---- training pairs -----------------------------------------------------------

/// One reference/target pair ready for the model: images in `[-1, 1]`,
/// rasterized skeletons, and (when available) ground-truth flow and its
/// validity mask.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub x_r: Array3<f64>,
    pub x_t: Array3<f64>,
    pub kp_r: KeypointSet,
    pub kp_t: KeypointSet,
    pub s_r: SkeletonMap,
    pub s_t: SkeletonMap,
    pub w_gt: Option<FlowField>,
    pub mask: Option<Array2<bool>>,
    pub seed: Option<u64>,
}

impl TrainingPair {
    pub fn from_synthetic(p: &SyntheticPair) -> Result<TrainingPair> {
        let (h, w) = (p.x_r.dim().1, p.x_r.dim().2);
        Ok(TrainingPair {
            x_r: to_model_range(&p.x_r),
            x_t: to_model_range(&p.x_t),
            kp_r: p.s_r.clone(),
            kp_t: p.s_t.clone(),
            s_r: p.s_r.rasterize(h, w)?,
            s_t: p.s_t.rasterize(h, w)?,
            w_gt: Some(p.w_gt.clone()),
            mask: Some(p.mask.clone()),
            seed: Some(p.seed),
        })
    }
}

/// Where training pairs come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Procedural sprites: `count` pairs with seeds `base_seed..base_seed+count`.
    Synthetic { count: usize, base_seed: u64 },
    /// A directory laid out as documented in the module docs.
    Directory(PathBuf),
}

/// Batch iterator configuration.
#[derive(Debug, Clone)]
pub struct LoaderConfig {
    pub source: DataSource,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub resolution: usize,
}

/// Deterministic batched loader. Epoch `e`'s order is a pure function of
/// `(shuffle_seed, e)`, so iteration is reproducible and resumable.
pub struct Loader {
    cfg: LoaderConfig,
    dir_pairs: Option<Vec<PathBuf>>,
}

impl Loader {
    pub fn new(cfg: LoaderConfig) -> Result<Loader> {
        if cfg.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        let dir_pairs = match &cfg.source {
            DataSource::Synthetic { count, .. } => {
                if *count == 0 {
                    return Err(Error::config("synthetic source with zero pairs"));
                }
                None
            }
            DataSource::Directory(dir) => {
                let mut pairs: Vec<PathBuf> = std::fs::read_dir(dir)?
                    .filter_map(|e| e.ok())
                    .map(|e| e.path())
                    .filter(|p| {
                        p.is_dir()
                            && p.file_name()
                                .and_then(|n| n.to_str())
                                .is_some_and(|n| n.starts_with("pair_"))
                    })
                    .collect();
                pairs.sort();
                if pairs.is_empty() {
                    return Err(Error::config(format!(
                        "no pair_* directories under {}",
                        dir.display()
                    )));
                }
                Some(pairs)
            }
        };
        Ok(Loader { cfg, dir_pairs })
    }

    pub fn len(&self) -> usize {
        match &self.cfg.source {
            DataSource::Synthetic { count, .. } => *count,
            DataSource::Directory(_) => self.dir_pairs.as_ref().unwrap().len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len().div_ceil(self.cfg.batch_size)
    }

    /// Shuffled sample order for an epoch.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.shuffle_seed.wrapping_add(epoch));
        order.shuffle(&mut rng);
        order
    }

    /// Load one sample by dataset index.
    pub fn pair(&self, index: usize) -> Result<TrainingPair> {
        match &self.cfg.source {
            DataSource::Synthetic { base_seed, .. } => {
                let p = generate_sprite_pair_at(base_seed + index as u64, self.cfg.resolution);
                TrainingPair::from_synthetic(&p)
            }
            DataSource::Directory(_) => {
                let dir = &self.dir_pairs.as_ref().unwrap()[index];
                let x_r = load_png(dir.join("ref.png"))?;
                let x_t = load_png(dir.join("tgt.png"))?;
                let kp_r = load_keypoints(dir.join("ref_keypoints.json"))?;
                let kp_t = load_keypoints(dir.join("tgt_keypoints.json"))?;
                let (h, w) = (x_r.dim().1, x_r.dim().2);
                let flow_path = dir.join("flow.flo");
                let w_gt = if flow_path.exists() {
                    Some(crate::warp_ops::read_flo(&flow_path)?)
                } else {
                    None
                };
                Ok(TrainingPair {
                    s_r: kp_r.rasterize(h, w)?,
                    s_t: kp_t.rasterize(h, w)?,
                    x_r: to_model_range(&x_r),
                    x_t: to_model_range(&x_t),
                    kp_r,
                    kp_t,
                    w_gt,
                    mask: None,
                    seed: None,
                })
            }
        }
    }

    /// Batch `b` of epoch `e` (the final batch of an epoch may be short).
    pub fn batch(&self, epoch: u64, b: usize) -> Result<Vec<TrainingPair>> {
        let order = self.epoch_order(epoch);
        let start = b * self.cfg.batch_size;
        if start >= order.len() {
            return Err(Error::config(format!("batch index {b} out of range")));
        }
        let end = (start + self.cfg.batch_size).min(order.len());
        order[start..end].iter().map(|&i| self.pair(i)).collect()
    }

    /// Iterate one epoch's batches in order.
    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Result<Vec<TrainingPair>>> + '_ {
        (0..self.batches_per_epoch()).map(move |b| self.batch(epoch, b))
    }
}

#[cfg(test)]
mod tests;
