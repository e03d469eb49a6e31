//! The training objective: deformation-constraining losses (attention
//! reconstruction, sampling correctness, local-affine regularization) and
//! image-realism losses (perceptual, face, style, adversarial), plus the
//! weighted total.
//!
//! Every loss exists twice: as a graph builder (used by the trainer, gradients
//! flow) and as a typed single-sample wrapper returning `f64` (used by tests
//! and tools). Both run the same kernels.

use crate::autodiff::{Border, Graph, Var};
use crate::data_pipeline::{KeypointSet, FACE_KEYPOINTS};
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv2d, ParamSet};
use crate::warp_ops::{CorrelationMatrix, FeatureMap, FlowField};
use ndarray::{Array2, ArrayD, Axis, Ix3, Ix4};

/// Lower clamp for cosine-similarity denominators (both the norm product and
/// the best-match normalizer), guarding against blow-ups on near-zero or
/// anti-correlated features.
pub const COS_EPS: f64 = 1e-3;

/// Ridge added to `S S^T` in the least-squares affine solve.
pub const AFFINE_RIDGE: f64 = 1e-6;

/// Face crops are resized to this square before feature extraction.
pub const FACE_CROP_SIZE: usize = 64;

/// Seed of the deterministic fallback feature extractor.
pub const FX_SEED: u64 = 0x0f00d;

// ---- feature extractor ------------------------------------------------------

/// A fixed (non-trained) convolutional feature pyramid with four activation
/// taps at resolutions `H`, `H/2`, `H/4`, `H/8`. Weights come from a file
/// when one is supplied, otherwise from a seeded deterministic init so the
/// whole test suite runs offline.
pub struct FeatureExtractor {
    params: ParamSet,
    layers: Vec<Conv2d>,
    channels: Vec<usize>,
}

impl FeatureExtractor {
    fn build_layers(channels: &[usize]) -> Vec<Conv2d> {
        assert_eq!(channels.len(), 4);
        let mut layers = Vec::new();
        let mut cin = 3;
        for (i, &c) in channels.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            layers.push(Conv2d::new(format!("fx.l{i}"), cin, c, 3, stride));
            cin = c;
        }
        layers
    }

    /// Deterministic seeded extractor.
    pub fn seeded(channels: &[usize], seed: u64) -> Result<Self> {
        let layers = Self::build_layers(channels);
        let mut params = ParamSet::new("fx-seeded");
        for l in &layers {
            l.init(&mut params, seed, 1.0)?;
        }
        Ok(FeatureExtractor {
            params,
            layers,
            channels: channels.to_vec(),
        })
    }

    /// Load pretrained weights from a checkpoint container when the path
    /// exists; fall back to the seeded extractor otherwise.
    pub fn load_or_seeded(path: Option<&std::path::Path>, channels: &[usize]) -> Result<Self> {
        if let Some(p) = path {
            if p.exists() {
                let params = crate::nn::load_params(p)?;
                let layers = Self::build_layers(channels);
                for l in &layers {
                    for suffix in ["w", "b"] {
                        let name = format!("{}.{suffix}", l.name);
                        if params.get(&name).is_none() {
                            return Err(Error::validation(format!(
                                "feature extractor weights missing {name}"
                            )));
                        }
                    }
                }
                return Ok(FeatureExtractor {
                    params,
                    layers,
                    channels: channels.to_vec(),
                });
            }
        }
        Self::seeded(channels, FX_SEED)
    }

    pub fn tap_channels(&self) -> &[usize] {
        &self.channels
    }

    /// Tap resolutions for a given input resolution.
    pub fn tap_resolutions(&self, input_res: usize) -> Vec<usize> {
        (0..4).map(|i| input_res >> i).collect()
    }

    /// Index of the tap whose resolution equals `res` for `input_res` inputs.
    pub fn tap_for_resolution(&self, input_res: usize, res: usize) -> Result<usize> {
        self.tap_resolutions(input_res)
            .iter()
            .position(|&r| r == res)
            .ok_or_else(|| {
                Error::dimension(format!(
                    "no feature tap at resolution {res} for {input_res} inputs"
                ))
            })
    }

    /// Graph forward returning the four taps. Weights are bound as constants,
    /// so no gradients accumulate into the extractor.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let b = Binding::bind(g, &self.params, &[], false);
        let mut taps = Vec::new();
        let mut h = x;
        for l in &self.layers {
            h = l.forward(g, &b, h);
            h = g.relu(h);
            taps.push(h);
        }
        taps
    }

    /// Typed path: activations of one image per tap.
    pub fn extract(&self, img: &FeatureMap) -> Result<Vec<ndarray::Array3<f64>>> {
        let (h, w) = img.resolution();
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::dimension(
                "feature extractor input must be divisible by 8",
            ));
        }
        let mut g = Graph::new();
        let xv = g.constant(img.batched().into_dyn());
        let taps = self.forward(&mut g, xv);
        Ok(taps
            .into_iter()
            .map(|t| {
                g.value(t)
                    .clone()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .index_axis_move(Axis(0), 0)
            })
            .collect())
    }
}

// ---- loss weights ------------------------------------------------------------

/// Non-negative weights of the overall objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub attn: f64,
    pub flow: f64,
    pub regu: f64,
    pub perc: f64,
    pub face: f64,
    pub style: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            attn: 5.0,
            flow: 2.0,
            regu: 0.001,
            perc: 0.5,
            face: 1.0,
            style: 500.0,
            adv: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("attn", self.attn),
            ("flow", self.flow),
            ("regu", self.regu),
            ("perc", self.perc),
            ("face", self.face),
            ("style", self.style),
            ("adv", self.adv),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::validation(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Scalar loss values of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub attn: f64,
    pub flow: f64,
    pub regu: f64,
    pub perc: f64,
    pub face: f64,
    pub style: f64,
    pub adv: f64,
}

/// The overall objective `sum_k lambda_k * L_k`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    for (name, v) in [
        ("attn", c.attn),
        ("flow", c.flow),
        ("regu", c.regu),
        ("perc", c.perc),
        ("face", c.face),
        ("style", c.style),
        ("adv", c.adv),
    ] {
        if !v.is_finite() {
            return Err(Error::validation(format!("loss component {name} not finite")));
        }
    }
    Ok(w.attn * c.attn
        + w.flow * c.flow
        + w.regu * c.regu
        + w.perc * c.perc
        + w.face * c.face
        + w.style * c.style
        + w.adv * c.adv)
}

/// Graph combination of weighted loss terms.
pub fn weighted_sum_vars(g: &mut Graph, terms: &[(Var, f64)]) -> Var {
    let mut acc: Option<Var> = None;
    for &(v, lambda) in terms {
        let t = g.scale(v, lambda);
        acc = Some(match acc {
            Some(a) => g.add(a, t),
            None => t,
        });
    }
    acc.unwrap_or_else(|| g.constant(ndarray::arr0(0.0).into_dyn()))
}

// ---- attention loss ------------------------------------------------------------

/// Graph: mean L1 between `W_a(x_r_down, C)` and `x_t_down`.
pub fn attention_loss_vars(g: &mut Graph, c: Var, x_r_down: Var, x_t_down: Var) -> Var {
    let shape = g.value(x_r_down).shape().to_vec();
    let (n, ch, s) = (shape[0], shape[1], shape[2]);
    let xf = g.reshape(x_r_down, &[n, ch, s * s]);
    let warped = g.matmul_b(xf, c, false, false);
    let warped = g.reshape(warped, &[n, ch, s, shape[3]]);
    g.l1_mean(warped, x_t_down)
}

/// Graph variant reusing an already-warped reference.
pub fn attention_loss_from_warped(g: &mut Graph, warped: Var, x_t_down: Var) -> Var {
    g.l1_mean(warped, x_t_down)
}

/// Typed: mean L1 distance between the attention-warped resized reference and
/// the resized target.
pub fn attention_loss(
    c: &CorrelationMatrix,
    x_r_down: &FeatureMap,
    x_t_down: &FeatureMap,
) -> Result<f64> {
    if x_r_down.resolution() != c.resolution() || x_t_down.resolution() != c.resolution() {
        return Err(Error::dimension(format!(
            "images {:?}/{:?} do not match correlation resolution {:?}",
            x_r_down.resolution(),
            x_t_down.resolution(),
            c.resolution()
        )));
    }
    if x_r_down.channels() != x_t_down.channels() {
        return Err(Error::dimension("channel mismatch in attention loss"));
    }
    let mut g = Graph::new();
    let cv = g.constant(c.data().clone().insert_axis(Axis(0)).into_dyn());
    let xr = g.constant(x_r_down.batched().into_dyn());
    let xt = g.constant(x_t_down.batched().into_dyn());
    let l = attention_loss_vars(&mut g, cv, xr, xt);
    Ok(g.scalar(l))
}

// ---- sampling correctness loss ----------------------------------------------------

/// Cosine similarity per spatial position of two `(N, C, P)` tensors, with
/// the norm product clamped at [`COS_EPS`].
fn cosine_positions(g: &mut Graph, a: Var, b: Var) -> Var {
    let prod = g.mul(a, b);
    let dot = g.sum_axis(prod, 1);
    let aa = g.mul(a, a);
    let na = g.sum_axis(aa, 1);
    let na = g.clamp_min(na, 1e-12);
    let na = g.sqrt(na);
    let bb = g.mul(b, b);
    let nb = g.sum_axis(bb, 1);
    let nb = g.clamp_min(nb, 1e-12);
    let nb = g.sqrt(nb);
    let den = g.mul(na, nb);
    let den = g.clamp_min(den, COS_EPS);
    g.div(dot, den)
}

/// For every target position, the source position whose feature has maximal
/// cosine similarity (computed outside the graph; ties break to the first).
pub fn best_source_indices(v_r: &ArrayD<f64>, v_t: &ArrayD<f64>) -> Vec<usize> {
    let r3 = v_r.view().into_dimensionality::<Ix3>().expect("(N, C, P)");
    let t3 = v_t.view().into_dimensionality::<Ix3>().unwrap();
    let (n, c, p) = (r3.shape()[0], r3.shape()[1], r3.shape()[2]);
    let normalize = |x: ndarray::ArrayView2<f64>| -> Array2<f64> {
        let mut out = x.to_owned();
        for mut col in out.axis_iter_mut(Axis(1)) {
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt().max(COS_EPS);
            col.mapv_inplace(|v| v / norm);
        }
        out
    };
    let mut idx = Vec::with_capacity(n * p);
    for i in 0..n {
        let rn = normalize(r3.index_axis(Axis(0), i));
        let tn = normalize(t3.index_axis(Axis(0), i));
        let mut sim = Array2::<f64>::zeros((p, p));
        ndarray::linalg::general_mat_mul(1.0, &rn.t(), &tn, 0.0, &mut sim);
        let _ = c;
        for j in 0..p {
            let col = sim.column(j);
            let mut best = 0;
            let mut bv = f64::NEG_INFINITY;
            for (k, &v) in col.iter().enumerate() {
                if v > bv {
                    bv = v;
                    best = k;
                }
            }
            idx.push(best);
        }
    }
    idx
}

/// Graph: `mean_l exp[-cos(W_f(v_r, w)^l, v_t^l) / max(cos(v_r^lmax, v_t^l), eps)]`,
/// averaged over batch and positions. `v_r`, `v_t` are `(N, C, s, s)` feature
/// taps at the flow's resolution.
pub fn sampling_correctness_vars(g: &mut Graph, w: Var, v_r: Var, v_t: Var) -> Var {
    let shape = g.value(v_r).shape().to_vec();
    let (n, c, s, s2) = (shape[0], shape[1], shape[2], shape[3]);
    let p = s * s2;
    let warped = g.flow_warp(v_r, w, Border::Clamp);
    let wf = g.reshape(warped, &[n, c, p]);
    let rf = g.reshape(v_r, &[n, c, p]);
    let tf = g.reshape(v_t, &[n, c, p]);

    let idx = best_source_indices(g.value(rf), g.value(tf));
    let best = g.gather_last(rf, idx, p);

    let num = cosine_positions(g, wf, tf);
    let den = cosine_positions(g, best, tf);
    let den = g.clamp_min(den, COS_EPS);
    let ratio = g.div(num, den);
    let nr = g.neg(ratio);
    let e = g.exp(nr);
    g.mean(e)
}

/// Typed: sampling correctness of a flow against reference/target images,
/// using the extractor tap at the flow's resolution.
pub fn sampling_correctness_loss(
    w: &FlowField,
    x_r: &FeatureMap,
    x_t: &FeatureMap,
    fx: &FeatureExtractor,
) -> Result<f64> {
    if x_r.resolution() != x_t.resolution() {
        return Err(Error::dimension("reference/target resolution mismatch"));
    }
    let input_res = x_r.height();
    let tap = fx.tap_for_resolution(input_res, w.height())?;
    let mut g = Graph::new();
    let xr = g.constant(x_r.batched().into_dyn());
    let xt = g.constant(x_t.batched().into_dyn());
    let tr = fx.forward(&mut g, xr)[tap];
    let tt = fx.forward(&mut g, xt)[tap];
    if !g.value(tr).iter().all(|v| v.is_finite()) || !g.value(tt).iter().all(|v| v.is_finite()) {
        return Err(Error::validation("non-finite features"));
    }
    let wv = g.constant(w.data().clone().insert_axis(Axis(0)).into_dyn());
    let l = sampling_correctness_vars(&mut g, wv, tr, tt);
    Ok(g.scalar(l))
}

// ---- least-squares affine + regularization loss -------------------------------------

/// Ridge-stabilized least-squares solution of `R = A S`:
/// `A = R S^T (S S^T + ridge I)^{-1}`. Errors when `S S^T` stays
/// ill-conditioned after the ridge (coincident sampling points).
pub fn least_squares_affine(r: &Array2<f64>, s: &Array2<f64>) -> Result<Array2<f64>> {
    if r.dim() != s.dim() || r.dim().0 != 3 {
        return Err(Error::dimension(format!(
            "expected matching (3, n^2) matrices, got {:?} and {:?}",
            r.dim(),
            s.dim()
        )));
    }
    if r.dim().1 < 3 {
        return Err(Error::validation("need at least 3 sampling points"));
    }
    let sst = s.dot(&s.t());
    let mut m = sst.clone();
    for d in 0..3 {
        m[(d, d)] += AFFINE_RIDGE;
    }
    // Relative degeneracy test: det vanishes against the matrix scale when
    // the sampling points are (near) coincident or collinear.
    let det = det3(&m);
    let scale = (m.diag().sum() / 3.0).max(1e-30);
    if det.abs() / scale.powi(3) < 1e-9 {
        return Err(Error::Degenerate(format!(
            "S S^T is rank-deficient (relative det {:.3e})",
            det.abs() / scale.powi(3)
        )));
    }
    let minv = inv3_mat(&m);
    Ok(r.dot(&s.t()).dot(&minv))
}

fn det3(m: &Array2<f64>) -> f64 {
    m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
        - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
        + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)])
}

fn inv3_mat(m: &Array2<f64>) -> Array2<f64> {
    let det = det3(m);
    let inv_det = 1.0 / det;
    let mut out = Array2::<f64>::zeros((3, 3));
    out[(0, 0)] = (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)]) * inv_det;
    out[(0, 1)] = (m[(0, 2)] * m[(2, 1)] - m[(0, 1)] * m[(2, 2)]) * inv_det;
    out[(0, 2)] = (m[(0, 1)] * m[(1, 2)] - m[(0, 2)] * m[(1, 1)]) * inv_det;
    out[(1, 0)] = (m[(1, 2)] * m[(2, 0)] - m[(1, 0)] * m[(2, 2)]) * inv_det;
    out[(1, 1)] = (m[(0, 0)] * m[(2, 2)] - m[(0, 2)] * m[(2, 0)]) * inv_det;
    out[(1, 2)] = (m[(0, 2)] * m[(1, 0)] - m[(0, 0)] * m[(1, 2)]) * inv_det;
    out[(2, 0)] = (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)]) * inv_det;
    out[(2, 1)] = (m[(0, 1)] * m[(2, 0)] - m[(0, 0)] * m[(2, 1)]) * inv_det;
    out[(2, 2)] = (m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]) * inv_det;
    out
}

/// Homogeneous reference coordinates of every `n x n` patch of an `s x s`
/// grid: `(L, 3, n^2)` with rows x, y, 1 and patches in row-major order.
fn patch_reference_coords(h: usize, w: usize, n: usize) -> ndarray::Array3<f64> {
    let (lh, lw) = (h - n + 1, w - n + 1);
    let mut r = ndarray::Array3::<f64>::zeros((lh * lw, 3, n * n));
    for pr in 0..lh {
        for pc in 0..lw {
            let l = pr * lw + pc;
            for dr in 0..n {
                for dc in 0..n {
                    let k = dr * n + dc;
                    r[(l, 0, k)] = (pc + dc) as f64;
                    r[(l, 1, k)] = (pr + dr) as f64;
                    r[(l, 2, k)] = 1.0;
                }
            }
        }
    }
    r
}

/// Graph: local-affine regularization of a flow field. Every `n x n` patch's
/// sampling points `S = R + w*` must be explainable by one affine map of the
/// reference coordinates `R`; the residual of the ridge-stabilized
/// least-squares fit is averaged over patches (and batch).
pub fn regularization_loss_vars(g: &mut Graph, w: Var, n: usize) -> Var {
    let shape = g.value(w).shape().to_vec();
    let (nb, two, h, wd) = (shape[0], shape[1], shape[2], shape[3]);
    assert_eq!(two, 2);
    assert!(n % 2 == 1 && h >= n && wd >= n, "invalid regularization patch");
    let l = (h - n + 1) * (wd - n + 1);

    // (N, L, 2, n^2) flow patches, padded with a zero third row -> w*.
    let patches = g.unfold(w, n);
    let zeros = g.constant(ArrayD::zeros(ndarray::IxDyn(&[nb, l, 1, n * n])));
    let wstar = g.concat(2, &[patches, zeros]);

    // Constant reference coordinates, broadcast across the batch.
    let rc = patch_reference_coords(h, wd, n);
    let mut rbatch = ndarray::Array4::<f64>::zeros((nb, l, 3, n * n));
    for i in 0..nb {
        rbatch.index_axis_mut(Axis(0), i).assign(&rc);
    }
    let rv = g.constant(rbatch.into_dyn());

    let s = g.add(rv, wstar);
    let sst = g.matmul_b(s, s, false, true);
    let mut ridge = ndarray::Array4::<f64>::zeros((nb, l, 3, 3));
    for i in 0..nb {
        for j in 0..l {
            for d in 0..3 {
                ridge[(i, j, d, d)] = AFFINE_RIDGE;
            }
        }
    }
    let ridge = g.constant(ridge.into_dyn());
    let m = g.add(sst, ridge);
    let minv = g.inv3(m);
    let rst = g.matmul_b(rv, s, false, true);
    let a = g.matmul_b(rst, minv, false, false);
    let as_ = g.matmul_b(a, s, false, false);
    let e = g.sub(rv, as_);
    let e2 = g.mul(e, e);
    let total = g.sum(e2);
    g.scale(total, 1.0 / (nb * l) as f64)
}

/// Typed: local-affine regularization of one flow field with patch size `n`
/// (odd, default 3).
pub fn regularization_loss(w: &FlowField, n: usize) -> Result<f64> {
    if n % 2 == 0 || n < 1 {
        return Err(Error::validation(format!("patch size must be odd, got {n}")));
    }
    let (h, wd) = w.resolution();
    if h < n || wd < n {
        return Err(Error::validation(format!(
            "flow {h}x{wd} smaller than patch {n}"
        )));
    }
    let mut g = Graph::new();
    let wv = g.constant(w.data().clone().insert_axis(Axis(0)).into_dyn());
    let l = regularization_loss_vars(&mut g, wv, n);
    Ok(g.scalar(l))
}

// ---- perceptual / face / style ---------------------------------------------------

/// Graph: sum of per-tap mean-L1 distances between two images' activations.
pub fn perceptual_loss_vars(g: &mut Graph, fx: &FeatureExtractor, x: Var, y: Var) -> Var {
    let tx = fx.forward(g, x);
    let ty = fx.forward(g, y);
    let mut acc: Option<Var> = None;
    for (a, b) in tx.into_iter().zip(ty) {
        let l = g.l1_mean(a, b);
        acc = Some(match acc {
            Some(s) => g.add(s, l),
            None => l,
        });
    }
    acc.unwrap()
}

/// Typed perceptual loss over all four taps.
pub fn perceptual_loss(x_t: &FeatureMap, x_hat: &FeatureMap, fx: &FeatureExtractor) -> Result<f64> {
    if x_t.data().dim() != x_hat.data().dim() {
        return Err(Error::dimension("perceptual loss image shape mismatch"));
    }
    let mut g = Graph::new();
    let a = g.constant(x_t.batched().into_dyn());
    let b = g.constant(x_hat.batched().into_dyn());
    let l = perceptual_loss_vars(&mut g, fx, a, b);
    Ok(g.scalar(l))
}

/// Face bounding box in full-resolution pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceRegion {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub valid: bool,
}

impl FaceRegion {
    pub fn invalid() -> Self {
        FaceRegion {
            top: 0,
            left: 0,
            height: 0,
            width: 0,
            valid: false,
        }
    }

    pub fn check_bounds(&self, img_h: usize, img_w: usize) -> Result<()> {
        if !self.valid {
            return Ok(());
        }
        if self.height < 1
            || self.width < 1
            || self.top + self.height > img_h
            || self.left + self.width > img_w
        {
            return Err(Error::validation(format!(
                "face region {:?} outside {img_h}x{img_w} image",
                (self.top, self.left, self.height, self.width)
            )));
        }
        Ok(())
    }

    /// Derive the face box from skeleton keypoints: the bounding box of the
    /// visible nose/eyes/ears keypoints, expanded by `margin` about its
    /// center and clamped to the image. Invalid when fewer than two face
    /// keypoints are visible or the clamped box degenerates.
    pub fn from_keypoints(k: &KeypointSet, margin: f64) -> FaceRegion {
        let (img_h, img_w) = k.resolution();
        let pts: Vec<(f64, f64)> = FACE_KEYPOINTS
            .iter()
            .map(|&i| k.points()[i])
            .filter(|p| p.confidence > 0.0)
            .map(|p| (p.x, p.y))
            .collect();
        if pts.len() < 2 {
            return FaceRegion::invalid();
        }
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for &(x, y) in &pts {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
        let hw = ((x1 - x0) / 2.0) * margin;
        let hh = ((y1 - y0) / 2.0) * margin;
        // Faces are roughly square; pad the short side.
        let half = hw.max(hh).max(2.0);
        let left = (cx - half).floor().max(0.0) as usize;
        let top = (cy - half).floor().max(0.0) as usize;
        let right = ((cx + half).ceil() as usize).min(img_w);
        let bottom = ((cy + half).ceil() as usize).min(img_h);
        if right <= left + 1 || bottom <= top + 1 {
            return FaceRegion::invalid();
        }
        FaceRegion {
            top,
            left,
            height: bottom - top,
            width: right - left,
            valid: true,
        }
    }
}

/// Graph: perceptual loss restricted to the cropped face region, which is
/// resized to [`FACE_CROP_SIZE`] before feature extraction. Returns `None`
/// when the region is invalid (the loss is skipped).
pub fn face_loss_vars(
    g: &mut Graph,
    fx: &FeatureExtractor,
    x: Var,
    y: Var,
    face: &FaceRegion,
) -> Option<Var> {
    if !face.valid {
        return None;
    }
    let cx = g.slice_hw(x, face.top, face.left, face.height, face.width);
    let cy = g.slice_hw(y, face.top, face.left, face.height, face.width);
    let cx = g.resize(cx, FACE_CROP_SIZE, FACE_CROP_SIZE);
    let cy = g.resize(cy, FACE_CROP_SIZE, FACE_CROP_SIZE);
    Some(perceptual_loss_vars(g, fx, cx, cy))
}

/// Typed face loss; `(value, skipped)`. An invalid region yields `(0, true)`.
pub fn face_loss(
    x_t: &FeatureMap,
    x_hat: &FeatureMap,
    face: &FaceRegion,
    fx: &FeatureExtractor,
) -> Result<(f64, bool)> {
    if x_t.data().dim() != x_hat.data().dim() {
        return Err(Error::dimension("face loss image shape mismatch"));
    }
    let (h, w) = x_t.resolution();
    face.check_bounds(h, w)?;
    if !face.valid {
        return Ok((0.0, true));
    }
    let mut g = Graph::new();
    let a = g.constant(x_t.batched().into_dyn());
    let b = g.constant(x_hat.batched().into_dyn());
    let l = face_loss_vars(&mut g, fx, a, b, face).expect("valid face region");
    Ok((g.scalar(l), false))
}

/// Channel Gram matrix `phi phi^T / (H W)` of one `(C, H, W)` activation.
pub fn gram(activation: &ndarray::Array3<f64>) -> Array2<f64> {
    let (c, h, w) = activation.dim();
    let flat = activation
        .view()
        .into_shape_with_order((c, h * w))
        .unwrap();
    let mut gm = Array2::<f64>::zeros((c, c));
    ndarray::linalg::general_mat_mul(1.0 / (h * w) as f64, &flat, &flat.t(), 0.0, &mut gm);
    gm
}

/// Graph: sum over taps of the mean-L1 distance between channel Gram matrices
/// `G(phi) = phi phi^T / (H W)`.
pub fn style_loss_vars(g: &mut Graph, fx: &FeatureExtractor, x: Var, y: Var) -> Var {
    let tx = fx.forward(g, x);
    let ty = fx.forward(g, y);
    let mut acc: Option<Var> = None;
    for (a, b) in tx.into_iter().zip(ty) {
        let shape = g.value(a).shape().to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let af = g.reshape(a, &[n, c, h * w]);
        let bf = g.reshape(b, &[n, c, h * w]);
        let ga = g.matmul_b(af, af, false, true);
        let ga = g.scale(ga, 1.0 / (h * w) as f64);
        let gb = g.matmul_b(bf, bf, false, true);
        let gb = g.scale(gb, 1.0 / (h * w) as f64);
        let l = g.l1_mean(ga, gb);
        acc = Some(match acc {
            Some(s) => g.add(s, l),
            None => l,
        });
    }
    acc.unwrap()
}

/// Typed style loss over all four taps.
pub fn style_loss(x_t: &FeatureMap, x_hat: &FeatureMap, fx: &FeatureExtractor) -> Result<f64> {
    if x_t.data().dim() != x_hat.data().dim() {
        return Err(Error::dimension("style loss image shape mismatch"));
    }
    let mut g = Graph::new();
    let a = g.constant(x_t.batched().into_dyn());
    let b = g.constant(x_hat.batched().into_dyn());
    let l = style_loss_vars(&mut g, fx, a, b);
    Ok(g.scalar(l))
}

// ---- adversarial losses --------------------------------------------------------

/// Graph: hinge discriminator loss `mean(relu(1 - D_real)) + mean(relu(1 + D_fake))`.
pub fn d_hinge_vars(g: &mut Graph, d_real: Var, d_fake: Var) -> Var {
    let nr = g.neg(d_real);
    let nr = g.add_scalar(nr, 1.0);
    let nr = g.relu(nr);
    let lr = g.mean(nr);
    let nf = g.add_scalar(d_fake, 1.0);
    let nf = g.relu(nf);
    let lf = g.mean(nf);
    g.add(lr, lf)
}

/// Graph: hinge generator loss `-mean(D_fake)`.
pub fn g_hinge_vars(g: &mut Graph, d_fake: Var) -> Var {
    let m = g.mean(d_fake);
    g.neg(m)
}

/// Typed: `(g_loss, d_loss)` from real/fake score maps.
pub fn adversarial_losses(d_real: &Array2<f64>, d_fake: &Array2<f64>) -> Result<(f64, f64)> {
    if !d_real.iter().all(|v| v.is_finite()) || !d_fake.iter().all(|v| v.is_finite()) {
        return Err(Error::validation("non-finite discriminator scores"));
    }
    let mut g = Graph::new();
    let r = g.constant(d_real.clone().into_dyn());
    let f = g.constant(d_fake.clone().into_dyn());
    let d = d_hinge_vars(&mut g, r, f);
    let gl = g_hinge_vars(&mut g, f);
    Ok((g.scalar(gl), g.scalar(d)))
}

#[cfg(test)]
mod tests;
