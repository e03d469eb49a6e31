//! Learnable deformation estimators: the key/query encoders feeding the
//! attention correlation, the U-shaped flow-field estimator, and the
//! combination-map generator, each producing outputs at every warp scale.

use crate::autodiff::{Border, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Act, Binding, Conv2d, InstanceNorm, ModelConfig, ParamSet, PyramidEncoder, ResBlock};
use crate::warp_ops::{CombinationMap, CorrelationMatrix, FeatureMap, FlowField};
use ndarray::{Array3, Axis, Ix3, Ix4};

/// Rasterized pose condition: 18 keypoint heatmaps plus one limb channel,
/// entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonMap {
    data: Array3<f64>,
}

impl SkeletonMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::validation(
                "skeleton map entries must be finite and in [0, 1]",
            ));
        }
        Ok(SkeletonMap { data })
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }
    pub fn resolution(&self) -> (usize, usize) {
        (self.data.dim().1, self.data.dim().2)
    }
    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }
}

/// Deformations estimated for one warp scale.
#[derive(Debug, Clone)]
pub struct ScaleDeformation {
    pub scale: usize,
    pub correlation: CorrelationMatrix,
    pub flow: FlowField,
    pub map: CombinationMap,
}

/// Per-scale deformation bundle, ascending scale order. Ablation variants
/// fill the missing branch with its neutral element (identity correlation or
/// zero flow) and a pinned combination map.
#[derive(Debug, Clone)]
pub struct DeformationSet {
    pub scales: Vec<ScaleDeformation>,
}

impl DeformationSet {
    pub fn at_scale(&self, scale: usize) -> Result<&ScaleDeformation> {
        self.scales
            .iter()
            .find(|s| s.scale == scale)
            .ok_or_else(|| Error::validation(format!("no deformation at scale {scale}")))
    }

    /// Re-check every member's type invariants.
    pub fn validate(&self) -> Result<()> {
        for s in &self.scales {
            CorrelationMatrix::new(s.correlation.data().clone(), s.correlation.resolution())?;
            FlowField::new(s.flow.data().clone())?;
            CombinationMap::new(s.map.data().clone())?;
        }
        Ok(())
    }
}

/// Which deformation branches exist (mirrors the ablation variants).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DeformMode {
    #[default]
    Full,
    /// No flow estimator; the combination map is pinned to 1.
    AttentionOnly,
    /// No attention estimator; the combination map is pinned to 0.
    FlowOnly,
}

/// Graph handles for one scale's deformations. The warped resized references
/// are exposed so the attention loss can reuse them.
pub struct ScaleDeformVars {
    pub scale: usize,
    /// `(N, S, S)` correlation, absent in flow-only mode.
    pub correlation: Option<Var>,
    /// `(N, 2, s, s)` flow, absent in attention-only mode.
    pub flow: Option<Var>,
    /// `(N, 1, s, s)` combination map (a pinned constant in ablation modes).
    pub map: Var,
    /// Reference image resized to this scale, `(N, 3, s, s)`.
    pub x_r_down: Var,
    /// `W_a(x_r_down, C)` when the attention branch exists.
    pub warped_attn_ref: Option<Var>,
    /// `W_f(x_r_down, w)` when the flow branch exists.
    pub warped_flow_ref: Option<Var>,
}

/// U-shaped flow estimator: strided encoder, decoder with skip connections,
/// and a zero-initialized 2-channel head at every warp scale.
#[derive(Debug, Clone)]
struct FlowEstimator {
    d0: Conv2d,
    d1: (Conv2d, InstanceNorm),
    d2: (Conv2d, InstanceNorm),
    u1: (Conv2d, InstanceNorm),
    u2: (Conv2d, InstanceNorm),
    heads: Vec<(usize, Conv2d)>,
    full_res: usize,
}

impl FlowEstimator {
    fn new(name: &str, in_ch: usize, width: usize, full_res: usize, scales: &[usize]) -> Self {
        let w = width;
        let d0 = Conv2d::new(format!("{name}.d0"), in_ch, w, 3, 2);
        let d1 = (
            Conv2d::new(format!("{name}.d1"), w, 2 * w, 3, 2),
            InstanceNorm::new(format!("{name}.d1n"), 2 * w),
        );
        let d2 = (
            Conv2d::new(format!("{name}.d2"), 2 * w, 3 * w, 3, 2),
            InstanceNorm::new(format!("{name}.d2n"), 3 * w),
        );
        let u1 = (
            Conv2d::new(format!("{name}.u1"), 3 * w + 2 * w, 2 * w, 3, 1),
            InstanceNorm::new(format!("{name}.u1n"), 2 * w),
        );
        let u2 = (
            Conv2d::new(format!("{name}.u2"), 2 * w + w, w, 3, 1),
            InstanceNorm::new(format!("{name}.u2n"), w),
        );
        let heads = scales
            .iter()
            .map(|&s| {
                let ch = match full_res / s {
                    2 => w,
                    4 => 2 * w,
                    8 => 3 * w,
                    _ => panic!("flow head scale {s} unreachable from {full_res}"),
                };
                (s, Conv2d::new(format!("{name}.head{s}"), ch, 2, 3, 1))
            })
            .collect();
        FlowEstimator {
            d0,
            d1,
            d2,
            u1,
            u2,
            heads,
            full_res,
        }
    }

    fn init(&self, ps: &mut ParamSet, seed: u64) -> Result<()> {
        self.d0.init(ps, seed, 1.0)?;
        self.d1.0.init(ps, seed, 1.0)?;
        self.d1.1.init(ps)?;
        self.d2.0.init(ps, seed, 1.0)?;
        self.d2.1.init(ps)?;
        self.u1.0.init(ps, seed, 1.0)?;
        self.u1.1.init(ps)?;
        self.u2.0.init(ps, seed, 1.0)?;
        self.u2.1.init(ps)?;
        for (_, h) in &self.heads {
            // Zero init: the estimated flow starts at exactly zero, which
            // keeps the warp stable early in training.
            h.init(ps, seed, 0.0)?;
        }
        Ok(())
    }

    fn forward(&self, g: &mut Graph, b: &Binding, input: Var) -> Vec<(usize, Var)> {
        let h2 = self.full_res / 2;
        let h4 = self.full_res / 4;
        let e0 = {
            let y = self.d0.forward(g, b, input);
            g.leaky_relu(y, 0.2)
        };
        let e1 = {
            let y = self.d1.0.forward(g, b, e0);
            let y = self.d1.1.forward(g, b, y);
            g.leaky_relu(y, 0.2)
        };
        let e2 = {
            let y = self.d2.0.forward(g, b, e1);
            let y = self.d2.1.forward(g, b, y);
            g.leaky_relu(y, 0.2)
        };
        let u1 = {
            let up = g.resize(e2, h4, h4);
            let cat = g.concat(1, &[up, e1]);
            let y = self.u1.0.forward(g, b, cat);
            let y = self.u1.1.forward(g, b, y);
            g.leaky_relu(y, 0.2)
        };
        let u2 = {
            let up = g.resize(u1, h2, h2);
            let cat = g.concat(1, &[up, e0]);
            let y = self.u2.0.forward(g, b, cat);
            let y = self.u2.1.forward(g, b, y);
            g.leaky_relu(y, 0.2)
        };
        self.heads
            .iter()
            .map(|(s, head)| {
                let feat = match self.full_res / s {
                    2 => u2,
                    4 => u1,
                    8 => e2,
                    _ => unreachable!(),
                };
                (*s, head.forward(g, b, feat))
            })
            .collect()
    }
}

/// Combination-map generator: residual blocks over the two concatenated
/// warped references, sigmoid output.
#[derive(Debug, Clone)]
struct MapGenerator {
    stem: Conv2d,
    blocks: Vec<ResBlock>,
    head: Conv2d,
}

impl MapGenerator {
    fn new(name: &str, width: usize) -> Self {
        MapGenerator {
            stem: Conv2d::new(format!("{name}.stem"), 6, width, 3, 1),
            blocks: (0..3)
                .map(|i| ResBlock::new(&format!("{name}.r{i}"), width, Act::Relu))
                .collect(),
            head: Conv2d::new(format!("{name}.head"), width, 1, 3, 1),
        }
    }

    fn init(&self, ps: &mut ParamSet, seed: u64) -> Result<()> {
        self.stem.init(ps, seed, 1.0)?;
        for b in &self.blocks {
            b.init(ps, seed)?;
        }
        self.head.init(ps, seed, 1.0)
    }

    fn forward(&self, g: &mut Graph, b: &Binding, warped_attn: Var, warped_flow: Var) -> Var {
        let cat = g.concat(1, &[warped_attn, warped_flow]);
        let mut h = self.stem.forward(g, b, cat);
        h = g.relu(h);
        for blk in &self.blocks {
            h = blk.forward(g, b, h);
        }
        let h = self.head.forward(g, b, h);
        g.sigmoid(h)
    }
}

/// The deformation estimation module. Parameter namespaces: `ex.` (reference
/// encoder), `es.` (skeleton encoder), `fw.` (flow estimator), `m<scale>.`
/// (per-scale combination map generators).
pub struct DeformationEstimator {
    cfg: ModelConfig,
    mode: DeformMode,
    enc_x: Option<PyramidEncoder>,
    enc_s: Option<PyramidEncoder>,
    flow: Option<FlowEstimator>,
    mgens: Vec<(usize, MapGenerator)>,
}

impl DeformationEstimator {
    pub fn new(cfg: ModelConfig, mode: DeformMode) -> Result<Self> {
        cfg.validate()?;
        let key_taps: Vec<(usize, usize)> = cfg
            .scales
            .iter()
            .zip(cfg.key_channels.iter())
            .map(|(&s, &k)| (s, k))
            .collect();
        let has_attn = mode != DeformMode::FlowOnly;
        let has_flow = mode != DeformMode::AttentionOnly;
        let enc_x =
            has_attn.then(|| PyramidEncoder::new("ex", 3, cfg.enc_width, cfg.resolution, &key_taps));
        let enc_s = has_attn.then(|| {
            PyramidEncoder::new(
                "es",
                cfg.skeleton_channels,
                cfg.enc_width,
                cfg.resolution,
                &key_taps,
            )
        });
        let flow = has_flow.then(|| {
            FlowEstimator::new(
                "fw",
                2 * cfg.skeleton_channels + 3,
                cfg.flow_width,
                cfg.resolution,
                &cfg.scales,
            )
        });
        let mgens = if mode == DeformMode::Full {
            cfg.scales
                .iter()
                .map(|&s| (s, MapGenerator::new(&format!("m{s}"), cfg.m_width)))
                .collect()
        } else {
            Vec::new()
        };
        Ok(DeformationEstimator {
            cfg,
            mode,
            enc_x,
            enc_s,
            flow,
            mgens,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }
    pub fn mode(&self) -> DeformMode {
        self.mode
    }

    pub fn init_params(&self, ps: &mut ParamSet, seed: u64) -> Result<()> {
        if let Some(e) = &self.enc_x {
            // Small tap gain keeps initial dot products well inside the sharp
            // softmax's usable range.
            e.init(ps, seed, 0.2)?;
        }
        if let Some(e) = &self.enc_s {
            e.init(ps, seed, 0.2)?;
        }
        if let Some(f) = &self.flow {
            f.init(ps, seed)?;
        }
        for (_, m) in &self.mgens {
            m.init(ps, seed)?;
        }
        Ok(())
    }

    /// Parameter name prefixes owned by this module.
    pub fn param_prefixes(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.enc_x.is_some() {
            p.push("ex.".to_string());
            p.push("es.".to_string());
        }
        if self.flow.is_some() {
            p.push("fw.".to_string());
        }
        for (s, _) in &self.mgens {
            p.push(format!("m{s}."));
        }
        p
    }

    /// Batched graph forward. Inputs: `x_r (N, 3, H, W)` in `[-1, 1]`,
    /// `s_r`/`s_t` `(N, J+1, H, W)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Binding,
        x_r: Var,
        s_r: Var,
        s_t: Var,
    ) -> Vec<ScaleDeformVars> {
        let n = g.value(x_r).shape()[0];
        let keys = self.enc_x.as_ref().map(|e| e.forward(g, b, x_r));
        let queries = self.enc_s.as_ref().map(|e| e.forward(g, b, s_t));
        let flows: Option<Vec<(usize, Var)>> = self.flow.as_ref().map(|f| {
            let input = g.concat(1, &[s_t, s_r, x_r]);
            f.forward(g, b, input)
        });

        let mut out = Vec::new();
        for (i, &scale) in self.cfg.scales.iter().enumerate() {
            let hw = scale * scale;
            let x_r_down = g.resize(x_r, scale, scale);

            let correlation = match (&keys, &queries) {
                (Some(k), Some(q)) => {
                    let kc = self.cfg.key_channels[i];
                    let kf = g.reshape(k[i], &[n, kc, hw]);
                    let qf = g.reshape(q[i], &[n, kc, hw]);
                    let beta = g.matmul_b(kf, qf, true, false);
                    Some(g.softmax_cols(beta, self.cfg.alpha))
                }
                _ => None,
            };
            let flow = flows
                .as_ref()
                .map(|f| f.iter().find(|(s, _)| *s == scale).expect("flow scale").1);

            let warped_attn_ref = correlation.map(|c| {
                let xf = g.reshape(x_r_down, &[n, 3, hw]);
                let o = g.matmul_b(xf, c, false, false);
                g.reshape(o, &[n, 3, scale, scale])
            });
            let warped_flow_ref = flow.map(|w| g.flow_warp(x_r_down, w, Border::Clamp));

            let map = match self.mode {
                DeformMode::Full => {
                    let mg = &self
                        .mgens
                        .iter()
                        .find(|(s, _)| *s == scale)
                        .expect("map generator scale")
                        .1;
                    mg.forward(g, b, warped_attn_ref.unwrap(), warped_flow_ref.unwrap())
                }
                DeformMode::AttentionOnly => g.constant(ndarray::ArrayD::from_elem(
                    ndarray::IxDyn(&[n, 1, scale, scale]),
                    1.0,
                )),
                DeformMode::FlowOnly => {
                    g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[n, 1, scale, scale])))
                }
            };

            out.push(ScaleDeformVars {
                scale,
                correlation,
                flow,
                map,
                x_r_down,
                warped_attn_ref,
                warped_flow_ref,
            });
        }
        out
    }

    /// Single-sample typed inference producing a validated [`DeformationSet`].
    pub fn estimate_deformations(
        &self,
        params: &ParamSet,
        x_r: &FeatureMap,
        s_r: &SkeletonMap,
        s_t: &SkeletonMap,
    ) -> Result<DeformationSet> {
        self.check_image(x_r)?;
        self.check_skeleton(s_r)?;
        self.check_skeleton(s_t)?;
        let mut g = Graph::new();
        let b = Binding::bind(&mut g, params, &[], false);
        let xv = g.constant(x_r.batched().into_dyn());
        let srv = g.constant(s_r.data().clone().insert_axis(Axis(0)).into_dyn());
        let stv = g.constant(s_t.data().clone().insert_axis(Axis(0)).into_dyn());
        let vars = self.forward(&mut g, &b, xv, srv, stv);

        let mut scales = Vec::new();
        for v in vars {
            let s = v.scale;
            let correlation = match v.correlation {
                Some(c) => CorrelationMatrix::new(
                    g.value(c)
                        .clone()
                        .into_dimensionality::<Ix3>()
                        .unwrap()
                        .index_axis_move(Axis(0), 0),
                    (s, s),
                )?,
                None => CorrelationMatrix::identity((s, s)),
            };
            let flow = match v.flow {
                Some(w) => FlowField::new(
                    g.value(w)
                        .clone()
                        .into_dimensionality::<Ix4>()
                        .unwrap()
                        .index_axis_move(Axis(0), 0),
                )?,
                None => FlowField::zeros(s, s),
            };
            let map = CombinationMap::new(
                g.value(v.map)
                    .clone()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .index_axis_move(Axis(0), 0)
                    .index_axis_move(Axis(0), 0),
            )?;
            scales.push(ScaleDeformation {
                scale: s,
                correlation,
                flow,
                map,
            });
        }
        Ok(DeformationSet { scales })
    }

    /// Keys per scale for a reference image (typed path).
    pub fn encode_reference(&self, params: &ParamSet, x_r: &FeatureMap) -> Result<Vec<FeatureMap>> {
        self.check_image(x_r)?;
        let enc = self
            .enc_x
            .as_ref()
            .ok_or_else(|| Error::validation("flow-only model has no reference encoder"))?;
        let mut g = Graph::new();
        let b = Binding::bind(&mut g, params, &[], false);
        let xv = g.constant(x_r.batched().into_dyn());
        let taps = enc.forward(&mut g, &b, xv);
        taps.into_iter()
            .map(|t| {
                FeatureMap::new(
                    g.value(t)
                        .clone()
                        .into_dimensionality::<Ix4>()
                        .unwrap()
                        .index_axis_move(Axis(0), 0),
                )
            })
            .collect()
    }

    /// Queries per scale for a target skeleton (typed path).
    pub fn encode_skeleton(&self, params: &ParamSet, s_t: &SkeletonMap) -> Result<Vec<FeatureMap>> {
        self.check_skeleton(s_t)?;
        let enc = self
            .enc_s
            .as_ref()
            .ok_or_else(|| Error::validation("flow-only model has no skeleton encoder"))?;
        let mut g = Graph::new();
        let b = Binding::bind(&mut g, params, &[], false);
        let sv = g.constant(s_t.data().clone().insert_axis(Axis(0)).into_dyn());
        let taps = enc.forward(&mut g, &b, sv);
        taps.into_iter()
            .map(|t| {
                FeatureMap::new(
                    g.value(t)
                        .clone()
                        .into_dimensionality::<Ix4>()
                        .unwrap()
                        .index_axis_move(Axis(0), 0),
                )
            })
            .collect()
    }

    /// Flow fields per scale (typed path).
    pub fn estimate_flow(
        &self,
        params: &ParamSet,
        s_t: &SkeletonMap,
        s_r: &SkeletonMap,
        x_r: &FeatureMap,
    ) -> Result<Vec<FlowField>> {
        self.check_image(x_r)?;
        self.check_skeleton(s_r)?;
        self.check_skeleton(s_t)?;
        let flow = self
            .flow
            .as_ref()
            .ok_or_else(|| Error::validation("attention-only model has no flow estimator"))?;
        let mut g = Graph::new();
        let b = Binding::bind(&mut g, params, &[], false);
        let xv = g.constant(x_r.batched().into_dyn());
        let srv = g.constant(s_r.data().clone().insert_axis(Axis(0)).into_dyn());
        let stv = g.constant(s_t.data().clone().insert_axis(Axis(0)).into_dyn());
        let input = g.concat(1, &[stv, srv, xv]);
        let flows = flow.forward(&mut g, &b, input);
        flows
            .into_iter()
            .map(|(_, w)| {
                FlowField::new(
                    g.value(w)
                        .clone()
                        .into_dimensionality::<Ix4>()
                        .unwrap()
                        .index_axis_move(Axis(0), 0),
                )
            })
            .collect()
    }

    /// Combination map from the two warped, downsized reference images
    /// (typed path; full mode only).
    pub fn generate_combination_map(
        &self,
        params: &ParamSet,
        warped_attn_img: &FeatureMap,
        warped_flow_img: &FeatureMap,
    ) -> Result<CombinationMap> {
        if warped_attn_img.data().dim() != warped_flow_img.data().dim() {
            return Err(Error::dimension(format!(
                "warped branches differ: {:?} vs {:?}",
                warped_attn_img.data().dim(),
                warped_flow_img.data().dim()
            )));
        }
        let scale = warped_attn_img.height();
        let mg = &self
            .mgens
            .iter()
            .find(|(s, _)| *s == scale)
            .ok_or_else(|| {
                Error::validation(format!("no combination map generator at scale {scale}"))
            })?
            .1;
        let mut g = Graph::new();
        let b = Binding::bind(&mut g, params, &[], false);
        let av = g.constant(warped_attn_img.batched().into_dyn());
        let fv = g.constant(warped_flow_img.batched().into_dyn());
        let m = mg.forward(&mut g, &b, av, fv);
        CombinationMap::new(
            g.value(m)
                .clone()
                .into_dimensionality::<Ix4>()
                .unwrap()
                .index_axis_move(Axis(0), 0)
                .index_axis_move(Axis(0), 0),
        )
    }

    fn check_image(&self, x: &FeatureMap) -> Result<()> {
        if x.channels() != 3 {
            return Err(Error::validation(format!(
                "expected a 3-channel image, got {} channels",
                x.channels()
            )));
        }
        if x.resolution() != (self.cfg.resolution, self.cfg.resolution) {
            return Err(Error::dimension(format!(
                "image resolution {:?} does not match the configured {}",
                x.resolution(),
                self.cfg.resolution
            )));
        }
        Ok(())
    }

    fn check_skeleton(&self, s: &SkeletonMap) -> Result<()> {
        if s.channels() != self.cfg.skeleton_channels {
            return Err(Error::validation(format!(
                "expected {} skeleton channels, got {}",
                self.cfg.skeleton_channels,
                s.channels()
            )));
        }
        if s.resolution() != (self.cfg.resolution, self.cfg.resolution) {
            return Err(Error::dimension(format!(
                "skeleton resolution {:?} does not match the configured {}",
                s.resolution(),
                self.cfg.resolution
            )));
        }
        Ok(())
    }
}
