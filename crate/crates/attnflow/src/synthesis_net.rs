//! The image synthesis generator (reference feature extractor, skeleton
//! encoder, warping block, upsampling decoder) and the patch discriminator.
//!
//! The decoder starts from skeleton-derived features at the coarsest warp
//! scale and injects warped reference textures at every warp scale via
//! `f_o = f_t + f_a`, where `f_a` is the warp block's output
//! `m (x) W_a(f_r, C) + (1 - m) (x) W_f(f_r, w)`. The reference image
//! influences the output only through `f_a`, so forcing `f_a = 0` degrades
//! the generator to a skeleton-only decoder.

use crate::autodiff::{Border, Graph, Var};
use crate::deform_net::{DeformationSet, ScaleDeformVars, SkeletonMap};
use crate::error::{Error, Result};
use crate::nn::{Act, Binding, Conv2d, InstanceNorm, ModelConfig, ParamSet, PyramidEncoder, ResBlock, UpBlock};
use crate::warp_ops::FeatureMap;
use ndarray::{Axis, Ix4};

/// Warp-block override used by ablations and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum WarpOverride {
    /// Use the estimated combination map.
    #[default]
    None,
    /// Pin the combination map to a constant in `[0, 1]`
    /// (1 selects the attention branch, 0 the flow branch).
    ForceM(f64),
    /// Zero the aligned features entirely (skeleton-only decoding).
    ZeroFa,
}

/// Graph handles for one warp scale inside the generator.
pub struct GenScaleVars {
    pub scale: usize,
    pub f_r: Var,
    pub attn_warped: Option<Var>,
    pub flow_warped: Option<Var>,
    pub f_a: Var,
    pub f_o: Var,
}

/// Graph handles for a full generator forward pass.
pub struct GenVars {
    pub image: Var,
    pub scales: Vec<GenScaleVars>,
}

/// Exposed intermediates of one warp block (typed path).
#[derive(Debug, Clone)]
pub struct WarpBlockTrace {
    pub scale: usize,
    pub f_r: FeatureMap,
    pub attn_warped: Option<FeatureMap>,
    pub flow_warped: Option<FeatureMap>,
    pub f_a: FeatureMap,
    pub f_o: FeatureMap,
}

/// Generator output: the synthesized image in `[-1, 1]` plus per-scale
/// intermediates for verification.
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    pub image: FeatureMap,
    pub traces: Vec<WarpBlockTrace>,
}

/// The image synthesis module. Parameter namespace: `g.`.
pub struct Generator {
    cfg: ModelConfig,
    ref_enc: PyramidEncoder,
    skel_enc: PyramidEncoder,
    scale_blocks: Vec<ScaleBlock>,
    final_ups: Vec<UpBlock>,
    out_conv: Conv2d,
}

struct ScaleBlock {
    res_a: ResBlock,
    res_b: ResBlock,
    /// Upsampling into the next scale (absent on the last scale).
    up: Option<UpBlock>,
}

impl Generator {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let feat_taps: Vec<(usize, usize)> = cfg
            .scales
            .iter()
            .zip(cfg.feat_channels.iter())
            .map(|(&s, &c)| (s, c))
            .collect();
        let ref_enc = PyramidEncoder::new("g.ref", 3, cfg.enc_width, cfg.resolution, &feat_taps);
        let skel_enc = PyramidEncoder::new(
            "g.skel",
            cfg.skeleton_channels,
            cfg.enc_width,
            cfg.resolution,
            &[(cfg.scales[0], cfg.feat_channels[0])],
        );

        let mut scale_blocks = Vec::new();
        for (i, &s) in cfg.scales.iter().enumerate() {
            let ch = cfg.feat_channels[i];
            let up = if i + 1 < cfg.scales.len() {
                if cfg.scales[i + 1] != 2 * s {
                    return Err(Error::config("consecutive scales must double"));
                }
                Some(UpBlock::new(
                    &format!("g.dec.up{s}"),
                    ch,
                    cfg.feat_channels[i + 1],
                    Act::Relu,
                ))
            } else {
                None
            };
            scale_blocks.push(ScaleBlock {
                res_a: ResBlock::new(&format!("g.dec.s{s}a"), ch, Act::Relu),
                res_b: ResBlock::new(&format!("g.dec.s{s}b"), ch, Act::Relu),
                up,
            });
        }

        // Upsample chain from the finest warp scale to the full resolution.
        let mut final_ups = Vec::new();
        let mut res = *cfg.scales.last().unwrap();
        let mut ch = *cfg.feat_channels.last().unwrap();
        while res < cfg.resolution {
            let next_ch = (ch / 2).max(16);
            final_ups.push(UpBlock::new(
                &format!("g.dec.fup{res}"),
                ch,
                next_ch,
                Act::Relu,
            ));
            ch = next_ch;
            res *= 2;
        }
        let out_conv = Conv2d::new("g.dec.out", ch, 3, 3, 1);
        Ok(Generator {
            cfg,
            ref_enc,
            skel_enc,
            scale_blocks,
            final_ups,
            out_conv,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn init_params(&self, ps: &mut ParamSet, seed: u64) -> Result<()> {
        self.ref_enc.init(ps, seed, 1.0)?;
        self.skel_enc.init(ps, seed, 1.0)?;
        for sb in &self.scale_blocks {
            sb.res_a.init(ps, seed)?;
            sb.res_b.init(ps, seed)?;
            if let Some(up) = &sb.up {
                up.init(ps, seed)?;
            }
        }
        for up in &self.final_ups {
            up.init(ps, seed)?;
        }
        self.out_conv.init(ps, seed, 1.0)
    }

    /// Reference features `f_r` per warp scale (graph path).
    pub fn reference_features(&self, g: &mut Graph, b: &Binding, x_r: Var) -> Vec<Var> {
        self.ref_enc.forward(g, b, x_r)
    }

    /// The warp block: reassemble `f_r` with both deformations and blend.
    pub fn warp_block(
        &self,
        g: &mut Graph,
        f_r: Var,
        d: &ScaleDeformVars,
        over: WarpOverride,
    ) -> (Option<Var>, Option<Var>, Var) {
        let shape = g.value(f_r).shape().to_vec();
        let (n, ch, s) = (shape[0], shape[1], shape[2]);
        if let WarpOverride::ZeroFa = over {
            let zero = g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[n, ch, s, s])));
            return (None, None, zero);
        }
        let attn = d.correlation.map(|c| {
            let xf = g.reshape(f_r, &[n, ch, s * s]);
            let o = g.matmul_b(xf, c, false, false);
            g.reshape(o, &[n, ch, s, s])
        });
        let flow = d.flow.map(|w| g.flow_warp(f_r, w, Border::Clamp));
        let f_a = match (attn, flow) {
            (Some(a), Some(f)) => {
                let m = match over {
                    WarpOverride::ForceM(v) => g.constant(ndarray::ArrayD::from_elem(
                        ndarray::IxDyn(&[n, 1, s, s]),
                        v,
                    )),
                    _ => d.map,
                };
                g.blend(a, f, m)
            }
            (Some(a), None) => a,
            (None, Some(f)) => f,
            (None, None) => unreachable!("deformation set with no branches"),
        };
        (attn, flow, f_a)
    }

    /// Full generator forward (graph path).
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Binding,
        x_r: Var,
        s_t: Var,
        deform: &[ScaleDeformVars],
        over: WarpOverride,
    ) -> GenVars {
        let f_rs = self.reference_features(g, b, x_r);
        let f_t = self.skel_enc.forward(g, b, s_t)[0];

        let mut scales = Vec::new();
        let mut h = f_t;
        for (i, sb) in self.scale_blocks.iter().enumerate() {
            let scale = self.cfg.scales[i];
            let d = deform
                .iter()
                .find(|d| d.scale == scale)
                .expect("deformation scale missing");
            let (attn_warped, flow_warped, f_a) = self.warp_block(g, f_rs[i], d, over);
            let f_o = g.add(h, f_a);
            let mut y = sb.res_a.forward(g, b, f_o);
            y = sb.res_b.forward(g, b, y);
            scales.push(GenScaleVars {
                scale,
                f_r: f_rs[i],
                attn_warped,
                flow_warped,
                f_a,
                f_o,
            });
            h = match &sb.up {
                Some(up) => up.forward(g, b, y),
                None => y,
            };
        }
        for up in &self.final_ups {
            h = up.forward(g, b, h);
        }
        let out = self.out_conv.forward(g, b, h);
        let image = g.tanh(out);
        GenVars { image, scales }
    }

    /// Reference features per scale (typed path).
    pub fn extract_reference_features(
        &self,
        params: &ParamSet,
        x_r: &FeatureMap,
    ) -> Result<Vec<FeatureMap>> {
        self.check_image(x_r)?;
        let mut g = Graph::new();
        let b = Binding::bind(&mut g, params, &[], false);
        let xv = g.constant(x_r.batched().into_dyn());
        let taps = self.reference_features(&mut g, &b, xv);
        taps.into_iter()
            .map(|t| FeatureMap::new(unbatch(&g, t)))
            .collect()
    }

    /// Synthesize a target image from a reference image, target skeleton, and
    /// a deformation set (typed path).
    pub fn synthesize(
        &self,
        params: &ParamSet,
        x_r: &FeatureMap,
        s_t: &SkeletonMap,
        d: &DeformationSet,
        over: WarpOverride,
    ) -> Result<GeneratorOutput> {
        self.check_image(x_r)?;
        if s_t.channels() != self.cfg.skeleton_channels {
            return Err(Error::validation(format!(
                "expected {} skeleton channels, got {}",
                self.cfg.skeleton_channels,
                s_t.channels()
            )));
        }
        for &s in &self.cfg.scales {
            d.at_scale(s)?;
        }
        let mut g = Graph::new();
        let b = Binding::bind(&mut g, params, &[], false);
        let xv = g.constant(x_r.batched().into_dyn());
        let stv = g.constant(s_t.data().clone().insert_axis(Axis(0)).into_dyn());
        let dvars = deformation_constants(&mut g, d, &self.cfg)?;
        let out = self.forward(&mut g, &b, xv, stv, &dvars, over);

        let image = FeatureMap::new(unbatch(&g, out.image))?;
        if image.data().iter().any(|v| v.abs() > 1.0) {
            return Err(Error::validation("generator image left [-1, 1]"));
        }
        let traces = out
            .scales
            .into_iter()
            .map(|sv| {
                Ok(WarpBlockTrace {
                    scale: sv.scale,
                    f_r: FeatureMap::new(unbatch(&g, sv.f_r))?,
                    attn_warped: sv
                        .attn_warped
                        .map(|v| FeatureMap::new(unbatch(&g, v)))
                        .transpose()?,
                    flow_warped: sv
                        .flow_warped
                        .map(|v| FeatureMap::new(unbatch(&g, v)))
                        .transpose()?,
                    f_a: FeatureMap::new(unbatch(&g, sv.f_a))?,
                    f_o: FeatureMap::new(unbatch(&g, sv.f_o))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GeneratorOutput { image, traces })
    }

    fn check_image(&self, x: &FeatureMap) -> Result<()> {
        if x.channels() != 3 {
            return Err(Error::validation(format!(
                "expected a 3-channel image, got {}",
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
}

fn unbatch(g: &Graph, v: Var) -> ndarray::Array3<f64> {
    g.value(v)
        .clone()
        .into_dimensionality::<Ix4>()
        .unwrap()
        .index_axis_move(Axis(0), 0)
}

/// Insert a typed deformation set into a graph as constant leaves.
pub fn deformation_constants(
    g: &mut Graph,
    d: &DeformationSet,
    cfg: &ModelConfig,
) -> Result<Vec<ScaleDeformVars>> {
    cfg.scales
        .iter()
        .map(|&scale| {
            let sd = d.at_scale(scale)?;
            let c = g.constant(sd.correlation.data().clone().insert_axis(Axis(0)).into_dyn());
            let w = g.constant(sd.flow.data().clone().insert_axis(Axis(0)).into_dyn());
            let m = g.constant(
                sd.map
                    .data()
                    .clone()
                    .insert_axis(Axis(0))
                    .insert_axis(Axis(0))
                    .into_dyn(),
            );
            let x_r_down = g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[
                1, 3, scale, scale,
            ])));
            Ok(ScaleDeformVars {
                scale,
                correlation: Some(c),
                flow: Some(w),
                map: m,
                x_r_down,
                warped_attn_ref: None,
                warped_flow_ref: None,
            })
        })
        .collect()
}

/// Patch discriminator: three stride-2 convolutions and a 1-channel head.
/// Parameter namespace: `d.`.
pub struct Discriminator {
    cfg: ModelConfig,
    c0: Conv2d,
    c1: (Conv2d, InstanceNorm),
    c2: (Conv2d, InstanceNorm),
    head: Conv2d,
}

impl Discriminator {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.disc_width;
        Ok(Discriminator {
            c0: Conv2d::new("d.c0", 3, w, 4, 2),
            c1: (
                Conv2d::new("d.c1", w, 2 * w, 4, 2),
                InstanceNorm::new("d.c1n", 2 * w),
            ),
            c2: (
                Conv2d::new("d.c2", 2 * w, 4 * w, 4, 2),
                InstanceNorm::new("d.c2n", 4 * w),
            ),
            head: Conv2d::new("d.head", 4 * w, 1, 3, 1),
            cfg,
        })
    }

    /// Spatial size of the score map for this configuration.
    pub fn score_resolution(&self) -> usize {
        self.cfg.resolution / 8
    }

    pub fn init_params(&self, ps: &mut ParamSet, seed: u64) -> Result<()> {
        self.c0.init(ps, seed, 1.0)?;
        self.c1.0.init(ps, seed, 1.0)?;
        self.c1.1.init(ps)?;
        self.c2.0.init(ps, seed, 1.0)?;
        self.c2.1.init(ps)?;
        self.head.init(ps, seed, 1.0)
    }

    /// Graph forward: `(N, 3, H, W)` image to `(N, 1, H/8, W/8)` scores.
    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Var {
        let mut h = self.c0.forward(g, b, x);
        h = g.leaky_relu(h, 0.2);
        h = self.c1.0.forward(g, b, h);
        h = self.c1.1.forward(g, b, h);
        h = g.leaky_relu(h, 0.2);
        h = self.c2.0.forward(g, b, h);
        h = self.c2.1.forward(g, b, h);
        h = g.leaky_relu(h, 0.2);
        self.head.forward(g, b, h)
    }

    /// Typed path: patch-level score map for one image.
    pub fn discriminate(&self, params: &ParamSet, x: &FeatureMap) -> Result<ndarray::Array2<f64>> {
        if x.channels() != 3 {
            return Err(Error::validation(format!(
                "expected a 3-channel image, got {}",
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
        let mut g = Graph::new();
        let b = Binding::bind(&mut g, params, &[], false);
        let xv = g.constant(x.batched().into_dyn());
        let s = self.forward(&mut g, &b, xv);
        let arr = unbatch(&g, s).index_axis_move(Axis(0), 0);
        if !arr.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("non-finite discriminator scores"));
        }
        Ok(arr)
    }
}
