//! Spatial kernels: bilinear resize, flow warping, blending, patch
//! extraction, gathering, and instance normalization.

use super::Border;
use ndarray::{Array4, ArrayD, Axis, Ix3, Ix4};
use ndarray::parallel::prelude::*;
use rayon::prelude::*;

// ---- bilinear resize -------------------------------------------------------

/// Tap indices and weight for one output coordinate along one axis,
/// half-pixel convention with clamp-to-edge.
fn resize_taps(dst: usize, src: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let p = (o as f64 + 0.5) * ratio - 0.5;
            let p = p.clamp(0.0, (src - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            let f = p - i0 as f64;
            (i0, i1, f)
        })
        .collect()
}

pub(super) fn resize_forward(x: &ArrayD<f64>, ho: usize, wo: usize) -> ArrayD<f64> {
    let x4 = x.view().into_dimensionality::<Ix4>().expect("resize input must be (N, C, H, W)");
    let (n, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
    let rows = resize_taps(ho, h);
    let cols = resize_taps(wo, w);
    let mut out = Array4::<f64>::zeros((n, c, ho, wo));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut slab)| {
            let xi = x4.index_axis(Axis(0), i);
            let xs = xi.as_slice().unwrap();
            let os = slab.as_slice_mut().unwrap();
            for ch in 0..c {
                let xoff = ch * h * w;
                let ooff = ch * ho * wo;
                for (ro, &(r0, r1, fr)) in rows.iter().enumerate() {
                    let base0 = xoff + r0 * w;
                    let base1 = xoff + r1 * w;
                    let obase = ooff + ro * wo;
                    for (co, &(c0, c1, fc)) in cols.iter().enumerate() {
                        let top = xs[base0 + c0] * (1.0 - fc) + xs[base0 + c1] * fc;
                        let bot = xs[base1 + c0] * (1.0 - fc) + xs[base1 + c1] * fc;
                        os[obase + co] = top * (1.0 - fr) + bot * fr;
                    }
                }
            }
        });
    out.into_dyn()
}

pub(super) fn resize_backward(x: &ArrayD<f64>, g: &ArrayD<f64>) -> ArrayD<f64> {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
    let (ho, wo) = (g4.shape()[2], g4.shape()[3]);
    let rows = resize_taps(ho, h);
    let cols = resize_taps(wo, w);
    let mut dx = Array4::<f64>::zeros((n, c, h, w));
    dx.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut slab)| {
            let gi = g4.index_axis(Axis(0), i);
            let gs = gi.as_slice().unwrap();
            let ds = slab.as_slice_mut().unwrap();
            for ch in 0..c {
                let doff = ch * h * w;
                let goff = ch * ho * wo;
                for (ro, &(r0, r1, fr)) in rows.iter().enumerate() {
                    let gbase = goff + ro * wo;
                    for (co, &(c0, c1, fc)) in cols.iter().enumerate() {
                        let gv = gs[gbase + co];
                        ds[doff + r0 * w + c0] += gv * (1.0 - fr) * (1.0 - fc);
                        ds[doff + r0 * w + c1] += gv * (1.0 - fr) * fc;
                        ds[doff + r1 * w + c0] += gv * fr * (1.0 - fc);
                        ds[doff + r1 * w + c1] += gv * fr * fc;
                    }
                }
            }
        });
    dx.into_dyn()
}

// ---- flow warp ---------------------------------------------------------------

struct WarpTap {
    // flattened plane offsets of the four taps; usize::MAX marks an invalid tap
    idx: [usize; 4],
    fx: f64,
    fy: f64,
    // 1.0 when the sampling position moves freely along the axis, 0.0 when clamped
    gx: f64,
    gy: f64,
}

const INVALID: usize = usize::MAX;

fn warp_taps(flow: &[f64], h: usize, w: usize, border: Border) -> Vec<WarpTap> {
    let hw = h * w;
    let mut taps = Vec::with_capacity(hw);
    for r in 0..h {
        for c in 0..w {
            let u = flow[r * w + c];
            let v = flow[hw + r * w + c];
            let px = c as f64 + u;
            let py = r as f64 + v;
            match border {
                Border::Clamp => {
                    let gx = if px > 0.0 && px < (w - 1) as f64 { 1.0 } else { 0.0 };
                    let gy = if py > 0.0 && py < (h - 1) as f64 { 1.0 } else { 0.0 };
                    let px = px.clamp(0.0, (w - 1) as f64);
                    let py = py.clamp(0.0, (h - 1) as f64);
                    let x0 = px.floor() as usize;
                    let y0 = py.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let y1 = (y0 + 1).min(h - 1);
                    taps.push(WarpTap {
                        idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
                        fx: px - x0 as f64,
                        fy: py - y0 as f64,
                        gx,
                        gy,
                    });
                }
                Border::Zeros => {
                    let x0 = px.floor() as isize;
                    let y0 = py.floor() as isize;
                    let valid = |y: isize, x: isize| -> usize {
                        if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
                            y as usize * w + x as usize
                        } else {
                            INVALID
                        }
                    };
                    taps.push(WarpTap {
                        idx: [
                            valid(y0, x0),
                            valid(y0, x0 + 1),
                            valid(y0 + 1, x0),
                            valid(y0 + 1, x0 + 1),
                        ],
                        fx: px - x0 as f64,
                        fy: py - y0 as f64,
                        gx: 1.0,
                        gy: 1.0,
                    });
                }
            }
        }
    }
    taps
}

pub(super) fn flow_warp_forward(x: &ArrayD<f64>, w: &ArrayD<f64>, border: Border) -> ArrayD<f64> {
    let x4 = x.view().into_dimensionality::<Ix4>().expect("flow_warp input must be (N, C, H, W)");
    let w4 = w.view().into_dimensionality::<Ix4>().expect("flow must be (N, 2, H, W)");
    let (n, c, h, wd) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
    assert_eq!(w4.shape(), [n, 2, h, wd], "flow_warp resolution mismatch");
    let hw = h * wd;
    let mut out = Array4::<f64>::zeros((n, c, h, wd));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut slab)| {
            let xi = x4.index_axis(Axis(0), i);
            let wi = w4.index_axis(Axis(0), i);
            let xs = xi.as_slice().unwrap();
            let taps = warp_taps(wi.as_slice().unwrap(), h, wd, border);
            let os = slab.as_slice_mut().unwrap();
            for ch in 0..c {
                let xoff = ch * hw;
                let ooff = ch * hw;
                for (p, t) in taps.iter().enumerate() {
                    let pick = |k: usize| -> f64 {
                        if t.idx[k] == INVALID {
                            0.0
                        } else {
                            xs[xoff + t.idx[k]]
                        }
                    };
                    let (fx, fy) = (t.fx, t.fy);
                    os[ooff + p] = pick(0) * (1.0 - fx) * (1.0 - fy)
                        + pick(1) * fx * (1.0 - fy)
                        + pick(2) * (1.0 - fx) * fy
                        + pick(3) * fx * fy;
                }
            }
        });
    out.into_dyn()
}

pub(super) fn flow_warp_backward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    g: &ArrayD<f64>,
    border: Border,
    need_x: bool,
    need_w: bool,
) -> (Option<ArrayD<f64>>, Option<ArrayD<f64>>) {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let w4 = w.view().into_dimensionality::<Ix4>().unwrap();
    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, wd) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
    let hw = h * wd;

    let results: Vec<(Option<Array4<f64>>, Option<Array4<f64>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x4.index_axis(Axis(0), i);
            let wi = w4.index_axis(Axis(0), i);
            let gi = g4.index_axis(Axis(0), i);
            let xs = xi.as_slice().unwrap();
            let gs = gi.as_slice().unwrap();
            let taps = warp_taps(wi.as_slice().unwrap(), h, wd, border);

            let mut dx = if need_x {
                Some(Array4::<f64>::zeros((1, c, h, wd)))
            } else {
                None
            };
            let mut dw = if need_w {
                Some(Array4::<f64>::zeros((1, 2, h, wd)))
            } else {
                None
            };
            for ch in 0..c {
                let off = ch * hw;
                for (p, t) in taps.iter().enumerate() {
                    let gv = gs[off + p];
                    if gv == 0.0 {
                        continue;
                    }
                    let (fx, fy) = (t.fx, t.fy);
                    let wts = [
                        (1.0 - fx) * (1.0 - fy),
                        fx * (1.0 - fy),
                        (1.0 - fx) * fy,
                        fx * fy,
                    ];
                    if let Some(dx) = dx.as_mut() {
                        let ds = dx.as_slice_mut().unwrap();
                        for k in 0..4 {
                            if t.idx[k] != INVALID {
                                ds[off + t.idx[k]] += gv * wts[k];
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        let pick = |k: usize| -> f64 {
                            if t.idx[k] == INVALID {
                                0.0
                            } else {
                                xs[off + t.idx[k]]
                            }
                        };
                        let dfx = -(1.0 - fy) * pick(0) + (1.0 - fy) * pick(1) - fy * pick(2)
                            + fy * pick(3);
                        let dfy = -(1.0 - fx) * pick(0) - fx * pick(1) + (1.0 - fx) * pick(2)
                            + fx * pick(3);
                        let ds = dw.as_slice_mut().unwrap();
                        ds[p] += gv * dfx * t.gx;
                        ds[hw + p] += gv * dfy * t.gy;
                    }
                }
            }
            (dx, dw)
        })
        .collect();

    let assemble = |pick: fn(&(Option<Array4<f64>>, Option<Array4<f64>>)) -> &Option<Array4<f64>>,
                    ch: usize|
     -> ArrayD<f64> {
        let mut out = Array4::<f64>::zeros((n, ch, h, wd));
        for (i, r) in results.iter().enumerate() {
            out.index_axis_mut(Axis(0), i)
                .assign(&pick(r).as_ref().unwrap().index_axis(Axis(0), 0));
        }
        out.into_dyn()
    };
    let dx = need_x.then(|| assemble(|r| &r.0, c));
    let dw = need_w.then(|| assemble(|r| &r.1, 2));
    (dx, dw)
}

// ---- blend ---------------------------------------------------------------------

pub(super) fn blend_forward(a: &ArrayD<f64>, f: &ArrayD<f64>, m: &ArrayD<f64>) -> ArrayD<f64> {
    let a4 = a.view().into_dimensionality::<Ix4>().expect("blend inputs must be (N, C, H, W)");
    let f4 = f.view().into_dimensionality::<Ix4>().unwrap();
    let m4 = m.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = (a4.shape()[0], a4.shape()[1], a4.shape()[2], a4.shape()[3]);
    assert_eq!(f4.shape(), a4.shape(), "blend branch shape mismatch");
    assert_eq!(m4.shape(), [n, 1, h, w], "combination map must be (N, 1, H, W)");
    let hw = h * w;
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    for i in 0..n {
        let asl = a4.index_axis(Axis(0), i);
        let fsl = f4.index_axis(Axis(0), i);
        let msl = m4.index_axis(Axis(0), i);
        let (asv, fsv, msv) = (
            asl.as_slice().unwrap(),
            fsl.as_slice().unwrap(),
            msl.as_slice().unwrap(),
        );
        let mut osl = out.index_axis_mut(Axis(0), i);
        let osv = osl.as_slice_mut().unwrap();
        for ch in 0..c {
            let off = ch * hw;
            for p in 0..hw {
                let mv = msv[p];
                osv[off + p] = mv * asv[off + p] + (1.0 - mv) * fsv[off + p];
            }
        }
    }
    out.into_dyn()
}

#[allow(clippy::too_many_arguments)]
pub(super) fn blend_backward(
    a: &ArrayD<f64>,
    f: &ArrayD<f64>,
    m: &ArrayD<f64>,
    g: &ArrayD<f64>,
    need_a: bool,
    need_f: bool,
    need_m: bool,
) -> (Option<ArrayD<f64>>, Option<ArrayD<f64>>, Option<ArrayD<f64>>) {
    let a4 = a.view().into_dimensionality::<Ix4>().unwrap();
    let f4 = f.view().into_dimensionality::<Ix4>().unwrap();
    let m4 = m.view().into_dimensionality::<Ix4>().unwrap();
    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = (a4.shape()[0], a4.shape()[1], a4.shape()[2], a4.shape()[3]);
    let hw = h * w;
    let mut da = need_a.then(|| Array4::<f64>::zeros((n, c, h, w)));
    let mut df = need_f.then(|| Array4::<f64>::zeros((n, c, h, w)));
    let mut dm = need_m.then(|| Array4::<f64>::zeros((n, 1, h, w)));
    for i in 0..n {
        let (asl, fsl, msl, gsl) = (
            a4.index_axis(Axis(0), i),
            f4.index_axis(Axis(0), i),
            m4.index_axis(Axis(0), i),
            g4.index_axis(Axis(0), i),
        );
        let (asv, fsv, msv, gsv) = (
            asl.as_slice().unwrap(),
            fsl.as_slice().unwrap(),
            msl.as_slice().unwrap(),
            gsl.as_slice().unwrap(),
        );
        for ch in 0..c {
            let off = ch * hw;
            for p in 0..hw {
                let gv = gsv[off + p];
                if let Some(da) = da.as_mut() {
                    da.as_slice_mut().unwrap()[i * c * hw + off + p] = gv * msv[p];
                }
                if let Some(df) = df.as_mut() {
                    df.as_slice_mut().unwrap()[i * c * hw + off + p] = gv * (1.0 - msv[p]);
                }
                if let Some(dm) = dm.as_mut() {
                    dm.as_slice_mut().unwrap()[i * hw + p] += gv * (asv[off + p] - fsv[off + p]);
                }
            }
        }
    }
    (
        da.map(|d| d.into_dyn()),
        df.map(|d| d.into_dyn()),
        dm.map(|d| d.into_dyn()),
    )
}

// ---- unfold ---------------------------------------------------------------------

pub(super) fn unfold_forward(x: &ArrayD<f64>, n: usize) -> ArrayD<f64> {
    let x4 = x.view().into_dimensionality::<Ix4>().expect("unfold input must be (N, C, H, W)");
    let (nb, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
    assert!(h >= n && w >= n, "unfold patch larger than input");
    let (lh, lw) = (h - n + 1, w - n + 1);
    let l = lh * lw;
    let mut out = Array4::<f64>::zeros((nb, l, c, n * n));
    for i in 0..nb {
        let xi = x4.index_axis(Axis(0), i);
        let xs = xi.as_slice().unwrap();
        let mut oi = out.index_axis_mut(Axis(0), i);
        let os = oi.as_slice_mut().unwrap();
        for pr in 0..lh {
            for pc in 0..lw {
                let patch = pr * lw + pc;
                for ch in 0..c {
                    let base = patch * c * n * n + ch * n * n;
                    for dr in 0..n {
                        let src = ch * h * w + (pr + dr) * w + pc;
                        for dc in 0..n {
                            os[base + dr * n + dc] = xs[src + dc];
                        }
                    }
                }
            }
        }
    }
    out.into_dyn()
}

pub(super) fn unfold_backward(x: &ArrayD<f64>, g: &ArrayD<f64>, n: usize) -> ArrayD<f64> {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let (nb, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
    let (lh, lw) = (h - n + 1, w - n + 1);
    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
    let mut dx = Array4::<f64>::zeros((nb, c, h, w));
    for i in 0..nb {
        let gi = g4.index_axis(Axis(0), i);
        let gs = gi.as_slice().unwrap();
        let mut di = dx.index_axis_mut(Axis(0), i);
        let ds = di.as_slice_mut().unwrap();
        for pr in 0..lh {
            for pc in 0..lw {
                let patch = pr * lw + pc;
                for ch in 0..c {
                    let base = patch * c * n * n + ch * n * n;
                    for dr in 0..n {
                        let dst = ch * h * w + (pr + dr) * w + pc;
                        for dc in 0..n {
                            ds[dst + dc] += gs[base + dr * n + dc];
                        }
                    }
                }
            }
        }
    }
    dx.into_dyn()
}

// ---- gather ---------------------------------------------------------------------

pub(super) fn gather_last_forward(x: &ArrayD<f64>, idx: &[usize], t: usize) -> ArrayD<f64> {
    let x3 = x.view().into_dimensionality::<Ix3>().expect("gather input must be (N, C, S)");
    let (n, c, s) = (x3.shape()[0], x3.shape()[1], x3.shape()[2]);
    assert_eq!(idx.len(), n * t, "gather index count mismatch");
    let mut out = ndarray::Array3::<f64>::zeros((n, c, t));
    for i in 0..n {
        let xi = x3.index_axis(Axis(0), i);
        let xs = xi.as_slice().unwrap();
        let mut oi = out.index_axis_mut(Axis(0), i);
        let os = oi.as_slice_mut().unwrap();
        let ids = &idx[i * t..(i + 1) * t];
        for ch in 0..c {
            for (j, &src) in ids.iter().enumerate() {
                debug_assert!(src < s);
                os[ch * t + j] = xs[ch * s + src];
            }
        }
    }
    out.into_dyn()
}

pub(super) fn gather_last_backward(x: &ArrayD<f64>, g: &ArrayD<f64>, idx: &[usize]) -> ArrayD<f64> {
    let x3 = x.view().into_dimensionality::<Ix3>().unwrap();
    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
    let (n, c, s) = (x3.shape()[0], x3.shape()[1], x3.shape()[2]);
    let t = g3.shape()[2];
    let mut dx = ndarray::Array3::<f64>::zeros((n, c, s));
    for i in 0..n {
        let gi = g3.index_axis(Axis(0), i);
        let gs = gi.as_slice().unwrap();
        let mut di = dx.index_axis_mut(Axis(0), i);
        let ds = di.as_slice_mut().unwrap();
        let ids = &idx[i * t..(i + 1) * t];
        for ch in 0..c {
            for (j, &src) in ids.iter().enumerate() {
                ds[ch * s + src] += gs[ch * t + j];
            }
        }
    }
    dx.into_dyn()
}

// ---- instance norm -----------------------------------------------------------------

pub(super) fn instance_norm_forward(x: &ArrayD<f64>, eps: f64) -> ArrayD<f64> {
    let x4 = x.view().into_dimensionality::<Ix4>().expect("instance_norm input must be (N, C, H, W)");
    let (n, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
    let hw = (h * w) as f64;
    let mut y = x.clone();
    {
        let ys = y.as_slice_mut().unwrap();
        ys.par_chunks_mut(h * w).for_each(|plane| {
            let mean = plane.iter().sum::<f64>() / hw;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw;
            let istd = 1.0 / (var + eps).sqrt();
            for v in plane.iter_mut() {
                *v = (*v - mean) * istd;
            }
        });
    }
    let _ = (n, c);
    y
}

pub(super) fn instance_norm_backward(x: &ArrayD<f64>, g: &ArrayD<f64>, eps: f64) -> ArrayD<f64> {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let (h, w) = (x4.shape()[2], x4.shape()[3]);
    let hw = (h * w) as f64;
    let mut dx = g.clone();
    {
        let xs = x.as_slice().unwrap();
        let ds = dx.as_slice_mut().unwrap();
        ds.par_chunks_mut(h * w)
            .zip(xs.par_chunks(h * w))
            .for_each(|(gp, xp)| {
                let mean = xp.iter().sum::<f64>() / hw;
                let var = xp.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw;
                let istd = 1.0 / (var + eps).sqrt();
                let gmean = gp.iter().sum::<f64>() / hw;
                let mut gydot = 0.0;
                for (gv, xv) in gp.iter().zip(xp.iter()) {
                    gydot += gv * (xv - mean) * istd;
                }
                gydot /= hw;
                for (gv, xv) in gp.iter_mut().zip(xp.iter()) {
                    let yv = (xv - mean) * istd;
                    *gv = istd * (*gv - gmean - yv * gydot);
                }
            });
    }
    dx
}
