//! Pointwise, reduction, and linear-algebra kernels for the tape.

use super::Op;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix3, IxDyn};
use ndarray::parallel::prelude::*;
use rayon::prelude::*;

pub(super) fn binary_forward(a: &ArrayD<f64>, b: &ArrayD<f64>, op: &Op) -> ArrayD<f64> {
    match op {
        Op::Add => a + b,
        Op::Sub => a - b,
        Op::Mul => a * b,
        Op::Div => a / b,
        _ => unreachable!(),
    }
}

pub(super) fn unary_forward(x: &ArrayD<f64>, op: &Op) -> ArrayD<f64> {
    match op {
        Op::Neg => -x,
        Op::Scale(s) => x * *s,
        Op::AddScalar(c) => x + *c,
        Op::Abs => x.mapv(f64::abs),
        Op::Relu => x.mapv(|v| v.max(0.0)),
        Op::LeakyRelu(k) => {
            let k = *k;
            x.mapv(|v| if v > 0.0 { v } else { k * v })
        }
        Op::Sigmoid => x.mapv(|v| 1.0 / (1.0 + (-v).exp())),
        Op::Tanh => x.mapv(f64::tanh),
        Op::Exp => x.mapv(f64::exp),
        Op::Sqrt => x.mapv(|v| {
            debug_assert!(v >= 0.0, "sqrt of negative value");
            v.sqrt()
        }),
        Op::ClampMin(c) => {
            let c = *c;
            x.mapv(|v| v.max(c))
        }
        _ => unreachable!(),
    }
}

pub(super) fn unary_backward(x: &ArrayD<f64>, y: &ArrayD<f64>, g: &ArrayD<f64>, op: &Op) -> ArrayD<f64> {
    match op {
        Op::Neg => -g,
        Op::Scale(s) => g * *s,
        Op::AddScalar(_) => g.clone(),
        Op::Abs => {
            let mut d = g.clone();
            d.zip_mut_with(x, |gg, &xx| *gg *= if xx > 0.0 { 1.0 } else if xx < 0.0 { -1.0 } else { 0.0 });
            d
        }
        Op::Relu => {
            let mut d = g.clone();
            d.zip_mut_with(x, |gg, &xx| {
                if xx <= 0.0 {
                    *gg = 0.0
                }
            });
            d
        }
        Op::LeakyRelu(k) => {
            let k = *k;
            let mut d = g.clone();
            d.zip_mut_with(x, |gg, &xx| {
                if xx <= 0.0 {
                    *gg *= k
                }
            });
            d
        }
        Op::Sigmoid => {
            let mut d = g.clone();
            d.zip_mut_with(y, |gg, &yy| *gg *= yy * (1.0 - yy));
            d
        }
        Op::Tanh => {
            let mut d = g.clone();
            d.zip_mut_with(y, |gg, &yy| *gg *= 1.0 - yy * yy);
            d
        }
        Op::Exp => g * y,
        Op::Sqrt => {
            let mut d = g.clone();
            d.zip_mut_with(y, |gg, &yy| *gg /= 2.0 * yy);
            d
        }
        Op::ClampMin(c) => {
            let c = *c;
            let mut d = g.clone();
            d.zip_mut_with(x, |gg, &xx| {
                if xx < c {
                    *gg = 0.0
                }
            });
            d
        }
        _ => unreachable!(),
    }
}

/// `x (N, C, ...)` combined with a `(C,)` vector broadcast over every other axis.
pub(super) fn channels_forward(x: &ArrayD<f64>, b: &ArrayD<f64>, multiply: bool) -> ArrayD<f64> {
    let c = x.shape()[1];
    assert_eq!(b.shape(), [c], "channel vector length mismatch");
    let b = b.as_slice().expect("channel vector layout");
    let mut y = x.clone();
    for mut sample in y.axis_iter_mut(Axis(0)) {
        for (ch, mut plane) in sample.axis_iter_mut(Axis(0)).enumerate() {
            if multiply {
                plane.mapv_inplace(|v| v * b[ch]);
            } else {
                plane.mapv_inplace(|v| v + b[ch]);
            }
        }
    }
    y
}

/// Reduce `g (N, C, ...)` to a `(C,)` vector by summing every other axis.
pub(super) fn reduce_to_channels(g: &ArrayD<f64>) -> ArrayD<f64> {
    let c = g.shape()[1];
    let mut out = ndarray::Array1::<f64>::zeros(c);
    for sample in g.axis_iter(Axis(0)) {
        for (ch, plane) in sample.axis_iter(Axis(0)).enumerate() {
            out[ch] += plane.sum();
        }
    }
    out.into_dyn()
}

pub(super) fn scale_channels_forward(x: &ArrayD<f64>, factors: &[f64]) -> ArrayD<f64> {
    let c = x.shape()[1];
    assert_eq!(factors.len(), c, "scale factor count mismatch");
    let mut y = x.clone();
    for mut sample in y.axis_iter_mut(Axis(0)) {
        for (ch, mut plane) in sample.axis_iter_mut(Axis(0)).enumerate() {
            plane.mapv_inplace(|v| v * factors[ch]);
        }
    }
    y
}

// ---- batched matmul ---------------------------------------------------------

fn as_batched_3d(x: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    let nd = x.ndim();
    assert!(nd >= 2, "matmul operand must have >= 2 axes");
    let (m, n) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    let batch: usize = x.shape()[..nd - 2].iter().product::<usize>().max(1);
    x.view()
        .into_shape_with_order(IxDyn(&[batch, m, n]))
        .expect("matmul operand must be contiguous")
        .into_dimensionality::<Ix3>()
        .unwrap()
}

fn gemm_into(a: ArrayView2<f64>, b: ArrayView2<f64>, out: &mut Array2<f64>) {
    general_mat_mul(1.0, &a, &b, 0.0, out);
}

pub(super) fn matmul_b_forward(a: &ArrayD<f64>, b: &ArrayD<f64>, ta: bool, tb: bool) -> ArrayD<f64> {
    let a3 = as_batched_3d(a);
    let b3 = as_batched_3d(b);
    assert_eq!(a3.shape()[0], b3.shape()[0], "matmul batch mismatch");
    let batch = a3.shape()[0];
    let (m, ka) = if ta {
        (a3.shape()[2], a3.shape()[1])
    } else {
        (a3.shape()[1], a3.shape()[2])
    };
    let (kb, n) = if tb {
        (b3.shape()[2], b3.shape()[1])
    } else {
        (b3.shape()[1], b3.shape()[2])
    };
    assert_eq!(ka, kb, "matmul inner dimension mismatch");

    let mut out = ndarray::Array3::<f64>::zeros((batch, m, n));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, slab)| {
            let av = a3.index_axis(Axis(0), i);
            let bv = b3.index_axis(Axis(0), i);
            let av = if ta { av.reversed_axes() } else { av };
            let bv = if tb { bv.reversed_axes() } else { bv };
            let mut tmp = Array2::zeros((m, n));
            gemm_into(av, bv, &mut tmp);
            let mut slab = slab;
            slab.assign(&tmp);
        });

    // Output leading shape follows `a`'s leading axes.
    let mut shape: Vec<usize> = a.shape()[..a.ndim() - 2].to_vec();
    shape.push(m);
    shape.push(n);
    out.into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap()
}

pub(super) fn matmul_b_backward(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    g: &ArrayD<f64>,
    ta: bool,
    tb: bool,
    need_a: bool,
    need_b: bool,
) -> (Option<ArrayD<f64>>, Option<ArrayD<f64>>) {
    // With A_eff = op(A), B_eff = op(B), C = A_eff B_eff:
    //   dA_eff = G B_eff^T, dB_eff = A_eff^T G,
    // then undo the transposes.
    let da = if need_a {
        let d = if ta {
            // dA = (G B_eff^T)^T = B_eff G^T
            if tb {
                matmul_b_forward(b, g, true, true)
            } else {
                matmul_b_forward(b, g, false, true)
            }
        } else if tb {
            matmul_b_forward(g, b, false, false)
        } else {
            matmul_b_forward(g, b, false, true)
        };
        Some(reshape_like(d, a))
    } else {
        None
    };
    let db = if need_b {
        let d = if tb {
            // dB = (A_eff^T G)^T = G^T A_eff
            if ta {
                matmul_b_forward(g, a, true, true)
            } else {
                matmul_b_forward(g, a, true, false)
            }
        } else if ta {
            matmul_b_forward(a, g, false, false)
        } else {
            matmul_b_forward(a, g, true, false)
        };
        Some(reshape_like(d, b))
    } else {
        None
    };
    (da, db)
}

fn reshape_like(x: ArrayD<f64>, like: &ArrayD<f64>) -> ArrayD<f64> {
    x.into_shape_with_order(like.raw_dim()).expect("matmul backward shape")
}

// ---- batched 3x3 inverse ------------------------------------------------------

pub(super) fn inv3_forward(x: &ArrayD<f64>) -> ArrayD<f64> {
    let nd = x.ndim();
    assert!(nd >= 2 && x.shape()[nd - 1] == 3 && x.shape()[nd - 2] == 3);
    let mut y = x.clone();
    {
        let xs = x.as_slice().expect("inv3 operand layout");
        let ys = y.as_slice_mut().unwrap();
        for (m, out) in xs.chunks_exact(9).zip(ys.chunks_exact_mut(9)) {
            invert3(m, out);
        }
    }
    y
}

fn invert3(m: &[f64], out: &mut [f64]) {
    let (a, b, c) = (m[0], m[1], m[2]);
    let (d, e, f) = (m[3], m[4], m[5]);
    let (g, h, i) = (m[6], m[7], m[8]);
    let co00 = e * i - f * h;
    let co01 = -(d * i - f * g);
    let co02 = d * h - e * g;
    let det = a * co00 + b * co01 + c * co02;
    let inv_det = 1.0 / det;
    out[0] = co00 * inv_det;
    out[1] = (c * h - b * i) * inv_det;
    out[2] = (b * f - c * e) * inv_det;
    out[3] = co01 * inv_det;
    out[4] = (a * i - c * g) * inv_det;
    out[5] = (c * d - a * f) * inv_det;
    out[6] = co02 * inv_det;
    out[7] = (b * g - a * h) * inv_det;
    out[8] = (a * e - b * d) * inv_det;
}

pub(super) fn inv3_backward(y: &ArrayD<f64>, g: &ArrayD<f64>) -> ArrayD<f64> {
    // For Y = X^-1: dX = -Y^T G Y^T, per 3x3 block.
    let mut out = ArrayD::zeros(y.raw_dim());
    let ys = y.as_slice().unwrap();
    let gs = g.as_slice().expect("inv3 gradient layout");
    let os = out.as_slice_mut().unwrap();
    for ((yb, gb), ob) in ys
        .chunks_exact(9)
        .zip(gs.chunks_exact(9))
        .zip(os.chunks_exact_mut(9))
    {
        // t = Y^T G
        let mut t = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += yb[k * 3 + r] * gb[k * 3 + c];
                }
                t[r * 3 + c] = s;
            }
        }
        // dX = -(t Y^T)
        for r in 0..3 {
            for c in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += t[r * 3 + k] * yb[c * 3 + k];
                }
                ob[r * 3 + c] = -s;
            }
        }
    }
    out
}

// ---- column softmax ----------------------------------------------------------

/// Softmax over axis 1 of a contiguous `(N, S, T)` tensor with sharpness `alpha`.
/// The work happens on the `(N, T, S)` transpose so each column is contiguous.
pub(super) fn softmax_cols_forward(x: &ArrayD<f64>, alpha: f64) -> ArrayD<f64> {
    let x3 = x.view().into_dimensionality::<Ix3>().expect("softmax_cols expects (N, S, T)");
    let (n, s, t) = (x3.shape()[0], x3.shape()[1], x3.shape()[2]);
    let mut xt = x3.permuted_axes([0, 2, 1]).as_standard_layout().to_owned();
    {
        let data = xt.as_slice_mut().unwrap();
        data.par_chunks_mut(s).for_each(|col| {
            let mut mx = f64::NEG_INFINITY;
            for v in col.iter() {
                let av = alpha * v;
                if av > mx {
                    mx = av;
                }
            }
            let mut sum = 0.0;
            for v in col.iter_mut() {
                *v = (alpha * *v - mx).exp();
                sum += *v;
            }
            let inv = 1.0 / sum;
            for v in col.iter_mut() {
                *v *= inv;
            }
        });
    }
    let _ = (n, t);
    xt.permuted_axes([0, 2, 1]).as_standard_layout().to_owned().into_dyn()
}

pub(super) fn softmax_cols_backward(y: &ArrayD<f64>, g: &ArrayD<f64>, alpha: f64) -> ArrayD<f64> {
    let y3 = y.view().into_dimensionality::<Ix3>().unwrap();
    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
    let s = y3.shape()[1];
    let mut yt = y3.permuted_axes([0, 2, 1]).as_standard_layout().to_owned();
    let gt = g3.permuted_axes([0, 2, 1]).as_standard_layout().to_owned();
    {
        let yd = yt.as_slice_mut().unwrap();
        let gd = gt.as_slice().unwrap();
        yd.par_chunks_mut(s).zip(gd.par_chunks(s)).for_each(|(yc, gc)| {
            let mut dot = 0.0;
            for (yv, gv) in yc.iter().zip(gc.iter()) {
                dot += yv * gv;
            }
            for (yv, gv) in yc.iter_mut().zip(gc.iter()) {
                *yv = alpha * *yv * (gv - dot);
            }
        });
    }
    yt.permuted_axes([0, 2, 1]).as_standard_layout().to_owned().into_dyn()
}
