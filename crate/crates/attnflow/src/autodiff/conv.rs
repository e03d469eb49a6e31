//! im2col-based 2-D convolution, parallelized over the batch.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayD, ArrayView3, ArrayViewMut3, Axis, Ix4};
use ndarray::parallel::prelude::*;

pub(super) fn out_hw(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    assert!(h + 2 * pad >= k && w + 2 * pad >= k, "conv kernel larger than padded input");
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}

/// Fill `col (Cin*k*k, Ho*Wo)` from one sample `x (Cin, H, W)`.
fn im2col(x: &ArrayView3<f64>, k: usize, stride: usize, pad: usize, col: &mut Array2<f64>) {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = out_hw(h, w, k, stride, pad);
    let xs = x.as_slice().expect("im2col input layout");
    let cs = col.as_slice_mut().unwrap();
    for c in 0..cin {
        for dr in 0..k {
            for dc in 0..k {
                let row = (c * k + dr) * k + dc;
                let base = row * ho * wo;
                for r_out in 0..ho {
                    let r_in = (r_out * stride + dr) as isize - pad as isize;
                    let out_off = base + r_out * wo;
                    if r_in < 0 || r_in >= h as isize {
                        cs[out_off..out_off + wo].fill(0.0);
                        continue;
                    }
                    let in_off = (c * h + r_in as usize) * w;
                    for c_out in 0..wo {
                        let c_in = (c_out * stride + dc) as isize - pad as isize;
                        cs[out_off + c_out] = if c_in < 0 || c_in >= w as isize {
                            0.0
                        } else {
                            xs[in_off + c_in as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter `col`'s gradient back into one sample `dx (Cin, H, W)`.
fn col2im(col: &Array2<f64>, k: usize, stride: usize, pad: usize, dx: &mut ArrayViewMut3<f64>) {
    let (cin, h, w) = (dx.shape()[0], dx.shape()[1], dx.shape()[2]);
    let (ho, wo) = out_hw(h, w, k, stride, pad);
    let cs = col.as_slice().unwrap();
    let ds = dx.as_slice_mut().unwrap();
    for c in 0..cin {
        for dr in 0..k {
            for dc in 0..k {
                let row = (c * k + dr) * k + dc;
                let base = row * ho * wo;
                for r_out in 0..ho {
                    let r_in = (r_out * stride + dr) as isize - pad as isize;
                    if r_in < 0 || r_in >= h as isize {
                        continue;
                    }
                    let in_off = (c * h + r_in as usize) * w;
                    let out_off = base + r_out * wo;
                    for c_out in 0..wo {
                        let c_in = (c_out * stride + dc) as isize - pad as isize;
                        if c_in >= 0 && c_in < w as isize {
                            ds[in_off + c_in as usize] += cs[out_off + c_out];
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn conv2d_forward(x: &ArrayD<f64>, w: &ArrayD<f64>, stride: usize, pad: usize) -> ArrayD<f64> {
    let x4 = x.view().into_dimensionality::<Ix4>().expect("conv input must be (N, C, H, W)");
    let w4 = w.view().into_dimensionality::<Ix4>().expect("conv weight must be (Cout, Cin, k, k)");
    let (n, cin, h, wd) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
    let (cout, wcin, kh, kw) = (w4.shape()[0], w4.shape()[1], w4.shape()[2], w4.shape()[3]);
    assert_eq!(cin, wcin, "conv channel mismatch");
    assert_eq!(kh, kw, "only square kernels are supported");
    let k = kh;
    let (ho, wo) = out_hw(h, wd, k, stride, pad);

    let wmat = w4
        .into_shape_with_order((cout, cin * k * k))
        .expect("conv weight layout");
    let mut out = Array4::<f64>::zeros((n, cout, ho, wo));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, slab)| {
            let mut col = Array2::<f64>::zeros((cin * k * k, ho * wo));
            im2col(&x4.index_axis(Axis(0), i), k, stride, pad, &mut col);
            let mut res = Array2::<f64>::zeros((cout, ho * wo));
            general_mat_mul(1.0, &wmat, &col.view(), 0.0, &mut res);
            let mut slab = slab;
            slab.assign(
                &res.into_shape_with_order((cout, ho, wo)).unwrap(),
            );
        });
    out.into_dyn()
}

pub(super) fn conv2d_backward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    g: &ArrayD<f64>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<ArrayD<f64>>, Option<ArrayD<f64>>) {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let w4 = w.view().into_dimensionality::<Ix4>().unwrap();
    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
    let (n, cin, h, wd) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
    let (cout, _, k, _) = (w4.shape()[0], w4.shape()[1], w4.shape()[2], w4.shape()[3]);
    let (ho, wo) = (g4.shape()[2], g4.shape()[3]);
    let wmat = w4.into_shape_with_order((cout, cin * k * k)).unwrap();

    // Per-sample work: recompute im2col, produce dx slab and a dW contribution.
    let results: Vec<(Option<Array4<f64>>, Option<Array2<f64>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut col = Array2::<f64>::zeros((cin * k * k, ho * wo));
            im2col(&x4.index_axis(Axis(0), i), k, stride, pad, &mut col);
            let gmat = g4
                .index_axis(Axis(0), i)
                .into_shape_with_order((cout, ho * wo))
                .unwrap();
            let dw = if need_w {
                let mut dwi = Array2::<f64>::zeros((cout, cin * k * k));
                general_mat_mul(1.0, &gmat, &col.t(), 0.0, &mut dwi);
                Some(dwi)
            } else {
                None
            };
            let dx = if need_x {
                let mut dcol = Array2::<f64>::zeros((cin * k * k, ho * wo));
                general_mat_mul(1.0, &wmat.t(), &gmat, 0.0, &mut dcol);
                let mut dxi = Array4::<f64>::zeros((1, cin, h, wd));
                col2im(&dcol, k, stride, pad, &mut dxi.index_axis_mut(Axis(0), 0));
                Some(dxi)
            } else {
                None
            };
            (dx, dw)
        })
        .collect();

    let dx = if need_x {
        let mut dx = Array4::<f64>::zeros((n, cin, h, wd));
        for (i, (dxi, _)) in results.iter().enumerate() {
            dx.index_axis_mut(Axis(0), i)
                .assign(&dxi.as_ref().unwrap().index_axis(Axis(0), 0));
        }
        Some(dx.into_dyn())
    } else {
        None
    };
    let dw = if need_w {
        let mut acc = Array2::<f64>::zeros((cout, cin * k * k));
        for (_, dwi) in &results {
            acc += dwi.as_ref().unwrap();
        }
        Some(
            acc.into_shape_with_order((cout, cin, k, k))
                .unwrap()
                .into_dyn(),
        )
    } else {
        None
    };
    (dx, dw)
}
