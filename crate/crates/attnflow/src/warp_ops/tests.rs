use super::*;
use crate::error::Error;
use ndarray::{arr2, Array2, Array3};

fn fm(data: Array3<f64>) -> FeatureMap {
    FeatureMap::new(data).unwrap()
}

/// Brute-force per-column softmax of `alpha * k^T q`, independent of the
/// kernel path (no max subtraction, plain loops).
fn softmax_oracle(keys: &FeatureMap, queries: &FeatureMap, alpha: f64) -> Array2<f64> {
    let (ch, h, w) = keys.data().dim();
    let hw = h * w;
    let flat = |f: &FeatureMap, i: usize| -> Vec<f64> {
        (0..ch).map(|c| f.data()[(c, i / w, i % w)]).collect()
    };
    let mut out = Array2::<f64>::zeros((hw, hw));
    for j in 0..hw {
        let q = flat(queries, j);
        let mut col = Vec::with_capacity(hw);
        for i in 0..hw {
            let k = flat(keys, i);
            let dot: f64 = k.iter().zip(&q).map(|(a, b)| a * b).sum();
            col.push((alpha * dot).exp());
        }
        let s: f64 = col.iter().sum();
        for i in 0..hw {
            out[(i, j)] = col[i] / s;
        }
    }
    out
}

/// Per-pixel bilinear sampling oracle with clamp-to-edge, scalar arithmetic only.
pub(crate) fn bilinear_oracle(x: &FeatureMap, w: &FlowField) -> Array3<f64> {
    let (ch, h, wd) = x.data().dim();
    let mut out = Array3::<f64>::zeros((ch, h, wd));
    for r in 0..h {
        for c in 0..wd {
            let px = (c as f64 + w.data()[(0, r, c)]).clamp(0.0, (wd - 1) as f64);
            let py = (r as f64 + w.data()[(1, r, c)]).clamp(0.0, (h - 1) as f64);
            let x0 = px.floor() as usize;
            let y0 = py.floor() as usize;
            let x1 = (x0 + 1).min(wd - 1);
            let y1 = (y0 + 1).min(h - 1);
            let (fx, fy) = (px - x0 as f64, py - y0 as f64);
            for k in 0..ch {
                let v = x.data()[(k, y0, x0)] * (1.0 - fx) * (1.0 - fy)
                    + x.data()[(k, y0, x1)] * fx * (1.0 - fy)
                    + x.data()[(k, y1, x0)] * (1.0 - fx) * fy
                    + x.data()[(k, y1, x1)] * fx * fy;
                out[(k, r, c)] = v;
            }
        }
    }
    out
}

fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn correlation_uniform_when_keys_identical() {
    let keys = fm(Array3::zeros((3, 2, 2)));
    let queries = fm(Array3::from_shape_fn((3, 2, 2), |(c, r, w)| {
        (c + r + w) as f64 * 0.1
    }));
    let c = attention_correlation(&keys, &queries, 100.0).unwrap();
    for v in c.data() {
        assert!((v - 0.25).abs() < 1e-12);
    }
}

#[test]
fn correlation_matches_softmax_oracle() {
    let keys = fm(Array3::from_shape_fn((2, 2, 2), |(c, r, w)| {
        0.3 * c as f64 - 0.7 * r as f64 + 0.2 * w as f64
    }));
    let queries = fm(Array3::from_shape_fn((2, 2, 2), |(c, r, w)| {
        -0.4 * c as f64 + 0.5 * r as f64 + 0.9 * w as f64 - 0.3
    }));
    let c = attention_correlation(&keys, &queries, 1.0).unwrap();
    let oracle = softmax_oracle(&keys, &queries, 1.0);
    let diff = c
        .data()
        .iter()
        .zip(oracle.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-6, "max diff {diff}");
}

#[test]
fn correlation_sharp_softmax_peaks_on_diagonal() {
    // Orthonormal per-position features: position i gets basis vector e_i.
    let hw = 4;
    let keys = fm(Array3::from_shape_fn((hw, 2, 2), |(c, r, w)| {
        if c == r * 2 + w {
            1.0
        } else {
            0.0
        }
    }));
    let c = attention_correlation(&keys, &keys, 100.0).unwrap();
    for j in 0..hw {
        let col = c.data().column(j);
        let mx = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(mx > 0.99);
        assert_eq!(col.iter().position(|&v| v == mx).unwrap(), j);
    }
}

#[test]
fn correlation_input_errors() {
    let a = fm(Array3::zeros((3, 2, 2)));
    let b = fm(Array3::zeros((3, 2, 3)));
    assert!(matches!(
        attention_correlation(&a, &b, 1.0),
        Err(Error::Dimension(_))
    ));
    assert!(matches!(
        FeatureMap::new(Array3::from_elem((1, 2, 2), f64::NAN)),
        Err(Error::Validation(_))
    ));
    assert!(matches!(
        attention_correlation(&a, &a, -1.0),
        Err(Error::Validation(_))
    ));
}

#[test]
fn attention_warp_identity_is_exact() {
    let x = fm(Array3::from_shape_fn((3, 2, 2), |(c, r, w)| {
        (c * 7 + r * 3 + w) as f64 * 0.17 - 0.5
    }));
    let c = CorrelationMatrix::identity((2, 2));
    let o = attention_warp(&x, &c).unwrap();
    assert_eq!(o.data(), x.data());
}

#[test]
fn attention_warp_preserves_constants() {
    let x = fm(Array3::from_elem((2, 2, 2), 0.37));
    let c = attention_correlation(
        &fm(Array3::from_shape_fn((2, 2, 2), |(c, r, w)| {
            (c + 2 * r + w) as f64 * 0.3
        })),
        &fm(Array3::from_shape_fn((2, 2, 2), |(c, r, w)| {
            (3 * c + r + 2 * w) as f64 * 0.2
        })),
        2.0,
    )
    .unwrap();
    let o = attention_warp(&x, &c).unwrap();
    for v in o.data() {
        assert!((v - 0.37).abs() < 1e-12);
    }
}

#[test]
fn attention_warp_uniform_takes_mean() {
    let x = fm(Array3::from_shape_fn((1, 2, 2), |(_, r, w)| {
        [1.0, 2.0, 3.0, 4.0][r * 2 + w]
    }));
    let c = CorrelationMatrix::new(Array2::from_elem((4, 4), 0.25), (2, 2)).unwrap();
    let o = attention_warp(&x, &c).unwrap();
    for v in o.data() {
        assert!((v - 2.5).abs() < 1e-12);
    }
}

#[test]
fn attention_warp_resolution_mismatch() {
    let x = fm(Array3::zeros((1, 2, 3)));
    let c = CorrelationMatrix::identity((2, 2));
    assert!(matches!(attention_warp(&x, &c), Err(Error::Dimension(_))));
}

#[test]
fn flow_warp_zero_flow_is_identity() {
    let x = fm(Array3::from_shape_fn((2, 3, 4), |(c, r, w)| {
        (c * 12 + r * 4 + w) as f64
    }));
    let w = FlowField::zeros(3, 4);
    let o = flow_warp(&x, &w, Border::Clamp).unwrap();
    assert_eq!(o.data(), x.data());
}

#[test]
fn flow_warp_integer_offsets_gather() {
    let x = fm(Array3::from_shape_fn((1, 4, 4), |(_, r, w)| (r * 4 + w) as f64));
    // Shift sampling one pixel right and one down everywhere valid.
    let mut wd = Array3::zeros((2, 4, 4));
    for r in 0..3 {
        for c in 0..3 {
            wd[(0, r, c)] = 1.0;
            wd[(1, r, c)] = 1.0;
        }
    }
    let w = FlowField::new(wd).unwrap();
    let o = flow_warp(&x, &w, Border::Clamp).unwrap();
    for r in 0..3 {
        for c in 0..3 {
            assert_eq!(o.data()[(0, r, c)], ((r + 1) * 4 + c + 1) as f64);
        }
    }
}

#[test]
fn flow_warp_half_pixel_ramp_and_oracle() {
    let x = fm(Array3::from_shape_fn((1, 4, 6), |(_, _, c)| c as f64));
    let mut wd = Array3::zeros((2, 4, 6));
    wd.index_axis_mut(ndarray::Axis(0), 0).fill(0.5);
    let w = FlowField::new(wd).unwrap();
    let o = flow_warp(&x, &w, Border::Clamp).unwrap();
    for r in 0..4 {
        for c in 0..5 {
            assert!((o.data()[(0, r, c)] - (c as f64 + 0.5)).abs() < 1e-12);
        }
    }
    let oracle = bilinear_oracle(&x, &w);
    assert!(max_abs_diff(o.data(), &oracle) < 1e-6);
}

#[test]
fn flow_warp_resolution_mismatch() {
    let x = fm(Array3::zeros((1, 4, 4)));
    let w = FlowField::zeros(3, 4);
    assert!(matches!(
        flow_warp(&x, &w, Border::Clamp),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn blend_endpoints_and_mean() {
    let a = fm(Array3::from_elem((2, 2, 2), 2.0));
    let f = fm(Array3::from_elem((2, 2, 2), 4.0));
    let ones = CombinationMap::constant(2, 2, 1.0).unwrap();
    let zeros = CombinationMap::constant(2, 2, 0.0).unwrap();
    let half = CombinationMap::constant(2, 2, 0.5).unwrap();
    assert_eq!(blend(&a, &f, &ones).unwrap().data(), a.data());
    assert_eq!(blend(&a, &f, &zeros).unwrap().data(), f.data());
    for v in blend(&a, &f, &half).unwrap().data() {
        assert!((v - 3.0).abs() < 1e-12);
    }
}

#[test]
fn blend_input_errors() {
    assert!(matches!(
        CombinationMap::new(arr2(&[[1.2]])),
        Err(Error::Validation(_))
    ));
    assert!(matches!(
        CombinationMap::new(arr2(&[[-0.1]])),
        Err(Error::Validation(_))
    ));
    let a = fm(Array3::zeros((1, 2, 2)));
    let f = fm(Array3::zeros((2, 2, 2)));
    let m = CombinationMap::constant(2, 2, 0.5).unwrap();
    assert!(matches!(blend(&a, &f, &m), Err(Error::Dimension(_))));
}

#[test]
fn resize_identity_and_constant() {
    let x = fm(Array3::from_shape_fn((2, 3, 5), |(c, r, w)| {
        (c * 15 + r * 5 + w) as f64 * 0.31
    }));
    assert_eq!(resize(&x, 3, 5).unwrap().data(), x.data());
    let konst = fm(Array3::from_elem((1, 4, 4), 0.77));
    for (h, w) in [(2, 2), (7, 9), (1, 1)] {
        let r = resize(&konst, h, w).unwrap();
        for v in r.data() {
            assert!((v - 0.77).abs() < 1e-12);
        }
    }
    assert!(matches!(resize(&x, 0, 5), Err(Error::Validation(_))));
}

#[test]
fn resize_checkerboard_matches_block_average() {
    let x = fm(Array3::from_shape_fn((1, 4, 4), |(_, r, c)| {
        ((r + c) % 2) as f64
    }));
    let r = resize(&x, 2, 2).unwrap();
    // Independent oracle: average every 2x2 block.
    for br in 0..2 {
        for bc in 0..2 {
            let mut s = 0.0;
            for dr in 0..2 {
                for dc in 0..2 {
                    s += x.data()[(0, 2 * br + dr, 2 * bc + dc)];
                }
            }
            assert!((r.data()[(0, br, bc)] - s / 4.0).abs() < 1e-6);
        }
    }
}

#[test]
fn flow_resample_scales_offsets() {
    let mut d = Array3::zeros((2, 4, 4));
    d.index_axis_mut(ndarray::Axis(0), 0).fill(2.0);
    d.index_axis_mut(ndarray::Axis(0), 1).fill(-1.0);
    let w = FlowField::new(d).unwrap();
    let up = w.resample(8, 8).unwrap();
    for r in 0..8 {
        for c in 0..8 {
            assert!((up.data()[(0, r, c)] - 4.0).abs() < 1e-12);
            assert!((up.data()[(1, r, c)] + 2.0).abs() < 1e-12);
        }
    }
}

#[test]
fn flo_round_trip() {
    let dir = std::env::temp_dir().join(format!("attnflow-flo-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("t.flo");
    let d = Array3::from_shape_fn((2, 3, 5), |(k, r, c)| {
        (k as f64 - 0.5) * 3.25 + r as f64 * 0.5 - c as f64 * 1.25
    });
    let w = FlowField::new(d).unwrap();
    write_flo(&path, &w).unwrap();
    let back = read_flo(&path).unwrap();
    // Values chosen exactly representable in f32.
    assert_eq!(back.data(), w.data());
    std::fs::remove_dir_all(&dir).unwrap();
}
