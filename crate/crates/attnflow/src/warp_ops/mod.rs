//! Pure, differentiable spatial-transformation kernels and their domain types.
//!
//! All operations here are stateless functions of their inputs: correlation
//! softmax, attention warping, bilinear flow warping, convex blending, and
//! bilinear resizing. The same kernels back the training graph, so the typed
//! single-sample API below and the batched graph path produce bitwise
//! identical values for identical inputs.
//!
//! Coordinate conventions (used consistently by every oracle and kernel):
//! pixel centers sit at integer coordinates with the origin at the top-left;
//! a flow field stores per-pixel offsets in pixels of its own resolution,
//! channel 0 horizontal and channel 1 vertical, and the output at `(r, c)`
//! samples the source at `(r + v, c + u)`. Resizing uses the half-pixel
//! mapping `src = (dst + 0.5) * ratio - 0.5` with clamp-to-edge, so resizing
//! to the same size is the identity and an exact 2x downsize averages 2x2
//! blocks. When a flow is resampled to another resolution, its offset values
//! must be rescaled proportionally (see [`FlowField::resample`]).

mod flo;

pub use flo::{read_flo, write_flo};

use crate::autodiff::{Border, Graph};
use crate::error::{Error, Result};
use ndarray::{Array2, Array3, Array4, Axis};

/// Column-sum tolerance accepted when validating a correlation matrix.
pub const COLUMN_SUM_TOL: f64 = 1e-5;

fn all_finite<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// A `(C, H, W)` tensor of neural activations or image channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Array3<f64>,
}

impl FeatureMap {
    /// Wrap a `(C, H, W)` tensor. All entries must be finite and `H, W >= 1`.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c < 1 || h < 1 || w < 1 {
            return Err(Error::validation(format!(
                "feature map axes must be >= 1, got ({c}, {h}, {w})"
            )));
        }
        if !all_finite(&data) {
            return Err(Error::validation("feature map contains non-finite entries"));
        }
        Ok(FeatureMap { data })
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }
    pub fn height(&self) -> usize {
        self.data.dim().1
    }
    pub fn width(&self) -> usize {
        self.data.dim().2
    }
    pub fn resolution(&self) -> (usize, usize) {
        (self.height(), self.width())
    }
    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }
    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// View as a batch-1 `(1, C, H, W)` tensor for the graph kernels.
    pub(crate) fn batched(&self) -> Array4<f64> {
        self.data.clone().insert_axis(Axis(0))
    }
}

/// Dense `(HW) x (HW)` attention correlation matrix, indexed
/// `[source position, target position]`; every target column is a probability
/// distribution over source positions.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    data: Array2<f64>,
    resolution: (usize, usize),
}

impl CorrelationMatrix {
    /// Validate non-negativity and column stochasticity (within
    /// [`COLUMN_SUM_TOL`]) and wrap.
    pub fn new(data: Array2<f64>, resolution: (usize, usize)) -> Result<Self> {
        let hw = resolution.0 * resolution.1;
        if data.dim() != (hw, hw) {
            return Err(Error::dimension(format!(
                "correlation matrix shape {:?} does not match resolution {:?}",
                data.dim(),
                resolution
            )));
        }
        if !all_finite(&data) || data.iter().any(|&v| v < 0.0) {
            return Err(Error::validation(
                "correlation entries must be finite and non-negative",
            ));
        }
        for (j, col) in data.axis_iter(Axis(1)).enumerate() {
            let s = col.sum();
            if (s - 1.0).abs() > COLUMN_SUM_TOL {
                return Err(Error::validation(format!(
                    "correlation column {j} sums to {s}, expected 1"
                )));
            }
        }
        Ok(CorrelationMatrix { data, resolution })
    }

    /// The identity correspondence: one-hot columns with source == target.
    pub fn identity(resolution: (usize, usize)) -> Self {
        let hw = resolution.0 * resolution.1;
        CorrelationMatrix {
            data: Array2::eye(hw),
            resolution,
        }
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }
    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    /// For each target position, the source position with maximum weight.
    pub fn argmax_sources(&self) -> Vec<usize> {
        let hw = self.data.dim().1;
        (0..hw)
            .map(|j| {
                let col = self.data.column(j);
                let mut best = 0;
                let mut bv = f64::NEG_INFINITY;
                for (i, &v) in col.iter().enumerate() {
                    if v > bv {
                        bv = v;
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

/// A `(2, H, W)` field of sampling offsets in pixels of its own resolution;
/// channel 0 is the horizontal offset, channel 1 the vertical offset.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    data: Array3<f64>,
}

impl FlowField {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim().0 != 2 {
            return Err(Error::dimension(format!(
                "flow field needs 2 channels, got {}",
                data.dim().0
            )));
        }
        if !all_finite(&data) {
            return Err(Error::validation("flow field contains non-finite entries"));
        }
        Ok(FlowField { data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            data: Array3::zeros((2, h, w)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }
    pub fn width(&self) -> usize {
        self.data.dim().2
    }
    pub fn resolution(&self) -> (usize, usize) {
        (self.height(), self.width())
    }
    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }
    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// Resample to another resolution, rescaling offsets proportionally
    /// (horizontal by `W'/W`, vertical by `H'/H`).
    pub fn resample(&self, h: usize, w: usize) -> Result<FlowField> {
        if h < 1 || w < 1 {
            return Err(Error::validation("flow resample target must be >= 1"));
        }
        let (sh, sw) = self.resolution();
        let mut g = Graph::new();
        let v = g.constant(self.data.clone().insert_axis(Axis(0)).into_dyn());
        let r = g.resize(v, h, w);
        let r = g.scale_channels(r, vec![w as f64 / sw as f64, h as f64 / sh as f64]);
        let out = g
            .value(r)
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .index_axis_move(Axis(0), 0);
        Ok(FlowField { data: out })
    }
}

/// A `(H, W)` per-pixel gate with entries in `[0, 1]` selecting between the
/// attention-warped branch (1) and the flow-warped branch (0).
#[derive(Debug, Clone, PartialEq)]
pub struct CombinationMap {
    data: Array2<f64>,
}

impl CombinationMap {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if !data.iter().all(|&v| v.is_finite() && (0.0..=1.0).contains(&v)) {
            return Err(Error::validation(
                "combination map entries must lie in [0, 1]",
            ));
        }
        Ok(CombinationMap { data })
    }

    pub fn constant(h: usize, w: usize, value: f64) -> Result<Self> {
        CombinationMap::new(Array2::from_elem((h, w), value))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }
    pub fn width(&self) -> usize {
        self.data.dim().1
    }
    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }
}

// ---- operations -----------------------------------------------------------------

/// Softmax-normalized correlation of every key against every query:
/// `C[i, j] = exp(alpha * <k_i, q_j>) / sum_i' exp(alpha * <k_i', q_j>)`,
/// computed with per-column max subtraction.
pub fn attention_correlation(
    keys: &FeatureMap,
    queries: &FeatureMap,
    alpha: f64,
) -> Result<CorrelationMatrix> {
    if keys.data.dim() != queries.data.dim() {
        return Err(Error::dimension(format!(
            "keys {:?} and queries {:?} must share shape",
            keys.data.dim(),
            queries.data.dim()
        )));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::validation("alpha must be a positive real"));
    }
    let (c, h, w) = keys.data.dim();
    let hw = h * w;
    let mut g = Graph::new();
    let k = g.constant(keys.batched().into_shape_with_order((1, c, hw)).unwrap().into_dyn());
    let q = g.constant(
        queries
            .batched()
            .into_shape_with_order((1, c, hw))
            .unwrap()
            .into_dyn(),
    );
    let beta = g.matmul_b(k, q, true, false);
    let cmat = g.softmax_cols(beta, alpha);
    let data = g
        .value(cmat)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .index_axis_move(Axis(0), 0);
    CorrelationMatrix::new(data, (h, w))
}

/// Attention warp: `o_j = sum_i C[i, j] * x_i` over flattened spatial positions.
pub fn attention_warp(x: &FeatureMap, c: &CorrelationMatrix) -> Result<FeatureMap> {
    if x.resolution() != c.resolution() {
        return Err(Error::dimension(format!(
            "input resolution {:?} does not match correlation resolution {:?}",
            x.resolution(),
            c.resolution()
        )));
    }
    let (ch, h, w) = x.data.dim();
    let hw = h * w;
    let mut g = Graph::new();
    let xv = g.constant(x.batched().into_shape_with_order((1, ch, hw)).unwrap().into_dyn());
    let cv = g.constant(c.data.clone().insert_axis(Axis(0)).into_dyn());
    let o = g.matmul_b(xv, cv, false, false);
    let data = g
        .value(o)
        .clone()
        .into_shape_with_order((ch, h, w))
        .unwrap();
    FeatureMap::new(data)
}

/// Bilinear flow warp; the output at `(r, c)` samples `x` at
/// `(r + w_vertical, c + w_horizontal)` with the given border handling.
pub fn flow_warp(x: &FeatureMap, w: &FlowField, border: Border) -> Result<FeatureMap> {
    if x.resolution() != w.resolution() {
        return Err(Error::dimension(format!(
            "input resolution {:?} does not match flow resolution {:?}",
            x.resolution(),
            w.resolution()
        )));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.batched().into_dyn());
    let wv = g.constant(w.data.clone().insert_axis(Axis(0)).into_dyn());
    let o = g.flow_warp(xv, wv, border);
    let data = g
        .value(o)
        .clone()
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap()
        .index_axis_move(Axis(0), 0);
    FeatureMap::new(data)
}

/// Pointwise convex combination `m (x) a + (1 - m) (x) f`, with the map
/// broadcast over channels.
pub fn blend(a: &FeatureMap, f: &FeatureMap, m: &CombinationMap) -> Result<FeatureMap> {
    if a.data.dim() != f.data.dim() {
        return Err(Error::dimension(format!(
            "blend branches differ: {:?} vs {:?}",
            a.data.dim(),
            f.data.dim()
        )));
    }
    if (m.height(), m.width()) != a.resolution() {
        return Err(Error::dimension(format!(
            "combination map {:?} does not match branch resolution {:?}",
            (m.height(), m.width()),
            a.resolution()
        )));
    }
    let mut g = Graph::new();
    let av = g.constant(a.batched().into_dyn());
    let fv = g.constant(f.batched().into_dyn());
    let mv = g.constant(
        m.data
            .clone()
            .insert_axis(Axis(0))
            .insert_axis(Axis(0))
            .into_dyn(),
    );
    let o = g.blend(av, fv, mv);
    let data = g
        .value(o)
        .clone()
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap()
        .index_axis_move(Axis(0), 0);
    FeatureMap::new(data)
}

/// Bilinear resample to `(h, w)` under the module's half-pixel convention.
pub fn resize(x: &FeatureMap, h: usize, w: usize) -> Result<FeatureMap> {
    if h < 1 || w < 1 {
        return Err(Error::validation(format!(
            "resize target must be positive, got ({h}, {w})"
        )));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.batched().into_dyn());
    let o = g.resize(xv, h, w);
    let data = g
        .value(o)
        .clone()
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap()
        .index_axis_move(Axis(0), 0);
    FeatureMap::new(data)
}

#[cfg(test)]
mod tests;
