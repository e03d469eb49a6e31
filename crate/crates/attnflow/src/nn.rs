//! Parameter storage, layer building blocks, and deterministic initialization.
//!
//! Parameters live in a [`ParamSet`] keyed by dotted names (`"g.dec.c1.w"`).
//! Each training step binds the current values into a fresh graph as leaves
//! (see [`Binding`]), runs forward/backward, and reads gradients back by name.
//! Initialization derives every tensor's RNG stream from the master seed and
//! the tensor name, so construction order never changes the init.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, HashMap};

/// Named collection of parameter tensors with a version tag.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    version: String,
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl ParamSet {
    pub fn new(version: impl Into<String>) -> Self {
        ParamSet {
            version: version.into(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f64>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::validation(format!("duplicate parameter name {name}")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.tensors.get_mut(name)
    }

    /// Iterate name/tensor pairs in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Names starting with `prefix`, in order.
    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|n| n.starts_with(prefix))
            .cloned()
            .collect()
    }
}

// ---- checkpoint container ---------------------------------------------------
//
// Named-tensor archive: magic "NTAR", u32 format version, u64 manifest
// length, a JSON manifest (version tag, free-form metadata, and per-tensor
// name/dtype/shape/offset entries sorted by name), then the raw
// little-endian f64 payload. Byte-stable: identical contents serialize to
// identical files.

const NTAR_MAGIC: &[u8; 4] = b"NTAR";
const NTAR_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Manifest {
    version_tag: String,
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

/// Serialize a parameter set (plus free-form metadata) to a checkpoint file.
pub fn save_params_with_meta(
    path: impl AsRef<std::path::Path>,
    params: &ParamSet,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    use byteorder::{LittleEndian, WriteBytesExt};
    use std::io::Write;
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            dtype: "f64".to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len() as u64,
        });
        offset += t.len() as u64;
    }
    let manifest = Manifest {
        version_tag: params.version().to_string(),
        meta: meta.clone(),
        tensors,
    };
    let mjson = serde_json::to_vec(&manifest)
        .map_err(|e| Error::validation(format!("manifest: {e}")))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    f.write_all(NTAR_MAGIC)?;
    f.write_u32::<LittleEndian>(NTAR_VERSION)?;
    f.write_u64::<LittleEndian>(mjson.len() as u64)?;
    f.write_all(&mjson)?;
    for (_, t) in params.iter() {
        let slice = t.as_slice().expect("parameter tensors are contiguous");
        for &v in slice {
            f.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn save_params(path: impl AsRef<std::path::Path>, params: &ParamSet) -> Result<()> {
    save_params_with_meta(path, params, &BTreeMap::new())
}

/// Read a checkpoint file back into a parameter set plus its metadata.
pub fn load_params_with_meta(
    path: impl AsRef<std::path::Path>,
) -> Result<(ParamSet, BTreeMap<String, String>)> {
    use byteorder::{LittleEndian, ReadBytesExt};
    use std::io::Read;
    let mut f = std::io::BufReader::new(std::fs::File::open(path.as_ref())?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != NTAR_MAGIC {
        return Err(Error::parse("bad checkpoint magic"));
    }
    let version = f.read_u32::<LittleEndian>()?;
    if version != NTAR_VERSION {
        return Err(Error::parse(format!("unsupported checkpoint version {version}")));
    }
    let mlen = f.read_u64::<LittleEndian>()? as usize;
    let mut mjson = vec![0u8; mlen];
    f.read_exact(&mut mjson)?;
    let manifest: Manifest = serde_json::from_slice(&mjson)
        .map_err(|e| Error::parse(format!("manifest: {e}")))?;
    let mut params = ParamSet::new(manifest.version_tag.clone());
    let mut cursor = 0u64;
    for e in &manifest.tensors {
        if e.dtype != "f64" {
            return Err(Error::parse(format!("tensor {}: unsupported dtype {}", e.name, e.dtype)));
        }
        if e.offset != cursor {
            return Err(Error::parse(format!("tensor {}: bad offset", e.name)));
        }
        let expect: usize = e.shape.iter().product();
        if expect != e.len as usize {
            return Err(Error::parse(format!("tensor {}: shape/len mismatch", e.name)));
        }
        let mut data = vec![0.0f64; e.len as usize];
        for v in data.iter_mut() {
            *v = f.read_f64::<LittleEndian>()?;
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), data)
            .map_err(|err| Error::parse(format!("tensor {}: {err}", e.name)))?;
        params.insert(e.name.clone(), arr)?;
        cursor += e.len;
    }
    Ok((params, manifest.meta))
}

pub fn load_params(path: impl AsRef<std::path::Path>) -> Result<ParamSet> {
    load_params_with_meta(path).map(|(p, _)| p)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// ChaCha stream for one named tensor under a master seed.
pub fn tensor_rng(master_seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(master_seed ^ fnv1a(name))
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Fan-in-scaled normal init: `std = gain * sqrt(2 / fan_in)`.
pub fn he_normal(shape: &[usize], fan_in: usize, gain: f64, master_seed: u64, name: &str) -> ArrayD<f64> {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let mut rng = tensor_rng(master_seed, name);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || sample_normal(&mut rng) * std)
}

/// Map from parameter names to graph leaves for one forward/backward pass.
pub struct Binding {
    vars: HashMap<String, Var>,
}

impl Binding {
    /// Bind every tensor whose name starts with one of `prefixes`
    /// (all tensors when `prefixes` is empty).
    pub fn bind(g: &mut Graph, params: &ParamSet, prefixes: &[&str], trainable: bool) -> Binding {
        let mut vars = HashMap::new();
        for (name, tensor) in params.iter() {
            if prefixes.is_empty() || prefixes.iter().any(|p| name.starts_with(p)) {
                let v = g.leaf(tensor.clone(), trainable);
                vars.insert(name.clone(), v);
            }
        }
        Binding { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Activation applied after a layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Act {
    None,
    Relu,
    /// Leaky ReLU with the given negative slope.
    Leaky(f64),
    Sigmoid,
    Tanh,
}

pub fn activate(g: &mut Graph, x: Var, act: Act) -> Var {
    match act {
        Act::None => x,
        Act::Relu => g.relu(x),
        Act::Leaky(s) => g.leaky_relu(x, s),
        Act::Sigmoid => g.sigmoid(x),
        Act::Tanh => g.tanh(x),
    }
}

/// 2-D convolution layer with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Conv2d {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
        }
    }

    fn wname(&self) -> String {
        format!("{}.w", self.name)
    }
    fn bname(&self) -> String {
        format!("{}.b", self.name)
    }

    /// Register weight and bias. `gain = 0` zero-initializes the weight
    /// (used for flow heads so the initial flow is exactly zero).
    pub fn init(&self, ps: &mut ParamSet, seed: u64, gain: f64) -> Result<()> {
        let fan_in = self.cin * self.k * self.k;
        let w = if gain == 0.0 {
            ArrayD::zeros(IxDyn(&[self.cout, self.cin, self.k, self.k]))
        } else {
            he_normal(
                &[self.cout, self.cin, self.k, self.k],
                fan_in,
                gain,
                seed,
                &self.wname(),
            )
        };
        ps.insert(self.wname(), w)?;
        ps.insert(self.bname(), ArrayD::zeros(IxDyn(&[self.cout])))?;
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Var {
        let y = g.conv2d(x, b.var(&self.wname()), self.stride, self.pad);
        g.add_channels(y, b.var(&self.bname()))
    }
}

/// Instance normalization with learned per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
}

impl InstanceNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        InstanceNorm {
            name: name.into(),
            channels,
            eps: 1e-5,
        }
    }

    fn gname(&self) -> String {
        format!("{}.g", self.name)
    }
    fn bname(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init(&self, ps: &mut ParamSet) -> Result<()> {
        ps.insert(self.gname(), ArrayD::from_elem(IxDyn(&[self.channels]), 1.0))?;
        ps.insert(self.bname(), ArrayD::zeros(IxDyn(&[self.channels])))?;
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Var {
        let y = g.instance_norm(x, self.eps);
        let y = g.mul_channels(y, b.var(&self.gname()));
        g.add_channels(y, b.var(&self.bname()))
    }
}

/// Conv -> norm -> act -> conv -> norm residual block.
#[derive(Debug, Clone)]
pub struct ResBlock {
    c1: Conv2d,
    n1: InstanceNorm,
    c2: Conv2d,
    n2: InstanceNorm,
    act: Act,
}

impl ResBlock {
    pub fn new(name: &str, channels: usize, act: Act) -> Self {
        ResBlock {
            c1: Conv2d::new(format!("{name}.c1"), channels, channels, 3, 1),
            n1: InstanceNorm::new(format!("{name}.n1"), channels),
            c2: Conv2d::new(format!("{name}.c2"), channels, channels, 3, 1),
            n2: InstanceNorm::new(format!("{name}.n2"), channels),
            act,
        }
    }

    pub fn init(&self, ps: &mut ParamSet, seed: u64) -> Result<()> {
        self.c1.init(ps, seed, 1.0)?;
        self.n1.init(ps)?;
        self.c2.init(ps, seed, 1.0)?;
        self.n2.init(ps)?;
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Var {
        let h = self.c1.forward(g, b, x);
        let h = self.n1.forward(g, b, h);
        let h = activate(g, h, self.act);
        let h = self.c2.forward(g, b, h);
        let h = self.n2.forward(g, b, h);
        g.add(x, h)
    }
}

/// Strided convolutional pyramid with projection taps at requested
/// resolutions. Downsampling halves the resolution per stage and doubles the
/// width (capped at four times the base width).
#[derive(Debug, Clone)]
pub struct PyramidEncoder {
    stem: Conv2d,
    downs: Vec<(Conv2d, InstanceNorm)>,
    taps: Vec<(usize, Conv2d)>,
    full_res: usize,
}

impl PyramidEncoder {
    /// `taps` lists `(resolution, out_channels)` pairs; every tap resolution
    /// must be reachable by halving `full_res`.
    pub fn new(
        name: &str,
        in_ch: usize,
        base_width: usize,
        full_res: usize,
        taps: &[(usize, usize)],
    ) -> Self {
        let min_res = taps.iter().map(|&(r, _)| r).min().expect("at least one tap");
        assert!(full_res % min_res == 0 && (full_res / min_res).is_power_of_two());
        let stem = Conv2d::new(format!("{name}.stem"), in_ch, base_width, 3, 1);
        let mut downs = Vec::new();
        let mut res = full_res;
        let mut width = base_width;
        let mut level = 0;
        while res > min_res {
            let next_width = (width * 2).min(base_width * 4);
            downs.push((
                Conv2d::new(format!("{name}.d{level}"), width, next_width, 3, 2),
                InstanceNorm::new(format!("{name}.d{level}n"), next_width),
            ));
            width = next_width;
            res /= 2;
            level += 1;
        }
        // Width of the feature map at a given resolution.
        let width_at = |r: usize| -> usize {
            let mut res = full_res;
            let mut w = base_width;
            while res > r {
                w = (w * 2).min(base_width * 4);
                res /= 2;
            }
            w
        };
        let taps = taps
            .iter()
            .map(|&(r, out_ch)| {
                (
                    r,
                    Conv2d::new(format!("{name}.tap{r}"), width_at(r), out_ch, 3, 1),
                )
            })
            .collect();
        PyramidEncoder {
            stem,
            downs,
            taps,
            full_res,
        }
    }

    pub fn init(&self, ps: &mut ParamSet, seed: u64, tap_gain: f64) -> Result<()> {
        self.stem.init(ps, seed, 1.0)?;
        for (c, n) in &self.downs {
            c.init(ps, seed, 1.0)?;
            n.init(ps)?;
        }
        for (_, c) in &self.taps {
            c.init(ps, seed, tap_gain)?;
        }
        Ok(())
    }

    /// Run the pyramid; returns tap outputs in the order taps were declared.
    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Vec<Var> {
        let mut h = self.stem.forward(g, b, x);
        h = g.leaky_relu(h, 0.2);
        let mut res = self.full_res;
        let mut feats: Vec<(usize, Var)> = vec![(res, h)];
        for (c, n) in &self.downs {
            let mut y = c.forward(g, b, h);
            y = n.forward(g, b, y);
            y = g.leaky_relu(y, 0.2);
            res /= 2;
            feats.push((res, y));
            h = y;
        }
        self.taps
            .iter()
            .map(|(r, conv)| {
                let (_, f) = feats
                    .iter()
                    .find(|(fr, _)| fr == r)
                    .expect("tap resolution not reached");
                conv.forward(g, b, *f)
            })
            .collect()
    }
}

/// Bilinear 2x upsample followed by conv, norm, and activation.
#[derive(Debug, Clone)]
pub struct UpBlock {
    conv: Conv2d,
    norm: InstanceNorm,
    act: Act,
}

impl UpBlock {
    pub fn new(name: &str, cin: usize, cout: usize, act: Act) -> Self {
        UpBlock {
            conv: Conv2d::new(format!("{name}.c"), cin, cout, 3, 1),
            norm: InstanceNorm::new(format!("{name}.n"), cout),
            act,
        }
    }

    pub fn init(&self, ps: &mut ParamSet, seed: u64) -> Result<()> {
        self.conv.init(ps, seed, 1.0)?;
        self.norm.init(ps)
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Var {
        let shape = g.value(x).shape().to_vec();
        let up = g.resize(x, shape[2] * 2, shape[3] * 2);
        let y = self.conv.forward(g, b, up);
        let y = self.norm.forward(g, b, y);
        activate(g, y, self.act)
    }
}

/// Architecture hyperparameters shared by the deformation and synthesis nets.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Full training resolution (square images).
    pub resolution: usize,
    /// Warp-scale resolutions, ascending (e.g. `[32, 64]`).
    pub scales: Vec<usize>,
    /// Key/query channels per scale, aligned with `scales`.
    pub key_channels: Vec<usize>,
    /// Reference feature channels per scale, aligned with `scales`.
    pub feat_channels: Vec<usize>,
    /// Base width of the key/query encoders.
    pub enc_width: usize,
    /// Base width of the flow estimator.
    pub flow_width: usize,
    /// Width of the combination map generator's residual blocks.
    pub m_width: usize,
    /// Base width of the discriminator.
    pub disc_width: usize,
    /// Channels of the four fixed feature-extractor taps (full, 1/2, 1/4, 1/8).
    pub fx_channels: Vec<usize>,
    /// Softmax sharpness for the attention correlation.
    pub alpha: f64,
    /// Number of keypoint channels plus the limb channel.
    pub skeleton_channels: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: 64x64 images, warps at 16 and 32.
    pub fn desk() -> Self {
        ModelConfig {
            resolution: 64,
            scales: vec![16, 32],
            key_channels: vec![48, 24],
            feat_channels: vec![48, 24],
            enc_width: 16,
            flow_width: 24,
            m_width: 16,
            disc_width: 24,
            fx_channels: vec![12, 24, 36, 48],
            alpha: 100.0,
            skeleton_channels: 19,
        }
    }

    /// Full-scale preset: 256x256 images, warps at 32 and 64. Not intended
    /// for CPU training runs; kept for shape-contract parity.
    pub fn paper() -> Self {
        ModelConfig {
            resolution: 256,
            scales: vec![32, 64],
            key_channels: vec![128, 64],
            feat_channels: vec![128, 64],
            enc_width: 32,
            flow_width: 48,
            m_width: 32,
            disc_width: 64,
            fx_channels: vec![32, 64, 128, 128],
            alpha: 100.0,
            skeleton_channels: 19,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::config("at least one warp scale is required"));
        }
        let mut prev = 0;
        for &s in &self.scales {
            if s <= prev {
                return Err(Error::config("scales must be strictly ascending"));
            }
            if self.resolution % s != 0 {
                return Err(Error::config(format!(
                    "scale {s} must divide the resolution {}",
                    self.resolution
                )));
            }
            if !(s as usize).is_power_of_two() || !self.resolution.is_power_of_two() {
                return Err(Error::config("resolution and scales must be powers of two"));
            }
            prev = s;
        }
        if self.key_channels.len() != self.scales.len()
            || self.feat_channels.len() != self.scales.len()
        {
            return Err(Error::config(
                "key_channels and feat_channels must align with scales",
            ));
        }
        if self.fx_channels.len() != 4 {
            return Err(Error::config("the feature extractor has four tap levels"));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::config("alpha must be positive"));
        }
        Ok(())
    }

    /// Index of `scale` within `scales`.
    pub fn scale_index(&self, scale: usize) -> Result<usize> {
        self.scales
            .iter()
            .position(|&s| s == scale)
            .ok_or_else(|| Error::validation(format!("scale {scale} not configured")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent_and_deterministic() {
        let c1 = Conv2d::new("a.c", 3, 8, 3, 1);
        let c2 = Conv2d::new("b.c", 3, 8, 3, 1);
        let mut p1 = ParamSet::new("v1");
        c1.init(&mut p1, 42, 1.0).unwrap();
        c2.init(&mut p1, 42, 1.0).unwrap();
        let mut p2 = ParamSet::new("v1");
        c2.init(&mut p2, 42, 1.0).unwrap();
        c1.init(&mut p2, 42, 1.0).unwrap();
        assert_eq!(p1, p2);
        assert!(p1.all_finite());
        assert_ne!(p1.get("a.c.w").unwrap(), p1.get("b.c.w").unwrap());
    }

    #[test]
    fn duplicate_name_rejected() {
        let c = Conv2d::new("x", 1, 1, 3, 1);
        let mut ps = ParamSet::new("v1");
        c.init(&mut ps, 1, 1.0).unwrap();
        assert!(c.init(&mut ps, 1, 1.0).is_err());
    }

    #[test]
    fn model_configs_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::paper().validate().unwrap();
        let mut bad = ModelConfig::desk();
        bad.scales = vec![32, 16];
        assert!(bad.validate().is_err());
    }
}
