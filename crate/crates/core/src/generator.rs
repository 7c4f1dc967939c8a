//! Generator backend contract and the seeded reference trunk/branch network.
//!
//! A backend maps `(z, e)` through a stack of trunk layers whose activations
//! can be tapped, then through three modality branches (shape, normal,
//! texture) that each emit one UV map.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{ExpressionVector, IntermediateCode, LatentCode, LayerId};
use crate::maps::{Image, UvMapSet};

/// Number of expression slots appended to `z` at the generator input.
pub const EXPRESSION_DIM: usize = 7;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: LayerId,
    pub width: usize,
}

impl LayerSpec {
    pub fn new(name: &str, width: usize) -> Self {
        Self {
            name: LayerId::from(name),
            width,
        }
    }
}

/// Contract every generator adapter fulfils.
///
/// Backends are immutable once built; all methods take `&self` and may be
/// called from several threads.
pub trait GeneratorBackend: Send + Sync {
    fn latent_dim(&self) -> usize;

    /// Tappable trunk layers in forward order.
    fn layers(&self) -> &[LayerSpec];

    /// UV map resolution as `(height, width)`.
    fn uv_resolution(&self) -> (usize, usize);

    /// Standard deviation used when sampling `z` for this backend.
    fn latent_sigma(&self) -> f64 {
        1.0
    }

    /// Runs the trunk up to and including `tap`.
    fn partial_forward(
        &self,
        z: &LatentCode,
        e: &ExpressionVector,
        tap: &LayerId,
    ) -> Result<IntermediateCode>;

    /// Resumes the forward pass from a tapped activation.
    fn forward_from_intermediate(&self, c: &IntermediateCode) -> Result<UvMapSet>;

    /// Vector-Jacobian product of [`forward_from_intermediate`](Self::forward_from_intermediate):
    /// pulls a gradient on the three maps back to the tapped activation.
    fn backward_from_intermediate(&self, c: &IntermediateCode, grad: &UvMapSet) -> Result<Vec<f64>>;

    /// Vector-Jacobian product of [`partial_forward`](Self::partial_forward)
    /// with respect to `z` and `e`.
    fn backward_partial(
        &self,
        z: &LatentCode,
        e: &ExpressionVector,
        tap: &LayerId,
        grad_c: &[f64],
    ) -> Result<(Vec<f64>, [f64; EXPRESSION_DIM])>;

    /// Full forward pass `(z, e) -> maps`.
    fn forward(&self, z: &LatentCode, e: &ExpressionVector) -> Result<UvMapSet>;

    fn layer_width(&self, tap: &LayerId) -> Result<usize> {
        self.layers()
            .iter()
            .find(|l| &l.name == tap)
            .map(|l| l.width)
            .ok_or_else(|| Error::invalid(format!("generator has no layer named {tap}")))
    }

    fn default_tap(&self) -> LayerId {
        self.layers()[0].name.clone()
    }
}

/// Validating front door for [`GeneratorBackend::partial_forward`].
pub fn partial_forward(
    gen: &dyn GeneratorBackend,
    z: &LatentCode,
    e: &ExpressionVector,
    tap: &LayerId,
) -> Result<IntermediateCode> {
    if z.dim() != gen.latent_dim() {
        return Err(Error::invalid(format!(
            "latent has dimension {} but generator expects {}",
            z.dim(),
            gen.latent_dim()
        )));
    }
    gen.layer_width(tap)?;
    gen.partial_forward(z, e, tap)
}

/// Validating front door for [`GeneratorBackend::forward_from_intermediate`].
pub fn forward_from_intermediate(gen: &dyn GeneratorBackend, c: &IntermediateCode) -> Result<UvMapSet> {
    check_code(gen, c)?;
    gen.forward_from_intermediate(c)
}

pub(crate) fn check_code(gen: &dyn GeneratorBackend, c: &IntermediateCode) -> Result<()> {
    let width = gen.layer_width(&c.tap_layer)?;
    if width != c.dim() {
        return Err(Error::invalid(format!(
            "layer {} has width {} but code has {} values",
            c.tap_layer,
            width,
            c.dim()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    /// No nonlinearity: the whole generator becomes affine in `z` and `c`.
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Dense {
    inputs: usize,
    // row-major outputs x inputs
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    fn random(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize, gain: f64) -> Self {
        let scale = gain / (inputs as f64).sqrt();
        let weight = (0..inputs * outputs)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let bias = (0..outputs)
            .map(|_| 0.1 * gain * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            inputs,
            weight,
            bias,
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Accumulates `W^T g` into `out`.
    fn backward_into(&self, grad_out: &[f64], out: &mut [f64]) {
        for (row, g) in self.weight.chunks_exact(self.inputs).zip(grad_out) {
            if *g == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += g * w;
            }
        }
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Configuration of the reference generator. Doubles as its manifest body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceGeneratorConfig {
    pub latent_dim: usize,
    pub layers: Vec<LayerSpec>,
    /// `(height, width)` of the emitted maps.
    pub uv_resolution: (usize, usize),
    pub activation: Activation,
    pub seed: u64,
    pub sigma: f64,
}

impl Default for ReferenceGeneratorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            layers: vec![LayerSpec::new("dense", 64), LayerSpec::new("block", 32)],
            uv_resolution: (16, 16),
            activation: Activation::Tanh,
            seed: 0x7b6a_11,
            sigma: 1.0,
        }
    }
}

impl ReferenceGeneratorConfig {
    pub fn linear() -> Self {
        Self {
            activation: Activation::Identity,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent_dim must be positive"));
        }
        if self.layers.is_empty() {
            return Err(Error::invalid("generator needs at least one trunk layer"));
        }
        if self.layers.iter().any(|l| l.width == 0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if self.layers[..i].iter().any(|p| p.name == l.name) {
                return Err(Error::invalid(format!("duplicate layer name {}", l.name)));
            }
        }
        let (h, w) = self.uv_resolution;
        if h < 2 || w < 2 {
            return Err(Error::invalid("uv resolution must be at least 2x2"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("sigma must be positive"));
        }
        Ok(())
    }
}

// Output gains of the shape, normal and texture branches.
const BRANCH_GAINS: [f64; 3] = [0.08, 0.25, 0.12];

/// Seeded synthetic generator: dense trunk layers followed by three
/// independent dense branches added onto a cylindrical face template.
#[derive(Debug, Clone)]
pub struct ReferenceGenerator {
    config: ReferenceGeneratorConfig,
    trunk: Vec<Dense>,
    branches: [Dense; 3],
    template: UvMapSet,
}

impl ReferenceGenerator {
    pub fn new(config: ReferenceGeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut inputs = config.latent_dim + EXPRESSION_DIM;
        let mut trunk = Vec::with_capacity(config.layers.len());
        for layer in &config.layers {
            trunk.push(Dense::random(&mut rng, inputs, layer.width, 1.0));
            inputs = layer.width;
        }
        let (h, w) = config.uv_resolution;
        let out = h * w * 3;
        let branches = BRANCH_GAINS.map(|gain| Dense::random(&mut rng, inputs, out, gain));
        let template = cylinder_template(h, w);
        Ok(Self {
            config,
            trunk,
            branches,
            template,
        })
    }

    pub fn config(&self) -> &ReferenceGeneratorConfig {
        &self.config
    }

    fn layer_index(&self, tap: &LayerId) -> Result<usize> {
        self.config
            .layers
            .iter()
            .position(|l| &l.name == tap)
            .ok_or_else(|| Error::invalid(format!("generator has no layer named {tap}")))
    }

    fn input_vector(&self, z: &LatentCode, e: &ExpressionVector) -> Result<Vec<f64>> {
        if z.dim() != self.config.latent_dim {
            return Err(Error::invalid(format!(
                "latent has dimension {} but generator expects {}",
                z.dim(),
                self.config.latent_dim
            )));
        }
        let mut x = z.values.clone();
        x.extend_from_slice(e.weights());
        Ok(x)
    }

    fn layer_forward(&self, index: usize, x: &[f64]) -> Vec<f64> {
        let act = self.config.activation;
        let mut h = self.trunk[index].forward(x);
        h.iter_mut().for_each(|v| *v = act.apply(*v));
        h
    }

    fn branches_forward(&self, h: &[f64]) -> UvMapSet {
        let (height, width) = self.config.uv_resolution;
        let mut maps = self.template.clone();
        for (branch, map) in self
            .branches
            .iter()
            .zip([&mut maps.shape, &mut maps.normal, &mut maps.texture])
        {
            for (m, o) in map.data.iter_mut().zip(branch.forward(h)) {
                *m += o;
            }
            debug_assert_eq!((map.height, map.width), (height, width));
        }
        maps
    }

    /// Flat parameter vector in trunk-then-branch order, weights before biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for d in self.trunk.iter().chain(&self.branches) {
            out.extend_from_slice(&d.weight);
            out.extend_from_slice(&d.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.trunk.iter().chain(&self.branches).map(Dense::param_count).sum()
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::data(format!(
                "weights file has {} values, generator needs {}",
                params.len(),
                self.param_count()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::data("weights contain non-finite values"));
        }
        let mut rest = params;
        for d in self.trunk.iter_mut().chain(self.branches.iter_mut()) {
            let (w, tail) = rest.split_at(d.weight.len());
            let (b, tail) = tail.split_at(d.bias.len());
            d.weight.copy_from_slice(w);
            d.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    /// Writes parameters as little-endian f64.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.parameters().iter().flat_map(|p| p.to_le_bytes()).collect();
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::data(format!("{}: length is not a multiple of 8", path.display())));
        }
        let params: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.set_parameters(&params)
    }
}

impl GeneratorBackend for ReferenceGenerator {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn layers(&self) -> &[LayerSpec] {
        &self.config.layers
    }

    fn uv_resolution(&self) -> (usize, usize) {
        self.config.uv_resolution
    }

    fn latent_sigma(&self) -> f64 {
        self.config.sigma
    }

    fn partial_forward(
        &self,
        z: &LatentCode,
        e: &ExpressionVector,
        tap: &LayerId,
    ) -> Result<IntermediateCode> {
        let stop = self.layer_index(tap)?;
        let mut h = self.input_vector(z, e)?;
        for i in 0..=stop {
            h = self.layer_forward(i, &h);
        }
        IntermediateCode::new(h, tap.clone())
    }

    fn forward_from_intermediate(&self, c: &IntermediateCode) -> Result<UvMapSet> {
        let start = self.layer_index(&c.tap_layer)?;
        check_code(self, c)?;
        let mut h = c.values.clone();
        for i in start + 1..self.trunk.len() {
            h = self.layer_forward(i, &h);
        }
        Ok(self.branches_forward(&h))
    }

    fn backward_from_intermediate(&self, c: &IntermediateCode, grad: &UvMapSet) -> Result<Vec<f64>> {
        let start = self.layer_index(&c.tap_layer)?;
        check_code(self, c)?;
        let (h, w) = self.config.uv_resolution;
        if (grad.height(), grad.width()) != (h, w) {
            return Err(Error::invalid("gradient maps do not match generator resolution"));
        }
        // Cache post-activation outputs of every layer after the tap.
        let mut acts = vec![c.values.clone()];
        for i in start + 1..self.trunk.len() {
            let next = self.layer_forward(i, acts.last().unwrap());
            acts.push(next);
        }
        let mut g = vec![0.0; acts.last().unwrap().len()];
        for (branch, map) in self.branches.iter().zip(grad.maps()) {
            branch.backward_into(&map.data, &mut g);
        }
        let act = self.config.activation;
        for (offset, i) in (start + 1..self.trunk.len()).enumerate().rev() {
            let out = &acts[offset + 1];
            let pre: Vec<f64> = g
                .iter()
                .zip(out)
                .map(|(gv, y)| gv * act.derivative_from_output(*y))
                .collect();
            let mut prev = vec![0.0; self.trunk[i].inputs];
            self.trunk[i].backward_into(&pre, &mut prev);
            g = prev;
        }
        Ok(g)
    }

    fn backward_partial(
        &self,
        z: &LatentCode,
        e: &ExpressionVector,
        tap: &LayerId,
        grad_c: &[f64],
    ) -> Result<(Vec<f64>, [f64; EXPRESSION_DIM])> {
        let stop = self.layer_index(tap)?;
        if grad_c.len() != self.config.layers[stop].width {
            return Err(Error::invalid("gradient width does not match tap layer"));
        }
        let mut acts = vec![self.input_vector(z, e)?];
        for i in 0..=stop {
            let next = self.layer_forward(i, acts.last().unwrap());
            acts.push(next);
        }
        let act = self.config.activation;
        let mut g = grad_c.to_vec();
        for i in (0..=stop).rev() {
            let pre: Vec<f64> = g
                .iter()
                .zip(&acts[i + 1])
                .map(|(gv, y)| gv * act.derivative_from_output(*y))
                .collect();
            let mut prev = vec![0.0; self.trunk[i].inputs];
            self.trunk[i].backward_into(&pre, &mut prev);
            g = prev;
        }
        let ge: [f64; EXPRESSION_DIM] = g[self.config.latent_dim..].try_into().unwrap();
        g.truncate(self.config.latent_dim);
        Ok((g, ge))
    }

    fn forward(&self, z: &LatentCode, e: &ExpressionVector) -> Result<UvMapSet> {
        let mut h = self.input_vector(z, e)?;
        for i in 0..self.trunk.len() {
            h = self.layer_forward(i, &h);
        }
        Ok(self.branches_forward(&h))
    }
}

/// Cylindrical face template: pixel `(i, j)` sits at angle proportional to
/// `j` around a vertical cylinder and height proportional to `-i`.
fn cylinder_template(h: usize, w: usize) -> UvMapSet {
    const RADIUS: f64 = 0.8;
    const HALF_HEIGHT: f64 = 0.8;
    let span = 100f64.to_radians();
    let mut shape = Image::filled(w, h, 0.0);
    let mut normal = Image::filled(w, h, 0.0);
    let mut texture = Image::filled(w, h, 0.0);
    for i in 0..h {
        let v = i as f64 / (h - 1) as f64;
        let y = (1.0 - 2.0 * v) * HALF_HEIGHT;
        for j in 0..w {
            let u = j as f64 / (w - 1) as f64;
            let theta = (u - 0.5) * span;
            let (s, c) = theta.sin_cos();
            shape.set_pixel(i, j, [RADIUS * s, y, RADIUS * (c - 1.0)]);
            normal.set_pixel(i, j, [s, 0.0, c]);
            let shade = 0.05 * (1.0 - 2.0 * v);
            texture.set_pixel(i, j, [0.72 + shade, 0.56 + shade, 0.47 + shade]);
        }
    }
    UvMapSet {
        shape,
        normal,
        texture,
    }
}

/// Key-value manifest describing a generator backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorManifest {
    /// Adapter kind; `reference` is built in.
    pub backend: String,
    pub latent_dim: usize,
    /// Layers as `name:width`, in forward order.
    pub layers: Vec<String>,
    /// `HxW`, e.g. `16x16`.
    pub uv_resolution: String,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Weights file, relative to the manifest's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

fn default_sigma() -> f64 {
    1.0
}

impl GeneratorManifest {
    pub fn from_config(config: &ReferenceGeneratorConfig) -> Self {
        Self {
            backend: "reference".into(),
            latent_dim: config.latent_dim,
            layers: config
                .layers
                .iter()
                .map(|l| format!("{}:{}", l.name, l.width))
                .collect(),
            uv_resolution: format!("{}x{}", config.uv_resolution.0, config.uv_resolution.1),
            activation: config.activation,
            seed: config.seed,
            sigma: config.sigma,
            weights: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("generator manifest: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest = Self::parse(&text)?;
        if let Some(w) = manifest.weights.take() {
            let base = path.parent().unwrap_or(Path::new("."));
            manifest.weights = Some(base.join(w));
        }
        Ok(manifest)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        self.layers
            .iter()
            .map(|entry| {
                let (name, width) = entry
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("layer entry {entry:?} is not name:width")))?;
                let width = width
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad width in layer entry {entry:?}")))?;
                Ok(LayerSpec::new(name.trim(), width))
            })
            .collect()
    }

    pub fn resolution(&self) -> Result<(usize, usize)> {
        let bad = || Error::Config(format!("uv_resolution {:?} is not HxW", self.uv_resolution));
        let (h, w) = self.uv_resolution.split_once(['x', 'X']).ok_or_else(bad)?;
        Ok((
            h.trim().parse().map_err(|_| bad())?,
            w.trim().parse().map_err(|_| bad())?,
        ))
    }

    pub fn reference_config(&self) -> Result<ReferenceGeneratorConfig> {
        let config = ReferenceGeneratorConfig {
            latent_dim: self.latent_dim,
            layers: self.layer_specs()?,
            uv_resolution: self.resolution()?,
            activation: self.activation,
            seed: self.seed,
            sigma: self.sigma,
        };
        config.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(config)
    }

    /// Builds the reference backend described by this manifest.
    pub fn build_reference(&self) -> Result<ReferenceGenerator> {
        if self.backend != "reference" {
            return Err(Error::Config(format!(
                "manifest backend {:?} is not the reference generator",
                self.backend
            )));
        }
        let mut gen = ReferenceGenerator::new(self.reference_config()?)?;
        if let Some(path) = &self.weights {
            gen.load_weights(path)?;
        }
        Ok(gen)
    }
}
