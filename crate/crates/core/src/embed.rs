//! Joint text-image and identity embedders, and the cosine distance that
//! every loss is built on.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::maps::Image;

/// Tolerance on `|v| = 1` for vectors flagged as normalized.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl EmbeddingVector {
    /// Scales `values` to unit length. Fails on zero or non-finite input.
    pub fn unit(values: Vec<f64>) -> Result<Self> {
        let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::data("cannot normalize a zero or non-finite embedding"));
        }
        Ok(Self {
            values: values.into_iter().map(|v| v / n).collect(),
            normalized: true,
        })
    }

    pub fn raw(values: Vec<f64>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    fn check_unit(&self) -> Result<()> {
        if !self.normalized || (self.norm() - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::invalid(format!(
                "embedding must be unit length, has norm {}",
                self.norm()
            )));
        }
        Ok(())
    }
}

/// Cosine similarity `<a, b>` of unit vectors.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "embedding dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    a.check_unit()?;
    b.check_unit()?;
    if a.values == b.values {
        // Rounding in the dot product must not leave identical vectors at a
        // nonzero distance.
        return Ok(1.0);
    }
    Ok(a.dot(b).clamp(-1.0, 1.0))
}

/// `1 - <a, b>` for unit vectors; lies in `[0, 2]`.
pub fn cosine_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    Ok(1.0 - cosine_similarity(a, b)?)
}

/// Model mapping text and images into one shared space.
pub trait JointEmbedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector>;

    fn embed_image(&self, image: &Image) -> Result<EmbeddingVector>;

    /// Pulls `d loss / d embedding` back to the image pixels.
    fn embed_image_backward(&self, image: &Image, grad: &[f64]) -> Result<Image>;
}

/// Face recognition model whose embeddings compare identities.
pub trait IdentityEmbedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_identity(&self, image: &Image) -> Result<EmbeddingVector>;

    fn embed_identity_backward(&self, image: &Image, grad: &[f64]) -> Result<Image>;
}

/// Per-channel `(x - mean) / std` applied before projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl Preprocess {
    fn is_identity(&self) -> bool {
        *self == Self::default()
    }
}

/// Seeded linear map of flattened pixels followed by normalization.
///
/// Projection rows are centered per channel, so a uniform image has no
/// signal and the map is exactly 1-homogeneous in the pixels.
pub struct LinearEmbedder {
    dim: usize,
    seed: u64,
    domain: &'static str,
    input_side: Option<usize>,
    preprocess: Preprocess,
    projections: RwLock<HashMap<(usize, usize), Arc<Vec<f64>>>>,
}

impl std::fmt::Debug for LinearEmbedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinearEmbedder")
            .field("dim", &self.dim)
            .field("seed", &self.seed)
            .field("domain", &self.domain)
            .finish()
    }
}

impl LinearEmbedder {
    fn new(seed: u64, dim: usize, domain: &'static str) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid(format!("embedding dimension must be at least 2, got {dim}")));
        }
        Ok(Self {
            dim,
            seed,
            domain,
            input_side: None,
            preprocess: Preprocess::default(),
            projections: RwLock::new(HashMap::new()),
        })
    }

    fn domain_seed(&self, extra: &[u8]) -> u64 {
        let mut h = Sha256::new();
        h.update(self.domain.as_bytes());
        h.update(self.seed.to_le_bytes());
        h.update(extra);
        u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
    }

    fn generate_projection(&self, width: usize, height: usize) -> Vec<f64> {
        let n = width * height * 3;
        let mut size = Vec::with_capacity(16);
        size.extend_from_slice(&(width as u64).to_le_bytes());
        size.extend_from_slice(&(height as u64).to_le_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(self.domain_seed(&size));
        let scale = 1.0 / ((width * height) as f64).sqrt();
        let mut p: Vec<f64> = (0..self.dim * n)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for row in p.chunks_exact_mut(n) {
            for ch in 0..3 {
                let mean = row[ch..].iter().step_by(3).sum::<f64>() / (width * height) as f64;
                row[ch..].iter_mut().step_by(3).for_each(|v| *v -= mean);
            }
        }
        p
    }

    fn projection(&self, image: &Image) -> Result<Arc<Vec<f64>>> {
        if let Some(side) = self.input_side {
            if image.width != side || image.height != side {
                return Err(Error::invalid(format!(
                    "embedder expects {side}x{side} images, got {}x{}",
                    image.width, image.height
                )));
            }
        }
        let key = (image.width, image.height);
        if let Some(p) = self.projections.read().unwrap().get(&key) {
            return Ok(p.clone());
        }
        let p = Arc::new(self.generate_projection(key.0, key.1));
        self.projections.write().unwrap().entry(key).or_insert(p.clone());
        Ok(p)
    }

    fn set_projection(&mut self, side: usize, values: Vec<f64>) -> Result<()> {
        let n = side * side * 3;
        if values.len() != self.dim * n {
            return Err(Error::data(format!(
                "projection weights have {} values, expected {}",
                values.len(),
                self.dim * n
            )));
        }
        self.input_side = Some(side);
        self.projections.get_mut().unwrap().insert((side, side), Arc::new(values));
        Ok(())
    }

    fn inputs(&self, image: &Image) -> Vec<f64> {
        if self.preprocess.is_identity() {
            return image.data.clone();
        }
        image
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.preprocess.mean[i % 3]) / self.preprocess.std[i % 3])
            .collect()
    }

    fn project(&self, image: &Image) -> Result<Vec<f64>> {
        if !image.is_finite() {
            return Err(Error::data("image contains non-finite pixels"));
        }
        let p = self.projection(image)?;
        let x = self.inputs(image);
        let y: Vec<f64> = p
            .chunks_exact(x.len())
            .map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum())
            .collect();
        // Uniform images project to rounding noise.
        let x_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let y_norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(y_norm > 1e-9 * x_norm) {
            return Err(Error::data("image has no embedding (uniform content)"));
        }
        Ok(y)
    }

    fn embed(&self, image: &Image) -> Result<EmbeddingVector> {
        EmbeddingVector::unit(self.project(image)?)
    }

    fn backward(&self, image: &Image, grad: &[f64]) -> Result<Image> {
        if grad.len() != self.dim {
            return Err(Error::invalid("embedding gradient has the wrong dimension"));
        }
        let y = self.project(image)?;
        let len = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(len > 0.0) {
            return Err(Error::data("cannot differentiate a zero embedding"));
        }
        let unit: Vec<f64> = y.iter().map(|v| v / len).collect();
        let along: f64 = grad.iter().zip(&unit).map(|(g, u)| g * u).sum();
        let gy: Vec<f64> = grad.iter().zip(&unit).map(|(g, u)| (g - along * u) / len).collect();
        let p = self.projection(image)?;
        let n = image.data.len();
        let mut gx = vec![0.0; n];
        for (row, g) in p.chunks_exact(n).zip(&gy) {
            for (o, w) in gx.iter_mut().zip(row) {
                *o += g * w;
            }
        }
        if !self.preprocess.is_identity() {
            gx.iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v /= self.preprocess.std[i % 3]);
        }
        Image::from_data(image.width, image.height, gx)
    }

    fn text(&self, text: &str) -> Result<EmbeddingVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.domain_seed(text.as_bytes()));
        let values = (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        EmbeddingVector::unit(values)
    }
}

/// Desk-scale stand-in for a pretrained joint embedder.
#[derive(Debug)]
pub struct ReferenceJointEmbedder(LinearEmbedder);

/// Desk-scale stand-in for a face recognition network.
#[derive(Debug)]
pub struct ReferenceIdentityEmbedder(LinearEmbedder);

pub fn reference_joint_embedder(seed: u64, m: usize) -> Result<ReferenceJointEmbedder> {
    Ok(ReferenceJointEmbedder(LinearEmbedder::new(seed, m, "joint")?))
}

pub fn reference_identity_embedder(seed: u64, m: usize) -> Result<ReferenceIdentityEmbedder> {
    Ok(ReferenceIdentityEmbedder(LinearEmbedder::new(seed, m, "identity")?))
}

impl JointEmbedder for ReferenceJointEmbedder {
    fn dim(&self) -> usize {
        self.0.dim
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        self.0.text(text)
    }

    fn embed_image(&self, image: &Image) -> Result<EmbeddingVector> {
        self.0.embed(image)
    }

    fn embed_image_backward(&self, image: &Image, grad: &[f64]) -> Result<Image> {
        self.0.backward(image, grad)
    }
}

impl IdentityEmbedder for ReferenceIdentityEmbedder {
    fn dim(&self) -> usize {
        self.0.dim
    }

    fn embed_identity(&self, image: &Image) -> Result<EmbeddingVector> {
        self.0.embed(image)
    }

    fn embed_identity_backward(&self, image: &Image, grad: &[f64]) -> Result<Image> {
        self.0.backward(image, grad)
    }
}

/// Adapter manifest for an embedder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderManifest {
    /// Adapter kind; `reference` is built in.
    pub kind: String,
    pub dim: usize,
    #[serde(default)]
    pub seed: u64,
    /// Square input side expected by the model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_side: Option<usize>,
    #[serde(default)]
    pub preprocess: Preprocess,
    /// Weight file, relative to the manifest's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

impl EmbedderManifest {
    pub fn reference(seed: u64, dim: usize) -> Self {
        Self {
            kind: "reference".into(),
            dim,
            seed,
            input_side: None,
            preprocess: Preprocess::default(),
            weights: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("embedder manifest: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::parse(&text)?;
        if let Some(w) = m.weights.take() {
            m.weights = Some(path.parent().unwrap_or(Path::new(".")).join(w));
        }
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    fn build_linear(&self, domain: &'static str) -> Result<LinearEmbedder> {
        if self.kind != "reference" {
            return Err(Error::Config(format!("embedder kind {:?} is not built in", self.kind)));
        }
        if self.preprocess.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("preprocess std values must be positive".into()));
        }
        let mut e = LinearEmbedder::new(self.seed, self.dim, domain)
            .map_err(|err| Error::Config(err.to_string()))?;
        e.preprocess = self.preprocess;
        e.input_side = self.input_side;
        if let Some(path) = &self.weights {
            let side = self
                .input_side
                .ok_or_else(|| Error::Config("weights require input_side".into()))?;
            let bytes = fs::read(path).map_err(|err| Error::io(path, err))?;
            if bytes.len() % 8 != 0 {
                return Err(Error::data("embedder weights length is not a multiple of 8"));
            }
            let values = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            e.set_projection(side, values)?;
        }
        Ok(e)
    }

    pub fn build_reference_joint(&self) -> Result<ReferenceJointEmbedder> {
        Ok(ReferenceJointEmbedder(self.build_linear("joint")?))
    }

    pub fn build_reference_identity(&self) -> Result<ReferenceIdentityEmbedder> {
        Ok(ReferenceIdentityEmbedder(self.build_linear("identity")?))
    }
}
