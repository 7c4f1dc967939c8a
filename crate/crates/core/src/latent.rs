//! Latent codes, expression conditioning and edit directions.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{LossRecord, LossWeights};

/// A Gaussian input vector for the generator, reproducible from its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub values: Vec<f64>,
    pub seed: u64,
    pub sigma: f64,
}

impl LatentCode {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Draws `d` values from N(0, sigma^2) using a ChaCha stream keyed by `seed`.
pub fn sample_latent(seed: u64, d: usize, sigma: f64) -> Result<LatentCode> {
    if d == 0 {
        return Err(Error::invalid("latent dimension must be positive"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!(
            "sigma must be a positive finite number, got {sigma}"
        )));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..d).map(|_| normal.sample(&mut rng)).collect();
    Ok(LatentCode {
        values,
        seed,
        sigma,
    })
}

/// The seven universal expressions, in slot order.
pub const EXPRESSIONS: [&str; 7] = [
    "neutral",
    "happy",
    "angry",
    "sad",
    "afraid",
    "disgusted",
    "surprised",
];

/// Expression conditioning vector. All zeros is the neutral face; soft blends
/// with weights in `[0, 1]` are accepted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpressionVector {
    weights: [f64; 7],
}

impl ExpressionVector {
    pub fn neutral() -> Self {
        Self { weights: [0.0; 7] }
    }

    pub fn one_hot(slot: usize) -> Result<Self> {
        if slot >= 7 {
            return Err(Error::invalid(format!("expression slot {slot} out of range 0..7")));
        }
        let mut weights = [0.0; 7];
        weights[slot] = 1.0;
        Ok(Self { weights })
    }

    pub fn named(name: &str) -> Result<Self> {
        let slot = EXPRESSIONS
            .iter()
            .position(|e| e.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::invalid(format!("unknown expression {name:?}")))?;
        Self::one_hot(slot)
    }

    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let weights: [f64; 7] = weights.try_into().map_err(|_| {
            Error::invalid(format!("expression vector needs 7 weights, got {}", weights.len()))
        })?;
        if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::invalid(format!("expression weight {w} outside [0, 1]")));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[f64; 7] {
        &self.weights
    }
}

impl Default for ExpressionVector {
    fn default() -> Self {
        Self::neutral()
    }
}

/// Name of a generator layer whose activation can be tapped.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerId(pub String);

impl LayerId {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LayerId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

/// Activation of an intermediate generator layer: the space edits live in.
#[derive(Debug, Clone, PartialEq)]
pub struct IntermediateCode {
    pub values: Vec<f64>,
    pub tap_layer: LayerId,
}

impl IntermediateCode {
    pub fn new(values: Vec<f64>, tap_layer: LayerId) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("intermediate code contains non-finite values"));
        }
        Ok(Self { values, tap_layer })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Where a direction came from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default)]
    pub prompts: Vec<String>,
    /// SHA-256 of the target image, for image-guided runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<LossWeights>,
    #[serde(default)]
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_losses: Option<LossRecord>,
}

/// An additive edit in intermediate-code space.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub delta: Vec<f64>,
    pub tap_layer: LayerId,
    pub provenance: Provenance,
}

impl Direction {
    pub fn new(delta: Vec<f64>, tap_layer: LayerId) -> Result<Self> {
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("direction contains non-finite values"));
        }
        Ok(Self {
            delta,
            tap_layer,
            provenance: Provenance::default(),
        })
    }

    pub fn zeros(dim: usize, tap_layer: LayerId) -> Self {
        Self {
            delta: vec![0.0; dim],
            tap_layer,
            provenance: Provenance::default(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.delta.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Returns `c + alpha * delta`.
pub fn apply_direction(c: &IntermediateCode, dir: &Direction, alpha: f64) -> Result<IntermediateCode> {
    if c.tap_layer != dir.tap_layer {
        return Err(Error::invalid(format!(
            "direction was found at layer {} but code is tapped at {}",
            dir.tap_layer, c.tap_layer
        )));
    }
    if c.dim() != dir.delta.len() {
        return Err(Error::invalid(format!(
            "direction width {} does not match code width {}",
            dir.delta.len(),
            c.dim()
        )));
    }
    let values = c
        .values
        .iter()
        .zip(&dir.delta)
        .map(|(v, d)| v + alpha * d)
        .collect();
    Ok(IntermediateCode {
        values,
        tap_layer: c.tap_layer.clone(),
    })
}
