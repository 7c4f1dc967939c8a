//! On-disk forms: direction records, loss traces, principal component sets
//! and evaluation reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::{cosine_similarity, EmbeddingVector, IdentityEmbedder, JointEmbedder};
use crate::error::{Error, Result};
use crate::latent::{Direction, IntermediateCode, LayerId, Provenance};
use crate::loss::{clip_text_loss_from_embeddings, LossRecord};
use crate::pca::PrincipalComponentSet;
use crate::render::RenderSet;

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Persisted form of a [`Direction`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionRecord {
    pub tool_version: String,
    pub tap_layer: LayerId,
    pub delta: Vec<f64>,
    pub provenance: Provenance,
}

impl DirectionRecord {
    pub fn from_direction(dir: &Direction) -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            tap_layer: dir.tap_layer.clone(),
            delta: dir.delta.clone(),
            provenance: dir.provenance.clone(),
        }
    }

    pub fn into_direction(self) -> Result<Direction> {
        let mut d = Direction::new(self.delta, self.tap_layer)?;
        d.provenance = self.provenance;
        Ok(d)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("direction record serializes")
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::data(format!("direction record: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_toml())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }
}

/// An intermediate code written next to strength-sweep outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeRecord {
    pub alpha: f64,
    pub tap_layer: LayerId,
    pub values: Vec<f64>,
}

impl CodeRecord {
    pub fn new(alpha: f64, code: &IntermediateCode) -> Self {
        Self {
            alpha,
            tap_layer: code.tap_layer.clone(),
            values: code.values.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("code record serializes")
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::data(format!("code record: {e}")))
    }
}

/// One JSON object per line: `step, l_clip, l_id, l_l2, total`.
pub fn trace_to_jsonl(trace: &[LossRecord]) -> String {
    let mut out = String::new();
    for r in trace {
        out.push_str(&serde_json::to_string(r).expect("loss record serializes"));
        out.push('\n');
    }
    out
}

pub fn trace_from_jsonl(text: &str) -> Result<Vec<LossRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::data(format!("trace line {}: {e}", i + 1))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PcaMetadata {
    tool_version: String,
    tap_layer: LayerId,
    samples: usize,
    seed: u64,
    explained_variance: Vec<f64>,
    rank_deficient: Vec<bool>,
    mean: Vec<f64>,
}

/// Writes `components.txt` (one component per line) and `pca.toml`.
pub fn save_components(pcs: &PrincipalComponentSet, dir: &Path) -> Result<()> {
    let mut matrix = String::new();
    for pc in &pcs.components {
        let line: Vec<String> = pc.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(matrix, "{}", line.join(" "));
    }
    write_text(&dir.join("components.txt"), &matrix)?;
    let meta = PcaMetadata {
        tool_version: TOOL_VERSION.to_string(),
        tap_layer: pcs.tap_layer.clone(),
        samples: pcs.samples,
        seed: pcs.seed,
        explained_variance: pcs.explained_variance.clone(),
        rank_deficient: pcs.rank_deficient.clone(),
        mean: pcs.mean.clone(),
    };
    write_text(&dir.join("pca.toml"), &toml::to_string(&meta).expect("metadata serializes"))
}

pub fn load_components(dir: &Path) -> Result<PrincipalComponentSet> {
    let meta: PcaMetadata = toml::from_str(&read_text(&dir.join("pca.toml"))?)
        .map_err(|e| Error::data(format!("pca metadata: {e}")))?;
    let components = read_text(&dir.join("components.txt"))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| Error::data(format!("component value {v:?}: {e}"))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    if components.len() != meta.explained_variance.len() {
        return Err(Error::data("component count disagrees with metadata"));
    }
    Ok(PrincipalComponentSet {
        components,
        mean: meta.mean,
        explained_variance: meta.explained_variance,
        rank_deficient: meta.rank_deficient,
        tap_layer: meta.tap_layer,
        samples: meta.samples,
        seed: meta.seed,
    })
}

/// Automated proxy scores for one manipulation. These are embedding-space
/// measurements, not human judgments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: String,
    pub views: usize,
    /// Mean cosine similarity of identity embeddings, original vs manipulated.
    pub identity_similarity: f64,
    /// Mean semantic distance of the original renders to the target.
    pub semantic_before: f64,
    /// Mean semantic distance of the manipulated renders to the target.
    pub semantic_after: f64,
}

impl EvalReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::data(format!("eval report: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.identity_similarity.is_finite()
            && (-1.0..=1.0).contains(&self.identity_similarity)
            && (0.0..=2.0).contains(&self.semantic_before)
            && (0.0..=2.0).contains(&self.semantic_after);
        if ok {
            Ok(())
        } else {
            Err(Error::data("evaluation scores out of range"))
        }
    }
}

/// Scores view-aligned render sets against precomputed target embeddings.
pub fn evaluate_renders(
    original: &RenderSet,
    manipulated: &RenderSet,
    targets: &[EmbeddingVector],
    embedder: &dyn JointEmbedder,
    identity: &dyn IdentityEmbedder,
) -> Result<EvalReport> {
    if original.is_empty() || manipulated.is_empty() {
        return Err(Error::invalid("render sets must not be empty"));
    }
    if original.len() != manipulated.len() {
        return Err(Error::invalid(format!(
            "render sets are misaligned: {} vs {} views",
            original.len(),
            manipulated.len()
        )));
    }
    if original
        .images
        .iter()
        .zip(&manipulated.images)
        .any(|(a, b)| !a.same_shape(b))
    {
        return Err(Error::invalid("render sets differ in image size"));
    }
    let mut sim = 0.0;
    for (a, b) in original.images.iter().zip(&manipulated.images) {
        sim += cosine_similarity(&identity.embed_identity(a)?, &identity.embed_identity(b)?)?;
    }
    let embed = |set: &RenderSet| {
        set.images
            .iter()
            .map(|i| embedder.embed_image(i))
            .collect::<Result<Vec<_>>>()
    };
    let report = EvalReport {
        kind: "automated-proxy".into(),
        views: original.len(),
        identity_similarity: sim / original.len() as f64,
        semantic_before: clip_text_loss_from_embeddings(&embed(original)?, targets)?,
        semantic_after: clip_text_loss_from_embeddings(&embed(manipulated)?, targets)?,
    };
    report.validate()?;
    Ok(report)
}
