//! Objective terms: embedding-space semantic loss (text or image target),
//! identity loss, L2 regularizer and their weighted sum.
//!
//! Each term has a value-only form and a `_grad` form that also returns the
//! gradient with respect to every rendered view.

use serde::{Deserialize, Serialize};

use crate::embed::{cosine_distance, cosine_similarity, EmbeddingVector, IdentityEmbedder, JointEmbedder};
use crate::error::{Error, Result};
use crate::latent::Direction;
use crate::maps::Image;
use crate::prompt::PromptBatch;
use crate::render::RenderSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_id: f64,
    pub lambda_l2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_id: 0.01,
            lambda_l2: 0.001,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_id: f64, lambda_l2: f64) -> Result<Self> {
        let w = Self {
            lambda_id,
            lambda_l2,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_id", self.lambda_id), ("lambda_l2", self.lambda_l2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Loss values at one optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_clip: f64,
    pub l_id: f64,
    pub l_l2: f64,
    pub total: f64,
}

/// `l_clip + lambda_id * l_id + lambda_l2 * l_l2`.
pub fn total_loss(l_clip: f64, l_id: f64, l_l2: f64, w: &LossWeights) -> f64 {
    l_clip + w.lambda_id * l_id + w.lambda_l2 * l_l2
}

/// Euclidean norm of the edit, i.e. `|c - (c + delta)|`.
pub fn l2_loss(dir: &Direction) -> f64 {
    dir.norm()
}

/// Gradient of [`l2_loss`]; the zero vector at `delta = 0`.
pub fn l2_loss_grad(delta: &[f64]) -> Vec<f64> {
    let n = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        delta.iter().map(|v| v / n).collect()
    } else {
        vec![0.0; delta.len()]
    }
}

/// Value and per-view image gradients of a loss term.
#[derive(Debug, Clone, PartialEq)]
pub struct TermGrad {
    pub value: f64,
    pub views: Vec<Image>,
}

/// Mean distance over every (view, prompt) pair.
pub fn clip_text_loss_from_embeddings(images: &[EmbeddingVector], texts: &[EmbeddingVector]) -> Result<f64> {
    if images.is_empty() || texts.is_empty() {
        return Err(Error::invalid("semantic loss needs at least one render and one prompt"));
    }
    let mut sum = 0.0;
    for t in texts {
        for i in images {
            sum += cosine_distance(i, t)?;
        }
    }
    Ok(sum / (texts.len() * images.len()) as f64)
}

/// Mean distance of every view to one target embedding.
pub fn clip_image_loss_from_embeddings(images: &[EmbeddingVector], target: &EmbeddingVector) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid("semantic loss needs at least one render"));
    }
    let sum = images
        .iter()
        .map(|i| cosine_distance(i, target))
        .sum::<Result<f64>>()?;
    Ok(sum / images.len() as f64)
}

/// `1 - mean_i <anchor_i, manip_i>` over view-aligned pairs.
pub fn identity_loss_from_embeddings(anchor: &[EmbeddingVector], manip: &[EmbeddingVector]) -> Result<f64> {
    if anchor.len() != manip.len() {
        return Err(Error::invalid(format!(
            "identity loss needs aligned views: {} anchors vs {} renders",
            anchor.len(),
            manip.len()
        )));
    }
    if anchor.is_empty() {
        return Err(Error::invalid("identity loss needs at least one view"));
    }
    let sum = anchor
        .iter()
        .zip(manip)
        .map(|(a, m)| cosine_similarity(a, m))
        .sum::<Result<f64>>()?;
    Ok(1.0 - sum / anchor.len() as f64)
}

fn embed_views(renders: &RenderSet, emb: &dyn JointEmbedder) -> Result<Vec<EmbeddingVector>> {
    renders.images.iter().map(|i| emb.embed_image(i)).collect()
}

fn embed_identities(renders: &RenderSet, emb: &dyn IdentityEmbedder) -> Result<Vec<EmbeddingVector>> {
    renders.images.iter().map(|i| emb.embed_identity(i)).collect()
}

pub fn embed_prompts(batch: &PromptBatch, emb: &dyn JointEmbedder) -> Result<Vec<EmbeddingVector>> {
    batch.prompts.iter().map(|p| emb.embed_text(p)).collect()
}

pub fn clip_text_loss(renders: &RenderSet, batch: &PromptBatch, emb: &dyn JointEmbedder) -> Result<f64> {
    if renders.is_empty() || batch.is_empty() {
        return Err(Error::invalid("semantic loss needs renders and prompts"));
    }
    clip_text_loss_from_embeddings(&embed_views(renders, emb)?, &embed_prompts(batch, emb)?)
}

pub fn clip_image_loss(renders: &RenderSet, target: &Image, emb: &dyn JointEmbedder) -> Result<f64> {
    if renders.is_empty() {
        return Err(Error::invalid("semantic loss needs at least one render"));
    }
    clip_image_loss_from_embeddings(&embed_views(renders, emb)?, &emb.embed_image(target)?)
}

pub fn identity_loss(orig: &RenderSet, manip: &RenderSet, id_emb: &dyn IdentityEmbedder) -> Result<f64> {
    if orig.len() != manip.len() {
        return Err(Error::invalid("original and manipulated render sets differ in length"));
    }
    identity_loss_from_embeddings(&embed_identities(orig, id_emb)?, &embed_identities(manip, id_emb)?)
}

fn check_unit_set(v: &[EmbeddingVector], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::invalid(format!("no {what} embeddings")));
    }
    Ok(())
}

/// Semantic loss against precomputed target embeddings (one per prompt, or
/// a single target image), with gradients on each view.
pub fn semantic_loss_grad(
    renders: &RenderSet,
    targets: &[EmbeddingVector],
    emb: &dyn JointEmbedder,
) -> Result<TermGrad> {
    check_unit_set(targets, "target")?;
    if renders.is_empty() {
        return Err(Error::invalid("semantic loss needs at least one render"));
    }
    let views = embed_views(renders, emb)?;
    let value = clip_text_loss_from_embeddings(&views, targets)?;
    // d/d e_i of mean_{i,j} (1 - e_i . t_j) = -mean_j t_j / N
    let n = renders.len() as f64;
    let mut mean_target = vec![0.0; emb.dim()];
    for t in targets {
        if t.dim() != mean_target.len() {
            return Err(Error::invalid("target embedding dimension mismatch"));
        }
        for (m, v) in mean_target.iter_mut().zip(&t.values) {
            *m += v;
        }
    }
    let scale = -1.0 / (targets.len() as f64 * n);
    let g: Vec<f64> = mean_target.iter().map(|v| v * scale).collect();
    let grads = renders
        .images
        .iter()
        .map(|img| emb.embed_image_backward(img, &g))
        .collect::<Result<Vec<_>>>()?;
    Ok(TermGrad { value, views: grads })
}

/// Identity loss against cached anchor embeddings; gradients flow only into
/// `manip`.
pub fn identity_loss_grad(
    anchor: &[EmbeddingVector],
    manip: &RenderSet,
    id_emb: &dyn IdentityEmbedder,
) -> Result<TermGrad> {
    let views = embed_identities(manip, id_emb)?;
    let value = identity_loss_from_embeddings(anchor, &views)?;
    let scale = -1.0 / anchor.len() as f64;
    let grads = manip
        .images
        .iter()
        .zip(anchor)
        .zip(&views)
        .map(|((img, a), m)| {
            // Cosine similarity is stationary where the embeddings coincide.
            if a.values == m.values {
                return Ok(Image::filled(img.width, img.height, 0.0));
            }
            let g: Vec<f64> = a.values.iter().map(|v| v * scale).collect();
            id_emb.embed_identity_backward(img, &g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TermGrad { value, views: grads })
}

pub fn anchor_identities(orig: &RenderSet, id_emb: &dyn IdentityEmbedder) -> Result<Vec<EmbeddingVector>> {
    embed_identities(orig, id_emb)
}
