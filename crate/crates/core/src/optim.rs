//! Gradient-based search for an edit direction that makes a prompt's
//! attribute appear in the generated avatar.
//!
//! One step runs `c + delta -> maps -> mesh -> views -> losses` and pulls the
//! total loss gradient back through every stage onto `delta`. The base code
//! `c`, the expression conditioning, the prompt embeddings and the anchor
//! renders of `G(c)` stay fixed for the whole run.

use serde::{Deserialize, Serialize};

use crate::embed::{EmbeddingVector, IdentityEmbedder, JointEmbedder};
use crate::error::{Error, Result};
use crate::generator::{check_code, GeneratorBackend};
use crate::latent::{Direction, IntermediateCode, Provenance};
use crate::loss::{
    anchor_identities, embed_prompts, identity_loss_grad, l2_loss_grad, semantic_loss_grad, total_loss,
    LossRecord, LossWeights,
};
use crate::maps::{Image, UvMapSet};
use crate::mesh::{assemble_mesh, assemble_mesh_backward, MeshTopology, TexturedMesh};
use crate::prompt::{default_templates, expand_prompt, PromptTemplateSet};
use crate::render::{render_views_backward, render_views_with, RenderConfig, RenderSet, Renderer, DEFAULT_YAWS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizationConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub yaws: Vec<f64>,
    pub record_trace: bool,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            yaws: DEFAULT_YAWS.to_vec(),
            record_trace: true,
        }
    }
}

impl OptimizationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.yaws.is_empty() {
            return Err(Error::invalid("at least one view yaw is required"));
        }
        Ok(())
    }
}

/// What the edit should move towards.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Target texts, expanded through the template set.
    Text {
        texts: Vec<String>,
        templates: PromptTemplateSet,
    },
    Image(Image),
    /// Precomputed unit target embeddings, used as given.
    Embeddings(Vec<EmbeddingVector>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveSpec {
    pub target: Target,
    pub weights: LossWeights,
}

impl ObjectiveSpec {
    /// Text target with the built-in template set.
    pub fn text(texts: &[&str], weights: LossWeights) -> Self {
        Self {
            target: Target::Text {
                texts: texts.iter().map(|s| s.to_string()).collect(),
                templates: default_templates(),
            },
            weights,
        }
    }

    pub fn image(target: Image, weights: LossWeights) -> Self {
        Self {
            target: Target::Image(target),
            weights,
        }
    }

    fn provenance(&self) -> Provenance {
        match &self.target {
            Target::Text { texts, .. } => Provenance {
                prompts: texts.clone(),
                weights: Some(self.weights),
                ..Provenance::default()
            },
            Target::Image(img) => Provenance {
                image_digest: Some(img.digest()),
                weights: Some(self.weights),
                ..Provenance::default()
            },
            Target::Embeddings(_) => Provenance {
                weights: Some(self.weights),
                ..Provenance::default()
            },
        }
    }
}

/// Components taking part in one manipulation.
#[derive(Clone, Copy)]
pub struct Stack<'a> {
    pub generator: &'a dyn GeneratorBackend,
    pub renderer: &'a dyn Renderer,
    pub render_config: &'a RenderConfig,
    pub embedder: &'a dyn JointEmbedder,
    pub identity: &'a dyn IdentityEmbedder,
}

/// The objective as a function of `delta`, with everything that does not
/// depend on `delta` precomputed.
pub struct ObjectivePipeline<'a> {
    stack: Stack<'a>,
    base: IntermediateCode,
    weights: LossWeights,
    yaws: Vec<f64>,
    topology: MeshTopology,
    targets: Vec<EmbeddingVector>,
    anchor: Vec<EmbeddingVector>,
    original: RenderSet,
}

/// Loss values, and optionally the gradient, at one `delta`.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub losses: LossRecord,
    pub gradient: Option<Vec<f64>>,
    pub renders: RenderSet,
}

impl<'a> ObjectivePipeline<'a> {
    pub fn new(stack: Stack<'a>, base: &IntermediateCode, spec: &ObjectiveSpec, yaws: &[f64]) -> Result<Self> {
        check_code(stack.generator, base)?;
        spec.weights.validate()?;
        if yaws.is_empty() {
            return Err(Error::invalid("at least one view yaw is required"));
        }
        let (h, w) = stack.generator.uv_resolution();
        let topology = MeshTopology::grid(h, w)?;
        let targets = match &spec.target {
            Target::Text { texts, templates } => {
                let batch = expand_prompt(texts, templates)?;
                embed_prompts(&batch, stack.embedder)?
            }
            Target::Image(img) => vec![stack.embedder.embed_image(img)?],
            Target::Embeddings(t) => {
                if t.is_empty() || t.iter().any(|e| e.dim() != stack.embedder.dim()) {
                    return Err(Error::invalid("target embeddings must be non-empty and match the embedder"));
                }
                t.clone()
            }
        };
        let mut pipeline = Self {
            stack,
            base: base.clone(),
            weights: spec.weights,
            yaws: yaws.to_vec(),
            topology,
            targets,
            anchor: Vec::new(),
            original: RenderSet {
                images: Vec::new(),
                cameras: Vec::new(),
            },
        };
        let (_, original) = pipeline.render(&vec![0.0; base.dim()], 0)?;
        pipeline.anchor = anchor_identities(&original, stack.identity)?;
        pipeline.original = original;
        Ok(pipeline)
    }

    pub fn original_renders(&self) -> &RenderSet {
        &self.original
    }

    pub fn base(&self) -> &IntermediateCode {
        &self.base
    }

    fn edited(&self, delta: &[f64]) -> Result<IntermediateCode> {
        if delta.len() != self.base.dim() {
            return Err(Error::invalid("delta width does not match the base code"));
        }
        IntermediateCode::new(
            self.base.values.iter().zip(delta).map(|(c, d)| c + d).collect(),
            self.base.tap_layer.clone(),
        )
    }

    #[allow(clippy::type_complexity)]
    fn render(&self, delta: &[f64], step: usize) -> Result<((IntermediateCode, UvMapSet, TexturedMesh), RenderSet)> {
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step, term: "direction" });
        }
        let code = self.edited(delta)?;
        let maps = self.stack.generator.forward_from_intermediate(&code)?;
        if !maps.is_finite() {
            return Err(Error::NonFinite { step, term: "generator maps" });
        }
        let mesh = assemble_mesh(&maps, &self.topology)?;
        if mesh.vertices.iter().chain(&mesh.normals).flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step, term: "mesh" });
        }
        let renders = render_views_with(self.stack.renderer, self.stack.render_config, &mesh, &self.yaws)?;
        if renders.images.iter().any(|i| !i.is_finite()) {
            return Err(Error::NonFinite { step, term: "renders" });
        }
        Ok(((code, maps, mesh), renders))
    }

    /// Evaluates every term at `delta`. `step` only labels diagnostics.
    pub fn evaluate(&self, delta: &[f64], with_gradient: bool, step: usize) -> Result<Evaluation> {
        let l2 = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !l2.is_finite() {
            return Err(Error::NonFinite { step, term: "l2 loss" });
        }
        let ((code, maps, mesh), renders) = self.render(delta, step)?;
        let semantic = semantic_loss_grad(&renders, &self.targets, self.stack.embedder)?;
        let identity = identity_loss_grad(&self.anchor, &renders, self.stack.identity)?;
        let total = total_loss(semantic.value, identity.value, l2, &self.weights);
        for (term, v) in [
            ("clip loss", semantic.value),
            ("identity loss", identity.value),
            ("l2 loss", l2),
            ("total loss", total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite { step, term });
            }
        }
        let losses = LossRecord {
            step,
            l_clip: semantic.value,
            l_id: identity.value,
            l_l2: l2,
            total,
        };
        if !with_gradient {
            return Ok(Evaluation {
                losses,
                gradient: None,
                renders,
            });
        }

        let lambda_id = self.weights.lambda_id;
        let view_grads: Vec<Image> = semantic
            .views
            .into_iter()
            .zip(identity.views)
            .map(|(mut s, i)| {
                for (a, b) in s.data.iter_mut().zip(&i.data) {
                    *a += lambda_id * b;
                }
                s
            })
            .collect();
        let mesh_grad = render_views_backward(self.stack.renderer, &mesh, &renders.cameras, &view_grads)?;
        let map_grad = assemble_mesh_backward(&maps, &mesh_grad)?;
        let mut gradient = self.stack.generator.backward_from_intermediate(&code, &map_grad)?;
        for (g, r) in gradient.iter_mut().zip(l2_loss_grad(delta)) {
            *g += self.weights.lambda_l2 * r;
        }
        if gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { step, term: "gradient" });
        }
        Ok(Evaluation {
            losses,
            gradient: Some(gradient),
            renders,
        })
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManipulationResult {
    pub direction: Direction,
    /// Losses before each optimizer step; empty unless `record_trace`.
    pub trace: Vec<LossRecord>,
    pub initial: LossRecord,
    pub final_losses: LossRecord,
    pub original_renders: RenderSet,
    pub final_renders: RenderSet,
}

/// Optimizes `delta` (starting at zero) for `cfg.steps` Adam steps.
pub fn optimize_direction(
    stack: Stack<'_>,
    c: &IntermediateCode,
    spec: &ObjectiveSpec,
    cfg: &OptimizationConfig,
) -> Result<ManipulationResult> {
    cfg.validate()?;
    let pipeline = ObjectivePipeline::new(stack, c, spec, &cfg.yaws)?;
    let mut delta = vec![0.0; c.dim()];
    let mut adam = match cfg.optimizer {
        OptimizerKind::Adam => Adam::new(delta.len(), cfg.learning_rate),
    };
    let mut trace = Vec::with_capacity(if cfg.record_trace { cfg.steps } else { 0 });
    let mut initial = None;
    for step in 0..cfg.steps {
        let eval = pipeline.evaluate(&delta, true, step)?;
        initial.get_or_insert(eval.losses);
        if cfg.record_trace {
            trace.push(eval.losses);
        }
        adam.step(&mut delta, eval.gradient.as_deref().unwrap());
    }
    let last = pipeline.evaluate(&delta, false, cfg.steps)?;
    let mut provenance = spec.provenance();
    provenance.steps = cfg.steps;
    provenance.final_losses = Some(last.losses);
    let mut direction = Direction::new(delta, c.tap_layer.clone())?;
    direction.provenance = provenance;
    Ok(ManipulationResult {
        direction,
        trace,
        initial: initial.expect("at least one step"),
        final_losses: last.losses,
        original_renders: pipeline.original_renders().clone(),
        final_renders: last.renders,
    })
}
