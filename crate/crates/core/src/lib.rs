//! Text- and image-guided editing of generated 3D face avatars.
//!
//! A generator maps a latent code and expression to UV-space shape, normal
//! and texture maps. These are assembled into a textured mesh, rendered from
//! a few yaw angles with a differentiable splat renderer, and scored by joint
//! text/image and identity embedders. [`optimize_direction`] searches for an
//! offset in an intermediate generator layer that moves renders toward a
//! target while keeping identity; [`fit_pca`] gives unsupervised directions.

pub mod embed;
pub mod error;
pub mod generator;
pub mod latent;
pub mod loss;
pub mod maps;
pub mod mesh;
pub mod obj;
pub mod optim;
pub mod pca;
pub mod prompt;
pub mod records;
pub mod render;

pub use embed::{
    cosine_distance, cosine_similarity, reference_identity_embedder, reference_joint_embedder,
    EmbedderManifest, EmbeddingVector, IdentityEmbedder, JointEmbedder, LinearEmbedder,
};
pub use error::{Error, Result};
pub use generator::{
    forward_from_intermediate, partial_forward, Activation, GeneratorBackend, GeneratorManifest,
    LayerSpec, ReferenceGenerator, ReferenceGeneratorConfig,
};
pub use latent::{
    apply_direction, sample_latent, Direction, ExpressionVector, IntermediateCode, LatentCode,
    LayerId, Provenance, EXPRESSIONS,
};
pub use loss::{LossRecord, LossWeights};
pub use maps::{Image, UvMapSet};
pub use mesh::{assemble_mesh, validate_mesh, MeshReport, MeshTopology, TexturedMesh, Violation};
pub use obj::{export_mesh, ObjFiles};
pub use optim::{
    optimize_direction, ManipulationResult, ObjectiveSpec, OptimizationConfig, OptimizerKind,
    Stack, Target,
};
pub use pca::{apply_component, collect_samples, fit_pca, LatentSampleMatrix, PrincipalComponentSet};
pub use prompt::{default_templates, expand_prompt, PromptBatch, PromptTemplateSet};
pub use records::{DirectionRecord, EvalReport};
pub use render::{
    gradient_check, render_views, render_views_with, CameraParams, GradientReport, Projection,
    ReferenceRenderer, RenderBackend, RenderConfig, RenderSet, Renderer,
};
