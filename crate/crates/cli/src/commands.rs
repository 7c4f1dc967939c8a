use std::fs;
use std::result::Result;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use avatar_core::embed::{IdentityEmbedder, JointEmbedder};
use avatar_core::generator::GeneratorBackend;
use avatar_core::loss::embed_prompts;
use avatar_core::optim::Target;
use avatar_core::records::{evaluate_renders, save_components, trace_to_jsonl, CodeRecord};
use avatar_core::*;

use crate::{CliError, RunConfig};

/// Everything a command needs, built and checked before any output exists.
pub struct Components {
    pub generator: Box<dyn GeneratorBackend>,
    pub joint: Box<dyn JointEmbedder>,
    pub identity: Box<dyn IdentityEmbedder>,
    pub renderer: ReferenceRenderer,
    pub render: RenderConfig,
}

impl Components {
    pub fn build(cfg: &RunConfig) -> Result<Self, CliError> {
        let generator: Box<dyn GeneratorBackend> = match &cfg.backend {
            Some(p) => Box::new(GeneratorManifest::load(p)?.build_reference()?),
            None => Box::new(ReferenceGenerator::new(ReferenceGeneratorConfig::default())?),
        };
        let joint = match &cfg.embedder {
            Some(p) => EmbedderManifest::load(p)?,
            None => EmbedderManifest::reference(1, 64),
        };
        let identity = match &cfg.id_embedder {
            Some(p) => EmbedderManifest::load(p)?,
            None => EmbedderManifest::reference(2, 64),
        };
        if cfg.render.backend != RenderBackend::Reference {
            return Err(CliError::Config("only the reference renderer is bundled".into()));
        }
        Ok(Self {
            generator,
            joint: Box::new(joint.build_reference_joint()?),
            identity: Box::new(identity.build_reference_identity()?),
            renderer: ReferenceRenderer::new(cfg.render.clone())?,
            render: cfg.render.clone(),
        })
    }

    pub fn stack(&self) -> Stack<'_> {
        Stack {
            generator: self.generator.as_ref(),
            renderer: &self.renderer,
            render_config: &self.render,
            embedder: self.joint.as_ref(),
            identity: self.identity.as_ref(),
        }
    }

    fn tap(&self, cfg: &RunConfig) -> Result<LayerId, CliError> {
        let tap = cfg
            .tap_layer
            .as_deref()
            .map(LayerId::from)
            .unwrap_or_else(|| self.generator.default_tap());
        self.generator
            .layer_width(&tap)
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(tap)
    }

    /// The seeded face `c` everything is edited from.
    pub fn base_code(&self, cfg: &RunConfig, tap: &LayerId) -> Result<IntermediateCode, CliError> {
        let e = ExpressionVector::named(&cfg.expression).map_err(|e| CliError::Config(e.to_string()))?;
        let z = sample_latent(cfg.seed, self.generator.latent_dim(), self.generator.latent_sigma())?;
        Ok(partial_forward(self.generator.as_ref(), &z, &e, tap)?)
    }

    fn mesh(&self, c: &IntermediateCode) -> Result<TexturedMesh, CliError> {
        let maps = forward_from_intermediate(self.generator.as_ref(), c)?;
        let (h, w) = self.generator.uv_resolution();
        Ok(assemble_mesh(&maps, &MeshTopology::grid(h, w)?)?)
    }

    fn views(&self, mesh: &TexturedMesh, yaws: &[f64]) -> Result<RenderSet, CliError> {
        Ok(render_views_with(&self.renderer, &self.render, mesh, yaws)?)
    }
}

fn templates(cfg: &RunConfig) -> Result<PromptTemplateSet, CliError> {
    match &cfg.templates {
        Some(p) => Ok(PromptTemplateSet::load(p)?),
        None => Ok(default_templates()),
    }
}

fn target(cfg: &RunConfig) -> Result<Target, CliError> {
    match &cfg.target_image {
        Some(p) => Ok(Target::Image(Image::load_png(p)?)),
        None => Ok(Target::Text {
            texts: cfg.prompts.clone(),
            templates: templates(cfg)?,
        }),
    }
}

fn target_embeddings(target: &Target, emb: &dyn JointEmbedder) -> Result<Vec<EmbeddingVector>, CliError> {
    Ok(match target {
        Target::Text { texts, templates } => embed_prompts(&expand_prompt(texts, templates)?, emb)?,
        Target::Image(img) => vec![emb.embed_image(img)?],
        Target::Embeddings(e) => e.clone(),
    })
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn mkdir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Creates `out/run-<unix seconds>-seed<seed>`, suffixed when taken.
fn run_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let stem = format!("run-{secs}-seed{}", cfg.seed);
    mkdir(&cfg.out)?;
    for k in 0.. {
        let name = if k == 0 { stem.clone() } else { format!("{stem}-{k}") };
        let dir = cfg.out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir, e)),
        }
    }
    unreachable!()
}

fn save_mesh(mesh: &TexturedMesh, dir: &Path) -> Result<(), CliError> {
    mkdir(dir)?;
    export_mesh(mesh, &dir.join("mesh.obj"))?;
    Ok(())
}

fn save_views(set: &RenderSet, dir: &Path) -> Result<(), CliError> {
    mkdir(dir)?;
    for (i, img) in set.images.iter().enumerate() {
        img.save_png(&dir.join(format!("view{i:02}.png")))?;
    }
    Ok(())
}

pub fn manipulate(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let started = Instant::now();
    cfg.validate()?;
    cfg.validate_objective()?;
    let parts = Components::build(cfg)?;
    let tap = parts.tap(cfg)?;
    let c = parts.base_code(cfg, &tap)?;
    let spec = ObjectiveSpec {
        target: target(cfg)?,
        weights: cfg.weights,
    };

    let result = optimize_direction(parts.stack(), &c, &spec, &cfg.optimization)?;
    let edited = apply_direction(&c, &result.direction, 1.0)?;
    let original_mesh = parts.mesh(&c)?;
    let edited_mesh = parts.mesh(&edited)?;
    let targets = target_embeddings(&spec.target, parts.joint.as_ref())?;
    let report = evaluate_renders(
        &result.original_renders,
        &result.final_renders,
        &targets,
        parts.joint.as_ref(),
        parts.identity.as_ref(),
    )?;

    let dir = run_dir(cfg)?;
    save_mesh(&original_mesh, &dir.join("original"))?;
    save_mesh(&edited_mesh, &dir.join("manipulated"))?;
    save_views(&result.original_renders, &dir.join("renders/original"))?;
    save_views(&result.final_renders, &dir.join("renders/manipulated"))?;
    DirectionRecord::from_direction(&result.direction).save(&dir.join("direction.toml"))?;
    write(&dir.join("trace.jsonl"), &trace_to_jsonl(&result.trace))?;
    write(&dir.join("eval.toml"), &report.to_toml())?;
    write(
        &dir.join("run.toml"),
        &cfg.to_manifest("manipulate", started.elapsed().as_secs_f64()),
    )?;
    Ok(dir)
}

fn alpha_label(a: f64) -> String {
    format!("alpha{a}")
}

pub fn apply(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let started = Instant::now();
    cfg.validate()?;
    let path = cfg
        .direction
        .as_ref()
        .ok_or_else(|| CliError::Config("apply needs --direction".into()))?;
    let direction = DirectionRecord::load(path)
        .and_then(|r| r.into_direction())
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if cfg.alphas.is_empty() {
        return Err(CliError::Config("give at least one --alpha".into()));
    }
    let mut labels: Vec<String> = cfg.alphas.iter().map(|a| alpha_label(*a)).collect();
    labels.sort();
    labels.dedup();
    if labels.len() != cfg.alphas.len() {
        return Err(CliError::Config("alphas must be distinct".into()));
    }
    if let Some(l) = &cfg.tap_layer {
        if l != direction.tap_layer.as_str() {
            return Err(CliError::Config(format!(
                "direction was found at layer {} but --layer is {l}",
                direction.tap_layer
            )));
        }
    }
    let parts = Components::build(cfg)?;
    let width = parts
        .generator
        .layer_width(&direction.tap_layer)
        .map_err(|e| CliError::Config(format!("direction does not fit this backend: {e}")))?;
    if width != direction.delta.len() {
        return Err(CliError::Config(format!(
            "direction has width {} but layer {} has width {width}",
            direction.delta.len(),
            direction.tap_layer
        )));
    }
    let c = parts.base_code(cfg, &direction.tap_layer)?;
    let outputs = cfg
        .alphas
        .iter()
        .map(|&a| {
            let code = apply_direction(&c, &direction, a)?;
            let mesh = parts.mesh(&code)?;
            let views = parts.views(&mesh, &cfg.optimization.yaws)?;
            Ok((a, code, mesh, views))
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let dir = run_dir(cfg)?;
    for (a, code, mesh, views) in outputs {
        let sub = dir.join(alpha_label(a));
        save_mesh(&mesh, &sub)?;
        save_views(&views, &sub.join("renders"))?;
        write(&sub.join("code.toml"), &CodeRecord::new(a, &code).to_toml())?;
    }
    write(&dir.join("run.toml"), &cfg.to_manifest("apply", started.elapsed().as_secs_f64()))?;
    Ok(dir)
}

pub fn pca(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let started = Instant::now();
    cfg.validate()?;
    let s = &cfg.pca;
    if s.samples < 2 {
        return Err(CliError::Config("--samples must be at least 2".into()));
    }
    if !s.alpha.is_finite() {
        return Err(CliError::Config("--alpha must be finite".into()));
    }
    let parts = Components::build(cfg)?;
    let tap = parts.tap(cfg)?;
    let width = parts.generator.layer_width(&tap)?;
    let max_k = (s.samples - 1).min(width);
    if s.components == 0 || s.components > max_k {
        return Err(CliError::Config(format!(
            "--components must lie in 1..={max_k} for {} samples of a {width}-wide layer",
            s.samples
        )));
    }
    let samples = collect_samples(parts.generator.as_ref(), s.samples, &tap, cfg.seed)?;
    let pcs = fit_pca(&samples, s.components)?;
    let c = parts.base_code(cfg, &tap)?;
    let sweeps = (0..s.sweep_components.min(pcs.len()))
        .flat_map(|i| s.sweep_steps.iter().map(move |&n| (i, n)))
        .map(|(i, n)| {
            let code = apply_component(&c, &pcs, i, s.alpha, n)?;
            let mesh = parts.mesh(&code)?;
            let views = parts.views(&mesh, &cfg.optimization.yaws)?;
            Ok((i, n, mesh, views))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let base_mesh = parts.mesh(&c)?;
    let base_views = parts.views(&base_mesh, &cfg.optimization.yaws)?;

    let dir = run_dir(cfg)?;
    let comp_dir = dir.join("components");
    mkdir(&comp_dir)?;
    save_components(&pcs, &comp_dir)?;
    save_mesh(&base_mesh, &dir.join("sweeps/base"))?;
    save_views(&base_views, &dir.join("sweeps/base/renders"))?;
    for (i, n, mesh, views) in sweeps {
        let sub = dir.join(format!("sweeps/pc{i}_n{n}"));
        save_mesh(&mesh, &sub)?;
        save_views(&views, &sub.join("renders"))?;
    }
    let total: f64 = pcs.explained_variance.iter().sum();
    for (i, v) in pcs.explained_variance.iter().enumerate() {
        let flag = if pcs.rank_deficient[i] { " (rank deficient)" } else { "" };
        eprintln!("PC{i}: variance {v:.6} ({:.2}% of listed){flag}", 100.0 * v / total.max(f64::MIN_POSITIVE));
    }
    write(&dir.join("run.toml"), &cfg.to_manifest("pca", started.elapsed().as_secs_f64()))?;
    Ok(dir)
}

fn load_views(dir: &Path) -> Result<RenderSet, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Config(format!("{} holds no PNG renders", dir.display())));
    }
    let images = paths
        .iter()
        .map(|p| Image::load_png(p))
        .collect::<Result<Vec<_>, _>>()?;
    // Camera parameters are not stored with PNGs; only the count matters here.
    let cfg = RenderConfig {
        image_size: images[0].width,
        ..RenderConfig::default()
    };
    Ok(RenderSet {
        cameras: images.iter().map(|_| cfg.camera(0.0)).collect(),
        images,
    })
}

pub fn eval(cfg: &RunConfig, original: &Path, manipulated: &Path, write_file: bool) -> Result<EvalReport, CliError> {
    cfg.validate()?;
    cfg.validate_objective()?;
    let parts = Components::build(cfg)?;
    let a = load_views(original)?;
    let b = load_views(manipulated)?;
    let targets = target_embeddings(&target(cfg)?, parts.joint.as_ref())?;
    let report = evaluate_renders(&a, &b, &targets, parts.joint.as_ref(), parts.identity.as_ref())?;
    if write_file {
        mkdir(&cfg.out)?;
        write(&cfg.out.join("eval.toml"), &report.to_toml())?;
    }
    Ok(report)
}
