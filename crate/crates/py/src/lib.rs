//! Python bindings: the reference stack, direction optimization, PCA and
//! mesh export.

use std::path::PathBuf;

use avatar_core::embed::{ReferenceIdentityEmbedder, ReferenceJointEmbedder};
use avatar_core::generator::GeneratorBackend;
use avatar_core::optim::Target;
use avatar_core::records::trace_to_jsonl;
use avatar_core::{
    apply_component, apply_direction, assemble_mesh, collect_samples, default_templates, expand_prompt,
    export_mesh, fit_pca, forward_from_intermediate, optimize_direction, partial_forward, render_views_with,
    sample_latent, DirectionRecord, EmbedderManifest, Error, ExpressionVector, GeneratorManifest, Image,
    IntermediateCode, LayerId, LossWeights, MeshTopology, ObjectiveSpec, OptimizationConfig,
    PrincipalComponentSet, PromptTemplateSet, ReferenceGenerator, ReferenceGeneratorConfig,
    ReferenceRenderer, RenderConfig, Stack, TexturedMesh,
};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::NonFinite { .. } => PyArithmeticError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for avatar_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// An intermediate code: activations at one generator layer.
#[pyclass(name = "Code", module = "avatar_edit")]
#[derive(Clone)]
struct PyCode(IntermediateCode);

#[pymethods]
impl PyCode {
    #[new]
    fn new(values: Vec<f64>, layer: &str) -> PyResult<Self> {
        IntermediateCode::new(values, LayerId::from(layer)).py().map(Self)
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.0.values.clone()
    }

    #[getter]
    fn layer(&self) -> String {
        self.0.tap_layer.to_string()
    }

    fn __len__(&self) -> usize {
        self.0.dim()
    }

    fn __repr__(&self) -> String {
        format!("Code(layer={:?}, dim={})", self.0.tap_layer.as_str(), self.0.dim())
    }
}

/// An additive edit at one layer.
#[pyclass(name = "Direction", module = "avatar_edit")]
#[derive(Clone)]
struct PyDirection(avatar_core::Direction);

#[pymethods]
impl PyDirection {
    #[new]
    fn new(delta: Vec<f64>, layer: &str) -> PyResult<Self> {
        avatar_core::Direction::new(delta, LayerId::from(layer)).py().map(Self)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        DirectionRecord::load(&path).and_then(|r| r.into_direction()).py().map(Self)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        DirectionRecord::from_direction(&self.0).save(&path).py()
    }

    /// `code + alpha * delta`.
    fn apply(&self, code: &PyCode, alpha: f64) -> PyResult<PyCode> {
        apply_direction(&code.0, &self.0, alpha).py().map(PyCode)
    }

    #[getter]
    fn delta(&self) -> Vec<f64> {
        self.0.delta.clone()
    }

    #[getter]
    fn layer(&self) -> String {
        self.0.tap_layer.to_string()
    }

    fn norm(&self) -> f64 {
        self.0.norm()
    }

    fn __repr__(&self) -> String {
        format!("Direction(layer={:?}, norm={:.4})", self.0.tap_layer.as_str(), self.0.norm())
    }
}

/// An RGB image with values in `[0, 1]`, stored row-major.
#[pyclass(name = "Image", module = "avatar_edit")]
#[derive(Clone)]
struct PyImage(Image);

#[pymethods]
impl PyImage {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Image::load_png(&path).py().map(Self)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save_png(&path).py()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }

    /// Flat `height * width * 3` values.
    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    fn pixel(&self, row: usize, col: usize) -> PyResult<[f64; 3]> {
        if row >= self.0.height || col >= self.0.width {
            return Err(PyValueError::new_err("pixel out of range"));
        }
        Ok(self.0.pixel(row, col))
    }
}

#[pyclass(name = "Mesh", module = "avatar_edit")]
struct PyMesh(TexturedMesh);

#[pymethods]
impl PyMesh {
    #[getter]
    fn vertex_count(&self) -> usize {
        self.0.vertex_count()
    }

    #[getter]
    fn vertices(&self) -> Vec<[f64; 3]> {
        self.0.vertices.clone()
    }

    /// Writes `path` plus its `.mtl` and texture PNG; returns the three paths.
    fn export(&self, path: PathBuf) -> PyResult<(PathBuf, PathBuf, PathBuf)> {
        let f = export_mesh(&self.0, &path).py()?;
        Ok((f.obj, f.mtl, f.texture))
    }
}

/// Outcome of [`Editor::manipulate`].
#[pyclass(name = "Manipulation", module = "avatar_edit")]
struct PyManipulation {
    #[pyo3(get)]
    direction: PyDirection,
    /// Per step `(l_clip, l_id, l_l2, total)`.
    #[pyo3(get)]
    trace: Vec<(f64, f64, f64, f64)>,
    jsonl: String,
    #[pyo3(get)]
    original_renders: Vec<PyImage>,
    #[pyo3(get)]
    final_renders: Vec<PyImage>,
}

#[pymethods]
impl PyManipulation {
    /// The loss trace as JSON lines.
    fn trace_jsonl(&self) -> String {
        self.jsonl.clone()
    }
}

#[pyclass(name = "Components", module = "avatar_edit")]
struct PyComponents(PrincipalComponentSet);

#[pymethods]
impl PyComponents {
    #[getter]
    fn components(&self) -> Vec<Vec<f64>> {
        self.0.components.clone()
    }

    #[getter]
    fn explained_variance(&self) -> Vec<f64> {
        self.0.explained_variance.clone()
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.0.mean.clone()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    /// `code + alpha * n * PC_index`.
    #[pyo3(signature = (code, index, n, alpha = avatar_core::pca::DEFAULT_ALPHA))]
    fn apply(&self, code: &PyCode, index: usize, n: i64, alpha: f64) -> PyResult<PyCode> {
        apply_component(&code.0, &self.0, index, alpha, n).py().map(PyCode)
    }
}

/// Generator, renderer and embedders, ready to edit faces.
#[pyclass(name = "Editor", module = "avatar_edit")]
struct Editor {
    generator: ReferenceGenerator,
    renderer: ReferenceRenderer,
    render: RenderConfig,
    joint: ReferenceJointEmbedder,
    identity: ReferenceIdentityEmbedder,
}

impl Editor {
    fn stack(&self) -> Stack<'_> {
        Stack {
            generator: &self.generator,
            renderer: &self.renderer,
            render_config: &self.render,
            embedder: &self.joint,
            identity: &self.identity,
        }
    }

    fn mesh_of(&self, code: &IntermediateCode) -> avatar_core::Result<TexturedMesh> {
        let maps = forward_from_intermediate(&self.generator, code)?;
        let (h, w) = self.generator.uv_resolution();
        assemble_mesh(&maps, &MeshTopology::grid(h, w)?)
    }
}

#[pymethods]
impl Editor {
    /// `backend`, `embedder` and `id_embedder` are manifest paths; the
    /// built-in reference components are used when omitted.
    #[new]
    #[pyo3(signature = (backend = None, embedder = None, id_embedder = None, image_size = 224, linear = false))]
    fn new(
        backend: Option<PathBuf>,
        embedder: Option<PathBuf>,
        id_embedder: Option<PathBuf>,
        image_size: usize,
        linear: bool,
    ) -> PyResult<Self> {
        let generator = match backend {
            Some(p) => GeneratorManifest::load(&p).and_then(|m| m.build_reference()).py()?,
            None if linear => ReferenceGenerator::new(ReferenceGeneratorConfig::linear()).py()?,
            None => ReferenceGenerator::new(ReferenceGeneratorConfig::default()).py()?,
        };
        let joint = match embedder {
            Some(p) => EmbedderManifest::load(&p).py()?,
            None => EmbedderManifest::reference(1, 64),
        };
        let identity = match id_embedder {
            Some(p) => EmbedderManifest::load(&p).py()?,
            None => EmbedderManifest::reference(2, 64),
        };
        let render = RenderConfig {
            image_size,
            ..RenderConfig::default()
        };
        render.validate().py()?;
        Ok(Self {
            generator,
            renderer: ReferenceRenderer::new(render.clone()).py()?,
            render,
            joint: joint.build_reference_joint().py()?,
            identity: identity.build_reference_identity().py()?,
        })
    }

    /// `(name, width)` of each tappable layer.
    fn layers(&self) -> Vec<(String, usize)> {
        self.generator.layers().iter().map(|l| (l.name.to_string(), l.width)).collect()
    }

    /// The seeded face at `layer` (the first layer by default).
    #[pyo3(signature = (seed, layer = None, expression = "neutral"))]
    fn code(&self, seed: u64, layer: Option<&str>, expression: &str) -> PyResult<PyCode> {
        let tap = layer.map(LayerId::from).unwrap_or_else(|| self.generator.default_tap());
        let e = ExpressionVector::named(expression).py()?;
        let z = sample_latent(seed, self.generator.latent_dim(), self.generator.latent_sigma()).py()?;
        partial_forward(&self.generator, &z, &e, &tap).py().map(PyCode)
    }

    fn mesh(&self, code: &PyCode) -> PyResult<PyMesh> {
        self.mesh_of(&code.0).py().map(PyMesh)
    }

    #[pyo3(signature = (code, yaws = vec![-30.0, 3.0, 30.0]))]
    fn render(&self, code: &PyCode, yaws: Vec<f64>) -> PyResult<Vec<PyImage>> {
        let mesh = self.mesh_of(&code.0).py()?;
        let set = render_views_with(&self.renderer, &self.render, &mesh, &yaws).py()?;
        Ok(set.images.into_iter().map(PyImage).collect())
    }

    /// Optimizes a direction from `code` towards `prompts` or `target_image`.
    #[pyo3(signature = (
        code, prompts = None, target_image = None, steps = 100, lr = 0.01,
        lambda_id = 0.01, lambda_l2 = 0.001, yaws = vec![-30.0, 3.0, 30.0], seed = 0,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn manipulate(
        &self,
        py: Python<'_>,
        code: &PyCode,
        prompts: Option<Vec<String>>,
        target_image: Option<PyImage>,
        steps: usize,
        lr: f64,
        lambda_id: f64,
        lambda_l2: f64,
        yaws: Vec<f64>,
        seed: u64,
    ) -> PyResult<PyManipulation> {
        let target = match (prompts, target_image) {
            (Some(texts), None) => Target::Text {
                texts,
                templates: default_templates(),
            },
            (None, Some(img)) => Target::Image(img.0),
            _ => return Err(PyValueError::new_err("give exactly one of prompts or target_image")),
        };
        let spec = ObjectiveSpec {
            target,
            weights: LossWeights::new(lambda_id, lambda_l2).py()?,
        };
        let cfg = OptimizationConfig {
            steps,
            learning_rate: lr,
            yaws,
            seed,
            ..OptimizationConfig::default()
        };
        let result = py
            .detach(|| optimize_direction(self.stack(), &code.0, &spec, &cfg))
            .py()?;
        Ok(PyManipulation {
            trace: result.trace.iter().map(|r| (r.l_clip, r.l_id, r.l_l2, r.total)).collect(),
            jsonl: trace_to_jsonl(&result.trace),
            direction: PyDirection(result.direction),
            original_renders: result.original_renders.images.into_iter().map(PyImage).collect(),
            final_renders: result.final_renders.images.into_iter().map(PyImage).collect(),
        })
    }

    /// Principal components of `samples` seeded codes at `layer`.
    #[pyo3(signature = (samples = avatar_core::pca::DEFAULT_SAMPLES, components = 10, layer = None, seed = 0))]
    fn pca(&self, py: Python<'_>, samples: usize, components: usize, layer: Option<&str>, seed: u64) -> PyResult<PyComponents> {
        let tap = layer.map(LayerId::from).unwrap_or_else(|| self.generator.default_tap());
        py.detach(|| {
            let m = collect_samples(&self.generator, samples, &tap, seed)?;
            fit_pca(&m, components)
        })
        .py()
        .map(PyComponents)
    }
}

/// Every text inside every template, template-major.
#[pyfunction]
#[pyo3(signature = (texts, templates = None))]
fn expand(texts: Vec<String>, templates: Option<Vec<String>>) -> PyResult<Vec<String>> {
    let set = match templates {
        Some(t) => PromptTemplateSet::new(t).py()?,
        None => default_templates(),
    };
    Ok(expand_prompt(&texts, &set).py()?.prompts)
}

#[pyfunction]
fn templates() -> Vec<String> {
    default_templates().templates().to_vec()
}

#[pymodule]
fn avatar_edit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Editor>()?;
    m.add_class::<PyCode>()?;
    m.add_class::<PyDirection>()?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyMesh>()?;
    m.add_class::<PyManipulation>()?;
    m.add_class::<PyComponents>()?;
    m.add_function(wrap_pyfunction!(expand, m)?)?;
    m.add_function(wrap_pyfunction!(templates, m)?)?;
    m.add("EXPRESSIONS", avatar_core::EXPRESSIONS.to_vec())?;
    Ok(())
}
