//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use avatar_cli::{commands, RunConfig, RunManifest};
use avatar_core::embed::{IdentityEmbedder, JointEmbedder};
use avatar_core::generator::{GeneratorBackend, LayerSpec};
use avatar_core::loss::{identity_loss, semantic_loss_grad};
use avatar_core::optim::{ObjectivePipeline, Target};
use avatar_core::render::relative_error;
use avatar_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

struct Reference {
    gen: ReferenceGenerator,
    cfg: RenderConfig,
    renderer: ReferenceRenderer,
    joint: embed::ReferenceJointEmbedder,
    ident: embed::ReferenceIdentityEmbedder,
}

impl Reference {
    fn new(gen: ReferenceGeneratorConfig) -> Self {
        let cfg = RenderConfig::test_profile();
        Self {
            gen: ReferenceGenerator::new(gen).unwrap(),
            renderer: ReferenceRenderer::new(cfg.clone()).unwrap(),
            cfg,
            joint: reference_joint_embedder(1, 64).unwrap(),
            ident: reference_identity_embedder(2, 64).unwrap(),
        }
    }

    fn stack(&self) -> Stack<'_> {
        Stack {
            generator: &self.gen,
            renderer: &self.renderer,
            render_config: &self.cfg,
            embedder: &self.joint,
            identity: &self.ident,
        }
    }

    fn code(&self, tap: &str, seed: u64) -> IntermediateCode {
        let z = sample_latent(seed, self.gen.latent_dim(), 1.0).unwrap();
        partial_forward(&self.gen, &z, &ExpressionVector::neutral(), &LayerId::from(tap)).unwrap()
    }

    fn mesh(&self, c: &IntermediateCode) -> TexturedMesh {
        let maps = forward_from_intermediate(&self.gen, c).unwrap();
        let (h, w) = self.gen.uv_resolution();
        assemble_mesh(&maps, &MeshTopology::grid(h, w).unwrap()).unwrap()
    }
}

/// Embeds an image as `(p, sqrt(1 - p^2))` with `p` its first pixel, so the
/// cosine distance to `(1, 0)` is `1 - p`.
struct FirstPixel;

impl JointEmbedder for FirstPixel {
    fn dim(&self) -> usize {
        2
    }
    fn embed_text(&self, _: &str) -> Result<EmbeddingVector> {
        EmbeddingVector::unit(vec![1.0, 0.0])
    }
    fn embed_image(&self, image: &Image) -> Result<EmbeddingVector> {
        let p = image.data[0];
        EmbeddingVector::unit(vec![p, (1.0 - p * p).sqrt()])
    }
    fn embed_image_backward(&self, image: &Image, _: &[f64]) -> Result<Image> {
        Ok(Image::filled(image.width, image.height, 0.0))
    }
}

impl IdentityEmbedder for FirstPixel {
    fn dim(&self) -> usize {
        2
    }
    fn embed_identity(&self, image: &Image) -> Result<EmbeddingVector> {
        self.embed_image(image)
    }
    fn embed_identity_backward(&self, image: &Image, grad: &[f64]) -> Result<Image> {
        self.embed_image_backward(image, grad)
    }
}

fn loss_identities() -> Check {
    let r = Reference::new(ReferenceGeneratorConfig::default());
    let c = r.code("dense", 3);
    let spec = ObjectiveSpec::text(&["an old person"], LossWeights::default());
    let pipeline = ok(ObjectivePipeline::new(r.stack(), &c, &spec, &render::DEFAULT_YAWS))?;
    let l = ok(pipeline.evaluate(&vec![0.0; c.dim()], true, 0))?.losses;
    ensure!(l.l_id == 0.0, "L_ID = {}", l.l_id);
    ensure!(l.l_l2 == 0.0, "L_L2 = {}", l.l_l2);
    ensure!(l.total == l.l_clip, "total {} != L_CLIP {}", l.total, l.l_clip);
    Ok(())
}

fn gradients() -> Check {
    let r = Reference::new(ReferenceGeneratorConfig::default());
    let c = r.code("dense", 5);
    let spec = ObjectiveSpec::text(&["old", "smiling"], LossWeights::default());
    let pipeline = ok(ObjectivePipeline::new(r.stack(), &c, &spec, &render::DEFAULT_YAWS))?;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let delta: Vec<f64> = (0..c.dim()).map(|_| rng.random_range(-0.3..0.3)).collect();
    let grad = ok(pipeline.evaluate(&delta, true, 0))?.gradient.ok_or("no gradient")?;
    let mut coords: Vec<usize> = (0..c.dim()).collect();
    for i in 0..16 {
        let j = rng.random_range(i..coords.len());
        coords.swap(i, j);
    }
    let h = 1e-3;
    for &i in &coords[..16] {
        let total = |d: f64| {
            let mut x = delta.clone();
            x[i] += d;
            pipeline.evaluate(&x, false, 0).map(|e| e.losses.total)
        };
        let numeric = (ok(total(h))? - ok(total(-h))?) / (2.0 * h);
        let err = relative_error(grad[i], numeric);
        ensure!(err < 1e-2, "coordinate {i}: {} vs {numeric} (rel {err:.2e})", grad[i]);
    }

    let mesh = r.mesh(&r.code("dense", 21));
    let h = 1e-5;
    for yaw in render::DEFAULT_YAWS {
        let cam = r.cfg.camera(yaw);
        let n = (r.cfg.image_size * r.cfg.image_size) as f64;
        let seed = Image::filled(r.cfg.image_size, r.cfg.image_size, 1.0 / n);
        let g = ok(r.renderer.backward(&mesh, &cam, &seed))?;
        let mean = |m: &TexturedMesh| r.renderer.render(m, &cam).map(|i| i.data.iter().sum::<f64>() / n);
        for _ in 0..24 {
            let k = rng.random_range(0..mesh.vertex_count());
            let a = rng.random_range(0..3);
            let (mut plus, mut minus) = (mesh.clone(), mesh.clone());
            plus.vertices[k][a] += h;
            minus.vertices[k][a] -= h;
            let numeric = (ok(mean(&plus))? - ok(mean(&minus))?) / (2.0 * h);
            let err = relative_error(g.vertices[k][a], numeric);
            ensure!(err < 1e-3, "renderer yaw {yaw} vertex {k}.{a}: rel {err:.2e}");
        }
    }
    let report = ok(gradient_check(&mesh, &r.cfg, 200, 17, 1e-6))?;
    ensure!(report.max_rel_error < 1e-3, "pixel probes: max rel {:.2e}", report.max_rel_error);
    Ok(())
}

fn convergence() -> Check {
    let r = Reference::new(ReferenceGeneratorConfig::linear());
    let c = r.code("dense", 5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dstar: Vec<f64> = (0..c.dim()).map(|_| rng.random_range(-0.5..0.5)).collect();
    let reached = ok(apply_direction(&c, &ok(Direction::new(dstar, c.tap_layer.clone()))?, 1.0))?;
    let view = ok(render_views(&r.mesh(&reached), &[3.0], &r.cfg))?;
    let target = ok(r.joint.embed_image(&view.images[0]))?;
    let cfg = OptimizationConfig {
        yaws: vec![3.0],
        ..OptimizationConfig::default()
    };
    let run = |lambda_l2: f64| -> std::result::Result<ManipulationResult, String> {
        let spec = ObjectiveSpec {
            target: Target::Embeddings(vec![target.clone()]),
            weights: ok(LossWeights::new(0.01, lambda_l2))?,
        };
        ok(optimize_direction(r.stack(), &c, &spec, &cfg))
    };
    let default = run(0.001)?;
    let (first, last) = (default.initial.l_clip, default.final_losses.l_clip);
    ensure!(last <= 0.1 * first, "final L_CLIP {last:.4e} > 10% of {first:.4e}");
    let mut norms = Vec::new();
    for l in [0.0, 0.001, 0.1, 10.0] {
        norms.push(run(l)?.direction.norm());
    }
    ensure!(norms.windows(2).all(|w| w[1] <= w[0]), "norms not non-increasing: {norms:?}");
    Ok(())
}

fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(i == j)).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (x, y) = (a[k][p], a[k][q]);
                    a[k][p] = c * x - s * y;
                    a[k][q] = s * x + c * y;
                }
                for k in 0..n {
                    let (x, y) = (a[p][k], a[q][k]);
                    a[p][k] = c * x - s * y;
                    a[q][k] = s * x + c * y;
                }
                for row in v.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k][i]).collect()).collect();
    (values, vectors)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn narrow_generator() -> ReferenceGenerator {
    ReferenceGenerator::new(ReferenceGeneratorConfig {
        layers: vec![LayerSpec::new("dense", 32), LayerSpec::new("narrow", 16)],
        ..ReferenceGeneratorConfig::default()
    })
    .unwrap()
}

fn pca_oracle() -> Check {
    let m = ok(collect_samples(&narrow_generator(), 500, &LayerId::from("narrow"), 2024))?;
    ensure!((m.rows, m.width) == (500, 16), "sample shape {}x{}", m.rows, m.width);
    let pcs = ok(fit_pca(&m, 16))?;
    let mean = m.column_means();
    let mut cov = vec![vec![0.0; 16]; 16];
    for r in 0..m.rows {
        let row = m.row(r);
        for i in 0..16 {
            for j in 0..16 {
                cov[i][j] += (row[i] - mean[i]) * (row[j] - mean[j]) / (m.rows - 1) as f64;
            }
        }
    }
    let (vals, vecs) = jacobi_eigen(cov);
    for i in 0..16 {
        let cos = dot(&pcs.components[i], &vecs[i]).abs();
        ensure!(cos > 0.999, "PC{i}: |cos| = {cos}");
        ensure!((pcs.explained_variance[i] - vals[i]).abs() <= 1e-8 * vals[0], "PC{i} variance");
        for j in 0..16 {
            let d = dot(&pcs.components[i], &pcs.components[j]);
            ensure!((d - f64::from(i == j)).abs() < 1e-6, "<PC{i}, PC{j}> = {d}");
        }
    }
    ensure!(pcs.explained_variance.windows(2).all(|w| w[0] >= w[1]), "variance not ordered");
    Ok(())
}

fn component_application() -> Check {
    let gen = narrow_generator();
    let pcs = ok(fit_pca(&ok(collect_samples(&gen, 500, &LayerId::from("narrow"), 2024))?, 3))?;
    let z = ok(sample_latent(99, gen.latent_dim(), 1.0))?;
    let c = ok(partial_forward(&gen, &z, &ExpressionVector::neutral(), &LayerId::from("narrow")))?;
    ensure!(pca::DEFAULT_ALPHA == 10.0, "default alpha {}", pca::DEFAULT_ALPHA);
    for i in 0..3 {
        for n in [-2i64, -1, 0, 1, 2] {
            let moved = ok(apply_component(&c, &pcs, i, 10.0, n))?;
            for k in 0..c.dim() {
                ensure!(
                    moved.values[k] == c.values[k] + 10.0 * n as f64 * pcs.components[i][k],
                    "PC{i} n={n} coordinate {k}"
                );
            }
        }
        ensure!(ok(apply_component(&c, &pcs, i, 0.0, 3))? == c, "alpha 0 moved the code");
    }
    Ok(())
}

fn prompt_engine() -> Check {
    let t = default_templates();
    ensure!(t.len() == 74, "{} templates", t.len());
    let texts = vec!["old".to_string(), "with a beard".to_string()];
    let batch = ok(expand_prompt(&texts, &t))?;
    ensure!(batch.len() == 148, "{} prompts", batch.len());
    for (k, tpl) in t.templates().iter().enumerate() {
        for (j, text) in texts.iter().enumerate() {
            let p = &batch.prompts[k * texts.len() + j];
            ensure!(*p == format!("{tpl} {text}"), "prompt {} is {p:?}", k * 2 + j);
        }
    }
    Ok(())
}

fn multi_view() -> Check {
    ensure!(render::DEFAULT_YAWS == [-30.0, 3.0, 30.0], "default yaws {:?}", render::DEFAULT_YAWS);
    ensure!(
        OptimizationConfig::default().yaws == vec![-30.0, 3.0, 30.0],
        "optimizer yaws {:?}",
        OptimizationConfig::default().yaws
    );
    let r = Reference::new(ReferenceGeneratorConfig::default());
    let result = ok(optimize_direction(
        r.stack(),
        &r.code("dense", 3),
        &ObjectiveSpec::text(&["a face"], LossWeights::default()),
        &OptimizationConfig {
            steps: 1,
            ..OptimizationConfig::default()
        },
    ))?;
    ensure!(result.original_renders.len() == 3, "{} views", result.original_renders.len());

    let cams: Vec<CameraParams> = render::DEFAULT_YAWS.iter().map(|y| r.cfg.camera(*y)).collect();
    let set = |ps: &[f64]| RenderSet {
        images: ps.iter().map(|p| Image::filled(4, 4, *p)).collect(),
        cameras: cams.clone(),
    };
    let target = vec![ok(EmbeddingVector::unit(vec![1.0, 0.0]))?];
    // Distances 0.3, 0.6, 0.9 average to 0.6.
    let sem = ok(semantic_loss_grad(&set(&[0.7, 0.4, 0.1]), &target, &FirstPixel))?.value;
    ensure!((sem - 0.6).abs() < 1e-12, "semantic {sem}");
    // Similarities 1, 0.5, 0 give 1 - 0.5.
    let id = ok(identity_loss(&set(&[1.0; 3]), &set(&[1.0, 0.5, 0.0]), &FirstPixel))?;
    ensure!((id - 0.5).abs() < 1e-12, "identity {id}");
    Ok(())
}

fn avatar(args: &[&str]) -> std::result::Result<(i32, String), String> {
    let out = ok(Command::new(env!("CARGO_BIN_EXE_avatar")).args(args).output())?;
    Ok((out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).trim().to_string()))
}

fn manipulate_cli(out: &Path, extra: &[&str]) -> std::result::Result<PathBuf, String> {
    let mut args = vec!["manipulate", "--prompt", "an old face", "--size", "32", "--seed", "11", "--out"];
    let out_s = out.to_str().ok_or("non-utf8 temp path")?;
    args.push(out_s);
    args.extend_from_slice(extra);
    let (code, stdout) = avatar(&args)?;
    ensure!(code == 0, "avatar manipulate exited {code}");
    Ok(PathBuf::from(stdout))
}

fn determinism(tmp: &Path) -> Check {
    let a = manipulate_cli(&tmp.join("a"), &["--steps", "30"])?;
    let b = manipulate_cli(&tmp.join("b"), &["--steps", "30"])?;
    for f in ["original/mesh.obj", "manipulated/mesh.obj", "manipulated/mesh.png", "trace.jsonl", "direction.toml"] {
        ensure!(ok(fs::read(a.join(f)))? == ok(fs::read(b.join(f)))?, "{f} differs between runs");
    }
    Ok(())
}

fn wall_time(tmp: &Path) -> Check {
    let cfg = RunConfig {
        prompts: vec!["an old face".into()],
        out: tmp.join("timed"),
        render: RenderConfig {
            image_size: 32,
            ..RenderConfig::default()
        },
        ..RunConfig::default()
    };
    let started = Instant::now();
    let dir = commands::manipulate(&cfg).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let trace = ok(fs::read_to_string(dir.join("trace.jsonl")))?;
    ensure!(trace.lines().count() == 100, "{} trace lines", trace.lines().count());
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(())
}

fn ablations(tmp: &Path) -> Check {
    let no_id = manipulate_cli(&tmp.join("abl"), &["--steps", "20", "--lambda-id", "0"])?;
    let block = manipulate_cli(&tmp.join("abl"), &["--steps", "20", "--layer", "block"])?;
    let read = |d: &Path| -> std::result::Result<RunManifest, String> {
        ok(toml::from_str(&ok(fs::read_to_string(d.join("run.toml")))?))
    };
    let m = read(&no_id)?;
    ensure!(m.config.weights.lambda_id == 0.0, "lambda_id recorded as {}", m.config.weights.lambda_id);
    ensure!(m.command == "manipulate", "command {}", m.command);
    let m = read(&block)?;
    ensure!(m.config.tap_layer.as_deref() == Some("block"), "tap recorded as {:?}", m.config.tap_layer);
    let dir = ok(DirectionRecord::load(&block.join("direction.toml")))?;
    ensure!(dir.tap_layer.as_str() == "block", "direction tap {}", dir.tap_layer);
    Ok(())
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let t = tmp.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Check + '_>)> = vec![
        ("1 loss identities at zero edit", Box::new(loss_identities)),
        ("2 gradient correctness", Box::new(gradients)),
        ("3 synthetic convergence and L2 sweep", Box::new(convergence)),
        ("4 PCA oracle equivalence", Box::new(pca_oracle)),
        ("5 component application", Box::new(component_application)),
        ("6 prompt engine", Box::new(prompt_engine)),
        ("7 multi-view contract", Box::new(multi_view)),
        ("8 determinism", Box::new(|| determinism(t))),
        ("9 desk-scale wall time", Box::new(|| wall_time(t))),
        ("10 ablation switches", Box::new(|| ablations(t))),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let started = Instant::now();
        let outcome = check();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => println!("PASS {name} ({secs:.2}s)"),
            Err(e) => {
                failed += 1;
                println!("FAIL {name} ({secs:.2}s): {e}");
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
