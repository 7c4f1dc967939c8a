//! Analytic gradients against central finite differences, stage by stage
//! and end to end.

use avatar_core::generator::GeneratorBackend;
use avatar_core::mesh::assemble_mesh_backward;
use avatar_core::optim::{ObjectivePipeline, ObjectiveSpec, Stack};
use avatar_core::render::relative_error;
use avatar_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_maps(r: &mut ChaCha8Rng, h: usize, w: usize) -> UvMapSet {
    let mut img = || Image::from_data(w, h, (0..h * w * 3).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    UvMapSet::new(img(), img(), img()).unwrap()
}

fn dot_maps(a: &UvMapSet, b: &UvMapSet) -> f64 {
    a.maps()
        .iter()
        .zip(b.maps())
        .map(|(x, y)| x.data.iter().zip(&y.data).map(|(p, q)| p * q).sum::<f64>())
        .sum()
}

fn base_code(gen: &ReferenceGenerator, tap: &str, seed: u64) -> IntermediateCode {
    let z = sample_latent(seed, gen.latent_dim(), 1.0).unwrap();
    partial_forward(gen, &z, &ExpressionVector::neutral(), &LayerId::from(tap)).unwrap()
}

#[test]
fn generator_vjp_matches_finite_differences() {
    let gen = ReferenceGenerator::new(ReferenceGeneratorConfig::default()).unwrap();
    for tap in ["dense", "block"] {
        let c = base_code(&gen, tap, 11);
        let (h, w) = gen.uv_resolution();
        let probe = random_maps(&mut rng(4), h, w);
        let analytic = gen.backward_from_intermediate(&c, &probe).unwrap();
        let step = 1e-4;
        for i in 0..c.dim() {
            let eval = |d: f64| {
                let mut v = c.clone();
                v.values[i] += d;
                dot_maps(&probe, &forward_from_intermediate(&gen, &v).unwrap())
            };
            let numeric = (eval(step) - eval(-step)) / (2.0 * step);
            let err = relative_error(analytic[i], numeric);
            assert!(err < 1e-4, "{tap}[{i}]: analytic {} numeric {numeric} rel {err}", analytic[i]);
        }
    }
}

#[test]
fn generator_partial_vjp_matches_finite_differences() {
    let gen = ReferenceGenerator::new(ReferenceGeneratorConfig::default()).unwrap();
    let tap = LayerId::from("block");
    let z = sample_latent(2, gen.latent_dim(), 1.0).unwrap();
    let e = ExpressionVector::from_weights(&[0.2, 0.0, 0.5, 0.0, 0.0, 0.1, 0.0]).unwrap();
    let g: Vec<f64> = {
        let mut r = rng(8);
        (0..gen.layer_width(&tap).unwrap()).map(|_| r.random_range(-1.0..1.0)).collect()
    };
    let (gz, _) = gen.backward_partial(&z, &e, &tap, &g).unwrap();
    let step = 1e-4;
    for i in 0..z.dim() {
        let eval = |d: f64| {
            let mut zz = z.clone();
            zz.values[i] += d;
            let c = partial_forward(&gen, &zz, &e, &tap).unwrap();
            c.values.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
        };
        let numeric = (eval(step) - eval(-step)) / (2.0 * step);
        assert!(relative_error(gz[i], numeric) < 1e-4, "z[{i}]: {} vs {numeric}", gz[i]);
    }
}

fn smooth_image(seed: u64, side: usize) -> Image {
    let mut r = rng(seed);
    let (a, b, c) = (r.random_range(0.5..2.0), r.random_range(0.5..2.0), r.random_range(0.0..3.0));
    let mut img = Image::filled(side, side, 0.0);
    for i in 0..side {
        for j in 0..side {
            let (x, y) = (i as f64 / side as f64, j as f64 / side as f64);
            img.set_pixel(
                i,
                j,
                [
                    0.5 + 0.3 * (a * x + c).sin(),
                    0.4 + 0.2 * (b * y).cos(),
                    0.3 + 0.25 * (x * y * 3.0 + c).sin(),
                ],
            );
        }
    }
    img
}

#[test]
fn embedder_vjps_match_finite_differences() {
    let joint = reference_joint_embedder(5, 16).unwrap();
    let ident = reference_identity_embedder(6, 12).unwrap();
    let img = smooth_image(1, 8);
    let step = 1e-4;

    let gj: Vec<f64> = (0..16).map(|k| (k as f64 * 0.37).sin()).collect();
    let aj = joint.embed_image_backward(&img, &gj).unwrap();
    let gi: Vec<f64> = (0..12).map(|k| (k as f64 * 0.91).cos()).collect();
    let ai = ident.embed_identity_backward(&img, &gi).unwrap();

    let mut r = rng(3);
    for _ in 0..40 {
        let p = r.random_range(0..img.data.len());
        let shifted = |d: f64| {
            let mut x = img.clone();
            x.data[p] += d;
            x
        };
        let fj = |d: f64| joint.embed_image(&shifted(d)).unwrap().values.iter().zip(&gj).map(|(a, b)| a * b).sum::<f64>();
        let nj = (fj(step) - fj(-step)) / (2.0 * step);
        assert!(relative_error(aj.data[p], nj) < 1e-4, "joint pixel {p}: {} vs {nj}", aj.data[p]);

        let fi = |d: f64| ident.embed_identity(&shifted(d)).unwrap().values.iter().zip(&gi).map(|(a, b)| a * b).sum::<f64>();
        let ni = (fi(step) - fi(-step)) / (2.0 * step);
        assert!(relative_error(ai.data[p], ni) < 1e-4, "identity pixel {p}: {} vs {ni}", ai.data[p]);
    }
}

fn reference_mesh(seed: u64) -> TexturedMesh {
    let gen = ReferenceGenerator::new(ReferenceGeneratorConfig::default()).unwrap();
    let z = sample_latent(seed, gen.latent_dim(), 1.0).unwrap();
    let maps = gen.forward(&z, &ExpressionVector::neutral()).unwrap();
    let (h, w) = gen.uv_resolution();
    assemble_mesh(&maps, &MeshTopology::grid(h, w).unwrap()).unwrap()
}

#[test]
fn renderer_mean_intensity_gradient() {
    let mesh = reference_mesh(21);
    let cfg = RenderConfig::test_profile();
    let renderer = ReferenceRenderer::new(cfg.clone()).unwrap();
    let step = 1e-3;
    for yaw in render::DEFAULT_YAWS {
        let cam = cfg.camera(yaw);
        let img = renderer.render(&mesh, &cam).unwrap();
        let n = img.data.len() as f64;
        let seed = Image::filled(img.width, img.height, 1.0 / n);
        let g = renderer.backward(&mesh, &cam, &seed).unwrap();
        let mean = |m: &TexturedMesh| renderer.render(m, &cam).unwrap().data.iter().sum::<f64>() / n;
        let mut r = rng(yaw.to_bits());
        for _ in 0..24 {
            let k = r.random_range(0..mesh.vertex_count());
            let a = r.random_range(0..3);
            let mut plus = mesh.clone();
            let mut minus = mesh.clone();
            plus.vertices[k][a] += step;
            minus.vertices[k][a] -= step;
            let numeric = (mean(&plus) - mean(&minus)) / (2.0 * step);
            let err = relative_error(g.vertices[k][a], numeric);
            assert!(err < 1e-3, "yaw {yaw} vertex {k} axis {a}: {} vs {numeric}", g.vertices[k][a]);
        }
    }
}

#[test]
fn renderer_pixel_probes() {
    let mesh = reference_mesh(4);
    let report = gradient_check(&mesh, &RenderConfig::test_profile(), 200, 17, 1e-6).unwrap();
    let kept = report.probes.iter().filter(|p| !p.straddles_kink).count();
    assert!(kept >= 180, "only {kept} probes away from kinks");
    assert!(report.max_rel_error < 1e-3, "max rel error {}", report.max_rel_error);
}

#[test]
fn mesh_vjp_matches_finite_differences() {
    let gen = ReferenceGenerator::new(ReferenceGeneratorConfig::default()).unwrap();
    let z = sample_latent(9, gen.latent_dim(), 1.0).unwrap();
    let maps = gen.forward(&z, &ExpressionVector::neutral()).unwrap();
    let topo = MeshTopology::grid(16, 16).unwrap();
    let mut r = rng(12);
    let n = topo.vertex_count();
    let rand3 = |r: &mut ChaCha8Rng| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
    let gv: Vec<[f64; 3]> = (0..n).map(|_| rand3(&mut r)).collect();
    let gn: Vec<[f64; 3]> = (0..n).map(|_| rand3(&mut r)).collect();
    let gc: Vec<[f64; 3]> = (0..n).map(|_| rand3(&mut r)).collect();
    let grad = mesh::MeshGrad {
        vertices: gv.clone(),
        normals: gn.clone(),
        colors: gc.clone(),
    };
    let back = assemble_mesh_backward(&maps, &grad).unwrap();
    let objective = |m: &UvMapSet| {
        let mesh = assemble_mesh(m, &topo).unwrap();
        let mut s = 0.0;
        for k in 0..n {
            let c = mesh.vertex_color(k);
            for a in 0..3 {
                s += gv[k][a] * mesh.vertices[k][a] + gn[k][a] * mesh.normals[k][a] + gc[k][a] * c[a];
            }
        }
        s
    };
    let step = 1e-5;
    for map in 0..3 {
        for _ in 0..30 {
            let idx = r.random_range(0..n * 3);
            let shifted = |d: f64| {
                let mut m = maps.clone();
                match map {
                    0 => m.shape.data[idx] += d,
                    1 => m.normal.data[idx] += d,
                    _ => m.texture.data[idx] += d,
                }
                m
            };
            let numeric = (objective(&shifted(step)) - objective(&shifted(-step))) / (2.0 * step);
            let analytic = back.maps()[map].data[idx];
            assert!(relative_error(analytic, numeric) < 1e-5, "map {map} entry {idx}: {analytic} vs {numeric}");
        }
    }
}

#[test]
fn end_to_end_gradient_on_sampled_coordinates() {
    let gen = ReferenceGenerator::new(ReferenceGeneratorConfig::default()).unwrap();
    let cfg = RenderConfig::test_profile();
    let renderer = ReferenceRenderer::new(cfg.clone()).unwrap();
    let joint = reference_joint_embedder(1, 64).unwrap();
    let ident = reference_identity_embedder(2, 64).unwrap();
    let stack = Stack {
        generator: &gen,
        renderer: &renderer,
        render_config: &cfg,
        embedder: &joint,
        identity: &ident,
    };
    let c = base_code(&gen, "dense", 5);
    let spec = ObjectiveSpec::text(&["old", "smiling"], LossWeights::default());
    let pipeline = ObjectivePipeline::new(stack, &c, &spec, &render::DEFAULT_YAWS).unwrap();

    // Away from zero so the L2 and identity terms contribute.
    let mut r = rng(77);
    let delta: Vec<f64> = (0..c.dim()).map(|_| r.random_range(-0.3..0.3)).collect();
    let eval = pipeline.evaluate(&delta, true, 0).unwrap();
    assert!(eval.losses.l_id > 0.0 && eval.losses.l_l2 > 0.0);
    let grad = eval.gradient.unwrap();

    let step = 1e-3;
    let mut coords: Vec<usize> = (0..c.dim()).collect();
    for i in 0..16 {
        let j = r.random_range(i..coords.len());
        coords.swap(i, j);
    }
    for &i in &coords[..16] {
        let total = |d: f64| {
            let mut x = delta.clone();
            x[i] += d;
            pipeline.evaluate(&x, false, 0).unwrap().losses.total
        };
        let numeric = (total(step) - total(-step)) / (2.0 * step);
        let err = relative_error(grad[i], numeric);
        assert!(err < 1e-2, "coordinate {i}: analytic {} numeric {numeric} rel {err}", grad[i]);
    }
}
