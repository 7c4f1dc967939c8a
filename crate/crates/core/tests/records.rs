use std::fs;

use avatar_core::embed::{IdentityEmbedder, JointEmbedder};
use avatar_core::records::{evaluate_renders, CodeRecord};
use avatar_core::*;

/// Embeds an image as `(p, sqrt(1 - p^2))` with `p` its first pixel.
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

fn set(values: &[f64]) -> RenderSet {
    let cfg = RenderConfig::test_profile();
    RenderSet {
        images: values.iter().map(|v| Image::filled(4, 4, *v)).collect(),
        cameras: values.iter().map(|_| cfg.camera(0.0)).collect(),
    }
}

#[test]
fn direction_file_round_trips_byte_for_byte() {
    let mut dir = Direction::new(vec![0.1, -2.5e-7, 3.0, 1.0 / 3.0], LayerId::from("block")).unwrap();
    dir.provenance = Provenance {
        prompts: vec!["an old person".into(), "with glasses".into()],
        weights: Some(LossWeights::default()),
        steps: 100,
        final_losses: Some(LossRecord {
            step: 100,
            l_clip: 0.25,
            l_id: 0.01,
            l_l2: 1.5,
            total: 0.2516,
        }),
        ..Provenance::default()
    };
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.toml");
    let b = tmp.path().join("b.toml");
    DirectionRecord::from_direction(&dir).save(&a).unwrap();
    let loaded = DirectionRecord::load(&a).unwrap();
    loaded.save(&b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(loaded.into_direction().unwrap(), dir);
}

#[test]
fn code_records_are_affine_in_alpha() {
    let c = IntermediateCode::new(vec![0.5, -1.0, 0.25], LayerId::from("dense")).unwrap();
    let d = Direction::new(vec![0.1, 0.2, -0.3], LayerId::from("dense")).unwrap();
    let recs: Vec<CodeRecord> = [0.0, 1.0, 2.0, 3.0]
        .iter()
        .map(|&a| CodeRecord::new(a, &apply_direction(&c, &d, a).unwrap()))
        .map(|r| CodeRecord::parse(&r.to_toml()).unwrap())
        .collect();
    assert_eq!(recs[0].values, c.values);
    for r in &recs {
        for k in 0..3 {
            assert_eq!(r.values[k], c.values[k] + r.alpha * d.delta[k]);
        }
    }
}

#[test]
fn eval_of_unchanged_renders() {
    let joint = reference_joint_embedder(1, 16).unwrap();
    let ident = reference_identity_embedder(2, 16).unwrap();
    let mesh = {
        let gen = ReferenceGenerator::new(ReferenceGeneratorConfig::default()).unwrap();
        let maps = gen.forward(&sample_latent(1, 32, 1.0).unwrap(), &ExpressionVector::neutral()).unwrap();
        assemble_mesh(&maps, &MeshTopology::grid(16, 16).unwrap()).unwrap()
    };
    let renders = render_views(&mesh, &render::DEFAULT_YAWS, &RenderConfig::test_profile()).unwrap();
    let targets = vec![joint.embed_text("a smiling face").unwrap()];
    let report = evaluate_renders(&renders, &renders, &targets, &joint, &ident).unwrap();
    assert_eq!(report.identity_similarity, 1.0);
    assert_eq!(report.semantic_before, report.semantic_after);
    assert_eq!(report.views, 3);
    assert_eq!(EvalReport::parse(&report.to_toml()).unwrap(), report);
}

#[test]
fn eval_matches_hand_computed_means() {
    let original = set(&[1.0, 1.0, 0.6]);
    let manipulated = set(&[1.0, 0.5, 0.6]);
    let targets = vec![EmbeddingVector::unit(vec![1.0, 0.0]).unwrap()];
    let r = evaluate_renders(&original, &manipulated, &targets, &FirstPixel, &FirstPixel).unwrap();
    // (1 + 0.5 + 1) / 3
    assert!((r.identity_similarity - 2.5 / 3.0).abs() < 1e-12);
    // distances 1 - p
    assert!((r.semantic_before - (0.0 + 0.0 + 0.4) / 3.0).abs() < 1e-12);
    assert!((r.semantic_after - (0.0 + 0.5 + 0.4) / 3.0).abs() < 1e-12);
    assert_eq!(r.kind, "automated-proxy");
}

#[test]
fn eval_rejects_bad_sets() {
    let targets = vec![EmbeddingVector::unit(vec![1.0, 0.0]).unwrap()];
    let e = evaluate_renders(&set(&[]), &set(&[]), &targets, &FirstPixel, &FirstPixel);
    assert!(matches!(e, Err(Error::InvalidArgument(_))));
    let e = evaluate_renders(&set(&[1.0, 0.5]), &set(&[1.0]), &targets, &FirstPixel, &FirstPixel);
    assert!(matches!(e, Err(Error::InvalidArgument(_))));
}
