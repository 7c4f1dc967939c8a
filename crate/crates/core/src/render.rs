//! Differentiable multi-view rendering.
//!
//! The reference renderer splats every vertex as an isotropic Gaussian in
//! screen space and normalizes per pixel against a constant-weight gray
//! background. Weights are smooth in vertex positions, so the image is
//! continuously differentiable in vertices and texture except at the
//! shading clamps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::Image;
use crate::mesh::{dot, norm, sub, MeshGrad, RotationY, TexturedMesh, Vec3};

/// Yaw angles (degrees) of the three default views.
pub const DEFAULT_YAWS: [f64; 3] = [-30.0, 3.0, 30.0];

/// Ambient term added to the diffuse factor.
pub const AMBIENT: f64 = 0.3;

// A background sample weighs as much as a vertex three sigmas away.
const BACKGROUND_WEIGHT: f64 = 0.011_108_996_538_242_306; // exp(-4.5)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Orthographic,
    Perspective,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub yaw_degrees: f64,
    pub distance: f64,
    /// `(width, height)` in pixels.
    pub image_size: (usize, usize),
    pub projection: Projection,
}

impl CameraParams {
    fn validate(&self) -> Result<()> {
        if self.image_size.0 < 8 || self.image_size.1 < 8 {
            return Err(Error::invalid("image size must be at least 8x8"));
        }
        if !(self.distance > 0.0) {
            return Err(Error::invalid("camera distance must be positive"));
        }
        if !self.yaw_degrees.is_finite() {
            return Err(Error::invalid("yaw must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderBackend {
    Reference,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub backend: RenderBackend,
    /// Rasterizer blur radius; carried for soft-rasterizer backends.
    pub blur_radius: f64,
    /// Faces blended per pixel; carried for soft-rasterizer backends.
    pub faces_per_pixel: usize,
    pub light_position: Vec3,
    /// Gaussian splat standard deviation in pixels.
    pub splat_sigma: f64,
    /// Square image side in pixels.
    pub image_size: usize,
    pub projection: Projection,
    pub distance: f64,
    /// Half-width of the visible region at depth zero, in model units.
    pub half_extent: f64,
    pub background: f64,
    /// Shade with vertex normals; when false the texture is splatted flat.
    pub shade_normals: bool,
    /// Splats are truncated beyond this many sigmas.
    pub cutoff_sigmas: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            backend: RenderBackend::Reference,
            blur_radius: 0.0,
            faces_per_pixel: 2,
            light_position: [0.0, 0.0, 3.0],
            splat_sigma: 1.5,
            image_size: 224,
            projection: Projection::Orthographic,
            distance: 3.0,
            half_extent: 1.0,
            background: 0.5,
            shade_normals: true,
            cutoff_sigmas: 6.0,
        }
    }
}

impl RenderConfig {
    /// Small-image profile used by tests and the desk-scale reference stack.
    pub fn test_profile() -> Self {
        Self {
            image_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.faces_per_pixel < 1 {
            return Err(Error::invalid("faces_per_pixel must be at least 1"));
        }
        if !(self.splat_sigma > 0.0) || !(self.half_extent > 0.0) || !(self.cutoff_sigmas > 0.0) {
            return Err(Error::invalid("splat_sigma, half_extent and cutoff_sigmas must be positive"));
        }
        if !(self.blur_radius >= 0.0) {
            return Err(Error::invalid("blur_radius must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.background) {
            return Err(Error::invalid("background must lie in [0, 1]"));
        }
        if self.light_position.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("light position must be finite"));
        }
        Ok(())
    }

    pub fn camera(&self, yaw_degrees: f64) -> CameraParams {
        CameraParams {
            yaw_degrees,
            distance: self.distance,
            image_size: (self.image_size, self.image_size),
            projection: self.projection,
        }
    }
}

/// Rendered views together with the cameras that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderSet {
    pub images: Vec<Image>,
    pub cameras: Vec<CameraParams>,
}

impl RenderSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// A differentiable renderer of textured meshes.
pub trait Renderer: Send + Sync {
    fn render(&self, mesh: &TexturedMesh, camera: &CameraParams) -> Result<Image>;

    /// Vector-Jacobian product: gradient on image pixels to gradient on
    /// vertex positions, unit normals and per-vertex base colors.
    fn backward(&self, mesh: &TexturedMesh, camera: &CameraParams, grad: &Image) -> Result<MeshGrad>;
}

/// Lambertian shading with a fixed ambient term.
///
/// Returns `clamp(base * min(1, 0.3 + max(0, n . l)), 0, 1)` where `l` is the
/// unit vector from `point` to the light.
pub fn shade(normal: &Vec3, base_color: &Vec3, light_position: &Vec3, point: &Vec3) -> Vec3 {
    let factor = ShadeState::new(normal, light_position, point).factor;
    base_color.map(|b| (b * factor).clamp(0.0, 1.0))
}

// Shading intermediates kept for the backward pass.
struct ShadeState {
    to_light: Vec3,
    light_len: f64,
    cos: f64,
    factor: f64,
}

impl ShadeState {
    fn new(normal: &Vec3, light: &Vec3, point: &Vec3) -> Self {
        let to_light = sub(light, point);
        let light_len = norm(&to_light);
        let cos = if light_len > 0.0 {
            dot(normal, &to_light) / light_len
        } else {
            0.0
        };
        let factor = (AMBIENT + cos.max(0.0)).min(1.0);
        Self {
            to_light,
            light_len,
            cos,
            factor,
        }
    }

    /// Whether `factor` currently varies with `cos`.
    fn factor_active(&self) -> bool {
        self.cos > 0.0 && AMBIENT + self.cos < 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ClampRegion {
    Below,
    Inside,
    Above,
}

fn clamp_region(x: f64) -> ClampRegion {
    if x < 0.0 {
        ClampRegion::Below
    } else if x > 1.0 {
        ClampRegion::Above
    } else {
        ClampRegion::Inside
    }
}

struct ProjectedVertex {
    sx: f64,
    sy: f64,
    color: Vec3,
}

/// Gaussian vertex-splat renderer.
#[derive(Debug, Clone)]
pub struct ReferenceRenderer {
    cfg: RenderConfig,
}

impl ReferenceRenderer {
    pub fn new(cfg: RenderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &RenderConfig {
        &self.cfg
    }

    fn perspective_scale(&self, camera: &CameraParams, z: f64) -> Result<f64> {
        let depth = camera.distance - z;
        if depth <= 1e-9 {
            return Err(Error::data("vertex lies behind the perspective camera"));
        }
        Ok(camera.distance / depth)
    }

    fn project(&self, camera: &CameraParams, p: &Vec3) -> Result<(f64, f64)> {
        let (w, h) = camera.image_size;
        let s = match camera.projection {
            Projection::Orthographic => 1.0,
            Projection::Perspective => self.perspective_scale(camera, p[2])?,
        };
        let e = self.cfg.half_extent;
        Ok((
            (0.5 + 0.5 * s * p[0] / e) * w as f64,
            (0.5 - 0.5 * s * p[1] / e) * h as f64,
        ))
    }

    fn vertex_color(&self, base: &Vec3, normal: &Vec3, point: &Vec3) -> Vec3 {
        if self.cfg.shade_normals {
            shade(normal, base, &self.cfg.light_position, point)
        } else {
            base.map(|b| b.clamp(0.0, 1.0))
        }
    }

    fn prepare(&self, mesh: &TexturedMesh, camera: &CameraParams) -> Result<Vec<ProjectedVertex>> {
        camera.validate()?;
        if mesh.normals.len() != mesh.vertex_count()
            || mesh.texture.width * mesh.texture.height != mesh.vertex_count()
        {
            return Err(Error::invalid("mesh attribute counts disagree"));
        }
        let rot = RotationY::new(camera.yaw_degrees);
        mesh.vertices
            .iter()
            .zip(&mesh.normals)
            .enumerate()
            .map(|(k, (v, n))| {
                if v.iter().chain(n).any(|x| !x.is_finite()) {
                    return Err(Error::data(format!("vertex {k} is not finite")));
                }
                let p = rot.apply(v);
                let nr = rot.apply(n);
                let (sx, sy) = self.project(camera, &p)?;
                let color = self.vertex_color(&mesh.vertex_color(k), &nr, &p);
                Ok(ProjectedVertex { sx, sy, color })
            })
            .collect()
    }

    /// Pixel window touched by a splat centered at `(sx, sy)`.
    fn window(&self, sx: f64, sy: f64, w: usize, h: usize) -> (usize, usize, usize, usize) {
        let r = self.cfg.cutoff_sigmas * self.cfg.splat_sigma;
        let lo = |c: f64| (c - r - 0.5).floor().max(0.0) as usize;
        let hi = |c: f64, n: usize| ((c + r - 0.5).ceil().max(-1.0) + 1.0).min(n as f64) as usize;
        (lo(sy), hi(sy, h), lo(sx), hi(sx, w))
    }

    fn splat_weight(&self, dx: f64, dy: f64) -> Option<f64> {
        let sigma = self.cfg.splat_sigma;
        let d2 = dx * dx + dy * dy;
        let cutoff = self.cfg.cutoff_sigmas * sigma;
        (d2 <= cutoff * cutoff).then(|| (-d2 / (2.0 * sigma * sigma)).exp())
    }

    // Per-pixel weight sum and weighted color sum, background included.
    fn accumulate(&self, verts: &[ProjectedVertex], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
        let mut wsum = vec![BACKGROUND_WEIGHT; w * h];
        let mut csum = vec![BACKGROUND_WEIGHT * self.cfg.background; w * h * 3];
        for v in verts {
            let (r0, r1, c0, c1) = self.window(v.sx, v.sy, w, h);
            for r in r0..r1 {
                let dy = r as f64 + 0.5 - v.sy;
                for c in c0..c1 {
                    let dx = c as f64 + 0.5 - v.sx;
                    if let Some(wt) = self.splat_weight(dx, dy) {
                        let p = r * w + c;
                        wsum[p] += wt;
                        for ch in 0..3 {
                            csum[p * 3 + ch] += wt * v.color[ch];
                        }
                    }
                }
            }
        }
        (wsum, csum)
    }
}

impl Renderer for ReferenceRenderer {
    fn render(&self, mesh: &TexturedMesh, camera: &CameraParams) -> Result<Image> {
        let verts = self.prepare(mesh, camera)?;
        let (w, h) = camera.image_size;
        let (wsum, csum) = self.accumulate(&verts, w, h);
        let data = csum
            .iter()
            .enumerate()
            .map(|(i, c)| (c / wsum[i / 3]).clamp(0.0, 1.0))
            .collect();
        Image::from_data(w, h, data)
    }

    fn backward(&self, mesh: &TexturedMesh, camera: &CameraParams, grad: &Image) -> Result<MeshGrad> {
        let verts = self.prepare(mesh, camera)?;
        let (w, h) = camera.image_size;
        if (grad.width, grad.height) != (w, h) {
            return Err(Error::invalid("image gradient does not match camera size"));
        }
        let (wsum, csum) = self.accumulate(&verts, w, h);
        let pixel: Vec<f64> = csum.iter().enumerate().map(|(i, c)| c / wsum[i / 3]).collect();

        let rot = RotationY::new(camera.yaw_degrees);
        let sigma2 = self.cfg.splat_sigma * self.cfg.splat_sigma;
        let e = self.cfg.half_extent;
        let mut out = MeshGrad::zeros(mesh.vertex_count());

        for (k, v) in verts.iter().enumerate() {
            let mut g_color = [0.0; 3];
            let mut g_sx = 0.0;
            let mut g_sy = 0.0;
            let (r0, r1, c0, c1) = self.window(v.sx, v.sy, w, h);
            for r in r0..r1 {
                let dy = r as f64 + 0.5 - v.sy;
                for c in c0..c1 {
                    let dx = c as f64 + 0.5 - v.sx;
                    let Some(wt) = self.splat_weight(dx, dy) else {
                        continue;
                    };
                    let p = r * w + c;
                    let inv = 1.0 / wsum[p];
                    let mut g_w = 0.0;
                    for ch in 0..3 {
                        let g = grad.data[p * 3 + ch];
                        g_color[ch] += g * wt * inv;
                        g_w += g * (v.color[ch] - pixel[p * 3 + ch]) * inv;
                    }
                    g_sx += g_w * wt * dx / sigma2;
                    g_sy += g_w * wt * dy / sigma2;
                }
            }

            let pos = rot.apply(&mesh.vertices[k]);
            let nrm = rot.apply(&mesh.normals[k]);
            let base = mesh.vertex_color(k);

            // Screen position -> rotated position.
            let mut g_pos = [0.0; 3];
            let (fw, fh) = (w as f64, h as f64);
            match camera.projection {
                Projection::Orthographic => {
                    g_pos[0] += g_sx * 0.5 * fw / e;
                    g_pos[1] -= g_sy * 0.5 * fh / e;
                }
                Projection::Perspective => {
                    let s = self.perspective_scale(camera, pos[2])?;
                    let ds = s * s / camera.distance;
                    g_pos[0] += g_sx * 0.5 * fw * s / e;
                    g_pos[1] -= g_sy * 0.5 * fh * s / e;
                    g_pos[2] += (g_sx * 0.5 * fw * pos[0] - g_sy * 0.5 * fh * pos[1]) * ds / e;
                }
            }

            // Color -> base color, normal and position (through the light direction).
            let mut g_nrm = [0.0; 3];
            let g_base = &mut out.colors[k];
            if self.cfg.shade_normals {
                let st = ShadeState::new(&nrm, &self.cfg.light_position, &pos);
                let mut g_factor = 0.0;
                for ch in 0..3 {
                    if clamp_region(base[ch] * st.factor) == ClampRegion::Inside {
                        g_base[ch] += g_color[ch] * st.factor;
                        g_factor += g_color[ch] * base[ch];
                    }
                }
                if st.factor_active() && g_factor != 0.0 {
                    let inv_len = 1.0 / st.light_len;
                    let unit = st.to_light.map(|x| x * inv_len);
                    for a in 0..3 {
                        g_nrm[a] += g_factor * unit[a];
                        // d cos / d point = -(n - cos * l) / |l|
                        g_pos[a] -= g_factor * (nrm[a] - st.cos * unit[a]) * inv_len;
                    }
                }
            } else {
                for ch in 0..3 {
                    if clamp_region(base[ch]) == ClampRegion::Inside {
                        g_base[ch] += g_color[ch];
                    }
                }
            }

            out.vertices[k] = rot.apply_transpose(&g_pos);
            out.normals[k] = rot.apply_transpose(&g_nrm);
        }
        Ok(out)
    }
}

/// Renders one view per yaw with the reference renderer.
pub fn render_views(mesh: &TexturedMesh, yaws: &[f64], cfg: &RenderConfig) -> Result<RenderSet> {
    if cfg.backend != RenderBackend::Reference {
        return Err(Error::Config(
            "external render backends must be passed explicitly via render_views_with".into(),
        ));
    }
    let renderer = ReferenceRenderer::new(cfg.clone())?;
    render_views_with(&renderer, cfg, mesh, yaws)
}

pub fn render_views_with(
    renderer: &dyn Renderer,
    cfg: &RenderConfig,
    mesh: &TexturedMesh,
    yaws: &[f64],
) -> Result<RenderSet> {
    if yaws.is_empty() {
        return Err(Error::invalid("at least one view yaw is required"));
    }
    let cameras: Vec<CameraParams> = yaws.iter().map(|&y| cfg.camera(y)).collect();
    let images = cameras
        .iter()
        .map(|cam| renderer.render(mesh, cam))
        .collect::<Result<Vec<_>>>()?;
    Ok(RenderSet { images, cameras })
}

/// Sums the backward passes of every view.
pub fn render_views_backward(
    renderer: &dyn Renderer,
    mesh: &TexturedMesh,
    cameras: &[CameraParams],
    grads: &[Image],
) -> Result<MeshGrad> {
    if cameras.len() != grads.len() {
        return Err(Error::invalid("one image gradient per view is required"));
    }
    let mut total = MeshGrad::zeros(mesh.vertex_count());
    for (cam, g) in cameras.iter().zip(grads) {
        total.accumulate(&renderer.backward(mesh, cam, g)?);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshParam {
    Vertex { vertex: usize, axis: usize },
    Normal { vertex: usize, axis: usize },
    Color { vertex: usize, channel: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientProbe {
    pub param: MeshParam,
    pub yaw_degrees: f64,
    pub pixel: (usize, usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// The two central-difference evaluations straddle a shading or clamp
    /// kink; such probes are reported but excluded from the maximum.
    pub straddles_kink: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub probes: Vec<GradientProbe>,
    pub max_rel_error: f64,
}

/// Relative error with both-zero treated as exact agreement.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares analytic pixel gradients against central differences at
/// randomly sampled (parameter, pixel) pairs.
pub fn gradient_check(
    mesh: &TexturedMesh,
    cfg: &RenderConfig,
    probes: usize,
    seed: u64,
    step: f64,
) -> Result<GradientReport> {
    if probes == 0 {
        return Err(Error::invalid("gradient_check needs at least one probe"));
    }
    let renderer = ReferenceRenderer::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = mesh.vertex_count();
    let mut out = Vec::with_capacity(probes);
    for _ in 0..probes {
        let vertex = rng.random_range(0..n);
        let axis = rng.random_range(0..3);
        let param = match rng.random_range(0..3) {
            0 => MeshParam::Vertex { vertex, axis },
            1 => MeshParam::Normal { vertex, axis },
            _ => MeshParam::Color {
                vertex,
                channel: axis,
            },
        };
        let yaw = DEFAULT_YAWS[rng.random_range(0..DEFAULT_YAWS.len())];
        let camera = cfg.camera(yaw);
        let (w, h) = camera.image_size;
        // Aim near the vertex so the probed gradient is not vanishingly small.
        let (sx, sy) = renderer.project(&camera, &RotationY::new(yaw).apply(&mesh.vertices[vertex]))?;
        let jitter = 2.0 * cfg.splat_sigma;
        let col = (sx + rng.random_range(-jitter..jitter)).floor().clamp(0.0, (w - 1) as f64) as usize;
        let row = (sy + rng.random_range(-jitter..jitter)).floor().clamp(0.0, (h - 1) as f64) as usize;
        let channel = rng.random_range(0..3);

        let mut seed_grad = Image::filled(w, h, 0.0);
        seed_grad.data[(row * w + col) * 3 + channel] = 1.0;
        let g = renderer.backward(mesh, &camera, &seed_grad)?;
        let analytic = match param {
            MeshParam::Vertex { vertex, axis } => g.vertices[vertex][axis],
            MeshParam::Normal { vertex, axis } => g.normals[vertex][axis],
            MeshParam::Color { vertex, channel } => g.colors[vertex][channel],
        };

        let perturbed = |delta: f64| -> Result<(f64, ShadeSignature)> {
            let mut m = mesh.clone();
            match param {
                MeshParam::Vertex { vertex, axis } => m.vertices[vertex][axis] += delta,
                MeshParam::Normal { vertex, axis } => m.normals[vertex][axis] += delta,
                MeshParam::Color { vertex, channel } => {
                    let w = m.texture.width;
                    let idx = m.texture.index(vertex / w, vertex % w);
                    m.texture.data[idx + channel] += delta;
                }
            }
            let img = renderer.render(&m, &camera)?;
            let sig = shade_signature(&renderer, &m, &camera, vertex);
            Ok((img.data[(row * w + col) * 3 + channel], sig))
        };
        let (plus, sig_plus) = perturbed(step)?;
        let (minus, sig_minus) = perturbed(-step)?;
        let numeric = (plus - minus) / (2.0 * step);
        out.push(GradientProbe {
            param,
            yaw_degrees: yaw,
            pixel: (row, col, channel),
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
            straddles_kink: sig_plus != sig_minus,
        });
    }
    let max_rel_error = out
        .iter()
        .filter(|p| !p.straddles_kink)
        .map(|p| p.rel_error)
        .fold(0.0, f64::max);
    Ok(GradientReport {
        probes: out,
        max_rel_error,
    })
}

type ShadeSignature = (bool, [ClampRegion; 3]);

// Which branch of the piecewise shading a vertex currently sits on.
fn shade_signature(renderer: &ReferenceRenderer, mesh: &TexturedMesh, camera: &CameraParams, k: usize) -> ShadeSignature {
    let rot = RotationY::new(camera.yaw_degrees);
    let base = mesh.vertex_color(k);
    if !renderer.cfg.shade_normals {
        return (false, base.map(clamp_region));
    }
    let st = ShadeState::new(
        &rot.apply(&mesh.normals[k]),
        &renderer.cfg.light_position,
        &rot.apply(&mesh.vertices[k]),
    );
    (st.factor_active(), base.map(|b| clamp_region(b * st.factor)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::UvMapSet;
    use crate::mesh::{assemble_mesh, MeshTopology};

    fn face_mesh(texture: f64) -> TexturedMesh {
        let (h, w) = (16, 16);
        let mut shape = Image::filled(w, h, 0.0);
        let mut normal = Image::filled(w, h, 0.0);
        let mut tex = Image::filled(w, h, texture);
        for i in 0..h {
            for j in 0..w {
                let t = (j as f64 / 15.0 - 0.5) * 1.6;
                let y = 0.8 - 1.6 * i as f64 / 15.0;
                let bump = 0.05 * (3.0 * y).sin();
                shape.set_pixel(i, j, [0.8 * t.sin(), y, 0.8 * (t.cos() - 1.0) + bump]);
                normal.set_pixel(i, j, [t.sin(), 0.3 * (2.0 * y).cos() - 0.1, t.cos()]);
                if texture > 0.0 {
                    tex.set_pixel(i, j, [0.3 + 0.02 * i as f64, 0.5, 0.2 + 0.03 * j as f64]);
                }
            }
        }
        let maps = UvMapSet::new(shape, normal, tex).unwrap();
        assemble_mesh(&maps, &MeshTopology::grid(h, w).unwrap()).unwrap()
    }

    #[test]
    fn shade_cases() {
        let base = [0.8, 0.5, 0.2];
        let light = [0.0, 0.0, 3.0];
        let origin = [0.0, 0.0, 0.0];
        assert_eq!(shade(&[0.0, 0.0, 1.0], &base, &light, &origin), base);
        let side = shade(&[1.0, 0.0, 0.0], &base, &light, &origin);
        let away = shade(&[0.0, 0.0, -1.0], &base, &light, &origin);
        for ch in 0..3 {
            assert!((side[ch] - 0.3 * base[ch]).abs() < 1e-15);
            assert!((away[ch] - 0.3 * base[ch]).abs() < 1e-15);
        }
    }

    #[test]
    fn default_views() {
        let set = render_views(&face_mesh(1.0), &DEFAULT_YAWS, &RenderConfig::test_profile()).unwrap();
        assert_eq!(set.len(), 3);
        let yaws: Vec<f64> = set.cameras.iter().map(|c| c.yaw_degrees).collect();
        assert_eq!(yaws, vec![-30.0, 3.0, 30.0]);
        for img in &set.images {
            assert_eq!((img.width, img.height), (32, 32));
            assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn empty_yaws_rejected() {
        assert!(matches!(
            render_views(&face_mesh(1.0), &[], &RenderConfig::test_profile()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn rotation_equivariance() {
        let mesh = face_mesh(1.0);
        let cfg = RenderConfig::test_profile();
        for phi in [-30.0, 3.0, 30.0, 71.5] {
            let a = render_views(&mesh.rotated_y(phi), &[0.0], &cfg).unwrap();
            let b = render_views(&mesh, &[phi], &cfg).unwrap();
            let max = a.images[0]
                .data
                .iter()
                .zip(&b.images[0].data)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(max < 1e-5, "yaw {phi}: {max}");
        }
    }

    #[test]
    fn perspective_gradients() {
        let cfg = RenderConfig {
            projection: Projection::Perspective,
            ..RenderConfig::test_profile()
        };
        let report = gradient_check(&face_mesh(1.0), &cfg, 48, 11, 1e-4).unwrap();
        assert!(report.max_rel_error < 1e-3, "{}", report.max_rel_error);
    }

    #[test]
    fn flat_shading_gradients() {
        let cfg = RenderConfig {
            shade_normals: false,
            ..RenderConfig::test_profile()
        };
        let report = gradient_check(&face_mesh(1.0), &cfg, 32, 5, 1e-3).unwrap();
        assert!(report.max_rel_error < 1e-3, "{}", report.max_rel_error);
    }

    #[test]
    fn zero_texture_probes() {
        let report = gradient_check(&face_mesh(0.0), &RenderConfig::test_profile(), 64, 3, 1e-3).unwrap();
        for p in &report.probes {
            match p.param {
                MeshParam::Normal { .. } => {
                    assert_eq!(p.analytic, 0.0);
                    assert_eq!(p.numeric, 0.0);
                    assert_eq!(p.rel_error, 0.0);
                }
                // Zero base color sits exactly on the lower clamp.
                MeshParam::Color { .. } => assert!(p.straddles_kink),
                MeshParam::Vertex { .. } => {}
            }
        }
        assert!(report.max_rel_error < 1e-3);
    }

    #[test]
    fn zero_probes_rejected() {
        assert!(gradient_check(&face_mesh(1.0), &RenderConfig::test_profile(), 0, 0, 1e-3).is_err());
    }

    #[test]
    fn rendering_is_deterministic() {
        let mesh = face_mesh(1.0);
        let cfg = RenderConfig::test_profile();
        assert_eq!(
            render_views(&mesh, &DEFAULT_YAWS, &cfg).unwrap(),
            render_views(&mesh, &DEFAULT_YAWS, &cfg).unwrap()
        );
    }

    #[test]
    fn far_pixels_show_background() {
        let cfg = RenderConfig {
            half_extent: 2.0,
            ..RenderConfig::test_profile()
        };
        let img = render_views(&face_mesh(1.0), &[0.0], &cfg).unwrap();
        assert!((img.images[0].pixel(0, 0)[0] - 0.5).abs() < 1e-12);
    }
}
