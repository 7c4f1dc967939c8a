//! Wavefront OBJ export with a material library and PNG texture.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::maps::Image;
use crate::mesh::{validate_mesh, TexturedMesh};

const MATERIAL: &str = "avatar";

/// Files produced by [`export_mesh`].
#[derive(Debug, Clone, PartialEq)]
pub struct ObjFiles {
    pub obj: PathBuf,
    pub mtl: PathBuf,
    pub texture: PathBuf,
}

/// Renders the OBJ body. `mtl_name` is written verbatim into `mtllib`.
pub fn obj_string(mesh: &TexturedMesh, mtl_name: &str) -> String {
    let mut out = String::with_capacity(mesh.vertex_count() * 96);
    let _ = writeln!(out, "# textured avatar mesh");
    let _ = writeln!(out, "mtllib {mtl_name}");
    let _ = writeln!(out, "usemtl {MATERIAL}");
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2]);
    }
    for uv in &mesh.uvs {
        let _ = writeln!(out, "vt {:.6} {:.6}", uv[0], uv[1]);
    }
    for n in &mesh.normals {
        let _ = writeln!(out, "vn {:.6} {:.6} {:.6}", n[0], n[1], n[2]);
    }
    for f in &mesh.faces {
        let [a, b, c] = f.map(|i| i + 1);
        let _ = writeln!(out, "f {a}/{a}/{a} {b}/{b}/{b} {c}/{c}/{c}");
    }
    out
}

pub fn mtl_string(texture_name: &str) -> String {
    format!(
        "newmtl {MATERIAL}\nKa 1.000000 1.000000 1.000000\nKd 1.000000 1.000000 1.000000\n\
         Ks 0.000000 0.000000 0.000000\nillum 1\nmap_Kd {texture_name}\n"
    )
}

/// Writes `path` plus sibling `.mtl` and `.png` files sharing its stem.
///
/// The texture is clamped to `[0, 1]` and quantized to 8 bits. Meshes with
/// bad indices or non-finite vertices are rejected before anything is
/// written.
pub fn export_mesh(mesh: &TexturedMesh, path: &Path) -> Result<ObjFiles> {
    let report = validate_mesh(mesh);
    if report.has_errors() {
        let first = report
            .violations
            .iter()
            .find(|v| !matches!(v, crate::mesh::Violation::DegenerateFace { .. }))
            .unwrap();
        return Err(Error::invalid(format!("refusing to export invalid mesh: {first}")));
    }
    if mesh.uvs.len() != mesh.vertex_count() || mesh.normals.len() != mesh.vertex_count() {
        return Err(Error::invalid("uv and normal counts must match vertex count"));
    }
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::invalid(format!("{} has no file stem", path.display())))?;
    let files = ObjFiles {
        obj: path.to_path_buf(),
        mtl: path.with_extension("mtl"),
        texture: path.with_extension("png"),
    };
    let mtl_name = format!("{stem}.mtl");
    let png_name = format!("{stem}.png");

    // OBJ samples v = 0 at the bottom of the image, texel row 0 has v = 0.
    let mut flipped = Image::filled(mesh.texture.width, mesh.texture.height, 0.0);
    for i in 0..mesh.texture.height {
        for j in 0..mesh.texture.width {
            flipped.set_pixel(mesh.texture.height - 1 - i, j, mesh.texture.pixel(i, j));
        }
    }

    fs::write(&files.obj, obj_string(mesh, &mtl_name)).map_err(|e| Error::io(&files.obj, e))?;
    fs::write(&files.mtl, mtl_string(&png_name)).map_err(|e| Error::io(&files.mtl, e))?;
    flipped.save_png(&files.texture).map_err(|e| match e {
        Error::Image(image::ImageError::IoError(io)) => Error::io(&files.texture, io),
        other => other,
    })?;
    Ok(files)
}
