use serde::{Deserialize, Serialize};

use super::{Mesh, Vec3};
use crate::error::{ensure, Result};

/// Orthographic camera: isotropic scale followed by a 2D translation, in
/// normalized image-plane units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct Camera {
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Camera {
    pub fn new(scale: f64, tx: f64, ty: f64) -> Result<Self> {
        let cam = Self { scale, tx, ty };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.scale > 0.0 && self.scale.is_finite(), || format!("camera scale {} must be > 0", self.scale))?;
        ensure(self.tx.is_finite() && self.ty.is_finite(), || "camera translation must be finite".into())
    }
}

impl TryFrom<[f64; 3]> for Camera {
    type Error = crate::Error;
    fn try_from(a: [f64; 3]) -> Result<Self> {
        Camera::new(a[0], a[1], a[2])
    }
}

impl From<Camera> for [f64; 3] {
    fn from(c: Camera) -> Self {
        [c.scale, c.tx, c.ty]
    }
}

/// Maps a model-space point to `(px, py, depth)`: pixel coordinates with y
/// pointing down, and depth `-z` (the camera looks down -z, smaller is
/// nearer).
pub fn project(cam: &Camera, v: Vec3, width: usize, height: usize) -> (f64, f64, f64) {
    let px = (cam.scale * (v.x + cam.tx) + 1.0) / 2.0 * width as f64;
    let py = (1.0 - (cam.scale * (v.y + cam.ty) + 1.0) / 2.0) * height as f64;
    (px, py, -v.z)
}

/// Per-pixel visibility: winning triangle and its barycentric weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Fragments {
    pub width: usize,
    pub height: usize,
    /// Winning triangle per pixel, `None` where nothing was drawn.
    pub triangle: Vec<Option<u32>>,
    pub bary: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
}

impl Fragments {
    pub fn mask(&self) -> Vec<bool> {
        self.triangle.iter().map(Option::is_some).collect()
    }

    /// Barycentric blend of vertex normals, renormalized.
    pub fn normal_at(&self, mesh: &Mesh, pixel: usize) -> Option<Vec3> {
        let tri = self.triangle[pixel]?;
        let f = mesh.faces[tri as usize];
        let b = self.bary[pixel];
        let n = (0..3).fold(Vec3::ZERO, |acc, i| acc + mesh.normals[f[i] as usize] * b[i]);
        Some(n.normalized())
    }

    pub fn position_at(&self, mesh: &Mesh, pixel: usize) -> Option<Vec3> {
        let tri = self.triangle[pixel]?;
        let f = mesh.faces[tri as usize];
        let b = self.bary[pixel];
        Some((0..3).fold(Vec3::ZERO, |acc, i| acc + mesh.vertices[f[i] as usize] * b[i]))
    }
}

/// Z-buffered visibility pass. Triangles are visited in index order and a
/// fragment only replaces a strictly farther one, so the lower index wins
/// ties. Back faces (geometric normal pointing away from +z) are skipped.
pub fn rasterize_fragments(mesh: &Mesh, cam: &Camera, width: usize, height: usize) -> Result<Fragments> {
    ensure(width > 0 && height > 0, || format!("image size {width}x{height} must be non-zero"))?;
    cam.validate()?;
    let n = width * height;
    let mut frags = Fragments {
        width,
        height,
        triangle: vec![None; n],
        bary: vec![[0.0; 3]; n],
        depth: vec![f64::INFINITY; n],
    };
    let projected: Vec<(f64, f64, f64)> = mesh.vertices.iter().map(|&v| project(cam, v, width, height)).collect();
    for (ti, f) in mesh.faces.iter().enumerate() {
        let [a, b, c] = f.map(|i| mesh.vertices[i as usize]);
        if (b - a).cross(c - a).z <= 0.0 {
            continue;
        }
        let p = f.map(|i| projected[i as usize]);
        let area = edge(p[0], p[1], p[2].0, p[2].1);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        let min_x = p.iter().map(|q| q.0).fold(f64::INFINITY, f64::min);
        let max_x = p.iter().map(|q| q.0).fold(f64::NEG_INFINITY, f64::max);
        let min_y = p.iter().map(|q| q.1).fold(f64::INFINITY, f64::min);
        let max_y = p.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max);
        let x0 = (min_x - 0.5).ceil().max(0.0) as usize;
        let y0 = (min_y - 0.5).ceil().max(0.0) as usize;
        let x1 = ((max_x - 0.5).floor()).min(width as f64 - 1.0);
        let y1 = ((max_y - 0.5).floor()).min(height as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let (x1, y1) = (x1 as usize, y1 as usize);
        for y in y0..=y1 {
            let cy = y as f64 + 0.5;
            for x in x0..=x1 {
                let cx = x as f64 + 0.5;
                let w0 = edge(p[1], p[2], cx, cy) / area;
                let w1 = edge(p[2], p[0], cx, cy) / area;
                let w2 = edge(p[0], p[1], cx, cy) / area;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let d = w0 * p[0].2 + w1 * p[1].2 + w2 * p[2].2;
                let idx = y * width + x;
                if d < frags.depth[idx] {
                    frags.depth[idx] = d;
                    frags.triangle[idx] = Some(ti as u32);
                    frags.bary[idx] = [w0, w1, w2];
                }
            }
        }
    }
    Ok(frags)
}

fn edge(a: (f64, f64, f64), b: (f64, f64, f64), x: f64, y: f64) -> f64 {
    (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)
}

/// Linear RGB image with coverage mask and depth.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB; pixels outside the mask hold the background fill.
    pub image: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
    /// `-z` of the visible surface inside the mask, `+inf` elsewhere.
    pub depth: Vec<f64>,
}

/// Renders `mesh`, shading each covered pixel with `shade(normal)` on the
/// interpolated, renormalized vertex normal.
pub fn rasterize(
    mesh: &Mesh,
    cam: &Camera,
    width: usize,
    height: usize,
    shade: impl Fn(Vec3) -> [f64; 3],
    background: [f64; 3],
) -> Result<RenderOutput> {
    let frags = rasterize_fragments(mesh, cam, width, height)?;
    let image = (0..width * height)
        .map(|i| frags.normal_at(mesh, i).map_or(background, &shade))
        .collect();
    Ok(RenderOutput { width, height, image, mask: frags.mask(), depth: frags.depth })
}
