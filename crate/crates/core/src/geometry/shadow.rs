use serde::{Deserialize, Serialize};

use super::{rasterize_fragments, Camera, Mesh, Vec3};
use crate::error::{ensure, Result};

/// An infinite straight bar (a window mullion, a branch) far away toward the
/// light, outside the camera's view. Light travels parallel to the light
/// direction `d`, so the bar's shadow on the head is the slab
/// `|p·u − center| < width / 2`, where `u ⊥ d` is the bar's cross direction
/// at angle `angle` around `d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarOccluder {
    pub angle: f64,
    pub center: f64,
    pub width: f64,
}

impl BarOccluder {
    /// The cross direction `u` for light direction `d` (unit).
    pub fn cross_direction(&self, d: Vec3) -> Vec3 {
        let helper = if d.x.abs() < 0.9 { Vec3::new(1.0, 0.0, 0.0) } else { Vec3::new(0.0, 1.0, 0.0) };
        let e1 = helper.cross(d).normalized();
        let e2 = d.cross(e1);
        e1 * self.angle.cos() + e2 * self.angle.sin()
    }

    /// Whether the ray from `p` toward `d` passes through the bar.
    pub fn blocks(&self, p: Vec3, d: Vec3) -> bool {
        (p.dot(self.cross_direction(d)) - self.center).abs() < 0.5 * self.width
    }
}

/// Möller–Trumbore intersection. Returns the ray parameter `t > 0` of the
/// hit, if any.
pub fn ray_triangle(origin: Vec3, dir: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Option<f64> {
    const EPS: f64 = 1e-12;
    let e1 = b - a;
    let e2 = c - a;
    let p = dir.cross(e2);
    let det = e1.dot(p);
    if det.abs() < EPS {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - a;
    let u = s.dot(p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(e1);
    let v = dir.dot(q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(q) * inv;
    (t > EPS).then_some(t)
}

/// Per-pixel hard shadow factor: 0 where the ray from the visible surface
/// point toward `light_dir` hits another triangle, 1 otherwise (including
/// uncovered pixels). Accelerated with a bounding-volume hierarchy.
pub fn hard_shadow_mask(mesh: &Mesh, light_dir: Vec3, cam: &Camera, width: usize, height: usize) -> Result<Vec<f64>> {
    let bvh = Bvh::build(mesh);
    shadow_pass(mesh, light_dir, cam, width, height, |o, d, skip| bvh.occluded(mesh, o, d, skip))
}

/// Reference implementation testing every triangle for every pixel.
pub fn hard_shadow_mask_brute_force(
    mesh: &Mesh,
    light_dir: Vec3,
    cam: &Camera,
    width: usize,
    height: usize,
) -> Result<Vec<f64>> {
    shadow_pass(mesh, light_dir, cam, width, height, |o, d, skip| {
        mesh.faces.iter().enumerate().any(|(i, f)| {
            i != skip && {
                let [a, b, c] = f.map(|k| mesh.vertices[k as usize]);
                ray_triangle(o, d, a, b, c).is_some()
            }
        })
    })
}

fn shadow_pass(
    mesh: &Mesh,
    light_dir: Vec3,
    cam: &Camera,
    width: usize,
    height: usize,
    occluded: impl Fn(Vec3, Vec3, usize) -> bool,
) -> Result<Vec<f64>> {
    ensure(light_dir.is_finite() && (light_dir.norm() - 1.0).abs() < 1e-6, || {
        format!("light direction {:?} must be a unit vector", light_dir.to_array())
    })?;
    let frags = rasterize_fragments(mesh, cam, width, height)?;
    let eps = 1e-4 * mesh.bbox_diagonal();
    Ok((0..width * height)
        .map(|i| match (frags.triangle[i], frags.position_at(mesh, i)) {
            (Some(tri), Some(p)) if occluded(p + light_dir * eps, light_dir, tri as usize) => 0.0,
            _ => 1.0,
        })
        .collect())
}

#[derive(Clone, Copy)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    const EMPTY: Aabb = Aabb {
        lo: Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
        hi: Vec3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
    };

    fn grow(self, p: Vec3) -> Aabb {
        Aabb {
            lo: Vec3::new(self.lo.x.min(p.x), self.lo.y.min(p.y), self.lo.z.min(p.z)),
            hi: Vec3::new(self.hi.x.max(p.x), self.hi.y.max(p.y), self.hi.z.max(p.z)),
        }
    }

    fn union(self, o: Aabb) -> Aabb {
        self.grow(o.lo).grow(o.hi)
    }

    /// Slab test; boxes are padded so borderline hits are never culled and
    /// the result agrees exactly with testing every triangle.
    fn hit(&self, origin: Vec3, inv_dir: Vec3) -> bool {
        let pad = 1e-9 * (1.0 + (self.hi - self.lo).norm());
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for (o, inv, lo, hi) in [
            (origin.x, inv_dir.x, self.lo.x, self.hi.x),
            (origin.y, inv_dir.y, self.lo.y, self.hi.y),
            (origin.z, inv_dir.z, self.lo.z, self.hi.z),
        ] {
            let (lo, hi) = (lo - pad, hi + pad);
            if inv.is_infinite() {
                if o < lo || o > hi {
                    return false;
                }
                continue;
            }
            let (a, b) = ((lo - o) * inv, (hi - o) * inv);
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        t0 <= t1
    }
}

enum Node {
    Leaf { bounds: Aabb, tris: Vec<usize> },
    Inner { bounds: Aabb, left: usize, right: usize },
}

struct Bvh {
    nodes: Vec<Node>,
}

impl Bvh {
    const LEAF: usize = 4;

    fn build(mesh: &Mesh) -> Bvh {
        let boxes: Vec<Aabb> = mesh
            .faces
            .iter()
            .map(|f| f.iter().fold(Aabb::EMPTY, |b, &k| b.grow(mesh.vertices[k as usize])))
            .collect();
        let mut bvh = Bvh { nodes: Vec::new() };
        if !boxes.is_empty() {
            bvh.split(&boxes, (0..boxes.len()).collect());
        }
        bvh
    }

    fn split(&mut self, boxes: &[Aabb], mut tris: Vec<usize>) -> usize {
        let bounds = tris.iter().fold(Aabb::EMPTY, |b, &t| b.union(boxes[t]));
        let id = self.nodes.len();
        if tris.len() <= Self::LEAF {
            self.nodes.push(Node::Leaf { bounds, tris });
            return id;
        }
        let ext = bounds.hi - bounds.lo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let key = |t: &usize| {
            let c = (boxes[*t].lo + boxes[*t].hi).to_array();
            c[axis]
        };
        tris.sort_by(|a, b| key(a).total_cmp(&key(b)));
        let right_half = tris.split_off(tris.len() / 2);
        self.nodes.push(Node::Leaf { bounds, tris: Vec::new() });
        let left = self.split(boxes, tris);
        let right = self.split(boxes, right_half);
        self.nodes[id] = Node::Inner { bounds, left, right };
        id
    }

    fn occluded(&self, mesh: &Mesh, origin: Vec3, dir: Vec3, skip: usize) -> bool {
        if self.nodes.is_empty() {
            return false;
        }
        let inv = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            match &self.nodes[n] {
                Node::Leaf { bounds, tris } => {
                    if !bounds.hit(origin, inv) {
                        continue;
                    }
                    for &t in tris {
                        if t == skip {
                            continue;
                        }
                        let [a, b, c] = mesh.faces[t].map(|k| mesh.vertices[k as usize]);
                        if ray_triangle(origin, dir, a, b, c).is_some() {
                            return true;
                        }
                    }
                }
                Node::Inner { bounds, left, right } => {
                    if bounds.hit(origin, inv) {
                        stack.push(*right);
                        stack.push(*left);
                    }
                }
            }
        }
        false
    }
}
