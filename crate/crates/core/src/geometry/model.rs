use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Vec3;
use crate::error::{ensure, Error, Result};

/// Number of weights in each linear basis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeDims {
    pub beta: usize,
    pub theta: usize,
    pub psi: usize,
}

impl ShapeDims {
    pub fn total(&self) -> usize {
        self.beta + self.theta + self.psi
    }
}

impl Default for ShapeDims {
    fn default() -> Self {
        Self { beta: 8, theta: 4, psi: 4 }
    }
}

/// Identity, pose and expression blendshape weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
}

impl ShapeParams {
    pub fn zeros(dims: ShapeDims) -> Self {
        Self { beta: vec![0.0; dims.beta], theta: vec![0.0; dims.theta], psi: vec![0.0; dims.psi] }
    }

    pub fn dims(&self) -> ShapeDims {
        ShapeDims { beta: self.beta.len(), theta: self.theta.len(), psi: self.psi.len() }
    }

    /// `beta ++ theta ++ psi`.
    pub fn concat(&self) -> Vec<f64> {
        self.beta.iter().chain(&self.theta).chain(&self.psi).copied().collect()
    }
}

/// Triangle mesh with per-vertex unit normals.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub normals: Vec<Vec3>,
    /// Vertices touched by no face of positive area; their normal is +z.
    pub isolated: Vec<bool>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        validate_faces(&faces, vertices.len())?;
        let (normals, isolated) = vertex_normals(&vertices, &faces);
        Ok(Self { vertices, faces, normals, isolated })
    }

    pub fn empty() -> Self {
        Self { vertices: Vec::new(), faces: Vec::new(), normals: Vec::new(), isolated: Vec::new() }
    }

    pub fn bbox_diagonal(&self) -> f64 {
        if self.vertices.is_empty() {
            return 0.0;
        }
        let mut lo = self.vertices[0];
        let mut hi = lo;
        for v in &self.vertices {
            lo = Vec3::new(lo.x.min(v.x), lo.y.min(v.y), lo.z.min(v.z));
            hi = Vec3::new(hi.x.max(v.x), hi.y.max(v.y), hi.z.max(v.z));
        }
        (hi - lo).norm()
    }
}

fn validate_faces(faces: &[[u32; 3]], n: usize) -> Result<()> {
    for (i, f) in faces.iter().enumerate() {
        ensure(f.iter().all(|&v| (v as usize) < n), || format!("face {i} {f:?} indexes past {n} vertices"))?;
        ensure(f[0] != f[1] && f[1] != f[2] && f[0] != f[2], || format!("face {i} {f:?} repeats a vertex"))?;
    }
    Ok(())
}

/// Area-weighted vertex normals. Returns the normals and a flag for every
/// vertex that received no area (its normal defaults to +z).
pub fn vertex_normals(vertices: &[Vec3], faces: &[[u32; 3]]) -> (Vec<Vec3>, Vec<bool>) {
    let mut acc = vec![Vec3::ZERO; vertices.len()];
    for f in faces {
        let [a, b, c] = f.map(|i| vertices[i as usize]);
        // |cross| is twice the area, so this is already area weighted.
        let n = (b - a).cross(c - a);
        for &i in f {
            acc[i as usize] += n;
        }
    }
    let mut isolated = vec![false; vertices.len()];
    let normals = acc
        .into_iter()
        .enumerate()
        .map(|(i, n)| {
            let len = n.norm();
            if len > 1e-300 && len.is_finite() {
                n * (1.0 / len)
            } else {
                isolated[i] = true;
                Vec3::new(0.0, 0.0, 1.0)
            }
        })
        .collect();
    (normals, isolated)
}

/// Unit icosphere subdivided `level` times: `10·4^level + 2` vertices and
/// `20·4^level` outward-facing (counter-clockwise) triangles.
pub fn icosphere(level: u32) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalized())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut cache: HashMap<(u32, u32), u32> = HashMap::new();
        let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                verts.push(((verts[a as usize] + verts[b as usize]) * 0.5).normalized());
                (verts.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (verts, faces)
}

/// Linear head model: `base + B_β β + B_θ θ + B_ψ ψ`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendshapeModel {
    pub base_vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    /// One flattened `[N·3]` displacement field per weight.
    pub identity_basis: Vec<Vec<f64>>,
    pub pose_basis: Vec<Vec<f64>>,
    pub expression_basis: Vec<Vec<f64>>,
}

impl BlendshapeModel {
    pub fn dims(&self) -> ShapeDims {
        ShapeDims {
            beta: self.identity_basis.len(),
            theta: self.pose_basis.len(),
            psi: self.expression_basis.len(),
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.base_vertices.len()
    }

    /// All basis fields in `β, θ, ψ` order.
    pub fn all_bases(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.identity_basis.iter().chain(&self.pose_basis).chain(&self.expression_basis)
    }
}

/// Ellipsoidal head at the origin facing +z, with a nose ridge and shallow
/// eye sockets.
fn head_surface(p: Vec3) -> Vec3 {
    let mut v = Vec3::new(0.75 * p.x, 0.95 * p.y, 0.8 * p.z);
    if p.z > 0.0 {
        let g = |cx: f64, cy: f64, sx: f64, sy: f64| (-((p.x - cx) / sx).powi(2) - ((p.y - cy) / sy).powi(2)).exp();
        let nose = 0.32 * g(0.0, -0.12, 0.11, 0.22);
        let sockets = -0.07 * (g(-0.3, 0.22, 0.12, 0.09) + g(0.3, 0.22, 0.12, 0.09));
        v.z += (nose + sockets) * p.z;
    }
    v
}

/// Builds a deterministic synthetic head with orthonormal, smooth bases.
pub fn make_synthetic_model(seed: u64, dims: ShapeDims, level: u32) -> Result<BlendshapeModel> {
    ensure(dims.beta >= 1 && dims.theta >= 1 && dims.psi >= 1, || format!("every basis needs >= 1 weight, got {dims:?}"))?;
    ensure(level <= 7, || format!("tessellation level {level} is too large"))?;
    let verts = 10 * 4usize.pow(level) + 2;
    ensure(verts >= 100, || format!("level {level} gives {verts} vertices; at least 100 required"))?;
    let (sphere, faces) = icosphere(level);
    let base: Vec<Vec3> = sphere.iter().map(|&p| head_surface(p)).collect();

    // Smooth fields: random vector-valued cubic polynomials of the sphere
    // position, giving a 60-dimensional pool to orthonormalize within.
    let monomials = |p: Vec3| -> Vec<f64> {
        let mut m = Vec::with_capacity(20);
        for i in 0..=3u32 {
            for j in 0..=(3 - i) {
                for k in 0..=(3 - i - j) {
                    m.push(p.x.powi(i as i32) * p.y.powi(j as i32) * p.z.powi(k as i32));
                }
            }
        }
        m
    };
    let features: Vec<Vec<f64>> = sphere.iter().map(|&p| monomials(p)).collect();
    let n_mono = features[0].len();
    let total = dims.total();
    ensure(total <= 3 * n_mono, || format!("at most {} basis fields supported", 3 * n_mono))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fields: Vec<Vec<f64>> = Vec::with_capacity(total);
    for _ in 0..total {
        let coef: Vec<[f64; 3]> = (0..n_mono)
            .map(|_| std::array::from_fn(|_| StandardNormal.sample(&mut rng)))
            .collect();
        let mut field = Vec::with_capacity(sphere.len() * 3);
        for f in &features {
            for axis in 0..3 {
                field.push(f.iter().zip(&coef).map(|(m, c)| m * c[axis]).sum());
            }
        }
        fields.push(field);
    }
    orthonormalize(&mut fields)?;
    let expression_basis = fields.split_off(dims.beta + dims.theta);
    let pose_basis = fields.split_off(dims.beta);
    Ok(BlendshapeModel { base_vertices: base, faces, identity_basis: fields, pose_basis, expression_basis })
}

/// Modified Gram–Schmidt with one re-orthogonalization pass.
fn orthonormalize(vs: &mut [Vec<f64>]) -> Result<()> {
    for i in 0..vs.len() {
        for _ in 0..2 {
            for j in 0..i {
                let d: f64 = vs[i].iter().zip(&vs[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = vs.split_at_mut(i);
                tail[0].iter_mut().zip(&head[j]).for_each(|(a, b)| *a -= d * b);
            }
        }
        let n: f64 = vs[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        if n < 1e-9 {
            return Err(Error::invalid("basis fields are linearly dependent"));
        }
        vs[i].iter_mut().for_each(|a| *a /= n);
    }
    Ok(())
}

/// Deforms the base mesh by the given weights and recomputes normals.
pub fn apply_blendshape(model: &BlendshapeModel, s: &ShapeParams) -> Result<Mesh> {
    let (want, got) = (model.dims(), s.dims());
    ensure(want == got, || format!("shape params {got:?} do not match model {want:?}"))?;
    let mut flat: Vec<f64> = model.base_vertices.iter().flat_map(|v| v.to_array()).collect();
    let weights = s.beta.iter().chain(&s.theta).chain(&s.psi);
    for (basis, &w) in model.all_bases().zip(weights) {
        if w != 0.0 {
            flat.iter_mut().zip(basis).for_each(|(a, b)| *a += w * b);
        }
    }
    let vertices = flat.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
    Mesh::new(vertices, model.faces.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> BlendshapeModel {
        make_synthetic_model(7, ShapeDims { beta: 8, theta: 4, psi: 4 }, 3).unwrap()
    }

    #[test]
    fn icosphere_counts_follow_subdivision_formula() {
        for level in 0..4 {
            let (v, f) = icosphere(level);
            assert_eq!(v.len(), 10 * 4usize.pow(level) + 2);
            assert_eq!(f.len(), 20 * 4usize.pow(level));
        }
        let m = model();
        assert_eq!((m.base_vertices.len(), m.faces.len()), (642, 1280));
    }

    #[test]
    fn faces_are_outward() {
        let (v, f) = icosphere(2);
        for [a, b, c] in f {
            let (a, b, c) = (v[a as usize], v[b as usize], v[c as usize]);
            let n = (b - a).cross(c - a);
            assert!(n.dot(a + b + c) > 0.0);
        }
    }

    #[test]
    fn model_is_deterministic() {
        assert_eq!(model(), model());
        assert_ne!(model(), make_synthetic_model(8, ShapeDims::default(), 3).unwrap());
    }

    #[test]
    fn bases_are_orthonormal() {
        let m = model();
        let b: Vec<_> = m.all_bases().collect();
        assert_eq!(b.len(), 16);
        for i in 0..b.len() {
            for j in 0..b.len() {
                let d: f64 = b[i].iter().zip(b[j]).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-6, "gram[{i}][{j}] = {d}");
            }
        }
    }

    #[test]
    fn invalid_model_requests() {
        assert!(make_synthetic_model(0, ShapeDims { beta: 0, theta: 1, psi: 1 }, 3).is_err());
        assert!(make_synthetic_model(0, ShapeDims::default(), 1).is_err());
    }

    #[test]
    fn blendshape_zero_linearity_and_unit_norm() {
        let m = model();
        let dims = m.dims();
        let zero = apply_blendshape(&m, &ShapeParams::zeros(dims)).unwrap();
        assert_eq!(zero.vertices, m.base_vertices);

        let mut s1 = ShapeParams::zeros(dims);
        s1.beta[0] = 1.0;
        let unit = apply_blendshape(&m, &s1).unwrap();
        let disp: f64 = unit
            .vertices
            .iter()
            .zip(&m.base_vertices)
            .map(|(a, b)| (*a - *b).dot(*a - *b))
            .sum();
        assert!((disp.sqrt() - 1.0).abs() < 1e-9);

        let mut s2 = ShapeParams::zeros(dims);
        s2.psi[1] = 0.7;
        s2.theta[2] = -0.3;
        let (a, b) = (1.7, -0.4);
        let mut mix = ShapeParams::zeros(dims);
        for (dst, (x, y)) in [
            (&mut mix.beta, (&s1.beta, &s2.beta)),
            (&mut mix.theta, (&s1.theta, &s2.theta)),
            (&mut mix.psi, (&s1.psi, &s2.psi)),
        ] {
            for i in 0..dst.len() {
                dst[i] = a * x[i] + b * y[i];
            }
        }
        let vm = apply_blendshape(&m, &mix).unwrap().vertices;
        let v1 = apply_blendshape(&m, &s1).unwrap().vertices;
        let v2 = apply_blendshape(&m, &s2).unwrap().vertices;
        for i in 0..vm.len() {
            let base = m.base_vertices[i];
            let lhs = vm[i] - base;
            let rhs = (v1[i] - base) * a + (v2[i] - base) * b;
            assert!((lhs - rhs).norm() < 1e-12);
        }
    }

    #[test]
    fn blendshape_dimension_mismatch() {
        let m = model();
        let bad = ShapeParams { beta: vec![0.0; 3], theta: vec![0.0; 4], psi: vec![0.0; 4] };
        assert!(apply_blendshape(&m, &bad).is_err());
    }

    #[test]
    fn sphere_normals_match_positions() {
        // Area weighting biases normals at irregular valence-5 vertices; the
        // bias halves with each subdivision and is below 0.01 rad from level 4.
        let (v, f) = icosphere(4);
        let (n, iso) = vertex_normals(&v, &f);
        assert!(iso.iter().all(|&b| !b));
        for (p, q) in v.iter().zip(&n) {
            assert!((q.norm() - 1.0).abs() < 1e-5);
            assert!(p.dot(*q).clamp(-1.0, 1.0).acos() < 1e-2);
        }
    }

    #[test]
    fn single_triangle_and_degenerate_faces() {
        let v = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)];
        let (n, _) = vertex_normals(&v, &[[0, 1, 2]]);
        assert!(n.iter().all(|q| *q == Vec3::new(0.0, 0.0, 1.0)));

        let (sv, sf) = icosphere(2);
        let (before, _) = vertex_normals(&sv, &sf);
        let mut v2 = sv.clone();
        v2.extend([Vec3::new(5.0, 5.0, 5.0), Vec3::new(6.0, 6.0, 6.0), Vec3::new(7.0, 7.0, 7.0)]);
        let k = sv.len() as u32;
        let mut f2 = sf.clone();
        f2.push([k, k + 1, k + 2]);
        let (after, iso) = vertex_normals(&v2, &f2);
        assert_eq!(&after[..sv.len()], &before[..]);
        assert!(iso[sv.len()..].iter().all(|&b| b));
    }

    #[test]
    fn mesh_rejects_bad_faces() {
        let v = vec![Vec3::ZERO; 3];
        assert!(Mesh::new(v.clone(), vec![[0, 1, 3]]).is_err());
        assert!(Mesh::new(v, vec![[0, 1, 1]]).is_err());
    }
}
