//! Conditioning features: oracle encodings of synthetic scenes, the sidecar
//! JSON format for externally estimated encodings, the shadow-logit
//! classifier, background masking and the shading reference.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{ensure, Error, Result};
use crate::geometry::{apply_blendshape, rasterize, BarOccluder, BlendshapeModel, Camera, RenderOutput, ShapeDims, ShapeParams, Vec3};
use crate::image::{load_mask_png, RgbImage};
use crate::network::Conditioning;
use crate::sh::{shade_point_unclamped, LightSh, LIGHT_LEN};
use crate::tensor::Tensor;

/// Ground-truth shadow logit magnitude: full cast shadow is `+SHADOW_LOGIT`,
/// none is `-SHADOW_LOGIT`.
pub const SHADOW_LOGIT: f64 = 4.0;
/// Gray albedo of the shading reference.
pub const REFERENCE_ALBEDO: f64 = 0.7;
const IDENTITY_TAG_DIM: usize = 8;
const IDENTITY_PROJECTION_SEED: u64 = 0x1D_E7_17_E5;

/// The conditioning tuple `(l, s, cam, ξ, c, bg)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub light: LightSh,
    pub shape: ShapeParams,
    pub cam: Camera,
    pub identity: Vec<f64>,
    pub shadow_logit: f64,
    /// Background in `[-1, 1]` with the head region set to 0.
    pub bg: RgbImage,
}

impl FeatureVector {
    /// `(s, cam, ξ, c)` in that order.
    pub fn nonspatial(&self) -> Vec<f64> {
        let mut v = self.shape.concat();
        v.extend([self.cam.scale, self.cam.tx, self.cam.ty]);
        v.extend(&self.identity);
        v.push(self.shadow_logit);
        v
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |key: &str, v: &[f64]| {
            if v.iter().all(|x| x.is_finite()) {
                Ok(())
            } else {
                Err(Error::NonFinite(key.into()))
            }
        };
        ensure(self.light.is_finite(), || "light has non-finite coefficients".into())?;
        finite("shape", &self.shape.concat())?;
        finite("identity", &self.identity)?;
        finite("shadow_logit", &[self.shadow_logit])?;
        self.cam.validate()?;
        finite("bg", &self.bg.pixels.iter().flatten().copied().collect::<Vec<_>>())
    }

    /// Same scene, new light and shadow logit.
    pub fn with_light(&self, light: LightSh, shadow_logit: f64) -> Self {
        Self { light, shadow_logit, ..self.clone() }
    }
}

/// Directional key light whose cast shadows the dataset can render.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyLight {
    pub direction: Vec3,
    /// Norm of its band-1 coefficients (equal per channel).
    pub strength: f64,
}

impl KeyLight {
    /// The band-1 SH coefficients of this light.
    pub fn as_sh(&self) -> LightSh {
        let d = self.direction.normalized();
        let mut l = LightSh::zeros();
        for c in 0..3 {
            l.coeffs[1][c] = self.strength * d.y;
            l.coeffs[2][c] = self.strength * d.z;
            l.coeffs[3][c] = self.strength * d.x;
        }
        l
    }
}

/// Everything needed to render one synthetic sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub shape: ShapeParams,
    pub cam: Camera,
    /// Ambient-dominated light, without the key light.
    pub base_light: LightSh,
    pub key_light: KeyLight,
    /// Fraction of the key light blocked inside hard cast shadows (from the
    /// head itself and from `occluder`); 0 means no cast shadows.
    pub shadow: f64,
    pub occluder: BarOccluder,
    pub albedo: [f64; 3],
    /// Vertical gradient, top colour then bottom colour.
    pub background: [[f64; 3]; 2],
    /// Subject id feeding the identity embedding.
    pub subject: u64,
    pub width: usize,
    pub height: usize,
}

impl SceneDescription {
    /// Total light seen by the face: base plus key light.
    pub fn light(&self) -> LightSh {
        self.base_light.add(&self.key_light.as_sh())
    }

    pub fn shadowed(&self) -> bool {
        self.shadow > 0.0
    }

    /// Linear in the shadow degree, saturating at `±SHADOW_LOGIT`.
    pub fn shadow_logit(&self) -> f64 {
        SHADOW_LOGIT * (2.0 * self.shadow.clamp(0.0, 1.0) - 1.0)
    }

    pub fn background_image(&self) -> RgbImage {
        let [top, bottom] = self.background;
        let h = self.height;
        let pixels = (0..h)
            .flat_map(|y| {
                let a = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.0 };
                let c = [0, 1, 2].map(|i| top[i] * (1.0 - a) + bottom[i] * a);
                std::iter::repeat_n(c, self.width)
            })
            .collect();
        RgbImage { width: self.width, height: h, pixels }
    }
}

/// `normalize(P · [β; tag(subject)])` with a fixed seeded Gaussian `P`.
pub fn identity_embedding(beta: &[f64], subject: u64, dim: usize) -> Result<Vec<f64>> {
    ensure(dim > 0, || "identity dimension must be positive".into())?;
    let mut tag_rng = ChaCha8Rng::seed_from_u64(subject ^ 0x5EED_0F_1D);
    let input: Vec<f64> = beta
        .iter()
        .copied()
        .chain((0..IDENTITY_TAG_DIM).map(|_| StandardNormal.sample(&mut tag_rng)))
        .collect();
    let mut p_rng = ChaCha8Rng::seed_from_u64(IDENTITY_PROJECTION_SEED ^ (input.len() as u64) << 32);
    let mut out: Vec<f64> = (0..dim)
        .map(|_| input.iter().map(|x| x * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut p_rng)).sum::<f64>())
        .collect::<Vec<f64>>();
    let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    ensure(n > 0.0, || "identity projection vanished".into())?;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Sets the head region to the fill value 0; other pixels are copied.
/// `image` is in `[-1, 1]`.
pub fn make_background(image: &RgbImage, mask: &[bool]) -> Result<RgbImage> {
    ensure(mask.len() == image.pixels.len(), || {
        format!("mask has {} entries for {} pixels", mask.len(), image.pixels.len())
    })?;
    let pixels = image.pixels.iter().zip(mask).map(|(&p, &m)| if m { [0.0; 3] } else { p }).collect();
    Ok(RgbImage { width: image.width, height: image.height, pixels })
}

/// Maps a `[0, 1]` image to `[-1, 1]`.
pub fn to_signed(img: &RgbImage) -> RgbImage {
    RgbImage { width: img.width, height: img.height, pixels: img.pixels.iter().map(|p| p.map(|v| 2.0 * v - 1.0)).collect() }
}

/// Oracle encoding of a rendered synthetic scene. `image` is the stored
/// (quantized) `[0, 1]` image the background is cut from.
pub fn oracle_encode(
    scene: &SceneDescription,
    render: &RenderOutput,
    image: &RgbImage,
    identity_dim: usize,
) -> Result<FeatureVector> {
    ensure(
        (render.width, render.height) == (scene.width, scene.height)
            && (image.width, image.height) == (scene.width, scene.height),
        || "scene, render and image sizes disagree".into(),
    )?;
    Ok(FeatureVector {
        light: scene.light(),
        shape: scene.shape.clone(),
        cam: scene.cam,
        identity: identity_embedding(&scene.shape.beta, scene.subject, identity_dim)?,
        shadow_logit: scene.shadow_logit(),
        bg: make_background(&to_signed(image), &render.mask)?,
    })
}

/// Gray-albedo render of the head under `light`, clamped to `[0, 1]`, with
/// zero outside the head.
pub fn shading_reference(
    head: &BlendshapeModel,
    light: &LightSh,
    shape: &ShapeParams,
    cam: &Camera,
    width: usize,
    height: usize,
) -> Result<RgbImage> {
    let mesh = apply_blendshape(head, shape)?;
    let a = [REFERENCE_ALBEDO; 3];
    let out = rasterize(&mesh, cam, width, height, |n| shade_point_unclamped(n, a, light).map(|v| v.clamp(0.0, 1.0)), [0.0; 3])?;
    Ok(RgbImage { width, height, pixels: out.image })
}

/// Network conditioning for one sample: the non-spatial vector, the light
/// and the 6-channel `(R, bg)` map in `[-1, 1]`.
pub fn conditioning(f: &FeatureVector, head: &BlendshapeModel) -> Result<Conditioning> {
    let (w, h) = (f.bg.width, f.bg.height);
    let reference = to_signed(&shading_reference(head, &f.light, &f.shape, &f.cam, w, h)?);
    let hw = w * h;
    let spatial = Tensor::from_fn(&[1, 6, h, w], |i| {
        let (c, p) = (i / hw, i % hw);
        (if c < 3 { reference.pixels[p][c] } else { f.bg.pixels[p][c - 3] }) as f32
    });
    let ns = f.nonspatial();
    Ok(Conditioning {
        nonspatial: Tensor::new(&[1, ns.len()], ns.iter().map(|&v| v as f32).collect())?,
        light: Tensor::new(&[1, LIGHT_LEN], f.light.to_flat().iter().map(|&v| v as f32).collect())?,
        spatial,
    })
}

/// On-disk sidecar, format version 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub version: u32,
    pub light_sh: Vec<f64>,
    pub shape: ShapeParams,
    pub cam: [f64; 3],
    pub identity: Vec<f64>,
    pub shadow_logit: f64,
    /// Image the background is cut from, relative to the sidecar.
    pub bg_path: String,
    /// Head mask, relative to the sidecar.
    pub mask_path: String,
}

/// Expected vector lengths for sidecars.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidecarDims {
    pub shape: ShapeDims,
    pub identity: usize,
}

impl Default for SidecarDims {
    fn default() -> Self {
        Self { shape: ShapeDims::default(), identity: 32 }
    }
}

const REQUIRED_KEYS: [&str; 5] = ["version", "light_sh", "cam", "bg_path", "mask_path"];
const OPTIONAL_KEYS: [&str; 3] = ["shape", "identity", "shadow_logit"];

impl Sidecar {
    pub fn from_features(f: &FeatureVector, bg_path: &str, mask_path: &str) -> Self {
        Self {
            version: 1,
            light_sh: f.light.to_flat().to_vec(),
            shape: f.shape.clone(),
            cam: [f.cam.scale, f.cam.tx, f.cam.ty],
            identity: f.identity.clone(),
            shadow_logit: f.shadow_logit,
            bg_path: bg_path.into(),
            mask_path: mask_path.into(),
        }
    }

    /// Parses and validates a sidecar document. `shape`, `identity` and
    /// `shadow_logit` may be omitted and default to zeros.
    pub fn parse(text: &str, dims: SidecarDims, path: &Path) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Json { path: path.into(), source: e })?;
        let Value::Object(mut obj) = value else {
            return Err(Error::invalid("sidecar must be a JSON object"));
        };
        if let Some(k) = obj.keys().find(|k| !REQUIRED_KEYS.contains(&k.as_str()) && !OPTIONAL_KEYS.contains(&k.as_str())) {
            return Err(Error::UnknownKey(k.clone()));
        }
        if let Some(k) = REQUIRED_KEYS.iter().find(|k| !obj.contains_key(**k)) {
            return Err(Error::MissingKey(k.to_string()));
        }
        let zeros = |n: usize| Value::from(vec![0.0; n]);
        obj.entry("shape").or_insert_with(|| {
            let mut m = Map::new();
            m.insert("beta".into(), zeros(dims.shape.beta));
            m.insert("theta".into(), zeros(dims.shape.theta));
            m.insert("psi".into(), zeros(dims.shape.psi));
            Value::Object(m)
        });
        obj.entry("identity").or_insert_with(|| zeros(dims.identity));
        obj.entry("shadow_logit").or_insert(Value::from(0.0));
        // Lengths are checked on the raw arrays so errors name the key.
        let len_of = |v: &Value| v.as_array().map(Vec::len);
        let check_len = |key: &str, v: Option<&Value>, want: usize| -> Result<()> {
            match v.and_then(len_of) {
                Some(n) if n != want => Err(Error::Length { key: key.into(), expected: want, found: n }),
                _ => Ok(()),
            }
        };
        check_len("light_sh", obj.get("light_sh"), LIGHT_LEN)?;
        check_len("cam", obj.get("cam"), 3)?;
        check_len("identity", obj.get("identity"), dims.identity)?;
        if let Some(Value::Object(s)) = obj.get("shape") {
            check_len("shape.beta", s.get("beta"), dims.shape.beta)?;
            check_len("shape.theta", s.get("theta"), dims.shape.theta)?;
            check_len("shape.psi", s.get("psi"), dims.shape.psi)?;
        }
        let sc: Sidecar =
            serde_json::from_value(Value::Object(obj)).map_err(|e| Error::Json { path: path.into(), source: e })?;
        ensure(sc.version == 1, || format!("unsupported sidecar version {}", sc.version))?;
        let finite = |key: &str, v: &[f64]| {
            if v.iter().all(|x| x.is_finite()) {
                Ok(())
            } else {
                Err(Error::NonFinite(key.into()))
            }
        };
        finite("light_sh", &sc.light_sh)?;
        finite("cam", &sc.cam)?;
        finite("identity", &sc.identity)?;
        finite("shape", &sc.shape.concat())?;
        finite("shadow_logit", &[sc.shadow_logit])?;
        Camera::new(sc.cam[0], sc.cam[1], sc.cam[2])?;
        Ok(sc)
    }

    pub fn read(path: &Path, dims: SidecarDims) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, dims, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Json { path: path.into(), source: e })?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    fn resolve(&self, sidecar_path: &Path, rel: &str) -> PathBuf {
        sidecar_path.parent().unwrap_or(Path::new(".")).join(rel)
    }
}

/// A sidecar resolved against its images.
#[derive(Clone, Debug, PartialEq)]
pub struct Imported {
    pub sidecar: Sidecar,
    pub features: FeatureVector,
    pub mask: Vec<bool>,
}

/// Reads a sidecar and the images it references; the background is cut
/// from `bg_path` using `mask_path`.
pub fn import_sidecar(path: &Path, dims: SidecarDims) -> Result<Imported> {
    let sidecar = Sidecar::read(path, dims)?;
    let image = RgbImage::load_png(&sidecar.resolve(path, &sidecar.bg_path))?;
    let mask_path = sidecar.resolve(path, &sidecar.mask_path);
    let (mw, mh, mask) = load_mask_png(&mask_path)?;
    ensure((mw, mh) == (image.width, image.height), || {
        format!("mask {} is {mw}x{mh}, image is {}x{}", mask_path.display(), image.width, image.height)
    })?;
    let features = FeatureVector {
        light: LightSh::from_flat(&sidecar.light_sh)?,
        shape: sidecar.shape.clone(),
        cam: Camera::new(sidecar.cam[0], sidecar.cam[1], sidecar.cam[2])?,
        identity: sidecar.identity.clone(),
        shadow_logit: sidecar.shadow_logit,
        bg: make_background(&to_signed(&image), &mask)?,
    };
    Ok(Imported { sidecar, features, mask })
}

/// Logistic-regression shadow classifier, `c = w·z + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
}

pub const CLASSIFIER_L2: f64 = 1e-3;

/// Pre-sigmoid logit.
pub fn shadow_logit(clf: &ShadowClassifier, z: &[f64]) -> f64 {
    clf.weights.iter().zip(z).map(|(w, x)| w * x).sum::<f64>() + clf.bias
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Objective `mean(CE) + λ/2·‖w‖²` and its gradient (bias unpenalized).
fn objective(z: &[Vec<f64>], y: &[bool], w: &[f64], b: f64) -> (f64, Vec<f64>, f64) {
    let n = z.len() as f64;
    let mut gw = w.iter().map(|v| CLASSIFIER_L2 * v).collect::<Vec<_>>();
    let mut gb = 0.0;
    let mut loss = 0.5 * CLASSIFIER_L2 * w.iter().map(|v| v * v).sum::<f64>();
    for (x, &label) in z.iter().zip(y) {
        let s = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b;
        let t = if label { 1.0 } else { 0.0 };
        // log(1 + e^s) − t·s, computed stably.
        loss += (s.max(0.0) + (-s.abs()).exp().ln_1p() - t * s) / n;
        let r = (sigmoid(s) - t) / n;
        gw.iter_mut().zip(x).for_each(|(g, v)| *g += r * v);
        gb += r;
    }
    (loss, gw, gb)
}

/// Gradient descent with backtracking on the L2-penalized cross-entropy,
/// from zero, until the gradient norm drops below 1e-6 or 10⁴ iterations.
pub fn fit_shadow_classifier(z: &[Vec<f64>], labels: &[bool]) -> Result<ShadowClassifier> {
    ensure(z.len() == labels.len() && !z.is_empty(), || "need one label per embedding".into())?;
    let d = z[0].len();
    ensure(z.iter().all(|v| v.len() == d && v.iter().all(|x| x.is_finite())), || {
        "embeddings must share a dimension and be finite".into()
    })?;
    let pos = labels.iter().filter(|&&l| l).count();
    ensure(pos >= 2 && labels.len() - pos >= 2, || "need at least two examples of each class".into())?;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut step = 1.0;
    for _ in 0..10_000 {
        let (loss, gw, gb) = objective(z, labels, &w, b);
        let gnorm2 = gw.iter().map(|g| g * g).sum::<f64>() + gb * gb;
        if gnorm2.sqrt() < 1e-6 {
            break;
        }
        // Armijo backtracking keeps plain gradient descent monotone.
        loop {
            let w2: Vec<f64> = w.iter().zip(&gw).map(|(a, g)| a - step * g).collect();
            let b2 = b - step * gb;
            if objective(z, labels, &w2, b2).0 <= loss - 0.5 * step * gnorm2 || step < 1e-12 {
                w = w2;
                b = b2;
                break;
            }
            step *= 0.5;
        }
        step *= 2.0;
    }
    Ok(ShadowClassifier { weights: w, bias: b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_synthetic_model;
    use crate::image::save_mask_png;
    use rand::Rng;

    fn scene() -> SceneDescription {
        SceneDescription {
            shape: ShapeParams { beta: vec![0.5; 8], theta: vec![0.0; 4], psi: vec![-0.2; 4] },
            cam: Camera::new(0.85, 0.02, -0.01).unwrap(),
            base_light: LightSh::ambient(2.0),
            key_light: KeyLight { direction: Vec3::new(0.6, 0.2, 0.77).normalized(), strength: 0.8 },
            shadow: 1.0,
            occluder: BarOccluder { angle: 0.3, center: 0.1, width: 0.5 },
            albedo: [0.6, 0.5, 0.4],
            background: [[0.2, 0.3, 0.4], [0.6, 0.5, 0.3]],
            subject: 17,
            width: 16,
            height: 16,
        }
    }

    fn render(s: &SceneDescription) -> (RenderOutput, RgbImage) {
        let head = make_synthetic_model(1, ShapeDims::default(), 3).unwrap();
        let mesh = apply_blendshape(&head, &s.shape).unwrap();
        let l = s.light();
        let out = rasterize(&mesh, &s.cam, s.width, s.height, |n| shade_point_unclamped(n, s.albedo, &l), [0.5; 3]).unwrap();
        let img = RgbImage::new(s.width, s.height, out.image.clone()).unwrap().quantized();
        (out, img)
    }

    #[test]
    fn oracle_encoding_rules() {
        let s = scene();
        let (out, img) = render(&s);
        let f = oracle_encode(&s, &out, &img, 32).unwrap();
        assert_eq!(f.shadow_logit, 4.0);
        assert!((f.identity.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        assert_eq!(f.nonspatial().len(), 16 + 3 + 32 + 1);
        let mut other = s.clone();
        other.base_light = LightSh::ambient(3.0);
        other.shadow = 0.0;
        let g = oracle_encode(&other, &out, &img, 32).unwrap();
        assert_eq!(f.identity, g.identity);
        assert_eq!(g.shadow_logit, -4.0);
        other.shadow = 0.5;
        assert_eq!(other.shadow_logit(), 0.0);
        assert_ne!(f.light, g.light);
        // Identity depends on β and the subject only.
        let mut third = s.clone();
        third.subject = 18;
        assert_ne!(oracle_encode(&third, &out, &img, 32).unwrap().identity, f.identity);
        for (p, &m) in f.bg.pixels.iter().zip(&out.mask) {
            if m {
                assert_eq!(*p, [0.0; 3]);
            }
        }
        let mut bad = s.clone();
        bad.width = 8;
        assert!(oracle_encode(&bad, &out, &img, 32).is_err());
    }

    #[test]
    fn background_masking() {
        let img = RgbImage::new(2, 2, vec![[0.5, -0.5, 0.25]; 4]).unwrap();
        assert_eq!(make_background(&img, &[false; 4]).unwrap(), img);
        assert!(make_background(&img, &[true; 4]).unwrap().pixels.iter().all(|p| *p == [0.0; 3]));
        let checker = [true, false, false, true];
        let bg = make_background(&img, &checker).unwrap();
        for (i, &m) in checker.iter().enumerate() {
            assert_eq!(bg.pixels[i], if m { [0.0; 3] } else { img.pixels[i] });
        }
        assert!(make_background(&img, &[true; 3]).is_err());
    }

    #[test]
    fn sidecar_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let s = scene();
        let (out, img) = render(&s);
        img.save_png(&dir.path().join("a.png")).unwrap();
        save_mask_png(&dir.path().join("a.mask.png"), 16, 16, &out.mask).unwrap();
        let f = oracle_encode(&s, &out, &img, 32).unwrap();
        let sc = Sidecar::from_features(&f, "a.png", "a.mask.png");
        let p = dir.path().join("a.json");
        sc.write(&p).unwrap();
        let imported = import_sidecar(&p, SidecarDims::default()).unwrap();
        assert_eq!(imported.features, f);
        assert_eq!(imported.mask, out.mask);
        assert_eq!(Sidecar::from_features(&imported.features, "a.png", "a.mask.png"), sc);

        let dims = SidecarDims::default();
        let mut v: Value = serde_json::to_value(&sc).unwrap();
        v["light_sh"] = Value::from(vec![0.0; 26]);
        match Sidecar::parse(&v.to_string(), dims, &p) {
            Err(Error::Length { key, expected: 27, found: 26 }) => assert_eq!(key, "light_sh"),
            other => panic!("unexpected {other:?}"),
        }
        let mut v: Value = serde_json::to_value(&sc).unwrap();
        v["extra"] = Value::from(1);
        assert!(matches!(Sidecar::parse(&v.to_string(), dims, &p), Err(Error::UnknownKey(k)) if k == "extra"));
        let mut v: Value = serde_json::to_value(&sc).unwrap();
        v.as_object_mut().unwrap().remove("cam");
        assert!(matches!(Sidecar::parse(&v.to_string(), dims, &p), Err(Error::MissingKey(k)) if k == "cam"));
        let text = serde_json::to_string(&sc).unwrap().replace("\"shadow_logit\":4.0", "\"shadow_logit\":1e999");
        assert!(Sidecar::parse(&text, dims, &p).is_err());

        let minimal = r#"{"version":1,"light_sh":[3.5449077,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0],
            "cam":[1.0,0.0,0.0],"bg_path":"a.png","mask_path":"a.mask.png"}"#;
        let m = Sidecar::parse(minimal, dims, &p).unwrap();
        assert_eq!(m.shape, ShapeParams::zeros(dims.shape));
        assert_eq!(m.identity, vec![0.0; 32]);
        assert_eq!(m.shadow_logit, 0.0);
    }

    #[test]
    fn classifier_fits() {
        // Separable toy set.
        let z: Vec<Vec<f64>> = vec![vec![2.0, 1.0], vec![1.5, 2.0], vec![-1.0, -2.0], vec![-2.0, -0.5]];
        let y = [true, true, false, false];
        let clf = fit_shadow_classifier(&z, &y).unwrap();
        assert!(z.iter().zip(y).all(|(x, l)| (shadow_logit(&clf, x) > 0.0) == l));
        // Symmetric points: zero bias.
        let v = vec![0.7, -0.3];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let sym = fit_shadow_classifier(&[v.clone(), v.clone(), neg.clone(), neg], &[true, true, false, false]).unwrap();
        assert!(sym.bias.abs() < 1e-3);
        assert_eq!(shadow_logit(&ShadowClassifier { weights: vec![0.0; 2], bias: 0.3 }, &v), 0.3);
        assert!(fit_shadow_classifier(&z, &[true; 4]).is_err());
    }

    #[test]
    fn classifier_matches_newton_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut z = Vec::new();
        let mut y = Vec::new();
        for i in 0..200 {
            let label = i % 2 == 0;
            let c = if label { [1.0, 0.5, -0.2] } else { [-0.5, -0.2, 0.4] };
            z.push(c.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>());
            y.push(label);
        }
        let gd = fit_shadow_classifier(&z, &y).unwrap();
        let (w, b) = newton_oracle(&z, &y);
        let acc = |f: &dyn Fn(&[f64]) -> f64| z.iter().zip(&y).filter(|(x, &l)| (f(x) > 0.0) == l).count() as f64 / 200.0;
        let a1 = acc(&|x| shadow_logit(&gd, x));
        let a2 = acc(&|x| x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b);
        assert!((a1 - a2).abs() <= 0.01, "{a1} vs {a2}");
        assert!(gd.weights.iter().zip(&w).all(|(a, b)| (a - b).abs() < 1e-3));
    }

    /// Independent fit: Newton–Raphson (IRLS) on the same objective with a
    /// dense normal-equation solve.
    fn newton_oracle(z: &[Vec<f64>], y: &[bool]) -> (Vec<f64>, f64) {
        let d = z[0].len() + 1;
        let n = z.len() as f64;
        let mut theta = vec![0.0; d];
        for _ in 0..50 {
            let mut h = vec![vec![0.0; d]; d];
            let mut g = vec![0.0; d];
            for (x, &l) in z.iter().zip(y) {
                let xa: Vec<f64> = x.iter().copied().chain([1.0]).collect();
                let s: f64 = xa.iter().zip(&theta).map(|(a, b)| a * b).sum();
                let p = sigmoid(s);
                let t = if l { 1.0 } else { 0.0 };
                for i in 0..d {
                    g[i] += (p - t) * xa[i] / n;
                    for j in 0..d {
                        h[i][j] += p * (1.0 - p) * xa[i] * xa[j] / n;
                    }
                }
            }
            for i in 0..d - 1 {
                g[i] += CLASSIFIER_L2 * theta[i];
                h[i][i] += CLASSIFIER_L2;
            }
            // Gaussian elimination for h·δ = g.
            let mut a: Vec<Vec<f64>> = h.iter().zip(&g).map(|(r, &gi)| r.iter().copied().chain([gi]).collect()).collect();
            for c in 0..d {
                let piv = (c..d).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
                a.swap(c, piv);
                for r in 0..d {
                    if r != c {
                        let f = a[r][c] / a[c][c];
                        for k in c..=d {
                            a[r][k] -= f * a[c][k];
                        }
                    }
                }
            }
            for i in 0..d {
                theta[i] -= a[i][d] / a[i][i];
            }
        }
        let b = theta.pop().unwrap();
        (theta, b)
    }
}
