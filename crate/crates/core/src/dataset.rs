//! Deterministic synthetic dataset: rendered heads with exact lighting
//! ground truth, their masks and sidecars, and relit evaluation pairs.
//!
//! Every scene is a pure function of `(spec.seed, index)`, so the
//! generator can run in parallel and any sample can be re-rendered later
//! under a different light.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{conditioning, oracle_encode, KeyLight, SceneDescription, Sidecar, SidecarDims};
use crate::error::{ensure, Error, Result};
use crate::geometry::{
    apply_blendshape, hard_shadow_mask, make_synthetic_model, rasterize_fragments, BarOccluder, BlendshapeModel, Camera,
    RenderOutput, ShapeDims, ShapeParams, Vec3,
};
use crate::image::{save_mask_png, RgbImage};
use crate::network::Conditioning;
use crate::sh::{sample_plausible_light, sh_basis_unchecked, LightSampling, LightSh};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PAIRS_DIR: &str = "pairs";

/// Key-light ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyLightSampling {
    /// Angle between the light and the camera axis, degrees.
    pub off_axis_deg: [f64; 2],
    pub strength: [f64; 2],
}

impl Default for KeyLightSampling {
    fn default() -> Self {
        Self { off_axis_deg: [40.0, 70.0], strength: [0.8, 1.2] }
    }
}

/// Off-screen bar occluders for shadowed scenes, in head-model units (the
/// template head has unit radius).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OccluderSampling {
    /// Offset of the bar's shadow from the head centre.
    pub center: [f64; 2],
    pub width: [f64; 2],
}

impl Default for OccluderSampling {
    fn default() -> Self {
        Self { center: [-0.5, 0.5], width: [0.4, 0.9] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSampling {
    pub scale: f64,
    /// Relative scale jitter, uniform in `±scale_jitter`.
    pub scale_jitter: f64,
    /// Translations are uniform in `±translate`.
    pub translate: f64,
}

impl Default for CameraSampling {
    fn default() -> Self {
        Self { scale: 0.9, scale_jitter: 0.05, translate: 0.04 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub count: usize,
    pub resolution: usize,
    pub seed: u64,
    /// Ambient-dominated base light.
    pub light: LightSampling,
    pub key_light: KeyLightSampling,
    pub shape_std: f64,
    pub camera: CameraSampling,
    pub shadow_probability: f64,
    /// Range of the shadow degree of shadowed scenes.
    pub shadow_degree: [f64; 2],
    pub occluder: OccluderSampling,
    pub albedo_palette: Vec<[f64; 3]>,
    /// Background gradients run between two entries of this palette.
    pub background_palette: Vec<[f64; 3]>,
    /// `(train, val, test)` fractions.
    pub split: [f64; 3],
    pub head_model_seed: u64,
    pub head_model_level: u32,
    pub shape_dims: ShapeDims,
    pub identity_dim: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 2000,
            resolution: 32,
            seed: 0,
            light: LightSampling { band0: [1.4, 2.2], band1_strength: [0.1, 0.35], ..Default::default() },
            key_light: KeyLightSampling::default(),
            shape_std: 1.2,
            camera: CameraSampling::default(),
            shadow_probability: 0.5,
            shadow_degree: [0.0, 1.0],
            occluder: OccluderSampling::default(),
            albedo_palette: vec![
                [0.75, 0.60, 0.50],
                [0.70, 0.54, 0.45],
                [0.62, 0.48, 0.40],
                [0.72, 0.63, 0.56],
                [0.55, 0.45, 0.38],
            ],
            background_palette: vec![
                [0.20, 0.25, 0.35],
                [0.55, 0.55, 0.50],
                [0.35, 0.45, 0.30],
                [0.65, 0.50, 0.40],
                [0.15, 0.15, 0.18],
                [0.45, 0.40, 0.55],
            ],
            split: [0.9, 0.05, 0.05],
            head_model_seed: 1,
            head_model_level: 4,
            shape_dims: ShapeDims::default(),
            identity_dim: 32,
        }
    }
}

/// Dataset split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(self.count >= 1, || "count must be >= 1".into())?;
        ensure(self.resolution >= 4, || "resolution must be >= 4".into())?;
        self.light.validate()?;
        let ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        ensure(ok(self.key_light.off_axis_deg) && self.key_light.off_axis_deg[0] >= 0.0 && self.key_light.off_axis_deg[1] <= 90.0, || {
            "key light off-axis range must lie in [0, 90] degrees".into()
        })?;
        ensure(ok(self.key_light.strength) && self.key_light.strength[0] >= 0.0, || "key light strength range is invalid".into())?;
        ensure(self.shape_std >= 0.0 && self.shape_std.is_finite(), || "shape_std must be >= 0".into())?;
        let c = &self.camera;
        ensure(c.scale > 0.0 && (0.0..1.0).contains(&c.scale_jitter) && c.translate >= 0.0, || "camera sampling is invalid".into())?;
        ensure((0.0..=1.0).contains(&self.shadow_probability), || "shadow_probability must be in [0, 1]".into())?;
        let sd = self.shadow_degree;
        ensure(ok(sd) && sd[0] >= 0.0 && sd[1] <= 1.0, || "shadow_degree must be an ordered range in [0, 1]".into())?;
        let o = &self.occluder;
        ensure(ok(o.center) && ok(o.width) && o.width[0] >= 0.0, || "occluder sampling is invalid".into())?;
        let palette_ok = |p: &[[f64; 3]]| !p.is_empty() && p.iter().flatten().all(|v| (0.0..=1.0).contains(v));
        ensure(palette_ok(&self.albedo_palette), || "albedo palette must be non-empty with values in [0, 1]".into())?;
        ensure(palette_ok(&self.background_palette), || "background palette must be non-empty with values in [0, 1]".into())?;
        ensure(self.split.iter().all(|f| *f >= 0.0) && (self.split.iter().sum::<f64>() - 1.0).abs() < 1e-9, || {
            format!("split fractions {:?} must be non-negative and sum to 1", self.split)
        })?;
        ensure(self.identity_dim >= 1, || "identity_dim must be >= 1".into())
    }

    pub fn counts(&self) -> SplitCounts {
        let val = (self.count as f64 * self.split[1]).round() as usize;
        let test = ((self.count as f64 * self.split[2]).round() as usize).min(self.count - val);
        SplitCounts { train: self.count - val - test, val, test }
    }

    /// Split of a sample; indices are assigned train, then val, then test.
    pub fn split_of(&self, index: usize) -> Split {
        let c = self.counts();
        if index < c.train {
            Split::Train
        } else if index < c.train + c.val {
            Split::Val
        } else {
            Split::Test
        }
    }

    pub fn indices(&self, split: Split) -> std::ops::Range<usize> {
        let c = self.counts();
        match split {
            Split::Train => 0..c.train,
            Split::Val => c.train..c.train + c.val,
            Split::Test => c.train + c.val..self.count,
        }
    }

    pub fn head_model(&self) -> Result<BlendshapeModel> {
        make_synthetic_model(self.head_model_seed, self.shape_dims, self.head_model_level)
    }

    pub fn sidecar_dims(&self) -> SidecarDims {
        SidecarDims { shape: self.shape_dims, identity: self.identity_dim }
    }
}

/// Key light with a uniformly random azimuth.
pub fn sample_key_light(rng: &mut impl Rng, cfg: &KeyLightSampling) -> KeyLight {
    let [lo, hi] = cfg.off_axis_deg.map(f64::to_radians);
    let theta = rng.random_range(lo..=hi);
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let direction = Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
    KeyLight { direction, strength: rng.random_range(cfg.strength[0]..=cfg.strength[1]) }
}

/// 0 with probability `1 - shadow_probability`, else uniform over
/// `shadow_degree`.
pub fn sample_shadow(rng: &mut impl Rng, spec: &DatasetSpec) -> f64 {
    let [lo, hi] = spec.shadow_degree;
    let shadowed = rng.random_bool(spec.shadow_probability);
    let degree = rng.random_range(lo..=hi);
    if shadowed {
        degree
    } else {
        0.0
    }
}

pub fn sample_occluder(rng: &mut impl Rng, cfg: &OccluderSampling) -> BarOccluder {
    BarOccluder {
        angle: rng.random_range(0.0..std::f64::consts::TAU),
        center: rng.random_range(cfg.center[0]..=cfg.center[1]),
        width: rng.random_range(cfg.width[0]..=cfg.width[1]),
    }
}

/// Scene `index`; a pure function of the spec seed and the index.
pub fn draw_scene(spec: &DatasetSpec, index: usize) -> Result<SceneDescription> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let normal = Normal::new(0.0, spec.shape_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| if spec.shape_std > 0.0 { normal.sample(rng) } else { 0.0 }).collect()
    };
    let d = spec.shape_dims;
    let shape = ShapeParams { beta: draw(d.beta, &mut rng), theta: draw(d.theta, &mut rng), psi: draw(d.psi, &mut rng) };
    let c = &spec.camera;
    let sym = |r: f64, rng: &mut ChaCha8Rng| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let cam = Camera::new(
        c.scale * (1.0 + sym(c.scale_jitter, &mut rng)),
        sym(c.translate, &mut rng),
        sym(c.translate, &mut rng),
    )?;
    let base_light = sample_plausible_light(rng.random(), &spec.light)?;
    let key_light = sample_key_light(&mut rng, &spec.key_light);
    let shadow = sample_shadow(&mut rng, spec);
    let albedo = spec.albedo_palette[rng.random_range(0..spec.albedo_palette.len())];
    let bp = &spec.background_palette;
    let background = [bp[rng.random_range(0..bp.len())], bp[rng.random_range(0..bp.len())]];
    let occluder = sample_occluder(&mut rng, &spec.occluder);
    Ok(SceneDescription {
        shape,
        cam,
        base_light,
        key_light,
        shadow,
        occluder,
        albedo,
        background,
        subject: index as u64,
        width: spec.resolution,
        height: spec.resolution,
    })
}

/// Key-light irradiance (channel mean) below which a shadow changes nothing
/// visible.
const KEY_LIT: f64 = 0.02;

/// A rendered scene plus its key-light visibility (1 lit, 0 in cast shadow).
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRender {
    pub output: RenderOutput,
    pub visibility: Vec<f64>,
    /// Per-pixel directional key-light irradiance before shadowing, channel
    /// mean, clamped at zero; zero outside the head.
    pub key_irradiance: Vec<f64>,
}

impl SceneRender {
    pub fn image(&self) -> RgbImage {
        RgbImage { width: self.output.width, height: self.output.height, pixels: self.output.image.clone() }
    }

    /// Covered pixels that face the key light but are cut off from it, i.e.
    /// cast shadow rather than the attached shadow of surfaces turned away.
    pub fn shadow_region(&self) -> Vec<bool> {
        (0..self.visibility.len())
            .map(|i| self.output.mask[i] && self.visibility[i] < 0.5 && self.key_irradiance[i] > KEY_LIT)
            .collect()
    }
}

/// Renders the head under base + key light. Cast shadows remove only the
/// key light's directional contribution, so shadowed skin stays lit by the
/// ambient term.
pub fn render_scene(scene: &SceneDescription, head: &BlendshapeModel) -> Result<SceneRender> {
    let (w, h) = (scene.width, scene.height);
    let mesh = apply_blendshape(head, &scene.shape)?;
    let frags = rasterize_fragments(&mesh, &scene.cam, w, h)?;
    let d = scene.key_light.direction.normalized();
    let mut visibility = if scene.shadowed() { hard_shadow_mask(&mesh, d, &scene.cam, w, h)? } else { vec![1.0; w * h] };
    if scene.shadowed() {
        for (i, v) in visibility.iter_mut().enumerate() {
            if frags.position_at(&mesh, i).is_some_and(|p| scene.occluder.blocks(p, d)) {
                *v = 0.0;
            }
        }
    }
    let light = scene.light();
    let key = scene.key_light.as_sh();
    let bg = scene.background_image();
    let mut key_irradiance = vec![0.0; w * h];
    let image = (0..w * h)
        .map(|i| match frags.normal_at(&mesh, i) {
            Some(n) => {
                let basis = sh_basis_unchecked(n);
                let e = light.irradiance(&basis);
                let k = key.band1_irradiance(&basis).map(|v| v.max(0.0));
                key_irradiance[i] = k.iter().sum::<f64>() / 3.0;
                let blocked = scene.shadow * (1.0 - visibility[i]);
                std::array::from_fn(|c| scene.albedo[c] * (e[c] - blocked * k[c]).max(0.0))
            }
            None => bg.pixels[i],
        })
        .collect();
    let output = RenderOutput { width: w, height: h, image, mask: frags.mask(), depth: frags.depth };
    Ok(SceneRender { output, visibility, key_irradiance })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub counts: SplitCounts,
    pub spec: DatasetSpec,
}

pub fn sample_stem(spec: &DatasetSpec, index: usize) -> PathBuf {
    PathBuf::from(spec.split_of(index).as_str()).join(format!("{index:06}"))
}

/// Paths of sample `index` relative to the dataset root:
/// `(image, mask, sidecar)`.
pub fn sample_paths(spec: &DatasetSpec, index: usize) -> (PathBuf, PathBuf, PathBuf) {
    let stem = sample_stem(spec, index);
    (stem.with_extension("png"), stem.with_extension("mask.png"), stem.with_extension("json"))
}

fn write_sample(
    root: &Path,
    spec: &DatasetSpec,
    scene: &SceneDescription,
    render: &SceneRender,
    rel: (PathBuf, PathBuf, PathBuf),
) -> Result<()> {
    let (img_rel, mask_rel, json_rel) = rel;
    let image = render.image().quantized();
    image.save_png(&root.join(&img_rel))?;
    save_mask_png(&root.join(&mask_rel), scene.width, scene.height, &render.output.mask)?;
    let features = oracle_encode(scene, &render.output, &image, spec.identity_dim)?;
    let file_name = |p: &Path| p.file_name().expect("file name").to_string_lossy().into_owned();
    Sidecar::from_features(&features, &file_name(&img_rel), &file_name(&mask_rel)).write(&root.join(json_rel))
}

/// Writes the dataset to `out`. The output is a deterministic function of
/// the spec.
pub fn generate(spec: &DatasetSpec, out: &Path) -> Result<Manifest> {
    spec.validate()?;
    let head = spec.head_model()?;
    for s in Split::ALL {
        let dir = out.join(s.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    (0..spec.count).into_par_iter().try_for_each(|i| {
        let scene = draw_scene(spec, i)?;
        let render = render_scene(&scene, &head)?;
        write_sample(out, spec, &scene, &render, sample_paths(spec, i))
    })?;
    let manifest = Manifest { format_version: FORMAT_VERSION, counts: spec.counts(), spec: spec.clone() };
    write_json(&out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let m: Manifest = read_json(&root.join(MANIFEST))?;
    ensure(m.format_version == FORMAT_VERSION, || format!("unsupported dataset format {}", m.format_version))?;
    m.spec.validate()?;
    Ok(m)
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Json { path: path.into(), source: e })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })
}

/// A test sample, a target light and shadow logit, and the ground-truth
/// render of the same scene under them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPair {
    pub id: usize,
    pub sample: usize,
    /// Paths relative to the dataset root.
    pub image: PathBuf,
    pub sidecar: PathBuf,
    pub mask: PathBuf,
    pub target_light: Vec<f64>,
    pub target_c: f64,
    pub ground_truth: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsManifest {
    pub seed: u64,
    pub pairs: Vec<EvalPair>,
}

/// The scene with its light replaced; geometry, camera, albedo and
/// background are kept.
pub fn relit_scene(scene: &SceneDescription, base_light: LightSh, key_light: KeyLight, shadow: f64) -> SceneDescription {
    SceneDescription { base_light, key_light, shadow, ..scene.clone() }
}

/// Draws `n_pairs` relighting targets over the test split and renders their
/// ground truth into `<root>/pairs/`. The manifest is written to
/// `<root>/pairs/pairs.json` and its path returned.
pub fn generate_eval_pairs(root: &Path, n_pairs: usize, seed: u64) -> Result<(PathBuf, PairsManifest)> {
    ensure(n_pairs >= 1, || "need at least one pair".into())?;
    let manifest = read_manifest(root)?;
    let spec = &manifest.spec;
    let test: Vec<usize> = spec.indices(Split::Test).collect();
    ensure(!test.is_empty(), || "dataset has no test samples".into())?;
    let head = spec.head_model()?;
    let dir = root.join(PAIRS_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    // Visit test samples in a shuffled order, cycling if more pairs than
    // samples are requested.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = test.clone();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let targets: Vec<(usize, LightSh, KeyLight, f64)> = (0..n_pairs)
        .map(|k| -> Result<_> {
            let base = sample_plausible_light(rng.random(), &spec.light)?;
            let key = sample_key_light(&mut rng, &spec.key_light);
            Ok((order[k % order.len()], base, key, sample_shadow(&mut rng, spec)))
        })
        .collect::<Result<_>>()?;
    let pairs = targets
        .into_par_iter()
        .enumerate()
        .map(|(id, (sample, base, key, shadow))| {
            let scene = relit_scene(&draw_scene(spec, sample)?, base, key, shadow);
            let render = render_scene(&scene, &head)?;
            let gt = PathBuf::from(PAIRS_DIR).join(format!("{id:04}_gt.png"));
            render.image().save_png(&root.join(&gt))?;
            let (image, mask, sidecar) = sample_paths(spec, sample);
            Ok(EvalPair {
                id,
                sample,
                image,
                sidecar,
                mask,
                target_light: scene.light().to_flat().to_vec(),
                target_c: scene.shadow_logit(),
                ground_truth: gt,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pm = PairsManifest { seed, pairs };
    let path = dir.join("pairs.json");
    write_json(&path, &pm)?;
    Ok((path, pm))
}

/// One preloaded training or evaluation sample.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub index: usize,
    /// `[1, 3, H, W]` in `[-1, 1]`.
    pub image: Tensor<f32>,
    pub cond: Conditioning,
    pub mask: Vec<bool>,
}

/// Loads every sample of a split with its precomputed conditioning.
pub fn load_split(root: &Path, split: Split, limit: Option<usize>) -> Result<(Manifest, Vec<LoadedSample>)> {
    let manifest = read_manifest(root)?;
    let spec = &manifest.spec;
    let head = spec.head_model()?;
    let mut idx: Vec<usize> = spec.indices(split).collect();
    if let Some(n) = limit {
        idx.truncate(n);
    }
    let samples = idx
        .into_par_iter()
        .map(|i| {
            let (img, _, json) = sample_paths(spec, i);
            let imported = crate::encoders::import_sidecar(&root.join(json), spec.sidecar_dims())?;
            let image = RgbImage::load_png(&root.join(img))?;
            ensure(image.width == spec.resolution && image.height == spec.resolution, || {
                format!("sample {i} is {}x{}, expected {}", image.width, image.height, spec.resolution)
            })?;
            Ok(LoadedSample {
                index: i,
                image: image.to_tensor(),
                cond: conditioning(&imported.features, &head)?,
                mask: imported.mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{import_sidecar, SHADOW_LOGIT};
    use crate::sh::shade_point;

    fn small(count: usize) -> DatasetSpec {
        DatasetSpec { count, resolution: 16, head_model_level: 3, split: [0.8, 0.1, 0.1], ..Default::default() }
    }

    fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn generation_is_deterministic_and_split() {
        let spec = small(20);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate(&spec, a.path()).unwrap();
        generate(&spec, b.path()).unwrap();
        let (ta, tb) = (tree(a.path()), tree(b.path()));
        assert_eq!(ta, tb);
        let count = |s: &str| ta.iter().filter(|(p, _)| p.starts_with(s) && p.to_string_lossy().ends_with(".json")).count();
        assert_eq!((count("train"), count("val"), count("test")), (16, 2, 2));
    }

    #[test]
    fn split_counts() {
        let spec = DatasetSpec { count: 100, split: [0.8, 0.1, 0.1], ..Default::default() };
        assert_eq!(spec.counts(), SplitCounts { train: 80, val: 10, test: 10 });
        assert_eq!(spec.split_of(79), Split::Train);
        assert_eq!(spec.split_of(80), Split::Val);
        assert_eq!(spec.split_of(99), Split::Test);
        assert!(DatasetSpec { split: [0.5, 0.1, 0.1], ..Default::default() }.validate().is_err());
        assert!(DatasetSpec { count: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn no_shadows_means_negative_logits() {
        let spec = DatasetSpec { shadow_probability: 0.0, ..small(10) };
        let dir = tempfile::tempdir().unwrap();
        generate(&spec, dir.path()).unwrap();
        for i in 0..10 {
            let sc = Sidecar::read(&dir.path().join(sample_paths(&spec, i).2), spec.sidecar_dims()).unwrap();
            assert_eq!(sc.shadow_logit, -SHADOW_LOGIT);
        }
    }

    #[test]
    fn unshadowed_samples_rerender_from_their_sidecar() {
        let spec = DatasetSpec { shadow_probability: 0.0, ..small(6) };
        let dir = tempfile::tempdir().unwrap();
        generate(&spec, dir.path()).unwrap();
        let head = spec.head_model().unwrap();
        for i in 0..6 {
            let scene = draw_scene(&spec, i).unwrap();
            let (img, _, json) = sample_paths(&spec, i);
            let f = import_sidecar(&dir.path().join(json), spec.sidecar_dims()).unwrap();
            let stored = RgbImage::load_png(&dir.path().join(img)).unwrap();
            let mesh = apply_blendshape(&head, &f.features.shape).unwrap();
            let out = crate::geometry::rasterize(
                &mesh,
                &f.features.cam,
                16,
                16,
                |n| shade_point(n, scene.albedo, &f.features.light).unwrap(),
                [0.0; 3],
            )
            .unwrap();
            for p in (0..256).filter(|&p| f.mask[p]) {
                for c in 0..3 {
                    assert!((out.image[p][c].min(1.0) - stored.pixels[p][c]).abs() <= 1.0 / 255.0);
                }
            }
        }
    }

    #[test]
    fn shadows_darken_only_the_occluded_pixels() {
        let spec = small(1);
        let head = spec.head_model().unwrap();
        let mut scene = draw_scene(&spec, 0).unwrap();
        scene.key_light.direction = Vec3::new(0.8, 0.0, 0.6);
        scene.shadow = 0.0;
        let lit = render_scene(&scene, &head).unwrap();
        scene.shadow = 1.0;
        let shadowed = render_scene(&scene, &head).unwrap();
        let region = shadowed.shadow_region();
        assert!(region.iter().any(|&r| r), "expected some cast shadow");
        for p in 0..region.len() {
            let (a, b) = (lit.output.image[p], shadowed.output.image[p]);
            if shadowed.visibility[p] >= 0.5 {
                assert_eq!(a, b);
            } else {
                // Pixels outside the region barely face the light.
                let bound = if region[p] { f64::INFINITY } else { KEY_LIT };
                assert!((0..3).all(|c| b[c] <= a[c] && a[c] - b[c] <= bound + 1e-12));
            }
        }
    }

    #[test]
    fn eval_pairs() {
        let spec = small(20);
        let dir = tempfile::tempdir().unwrap();
        generate(&spec, dir.path()).unwrap();
        let (path, pm) = generate_eval_pairs(dir.path(), 5, 3).unwrap();
        assert_eq!(pm.pairs.len(), 5);
        assert_eq!(read_json::<PairsManifest>(&path).unwrap(), pm);
        assert!(pm.pairs.iter().all(|p| spec.split_of(p.sample) == Split::Test));
        let head = spec.head_model().unwrap();
        for p in &pm.pairs {
            let input = RgbImage::load_png(&dir.path().join(&p.image)).unwrap();
            let gt = RgbImage::load_png(&dir.path().join(&p.ground_truth)).unwrap();
            assert_ne!(input, gt);
            // Relighting with the original light reproduces the input exactly.
            let scene = draw_scene(&spec, p.sample).unwrap();
            let same = relit_scene(&scene, scene.base_light, scene.key_light, scene.shadow);
            assert_eq!(render_scene(&same, &head).unwrap().image().quantized(), input);
        }
    }

    #[test]
    fn loads_split_with_conditioning() {
        let spec = small(10);
        let dir = tempfile::tempdir().unwrap();
        generate(&spec, dir.path()).unwrap();
        let (_, s) = load_split(dir.path(), Split::Train, Some(3)).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[0].image.shape(), &[1, 3, 16, 16]);
        assert_eq!(s[0].cond.spatial.shape(), &[1, 6, 16, 16]);
        assert_eq!(s[0].cond.nonspatial.shape(), &[1, 52]);
        fs::remove_file(dir.path().join(sample_paths(&spec, 1).2)).unwrap();
        assert!(matches!(load_split(dir.path(), Split::Train, None), Err(Error::Io { .. })));
    }
}
