//! Second-order real spherical harmonics: basis evaluation, Lambertian-style
//! shading of a single normal, and sampling of plausible lights.
//!
//! Basis order is fixed: band 0; band 1 as (y, z, x); band 2 as
//! (xy, yz, 3z²−1, xz, x²−y²). Any irradiance-convolution factors are assumed
//! to be folded into the coefficients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::Vec3;

pub const SH_COEFFS: usize = 9;
/// Flattened length of a [`LightSh`] (9 coefficients × RGB).
pub const LIGHT_LEN: usize = SH_COEFFS * 3;

const C0: f64 = 0.282_094_791_773_878_14; // 1 / (2√π)
const C1: f64 = 0.488_602_511_902_919_9; // √3 / (2√π)
const C2_XY: f64 = 1.092_548_430_592_079_2; // √15 / (2√π)
const C2_Z: f64 = 0.315_391_565_252_520_05; // √5 / (4√π)
const C2_XX_YY: f64 = 0.546_274_215_296_039_6; // √15 / (4√π)

/// The 9 real SH basis functions evaluated at one direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShBasis(pub [f64; SH_COEFFS]);

/// Evaluates the basis at a unit direction.
pub fn sh_basis(dir: Vec3) -> Result<ShBasis> {
    ensure(dir.is_finite(), || format!("direction {dir:?} is not finite"))?;
    ensure((dir.norm() - 1.0).abs() <= 1e-6, || format!("direction {dir:?} is not unit length"))?;
    Ok(sh_basis_unchecked(dir))
}

pub(crate) fn sh_basis_unchecked(d: Vec3) -> ShBasis {
    let (x, y, z) = (d.x, d.y, d.z);
    ShBasis([
        C0,
        C1 * y,
        C1 * z,
        C1 * x,
        C2_XY * x * y,
        C2_XY * y * z,
        C2_Z * (3.0 * z * z - 1.0),
        C2_XY * x * z,
        C2_XX_YY * (x * x - y * y),
    ])
}

/// RGB lighting as 9 SH coefficients per channel. Row `k` is basis function
/// `k`, column `c` is the colour channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LightSh {
    pub coeffs: [[f64; 3]; SH_COEFFS],
}

impl LightSh {
    pub fn zeros() -> Self {
        Self { coeffs: [[0.0; 3]; SH_COEFFS] }
    }

    /// Light whose band-0 term alone shades every normal with `level`.
    pub fn ambient(level: f64) -> Self {
        let mut l = Self::zeros();
        l.coeffs[0] = [level / C0; 3];
        l
    }

    /// Row-major flattening: index `k * 3 + c`.
    pub fn to_flat(&self) -> [f64; LIGHT_LEN] {
        let mut out = [0.0; LIGHT_LEN];
        for (k, row) in self.coeffs.iter().enumerate() {
            out[k * 3..k * 3 + 3].copy_from_slice(row);
        }
        out
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != LIGHT_LEN {
            return Err(Error::Length { key: "light_sh".into(), expected: LIGHT_LEN, found: v.len() });
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("light_sh".into()));
        }
        let mut coeffs = [[0.0; 3]; SH_COEFFS];
        for (k, row) in coeffs.iter_mut().enumerate() {
            row.copy_from_slice(&v[k * 3..k * 3 + 3]);
        }
        Ok(Self { coeffs })
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().flatten().all(|v| v.is_finite())
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = *self;
        for (a, b) in out.coeffs.iter_mut().flatten().zip(other.coeffs.iter().flatten()) {
            *a += b;
        }
        out
    }

    /// Channel-averaged band-1 coefficients as an (x, y, z) vector. Shading
    /// from the band-1 term alone peaks at normals parallel to it.
    pub fn band1_direction(&self) -> Vec3 {
        let avg = |k: usize| self.coeffs[k].iter().sum::<f64>() / 3.0;
        Vec3::new(avg(3), avg(1), avg(2))
    }

    /// Per-channel irradiance `Σ_k l_k H_k(n)` before clamping.
    pub fn irradiance(&self, basis: &ShBasis) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (row, h) in self.coeffs.iter().zip(basis.0) {
            for c in 0..3 {
                out[c] += row[c] * h;
            }
        }
        out
    }

    /// Per-channel contribution of the band-1 (directional) terms alone.
    pub fn band1_irradiance(&self, basis: &ShBasis) -> [f64; 3] {
        let mut out = [0.0; 3];
        for k in 1..4 {
            for c in 0..3 {
                out[c] += self.coeffs[k][c] * basis.0[k];
            }
        }
        out
    }
}

impl TryFrom<Vec<f64>> for LightSh {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::from_flat(&v)
    }
}

impl From<LightSh> for Vec<f64> {
    fn from(l: LightSh) -> Self {
        l.to_flat().to_vec()
    }
}

/// `albedo ⊙ Σ_k l_k H_k(n)` without clamping.
pub fn shade_point_unclamped(normal: Vec3, albedo: [f64; 3], light: &LightSh) -> [f64; 3] {
    let e = light.irradiance(&sh_basis_unchecked(normal));
    [albedo[0] * e[0], albedo[1] * e[1], albedo[2] * e[2]]
}

/// Shades a unit normal; each channel is clamped below at zero. Values above
/// one are kept (quantization clamps them later).
pub fn shade_point(normal: Vec3, albedo: [f64; 3], light: &LightSh) -> Result<[f64; 3]> {
    sh_basis(normal)?;
    ensure(light.is_finite(), || "light has non-finite coefficients".into())?;
    Ok(shade_point_unclamped(normal, albedo, light).map(|v| v.max(0.0)))
}

/// Ranges for [`sample_plausible_light`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LightSampling {
    /// Band-0 coefficient range (per channel, after colour jitter).
    pub band0: [f64; 2],
    /// Relative per-channel jitter of band 0, e.g. 0.1 for ±10 %.
    pub color_jitter: f64,
    /// Norm of the band-1 vector relative to band 0.
    pub band1_strength: [f64; 2],
    /// Maximum angle between the band-1 direction and the +z (camera) axis.
    pub max_off_axis_deg: f64,
    /// Band-2 coefficients are uniform in `±band2_scale · band0`.
    pub band2_scale: f64,
    /// Enforced `band0 ≥ ratio · Σ|band 1,2|` per channel.
    pub dominance_ratio: f64,
}

impl Default for LightSampling {
    fn default() -> Self {
        Self {
            band0: [2.0, 3.0],
            color_jitter: 0.1,
            band1_strength: [0.35, 0.75],
            max_off_axis_deg: 75.0,
            band2_scale: 0.08,
            dominance_ratio: 1.0,
        }
    }
}

impl LightSampling {
    pub fn validate(&self) -> Result<()> {
        let ok_range = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        ensure(ok_range(self.band0) && self.band0[0] > 0.0, || {
            format!("band0 range {:?} must be a positive interval", self.band0)
        })?;
        ensure(ok_range(self.band1_strength) && self.band1_strength[0] >= 0.0, || {
            format!("band1_strength range {:?} is invalid", self.band1_strength)
        })?;
        ensure((0.0..1.0).contains(&self.color_jitter), || "color_jitter must be in [0, 1)".into())?;
        ensure((0.0..=180.0).contains(&self.max_off_axis_deg), || "max_off_axis_deg must be in [0, 180]".into())?;
        ensure(self.band2_scale >= 0.0 && self.band2_scale.is_finite(), || "band2_scale must be >= 0".into())?;
        ensure(self.dominance_ratio > 0.0 && self.dominance_ratio.is_finite(), || {
            "dominance_ratio must be positive".into()
        })
    }
}

/// Draws a light with a dominant ambient term and a front-biased directional
/// lobe. Deterministic in `seed`.
pub fn sample_plausible_light(seed: u64, cfg: &LightSampling) -> Result<LightSh> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l = LightSh::zeros();
    let base = rng.random_range(cfg.band0[0]..=cfg.band0[1]);
    for c in 0..3 {
        let j = if cfg.color_jitter > 0.0 { rng.random_range(-cfg.color_jitter..cfg.color_jitter) } else { 0.0 };
        l.coeffs[0][c] = (base * (1.0 + j)).clamp(cfg.band0[0], cfg.band0[1]);
    }
    let cos_min = cfg.max_off_axis_deg.to_radians().cos();
    let cos_t: f64 = rng.random_range(cos_min.min(1.0)..=1.0);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let dir = Vec3::new(sin_t * phi.cos(), sin_t * phi.sin(), cos_t);
    let strength = rng.random_range(cfg.band1_strength[0]..=cfg.band1_strength[1]);
    for c in 0..3 {
        let s = strength * l.coeffs[0][c];
        l.coeffs[1][c] = s * dir.y;
        l.coeffs[2][c] = s * dir.z;
        l.coeffs[3][c] = s * dir.x;
    }
    for k in 4..SH_COEFFS {
        let v = if cfg.band2_scale > 0.0 { rng.random_range(-cfg.band2_scale..cfg.band2_scale) } else { 0.0 };
        for c in 0..3 {
            l.coeffs[k][c] = v * l.coeffs[0][c];
        }
    }
    for c in 0..3 {
        let rest: f64 = (1..SH_COEFFS).map(|k| l.coeffs[k][c].abs()).sum();
        let limit = l.coeffs[0][c] / cfg.dominance_ratio;
        if rest > limit {
            let s = limit / rest;
            (1..SH_COEFFS).for_each(|k| l.coeffs[k][c] *= s);
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, UnitSphere};

    use super::*;

    fn sphere_samples(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let [x, y, z]: [f64; 3] = UnitSphere.sample(&mut rng);
                Vec3::new(x, y, z).normalized()
            })
            .collect()
    }

    #[test]
    fn band0_is_constant() {
        for d in sphere_samples(100, 1) {
            assert_relative_eq!(sh_basis(d).unwrap().0[0], 0.282_094_79, epsilon = 1e-8);
        }
    }

    #[test]
    fn pole_values() {
        let b = sh_basis(Vec3::new(0.0, 0.0, 1.0)).unwrap().0;
        assert_relative_eq!(b[2], 0.488_602_51, epsilon = 1e-8);
        assert_eq!(b[1], 0.0);
        assert_eq!(b[3], 0.0);
    }

    #[test]
    fn parity_of_bands() {
        let p = sh_basis(Vec3::new(1.0, 0.0, 0.0)).unwrap().0;
        let m = sh_basis(Vec3::new(-1.0, 0.0, 0.0)).unwrap().0;
        assert_eq!(p[3], -m[3]);
        assert_eq!(p[8], m[8]);
    }

    #[test]
    fn rejects_non_unit_and_non_finite() {
        assert!(sh_basis(Vec3::new(0.0, 0.0, 1.1)).is_err());
        assert!(sh_basis(Vec3::new(f64::NAN, 0.0, 1.0)).is_err());
    }

    #[test]
    fn shading_examples() {
        let n = Vec3::new(0.3, -0.4, 0.5).normalized();
        let flat = LightSh::ambient(1.0);
        assert_relative_eq!(flat.coeffs[0][0], 3.544_907_7, epsilon = 1e-6);
        let s = shade_point(n, [0.7; 3], &flat).unwrap();
        s.iter().for_each(|&v| assert_relative_eq!(v, 0.7, epsilon = 1e-12));
        assert_eq!(shade_point(n, [0.7; 3], &LightSh::zeros()).unwrap(), [0.0; 3]);
        let mut up = LightSh::zeros();
        up.coeffs[2] = [1.0; 3];
        assert_eq!(shade_point(Vec3::new(0.0, 0.0, -1.0), [1.0; 3], &up).unwrap(), [0.0; 3]);
    }

    #[test]
    fn shading_is_linear_before_clamping() {
        let a = sample_plausible_light(3, &LightSampling::default()).unwrap();
        let b = sample_plausible_light(4, &LightSampling::default()).unwrap();
        for n in sphere_samples(50, 2) {
            let sum = shade_point_unclamped(n, [0.6, 0.5, 0.4], &a.add(&b));
            let sa = shade_point_unclamped(n, [0.6, 0.5, 0.4], &a);
            let sb = shade_point_unclamped(n, [0.6, 0.5, 0.4], &b);
            for c in 0..3 {
                assert_relative_eq!(sum[c], sa[c] + sb[c], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn band1_light_peaks_along_its_direction() {
        let mut l = LightSh::zeros();
        let d = Vec3::new(0.2, -0.5, 0.7).normalized();
        for c in 0..3 {
            l.coeffs[1][c] = d.y;
            l.coeffs[2][c] = d.z;
            l.coeffs[3][c] = d.x;
        }
        let dir = l.band1_direction().normalized();
        let best = sphere_samples(20_000, 9)
            .into_iter()
            .max_by(|a, b| {
                let sa = shade_point_unclamped(*a, [1.0; 3], &l)[0];
                let sb = shade_point_unclamped(*b, [1.0; 3], &l)[0];
                sa.total_cmp(&sb)
            })
            .unwrap();
        assert!(best.dot(dir) > 0.99, "peak {best:?} vs {dir:?}");
    }

    #[test]
    fn sampler_is_deterministic_and_in_range() {
        let cfg = LightSampling::default();
        assert_eq!(sample_plausible_light(11, &cfg).unwrap(), sample_plausible_light(11, &cfg).unwrap());
        let l = sample_plausible_light(0, &cfg).unwrap();
        for c in 0..3 {
            assert!((cfg.band0[0]..=cfg.band0[1]).contains(&l.coeffs[0][c]));
            let rest: f64 = (1..9).map(|k| l.coeffs[k][c].abs()).sum();
            assert!(l.coeffs[0][c] >= cfg.dominance_ratio * rest - 1e-12);
        }
    }

    #[test]
    fn sampler_rejects_bad_ranges() {
        let mut cfg = LightSampling { band0: [0.0, 1.0], ..Default::default() };
        assert!(sample_plausible_light(0, &cfg).is_err());
        cfg.band0 = [2.0, 1.0];
        assert!(sample_plausible_light(0, &cfg).is_err());
    }

    #[test]
    fn sampled_lights_rarely_clamp() {
        let cfg = LightSampling::default();
        let dirs = sphere_samples(500, 5);
        let mut clamped = 0usize;
        let mut total = 0usize;
        for seed in 0..1000 {
            let l = sample_plausible_light(seed, &cfg).unwrap();
            for &n in &dirs {
                let s = shade_point_unclamped(n, [1.0; 3], &l);
                clamped += s.iter().filter(|&&v| v < 0.0).count();
                total += 3;
            }
        }
        let frac = clamped as f64 / total as f64;
        assert!(frac < 0.2, "clamped fraction {frac}");
    }

    #[test]
    fn flat_roundtrip_and_length_error() {
        let l = sample_plausible_light(2, &LightSampling::default()).unwrap();
        assert_eq!(LightSh::from_flat(&l.to_flat()).unwrap(), l);
        match LightSh::from_flat(&[0.0; 26]) {
            Err(Error::Length { key, .. }) => assert_eq!(key, "light_sh"),
            other => panic!("{other:?}"),
        }
    }
}
