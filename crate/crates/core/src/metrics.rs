//! Image metrics on `[0, 1]` images restricted to the head region.

use crate::error::{ensure, Result};
use crate::image::RgbImage;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check(a: &RgbImage, b: &RgbImage, mask: &[bool]) -> Result<()> {
    ensure((a.width, a.height) == (b.width, b.height), || {
        format!("image sizes differ: {}x{} vs {}x{}", a.width, a.height, b.width, b.height)
    })?;
    ensure(mask.len() == a.pixels.len(), || "mask size does not match the images".into())?;
    ensure(mask.iter().any(|&m| m), || "mask is empty".into())
}

/// Mean squared difference over masked pixels and all channels.
pub fn masked_mse(a: &RgbImage, b: &RgbImage, mask: &[bool]) -> Result<f64> {
    check(a, b, mask)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for ((p, q), _) in a.pixels.iter().zip(&b.pixels).zip(mask).filter(|(_, &m)| m) {
        sum += (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>();
        n += 3;
    }
    Ok(sum / n as f64)
}

/// PSNR over the whole image, peak 1.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    let mse = masked_mse(a, b, &vec![true; a.pixels.len()])?;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] = std::array::from_fn(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mean SSIM over every fully contained 11×11 window whose centre lies in
/// the mask, averaged over channels. `None` if no such window exists.
pub fn masked_ssim(a: &RgbImage, b: &RgbImage, mask: &[bool]) -> Result<Option<f64>> {
    check(a, b, mask)?;
    let (w, h) = (a.width, a.height);
    let k = gaussian_window();
    let r = SSIM_WINDOW / 2;
    let (mut total, mut count) = (0.0, 0usize);
    for cy in r..h.saturating_sub(r) {
        for cx in r..w.saturating_sub(r) {
            if !mask[cy * w + cx] {
                continue;
            }
            for c in 0..3 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, ky) in k.iter().enumerate() {
                    for (dx, kx) in k.iter().enumerate() {
                        let i = (cy + dy - r) * w + (cx + dx - r);
                        let (x, y) = (a.pixels[i][c], b.pixels[i][c]);
                        let g = ky * kx;
                        mx += g * x;
                        my += g * y;
                        xx += g * x * x;
                        yy += g * y * y;
                        xy += g * x * y;
                    }
                }
                let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += ((2.0 * mx * my + C1) * (2.0 * cov + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
                count += 1;
            }
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// `(1 − SSIM) / 2`.
pub fn dssim(a: &RgbImage, b: &RgbImage, mask: &[bool]) -> Result<f64> {
    let s = masked_ssim(a, b, mask)?;
    s.map(|s| (1.0 - s) / 2.0).ok_or_else(|| crate::Error::invalid("no 11x11 window is centred inside the mask"))
}

/// Sample mean and standard error (`std / √n`, sample std).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}
