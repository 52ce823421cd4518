//! RGB images in linear `[0, 1]`, 8-bit PNG I/O and conversion to the
//! `[-1, 1]` planar tensors the network consumes.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// Interleaved RGB image, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

/// `floor(v·255 + 0.5)` after clamping to `[0, 1]`.
pub fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        ensure(width * height == pixels.len(), || {
            format!("{width}x{height} image needs {} pixels, got {}", width * height, pixels.len())
        })?;
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self { width, height, pixels: vec![rgb; width * height] }
    }

    /// Round trip through 8-bit quantization.
    pub fn quantized(&self) -> Self {
        let pixels = self.pixels.iter().map(|p| p.map(|v| quantize(v) as f64 / 255.0)).collect();
        Self { width: self.width, height: self.height, pixels }
    }

    /// `[1, 3, H, W]` tensor with values mapped to `[-1, 1]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let hw = self.width * self.height;
        Tensor::from_fn(&[1, 3, self.height, self.width], |i| {
            let (c, p) = (i / hw, i % hw);
            (self.pixels[p][c] * 2.0 - 1.0) as f32
        })
    }

    /// Inverse of [`RgbImage::to_tensor`] for sample `n` of a `[N, 3, H, W]`
    /// tensor; values are clamped to `[-1, 1]` first.
    pub fn from_tensor(t: &Tensor<f32>, n: usize) -> Result<Self> {
        let (bn, c, h, w) = t.dims4();
        ensure(c == 3 && n < bn, || format!("cannot read image {n} from tensor {:?}", t.shape()))?;
        let hw = h * w;
        let base = n * 3 * hw;
        let d = t.data();
        let pixels = (0..hw)
            .map(|p| [0, 1, 2].map(|ch| (d[base + ch * hw + p].clamp(-1.0, 1.0) as f64 + 1.0) / 2.0))
            .collect();
        Ok(Self { width: w, height: h, pixels })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.pixels.iter().flat_map(|p| p.map(quantize)).collect();
        write_png(path, self.width, self.height, png::ColorType::Rgb, &bytes)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (w, h, bytes) = read_png(path, png::ColorType::Rgb)?;
        let pixels = bytes.chunks(3).map(|c| [c[0], c[1], c[2]].map(|v| v as f64 / 255.0)).collect();
        Ok(Self { width: w, height: h, pixels })
    }

    /// Images laid side by side, left to right.
    pub fn hstack(items: &[RgbImage]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::invalid("nothing to tile"))?;
        let h = first.height;
        ensure(items.iter().all(|i| i.height == h), || "tiled images must share a height".into())?;
        let w: usize = items.iter().map(|i| i.width).sum();
        let mut pixels = Vec::with_capacity(w * h);
        for y in 0..h {
            for img in items {
                pixels.extend_from_slice(&img.pixels[y * img.width..(y + 1) * img.width]);
            }
        }
        Ok(Self { width: w, height: h, pixels })
    }
}

pub fn save_mask_png(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    ensure(mask.len() == width * height, || "mask size does not match dimensions".into())?;
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_png(path, width, height, png::ColorType::Grayscale, &bytes)
}

/// Loads a single-channel mask; any value ≥ 128 counts as covered.
pub fn load_mask_png(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let (w, h, bytes) = read_png(path, png::ColorType::Grayscale)?;
    Ok((w, h, bytes.into_iter().map(|v| v >= 128).collect()))
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let png_err = |e: png::EncodingError| Error::Png { path: path.into(), msg: e.to_string() };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

fn read_png(path: &Path, want: png::ColorType) -> Result<(usize, usize, Vec<u8>)> {
    let png_err = |msg: String| Error::Png { path: path.into(), msg };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| png_err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| png_err("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(e.to_string()))?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let out = match (info.color_type, want) {
        (c, w) if c == w => buf,
        (_, png::ColorType::Rgb) if channels >= 3 => buf.chunks(channels).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        (_, png::ColorType::Rgb) => buf.chunks(channels).flat_map(|p| [p[0]; 3]).collect(),
        (_, _) => buf.chunks(channels).map(|p| p[0]).collect(),
    };
    Ok((w, h, out))
}
