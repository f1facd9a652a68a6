//! Image decode/encode, align-corners bilinear resize, per-channel Z-score
//! normalization, and the two training-time augmentations (horizontal flip,
//! small rotation).

use image::ImageFormat;

use crate::error::{Error, Result};
use crate::seg::FazMask;
use crate::tensor::Tensor;

pub const MIN_SIDE: usize = 8;

/// A decoded image: `[C,H,W]` pixels plus the physical field of view of the
/// scan (side length in mm, the same for both axes).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub pixels: Tensor<f32>,
    pub field_mm: f64,
    pub source_id: String,
}

impl ImageTensor {
    pub fn new(pixels: Tensor<f32>, field_mm: f64, source_id: String) -> Result<Self> {
        if pixels.rank() != 3 {
            return Err(Error::Shape(format!(
                "image tensor must be [C,H,W], got {:?}",
                pixels.shape
            )));
        }
        let (c, h, w) = (pixels.shape[0], pixels.shape[1], pixels.shape[2]);
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("channel count must be 1 or 3, got {c}")));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::Shape(format!(
                "image {h}x{w} below minimum side {MIN_SIDE}"
            )));
        }
        if field_mm <= 0.0 {
            return Err(Error::Config(format!("field_mm must be positive, got {field_mm}")));
        }
        Ok(ImageTensor {
            pixels,
            field_mm,
            source_id,
        })
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape[2]
    }
}

/// Decodes a PNG, JPEG or BMP byte stream into `[0,1]` pixel values.
/// Grayscale sources keep one channel, color sources three.
pub fn decode_image(bytes: &[u8], field_mm: f64, source_id: &str) -> Result<ImageTensor> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Decode {
        source_id: source_id.to_string(),
        reason: e.to_string(),
    })?;
    let gray = !img.color().has_color();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = if gray {
        let luma = img.to_luma8();
        let data: Vec<f32> = luma.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Tensor::new(vec![1, h, w], data)?
    } else {
        let rgb = img.to_rgb8();
        let raw = rgb.as_raw();
        let mut data = vec![0.0f32; 3 * h * w];
        for (i, px) in raw.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = px[c] as f32 / 255.0;
            }
        }
        Tensor::new(vec![3, h, w], data)?
    };
    ImageTensor::new(pixels, field_mm, source_id.to_string())
}

/// Collapses a 3-channel image to grayscale via Rec.601 luminance; 1-channel
/// images pass through unchanged.
pub fn to_grayscale(img: &ImageTensor) -> ImageTensor {
    if img.channels() == 1 {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let n = h * w;
    let d = &img.pixels.data;
    let data: Vec<f32> = (0..n)
        .map(|i| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i])
        .collect();
    ImageTensor {
        pixels: Tensor {
            shape: vec![1, h, w],
            data,
        },
        field_mm: img.field_mm,
        source_id: img.source_id.clone(),
    }
}

/// Align-corners bilinear resize. The physical field of view is a property
/// of the scan, not the raster, so `field_mm` is unchanged.
pub fn resize(img: &ImageTensor, target_h: usize, target_w: usize) -> Result<ImageTensor> {
    if target_h < MIN_SIDE || target_w < MIN_SIDE {
        return Err(Error::Shape(format!(
            "resize target {target_h}x{target_w} below minimum side {MIN_SIDE}"
        )));
    }
    let (c, h, w) = (img.channels(), img.height(), img.width());
    if target_h == h && target_w == w {
        return Ok(img.clone());
    }
    let sy = if target_h > 1 {
        (h - 1) as f32 / (target_h - 1) as f32
    } else {
        0.0
    };
    let sx = if target_w > 1 {
        (w - 1) as f32 / (target_w - 1) as f32
    } else {
        0.0
    };
    let src = &img.pixels.data;
    let mut data = vec![0.0f32; c * target_h * target_w];
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for oy in 0..target_h {
            let fy = oy as f32 * sy;
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f32;
            for ox in 0..target_w {
                let fx = ox as f32 * sx;
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f32;
                let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                data[ci * target_h * target_w + oy * target_w + ox] =
                    top * (1.0 - wy) + bot * wy;
            }
        }
    }
    Ok(ImageTensor {
        pixels: Tensor {
            shape: vec![c, target_h, target_w],
            data,
        },
        field_mm: img.field_mm,
        source_id: img.source_id.clone(),
    })
}

/// Per-channel `(x - mean) / std` with the population std. A near-constant
/// channel (std below 1e-6) becomes all zeros rather than amplified
/// rounding noise.
pub fn zscore_normalize(img: &ImageTensor) -> ImageTensor {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let n = h * w;
    let mut data = Vec::with_capacity(c * n);
    for ci in 0..c {
        let plane = &img.pixels.data[ci * n..(ci + 1) * n];
        let mean = plane.iter().sum::<f32>() / n as f32;
        let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
        let std = var.sqrt();
        if std < 1e-6 {
            data.extend(std::iter::repeat(0.0).take(n));
        } else {
            data.extend(plane.iter().map(|&v| (v - mean) / std));
        }
    }
    ImageTensor {
        pixels: Tensor {
            shape: vec![c, h, w],
            data,
        },
        field_mm: img.field_mm,
        source_id: img.source_id.clone(),
    }
}

/// Mirrors columns.
pub fn hflip(img: &ImageTensor) -> ImageTensor {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let src = &img.pixels.data;
    let mut data = vec![0.0f32; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                data[ci * h * w + y * w + x] = src[ci * h * w + y * w + (w - 1 - x)];
            }
        }
    }
    ImageTensor {
        pixels: Tensor {
            shape: vec![c, h, w],
            data,
        },
        field_mm: img.field_mm,
        source_id: img.source_id.clone(),
    }
}

/// Rotates about the image center with bilinear sampling; samples falling
/// outside the source are zero.
pub fn rotate(img: &ImageTensor, degrees: f64) -> Result<ImageTensor> {
    if degrees.abs() > 180.0 {
        return Err(Error::Contract(format!(
            "rotation angle {degrees} outside [-180, 180]"
        )));
    }
    if degrees == 0.0 {
        return Ok(img.clone());
    }
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let theta = degrees.to_radians();
    let (sin, cos) = (theta.sin() as f32, theta.cos() as f32);
    let cy = (h - 1) as f32 / 2.0;
    let cx = (w - 1) as f32 / 2.0;
    let src = &img.pixels.data;
    let mut data = vec![0.0f32; c * h * w];
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for oy in 0..h {
            let dy = oy as f32 - cy;
            for ox in 0..w {
                let dx = ox as f32 - cx;
                // inverse mapping: rotate the output grid by -theta
                let sx = cx + cos * dx + sin * dy;
                let sy = cy - sin * dx + cos * dy;
                let v = bilinear_at(plane, h, w, sy, sx);
                data[ci * h * w + oy * w + ox] = v;
            }
        }
    }
    Ok(ImageTensor {
        pixels: Tensor {
            shape: vec![c, h, w],
            data,
        },
        field_mm: img.field_mm,
        source_id: img.source_id.clone(),
    })
}

fn bilinear_at(plane: &[f32], h: usize, w: usize, fy: f32, fx: f32) -> f32 {
    if fy < -1.0 || fx < -1.0 || fy > h as f32 || fx > w as f32 {
        return 0.0;
    }
    let y0 = fy.floor() as isize;
    let x0 = fx.floor() as isize;
    let wy = fy - y0 as f32;
    let wx = fx - x0 as f32;
    let sample = |y: isize, x: isize| -> f32 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            plane[y as usize * w + x as usize]
        }
    };
    sample(y0, x0) * (1.0 - wy) * (1.0 - wx)
        + sample(y0, x0 + 1) * (1.0 - wy) * wx
        + sample(y0 + 1, x0) * wy * (1.0 - wx)
        + sample(y0 + 1, x0 + 1) * wy * wx
}

/// Encodes a binary mask as an 8-bit grayscale PNG (foreground 255).
pub fn encode_mask_png(mask: &FazMask) -> Result<Vec<u8>> {
    let raw: Vec<u8> = mask.pixels.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, raw)
        .ok_or_else(|| Error::Shape("mask buffer does not match its dimensions".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Numeric(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}

/// Decodes an 8-bit grayscale PNG back into a binary mask (threshold 128).
pub fn decode_mask_png(bytes: &[u8], source_id: &str) -> Result<FazMask> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Decode {
        source_id: source_id.to_string(),
        reason: e.to_string(),
    })?;
    let luma = img.to_luma8();
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    let pixels: Vec<u8> = luma.as_raw().iter().map(|&b| u8::from(b >= 128)).collect();
    FazMask::new(pixels, h, w, source_id.to_string())
}
