//! Deterministic generator of synthetic OCTA-like images with ground-truth
//! quality labels and elliptical FAZ masks.
//!
//! Category semantics: outstanding images are clean or carry slight stripe
//! noise; gradable images carry moderate blur or moderate stripes;
//! ungradable images are heavily blurred or have the macula far off-center.
//! The mask is always the exact generating ellipse, rasterized.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::manifest::{save_manifest, ManifestRow};
use crate::qa::QualityClass;
use crate::seg::FazMask;
use crate::split::{split_dataset, SplitScheme, HOLDOUT_PROPORTIONS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub count_ungradable: usize,
    pub count_gradable: usize,
    pub count_outstanding: usize,
    pub image_size: usize,
    pub field_mm: f64,
    pub seed: u64,
    /// FAZ semi-axis range in mm; must stay below field_mm/4.
    pub faz_semi_axis_mm: [f64; 2],
    /// Maximum center offset (fraction of width) for well-centered classes.
    pub centered_offset_frac: f64,
    /// Center offset range for offset-ungradable images; beyond 0.25
    /// counts as off-centered.
    pub ungradable_offset_frac: [f64; 2],
    pub slight_stripe_amp: [f64; 2],
    pub moderate_stripe_amp: [f64; 2],
    pub gradable_blur_sigma: [f64; 2],
    pub ungradable_blur_sigma: [f64; 2],
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            count_ungradable: 300,
            count_gradable: 300,
            count_outstanding: 300,
            image_size: 64,
            field_mm: 3.0,
            seed: 42,
            faz_semi_axis_mm: [0.25, 0.45],
            centered_offset_frac: 0.06,
            ungradable_offset_frac: [0.28, 0.35],
            slight_stripe_amp: [0.01, 0.03],
            moderate_stripe_amp: [0.15, 0.25],
            gradable_blur_sigma: [1.0, 2.0],
            ungradable_blur_sigma: [3.0, 4.0],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config("image size must be at least 8".into()));
        }
        if self.field_mm <= 0.0 {
            return Err(Error::Config("field_mm must be positive".into()));
        }
        if self.faz_semi_axis_mm[1] >= self.field_mm / 4.0 {
            return Err(Error::Config(format!(
                "FAZ semi-axes up to {} mm exceed field_mm/4 = {}",
                self.faz_semi_axis_mm[1],
                self.field_mm / 4.0
            )));
        }
        Ok(())
    }

    pub fn count(&self, class: QualityClass) -> usize {
        match class {
            QualityClass::Ungradable => self.count_ungradable,
            QualityClass::Gradable => self.count_gradable,
            QualityClass::Outstanding => self.count_outstanding,
        }
    }

    pub fn total(&self) -> usize {
        self.count_ungradable + self.count_gradable + self.count_outstanding
    }
}

fn derive_seed(seed: u64, class: QualityClass, index: usize) -> u64 {
    let mut s = seed
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add((class.index() as u64 + 1).wrapping_mul(0xA24BAED4963EE407))
        .wrapping_add((index as u64).wrapping_mul(0xD1B54A32D192ED03));
    // splitmix finalizer
    s ^= s >> 30;
    s = s.wrapping_mul(0xBF58476D1CE4E5B9);
    s ^= s >> 27;
    s = s.wrapping_mul(0x94D049BB133111EB);
    s ^ (s >> 31)
}

/// Smooth value noise in [-1,1] from a coarse grid of the given cell size.
fn smooth_noise(rng: &mut ChaCha8Rng, n: usize, cell: usize) -> Vec<f64> {
    let gn = n / cell + 2;
    let grid: Vec<f64> = (0..gn * gn).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = vec![0.0f64; n * n];
    for y in 0..n {
        let fy = y as f64 / cell as f64;
        let y0 = fy.floor() as usize;
        let wy = fy - y0 as f64;
        for x in 0..n {
            let fx = x as f64 / cell as f64;
            let x0 = fx.floor() as usize;
            let wx = fx - x0 as f64;
            let g = |yy: usize, xx: usize| grid[yy * gn + xx];
            out[y * n + x] = g(y0, x0) * (1.0 - wy) * (1.0 - wx)
                + g(y0, x0 + 1) * (1.0 - wy) * wx
                + g(y0 + 1, x0) * wy * (1.0 - wx)
                + g(y0 + 1, x0 + 1) * wy * wx;
        }
    }
    out
}

fn gaussian_blur(data: &mut [f64], n: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
    }
    let ksum: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= ksum;
    }
    let clamp = |v: isize| -> usize { v.clamp(0, n as isize - 1) as usize };
    // horizontal then vertical pass
    let mut tmp = vec![0.0f64; n * n];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sx = clamp(x as isize + ki as isize - radius);
                acc += kv * data[y * n + sx];
            }
            tmp[y * n + x] = acc;
        }
    }
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sy = clamp(y as isize + ki as isize - radius);
                acc += kv * tmp[sy * n + x];
            }
            data[y * n + x] = acc;
        }
    }
}

pub fn sample_id(class: QualityClass, index: usize) -> String {
    format!("{}_{index:04}", class)
}

/// Generates one sample. The same `(spec, class, index)` always yields a
/// bit-identical image and mask.
pub fn generate_sample(
    spec: &SynthSpec,
    class: QualityClass,
    index: usize,
) -> Result<(ImageTensor, QualityClass, FazMask)> {
    spec.validate()?;
    let n = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, class, index));
    let source_id = sample_id(class, index);

    // vessel-like base texture: coarse + fine value noise
    let coarse = smooth_noise(&mut rng, n, 8.max(n / 8));
    let fine = smooth_noise(&mut rng, n, 2);
    let mut img: Vec<f64> = (0..n * n)
        .map(|i| 0.55 + 0.18 * coarse[i] + 0.22 * fine[i])
        .collect();

    // FAZ ellipse
    let offset_frac = match class {
        QualityClass::Ungradable => {
            // the off-center variant is decided below; draw lazily
            0.0
        }
        _ => rng.gen_range(0.0..spec.centered_offset_frac),
    };
    let use_offset_ungradable = class == QualityClass::Ungradable && rng.gen_bool(0.5);
    let offset_frac = if use_offset_ungradable {
        rng.gen_range(spec.ungradable_offset_frac[0]..spec.ungradable_offset_frac[1])
    } else {
        offset_frac
    };
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let cx = (n as f64 - 1.0) / 2.0 + offset_frac * n as f64 * angle.cos();
    let cy = (n as f64 - 1.0) / 2.0 + offset_frac * n as f64 * angle.sin();
    let px_per_mm = n as f64 / spec.field_mm;
    let semi_a = rng.gen_range(spec.faz_semi_axis_mm[0]..spec.faz_semi_axis_mm[1]) * px_per_mm;
    let semi_b = rng.gen_range(spec.faz_semi_axis_mm[0]..spec.faz_semi_axis_mm[1]) * px_per_mm;

    let mut mask = vec![0u8; n * n];
    for y in 0..n {
        for x in 0..n {
            let ex = (x as f64 - cx) / semi_a;
            let ey = (y as f64 - cy) / semi_b;
            if ex * ex + ey * ey <= 1.0 {
                mask[y * n + x] = 1;
                img[y * n + x] *= 0.12;
            }
        }
    }

    // class-conditional artifacts
    match class {
        QualityClass::Outstanding => {
            if rng.gen_bool(0.5) {
                let amp = rng.gen_range(spec.slight_stripe_amp[0]..spec.slight_stripe_amp[1]);
                add_stripes(&mut img, n, amp, &mut rng);
            }
        }
        QualityClass::Gradable => {
            if rng.gen_bool(0.5) {
                let sigma =
                    rng.gen_range(spec.gradable_blur_sigma[0]..spec.gradable_blur_sigma[1]);
                gaussian_blur(&mut img, n, sigma);
            } else {
                let amp =
                    rng.gen_range(spec.moderate_stripe_amp[0]..spec.moderate_stripe_amp[1]);
                add_stripes(&mut img, n, amp, &mut rng);
            }
        }
        QualityClass::Ungradable => {
            if !use_offset_ungradable {
                let sigma =
                    rng.gen_range(spec.ungradable_blur_sigma[0]..spec.ungradable_blur_sigma[1]);
                gaussian_blur(&mut img, n, sigma);
            }
        }
    }

    let pixels: Vec<f32> = img.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    let image = ImageTensor::new(
        Tensor::new(vec![1, n, n], pixels)?,
        spec.field_mm,
        source_id.clone(),
    )?;
    let mask = FazMask::new(mask, n, n, source_id)?;
    Ok((image, class, mask))
}

fn add_stripes(img: &mut [f64], n: usize, amp: f64, rng: &mut ChaCha8Rng) {
    let period = rng.gen_range(4.0..12.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    for y in 0..n {
        let offset = amp * (std::f64::consts::TAU * y as f64 / period + phase).sin();
        for x in 0..n {
            img[y * n + x] += offset;
        }
    }
}

/// Mean absolute 4-neighbor Laplacian response; a sharpness proxy used to
/// verify that the generated classes are separable.
pub fn laplacian_energy(img: &ImageTensor) -> f64 {
    let (h, w) = (img.height(), img.width());
    let d = &img.pixels.data;
    let mut acc = 0.0f64;
    let mut count = 0u64;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = d[y * w + x] as f64;
            let lap = 4.0 * c
                - d[(y - 1) * w + x] as f64
                - d[(y + 1) * w + x] as f64
                - d[y * w + x - 1] as f64
                - d[y * w + x + 1] as f64;
            acc += lap.abs();
            count += 1;
        }
    }
    acc / count as f64
}

/// Generates the corpus on disk: `images/<id>.png`, `masks/<id>.png` and a
/// `manifest.csv` with hold-out splits at the reference proportions.
/// The whole corpus is a pure function of the spec.
pub fn generate_corpus(spec: &SynthSpec, out_dir: &std::path::Path) -> Result<Vec<ManifestRow>> {
    spec.validate()?;
    let images_dir = out_dir.join("images");
    let masks_dir = out_dir.join("masks");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;

    let jobs: Vec<(QualityClass, usize)> = QualityClass::ALL
        .iter()
        .flat_map(|&c| (0..spec.count(c)).map(move |i| (c, i)))
        .collect();
    let mut rows: Vec<ManifestRow> = jobs
        .par_iter()
        .map(|&(class, index)| {
            let (image, _, mask) = generate_sample(spec, class, index)?;
            let id = sample_id(class, index);
            let image_path = images_dir.join(format!("{id}.png"));
            let mask_path = masks_dir.join(format!("{id}.png"));
            save_gray_png(&image, &image_path)?;
            let png = crate::imaging::encode_mask_png(&mask)?;
            std::fs::write(&mask_path, png).map_err(|e| Error::io(&mask_path, e))?;
            Ok(ManifestRow {
                source_id: id,
                class,
                image_path,
                mask_path,
                field_mm: spec.field_mm,
                split: crate::split::Split::Train, // assigned below
            })
        })
        .collect::<Result<_>>()?;
    rows.sort_by(|a, b| a.source_id.cmp(&b.source_id));

    if !rows.is_empty() {
        let ids: Vec<String> = rows.iter().map(|r| r.source_id.clone()).collect();
        let assignment = split_dataset(
            &ids,
            &SplitScheme::Proportional(HOLDOUT_PROPORTIONS.to_vec()),
            spec.seed,
        )?;
        for r in &mut rows {
            r.split = assignment[&r.source_id];
        }
    }
    save_manifest(&out_dir.join("manifest.csv"), &rows)?;
    Ok(rows)
}

fn save_gray_png(img: &ImageTensor, path: &std::path::Path) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let raw: Vec<u8> = img
        .pixels
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Shape("image buffer mismatch".into()))?;
    buf.save(path)
        .map_err(|e| Error::Config(format!("cannot save {}: {e}", path.display())))
}
