use candle_core::{Device, Tensor};
use image::imageops::{self, FilterType};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::training::manifest::{DatasetManifest, ManifestEntry, Split};

/// One decoded image/mask pair in planar `[0, 1]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub height: usize,
    pub width: usize,
    /// `3 × H × W`, channel-major.
    pub image: Vec<f32>,
    /// `H × W` with values in `{0, 1}`.
    pub mask: Option<Vec<f32>>,
}

/// Reads an entry, resizes it to `resize_to` (bilinear for the image, nearest
/// for the mask) and binarises the mask at `mask_threshold`.
pub fn read_sample(entry: &ManifestEntry, resize_to: (usize, usize), mask_threshold: u8) -> Result<Sample> {
    let (h, w) = resize_to;
    let img = image::open(&entry.image)
        .map_err(|e| Error::ingestion(&entry.image, e))?
        .to_rgb8();
    let (iw, ih) = img.dimensions();
    let img = if (iw as usize, ih as usize) == (w, h) {
        img
    } else {
        imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
    };
    let mut image = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let idx = y as usize * w + x as usize;
        for c in 0..3 {
            image[c * h * w + idx] = px[c] as f32 / 255.0;
        }
    }
    let mask = match &entry.mask {
        None => None,
        Some(path) => {
            let m = image::open(path).map_err(|e| Error::ingestion(path, e))?.to_luma8();
            if m.dimensions() != (iw, ih) {
                let (mw, mh) = m.dimensions();
                return Err(Error::ingestion(
                    path,
                    format!("mask is {mw}x{mh} but image {} is {iw}x{ih}", entry.image.display()),
                ));
            }
            let m = if (iw as usize, ih as usize) == (w, h) {
                m
            } else {
                imageops::resize(&m, w as u32, h as u32, FilterType::Nearest)
            };
            let data: Vec<f32> = m
                .pixels()
                .map(|p| if p[0] >= mask_threshold { 1.0 } else { 0.0 })
                .collect();
            if data.len() != h * w {
                return Err(Error::ingestion(path, "mask size differs from image after resize"));
            }
            Some(data)
        }
    };
    Ok(Sample {
        name: entry.name(),
        height: h,
        width: w,
        image,
        mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub vflip: bool,
    /// Rotation angle is drawn uniformly from `[-max, max]` degrees.
    pub max_rotation_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip: true,
            vflip: true,
            max_rotation_deg: 30.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_rotation_deg.is_finite() && (0.0..=180.0).contains(&self.max_rotation_deg)) {
            return Err(Error::Config(format!(
                "max_rotation_deg must lie in [0, 180], got {}",
                self.max_rotation_deg
            )));
        }
        Ok(())
    }

    /// Applies the random transforms to one sample, image and mask alike.
    pub fn apply(&self, sample: &mut Sample, rng: &mut impl Rng) {
        let (h, w) = (sample.height, sample.width);
        let mut transform = |f: &dyn Fn(&[f32], usize) -> Vec<f32>| {
            sample.image = f(&sample.image, 3);
            if let Some(m) = &sample.mask {
                sample.mask = Some(f(m, 1));
            }
        };
        if self.hflip && rng.random_bool(0.5) {
            transform(&|d, c| hflip(d, c, h, w));
        }
        if self.vflip && rng.random_bool(0.5) {
            transform(&|d, c| vflip(d, c, h, w));
        }
        if self.max_rotation_deg > 0.0 {
            let deg = rng.random_range(-self.max_rotation_deg..=self.max_rotation_deg);
            sample.image = rotate(&sample.image, 3, h, w, deg, Interpolation::Bilinear);
            if let Some(m) = &sample.mask {
                sample.mask = Some(rotate(m, 1, h, w, deg, Interpolation::Nearest));
            }
        }
    }
}

/// Mirrors planar `channels × h × w` data left to right.
pub fn hflip(data: &[f32], channels: usize, h: usize, w: usize) -> Vec<f32> {
    assert_eq!(data.len(), channels * h * w);
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(w) {
        out.extend(row.iter().rev());
    }
    out
}

/// Mirrors planar `channels × h × w` data top to bottom.
pub fn vflip(data: &[f32], channels: usize, h: usize, w: usize) -> Vec<f32> {
    assert_eq!(data.len(), channels * h * w);
    let mut out = Vec::with_capacity(data.len());
    for plane in data.chunks_exact(h * w) {
        for row in plane.chunks_exact(w).rev() {
            out.extend_from_slice(row);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Nearest,
    Bilinear,
}

/// Mirror index about the first and last pixel centres (no edge repeat).
fn reflect(v: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n - 1) as f64;
    let v = v.rem_euclid(period);
    if v > (n - 1) as f64 {
        period - v
    } else {
        v
    }
}

/// Rotates planar data by `degrees` about the image centre, filling the
/// uncovered corners by reflection.
pub fn rotate(data: &[f32], channels: usize, h: usize, w: usize, degrees: f64, interp: Interpolation) -> Vec<f32> {
    assert_eq!(data.len(), channels * h * w);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = vec![0f32; data.len()];
    for r in 0..h {
        for c in 0..w {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            let sy = reflect(cy + dy * cos - dx * sin, h);
            let sx = reflect(cx + dx * cos + dy * sin, w);
            match interp {
                Interpolation::Nearest => {
                    let (y, x) = ((sy.round() as usize).min(h - 1), (sx.round() as usize).min(w - 1));
                    for ch in 0..channels {
                        out[ch * h * w + r * w + c] = data[ch * h * w + y * w + x];
                    }
                }
                Interpolation::Bilinear => {
                    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                    for ch in 0..channels {
                        let p = &data[ch * h * w..(ch + 1) * h * w];
                        let v = (1.0 - fy) * ((1.0 - fx) * p[y0 * w + x0] as f64 + fx * p[y0 * w + x1] as f64)
                            + fy * ((1.0 - fx) * p[y1 * w + x0] as f64 + fx * p[y1 * w + x1] as f64);
                        out[ch * h * w + r * w + c] = v as f32;
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, 3, H, W)` in `[0, 1]`.
    pub images: Tensor,
    /// `(B, 1, H, W)` in `{0, 1}`; present iff every entry has a mask.
    pub masks: Option<Tensor>,
    pub names: Vec<String>,
}

/// Loads the entries of `split` at positions `indices`. With `augment`, each
/// sample gets its own transform drawn from the RNG in index order, so a
/// fixed seed reproduces the batch exactly.
pub fn load_batch(
    manifest: &DatasetManifest,
    split: Split,
    indices: &[usize],
    augment: Option<(&AugmentConfig, &mut ChaCha8Rng)>,
    device: &Device,
) -> Result<Batch> {
    let entries = manifest.split(split);
    if indices.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let (h, w) = manifest.resize_to;
    let mut samples = Vec::with_capacity(indices.len());
    let mut aug = augment;
    for &i in indices {
        let entry = entries.get(i).ok_or_else(|| {
            Error::Data(format!("index {i} outside the {split} split of {} entries", entries.len()))
        })?;
        let mut s = read_sample(entry, manifest.resize_to, manifest.mask_threshold)?;
        if let Some((cfg, rng)) = aug.as_mut() {
            let mut sample_rng = ChaCha8Rng::seed_from_u64(rng.random());
            cfg.apply(&mut s, &mut sample_rng);
        }
        samples.push(s);
    }
    let b = samples.len();
    let images: Vec<f32> = samples.iter().flat_map(|s| s.image.iter().copied()).collect();
    let images = Tensor::from_vec(images, (b, 3, h, w), device)?;
    let masks = if samples.iter().all(|s| s.mask.is_some()) {
        let m: Vec<f32> = samples
            .iter()
            .flat_map(|s| s.mask.as_deref().unwrap_or_default().iter().copied())
            .collect();
        Some(Tensor::from_vec(m, (b, 1, h, w), device)?)
    } else {
        None
    };
    Ok(Batch {
        images,
        masks,
        names: samples.into_iter().map(|s| s.name).collect(),
    })
}
