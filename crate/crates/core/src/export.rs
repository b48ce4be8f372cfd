//! PNG rendering of explainability maps and prediction overlays.

use std::path::{Path, PathBuf};

use candle_core::DType;
use image::{DynamicImage, GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::evaluate::predict_entries;
use crate::explain::Heatmap;
use crate::mha::ALL_ORDERS;
use crate::network::MhaUnet;
use crate::training::{ManifestEntry, Split, DEFAULT_MASK_THRESHOLD};

/// Viridis anchor colours at 0, ¼, ½, ¾ and 1.
const COLORMAP: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

pub const PREDICTED_CONTOUR: Rgb<u8> = Rgb([0, 0, 255]);
pub const TRUTH_CONTOUR: Rgb<u8> = Rgb([255, 0, 0]);

/// Colour for a value in `[0, 1]` (clamped), interpolated between anchors.
pub fn colormap(v: f64) -> Rgb<u8> {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let pos = v * (COLORMAP.len() - 1) as f64;
    let i = (pos.floor() as usize).min(COLORMAP.len() - 2);
    let t = pos - i as f64;
    let (a, b) = (COLORMAP[i], COLORMAP[i + 1]);
    Rgb(std::array::from_fn(|c| (a[c] + t * (b[c] - a[c])).round() as u8))
}

/// Min-max normalises `map` and renders it at `(height, width)` with
/// nearest-neighbour upscaling.
pub fn render_heatmap(map: &Heatmap, height: usize, width: usize) -> RgbImage {
    let norm = map.min_max_normalized();
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let r = (y as usize * norm.height / height).min(norm.height - 1);
        let c = (x as usize * norm.width / width).min(norm.width - 1);
        colormap(norm.at(r, c))
    })
}

/// Pixels of a binary `h × w` mask that touch background or the border.
pub fn contour(mask: &[f32], h: usize, w: usize) -> Vec<bool> {
    let on = |r: usize, c: usize| mask[r * w + c] > 0.5;
    let mut out = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            if !on(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !on(r - 1, c)
                || !on(r + 1, c)
                || !on(r, c - 1)
                || !on(r, c + 1);
            out[r * w + c] = edge;
        }
    }
    out
}

/// Input image with the predicted contour in blue and, when given, the
/// ground-truth contour in red (drawn on top).
pub fn render_overlay(image: &[f32], h: usize, w: usize, predicted: &[f32], truth: Option<&[f32]>) -> RgbImage {
    let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb(std::array::from_fn(|c| (image[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    let mut draw = |mask: &[f32], colour: Rgb<u8>| {
        for (i, &e) in contour(mask, h, w).iter().enumerate() {
            if e {
                img.put_pixel((i % w) as u32, (i / w) as u32, colour);
            }
        }
    };
    draw(predicted, PREDICTED_CONTOUR);
    if let Some(t) = truth {
        draw(t, TRUTH_CONTOUR);
    }
    img
}

fn save(img: impl Into<DynamicImage>, path: &Path) -> Result<()> {
    img.into()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::ingestion(path, e))
}

fn single_entry(image: &Path, mask: Option<&Path>) -> ManifestEntry {
    ManifestEntry {
        image: image.to_path_buf(),
        mask: mask.map(Path::to_path_buf),
        split: Split::Test,
    }
}

/// Writes `order1.png` … `order5.png` and `overlay.png` into `out_dir` and
/// returns their paths in that order.
pub fn explain_export(network: &MhaUnet, image: &Path, truth: Option<&Path>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entry = single_entry(image, truth);
    let (samples, pred) = predict_entries(network, &[&entry], DEFAULT_MASK_THRESHOLD)?;
    let sample = &samples[0];
    let bundle = pred
        .explain
        .first()
        .ok_or_else(|| Error::Config("network has no decoder MHA block to explain".into()))?;
    let (h, w) = (sample.height, sample.width);
    let mut files = Vec::with_capacity(ALL_ORDERS.len() + 1);
    for order in ALL_ORDERS {
        let map = bundle
            .order(order)
            .ok_or_else(|| Error::Config(format!("final MHA block has no order-{order} branch")))?;
        let path = out_dir.join(format!("order{order}.png"));
        save(render_heatmap(map, h, w), &path)?;
        files.push(path);
    }
    let predicted = pred.mask.get(0)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    let overlay = render_overlay(&sample.image, h, w, &predicted, sample.mask.as_deref());
    let path = out_dir.join("overlay.png");
    save(overlay, &path)?;
    files.push(path);
    Ok(files)
}

/// Writes the binary mask (`mask.png`, 0/255) and the probability map
/// (`probability.png`, 8-bit gray) for one image.
pub fn predict_export(network: &MhaUnet, image: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entry = single_entry(image, None);
    let (samples, pred) = predict_entries(network, &[&entry], DEFAULT_MASK_THRESHOLD)?;
    let (h, w) = (samples[0].height, samples[0].width);
    let probs = pred.probs.get(0)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    let gray = |f: &dyn Fn(f32) -> u8| {
        GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([f(probs[y as usize * w + x as usize])]))
    };
    let mask_path = out_dir.join("mask.png");
    save(gray(&|p| if p >= 0.5 { 255 } else { 0 }), &mask_path)?;
    let prob_path = out_dir.join("probability.png");
    save(gray(&|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8), &prob_path)?;
    Ok(vec![mask_path, prob_path])
}
