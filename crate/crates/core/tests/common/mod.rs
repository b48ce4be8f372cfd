//! Shared fixtures and reference implementations for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use image::{GrayImage, Luma, Rgb, RgbImage};
use mha_unet::{ExplainabilityBundle, Heatmap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn cpu() -> Device {
    Device::Cpu
}

pub fn vec64(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dims(), b.dims());
    vec64(a)
        .iter()
        .zip(vec64(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, shape, &cpu()).unwrap()
}

pub fn set_var(var: &Var, data: Vec<f64>) {
    let t = Tensor::from_vec(data, var.shape(), var.device())
        .unwrap()
        .to_dtype(var.dtype())
        .unwrap();
    var.set(&t).unwrap();
}

pub fn fill_var(var: &Var, value: f64) {
    set_var(var, vec![value; var.elem_count()]);
}

/// Outcome of a central finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Entry with the largest relative error, as `name[index]`.
    pub worst: String,
}

/// Compares autograd gradients of `loss` w.r.t. `vars` against central
/// differences at up to `per_tensor` entries of each variable. Entries where
/// both gradients are below `floor` in magnitude are skipped.
pub fn grad_check(
    vars: &[(String, Var)],
    loss: impl Fn() -> Tensor,
    per_tensor: usize,
    eps: f64,
    floor: f64,
    seed: u64,
) -> GradCheck {
    let grads = loss().backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for (name, var) in vars {
        let analytic = match grads.get(var) {
            Some(g) => vec64(g),
            None => vec![0.0; var.elem_count()],
        };
        let base = vec64(var.as_tensor());
        let n = base.len();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        for i in picks {
            let mut plus = base.clone();
            plus[i] += eps;
            set_var(var, plus);
            let lp = vec64(&loss())[0];
            let mut minus = base.clone();
            minus[i] -= eps;
            set_var(var, minus);
            let lm = vec64(&loss())[0];
            set_var(var, base.clone());
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic[i];
            let scale = a.abs().max(numeric.abs());
            if scale < floor {
                continue;
            }
            let rel = (a - numeric).abs() / scale;
            assert!(rel.is_finite(), "{name}[{i}]: analytic {a}, numeric {numeric}");
            if rel > out.max_rel_err {
                out.max_rel_err = rel;
                out.worst = format!("{name}[{i}]: analytic {a:.6e}, numeric {numeric:.6e}");
            }
            out.checked += 1;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Naive reference operators on planar f64 buffers.

/// `(C, H, W)` map.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Planes {
    pub fn from_tensor(t: &Tensor) -> Self {
        let (c, h, w) = t.dims3().unwrap();
        Self { c, h, w, data: vec64(t) }
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    pub fn zip(&self, o: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!((self.c, self.h, self.w), (o.c, o.h, o.w));
        Self {
            data: self.data.iter().zip(&o.data).map(|(&a, &b)| f(a, b)).collect(),
            ..self.clone()
        }
    }

    pub fn channels(&self, start: usize, len: usize) -> Self {
        let plane = self.h * self.w;
        Self {
            c: len,
            h: self.h,
            w: self.w,
            data: self.data[start * plane..(start + len) * plane].to_vec(),
        }
    }

    pub fn concat(&self, o: &Self) -> Self {
        let mut data = self.data.clone();
        data.extend_from_slice(&o.data);
        Self { c: self.c + o.c, h: self.h, w: self.w, data }
    }
}

/// Zero-padded "same" cross-correlation, weight `(O, C, k, k)`.
pub fn conv2d(x: &Planes, weight: &[f64], bias: Option<&[f64]>, out_c: usize, k: usize) -> Planes {
    let p = k as isize / 2;
    let mut y = Planes::zeros(out_c, x.h, x.w);
    for o in 0..out_c {
        for r in 0..x.h {
            for c in 0..x.w {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for i in 0..x.c {
                    for dy in 0..k {
                        for dx in 0..k {
                            let (yy, xx) = (r as isize + dy as isize - p, c as isize + dx as isize - p);
                            if yy < 0 || xx < 0 || yy >= x.h as isize || xx >= x.w as isize {
                                continue;
                            }
                            acc += weight[((o * x.c + i) * k + dy) * k + dx] * x.at(i, yy as usize, xx as usize);
                        }
                    }
                }
                y.set(o, r, c, acc);
            }
        }
    }
    y
}

pub fn conv_ref(x: &Planes, conv: &mha_unet::nn::Conv2d) -> Planes {
    let w = vec64(conv.weight().as_tensor());
    let b = conv.bias().map(|b| vec64(b.as_tensor()));
    let k = conv.weight().dims()[2];
    conv2d(x, &w, b.as_deref(), conv.out_channels(), k)
}

/// Abramowitz–Stegun 7.1.26 (|error| < 1.5e-7).
pub fn erf(x: f64) -> f64 {
    let s = x.signum();
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t + 0.254829592)
            * t
            * (-x * x).exp();
    s * y
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One-sided frequency filter `(C, H, W/2+1)` applied with explicit DFT sums:
/// forward transform normalised by `1/(HW)`, the full spectrum completed by
/// Hermitian symmetry, and the real part of the inverse sum returned.
pub fn naive_global_filter(x: &Planes, f_re: &[f64], f_im: &[f64]) -> Planes {
    let (h, w) = (x.h, x.w);
    let wf = w / 2 + 1;
    let mut out = Planes::zeros(x.c, h, w);
    for ch in 0..x.c {
        let mut spec = vec![(0.0, 0.0); h * w];
        for u in 0..h {
            for v in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for r in 0..h {
                    for c in 0..w {
                        let th = -2.0 * PI * (u as f64 * r as f64 / h as f64 + v as f64 * c as f64 / w as f64);
                        re += x.at(ch, r, c) * th.cos();
                        im += x.at(ch, r, c) * th.sin();
                    }
                }
                spec[u * w + v] = (re / (h * w) as f64, im / (h * w) as f64);
            }
        }
        let filt = |u: usize, v: usize| -> (f64, f64) {
            if v < wf {
                let i = (ch * h + u) * wf + v;
                (f_re[i], f_im[i])
            } else {
                let (uu, vv) = ((h - u) % h, w - v);
                let i = (ch * h + uu) * wf + vv;
                (f_re[i], -f_im[i])
            }
        };
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for u in 0..h {
                    for v in 0..w {
                        let (a, b) = spec[u * w + v];
                        let (fr, fi) = filt(u, v);
                        let (yr, yi) = (a * fr - b * fi, a * fi + b * fr);
                        let th = 2.0 * PI * (u as f64 * r as f64 / h as f64 + v as f64 * c as f64 / w as f64);
                        acc += yr * th.cos() - yi * th.sin();
                    }
                }
                out.set(ch, r, c, acc);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Synthetic dermoscopy-style fixtures.

/// Writes a `size × size` skin-toned RGB image with one dark elliptical
/// lesion (or none) and its binary mask; returns `(image, mask)` paths.
pub fn write_lesion_pair(dir: &Path, name: &str, size: u32, seed: u64, lesion: bool) -> (PathBuf, PathBuf) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let (cy, cx) = (rng.random_range(0.35..0.65) * s, rng.random_range(0.35..0.65) * s);
    let (ry, rx) = (rng.random_range(0.15..0.3) * s, rng.random_range(0.15..0.3) * s);
    let inside = |x: u32, y: u32| {
        lesion && ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2) <= 1.0
    };
    let mut img = RgbImage::new(size, size);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let noise = rng.random_range(-12.0..12.0);
        let base = if inside(x, y) { [105.0, 62.0, 45.0] } else { [226.0, 186.0, 160.0] };
        *px = Rgb(base.map(|v: f64| (v + noise).clamp(0.0, 255.0) as u8));
    }
    let mask = GrayImage::from_fn(size, size, |x, y| Luma([if inside(x, y) { 255 } else { 0 }]));
    let image_path = dir.join(format!("{name}.png"));
    let mask_path = dir.join(format!("{name}_mask.png"));
    img.save(&image_path).unwrap();
    mask.save(&mask_path).unwrap();
    (image_path, mask_path)
}

pub fn write_manifest(dir: &Path, rows: &[(PathBuf, Option<PathBuf>, &str)]) -> PathBuf {
    let mut text = String::from("# image\tmask\tsplit\n");
    for (img, mask, split) in rows {
        let m = mask.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "-".into());
        text.push_str(&format!("{}\t{}\t{}\n", img.display(), m, split));
    }
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, text).unwrap();
    path
}

// ---------------------------------------------------------------------------
// Masks and explainability bundles.

pub fn random_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<f32> {
    (0..n).map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect()
}

/// Straight-line reimplementation of the four positional rules.
pub fn eica_oracle(bundle: &ExplainabilityBundle, frac: f64, min_energy: f64) -> ([bool; 4], u8) {
    let mut conds = [false; 4];
    for (i, order) in [1usize, 2, 4, 5].into_iter().enumerate() {
        let m = &bundle.order_maps[&order];
        let lo = m.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = m.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            continue;
        }
        let norm: Vec<f64> = m.data.iter().map(|v| (v - lo) / (hi - lo)).collect();
        let peak = norm.iter().cloned().fold(0.0, f64::max);
        let (mut e, mut sr, mut sc) = (0.0, 0.0, 0.0);
        for (k, &v) in norm.iter().enumerate() {
            if v >= frac * peak {
                e += v;
                sr += v * (k / m.width) as f64;
                sc += v * (k % m.width) as f64;
            }
        }
        if e < min_energy || e == 0.0 {
            continue;
        }
        let row = if m.height > 1 { sr / e / (m.height - 1) as f64 } else { 0.5 };
        let col = if m.width > 1 { sc / e / (m.width - 1) as f64 } else { 0.5 };
        conds[i] = match order {
            1 => row < 0.5,
            2 => row >= 0.5 && col >= 0.5,
            4 => row < 0.5 && col >= 0.5,
            _ => col < 0.5,
        };
    }
    (conds, conds.iter().all(|&c| c) as u8)
}

pub fn blob(h: usize, w: usize, cy: f64, cx: f64, sigma: f64) -> Heatmap {
    let data = (0..h * w)
        .map(|k| {
            let (r, c) = ((k / w) as f64, (k % w) as f64);
            (-((r - cy).powi(2) + (c - cx).powi(2)) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    Heatmap::new(h, w, data).unwrap()
}

pub fn bundle_from(maps: Vec<(usize, Heatmap)>) -> ExplainabilityBundle {
    let (h, w) = (maps[0].1.height, maps[0].1.width);
    ExplainabilityBundle {
        order_maps: maps.into_iter().collect::<BTreeMap<_, _>>(),
        probability: Heatmap::zeros(h, w),
    }
}

pub fn random_bundle(rng: &mut ChaCha8Rng) -> ExplainabilityBundle {
    let h = rng.random_range(4..20);
    let w = rng.random_range(4..20);
    let maps = (1..=5)
        .map(|o| {
            let map = match rng.random_range(0..4) {
                // smooth blob somewhere, plus noise
                0 | 1 => {
                    let b = blob(h, w, rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64), rng.random_range(0.5..4.0));
                    let noise = rng.random_range(0.0..0.3);
                    Heatmap::new(h, w, b.data.iter().map(|v| v + noise * rng.random_range(0.0..1.0)).collect()).unwrap()
                }
                2 => Heatmap::new(h, w, (0..h * w).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap(),
                _ => Heatmap::zeros(h, w),
            };
            (o, map)
        })
        .collect();
    bundle_from(maps)
}

pub fn positive_bundle(h: usize, w: usize) -> ExplainabilityBundle {
    let (fh, fw) = ((h - 1) as f64, (w - 1) as f64);
    bundle_from(vec![
        (1, blob(h, w, 0.1 * fh, 0.5 * fw, 1.5)),
        (2, blob(h, w, 0.85 * fh, 0.85 * fw, 1.5)),
        (3, blob(h, w, 0.5 * fh, 0.5 * fw, 3.0)),
        (4, blob(h, w, 0.15 * fh, 0.85 * fw, 1.5)),
        (5, blob(h, w, 0.5 * fh, 0.1 * fw, 1.5)),
    ])
}

