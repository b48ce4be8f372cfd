//! Real 2-D discrete Fourier transform and learnable frequency-domain filtering.
//!
//! The transform is evaluated as dense matrix products against cosine/sine
//! bases. Feature maps inside the network are at most 64×64, where this is
//! cheap, and it keeps the transform differentiable through ordinary matmuls.
//!
//! Conventions: the forward transform carries the `1/(H·W)` factor and the
//! inverse is unnormalised, so `irfft2(rfft2(x)) == x`. Spectra are stored
//! one-sided along the width axis (`W/2 + 1` columns).

use std::f64::consts::PI;

use candle_core::{Device, DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::{bilinear_resize, matmul_last, matmul_rows};

pub fn one_sided_width(width: usize) -> usize {
    width / 2 + 1
}

/// Cosine/sine bases for one `(height, width)` grid.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    height: usize,
    width: usize,
    /// `(W, Wf)`: cos(2π v y / W)
    row_cos: Tensor,
    /// `(W, Wf)`: −sin(2π v y / W)
    row_nsin: Tensor,
    /// `(H, H)`: cos(2π u x / H), symmetric
    col_cos: Tensor,
    /// `(H, H)`: sin(2π u x / H), symmetric
    col_sin: Tensor,
    /// `(Wf, W)`: c_v cos(2π v y / W), with Hermitian weights c_v
    inv_cos: Tensor,
    /// `(Wf, W)`: c_v sin(2π v y / W)
    inv_sin: Tensor,
}

impl SpectralBasis {
    pub fn new(height: usize, width: usize, dtype: DType, device: &Device) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("empty spatial grid".into()));
        }
        let wf = one_sided_width(width);
        let mut row_cos = vec![0.0; width * wf];
        let mut row_nsin = vec![0.0; width * wf];
        let mut inv_cos = vec![0.0; wf * width];
        let mut inv_sin = vec![0.0; wf * width];
        for y in 0..width {
            for v in 0..wf {
                let theta = 2.0 * PI * ((v * y) % width) as f64 / width as f64;
                row_cos[y * wf + v] = theta.cos();
                row_nsin[y * wf + v] = -theta.sin();
                let weight = if v == 0 || (width.is_multiple_of(2) && v == width / 2) {
                    1.0
                } else {
                    2.0
                };
                inv_cos[v * width + y] = weight * theta.cos();
                inv_sin[v * width + y] = weight * theta.sin();
            }
        }
        let mut col_cos = vec![0.0; height * height];
        let mut col_sin = vec![0.0; height * height];
        for u in 0..height {
            for x in 0..height {
                let theta = 2.0 * PI * ((u * x) % height) as f64 / height as f64;
                col_cos[u * height + x] = theta.cos();
                col_sin[u * height + x] = theta.sin();
            }
        }
        let t = |v: Vec<f64>, r: usize, c: usize| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, (r, c), device)?.to_dtype(dtype)?)
        };
        Ok(Self {
            height,
            width,
            row_cos: t(row_cos, width, wf)?,
            row_nsin: t(row_nsin, width, wf)?,
            col_cos: t(col_cos, height, height)?,
            col_sin: t(col_sin, height, height)?,
            inv_cos: t(inv_cos, wf, width)?,
            inv_sin: t(inv_sin, wf, width)?,
        })
    }

    fn check(&self, x: &Tensor, w: usize) -> Result<()> {
        let rank = x.rank();
        let h = x.dim(rank - 2)?;
        if h != self.height || w != self.width {
            return Err(Error::Shape(format!(
                "basis built for {}x{}, map is {h}x{w}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Normalised forward transform of a real `(..., H, W)` map into
    /// `(real, imag)` spectra of shape `(..., H, W/2+1)`.
    pub fn rfft2(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let rank = x.rank();
        self.check(x, x.dim(rank - 1)?)?;
        let re = matmul_last(x, &self.row_cos)?;
        let im = matmul_last(x, &self.row_nsin)?;
        // e^{-iθ}(a + ib) = (a cosθ + b sinθ) + i(b cosθ − a sinθ)
        let out_re = (matmul_rows(&re, &self.col_cos)? + matmul_rows(&im, &self.col_sin)?)?;
        let out_im = (matmul_rows(&im, &self.col_cos)? - matmul_rows(&re, &self.col_sin)?)?;
        let scale = 1.0 / (self.height * self.width) as f64;
        Ok(((out_re * scale)?, (out_im * scale)?))
    }

    /// Unnormalised inverse of [`SpectralBasis::rfft2`].
    pub fn irfft2(&self, re: &Tensor, im: &Tensor) -> Result<Tensor> {
        let rank = re.rank();
        if re.dim(rank - 1)? != one_sided_width(self.width) || re.dims() != im.dims() {
            return Err(Error::Shape(format!(
                "spectrum {:?}/{:?} does not match a {}x{} grid",
                re.dims(),
                im.dims(),
                self.height,
                self.width
            )));
        }
        let col_re = (matmul_rows(re, &self.col_cos)? - matmul_rows(im, &self.col_sin)?)?;
        let col_im = (matmul_rows(im, &self.col_cos)? + matmul_rows(re, &self.col_sin)?)?;
        Ok((matmul_last(&col_re, &self.inv_cos)? - matmul_last(&col_im, &self.inv_sin)?)?)
    }

    /// `irfft2(filter ⊙ rfft2(x))` for a complex filter broadcast over the
    /// leading axes of `x`.
    pub fn filter(&self, x: &Tensor, w_re: &Tensor, w_im: &Tensor) -> Result<Tensor> {
        let (re, im) = self.rfft2(x)?;
        let f_re = (re.broadcast_mul(w_re)? - im.broadcast_mul(w_im)?)?;
        let f_im = (re.broadcast_mul(w_im)? + im.broadcast_mul(w_re)?)?;
        self.irfft2(&f_re, &f_im)
    }
}

/// Bilinear (corner-aligned) resampling of a `(C, H, Wf)` frequency-domain
/// filter onto a different grid.
pub fn resample_filter(weights: &Tensor, height: usize, freq_width: usize) -> Result<Tensor> {
    if height == 0 || freq_width == 0 {
        return Err(Error::Shape("cannot resample a filter onto an empty grid".into()));
    }
    bilinear_resize(weights, height, freq_width, true)
}
