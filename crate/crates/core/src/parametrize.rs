//! Differentiable surjective maps from unconstrained parameters onto images
//! with values in the open unit cube.
//!
//! All kinds take parameters of shape `[height, width, channels]` and
//! produce images of the same shape.
//!
//! # Fourier layout
//!
//! For the `fft` and `ffte` kinds each channel's `height * width`
//! parameters, read in row-major order, pack the half spectrum of a real
//! image. With `H = height`, `W = width` (powers of two, at least 2) and
//! `X(ky, kx)` the spectrum:
//!
//! 1. `H` values for column `kx = 0`: `Re X(0,0)`, `Re X(H/2,0)`, then
//!    `Re X(ky,0), Im X(ky,0)` for `ky = 1 .. H/2-1`.
//! 2. `H` values for column `kx = W/2`, in the same order.
//! 3. `Re X(ky,kx), Im X(ky,kx)` for `kx = 1 .. W/2-1` (outer) and
//!    `ky = 0 .. H-1` (inner).
//!
//! The remaining spectrum follows from Hermitian symmetry and the image is
//! the unnormalized inverse transform `z(p) = Σ_k X(k) e^{+2πi k·p}`, so a
//! lone DC coefficient `c` yields the constant image `sigmoid(c)`.
//!
//! `ffte` multiplies every packed value by an energy scale before the
//! transform: `1 / max(fy² + fx², 1)^{1/2}` with integer frequencies
//! `fy = min(ky, H - ky)`, `fx = kx`, rescaled to unit mean over the packed
//! entries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fft2_in_place, Complex, Direction};
use crate::network::{sigmoid, Differentiable};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Rgb,
    Fft,
    Ffte,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parametrization {
    kind: ParamKind,
    shape: [usize; 3],
    /// Per-channel scale on packed coefficients; empty for `Rgb`.
    scale: Vec<f64>,
    /// `(ky, kx, part)` of every packed slot; `part` 0 is real, 1 imaginary.
    slots: Vec<(usize, usize, u8)>,
}

impl Parametrization {
    pub fn new(kind: ParamKind, height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument("image dims must be positive".into()));
        }
        let mut p = Self {
            kind,
            shape: [height, width, channels],
            scale: Vec::new(),
            slots: Vec::new(),
        };
        if kind != ParamKind::Rgb {
            let pow2 = |n: usize| n >= 2 && n.is_power_of_two();
            if !pow2(height) || !pow2(width) {
                return Err(Error::InvalidArgument(format!(
                    "fourier parametrizations need power-of-two dims >= 2, got {height}x{width}"
                )));
            }
            p.slots = packing(height, width);
            p.scale = match kind {
                ParamKind::Ffte => energy_scale(height, &p.slots),
                _ => vec![1.0; height * width],
            };
        }
        Ok(p)
    }

    /// Fourier parametrization with a caller-supplied per-slot scale.
    pub fn with_scale(height: usize, width: usize, channels: usize, scale: Vec<f64>) -> Result<Self> {
        let mut p = Self::new(ParamKind::Ffte, height, width, channels)?;
        if scale.len() != height * width {
            return Err(Error::shape("energy scale", &[height * width], &[scale.len()]));
        }
        p.scale = scale;
        Ok(p)
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn n_params(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn energy_scale(&self) -> &[f64] {
        &self.scale
    }

    fn check(&self, t: &Tensor, what: &str) -> Result<()> {
        if t.shape() != self.shape {
            return Err(Error::shape(what, &self.shape, t.shape()));
        }
        Ok(())
    }

    /// Pre-sigmoid image `z` such that `apply(v) = sigmoid(z)`.
    pub fn linear_part(&self, v: &Tensor) -> Result<Tensor> {
        self.check(v, "parametrization input")?;
        if self.kind == ParamKind::Rgb {
            return Ok(v.clone());
        }
        let [h, w, c] = self.shape;
        let mut out = Tensor::zeros(&self.shape);
        let mut spectrum = vec![Complex::ZERO; h * w];
        for ch in 0..c {
            spectrum.iter_mut().for_each(|s| *s = Complex::ZERO);
            for (i, &(ky, kx, part)) in self.slots.iter().enumerate() {
                let value = v.data()[i * c + ch] * self.scale[i];
                let slot = &mut spectrum[ky * w + kx];
                if part == 0 {
                    slot.re = value;
                } else {
                    slot.im = value;
                }
            }
            fill_hermitian(&mut spectrum, h, w);
            fft2_in_place(&mut spectrum, h, w, Direction::Inverse);
            for (p, s) in spectrum.iter().enumerate() {
                out.data_mut()[p * c + ch] = s.re;
            }
        }
        Ok(out)
    }

    /// Adjoint of [`Self::linear_part`].
    pub fn linear_part_adjoint(&self, g: &Tensor) -> Result<Tensor> {
        self.check(g, "parametrization cotangent")?;
        if self.kind == ParamKind::Rgb {
            return Ok(g.clone());
        }
        let [h, w, c] = self.shape;
        let mut out = Tensor::zeros(&self.shape);
        let mut spectrum = vec![Complex::ZERO; h * w];
        for ch in 0..c {
            for (p, s) in spectrum.iter_mut().enumerate() {
                *s = Complex::new(g.data()[p * c + ch], 0.0);
            }
            fft2_in_place(&mut spectrum, h, w, Direction::Forward);
            for (i, &(ky, kx, part)) in self.slots.iter().enumerate() {
                let s = spectrum[ky * w + kx];
                let paired = !self_conjugate(ky, kx, h, w);
                let factor = if paired { 2.0 } else { 1.0 };
                let value = if part == 0 { s.re } else { s.im };
                out.data_mut()[i * c + ch] = factor * value * self.scale[i];
            }
        }
        Ok(out)
    }

    /// `P(v)`: the image for parameters `v`.
    pub fn apply(&self, v: &Tensor) -> Result<Tensor> {
        Ok(self.linear_part(v)?.map(sigmoid))
    }

    /// Cotangent of `v` given a cotangent of the image.
    pub fn apply_vjp(&self, v: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
        self.check(cotangent, "parametrization cotangent")?;
        let z = self.linear_part(v)?;
        let data = z
            .data()
            .iter()
            .zip(cotangent.data())
            .map(|(&zv, &g)| {
                let s = sigmoid(zv);
                g * s * (1.0 - s)
            })
            .collect();
        self.linear_part_adjoint(&Tensor::new(self.shape.to_vec(), data)?)
    }

    /// Parameters whose image is `image`; entries must lie in (0, 1).
    pub fn preimage(&self, image: &Tensor) -> Result<Tensor> {
        self.check(image, "image")?;
        if image.data().iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::InvalidArgument("image values must lie in (0, 1)".into()));
        }
        let z = image.map(|p| (p / (1.0 - p)).ln());
        if self.kind == ParamKind::Rgb {
            return Ok(z);
        }
        let [h, w, c] = self.shape;
        let n = (h * w) as f64;
        let mut out = Tensor::zeros(&self.shape);
        let mut spectrum = vec![Complex::ZERO; h * w];
        for ch in 0..c {
            for (p, s) in spectrum.iter_mut().enumerate() {
                *s = Complex::new(z.data()[p * c + ch], 0.0);
            }
            fft2_in_place(&mut spectrum, h, w, Direction::Forward);
            for (i, &(ky, kx, part)) in self.slots.iter().enumerate() {
                let s = spectrum[ky * w + kx];
                let value = if part == 0 { s.re } else { s.im } / n;
                out.data_mut()[i * c + ch] = value / self.scale[i];
            }
        }
        Ok(out)
    }
}

impl Differentiable for Parametrization {
    type Tape = (Tensor, Tensor);

    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn output_shape(&self) -> &[usize] {
        &self.shape
    }

    fn record(&self, v: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((v.clone(), self.apply(v)?))
    }

    fn output<'t>(&self, tape: &'t (Tensor, Tensor)) -> &'t Tensor {
        &tape.1
    }

    fn backward(&self, tape: &(Tensor, Tensor), cotangent: &Tensor) -> Result<Tensor> {
        self.check(cotangent, "parametrization cotangent")?;
        let image = &tape.1;
        let data = image
            .data()
            .iter()
            .zip(cotangent.data())
            .map(|(&s, &g)| g * s * (1.0 - s))
            .collect();
        self.linear_part_adjoint(&Tensor::new(self.shape.to_vec(), data)?)
    }
}

fn self_conjugate(ky: usize, kx: usize, h: usize, w: usize) -> bool {
    (ky == 0 || ky == h / 2) && (kx == 0 || kx == w / 2)
}

fn packing(h: usize, w: usize) -> Vec<(usize, usize, u8)> {
    let mut slots = Vec::with_capacity(h * w);
    for kx in [0, w / 2] {
        slots.push((0, kx, 0));
        slots.push((h / 2, kx, 0));
        for ky in 1..h / 2 {
            slots.push((ky, kx, 0));
            slots.push((ky, kx, 1));
        }
    }
    for kx in 1..w / 2 {
        for ky in 0..h {
            slots.push((ky, kx, 0));
            slots.push((ky, kx, 1));
        }
    }
    debug_assert_eq!(slots.len(), h * w);
    slots
}

fn energy_scale(h: usize, slots: &[(usize, usize, u8)]) -> Vec<f64> {
    let raw: Vec<f64> = slots
        .iter()
        .map(|&(ky, kx, _)| {
            let fy = ky.min(h - ky) as f64;
            let fx = kx as f64;
            1.0 / (fy * fy + fx * fx).max(1.0).sqrt()
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.into_iter().map(|s| s / mean).collect()
}

/// Completes a spectrum whose columns `0 ..= w/2` hold the packed half.
fn fill_hermitian(spectrum: &mut [Complex], h: usize, w: usize) {
    for kx in [0, w / 2] {
        for ky in h / 2 + 1..h {
            spectrum[ky * w + kx] = spectrum[(h - ky) * w + kx].conj();
        }
    }
    for kx in w / 2 + 1..w {
        for ky in 0..h {
            spectrum[ky * w + kx] = spectrum[((h - ky) % h) * w + (w - kx)].conj();
        }
    }
}
