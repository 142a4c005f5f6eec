//! Frequency-domain spectrum encoding.
//!
//! Pipeline for one image: centered magnitude spectrum, radial low-pass
//! projection, band × sector log-magnitude pooling ([`freqmix`]), a two-layer
//! ReLU MLP applied to every descriptor, mean pooling and L2 normalization.
//!
//! Radial distances are normalized so that the grid corner sits at radius 1:
//! a bin at offset `(du, dv)` from the DC bin has radius
//! `sqrt((du / (H/2))² + (dv / (W/2))²) / √2`. A cutoff of 1.0 keeps every bin.

use std::f64::consts::PI;

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::tensor::{self, Tape, Tensor, Var};

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("cutoff radius must lie in (0, 1], got {0}")]
    Cutoff(f64),
    #[error("bands and sectors must be positive, got {bands}×{sectors}")]
    Partition { bands: usize, sectors: usize },
    #[error("images differ in geometry")]
    Geometry,
    #[error("tokenizer dimensions inconsistent: {0}")]
    Dimensions(String),
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, SpectralError>;

/// Default low-pass cutoff as a fraction of the corner radius.
pub const DEFAULT_CUTOFF: f64 = 0.25;

/// Per-descriptor features appended to the pooled log-magnitude: band
/// center, sector direction (cos, sin) and a constant bias input.
pub const POSITION_FEATURES: usize = 4;

/// Unnormalized forward 2-D DFT of a real `height × width` grid.
pub fn fft2d(grid: &[f64], height: usize, width: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = grid.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    transform_2d(&mut buf, height, width, false);
    buf
}

/// Inverse of [`fft2d`], including the `1 / (H·W)` normalization.
pub fn ifft2d(spectrum: &[Complex64], height: usize, width: usize) -> Vec<Complex64> {
    let mut buf = spectrum.to_vec();
    transform_2d(&mut buf, height, width, true);
    let scale = 1.0 / (height * width) as f64;
    buf.iter_mut().for_each(|c| *c *= scale);
    buf
}

fn transform_2d(buf: &mut [Complex64], height: usize, width: usize, inverse: bool) {
    assert_eq!(buf.len(), height * width, "grid size mismatch");
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(width), planner.plan_fft_inverse(height))
    } else {
        (planner.plan_fft_forward(width), planner.plan_fft_forward(height))
    };
    for row in buf.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); height];
    for x in 0..width {
        for (y, c) in column.iter_mut().enumerate() {
            *c = buf[y * width + x];
        }
        col_fft.process(&mut column);
        for (y, c) in column.iter().enumerate() {
            buf[y * width + x] = *c;
        }
    }
}

/// Moves the DC bin from `(0, 0)` to `(⌊H/2⌋, ⌊W/2⌋)`.
pub fn fftshift<T: Copy>(grid: &[T], height: usize, width: usize) -> Vec<T> {
    let (cy, cx) = (height / 2, width / 2);
    let mut out = grid.to_vec();
    for y in 0..height {
        for x in 0..width {
            out[((y + cy) % height) * width + (x + cx) % width] = grid[y * width + x];
        }
    }
    out
}

/// Centered magnitude spectrum, one plane per image channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    height: usize,
    width: usize,
    channels: usize,
    magnitudes: Vec<f64>,
}

impl Spectrum {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn magnitudes(&self) -> &[f64] {
        &self.magnitudes
    }

    pub fn plane(&self, channel: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.magnitudes[channel * n..(channel + 1) * n]
    }

    pub fn center(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    /// Builds a spectrum from already-centered magnitudes.
    pub fn from_magnitudes(height: usize, width: usize, channels: usize, magnitudes: Vec<f64>) -> Self {
        assert_eq!(magnitudes.len(), height * width * channels, "spectrum size mismatch");
        assert!(magnitudes.iter().all(|&m| m >= 0.0), "magnitudes must be non-negative");
        Self {
            height,
            width,
            channels,
            magnitudes,
        }
    }
}

/// Normalized radial distance of bin `(y, x)` from the DC bin.
pub fn normalized_radius(y: usize, x: usize, height: usize, width: usize) -> f64 {
    let du = (y as f64 - (height / 2) as f64) / (height as f64 / 2.0);
    let dv = (x as f64 - (width / 2) as f64) / (width as f64 / 2.0);
    (du * du + dv * dv).sqrt() / std::f64::consts::SQRT_2
}

fn bin_angle(y: usize, x: usize, height: usize, width: usize) -> f64 {
    let du = (y as f64 - (height / 2) as f64) / (height as f64 / 2.0);
    let dv = (x as f64 - (width / 2) as f64) / (width as f64 / 2.0);
    dv.atan2(du)
}

pub fn magnitude_spectrum(image: &Image) -> Spectrum {
    let (h, w) = (image.height(), image.width());
    let mut magnitudes = Vec::with_capacity(image.data().len());
    for c in 0..image.channels() {
        let f = fft2d(image.plane(c), h, w);
        let mag: Vec<f64> = f.iter().map(|z| z.norm()).collect();
        magnitudes.extend(fftshift(&mag, h, w));
    }
    Spectrum {
        height: h,
        width: w,
        channels: image.channels(),
        magnitudes,
    }
}

fn check_cutoff(cutoff: f64) -> Result<()> {
    if cutoff > 0.0 && cutoff <= 1.0 {
        Ok(())
    } else {
        Err(SpectralError::Cutoff(cutoff))
    }
}

/// Zeroes every bin farther than `cutoff` from the center.
pub fn lowpass_project(spec: &Spectrum, cutoff: f64) -> Result<Spectrum> {
    check_cutoff(cutoff)?;
    let (h, w) = (spec.height, spec.width);
    let mut out = spec.clone();
    for plane in out.magnitudes.chunks_exact_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                if normalized_radius(y, x, h, w) > cutoff {
                    plane[y * w + x] = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// Band-major `(bands·sectors) × channels` grid of mean `ln(1 + magnitude)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptors {
    pub bands: usize,
    pub sectors: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl Descriptors {
    pub fn cells(&self) -> usize {
        self.bands * self.sectors
    }

    pub fn get(&self, band: usize, sector: usize, channel: usize) -> f64 {
        self.values[(band * self.sectors + sector) * self.channels + channel]
    }
}

/// Cell of a bin inside the disc of radius `cutoff`, or `None` outside it.
pub fn cell_of(y: usize, x: usize, height: usize, width: usize, cutoff: f64, bands: usize, sectors: usize) -> Option<usize> {
    let r = normalized_radius(y, x, height, width);
    if r > cutoff {
        return None;
    }
    let band = ((r / cutoff * bands as f64) as usize).min(bands - 1);
    let angle = bin_angle(y, x, height, width);
    let sector = (((angle + PI) / (2.0 * PI) * sectors as f64) as usize).min(sectors - 1);
    Some(band * sectors + sector)
}

/// Partitions the low-pass disc into `bands` concentric rings × `sectors`
/// angular wedges and averages `ln(1 + magnitude)` per cell and channel.
/// Empty cells yield zeros.
pub fn freqmix(spec: &Spectrum, cutoff: f64, bands: usize, sectors: usize) -> Result<Descriptors> {
    check_cutoff(cutoff)?;
    if bands == 0 || sectors == 0 {
        return Err(SpectralError::Partition { bands, sectors });
    }
    let (h, w, ch) = (spec.height, spec.width, spec.channels);
    let cells = bands * sectors;
    let mut sums = vec![0.0; cells * ch];
    let mut counts = vec![0usize; cells];
    for y in 0..h {
        for x in 0..w {
            let Some(cell) = cell_of(y, x, h, w, cutoff, bands, sectors) else {
                continue;
            };
            counts[cell] += 1;
            for c in 0..ch {
                sums[cell * ch + c] += spec.plane(c)[y * w + x].ln_1p();
            }
        }
    }
    for (cell, &n) in counts.iter().enumerate() {
        if n > 0 {
            sums[cell * ch..(cell + 1) * ch].iter_mut().for_each(|s| *s /= n as f64);
        }
    }
    Ok(Descriptors {
        bands,
        sectors,
        channels: ch,
        values: sums,
    })
}

/// Unit-norm embedding of an image's low-pass spectrum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralToken {
    pub values: Vec<f64>,
    pub source_client: Option<usize>,
    pub round: Option<usize>,
}

impl SpectralToken {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            source_client: None,
            round: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    /// Rescales to unit norm; the zero vector becomes `e₁`.
    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            self.values.iter_mut().for_each(|v| *v /= n);
        } else {
            log::warn!("degenerate spectral token: zero vector replaced by e1");
            self.values.iter_mut().for_each(|v| *v = 0.0);
            if let Some(first) = self.values.first_mut() {
                *first = 1.0;
            }
        }
        self
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Learnable projections of the spectral tokenizer plus its fixed partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerParams {
    /// `(channels_in + POSITION_FEATURES) × hidden`
    pub w1: Tensor,
    /// `hidden × dim`
    pub w2: Tensor,
    pub bands: usize,
    pub sectors: usize,
    pub cutoff: f64,
}

impl TokenizerParams {
    /// Gaussian initialization with scale `1/√fan_in`. Descriptors are
    /// averaged over image channels, so the input width is fixed.
    pub fn init<R: Rng + ?Sized>(hidden: usize, dim: usize, bands: usize, sectors: usize, cutoff: f64, rng: &mut R) -> Result<Self> {
        check_cutoff(cutoff)?;
        if bands == 0 || sectors == 0 {
            return Err(SpectralError::Partition { bands, sectors });
        }
        if hidden == 0 || dim == 0 {
            return Err(SpectralError::Dimensions(format!("hidden={hidden}, dim={dim}")));
        }
        let input = 1 + POSITION_FEATURES;
        let w1 = Tensor::randn(&[input, hidden], 1.0 / (input as f64).sqrt(), rng);
        let w2 = Tensor::randn(&[hidden, dim], 1.0 / (hidden as f64).sqrt(), rng);
        Ok(Self {
            w1,
            w2,
            bands,
            sectors,
            cutoff,
        })
    }

    pub fn dim(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        check_cutoff(self.cutoff)?;
        if self.bands * self.sectors == 0 {
            return Err(SpectralError::Partition {
                bands: self.bands,
                sectors: self.sectors,
            });
        }
        let (s1, s2) = (self.w1.shape(), self.w2.shape());
        if s1.len() != 2 || s2.len() != 2 || s1[0] != 1 + POSITION_FEATURES || s1[1] != s2[0] {
            return Err(SpectralError::Dimensions(format!("w1 {s1:?}, w2 {s2:?}")));
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.w2]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.w2]
    }

    /// Parameter-free part of the pipeline: the `P × (1 + 4)` MLP input
    /// for one image. Depends only on the image and the partition.
    pub fn features(&self, image: &Image) -> Result<Tensor> {
        let spec = lowpass_project(&magnitude_spectrum(image), self.cutoff)?;
        let desc = freqmix(&spec, self.cutoff, self.bands, self.sectors)?;
        Ok(descriptor_features(&desc))
    }

    pub fn bind(&self, tape: &mut Tape) -> TokenizerVars {
        TokenizerVars {
            w1: tape.param(&self.w1),
            w2: tape.param(&self.w2),
        }
    }

    /// Differentiable `normalize(mean_p relu(relu(x_p W1) W2))`, `1 × dim`.
    pub fn forward(&self, tape: &mut Tape, vars: &TokenizerVars, features: Var) -> tensor::Result<Var> {
        let h = tape.matmul(features, vars.w1)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, vars.w2)?;
        let o = tape.relu(o);
        let pooled = tape.mean_rows(o)?;
        if tape.value(pooled).iter().all(|&v| v == 0.0) {
            log::warn!("degenerate spectral token: pooled vector is zero, using e1");
        }
        Ok(tape.l2_normalize_rows(pooled))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TokenizerVars {
    pub w1: Var,
    pub w2: Var,
}

impl TokenizerVars {
    pub fn ids(&self) -> Vec<Var> {
        vec![self.w1, self.w2]
    }
}

/// Channel-averaged descriptor value followed by the cell's band center,
/// sector direction and a constant 1.
pub fn descriptor_features(desc: &Descriptors) -> Tensor {
    let width = 1 + POSITION_FEATURES;
    let mut data = Vec::with_capacity(desc.cells() * width);
    for b in 0..desc.bands {
        for s in 0..desc.sectors {
            let mean = (0..desc.channels).map(|c| desc.get(b, s, c)).sum::<f64>() / desc.channels as f64;
            let radius = (b as f64 + 0.5) / desc.bands as f64;
            let angle = -PI + (s as f64 + 0.5) / desc.sectors as f64 * 2.0 * PI;
            data.extend([mean, radius, angle.cos(), angle.sin(), 1.0]);
        }
    }
    Tensor::new(vec![desc.cells(), width], data)
        .expect("descriptor grid is non-empty")
        .with_requires_grad(false)
}

/// Full tokenization of one image without recording gradients.
pub fn spectral_tokenize(image: &Image, params: &TokenizerParams) -> Result<SpectralToken> {
    params.validate()?;
    let features = params.features(image)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let x = tape.param(&features);
    let s = params.forward(&mut tape, &vars, x)?;
    Ok(SpectralToken::new(tape.value(s).to_vec()))
}

/// `‖P_LP(Δ)‖ / ‖Δ‖` where `Δ` is the difference of the two centered
/// magnitude spectra. Identical spectra give 0.
pub fn spectrum_distance_ratio(a: &Image, b: &Image, cutoff: f64) -> Result<f64> {
    let (full, low) = spectrum_distances(a, b, cutoff)?;
    Ok(if full == 0.0 { 0.0 } else { low / full })
}

/// Full-spectrum and low-pass magnitude distances between two images.
pub fn spectrum_distances(a: &Image, b: &Image, cutoff: f64) -> Result<(f64, f64)> {
    check_cutoff(cutoff)?;
    if !a.same_geometry(b) {
        return Err(SpectralError::Geometry);
    }
    let (sa, sb) = (magnitude_spectrum(a), magnitude_spectrum(b));
    let (h, w) = (a.height(), a.width());
    let (mut full, mut low) = (0.0, 0.0);
    for (i, (x, y)) in sa.magnitudes.iter().zip(&sb.magnitudes).enumerate() {
        let d = (x - y) * (x - y);
        full += d;
        let p = i % (h * w);
        if normalized_radius(p / w, p % w, h, w) <= cutoff {
            low += d;
        }
    }
    Ok((full.sqrt(), low.sqrt()))
}
