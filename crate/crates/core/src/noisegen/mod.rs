//! Corruption-noise generators. Every generator takes an explicit
//! [`RngState`]; identical dims, parameters and stream give bit-identical
//! fields.

mod simplex;
mod synomaly;

pub use simplex::GradientNoise;
pub use synomaly::{
    synomaly_noise, synomaly_preset, AnomalyDirection, SizeClass, SynomalyParams, SynomalySample,
};

use crate::error::{Error, Result};
use crate::imgrid::Image2D;
use crate::rng::RngState;

/// i.i.d. standard normal field.
pub fn gaussian_noise(width: usize, height: usize, rng: &mut RngState) -> Image2D {
    Image2D::from_fn(width, height, |_, _| rng.normal() as f32)
}

/// Bilinear resampling with corner-aligned grids: source node `i` lands on
/// destination coordinate `i * (dst - 1) / (src - 1)`.
pub fn upsample_bilinear(src: &Image2D, width: usize, height: usize) -> Image2D {
    let (sw, sh) = src.dims();
    if (sw, sh) == (width, height) {
        return src.clone();
    }
    let map = |d: usize, dn: usize, sn: usize| -> (usize, usize, f64) {
        if sn == 1 || dn == 1 {
            return (0, 0, 0.0);
        }
        let s = d as f64 * (sn - 1) as f64 / (dn - 1) as f64;
        let i0 = (s.floor() as usize).min(sn - 1);
        let i1 = (i0 + 1).min(sn - 1);
        (i0, i1, s - i0 as f64)
    };
    let xs: Vec<_> = (0..width).map(|x| map(x, width, sw)).collect();
    let ys: Vec<_> = (0..height).map(|y| map(y, height, sh)).collect();
    Image2D::from_fn(width, height, |x, y| {
        let (x0, x1, fx) = xs[x];
        let (y0, y1, fy) = ys[y];
        let a = src.get(x0, y0) as f64;
        let b = src.get(x1, y0) as f64;
        let c = src.get(x0, y1) as f64;
        let d = src.get(x1, y1) as f64;
        let top = a + (b - a) * fx;
        let bottom = c + (d - c) * fx;
        (top + (bottom - top) * fy) as f32
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoarseParams {
    /// Side of the low-resolution grid.
    pub resolution: usize,
    pub std: f64,
}

impl Default for CoarseParams {
    fn default() -> Self {
        Self {
            resolution: 16,
            std: 0.2,
        }
    }
}

/// Low-resolution Gaussian grid scaled by `std`, bilinearly upsampled.
pub fn coarse_noise(
    width: usize,
    height: usize,
    params: &CoarseParams,
    rng: &mut RngState,
) -> Result<Image2D> {
    if params.resolution == 0 {
        return Err(Error::invalid("coarse noise resolution must be at least 1"));
    }
    if !(params.std >= 0.0) {
        return Err(Error::invalid(format!("coarse noise std must be >= 0, got {}", params.std)));
    }
    let std = params.std as f32;
    let grid = gaussian_noise(params.resolution, params.resolution, rng).map(|v| v * std);
    Ok(upsample_bilinear(&grid, width, height))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimplexParams {
    pub octaves: usize,
    pub persistence: f64,
    /// Base feature scale: octave `o` samples the lattice at pixel
    /// coordinates multiplied by `2^o / frequency`.
    pub frequency: f64,
}

impl Default for SimplexParams {
    fn default() -> Self {
        Self {
            octaves: 6,
            persistence: 0.8,
            frequency: 64.0,
        }
    }
}

impl SimplexParams {
    fn validate(&self) -> Result<()> {
        if self.octaves == 0 {
            return Err(Error::invalid("simplex noise needs at least one octave"));
        }
        if !(self.persistence > 0.0 && self.persistence <= 1.0) {
            return Err(Error::invalid(format!(
                "simplex persistence must lie in (0, 1], got {}",
                self.persistence
            )));
        }
        if !(self.frequency > 0.0) {
            return Err(Error::invalid("simplex frequency must be positive"));
        }
        Ok(())
    }
}

/// The unweighted first octave of [`simplex_noise`], standardized. Consumes
/// the stream exactly as `simplex_noise` does.
pub fn gradient_noise_layer(
    width: usize,
    height: usize,
    frequency: f64,
    rng: &mut RngState,
) -> Image2D {
    let lattice = GradientNoise::from_rng(rng);
    simplex::standardize(width, height, &lattice.layer(width, height, 1.0 / frequency))
}

/// Fractal sum of simplex octaves, standardized to zero mean, unit variance.
pub fn simplex_noise(
    width: usize,
    height: usize,
    params: &SimplexParams,
    rng: &mut RngState,
) -> Result<Image2D> {
    params.validate()?;
    let lattice = GradientNoise::from_rng(rng);
    let mut acc = vec![0.0f64; width * height];
    for o in 0..params.octaves {
        let weight = params.persistence.powi(o as i32);
        let scale = 2f64.powi(o as i32) / params.frequency;
        for (a, v) in acc.iter_mut().zip(lattice.layer(width, height, scale)) {
            *a += weight * v;
        }
    }
    Ok(simplex::standardize(width, height, &acc))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PyramidParams {
    pub levels: usize,
    pub decay: f64,
}

impl Default for PyramidParams {
    fn default() -> Self {
        Self {
            levels: 4,
            decay: 0.8,
        }
    }
}

/// Multi-resolution Gaussian sum: level `L` is drawn at
/// `ceil(w / 2^L) x ceil(h / 2^L)`, upsampled and weighted by `decay^L`.
pub fn pyramid_noise(
    width: usize,
    height: usize,
    params: &PyramidParams,
    rng: &mut RngState,
) -> Result<Image2D> {
    if params.levels == 0 {
        return Err(Error::invalid("pyramid noise needs at least one level"));
    }
    if !(params.decay > 0.0 && params.decay <= 1.0) {
        return Err(Error::invalid(format!(
            "pyramid decay must lie in (0, 1], got {}",
            params.decay
        )));
    }
    let mut acc = vec![0.0f64; width * height];
    for level in 0..params.levels {
        let div = 1usize << level.min(30);
        let lw = width.div_ceil(div).max(1);
        let lh = height.div_ceil(div).max(1);
        let layer = upsample_bilinear(&gaussian_noise(lw, lh, rng), width, height);
        let weight = params.decay.powi(level as i32);
        for (a, &v) in acc.iter_mut().zip(layer.data()) {
            *a += weight * v as f64;
        }
    }
    Ok(simplex::standardize(width, height, &acc))
}

/// Corruption noise selected by configuration.
#[derive(Clone, Debug, PartialEq)]
pub enum NoiseSpec {
    Gaussian,
    Coarse(CoarseParams),
    Simplex(SimplexParams),
    Pyramid(PyramidParams),
    Synomaly(SynomalyParams),
}

impl NoiseSpec {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseSpec::Gaussian => "gaussian",
            NoiseSpec::Coarse(_) => "coarse",
            NoiseSpec::Simplex(_) => "simplex",
            NoiseSpec::Pyramid(_) => "pyramid",
            NoiseSpec::Synomaly(_) => "synomaly",
        }
    }

    /// Draws the full corruption field.
    pub fn sample(&self, width: usize, height: usize, rng: &mut RngState) -> Result<Image2D> {
        match self {
            NoiseSpec::Gaussian => Ok(gaussian_noise(width, height, rng)),
            NoiseSpec::Coarse(p) => coarse_noise(width, height, p, rng),
            NoiseSpec::Simplex(p) => simplex_noise(width, height, p, rng),
            NoiseSpec::Pyramid(p) => pyramid_noise(width, height, p, rng),
            NoiseSpec::Synomaly(p) => Ok(synomaly_noise(width, height, p, rng)?.field),
        }
    }
}
