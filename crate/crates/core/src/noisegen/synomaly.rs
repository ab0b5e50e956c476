//! Synthetic-anomaly noise: a Gaussian background with blob-shaped regions
//! shifted by a signed intensity offset.
//!
//! Shapes come from an independent Gaussian field, blurred with standard
//! deviation `sigma`, min-max scaled to [0, 255] and thresholded strictly
//! above `tau`. Each connected region receives its own offset
//! `d * (i + v)` with `v ~ U[0, 1)`.

use crate::error::{Error, Result};
use crate::imgrid::{blur_f64, connected_components, BinaryMask, BlurKernel, Image2D};
use crate::rng::RngState;

use super::gaussian_noise;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnomalyDirection {
    Brighter,
    Darker,
}

impl AnomalyDirection {
    pub fn sign(self) -> f64 {
        match self {
            AnomalyDirection::Brighter => 1.0,
            AnomalyDirection::Darker => -1.0,
        }
    }

    pub fn from_sign(d: i32) -> Result<Self> {
        match d {
            1 => Ok(AnomalyDirection::Brighter),
            -1 => Ok(AnomalyDirection::Darker),
            other => Err(Error::invalid(format!("anomaly direction must be -1 or 1, got {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynomalyParams {
    /// Blur standard deviation for the shape field, in pixels.
    pub sigma: f64,
    /// Threshold on the [0, 255]-scaled shape field.
    pub tau: f64,
    pub direction: AnomalyDirection,
    /// Base intensity offset `i`.
    pub intensity: f64,
    /// Restricts planted regions when present.
    pub anatomical_mask: Option<BinaryMask>,
}

impl SynomalyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("synomaly sigma must be > 0, got {}", self.sigma)));
        }
        if !(0.0..=255.0).contains(&self.tau) {
            return Err(Error::invalid(format!("synomaly tau must lie in [0, 255], got {}", self.tau)));
        }
        if !(self.intensity >= 0.0 && self.intensity.is_finite()) {
            return Err(Error::invalid(format!(
                "synomaly intensity must be >= 0, got {}",
                self.intensity
            )));
        }
        Ok(())
    }
}

/// Anomaly size classes relative to the image area (on a 128x128 grid):
/// small below ~2%, moderate 2-5%, intermediate 5-7.5%, large around 10%.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SizeClass {
    Small,
    Moderate,
    Intermediate,
    Large,
}

impl std::str::FromStr for SizeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(SizeClass::Small),
            "moderate" => Ok(SizeClass::Moderate),
            "intermediate" => Ok(SizeClass::Intermediate),
            "large" => Ok(SizeClass::Large),
            other => Err(Error::invalid(format!("unknown size class {other:?}"))),
        }
    }
}

pub fn synomaly_preset(size: SizeClass) -> SynomalyParams {
    let (sigma, tau) = match size {
        SizeClass::Small => (1.0, 180.0),
        SizeClass::Moderate => (3.0, 175.0),
        SizeClass::Intermediate => (5.0, 160.0),
        SizeClass::Large => (7.0, 150.0),
    };
    SynomalyParams {
        sigma,
        tau,
        direction: AnomalyDirection::Brighter,
        intensity: 0.5,
        anatomical_mask: None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynomalySample {
    /// The complete corruption field.
    pub field: Image2D,
    /// The Gaussian background before offsets were added.
    pub background: Image2D,
    pub region_mask: BinaryMask,
}

pub fn synomaly_noise(
    width: usize,
    height: usize,
    params: &SynomalyParams,
    rng: &mut RngState,
) -> Result<SynomalySample> {
    params.validate()?;
    if let Some(m) = &params.anatomical_mask {
        if m.dims() != (width, height) {
            return Err(Error::DimensionMismatch {
                expected: (width, height),
                got: m.dims(),
            });
        }
    }

    let background = gaussian_noise(width, height, rng);
    let shape_source = gaussian_noise(width, height, rng);
    let blurred = blur_f64(
        shape_source.data(),
        width,
        height,
        &BlurKernel::with_sigma(params.sigma)?,
    );
    let lo = blurred.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = blurred.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let shape: Vec<bool> = blurred
        .iter()
        .map(|&v| span > 0.0 && (v - lo) / span * 255.0 > params.tau)
        .collect();
    let mut region_mask = BinaryMask::new(width, height, shape)?;
    if let Some(anatomy) = &params.anatomical_mask {
        region_mask = region_mask.and(anatomy)?;
    }

    let sign = params.direction.sign();
    let mut field: Vec<f32> = background.data().to_vec();
    for component in connected_components(&region_mask) {
        let offset = sign * (params.intensity + rng.uniform());
        for idx in component {
            field[idx] = (field[idx] as f64 + offset) as f32;
        }
    }

    Ok(SynomalySample {
        field: Image2D::new(width, height, field)?,
        background,
        region_mask,
    })
}
