//! Multi-stage reconstruction with masked fusion.
//!
//! Each stage noises the current input to `steps` with fresh Gaussian noise,
//! denoises it back with strided deterministic steps, thresholds the blurred
//! residual against the original image, and restores the original outside
//! that mask before the next stage. The loop stops once the mask size
//! settles or the stage cap is hit.

use std::time::{Duration, Instant};

use crate::diffusion::{denoise_run, forward_noise, EpsModel, Schedule};
use crate::error::{Error, Result};
use crate::imgrid::{binarize, gaussian_blur, BinaryMask, BlurKernel, Image2D};
use crate::noisegen::gaussian_noise;
use crate::rng::RngState;

pub const DEFAULT_MAX_STAGES: usize = 5;
pub const DEFAULT_CONVERGENCE_EPS: f64 = 0.01;
pub const DEFAULT_DDIM_STRIDE: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceParams {
    /// Noise level each stage is pushed to.
    pub steps: usize,
    /// Odd blur kernel size applied before taking the residual.
    pub kernel: usize,
    pub threshold: f32,
    pub max_stages: usize,
    pub convergence_eps: f64,
    pub ddim_stride: usize,
    /// When off, the raw reconstruction is fed to the next stage.
    pub masked_fusion: bool,
}

impl InferenceParams {
    pub fn new(steps: usize, kernel: usize, threshold: f32) -> Self {
        Self {
            steps,
            kernel,
            threshold,
            max_stages: DEFAULT_MAX_STAGES,
            convergence_eps: DEFAULT_CONVERGENCE_EPS,
            ddim_stride: DEFAULT_DDIM_STRIDE,
            masked_fusion: true,
        }
    }

    /// Ultrasound operating point for the multi-stage loop.
    pub fn us_multi_stage() -> Self {
        Self::new(250, 15, 0.3)
    }

    /// Ultrasound operating point for a single reconstruction.
    pub fn us_single_stage() -> Self {
        Self {
            max_stages: 1,
            ..Self::new(400, 11, 0.25)
        }
    }

    /// Ultrasound operating point for a Gaussian-trained model.
    pub fn us_gaussian() -> Self {
        Self {
            max_stages: 1,
            ..Self::new(800, 15, 0.3)
        }
    }

    pub fn single(&self) -> Self {
        Self {
            max_stages: 1,
            ..self.clone()
        }
    }

    pub fn validate(&self, sched: &Schedule) -> Result<()> {
        if self.steps == 0 || self.steps > sched.steps() {
            return Err(Error::invalid(format!(
                "steps must lie in 1..={}, got {}",
                sched.steps(),
                self.steps
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.max_stages == 0 {
            return Err(Error::invalid("max_stages must be at least 1"));
        }
        if !(self.convergence_eps >= 0.0) {
            return Err(Error::invalid("convergence_eps must be non-negative"));
        }
        if self.ddim_stride == 0 {
            return Err(Error::invalid("ddim_stride must be at least 1"));
        }
        Ok(())
    }
}

/// `|blur(x0) - blur(xhat)|`.
pub fn residual_map(x0: &Image2D, xhat: &Image2D, kernel: &BlurKernel) -> Result<Image2D> {
    x0.ensure_same_dims(xhat.dims())?;
    let a = gaussian_blur(x0, kernel)?;
    let b = gaussian_blur(xhat, kernel)?;
    a.zip_map(&b, |p, q| (p - q).abs())
}

pub fn anomaly_mask(x0: &Image2D, xhat: &Image2D, n: usize, th: f32) -> Result<BinaryMask> {
    let kernel = BlurKernel::new(n)?;
    Ok(binarize(&residual_map(x0, xhat, &kernel)?, th))
}

/// `xhat` where the mask is set, `x0` elsewhere.
pub fn masked_fusion(x0: &Image2D, xhat: &Image2D, mask: &BinaryMask) -> Result<Image2D> {
    x0.ensure_same_dims(xhat.dims())?;
    x0.ensure_same_dims(mask.dims())?;
    let data = x0
        .data()
        .iter()
        .zip(xhat.data())
        .zip(mask.data())
        .map(|((&a, &b), &m)| if m { b } else { a })
        .collect();
    Image2D::new(x0.width(), x0.height(), data)
}

/// Relative change in mask size. `None` when the previous mask was empty and
/// the current one is not.
pub fn relative_change(prev: usize, current: usize) -> Option<f64> {
    if prev == 0 {
        return (current == 0).then_some(0.0);
    }
    Some((prev as f64 - current as f64).abs() / prev as f64)
}

pub fn has_converged(prev: usize, current: usize, eps: f64) -> bool {
    relative_change(prev, current).is_some_and(|r| r <= eps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub reconstruction: Image2D,
    /// Input to the next stage.
    pub fused: Image2D,
    pub mask: BinaryMask,
    pub mask_pixels: usize,
    /// Against the previous stage; `None` for the first stage and after an
    /// empty mask.
    pub rel_change: Option<f64>,
    /// Sum of the blurred residual.
    pub residual_sum: f64,
    pub elapsed: Duration,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageTrace {
    pub stages: Vec<Stage>,
}

impl StageTrace {
    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn last(&self) -> Option<&Stage> {
        self.stages.last()
    }

    pub fn elapsed(&self) -> Duration {
        self.stages.iter().map(|s| s.elapsed).sum()
    }

    /// `stage,mask_pixels,rel_change`, stages counted from 1. The change is
    /// blank for the first stage and `inf` after an empty mask.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,mask_pixels,rel_change\n");
        for (i, st) in self.stages.iter().enumerate() {
            let rel = match (i, st.rel_change) {
                (0, _) => String::new(),
                (_, Some(r)) => format!("{r}"),
                (_, None) => "inf".to_string(),
            };
            s.push_str(&format!("{},{},{}\n", i + 1, st.mask_pixels, rel));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceOutput {
    pub mask: BinaryMask,
    pub counterfactual: Image2D,
    pub trace: StageTrace,
}

/// One reconstruction from `input` at noise level `params.steps`.
pub fn reconstruct(
    input: &Image2D,
    model: &dyn EpsModel,
    sched: &Schedule,
    params: &InferenceParams,
    rng: &mut RngState,
) -> Result<Image2D> {
    let eps = gaussian_noise(input.width(), input.height(), rng);
    let xt = forward_noise(input, params.steps, &eps, sched)?;
    denoise_run(&xt, params.steps, model, sched, params.ddim_stride)
}

/// Stage `k` (from 0) draws its noise from `rng.fork(k)`.
pub fn multi_stage_infer(
    x0: &Image2D,
    model: &dyn EpsModel,
    sched: &Schedule,
    params: &InferenceParams,
    rng: &RngState,
) -> Result<InferenceOutput> {
    params.validate(sched)?;
    let kernel = BlurKernel::new(params.kernel)?;
    let x0_blur = gaussian_blur(x0, &kernel)?;
    let mut trace = StageTrace::default();
    let mut input = x0.clone();
    loop {
        let k = trace.len();
        let start = Instant::now();
        let xhat = reconstruct(&input, model, sched, params, &mut rng.fork(k as u64))?;
        let residual = x0_blur.zip_map(&gaussian_blur(&xhat, &kernel)?, |p, q| (p - q).abs())?;
        let mask = binarize(&residual, params.threshold);
        let fused = if params.masked_fusion {
            masked_fusion(x0, &xhat, &mask)?
        } else {
            xhat.clone()
        };
        let count = mask.count();
        let rel_change = trace.last().and_then(|p| relative_change(p.mask_pixels, count));
        let converged = trace
            .last()
            .is_some_and(|p| has_converged(p.mask_pixels, count, params.convergence_eps));
        input = fused.clone();
        trace.stages.push(Stage {
            reconstruction: xhat,
            fused,
            mask,
            mask_pixels: count,
            rel_change,
            residual_sum: residual.data().iter().map(|&v| v as f64).sum(),
            elapsed: start.elapsed(),
        });
        if converged || trace.len() >= params.max_stages {
            break;
        }
    }
    let last = trace.last().expect("at least one stage ran");
    Ok(InferenceOutput {
        mask: last.mask.clone(),
        counterfactual: last.fused.clone(),
        trace,
    })
}

/// A single stage of [`multi_stage_infer`].
pub fn single_stage_infer(
    x0: &Image2D,
    model: &dyn EpsModel,
    sched: &Schedule,
    params: &InferenceParams,
    rng: &RngState,
) -> Result<InferenceOutput> {
    multi_stage_infer(x0, model, sched, &params.single(), rng)
}
