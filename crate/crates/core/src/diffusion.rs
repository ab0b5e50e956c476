//! Noise schedules and the forward / reverse diffusion steps.
//!
//! `alphabar[t]` is the cumulative signal retention: 1 at `t = 0`, close to
//! 0 at `t = T`. The forward corruption is
//! `x_t = sqrt(alphabar_t) x_0 + sqrt(1 - alphabar_t) eps`; the reverse
//! steps first estimate `x_0` from a noise prediction and then re-noise it
//! to the earlier step.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::imgrid::Image2D;
use crate::noisegen::gaussian_noise;
use crate::rng::RngState;

const ALPHABAR_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::invalid(format!("unknown schedule kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    kind: ScheduleKind,
    alphabar: Vec<f64>,
}

/// Builds a `T`-step schedule.
///
/// Linear: betas evenly spaced from 1e-4 to 0.02, `alphabar_t = prod(1 - beta_s)`.
/// Cosine: `alphabar_t = f(t) / f(0)` with `f(t) = cos^2(((t/T + s) / (1 + s)) pi/2)`, `s = 0.008`.
/// The final value is floored at 1e-8.
pub fn make_schedule(kind: ScheduleKind, steps: usize) -> Result<Schedule> {
    if steps == 0 {
        return Err(Error::invalid("a schedule needs at least one step"));
    }
    let mut alphabar = Vec::with_capacity(steps + 1);
    alphabar.push(1.0);
    match kind {
        ScheduleKind::Linear => {
            let (b0, b1) = (1e-4, 0.02);
            let mut acc = 1.0f64;
            for s in 1..=steps {
                let beta = if steps == 1 {
                    b1
                } else {
                    b0 + (b1 - b0) * (s - 1) as f64 / (steps - 1) as f64
                };
                acc *= 1.0 - beta;
                alphabar.push(acc);
            }
        }
        ScheduleKind::Cosine => {
            let offset = 0.008;
            let f = |t: usize| {
                let u = (t as f64 / steps as f64 + offset) / (1.0 + offset);
                (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            let f0 = f(0);
            for t in 1..=steps {
                alphabar.push(f(t) / f0);
            }
        }
    }
    for a in alphabar.iter_mut().skip(1) {
        *a = a.max(ALPHABAR_FLOOR);
    }
    Ok(Schedule { kind, alphabar })
}

impl Schedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Total number of steps `T`.
    pub fn steps(&self) -> usize {
        self.alphabar.len() - 1
    }

    pub fn alphabar(&self, t: usize) -> f64 {
        self.alphabar[t]
    }

    pub fn alphabars(&self) -> &[f64] {
        &self.alphabar
    }

    /// Stochastic-step scale for `1 <= t <= T`:
    /// `sqrt((1 - a_{t-1}) / (1 - a_t)) * sqrt(1 - a_t / a_{t-1})`.
    pub fn sigma(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps(), "sigma defined for 1..=T, got {t}");
        let a = self.alphabar[t];
        let a_prev = self.alphabar[t - 1];
        ((1.0 - a_prev) / (1.0 - a)).sqrt() * (1.0 - a / a_prev).max(0.0).sqrt()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::invalid(format!("step {t} beyond schedule length {}", self.steps())));
        }
        Ok(())
    }
}

/// A noise predictor `eps(x_t, t)`.
pub trait EpsModel: Sync {
    fn predict_eps(&self, x_t: &Image2D, t: usize) -> Result<Image2D>;
}

pub fn forward_noise(x0: &Image2D, t: usize, eps: &Image2D, sched: &Schedule) -> Result<Image2D> {
    sched.check_step(t)?;
    let a = sched.alphabar(t);
    let (ca, cn) = (a.sqrt(), (1.0 - a).sqrt());
    x0.zip_map(eps, |x, e| (ca * x as f64 + cn * e as f64) as f32)
}

fn predict_x0(xt: f64, eps: f64, a: f64) -> f64 {
    (xt - (1.0 - a).sqrt() * eps) / a.sqrt()
}

/// Ancestral reverse step from `t` to `t - 1` with injected noise.
pub fn ddpm_step(
    xt: &Image2D,
    t: usize,
    eps_pred: &Image2D,
    sched: &Schedule,
    rng: &mut RngState,
) -> Result<Image2D> {
    ddpm_step_eta(xt, t, eps_pred, sched, 1.0, rng)
}

/// Reverse step from `t` to `t - 1` with the stochastic scale multiplied by
/// `eta`; `eta = 0` is the deterministic one-step update.
pub fn ddpm_step_eta(
    xt: &Image2D,
    t: usize,
    eps_pred: &Image2D,
    sched: &Schedule,
    eta: f64,
    rng: &mut RngState,
) -> Result<Image2D> {
    if t == 0 {
        return Err(Error::invalid("cannot take a reverse step from t = 0"));
    }
    sched.check_step(t)?;
    xt.ensure_same_dims(eps_pred.dims())?;
    let a = sched.alphabar(t);
    let a_prev = sched.alphabar(t - 1);
    let sigma = eta * sched.sigma(t);
    let dir = (1.0 - a_prev - sigma * sigma).max(0.0).sqrt();
    let z = gaussian_noise(xt.width(), xt.height(), rng);
    let out: Vec<f32> = xt
        .data()
        .iter()
        .zip(eps_pred.data())
        .zip(z.data())
        .map(|((&x, &e), &zz)| {
            let x0 = predict_x0(x as f64, e as f64, a);
            (a_prev.sqrt() * x0 + dir * e as f64 + sigma * zz as f64) as f32
        })
        .collect();
    Image2D::new(xt.width(), xt.height(), out)
}

/// Deterministic jump from `t` to any earlier `t_prev`.
pub fn ddim_step(
    xt: &Image2D,
    t: usize,
    t_prev: usize,
    eps_pred: &Image2D,
    sched: &Schedule,
) -> Result<Image2D> {
    if t_prev >= t {
        return Err(Error::invalid(format!(
            "reverse step must go backwards, got {t} -> {t_prev}"
        )));
    }
    sched.check_step(t)?;
    let a = sched.alphabar(t);
    let a_prev = sched.alphabar(t_prev);
    let (cs, cn) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
    xt.zip_map(eps_pred, |x, e| {
        let x0 = predict_x0(x as f64, e as f64, a);
        (cs * x0 + cn * e as f64) as f32
    })
}

/// Steps visited by a strided reverse run: `t_start, t_start - stride, ..., 0`.
pub fn ddim_ladder(t_start: usize, stride: usize) -> Vec<usize> {
    let mut ladder = vec![t_start];
    let mut t = t_start;
    while t > 0 {
        t = t.saturating_sub(stride);
        ladder.push(t);
    }
    ladder
}

/// Deterministic strided denoising from `t_start` down to 0.
pub fn denoise_run(
    xt: &Image2D,
    t_start: usize,
    model: &dyn EpsModel,
    sched: &Schedule,
    stride: usize,
) -> Result<Image2D> {
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    sched.check_step(t_start)?;
    let ladder = ddim_ladder(t_start, stride);
    let mut x = xt.clone();
    for pair in ladder.windows(2) {
        let eps = model.predict_eps(&x, pair[0])?;
        x = ddim_step(&x, pair[0], pair[1], &eps, sched)?;
    }
    Ok(x)
}

/// Unit-stride ancestral run from `t_start` to 0 with stochastic scale `eta`.
pub fn ddpm_run(
    xt: &Image2D,
    t_start: usize,
    model: &dyn EpsModel,
    sched: &Schedule,
    eta: f64,
    rng: &mut RngState,
) -> Result<Image2D> {
    sched.check_step(t_start)?;
    let mut x = xt.clone();
    for t in (1..=t_start).rev() {
        let eps = model.predict_eps(&x, t)?;
        x = ddpm_step_eta(&x, t, &eps, sched, eta, rng)?;
    }
    Ok(x)
}

/// Predicts the exact noise that separates `x_t` from a known clean image.
///
/// Stands in for a perfectly trained network in tests and diagnostics.
#[derive(Clone, Debug)]
pub struct KnownImageOracle {
    pub clean: Image2D,
    pub schedule: Schedule,
}

impl EpsModel for KnownImageOracle {
    fn predict_eps(&self, x_t: &Image2D, t: usize) -> Result<Image2D> {
        if t == 0 {
            return Ok(Image2D::zeros(x_t.width(), x_t.height()));
        }
        let a = self.schedule.alphabar(t);
        let (ca, cn) = (a.sqrt(), (1.0 - a).sqrt());
        x_t.zip_map(&self.clean, |x, c| ((x as f64 - ca * c as f64) / cn) as f32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sigma_reference(alphabar: &[f64], t: usize) -> f64 {
        // beta-tilde form: sigma^2 = (1 - a_{t-1}) / (1 - a_t) * beta_t, beta_t = 1 - a_t / a_{t-1}
        let beta = 1.0 - alphabar[t] / alphabar[t - 1];
        let var = (1.0 - alphabar[t - 1]) / (1.0 - alphabar[t]) * beta;
        var.max(0.0).sqrt()
    }

    #[test]
    fn endpoints_and_monotonicity() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for steps in [1, 10, 100, 1000] {
                let s = make_schedule(kind, steps).unwrap();
                assert_eq!(s.alphabar(0), 1.0);
                assert_eq!(s.steps(), steps);
                assert!(s.alphabars().windows(2).all(|w| w[1] < w[0]), "{kind:?} {steps}");
                assert!(s.alphabars().iter().all(|&a| a > 0.0 && a <= 1.0));
            }
        }
        let lin = make_schedule(ScheduleKind::Linear, 1000).unwrap();
        assert!(lin.alphabar(1000) < 1e-4);
        assert!(make_schedule(ScheduleKind::Linear, 0).is_err());
        assert!("quadratic".parse::<ScheduleKind>().is_err());
    }

    #[test]
    fn linear_matches_product_of_betas() {
        let s = make_schedule(ScheduleKind::Linear, 1000).unwrap();
        let mut acc = 1.0;
        for t in 1..=1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0;
            acc *= 1.0 - beta;
            assert!((s.alphabar(t) - acc.max(1e-8)).abs() < 1e-15);
        }
    }

    #[test]
    fn sigma_matches_reference_form() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = make_schedule(kind, 1000).unwrap();
            assert_eq!(s.sigma(1), 0.0);
            for t in 1..=1000 {
                let diff = (s.sigma(t) - sigma_reference(s.alphabars(), t)).abs();
                assert!(diff < 1e-12, "{kind:?} t={t} diff={diff}");
                assert!(s.sigma(t) >= 0.0);
            }
        }
    }

    #[test]
    fn forward_noise_examples() {
        let s = make_schedule(ScheduleKind::Linear, 100).unwrap();
        let x0 = Image2D::from_fn(5, 4, |x, y| (x * y) as f32 * 0.1);
        let eps = Image2D::filled(5, 4, 0.7);
        assert_eq!(forward_noise(&x0, 0, &eps, &s).unwrap(), x0);
        assert!(forward_noise(&x0, 101, &eps, &s).is_err());
        assert!(forward_noise(&x0, 3, &Image2D::zeros(4, 4), &s).is_err());
    }

    #[test]
    fn reverse_step_errors() {
        let s = make_schedule(ScheduleKind::Linear, 10).unwrap();
        let x = Image2D::zeros(3, 3);
        let mut rng = RngState::new(0);
        assert!(ddpm_step(&x, 0, &x, &s, &mut rng).is_err());
        assert!(ddim_step(&x, 4, 4, &x, &s).is_err());
        assert!(ddim_step(&x, 4, 6, &x, &s).is_err());
    }

    #[test]
    fn ddpm_zero_prediction_specialization() {
        let s = make_schedule(ScheduleKind::Linear, 50).unwrap();
        let t = 20;
        let c = 0.8f32;
        let xt = Image2D::filled(4, 4, c);
        let zero = Image2D::zeros(4, 4);
        let out = ddpm_step(&xt, t, &zero, &s, &mut RngState::new(5)).unwrap();
        let z = gaussian_noise(4, 4, &mut RngState::new(5));
        let x0 = c as f64 / s.alphabar(t).sqrt();
        for (o, zz) in out.data().iter().zip(z.data()) {
            let expect = s.alphabar(t - 1).sqrt() * x0 + s.sigma(t) * *zz as f64;
            assert!((*o as f64 - expect).abs() < 1e-6);
        }
        let again = ddpm_step(&xt, t, &zero, &s, &mut RngState::new(5)).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn ladder_shapes() {
        assert_eq!(ddim_ladder(0, 10), vec![0]);
        assert_eq!(ddim_ladder(30, 10), vec![30, 20, 10, 0]);
        assert_eq!(ddim_ladder(25, 10), vec![25, 15, 5, 0]);
        assert_eq!(ddim_ladder(7, 7), vec![7, 0]);
    }
}
