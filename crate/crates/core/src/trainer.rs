//! Training loop over healthy images and checkpoint persistence.
//!
//! Checkpoint layout: magic `SYNOCKPT`, `u32` version, `u32` length plus a
//! UTF-8 `key=value` descriptor (the full training configuration), then one
//! record per parameter tensor until end of file: `u32` name length, name
//! bytes, and an `STNSR1` tensor.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::denoiser::{init_model, Arch, DenoiserModel, TrainingExample};
use crate::diffusion::{forward_noise, make_schedule, Schedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::imgrid::{BinaryMask, Image2D};
use crate::kv::{format_pairs, parse_list, parse_pairs, parse_value};
use crate::noisegen::{
    gaussian_noise, synomaly_preset, AnomalyDirection, CoarseParams, NoiseSpec, PyramidParams,
    SimplexParams, SizeClass, SynomalyParams,
};
use crate::rng::RngState;
use crate::tensor_io::{encode_tensor, Reader, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SYNOCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    Coarse,
    Simplex,
    Pyramid,
    Synomaly,
}

impl NoiseKind {
    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Coarse => "coarse",
            NoiseKind::Simplex => "simplex",
            NoiseKind::Pyramid => "pyramid",
            NoiseKind::Synomaly => "synomaly",
        }
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "coarse" => Ok(NoiseKind::Coarse),
            "simplex" => Ok(NoiseKind::Simplex),
            "pyramid" => Ok(NoiseKind::Pyramid),
            "synomaly" => Ok(NoiseKind::Synomaly),
            other => Err(Error::invalid(format!("unknown noise kind {other:?}"))),
        }
    }
}

/// Region that Synomaly anomalies may occupy during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskPolicy {
    None,
    /// Centred disk, diameter as a fraction of the shorter image side.
    Circle(f64),
}

impl MaskPolicy {
    pub fn build(&self, width: usize, height: usize) -> Option<BinaryMask> {
        match *self {
            MaskPolicy::None => None,
            MaskPolicy::Circle(f) => Some(BinaryMask::centered_disk(width, height, f)),
        }
    }
}

impl fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskPolicy::None => write!(f, "none"),
            MaskPolicy::Circle(d) => write!(f, "circle:{d}"),
        }
    }
}

impl FromStr for MaskPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "none" => Ok(MaskPolicy::None),
            None if s == "circle" => Ok(MaskPolicy::Circle(0.9)),
            Some(("circle", d)) => {
                let d: f64 = parse_value("noise.mask", d)?;
                if !(d > 0.0 && d <= 1.0) {
                    return Err(Error::invalid(format!("circle diameter must lie in (0, 1], got {d}")));
                }
                Ok(MaskPolicy::Circle(d))
            }
            _ => Err(Error::invalid(format!("unknown mask policy {s:?}"))),
        }
    }
}

/// Parameters for every noise family; only the selected kind is used.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSettings {
    pub kind: NoiseKind,
    /// Synomaly shape and offset parameters (the anatomical mask comes from
    /// `mask`).
    pub synomaly: SynomalyParams,
    pub mask: MaskPolicy,
    pub coarse: CoarseParams,
    pub simplex: SimplexParams,
    pub pyramid: PyramidParams,
    /// Probability of corrupting an example with plain Gaussian noise
    /// instead of the selected kind.
    pub gaussian_fraction: f64,
}

impl Default for NoiseSettings {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Synomaly,
            synomaly: synomaly_preset(SizeClass::Large),
            mask: MaskPolicy::None,
            coarse: CoarseParams::default(),
            simplex: SimplexParams::default(),
            pyramid: PyramidParams::default(),
            gaussian_fraction: 0.0,
        }
    }
}

impl NoiseSettings {
    pub fn spec(&self, width: usize, height: usize) -> NoiseSpec {
        match self.kind {
            NoiseKind::Gaussian => NoiseSpec::Gaussian,
            NoiseKind::Coarse => NoiseSpec::Coarse(self.coarse),
            NoiseKind::Simplex => NoiseSpec::Simplex(self.simplex),
            NoiseKind::Pyramid => NoiseSpec::Pyramid(self.pyramid),
            NoiseKind::Synomaly => NoiseSpec::Synomaly(SynomalyParams {
                anatomical_mask: self.mask.build(width, height),
                ..self.synomaly.clone()
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub noise: NoiseSettings,
    pub schedule: ScheduleKind,
    pub steps: usize,
    pub arch: Arch,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            noise: NoiseSettings::default(),
            schedule: ScheduleKind::Linear,
            steps: 1000,
            arch: Arch::desk(64, 64),
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.steps == 0 {
            return Err(Error::invalid("schedule.steps must be > 0"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("train.epochs and train.batch must be > 0"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.noise.gaussian_fraction) {
            return Err(Error::invalid("noise.gaussian_fraction must lie in [0, 1]"));
        }
        self.noise.synomaly.validate()?;
        // the other families validate on first use; probe them now
        let mut probe = RngState::new(0);
        self.noise_spec().sample(self.arch.width, self.arch.height, &mut probe)?;
        Ok(())
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        self.noise.spec(self.arch.width, self.arch.height)
    }

    pub fn make_schedule(&self) -> Result<Schedule> {
        make_schedule(self.schedule, self.steps)
    }

    /// Every setting as `key=value` pairs, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let n = &self.noise;
        let s = &n.synomaly;
        let a = &self.arch;
        let pairs: Vec<(&str, String)> = vec![
            ("noise.kind", n.kind.name().to_string()),
            ("noise.gaussian_fraction", n.gaussian_fraction.to_string()),
            ("noise.sigma", s.sigma.to_string()),
            ("noise.tau", s.tau.to_string()),
            ("noise.direction", (s.direction.sign() as i32).to_string()),
            ("noise.intensity", s.intensity.to_string()),
            ("noise.mask", n.mask.to_string()),
            ("noise.coarse.resolution", n.coarse.resolution.to_string()),
            ("noise.coarse.std", n.coarse.std.to_string()),
            ("noise.simplex.octaves", n.simplex.octaves.to_string()),
            ("noise.simplex.persistence", n.simplex.persistence.to_string()),
            ("noise.simplex.frequency", n.simplex.frequency.to_string()),
            ("noise.pyramid.levels", n.pyramid.levels.to_string()),
            ("noise.pyramid.decay", n.pyramid.decay.to_string()),
            ("schedule.kind", self.schedule.name().to_string()),
            ("schedule.steps", self.steps.to_string()),
            ("model.channels", join(&a.channels)),
            ("model.kernel", a.kernel.to_string()),
            ("model.t_embed_dim", a.t_embed_dim.to_string()),
            ("model.time_hidden", a.time_hidden.to_string()),
            ("model.width", a.width.to_string()),
            ("model.height", a.height.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.batch", self.batch_size.to_string()),
            ("train.lr", self.lr.to_string()),
            ("train.seed", self.seed.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Applies one setting. Returns `false` for keys this config does not
    /// own, so callers can route them elsewhere.
    pub fn apply_pair(&mut self, key: &str, value: &str) -> Result<bool> {
        let n = &mut self.noise;
        let a = &mut self.arch;
        match key {
            "noise.kind" => n.kind = value.parse()?,
            "noise.gaussian_fraction" => n.gaussian_fraction = parse_value(key, value)?,
            "noise.size" => {
                let p = synomaly_preset(value.parse()?);
                n.synomaly.sigma = p.sigma;
                n.synomaly.tau = p.tau;
            }
            "noise.sigma" => n.synomaly.sigma = parse_value(key, value)?,
            "noise.tau" => n.synomaly.tau = parse_value(key, value)?,
            "noise.direction" => n.synomaly.direction = AnomalyDirection::from_sign(parse_value(key, value)?)?,
            "noise.intensity" => n.synomaly.intensity = parse_value(key, value)?,
            "noise.mask" => n.mask = value.parse()?,
            "noise.coarse.resolution" => n.coarse.resolution = parse_value(key, value)?,
            "noise.coarse.std" => n.coarse.std = parse_value(key, value)?,
            "noise.simplex.octaves" => n.simplex.octaves = parse_value(key, value)?,
            "noise.simplex.persistence" => n.simplex.persistence = parse_value(key, value)?,
            "noise.simplex.frequency" => n.simplex.frequency = parse_value(key, value)?,
            "noise.pyramid.levels" => n.pyramid.levels = parse_value(key, value)?,
            "noise.pyramid.decay" => n.pyramid.decay = parse_value(key, value)?,
            "schedule.kind" => self.schedule = value.parse()?,
            "schedule.steps" => self.steps = parse_value(key, value)?,
            "model.channels" => a.channels = parse_list(key, value)?,
            "model.kernel" => a.kernel = parse_value(key, value)?,
            "model.t_embed_dim" => a.t_embed_dim = parse_value(key, value)?,
            "model.time_hidden" => a.time_hidden = parse_value(key, value)?,
            "model.width" => a.width = parse_value(key, value)?,
            "model.height" => a.height = parse_value(key, value)?,
            "train.epochs" => self.epochs = parse_value(key, value)?,
            "train.batch" => self.batch_size = parse_value(key, value)?,
            "train.lr" => self.lr = parse_value(key, value)?,
            "train.seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Builds a config from defaults plus `pairs`; unknown keys are errors.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            if !cfg.apply_pair(k, v)? {
                return Err(Error::invalid(format!("unknown config key {k:?}")));
            }
        }
        Ok(cfg)
    }
}

/// Draws training corruptions for one configuration.
#[derive(Clone, Debug)]
pub struct Corruptor {
    noise: NoiseSpec,
    schedule: Schedule,
    gaussian_fraction: f64,
}

impl Corruptor {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        Ok(Self {
            noise: config.noise_spec(),
            schedule: config.make_schedule()?,
            gaussian_fraction: config.noise.gaussian_fraction,
        })
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    /// `t ~ U{1..T}`, `eps` from the configured family, and `x_t` noised
    /// with that same `eps`, which is also the regression target.
    pub fn sample(&self, x0: &Image2D, rng: &mut RngState) -> Result<TrainingExample> {
        if x0.min() < 0.0 || x0.max() > 1.0 {
            return Err(Error::invalid("training images must be normalized to [0, 1]"));
        }
        let (w, h) = x0.dims();
        let t = 1 + rng.below(self.schedule.steps());
        let plain = self.gaussian_fraction > 0.0 && rng.uniform() < self.gaussian_fraction;
        let eps = if plain {
            gaussian_noise(w, h, rng)
        } else {
            self.noise.sample(w, h, rng)?
        };
        let x_t = forward_noise(x0, t, &eps, &self.schedule)?;
        Ok(TrainingExample { x_t, t, eps })
    }
}

pub fn sample_training_example(
    x0: &Image2D,
    config: &TrainConfig,
    rng: &mut RngState,
) -> Result<TrainingExample> {
    Corruptor::new(config)?.sample(x0, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: DenoiserModel,
}

impl Checkpoint {
    pub fn schedule(&self) -> Result<Schedule> {
        self.config.make_schedule()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let desc = format_pairs(&self.config.to_pairs());
        out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        out.extend_from_slice(desc.as_bytes());
        for (spec, data) in self.model.specs().iter().zip(self.model.tensors()) {
            out.extend_from_slice(&(spec.name.len() as u32).to_le_bytes());
            out.extend_from_slice(spec.name.as_bytes());
            let t = Tensor {
                dims: spec.shape.clone(),
                data: data.clone(),
            };
            encode_tensor(&mut out, &t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ctx = "checkpoint";
        let mut r = Reader::new(bytes, ctx);
        let magic = r.take(CHECKPOINT_MAGIC.len()).map_err(|_| {
            Error::format(ctx, "file too short for the SYNOCKPT magic")
        })?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(ctx, "bad magic, expected \"SYNOCKPT\""));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                ctx,
                format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
            ));
        }
        let len = r.u32()? as usize;
        let desc = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(ctx, "descriptor is not UTF-8"))?;
        let config = TrainConfig::from_pairs(&parse_pairs(desc)?)
            .map_err(|e| Error::format(ctx, format!("descriptor: {e}")))?;
        config
            .arch
            .validate()
            .map_err(|e| Error::format(ctx, format!("descriptor: {e}")))?;
        let expected = init_model(&config.arch, 0)?;
        let mut tensors = Vec::with_capacity(expected.specs().len());
        for spec in expected.specs() {
            if r.at_end() {
                return Err(Error::format(ctx, format!("missing tensor {}", spec.name)));
            }
            let name_len = r.u32()? as usize;
            let name = r.take(name_len)?;
            if name != spec.name.as_bytes() {
                return Err(Error::format(
                    ctx,
                    format!(
                        "expected tensor {}, found {:?}",
                        spec.name,
                        String::from_utf8_lossy(name)
                    ),
                ));
            }
            let t = r.tensor()?;
            if t.dims != spec.shape {
                return Err(Error::format(
                    ctx,
                    format!("tensor {} has dims {:?}, expected {:?}", spec.name, t.dims, spec.shape),
                ));
            }
            tensors.push(t.data);
        }
        if !r.at_end() {
            return Err(Error::format(ctx, "trailing bytes after the last tensor"));
        }
        let model = DenoiserModel::from_tensors(&config.arch, tensors)
            .map_err(|e| Error::format(ctx, e.to_string()))?;
        Ok(Self { config, model })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Loss of the freshly initialised model on the first batch.
    pub initial_loss: f64,
    pub log: Vec<EpochLoss>,
}

pub fn train(config: &TrainConfig, healthy: &[Image2D]) -> Result<TrainOutcome> {
    train_with(config, healthy, |_| {})
}

/// Like [`train`], calling `on_epoch` after every epoch.
///
/// Streams: the initial weights use `fork(0)` of the seed; epoch `e` uses
/// `fork(e + 1)`, whose `fork(0)` shuffles the data and whose `fork(i + 1)`
/// corrupts the `i`-th example visited in that epoch. Results do not depend
/// on the number of worker threads.
pub fn train_with(
    config: &TrainConfig,
    healthy: &[Image2D],
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainOutcome> {
    config.validate()?;
    if healthy.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let dims = (config.arch.width, config.arch.height);
    for img in healthy {
        if img.dims() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                got: img.dims(),
            });
        }
    }
    let corruptor = Corruptor::new(config)?;
    let master = RngState::new(config.seed);
    let mut model = init_model(&config.arch, master.fork(0).seed())?;
    let mut adam = model.new_adam(config.lr);
    let mut initial_loss = None;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let ep_rng = master.fork(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..healthy.len()).collect();
        ep_rng.fork(0).shuffle(&mut order);
        let mut weighted = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let base = b * config.batch_size;
            let batch = chunk
                .par_iter()
                .enumerate()
                .map(|(j, &idx)| {
                    let mut rng = ep_rng.fork((base + j) as u64 + 1);
                    corruptor.sample(&healthy[idx], &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = model.loss_and_grad(&batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {}, batch {}",
                    epoch + 1,
                    b + 1
                )));
            }
            initial_loss.get_or_insert(loss);
            weighted += loss * chunk.len() as f64;
            model.adam_update(&grads, &mut adam).map_err(|e| match e {
                Error::NonFinite(m) => {
                    Error::NonFinite(format!("{m} (epoch {}, batch {})", epoch + 1, b + 1))
                }
                other => other,
            })?;
        }
        let entry = EpochLoss {
            epoch: epoch + 1,
            mean_loss: weighted / healthy.len() as f64,
        };
        on_epoch(&entry);
        log.push(entry);
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: config.clone(),
            model,
        },
        initial_loss: initial_loss.expect("at least one batch ran"),
        log,
    })
}

pub fn loss_csv(log: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,mean_loss\n");
    for e in log {
        s.push_str(&format!("{},{}\n", e.epoch, e.mean_loss));
    }
    s
}

pub fn write_loss_csv(path: &Path, log: &[EpochLoss]) -> Result<()> {
    fs::write(path, loss_csv(log)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            arch: Arch {
                channels: vec![4, 8],
                t_embed_dim: 8,
                time_hidden: 8,
                ..Arch::desk(16, 16)
            },
            epochs: 2,
            batch_size: 4,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn smooth_images(n: usize, w: usize, h: usize) -> Vec<Image2D> {
        (0..n)
            .map(|i| {
                Image2D::from_fn(w, h, |x, y| {
                    0.5 + 0.4 * ((x as f32 * 0.3 + i as f32).sin() * (y as f32 * 0.2).cos())
                })
            })
            .collect()
    }

    #[test]
    fn eps_target_is_the_field_used_for_x_t() {
        let cfg = tiny_config();
        let c = Corruptor::new(&cfg).unwrap();
        let x0 = &smooth_images(1, 16, 16)[0];
        for seed in 0..10 {
            let ex = c.sample(x0, &mut RngState::new(seed)).unwrap();
            let again = forward_noise(x0, ex.t, &ex.eps, c.schedule()).unwrap();
            assert_eq!(again, ex.x_t);
        }
    }

    #[test]
    fn gaussian_kind_uses_a_standard_normal_field() {
        let mut cfg = tiny_config();
        cfg.noise.kind = NoiseKind::Gaussian;
        let x0 = &smooth_images(1, 16, 16)[0];
        let mut rng = RngState::new(3);
        let ex = sample_training_example(x0, &cfg, &mut rng).unwrap();
        let mut replay = RngState::new(3);
        let t = 1 + replay.below(1000);
        assert_eq!(ex.t, t);
        assert_eq!(ex.eps, gaussian_noise(16, 16, &mut replay));
    }

    #[test]
    fn timestep_draws_are_uniform() {
        // chi-square over 10 equal bins of {1..1000}, 9 dof, 95% point 16.919
        let mut cfg = tiny_config();
        cfg.noise.kind = NoiseKind::Gaussian;
        cfg.arch.width = 4;
        cfg.arch.height = 4;
        cfg.arch.channels = vec![2];
        let c = Corruptor::new(&cfg).unwrap();
        let x0 = Image2D::filled(4, 4, 0.5);
        let mut rng = RngState::new(77);
        let mut bins = [0usize; 10];
        let draws = 10_000;
        for _ in 0..draws {
            let ex = c.sample(&x0, &mut rng).unwrap();
            assert!((1..=1000).contains(&ex.t));
            bins[(ex.t - 1) / 100] += 1;
        }
        let e = draws as f64 / 10.0;
        let chi2: f64 = bins.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 16.919, "chi2 {chi2}, bins {bins:?}");
    }

    #[test]
    fn unnormalized_input_rejected() {
        let c = Corruptor::new(&tiny_config()).unwrap();
        let x0 = Image2D::filled(16, 16, 1.5);
        assert!(c.sample(&x0, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn config_pairs_round_trip() {
        let mut cfg = tiny_config();
        cfg.noise.mask = MaskPolicy::Circle(0.9);
        cfg.noise.synomaly.direction = AnomalyDirection::Darker;
        cfg.lr = 3.3e-4;
        let back = TrainConfig::from_pairs(&cfg.to_pairs()).unwrap();
        assert_eq!(back, cfg);
        let err = TrainConfig::from_pairs(&[("noise.bogus".into(), "1".into())]).unwrap_err();
        assert!(err.to_string().contains("noise.bogus"));
        let mut p = TrainConfig::default();
        p.apply_pair("noise.size", "moderate").unwrap();
        assert_eq!((p.noise.synomaly.sigma, p.noise.synomaly.tau), (3.0, 175.0));
        assert!("circle:1.5".parse::<MaskPolicy>().is_err());
        assert_eq!("circle".parse::<MaskPolicy>().unwrap(), MaskPolicy::Circle(0.9));
    }

    #[test]
    fn one_epoch_one_image_logs_once() {
        let mut cfg = tiny_config();
        cfg.epochs = 1;
        let out = train(&cfg, &smooth_images(1, 16, 16)).unwrap();
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.log[0].epoch, 1);
        // a single one-image batch: the epoch mean is that batch's loss
        assert_eq!(out.log[0].mean_loss, out.initial_loss);
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_round_trip() {
        let cfg = tiny_config();
        let data = smooth_images(6, 16, 16);
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.log, b.log);

        let bytes = a.checkpoint.to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(loaded, a.checkpoint);
        assert_eq!(loaded.to_bytes(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&a.checkpoint, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), a.checkpoint);
    }

    #[test]
    fn corrupt_checkpoints_are_format_errors() {
        let cfg = tiny_config();
        let ckpt = Checkpoint {
            model: init_model(&cfg.arch, 1).unwrap(),
            config: cfg,
        };
        let bytes = ckpt.to_bytes();
        for cut in [0, 5, 10, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
        let mut foreign = bytes.clone();
        foreign[..8].copy_from_slice(b"NOTACKPT");
        let err = Checkpoint::from_bytes(&foreign).unwrap_err();
        assert!(err.to_string().contains("SYNOCKPT"));
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&wrong_version),
            Err(Error::Format { .. })
        ));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn loss_csv_layout() {
        let log = [
            EpochLoss {
                epoch: 1,
                mean_loss: 0.5,
            },
            EpochLoss {
                epoch: 2,
                mean_loss: 0.25,
            },
        ];
        assert_eq!(loss_csv(&log), "epoch,mean_loss\n1,0.5\n2,0.25\n");
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = tiny_config();
        assert!(train(&cfg, &[]).is_err());
        assert!(matches!(
            train(&cfg, &smooth_images(2, 8, 8)),
            Err(Error::DimensionMismatch { .. })
        ));
        let mut bad = cfg.clone();
        bad.lr = 0.0;
        assert!(train(&bad, &smooth_images(2, 16, 16)).is_err());
    }
}
