//! Run configuration: defaults, then a `key=value` file, then flag overrides.

use std::fmt;
use std::fs;
use std::path::Path;

use synomaly::inference::InferenceParams;
use synomaly::kv::{format_pairs, parse_list, parse_pairs, parse_value};
use synomaly::metrics::{GridSpec, ScoreKind};
use synomaly::noisegen::AnomalyDirection;
use synomaly::phantom::{DatasetCounts, PhantomKind, PhantomSpec};
use synomaly::trainer::TrainConfig;

/// A key outside the known namespace. Maps to exit status 2.
#[derive(Debug)]
pub struct UnknownKey(pub String);

impl fmt::Display for UnknownKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown config key {:?}", self.0)
    }
}

impl std::error::Error for UnknownKey {}

/// A known key with a value that does not parse or validate. Also exit 2.
#[derive(Debug)]
pub struct BadValue {
    pub key: String,
    pub reason: String,
}

impl fmt::Display for BadValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid value for {}: {}", self.key, self.reason)
    }
}

impl std::error::Error for BadValue {}

/// A required input that does not exist. Maps to exit status 3.
#[derive(Debug)]
pub struct MissingFile(pub std::path::PathBuf);

impl fmt::Display for MissingFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "missing file {}", self.0.display())
    }
}

impl std::error::Error for MissingFile {}

pub fn require(path: &Path) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(MissingFile(path.to_path_buf()).into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Multi,
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subset {
    Anomalous,
    All,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub phantom: PhantomSpec,
    pub counts: DatasetCounts,
    pub data_seed: u64,
    pub train: TrainConfig,
    pub noise_seed: u64,
    pub infer: InferenceParams,
    pub mode: Mode,
    pub score: ScoreKind,
    pub infer_seed: u64,
    pub subset: Subset,
    pub grid: GridSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomSpec::vessel(64),
            counts: DatasetCounts {
                train_healthy: 2000,
                test_anomalous: 200,
                test_healthy: 200,
            },
            data_seed: 0,
            train: TrainConfig::default(),
            noise_seed: 0,
            infer: InferenceParams::us_multi_stage(),
            mode: Mode::Multi,
            score: ScoreKind::MaskPixels,
            infer_seed: 0,
            subset: Subset::Anomalous,
            grid: GridSpec {
                steps: vec![150, 250, 400],
                kernels: vec![5, 11, 15],
                thresholds: vec![0.2, 0.25, 0.3],
            },
        }
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Defaults overlaid with the file at `path`, if any.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            require(p)?;
            let text = fs::read_to_string(p)?;
            for (k, v) in parse_pairs(&text)? {
                cfg.set(&k, &v)?;
            }
        }
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        let bad = |e: synomaly::Error| BadValue {
            key: key.to_string(),
            reason: e.to_string(),
        };
        let known = self.set_inner(key, value).map_err(bad)?;
        if !known {
            return Err(UnknownKey(key.to_string()).into());
        }
        Ok(())
    }

    fn set_inner(&mut self, key: &str, value: &str) -> synomaly::Result<bool> {
        let p = &mut self.phantom;
        let ip = &mut self.infer;
        match key {
            "data.kind" => {
                let kind: PhantomKind = value.parse()?;
                let keep = (p.width, p.height, p.anomaly_area_fraction);
                *p = PhantomSpec::for_kind(kind, keep.0);
                p.height = keep.1;
                p.anomaly_area_fraction = keep.2;
            }
            "data.size" => {
                let s: usize = parse_value(key, value)?;
                p.width = s;
                p.height = s;
            }
            "data.direction" => p.direction = AnomalyDirection::from_sign(parse_value(key, value)?)?,
            "data.anomaly_fraction" => p.anomaly_area_fraction = parse_value(key, value)?,
            "data.texture" => p.texture = parse_value(key, value)?,
            "data.counts" => {
                let c: Vec<usize> = parse_list(key, value)?;
                let [a, b, h] = c[..] else {
                    return Err(synomaly::Error::InvalidArgument(
                        "expected train,test_anomalous,test_healthy".into(),
                    ));
                };
                self.counts = DatasetCounts {
                    train_healthy: a,
                    test_anomalous: b,
                    test_healthy: h,
                };
            }
            "data.seed" => self.data_seed = parse_value(key, value)?,
            "noise.seed" => self.noise_seed = parse_value(key, value)?,
            "infer.steps" => ip.steps = parse_value(key, value)?,
            "infer.kernel" => ip.kernel = parse_value(key, value)?,
            "infer.th" => ip.threshold = parse_value(key, value)?,
            "infer.max_stages" => ip.max_stages = parse_value(key, value)?,
            "infer.convergence_eps" => ip.convergence_eps = parse_value(key, value)?,
            "infer.stride" => ip.ddim_stride = parse_value(key, value)?,
            "infer.masked_fusion" => ip.masked_fusion = parse_value(key, value)?,
            "infer.mode" => {
                self.mode = match value {
                    "multi" => Mode::Multi,
                    "single" => Mode::Single,
                    _ => return Err(synomaly::Error::InvalidArgument("expected multi or single".into())),
                }
            }
            "infer.score" => self.score = value.parse()?,
            "infer.seed" => self.infer_seed = parse_value(key, value)?,
            "eval.subset" => {
                self.subset = match value {
                    "anomalous" => Subset::Anomalous,
                    "all" => Subset::All,
                    _ => return Err(synomaly::Error::InvalidArgument("expected anomalous or all".into())),
                }
            }
            "eval.grid.steps" => self.grid.steps = parse_list(key, value)?,
            "eval.grid.kernel" => self.grid.kernels = parse_list(key, value)?,
            "eval.grid.th" => self.grid.thresholds = parse_list(key, value)?,
            _ => return self.train.apply_pair(key, value),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let p = &self.phantom;
        let ip = &self.infer;
        let c = &self.counts;
        let mut pairs: Vec<(String, String)> = [
            ("data.kind", p.kind.name().to_string()),
            ("data.size", p.width.to_string()),
            ("data.direction", (p.direction.sign() as i32).to_string()),
            ("data.anomaly_fraction", p.anomaly_area_fraction.to_string()),
            ("data.texture", p.texture.to_string()),
            ("data.counts", join(&[c.train_healthy, c.test_anomalous, c.test_healthy])),
            ("data.seed", self.data_seed.to_string()),
            ("noise.seed", self.noise_seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        pairs.extend(self.train.to_pairs());
        let mode = match self.mode {
            Mode::Multi => "multi",
            Mode::Single => "single",
        };
        let subset = match self.subset {
            Subset::Anomalous => "anomalous",
            Subset::All => "all",
        };
        pairs.extend(
            [
                ("infer.mode", mode.to_string()),
                ("infer.steps", ip.steps.to_string()),
                ("infer.kernel", ip.kernel.to_string()),
                ("infer.th", ip.threshold.to_string()),
                ("infer.max_stages", ip.max_stages.to_string()),
                ("infer.convergence_eps", ip.convergence_eps.to_string()),
                ("infer.stride", ip.ddim_stride.to_string()),
                ("infer.masked_fusion", ip.masked_fusion.to_string()),
                ("infer.score", self.score.name().to_string()),
                ("infer.seed", self.infer_seed.to_string()),
                ("eval.subset", subset.to_string()),
                ("eval.grid.steps", join(&self.grid.steps)),
                ("eval.grid.kernel", join(&self.grid.kernels)),
                ("eval.grid.th", join(&self.grid.thresholds)),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v)),
        );
        pairs
    }

    /// Inference parameters with the stage cap implied by the mode.
    pub fn effective_infer(&self) -> InferenceParams {
        match self.mode {
            Mode::Multi => self.infer.clone(),
            Mode::Single => self.infer.single(),
        }
    }

    pub fn write_resolved(&self, dir: &Path, command: &str) -> anyhow::Result<()> {
        fs::create_dir_all(dir)?;
        let text = format!("# resolved configuration for `{command}`\n{}", format_pairs(&self.to_pairs()));
        fs::write(dir.join("resolved.cfg"), text)?;
        Ok(())
    }
}
