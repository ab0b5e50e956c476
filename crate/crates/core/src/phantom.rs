//! Procedural stand-in datasets with known anatomy and ground-truth anomalies.
//!
//! * `Vessel`: ultrasound-like cross-section. A dark lumen inside a bright
//!   wall ring, set in mid-grey tissue, under multiplicative speckle and
//!   depth attenuation. Anomalies are plaques attached to the inner wall.
//! * `Organ`: CT/MRI-like. A bright textured ellipse with a smooth intensity
//!   gradient on a dark background. Anomalies are lesions inside the organ.
//!
//! Healthy images are clipped at their 99th percentile and rescaled to
//! [0, 1]. Anomalous images are healthy images (same stream) with soft-edged
//! disks added in that normalized space and clamped back to [0, 1].

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imgrid::{blur_f64, normalize_unit, percentile_clip, BinaryMask, BlurKernel, Image2D};
use crate::noisegen::AnomalyDirection;
use crate::rng::RngState;
use crate::tensor_io::{read_image, read_mask, write_image, write_mask};

/// Width of the soft edges, in pixels.
const EDGE: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhantomKind {
    Vessel,
    Organ,
}

impl PhantomKind {
    pub fn name(self) -> &'static str {
        match self {
            PhantomKind::Vessel => "vessel",
            PhantomKind::Organ => "organ",
        }
    }
}

impl std::str::FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vessel" => Ok(PhantomKind::Vessel),
            "organ" => Ok(PhantomKind::Organ),
            other => Err(Error::invalid(format!("unknown phantom kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub width: usize,
    pub height: usize,
    pub direction: AnomalyDirection,
    /// Planted anomaly area as a fraction of the anatomy area.
    pub anomaly_area_fraction: f64,
    /// Speckle (vessel) or texture (organ) strength.
    pub texture: f64,
}

impl PhantomSpec {
    /// Bright plaques in a 64x64 vessel, about 10% of the vessel area.
    pub fn vessel(size: usize) -> Self {
        Self {
            kind: PhantomKind::Vessel,
            width: size,
            height: size,
            direction: AnomalyDirection::Brighter,
            anomaly_area_fraction: 0.10,
            texture: 0.25,
        }
    }

    /// Dark lesions in an organ.
    pub fn organ(size: usize) -> Self {
        Self {
            kind: PhantomKind::Organ,
            direction: AnomalyDirection::Darker,
            texture: 0.2,
            ..Self::vessel(size)
        }
    }

    pub fn for_kind(kind: PhantomKind, size: usize) -> Self {
        match kind {
            PhantomKind::Vessel => Self::vessel(size),
            PhantomKind::Organ => Self::organ(size),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::invalid("phantoms need at least 16x16 pixels"));
        }
        if !(self.anomaly_area_fraction > 0.0 && self.anomaly_area_fraction <= 0.3) {
            return Err(Error::invalid(format!(
                "anomaly_area_fraction must lie in (0, 0.3], got {}",
                self.anomaly_area_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.texture) {
            return Err(Error::invalid("texture strength must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Anatomy area of an unjittered phantom, in pixels.
    pub fn nominal_area(&self) -> f64 {
        let s = self.width.min(self.height) as f64;
        match self.kind {
            PhantomKind::Vessel => PI * (VESSEL_LUMEN + VESSEL_WALL) * (VESSEL_LUMEN + VESSEL_WALL) * s * s,
            PhantomKind::Organ => PI * ORGAN_A * ORGAN_B * s * s,
        }
    }
}

// geometry as fractions of the shorter side
const VESSEL_LUMEN: f64 = 0.25;
const VESSEL_WALL: f64 = 0.09;
const ORGAN_A: f64 = 0.32;
const ORGAN_B: f64 = 0.26;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    pub image: Image2D,
    pub anatomy_mask: BinaryMask,
    /// Empty for healthy samples.
    pub gt_anomaly: BinaryMask,
}

/// Jittered geometry, kept so anomalies can be placed consistently.
#[derive(Clone, Copy, Debug)]
enum Geometry {
    Vessel { cx: f64, cy: f64, lumen: f64 },
    Organ { cx: f64, cy: f64, a: f64, b: f64, theta: f64 },
}

fn soft(v: f64) -> f64 {
    1.0 / (1.0 + (-v / EDGE).exp())
}

/// Smoothed standard-normal field.
fn smooth_field(w: usize, h: usize, sigma: f64, rng: &mut RngState) -> Vec<f64> {
    let raw: Vec<f32> = (0..w * h).map(|_| rng.normal() as f32).collect();
    let k = BlurKernel::with_sigma(sigma).expect("positive sigma");
    let v = blur_f64(&raw, w, h, &k);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    v.into_iter().map(|x| (x - mean) / sd.max(1e-12)).collect()
}

fn finish(w: usize, h: usize, raw: Vec<f64>) -> Image2D {
    let img = Image2D::new(w, h, raw.into_iter().map(|v| v as f32).collect())
        .expect("phantom intensities are finite");
    normalize_unit(&percentile_clip(&img, 99.0).expect("p = 99 is valid"))
}

fn healthy_with_geometry(spec: &PhantomSpec, rng: &mut RngState) -> Result<(PhantomSample, Geometry)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let s = w.min(h) as f64;
    let cx = (w as f64 - 1.0) / 2.0 + rng.range(-0.05, 0.05) * s;
    let cy = (h as f64 - 1.0) / 2.0 + rng.range(-0.05, 0.05) * s;
    let mut raw = vec![0.0; w * h];
    let (anatomy, geom) = match spec.kind {
        PhantomKind::Vessel => {
            let lumen = VESSEL_LUMEN * s * rng.range(0.95, 1.05);
            let outer = lumen + VESSEL_WALL * s * rng.range(0.9, 1.1);
            let tissue = smooth_field(w, h, s / 8.0, rng);
            let speckle = smooth_field(w, h, 0.8, rng);
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let r = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                    let in_lumen = soft(lumen - r);
                    let in_vessel = soft(outer - r);
                    let base = (0.4 + 0.05 * tissue[i]) * (1.0 - in_vessel)
                        + 0.85 * (in_vessel - in_lumen)
                        + 0.1 * in_lumen;
                    let depth = 1.0 - 0.2 * y as f64 / h as f64;
                    raw[i] = base * (1.0 + spec.texture * speckle[i]).max(0.0) * depth;
                }
            }
            let anatomy = BinaryMask::from_fn(w, h, |x, y| {
                (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= outer * outer
            });
            (anatomy, Geometry::Vessel { cx, cy, lumen })
        }
        PhantomKind::Organ => {
            let a = ORGAN_A * s * rng.range(0.93, 1.07);
            let b = ORGAN_B * s * rng.range(0.93, 1.07);
            let theta = rng.range(0.0, PI);
            let phi = rng.range(0.0, 2.0 * PI);
            let texture = smooth_field(w, h, 1.5, rng);
            let backdrop = smooth_field(w, h, s / 6.0, rng);
            let (ct, st) = (theta.cos(), theta.sin());
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    let u = (dx * ct + dy * st) / a;
                    let v = (-dx * st + dy * ct) / b;
                    // signed distance proxy in pixels
                    let inside = soft((1.0 - (u * u + v * v).sqrt()) * a.min(b));
                    let gradient = 0.1 * (dx * phi.cos() + dy * phi.sin()) / s;
                    let organ = 0.65 + gradient + spec.texture * 0.2 * texture[i];
                    let bg = 0.12 + 0.03 * backdrop[i];
                    raw[i] = (organ * inside + bg * (1.0 - inside)).max(0.0);
                }
            }
            let anatomy = BinaryMask::from_fn(w, h, |x, y| {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let u = (dx * ct + dy * st) / a;
                let v = (-dx * st + dy * ct) / b;
                u * u + v * v <= 1.0
            });
            (anatomy, Geometry::Organ { cx, cy, a, b, theta })
        }
    };
    Ok((
        PhantomSample {
            image: finish(w, h, raw),
            anatomy_mask: anatomy,
            gt_anomaly: BinaryMask::empty(w, h),
        },
        geom,
    ))
}

pub fn gen_healthy(spec: &PhantomSpec, rng: &mut RngState) -> Result<PhantomSample> {
    Ok(healthy_with_geometry(spec, rng)?.0)
}

/// A healthy sample drawn from the same stream, plus 1 to 3 soft disks whose
/// total area is about `anomaly_area_fraction` of the anatomy. Vessel plaques
/// sit on the inner wall; organ lesions lie inside the organ.
pub fn gen_anomalous(spec: &PhantomSpec, rng: &mut RngState) -> Result<PhantomSample> {
    let (mut sample, geom) = healthy_with_geometry(spec, rng)?;
    let (w, h) = (spec.width, spec.height);
    let target = spec.anomaly_area_fraction * sample.anatomy_mask.count() as f64;
    let k = 1 + rng.below(3);
    let radius = (target / (k as f64 * PI)).sqrt();
    let amp = spec.direction.sign()
        * match spec.kind {
            PhantomKind::Vessel => rng.range(0.6, 0.8),
            PhantomKind::Organ => rng.range(0.35, 0.5),
        };
    let centers: Vec<(f64, f64)> = (0..k)
        .map(|_| {
            let angle = rng.range(0.0, 2.0 * PI);
            match geom {
                Geometry::Vessel { cx, cy, lumen } => {
                    let d = (lumen - radius).max(0.0) * rng.range(0.9, 1.0);
                    (cx + d * angle.cos(), cy + d * angle.sin())
                }
                Geometry::Organ { cx, cy, a, b, theta } => {
                    let shrink = (1.0 - radius / b.min(a)).max(0.0) * 0.85;
                    let rho = rng.uniform().sqrt() * shrink;
                    let (u, v) = (rho * a * angle.cos(), rho * b * angle.sin());
                    (cx + u * theta.cos() - v * theta.sin(), cy + u * theta.sin() + v * theta.cos())
                }
            }
        })
        .collect();

    let mut data = sample.image.data().to_vec();
    let mut gt = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let profile = centers
                .iter()
                .map(|&(px, py)| {
                    let r = ((x as f64 - px).powi(2) + (y as f64 - py).powi(2)).sqrt();
                    soft(radius - r)
                })
                .fold(0.0, f64::max);
            data[i] = (data[i] as f64 + amp * profile).clamp(0.0, 1.0) as f32;
            gt[i] = profile >= 0.5 && sample.anatomy_mask.data()[i];
        }
    }
    sample.image = Image2D::new(w, h, data)?;
    sample.gt_anomaly = BinaryMask::new(w, h, gt)?;
    Ok(sample)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetCounts {
    pub train_healthy: usize,
    pub test_anomalous: usize,
    pub test_healthy: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the dataset root, `/`-separated.
    pub path: String,
    pub split: String,
    pub label: String,
}

pub const MANIFEST: &str = "manifest.csv";

/// Stream for sample `index` of group `group` (0 train, 1 anomalous test,
/// 2 healthy test).
fn sample_stream(master: &RngState, group: u64, index: usize) -> RngState {
    master.fork((group << 32) | index as u64)
}

/// Writes `train/healthy/NNNNN.stnsr`, `test/anomalous/NNNNN.stnsr` and
/// `test/healthy/NNNNN.stnsr`. Test images get paired `_gt` and `_anat`
/// masks (the healthy ones an empty `_gt`). Returns the manifest rows.
pub fn gen_dataset(
    out: &Path,
    counts: DatasetCounts,
    spec: &PhantomSpec,
    seed: u64,
) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    if counts.train_healthy == 0 || counts.test_anomalous == 0 || counts.test_healthy == 0 {
        return Err(Error::invalid("dataset counts must all be positive"));
    }
    let master = RngState::new(seed);
    let groups = [
        ("train/healthy", "train", "healthy", counts.train_healthy, 0u64),
        ("test/anomalous", "test", "anomalous", counts.test_anomalous, 1),
        ("test/healthy", "test", "healthy", counts.test_healthy, 2),
    ];
    let mut manifest = Vec::new();
    for &(dir, split, label, n, group) in &groups {
        let full = out.join(dir);
        fs::create_dir_all(&full).map_err(|e| Error::io(&full, e))?;
        (0..n).into_par_iter().try_for_each(|i| -> Result<()> {
            let mut rng = sample_stream(&master, group, i);
            let sample = if group == 1 {
                gen_anomalous(spec, &mut rng)?
            } else {
                gen_healthy(spec, &mut rng)?
            };
            let stem = format!("{i:05}");
            write_image(&full.join(format!("{stem}.stnsr")), &sample.image)?;
            if split == "test" {
                write_mask(&full.join(format!("{stem}_gt.stnsr")), &sample.gt_anomaly)?;
                write_mask(&full.join(format!("{stem}_anat.stnsr")), &sample.anatomy_mask)?;
            }
            Ok(())
        })?;
        for i in 0..n {
            manifest.push(ManifestEntry {
                path: format!("{dir}/{i:05}.stnsr"),
                split: split.to_string(),
                label: label.to_string(),
            });
        }
    }
    let mut csv = String::from("path,split,label\n");
    for e in &manifest {
        csv.push_str(&format!("{},{},{}\n", e.path, e.split, e.label));
    }
    let mpath = out.join(MANIFEST);
    fs::write(&mpath, csv).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("path,split,label") {
        return Err(Error::format("manifest", "expected header path,split,label"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let parts: Vec<&str> = l.split(',').collect();
            match parts[..] {
                [p, s, lab] => Ok(ManifestEntry {
                    path: p.to_string(),
                    split: s.to_string(),
                    label: lab.to_string(),
                }),
                _ => Err(Error::format("manifest", format!("bad row {l:?}"))),
            }
        })
        .collect()
}

/// One test image with its masks.
#[derive(Clone, Debug, PartialEq)]
pub struct TestItem {
    /// Manifest path without the `.stnsr` suffix, e.g. `test/anomalous/00003`.
    pub id: String,
    pub anomalous: bool,
    pub image: Image2D,
    pub gt: BinaryMask,
    pub anatomy: BinaryMask,
}

fn stem_path(root: &Path, entry_path: &str) -> (String, PathBuf) {
    let id = entry_path.trim_end_matches(".stnsr").to_string();
    let p = root.join(&id);
    (id, p)
}

pub fn load_train(root: &Path) -> Result<Vec<Image2D>> {
    read_manifest(root)?
        .iter()
        .filter(|e| e.split == "train")
        .map(|e| read_image(&root.join(&e.path)))
        .collect()
}

pub fn load_test(root: &Path) -> Result<Vec<TestItem>> {
    read_manifest(root)?
        .iter()
        .filter(|e| e.split == "test")
        .map(|e| {
            let (id, stem) = stem_path(root, &e.path);
            let with = |suffix: &str| {
                let mut s = stem.clone().into_os_string();
                s.push(suffix);
                PathBuf::from(s)
            };
            Ok(TestItem {
                image: read_image(&root.join(&e.path))?,
                gt: read_mask(&with("_gt.stnsr"))?,
                anatomy: read_mask(&with("_anat.stnsr"))?,
                anomalous: e.label == "anomalous",
                id,
            })
        })
        .collect()
}
