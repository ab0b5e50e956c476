//! Pixel overlap scores, image-level AUROC and the inference grid search.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::diffusion::{EpsModel, Schedule};
use crate::error::{Error, Result};
use crate::imgrid::{binarize, gaussian_blur, BinaryMask, BlurKernel, Image2D};
use crate::inference::{multi_stage_infer, reconstruct, InferenceParams, StageTrace};
use crate::rng::RngState;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelMetrics {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Overlap of `pred` with `gt`.
///
/// Both empty counts as a correct rejection (all ones). An empty `gt` with a
/// non-empty prediction gives precision 0, recall 1 and Dice 0.
pub fn pixel_metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<PixelMetrics> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimensionMismatch {
            expected: gt.dims(),
            got: pred.dims(),
        });
    }
    let (mut tp, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        tp += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    let ratio = |num: usize, den: usize| num as f64 / den as f64;
    Ok(match (p, g) {
        (0, 0) => PixelMetrics { dice: 1.0, precision: 1.0, recall: 1.0 },
        (_, 0) => PixelMetrics { dice: 0.0, precision: 0.0, recall: 1.0 },
        (0, _) => PixelMetrics { dice: 0.0, precision: 0.0, recall: 0.0 },
        _ => PixelMetrics {
            dice: ratio(2 * tp, p + g),
            precision: ratio(tp, p),
            recall: ratio(tp, g),
        },
    })
}

pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(pixel_metrics(pred, gt)?.dice)
}

pub fn precision(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(pixel_metrics(pred, gt)?.precision)
}

pub fn recall(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(pixel_metrics(pred, gt)?.recall)
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd { mean: f64::NAN, std: f64::NAN };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub dice: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
}

pub fn aggregate(rows: &[PixelMetrics]) -> Aggregate {
    let col = |f: fn(&PixelMetrics) -> f64| mean_std(&rows.iter().map(f).collect::<Vec<_>>());
    Aggregate {
        dice: col(|m| m.dice),
        precision: col(|m| m.precision),
        recall: col(|m| m.recall),
    }
}

fn check_labels(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("image score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs at least one anomalous and one healthy score".into(),
        ));
    }
    Ok((pos, neg))
}

/// Probability that an anomalous image (`true`) outscores a healthy one, ties
/// counting one half. Computed from mid-ranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_labels(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// `(false positive rate, true positive rate)` at every distinct score used as
/// an inclusive threshold, from the highest down, starting at `(0, 0)`.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check_labels(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(pts)
}

/// Area under [`roc_curve`] by the trapezoid rule.
pub fn auroc_trapezoid(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pts = roc_curve(scores, labels)?;
    Ok(pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScoreKind {
    /// Pixels in the final mask.
    #[default]
    MaskPixels,
    /// Sum of the final blurred residual.
    ResidualSum,
}

impl ScoreKind {
    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::MaskPixels => "mask_pixels",
            ScoreKind::ResidualSum => "residual_sum",
        }
    }
}

impl std::str::FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask_pixels" => Ok(ScoreKind::MaskPixels),
            "residual_sum" => Ok(ScoreKind::ResidualSum),
            other => Err(Error::invalid(format!("unknown score kind {other:?}"))),
        }
    }
}

pub fn image_score(trace: &StageTrace, kind: ScoreKind) -> Result<f64> {
    let last = trace
        .last()
        .ok_or_else(|| Error::invalid("image score of an empty trace"))?;
    Ok(match kind {
        ScoreKind::MaskPixels => last.mask_pixels as f64,
        ScoreKind::ResidualSum => last.residual_sum,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub steps: Vec<usize>,
    pub kernels: Vec<usize>,
    pub thresholds: Vec<f32>,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() || self.kernels.is_empty() || self.thresholds.is_empty() {
            return Err(Error::invalid("every grid axis needs at least one value"));
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<(usize, usize, f32)> {
        let mut out = Vec::new();
        for &t in &self.steps {
            for &n in &self.kernels {
                for &th in &self.thresholds {
                    out.push((t, n, th));
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridRow {
    pub steps: usize,
    pub kernel: usize,
    pub threshold: f32,
    pub dice: MeanStd,
}

/// Mean Dice of every grid cell over `val`, best first; ties go to the
/// smaller `(steps, kernel, threshold)`.
///
/// Image `i` uses `RngState::new(seed).fork(i)` in every cell. Fields of
/// `base` other than the three grid axes are kept. With a one-stage cap the
/// reconstructions depend only on `steps` and are shared across the other
/// two axes.
pub fn grid_search(
    model: &dyn EpsModel,
    sched: &Schedule,
    val: &[(Image2D, BinaryMask)],
    grid: &GridSpec,
    base: &InferenceParams,
    seed: u64,
) -> Result<Vec<GridRow>> {
    grid.validate()?;
    if val.is_empty() {
        return Err(Error::invalid("grid search needs a non-empty validation set"));
    }
    let master = RngState::new(seed);
    let cells = grid.cells();
    for &(t, n, th) in &cells {
        InferenceParams { steps: t, kernel: n, threshold: th, ..base.clone() }.validate(sched)?;
    }

    let mut rows: Vec<GridRow> = if base.max_stages == 1 {
        let mut rows = Vec::with_capacity(cells.len());
        for &t in &grid.steps {
            let p = InferenceParams { steps: t, ..base.clone() };
            let recon: Vec<Image2D> = (0..val.len())
                .into_par_iter()
                .map(|i| reconstruct(&val[i].0, model, sched, &p, &mut master.fork(i as u64).fork(0)))
                .collect::<Result<_>>()?;
            for &n in &grid.kernels {
                let kernel = BlurKernel::new(n)?;
                let resid: Vec<Image2D> = val
                    .iter()
                    .zip(&recon)
                    .map(|((x0, _), xhat)| {
                        let a = gaussian_blur(x0, &kernel)?;
                        a.zip_map(&gaussian_blur(xhat, &kernel)?, |p, q| (p - q).abs())
                    })
                    .collect::<Result<_>>()?;
                for &th in &grid.thresholds {
                    let d: Vec<f64> = resid
                        .iter()
                        .zip(val)
                        .map(|(r, (_, gt))| dice(&binarize(r, th), gt))
                        .collect::<Result<_>>()?;
                    rows.push(GridRow { steps: t, kernel: n, threshold: th, dice: mean_std(&d) });
                }
            }
        }
        rows
    } else {
        cells
            .par_iter()
            .map(|&(t, n, th)| {
                let p = InferenceParams { steps: t, kernel: n, threshold: th, ..base.clone() };
                let d: Vec<f64> = val
                    .iter()
                    .enumerate()
                    .map(|(i, (x0, gt))| {
                        let out = multi_stage_infer(x0, model, sched, &p, &master.fork(i as u64))?;
                        dice(&out.mask, gt)
                    })
                    .collect::<Result<_>>()?;
                Ok(GridRow { steps: t, kernel: n, threshold: th, dice: mean_std(&d) })
            })
            .collect::<Result<_>>()?
    };
    rows.sort_by(|a, b| {
        b.dice
            .mean
            .total_cmp(&a.dice.mean)
            .then(a.steps.cmp(&b.steps))
            .then(a.kernel.cmp(&b.kernel))
            .then(a.threshold.total_cmp(&b.threshold))
    });
    Ok(rows)
}

pub fn per_image_csv(rows: &[(String, PixelMetrics)]) -> String {
    let mut s = String::from("id,dice,precision,recall\n");
    for (id, m) in rows {
        let _ = writeln!(s, "{id},{},{},{}", m.dice, m.precision, m.recall);
    }
    s
}

pub fn aggregate_csv(agg: &Aggregate) -> String {
    let mut s = String::from("metric,mean,std\n");
    for (name, v) in [("dice", agg.dice), ("precision", agg.precision), ("recall", agg.recall)] {
        let _ = writeln!(s, "{name},{},{}", v.mean, v.std);
    }
    s
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut s = String::from("T,n,Th,mean_dice,std_dice\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.steps, r.kernel, r.threshold, r.dice.mean, r.dice.std);
    }
    s
}

/// Labels are written as `anomalous` or `healthy`.
pub fn roc_csv(scores: &[f64], labels: &[bool]) -> String {
    let mut s = String::from("score,label\n");
    for (sc, &l) in scores.iter().zip(labels) {
        let _ = writeln!(s, "{sc},{}", if l { "anomalous" } else { "healthy" });
    }
    s
}
