use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use rayon::prelude::*;

use synomaly::imgrid::normalize_unit;
use synomaly::inference::multi_stage_infer;
use synomaly::metrics::{
    aggregate, aggregate_csv, auroc, grid_csv, grid_search as run_grid, image_score, per_image_csv,
    pixel_metrics, roc_csv,
};
use synomaly::noisegen::synomaly_noise;
use synomaly::phantom::{gen_dataset, load_test, load_train, MANIFEST};
use synomaly::tensor_io::{read_mask, write_image, write_mask, write_pgm};
use synomaly::trainer::{load_checkpoint, save_checkpoint, train_with, write_loss_csv};
use synomaly::RngState;

use crate::config::{require, Mode, RunConfig, Subset};
use crate::{EvalArgs, GenPhantomArgs, GridArgs, InferArgs, PreviewArgs, TrainArgs};

fn set_opt<T: ToString>(cfg: &mut RunConfig, key: &str, value: &Option<T>) -> anyhow::Result<()> {
    if let Some(v) = value {
        cfg.set(key, &v.to_string())?;
    }
    Ok(())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn with_suffix(base: &Path, id: &str, suffix: &str) -> PathBuf {
    base.join(format!("{id}{suffix}"))
}

pub fn gen_phantom(cfg: &mut RunConfig, a: &GenPhantomArgs) -> anyhow::Result<()> {
    set_opt(cfg, "data.kind", &a.kind)?;
    set_opt(cfg, "data.counts", &a.counts)?;
    set_opt(cfg, "data.size", &a.size)?;
    cfg.set("data.seed", &a.seed.to_string())?;
    let manifest = gen_dataset(&a.out, cfg.counts, &cfg.phantom, cfg.data_seed)?;
    cfg.write_resolved(&a.out, "gen-phantom")?;
    println!(
        "wrote {} {} phantoms ({}x{}) to {}",
        manifest.len(),
        cfg.phantom.kind.name(),
        cfg.phantom.width,
        cfg.phantom.height,
        a.out.display()
    );
    Ok(())
}

pub fn train(cfg: &mut RunConfig, a: &TrainArgs) -> anyhow::Result<()> {
    set_opt(cfg, "noise.kind", &a.noise)?;
    set_opt(cfg, "noise.size", &a.preset)?;
    set_opt(cfg, "noise.mask", &a.mask)?;
    set_opt(cfg, "train.epochs", &a.epochs)?;
    set_opt(cfg, "train.batch", &a.batch)?;
    set_opt(cfg, "train.lr", &a.lr)?;
    cfg.set("train.seed", &a.seed.to_string())?;
    require(&a.data.join(MANIFEST))?;
    let images = load_train(&a.data)?;
    let Some(first) = images.first() else {
        bail!("no training images in {}", a.data.display());
    };
    let (w, h) = first.dims();
    cfg.set("model.width", &w.to_string())?;
    cfg.set("model.height", &h.to_string())?;
    cfg.write_resolved(&a.out, "train")?;

    let start = Instant::now();
    let outcome = train_with(&cfg.train, &images, |e| {
        eprintln!(
            "epoch {:>3}  loss {:.6}  ({:.0}s)",
            e.epoch,
            e.mean_loss,
            start.elapsed().as_secs_f64()
        );
    })?;
    save_checkpoint(&outcome.checkpoint, &a.out.join("model.ckpt"))?;
    write_loss_csv(&a.out.join("loss.csv"), &outcome.log)?;
    let last = outcome.log.last().map_or(f64::NAN, |e| e.mean_loss);
    println!(
        "trained {} parameters on {} images: initial loss {:.5}, final epoch loss {:.5}",
        outcome.checkpoint.model.param_count(),
        images.len(),
        outcome.initial_loss,
        last
    );
    Ok(())
}

pub fn infer(cfg: &mut RunConfig, a: &InferArgs) -> anyhow::Result<()> {
    set_opt(cfg, "infer.steps", &a.steps)?;
    set_opt(cfg, "infer.kernel", &a.kernel)?;
    set_opt(cfg, "infer.th", &a.th)?;
    set_opt(cfg, "infer.max_stages", &a.max_stages)?;
    set_opt(cfg, "infer.stride", &a.stride)?;
    if a.single {
        cfg.set("infer.mode", "single")?;
    }
    if a.multi {
        cfg.set("infer.mode", "multi")?;
    }
    if a.no_masked_fusion {
        cfg.set("infer.masked_fusion", "false")?;
    }
    cfg.set("infer.seed", &a.seed.to_string())?;
    require(&a.ckpt)?;
    require(&a.data.join(MANIFEST))?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let sched = ckpt.schedule()?;
    let params = cfg.effective_infer();
    params.validate(&sched)?;
    let items = load_test(&a.data)?;
    cfg.write_resolved(&a.out, "infer")?;

    let master = RngState::new(cfg.infer_seed);
    let start = Instant::now();
    let rows: Vec<(String, f64, usize)> = items
        .par_iter()
        .enumerate()
        .map(|(i, item)| -> anyhow::Result<_> {
            let out = multi_stage_infer(&item.image, &ckpt.model, &sched, &params, &master.fork(i as u64))
                .with_context(|| format!("inference on {}", item.id))?;
            let pgm = with_suffix(&a.out, &item.id, "_cf.pgm");
            if let Some(parent) = pgm.parent() {
                fs::create_dir_all(parent)?;
            }
            write_pgm(&pgm, &out.counterfactual)?;
            write_image(&with_suffix(&a.out, &item.id, "_cf.stnsr"), &out.counterfactual)?;
            write_mask(&with_suffix(&a.out, &item.id, "_mask.stnsr"), &out.mask)?;
            write(&with_suffix(&a.out, &item.id, "_trace.csv"), out.trace.to_csv())?;
            Ok((item.id.clone(), image_score(&out.trace, cfg.score)?, out.trace.len()))
        })
        .collect::<anyhow::Result<_>>()?;

    let mut csv = String::from("id,label,score,stages\n");
    for ((id, score, stages), item) in rows.iter().zip(&items) {
        let label = if item.anomalous { "anomalous" } else { "healthy" };
        csv.push_str(&format!("{id},{label},{score},{stages}\n"));
    }
    write(&a.out.join("scores.csv"), csv)?;
    let secs = start.elapsed().as_secs_f64();
    println!(
        "{} images, {} mode, {:.1} ms per image",
        items.len(),
        if cfg.mode == Mode::Multi { "multi-stage" } else { "single-stage" },
        1000.0 * secs / items.len() as f64
    );
    Ok(())
}

/// Reads `scores.csv` written by `infer`: `id,label,score,...`.
fn read_scores(path: &Path) -> anyhow::Result<(Vec<f64>, Vec<bool>)> {
    let text = fs::read_to_string(path)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 3 {
            bail!("bad row in {}: {line:?}", path.display());
        }
        labels.push(cols[1] == "anomalous");
        scores.push(cols[2].parse::<f64>().with_context(|| format!("score in {line:?}"))?);
    }
    Ok((scores, labels))
}

pub fn eval(cfg: &mut RunConfig, a: &EvalArgs) -> anyhow::Result<()> {
    if a.all {
        cfg.set("eval.subset", "all")?;
    }
    require(&a.gt.join(MANIFEST))?;
    let items = load_test(&a.gt)?;
    let mut rows = Vec::new();
    for item in &items {
        if cfg.subset == Subset::Anomalous && !item.anomalous {
            continue;
        }
        let mask_path = with_suffix(&a.pred, &item.id, "_mask.stnsr");
        let path = if mask_path.exists() {
            mask_path
        } else {
            let gt_path = with_suffix(&a.pred, &item.id, "_gt.stnsr");
            require(&gt_path).map_err(|_| crate::config::MissingFile(mask_path))?;
            gt_path
        };
        rows.push((item.id.clone(), pixel_metrics(&read_mask(&path)?, &item.gt)?));
    }
    cfg.write_resolved(&a.out, "eval")?;
    let metrics: Vec<_> = rows.iter().map(|r| r.1).collect();
    let agg = aggregate(&metrics);
    let mut agg_text = aggregate_csv(&agg);
    let scores_path = a.pred.join("scores.csv");
    if scores_path.exists() {
        let (scores, labels) = read_scores(&scores_path)?;
        write(&a.out.join("roc.csv"), roc_csv(&scores, &labels))?;
        match auroc(&scores, &labels) {
            Ok(v) => {
                agg_text.push_str(&format!("auroc,{v},\n"));
                println!("AUROC {v:.4}");
            }
            Err(e) => eprintln!("AUROC skipped: {e}"),
        }
    }
    write(&a.out.join("per_image.csv"), per_image_csv(&rows))?;
    write(&a.out.join("aggregate.csv"), agg_text)?;
    println!(
        "{} images: Dice {:.4} ± {:.4}, precision {:.4}, recall {:.4}",
        rows.len(),
        agg.dice.mean,
        agg.dice.std,
        agg.precision.mean,
        agg.recall.mean
    );
    Ok(())
}

fn apply_grid(cfg: &mut RunConfig, spec: &str) -> anyhow::Result<()> {
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (axis, values) = part
            .split_once('=')
            .ok_or_else(|| crate::config::BadValue { key: "--grid".into(), reason: format!("expected axis=values, got {part:?}") })?;
        let key = match axis.trim() {
            "steps" | "T" => "eval.grid.steps",
            "kernel" | "n" => "eval.grid.kernel",
            "th" | "Th" => "eval.grid.th",
            other => return Err(crate::config::UnknownKey(format!("eval.grid.{other}")).into()),
        };
        cfg.set(key, values.trim())?;
    }
    Ok(())
}

pub fn grid_search(cfg: &mut RunConfig, a: &GridArgs) -> anyhow::Result<()> {
    if let Some(g) = &a.grid {
        apply_grid(cfg, g)?;
    }
    if a.single {
        cfg.set("infer.mode", "single")?;
    }
    cfg.set("infer.seed", &a.seed.to_string())?;
    require(&a.ckpt)?;
    require(&a.data.join(MANIFEST))?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let sched = ckpt.schedule()?;
    let val: Vec<_> = load_test(&a.data)?
        .into_iter()
        .filter(|t| t.anomalous)
        .map(|t| (t.image, t.gt))
        .collect();
    cfg.write_resolved(&a.out, "grid-search")?;
    let rows = run_grid(&ckpt.model, &sched, &val, &cfg.grid, &cfg.effective_infer(), cfg.infer_seed)?;
    write(&a.out.join("grid.csv"), grid_csv(&rows))?;
    let best = &rows[0];
    println!(
        "{} cells over {} images; best T={} n={} Th={} Dice {:.4}",
        rows.len(),
        val.len(),
        best.steps,
        best.kernel,
        best.threshold,
        best.dice.mean
    );
    Ok(())
}

pub fn noise_preview(cfg: &mut RunConfig, a: &PreviewArgs) -> anyhow::Result<()> {
    set_opt(cfg, "noise.size", &a.preset)?;
    set_opt(cfg, "noise.sigma", &a.sigma)?;
    set_opt(cfg, "noise.tau", &a.tau)?;
    set_opt(cfg, "noise.direction", &a.d)?;
    set_opt(cfg, "noise.intensity", &a.i)?;
    set_opt(cfg, "noise.mask", &a.mask)?;
    set_opt(cfg, "data.size", &a.size)?;
    cfg.set("noise.seed", &a.seed.to_string())?;
    let (w, h) = (cfg.phantom.width, cfg.phantom.height);
    let mut params = cfg.train.noise.synomaly.clone();
    params.anatomical_mask = cfg.train.noise.mask.build(w, h);
    let sample = synomaly_noise(w, h, &params, &mut RngState::new(cfg.noise_seed))?;
    cfg.write_resolved(&a.out, "noise-preview")?;
    write_pgm(&a.out.join("noise.pgm"), &normalize_unit(&sample.field))?;
    write_pgm(&a.out.join("region.pgm"), &sample.region_mask.to_image())?;
    write_image(&a.out.join("noise.stnsr"), &sample.field)?;
    write_mask(&a.out.join("region.stnsr"), &sample.region_mask)?;
    println!(
        "sigma {} tau {}: {} anomaly pixels of {}",
        params.sigma,
        params.tau,
        sample.region_mask.count(),
        w * h
    );
    Ok(())
}
