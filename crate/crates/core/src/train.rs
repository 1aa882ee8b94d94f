//! Training loop: seeded epoch shuffling, flip augmentation, CSV loss
//! logging, periodic validation and checkpointing, and run manifests
//! that make reruns comparable.

use crate::dataset::Dataset;
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::eval;
use crate::geometry::RotatedBox;
use crate::tensor::Tensor4;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

/// Run manifest: enough to recognize two runs as comparable.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub dataset_images: usize,
}

/// Outcome of a training run.
#[derive(Debug)]
pub struct TrainSummary {
    pub steps_run: usize,
    pub final_loss: f64,
    pub final_val_ap: Option<f64>,
    pub checkpoint: PathBuf,
    pub wall: Duration,
}

/// Options beyond the config: early stopping and a wall-clock budget.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stop once validation AP reaches this value (requires `eval_every`).
    pub early_stop_ap: Option<f64>,
    /// Hard wall-clock limit; the loop exits cleanly when exceeded.
    pub max_wall: Option<Duration>,
    /// Cap on total steps (overrides the config schedule length).
    pub max_steps: Option<usize>,
}

/// Runs the configured schedule (`steps_first` at `lr_first`, then
/// `steps_second` at `lr_second`) over the training set with flip
/// augmentation, writing `config.toml`, `manifest.json`, `log.csv`,
/// and checkpoints under `out_dir`.
pub fn train_loop(
    detector: &mut Detector<f32>,
    train: &Dataset,
    val: Option<&Dataset>,
    out_dir: &Path,
    options: &TrainOptions,
) -> Result<TrainSummary> {
    if train.is_empty() {
        return Err(Error::Dataset("training dataset is empty".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let cfg = detector.cfg.clone();
    cfg.save(&out_dir.join("config.toml"))?;
    let manifest = RunManifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        dataset_images: train.len(),
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Config(format!("manifest: {e}")))?,
    )?;

    let mut log = std::io::BufWriter::new(std::fs::File::create(out_dir.join("log.csv"))?);
    writeln!(
        log,
        "step,cls,reg1,reg2,total,rpn_pos,rpn_neg,det_pos,det_neg,lr"
    )?;

    let flips = cfg.flip_augmentation;
    let pool = train.augmented_len(flips);
    let total_steps = options
        .max_steps
        .unwrap_or(cfg.steps_first + cfg.steps_second);
    let start_step = detector.global_step() as usize;

    let started = Instant::now();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut epoch = 0u64;
    let mut last_loss = f64::NAN;
    let mut last_val_ap = None;
    let mut steps_run = 0usize;

    // replay the shuffle stream up to the resume point
    let refill = |epoch: &mut u64, order: &mut Vec<usize>| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xE901).wrapping_add(*epoch));
        *order = (0..pool).collect();
        order.shuffle(&mut rng);
        *epoch += 1;
    };
    refill(&mut epoch, &mut order);
    for _ in 0..start_step * cfg.images_per_batch {
        cursor += 1;
        if cursor >= order.len() {
            refill(&mut epoch, &mut order);
            cursor = 0;
        }
    }

    for step in start_step..total_steps {
        let mut batch: Vec<(Tensor4<f32>, Vec<RotatedBox>)> =
            Vec::with_capacity(cfg.images_per_batch);
        for _ in 0..cfg.images_per_batch {
            let idx = order[cursor];
            batch.push(train.fetch(idx, flips)?);
            cursor += 1;
            if cursor >= order.len() {
                refill(&mut epoch, &mut order);
                cursor = 0;
            }
        }
        let report = detector.train_step(&batch, step as u64)?;
        last_loss = report.total;
        steps_run += 1;
        let lr = if step < cfg.steps_first {
            cfg.lr_first
        } else {
            cfg.lr_second
        };
        writeln!(
            log,
            "{step},{},{},{},{},{},{},{},{},{lr}",
            report.rpn.cls + report.det.cls,
            report.rpn.reg1 + report.det.reg1,
            report.rpn.reg2 + report.det.reg2,
            report.total,
            report.rpn.num_pos,
            report.rpn.num_neg,
            report.det.num_pos,
            report.det.num_neg,
        )?;

        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            detector.save_checkpoint(
                &out_dir.join(format!("ckpt-{:06}.bin", step + 1)),
                &std::collections::BTreeMap::new(),
            )?;
        }
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            if let Some(val_ds) = val {
                let ap = dataset_ap(detector, val_ds)?;
                last_val_ap = Some(ap);
                if let Some(target) = options.early_stop_ap {
                    if ap >= target {
                        break;
                    }
                }
            }
        }
        if let Some(limit) = options.max_wall {
            if started.elapsed() >= limit {
                break;
            }
        }
    }
    log.flush()?;
    let ckpt = out_dir.join("ckpt-final.bin");
    detector.save_checkpoint(&ckpt, &std::collections::BTreeMap::new())?;
    Ok(TrainSummary {
        steps_run,
        final_loss: last_loss,
        final_val_ap: last_val_ap,
        checkpoint: ckpt,
        wall: started.elapsed(),
    })
}

/// AP at rotated IoU 0.5 of the detector over a dataset.
pub fn dataset_ap(detector: &Detector<f32>, ds: &Dataset) -> Result<f64> {
    let mut matches = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let (image, gts) = ds.fetch::<f32>(i, false)?;
        let dets = detector.detect_untrained_ok(&image)?;
        let scored: Vec<(RotatedBox, f64)> = dets.iter().map(|d| (d.box_, d.score)).collect();
        matches.push(eval::match_detections(&scored, &gts, eval::MATCH_IOU));
    }
    Ok(eval::average_precision(&eval::precision_recall(&matches)))
}

/// Proposal quality metrics over a dataset: AR at `k` proposals and the
/// mean positive-proposal IoU.
pub fn dataset_proposal_metrics(
    detector: &Detector<f32>,
    ds: &Dataset,
    k: usize,
) -> Result<(f64, Option<f64>)> {
    let mut per_image = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let (image, gts) = ds.fetch::<f32>(i, false)?;
        let proposals = detector.propose(&image, false)?;
        let scored: Vec<(RotatedBox, f64)> =
            proposals.iter().map(|p| (p.box_, p.score)).collect();
        per_image.push((scored, gts));
    }
    let ar = eval::average_recall(&per_image, k);
    let miou = eval::mean_positive_iou(&per_image);
    Ok((ar, miou))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DetectorConfig;
    use crate::synth::{generate_dataset, SynthParams};
    use tempfile::tempdir;

    fn mini_cfg() -> DetectorConfig {
        DetectorConfig {
            backbone_widths: vec![6, 8, 10],
            arf_layers: 1,
            arf_filters: 4,
            rpn_hidden: 8,
            anchor_scales: vec![16.0, 32.0],
            anchor_ratios: vec![0.25],
            pool_lateral_channels: 6,
            pool_channels: 8,
            fc_dim: 16,
            rois_per_image: 8,
            anchor_batch: 32,
            rpn_train_pre_nms: 120,
            rpn_train_cap: 40,
            rpn_test_pre_nms: 60,
            rpn_test_cap: 15,
            steps_first: 3,
            steps_second: 1,
            checkpoint_every: 2,
            ..DetectorConfig::desk()
        }
    }

    #[test]
    fn loop_writes_artifacts_and_is_rerunnable() {
        let data_dir = tempdir().unwrap();
        generate_dataset(data_dir.path(), 4, 5, &SynthParams::default()).unwrap();
        let ds = Dataset::load(data_dir.path()).unwrap();

        let run = |out: &Path| -> (f64, String) {
            let mut det = Detector::<f32>::new(mini_cfg()).unwrap();
            let summary =
                train_loop(&mut det, &ds, None, out, &TrainOptions::default()).unwrap();
            let log = std::fs::read_to_string(out.join("log.csv")).unwrap();
            (summary.final_loss, log)
        };
        let out1 = tempdir().unwrap();
        let out2 = tempdir().unwrap();
        let (l1, log1) = run(out1.path());
        let (l2, log2) = run(out2.path());
        assert_eq!(l1, l2, "equal manifests must give equal metrics");
        assert_eq!(log1, log2);
        assert!(out1.path().join("config.toml").exists());
        assert!(out1.path().join("manifest.json").exists());
        assert!(out1.path().join("ckpt-final.bin").exists());
        assert!(out1.path().join("ckpt-000002.bin").exists());
    }

    #[test]
    fn empty_dataset_rejected() {
        let dir = tempdir().unwrap();
        std::fs::write(dir.path().join("annotations.jsonl"), "").unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        let mut det = Detector::<f32>::new(mini_cfg()).unwrap();
        let out = tempdir().unwrap();
        assert!(train_loop(&mut det, &ds, None, out.path(), &TrainOptions::default()).is_err());
    }
}
