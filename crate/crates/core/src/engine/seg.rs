//! Dense-map adaptation: every pixel is a sample, maps are batched whole.
//!
//! Differences from the classification loop: selection uses per-class
//! confidence percentiles instead of batch-mean thresholds, only the
//! normalization layers train, the moving average runs slower, and the
//! loss is balanced cross-entropy on reliable pixels plus a decaying
//! entropy term over all pixels. Reported accuracy is macro-averaged over
//! classes. The CSV's `mu_c` column carries the entropy weight (it follows
//! the same geometric decay law); `mu_r` stays `nan`.

use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Mode, UpdateMask};
use crate::numkit::{save_checkpoint, NamedTensor, Tensor};
use crate::objective::{ce_balanced, entropy_loss, total_segmentation};
use crate::select::{class_weights, compute_thresholds, seg_partition, seg_thresholds};
use crate::teacher::batch_stats;

use super::adapt::{batches_of, shuffled_epoch_order, AdaptLoop, AdaptOutcome};
use super::config::RunConfig;
use super::metrics::{write_metrics_csv, MetricsRecord};

/// Adapts a source model to flattened target maps. `target.len()` must be
/// a whole number of `cfg.map_height * cfg.map_width` maps.
pub fn adapt_segmentation(
    cfg: &RunConfig,
    source_state: &[NamedTensor],
    target: &Dataset,
    out_model: Option<&Path>,
    metrics_out: Option<&Path>,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    let pixels_per_map = cfg.map_height * cfg.map_width;
    if target.is_empty() || target.len() % pixels_per_map != 0 {
        return Err(Error::Config(format!(
            "target holds {} pixels, not a whole number of {}x{} maps",
            target.len(),
            cfg.map_height,
            cfg.map_width
        )));
    }
    let num_maps = target.len() / pixels_per_map;
    let map_batches = super::adapt::epoch_batch_count(num_maps, cfg.maps_per_batch.max(1));
    let total_steps = cfg.epochs as u64 * map_batches as u64;
    let mut lp = AdaptLoop::new(
        cfg,
        source_state,
        cfg.seg_ema_decay,
        UpdateMask::BnOnly,
        total_steps,
    )?;

    let zero_shot_acc = super::adapt::eval_or_nan(&lp.pair.student, target, cfg.eval_batch, true);
    let mut records = Vec::new();
    let mut final_acc = f64::NAN;
    for epoch in 0..cfg.epochs {
        let map_order = shuffled_epoch_order(num_maps, cfg.seed, epoch as u32);
        for maps in batches_of(&map_order, cfg.maps_per_batch.max(1)) {
            let positions: Vec<usize> = maps
                .iter()
                .flat_map(|&m| m * pixels_per_map..(m + 1) * pixels_per_map)
                .collect();
            let record = run_map_batch(cfg, &mut lp, target, &positions, epoch as u32)?;
            records.push(record);
        }
        final_acc = super::adapt::eval_or_nan(&lp.pair.student, target, cfg.eval_batch, true);
        if let Some(last) = records.last_mut() {
            last.acc = final_acc;
        }
    }

    if let Some(path) = out_model {
        save_checkpoint(path, &lp.pair.student.state_tensors())?;
    }
    if let Some(path) = metrics_out {
        write_metrics_csv(path, &records)?;
    }
    Ok(AdaptOutcome {
        zero_shot_acc,
        final_acc,
        online_first_pass_acc: f64::NAN,
        steps_taken: lp.opt.steps_taken(),
        trained_batches: lp.iter,
        records,
        touches: Vec::new(),
    })
}

fn run_map_batch(
    cfg: &RunConfig,
    lp: &mut AdaptLoop,
    target: &Dataset,
    positions: &[usize],
    epoch: u32,
) -> Result<MetricsRecord> {
    let stats = batch_stats(&lp.pair.teacher, target, positions, &lp.policy, epoch)?;
    let cutoffs = seg_thresholds(&stats, target.num_classes, cfg.seg_percentile)?;
    let split = seg_partition(&stats, &cutoffs)?;
    let batch_means = compute_thresholds(&stats)?;

    let rows: Vec<Vec<f64>> = positions
        .iter()
        .map(|&p| {
            let s = &target.samples[p];
            lp.policy.augment(&s.features, s.index, 0, epoch)
        })
        .collect();
    let x0 = Tensor::from_rows(&rows)?;
    let probs = lp.pair.student.predict(&x0, Mode::Train)?;

    let mut record = MetricsRecord::blank(lp.iter);
    record.tau_c = batch_means.tau_c;
    record.tau_u = batch_means.tau_u;
    record.sel_frac = split.selected_fraction();
    let all: Vec<usize> = (0..positions.len()).collect();
    record.pl_acc = super::adapt::label_match_fraction(target, positions, &all, &stats);
    record.dr_pl_acc = super::adapt::label_match_fraction(target, positions, &split.reliable, &stats);

    let ce = if split.reliable.is_empty() {
        None
    } else {
        let labels: Vec<u32> = split.reliable.iter().map(|&b| stats[b].pseudo_label).collect();
        let weights = class_weights(&labels, target.num_classes)?;
        Some(ce_balanced(&probs.gather_rows(&split.reliable)?, &labels, &weights)?)
    };
    let ent = entropy_loss(&probs)?;

    lp.curriculum.step(batch_means.tau_c, batch_means.tau_u)?;
    record.mu_c = lp.curriculum.mu_e;
    let total = total_segmentation(ce.as_ref(), &ent, &lp.curriculum)?;

    record.l_ce = ce.as_ref().map_or(f64::NAN, Tensor::item);
    record.l_ent = ent.item();
    record.l_total = total.item();

    total.backward()?;
    lp.opt.step_masked(&lp.params, &lp.mask)?;
    for (_, p) in &lp.params {
        p.zero_grad();
    }
    lp.pair.ema_update()?;
    lp.iter += 1;
    Ok(record)
}
