//! Self-training adaptation of a source model on unlabeled target data.
//!
//! Per batch: the frozen-for-the-step teacher scores every sample across
//! the augmented views, the batch is split into reliable and unreliable
//! sets against the batch-mean thresholds, and the student takes one
//! optimizer step on the scheduled mix of class-balanced cross-entropy
//! (reliable), soft pseudo-label propagation (unreliable), and the
//! contrastive pair term. The teacher then absorbs the student by moving
//! average and the curriculum weights advance.
//!
//! Target labels, when present, feed the metrics columns and evaluations
//! only; the training path never reads them. Streaming mode makes a single
//! pass in dataset order and records each chunk's first-sight accuracy
//! from the same forward pass that trains on it, so every sample is
//! computed through the network exactly `views + 3` times: `views` teacher
//! scorings, one supervised student pass, two contrastive projections.

use std::path::Path;

use crate::data::{AugmentationPolicy, Dataset};
use crate::error::{Error, Result};
use crate::model::{Mode, ModelPair, Network, UpdateMask};
use crate::numkit::{save_checkpoint, NamedTensor, Schedule, Sgd, Tensor};
use crate::objective::{
    ce_balanced, nt_xent, propagation_loss, total_classification, CurriculumState,
};
use crate::select::{class_weights, compute_thresholds, partition, Partition};
use crate::teacher::{argmax, batch_stats, TeacherStats};

use super::config::RunConfig;
use super::eval::evaluate;
use super::metrics::{write_metrics_csv, MetricsRecord};

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    /// Target accuracy of the source model before any adaptation; `NaN`
    /// when the target carries no labels.
    pub zero_shot_acc: f64,
    /// Target accuracy of the adapted student (macro-averaged in the
    /// dense-map variant); `NaN` when the target carries no labels.
    pub final_acc: f64,
    /// Mean first-sight accuracy over the stream; `NaN` offline or when
    /// the target carries no labels.
    pub online_first_pass_acc: f64,
    pub steps_taken: u64,
    pub trained_batches: u64,
    pub records: Vec<MetricsRecord>,
    /// Network computations per dataset position; filled in streaming mode.
    pub touches: Vec<u64>,
}

pub(super) struct AdaptLoop {
    pub pair: ModelPair,
    pub policy: AugmentationPolicy,
    pub curriculum: CurriculumState,
    pub opt: Sgd,
    pub params: Vec<(String, Tensor)>,
    pub mask: Vec<bool>,
    pub iter: u64,
}

pub(super) struct BatchResult {
    pub record: MetricsRecord,
    /// First-sight accuracy of the supervised forward, `NaN` if unlabeled.
    pub first_pass_acc: f64,
}

fn augmented_rows(
    dataset: &Dataset,
    positions: &[usize],
    policy: &AugmentationPolicy,
    slot: u32,
    epoch: u32,
) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = positions
        .iter()
        .map(|&p| {
            let s = &dataset.samples[p];
            policy.augment(&s.features, s.index, slot, epoch)
        })
        .collect();
    Tensor::from_rows(&rows)
}

pub(super) fn label_match_fraction(
    dataset: &Dataset,
    positions: &[usize],
    subset: &[usize],
    stats: &[TeacherStats],
) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for &b in subset {
        if let Some(y) = dataset.samples[positions[b]].label {
            total += 1;
            if stats[b].pseudo_label == y {
                hits += 1;
            }
        }
    }
    if total == 0 {
        f64::NAN
    } else {
        hits as f64 / total as f64
    }
}

impl AdaptLoop {
    pub fn new(
        cfg: &RunConfig,
        source_state: &[NamedTensor],
        ema_decay: f64,
        mask: UpdateMask,
        total_steps: u64,
    ) -> Result<AdaptLoop> {
        let student = Network::from_state(source_state, true)?;
        let params = student.named_parameters();
        let mask = mask.flags(&params);
        let pair = ModelPair::new(student, ema_decay)?;
        let policy = AugmentationPolicy {
            transforms: vec![
                crate::data::Transform::GaussianNoise { sigma: cfg.aug_noise },
                crate::data::Transform::RandomScale {
                    lo: cfg.aug_scale_lo,
                    hi: cfg.aug_scale_hi,
                },
                crate::data::Transform::FeatureJitter { range: cfg.aug_jitter },
            ],
            count: cfg.views,
            seed: cfg.seed ^ 0x6175_676d,
        };
        Ok(AdaptLoop {
            pair,
            policy,
            curriculum: CurriculumState::new(cfg.alpha, cfg.beta),
            opt: Sgd::new(
                cfg.lr,
                cfg.momentum,
                cfg.weight_decay,
                Schedule::Cosine { total_steps },
            ),
            params,
            mask,
            iter: 0,
        })
    }

    /// One adaptation step on the given batch positions. Requires at least
    /// two samples (the supervised forward normalizes over the batch).
    pub fn run_batch(
        &mut self,
        cfg: &RunConfig,
        dataset: &Dataset,
        positions: &[usize],
        epoch: u32,
    ) -> Result<BatchResult> {
        let n = positions.len();
        if n < 2 {
            return Err(Error::BatchTooSmall {
                op: "run_batch",
                need: 2,
                got: n,
            });
        }
        let k = dataset.num_classes as usize;
        let stats = batch_stats(&self.pair.teacher, dataset, positions, &self.policy, epoch)?;
        let thresholds = compute_thresholds(&stats)?;
        let all: Vec<usize> = (0..n).collect();
        let split = if cfg.all_pseudo_baseline {
            Partition {
                reliable: all.clone(),
                unreliable: Vec::new(),
            }
        } else {
            partition(&stats, &thresholds, cfg.rescue_fraction)?
        };

        let x0 = augmented_rows(dataset, positions, &self.policy, 0, epoch)?;
        let probs = self.pair.student.predict(&x0, Mode::Train)?;

        let first_pass_acc = {
            let v = probs.values();
            let mut hits = 0usize;
            let mut total = 0usize;
            for (row, &p) in positions.iter().enumerate() {
                if let Some(y) = dataset.samples[p].label {
                    total += 1;
                    if argmax(&v[row * k..(row + 1) * k]) == y as usize {
                        hits += 1;
                    }
                }
            }
            if total == 0 {
                f64::NAN
            } else {
                hits as f64 / total as f64
            }
        };

        let mut record = MetricsRecord::blank(self.iter);
        record.tau_c = thresholds.tau_c;
        record.tau_u = thresholds.tau_u;
        record.sel_frac = split.selected_fraction();
        record.pl_acc = label_match_fraction(dataset, positions, &all, &stats);
        record.dr_pl_acc = label_match_fraction(dataset, positions, &split.reliable, &stats);

        let ce = if split.reliable.is_empty() {
            None
        } else {
            let labels: Vec<u32> = split.reliable.iter().map(|&b| stats[b].pseudo_label).collect();
            let weights = if cfg.all_pseudo_baseline {
                vec![1.0; k]
            } else {
                class_weights(&labels, dataset.num_classes)?
            };
            Some(ce_balanced(&probs.gather_rows(&split.reliable)?, &labels, &weights)?)
        };
        let prop = if split.unreliable.is_empty() || cfg.all_pseudo_baseline {
            None
        } else {
            let labels: Vec<u32> = split
                .unreliable
                .iter()
                .map(|&b| stats[b].pseudo_label)
                .collect();
            Some(propagation_loss(&probs.gather_rows(&split.unreliable)?, &labels)?)
        };
        let con = if cfg.all_pseudo_baseline {
            None
        } else {
            let xa = augmented_rows(dataset, positions, &self.policy, self.policy.count, epoch)?;
            let xb = augmented_rows(dataset, positions, &self.policy, self.policy.count + 1, epoch)?;
            let za = self.pair.student.project(&xa, Mode::Train)?;
            let zb = self.pair.student.project(&xb, Mode::Train)?;
            Some(nt_xent(&za, &zb, cfg.kappa)?)
        };

        let total = if cfg.all_pseudo_baseline {
            ce.clone().ok_or(Error::EmptyBatch("baseline cross-entropy"))?
        } else {
            self.curriculum.step(thresholds.tau_c, thresholds.tau_u)?;
            record.mu_r = self.curriculum.mu_r;
            record.mu_c = self.curriculum.mu_c;
            total_classification(ce.as_ref(), prop.as_ref(), con.as_ref(), &self.curriculum)?
        };

        record.l_ce = ce.as_ref().map_or(f64::NAN, Tensor::item);
        record.l_prop = prop.as_ref().map_or(f64::NAN, Tensor::item);
        record.l_con = con.as_ref().map_or(f64::NAN, Tensor::item);
        record.l_total = total.item();

        total.backward()?;
        self.opt.step_masked(&self.params, &self.mask)?;
        for (_, p) in &self.params {
            p.zero_grad();
        }
        self.pair.ema_update()?;
        self.iter += 1;

        Ok(BatchResult {
            record,
            first_pass_acc,
        })
    }
}

/// The baseline objective is cross-entropy only, which never reaches the
/// projection head; the full method's contrastive term does.
fn classification_mask(cfg: &RunConfig) -> UpdateMask {
    if cfg.all_pseudo_baseline {
        UpdateMask::Backbone
    } else {
        UpdateMask::All
    }
}

pub(super) fn shuffled_epoch_order(n: usize, seed: u64, epoch: u32) -> Vec<usize> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
        seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x6261_7463,
    );
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Batch position lists for one epoch; a trailing single sample joins the
/// previous batch so every batch can normalize.
pub(super) fn batches_of(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect();
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

pub(super) fn epoch_batch_count(n: usize, batch_size: usize) -> usize {
    batches_of(&(0..n).collect::<Vec<_>>(), batch_size).len()
}

pub(super) fn eval_or_nan(net: &Network, dataset: &Dataset, batch: usize, macro_avg: bool) -> f64 {
    match evaluate(net, dataset, batch) {
        Ok(e) => {
            if macro_avg {
                e.macro_avg
            } else {
                e.overall
            }
        }
        Err(_) => f64::NAN,
    }
}

/// Offline adaptation: `cfg.epochs` shuffled passes over the target. The
/// student is the adapted artifact saved at the end; the `acc` column is
/// refreshed on each epoch's closing row.
pub fn adapt(
    cfg: &RunConfig,
    source_state: &[NamedTensor],
    target: &Dataset,
    out_model: Option<&Path>,
    metrics_out: Option<&Path>,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if target.len() < 2 {
        return Err(Error::BatchTooSmall {
            op: "adapt",
            need: 2,
            got: target.len(),
        });
    }
    let batches_per_epoch = epoch_batch_count(target.len(), cfg.batch_size);
    let total_steps = cfg.epochs as u64 * batches_per_epoch as u64;
    let mask = classification_mask(cfg);
    let mut lp = AdaptLoop::new(cfg, source_state, cfg.ema_decay, mask, total_steps)?;

    let zero_shot_acc = eval_or_nan(&lp.pair.student, target, cfg.eval_batch, false);
    let mut records = Vec::with_capacity(total_steps as usize);
    let mut final_acc = f64::NAN;
    for epoch in 0..cfg.epochs {
        let order = shuffled_epoch_order(target.len(), cfg.seed, epoch as u32);
        for batch in batches_of(&order, cfg.batch_size) {
            let out = lp.run_batch(cfg, target, &batch, epoch as u32)?;
            records.push(out.record);
        }
        final_acc = eval_or_nan(&lp.pair.student, target, cfg.eval_batch, false);
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

/// Streaming adaptation: one pass in dataset order. Each chunk is scored
/// first-sight by the same supervised forward that trains on it, then the
/// model updates once. A trailing chunk too small to train is scored with
/// a plain running-stat forward and skipped by the optimizer.
pub fn adapt_online(
    cfg: &RunConfig,
    source_state: &[NamedTensor],
    target: &Dataset,
    out_model: Option<&Path>,
    metrics_out: Option<&Path>,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if target.is_empty() {
        return Err(Error::EmptyBatch("adapt_online"));
    }
    let n = target.len();
    let chunks: Vec<Vec<usize>> = (0..n)
        .collect::<Vec<_>>()
        .chunks(cfg.batch_size)
        .map(|c| c.to_vec())
        .collect();
    let trainable = chunks.iter().filter(|c| c.len() >= 2).count() as u64;
    let mut lp = AdaptLoop::new(cfg, source_state, cfg.ema_decay, classification_mask(cfg), trainable)?;

    let zero_shot_acc = eval_or_nan(&lp.pair.student, target, cfg.eval_batch, false);
    let mut touches = vec![0u64; n];
    let mut records = Vec::with_capacity(chunks.len());
    let mut fp_hits = 0.0f64;
    let mut fp_total = 0usize;
    for chunk in &chunks {
        if chunk.len() >= 2 {
            let out = lp.run_batch(cfg, target, chunk, 0)?;
            let mut record = out.record;
            record.acc = out.first_pass_acc;
            if !out.first_pass_acc.is_nan() {
                fp_hits += out.first_pass_acc * chunk.len() as f64;
                fp_total += chunk.len();
            }
            records.push(record);
            for &p in chunk {
                touches[p] += lp.policy.count as u64 + 3;
            }
        } else {
            let x = target.features_matrix(chunk)?;
            let probs = lp.pair.student.predict_frozen(&x)?;
            let k = probs.shape()[1];
            let v = probs.values();
            let mut record = MetricsRecord::blank(lp.iter);
            lp.iter += 1;
            if let Some(y) = target.samples[chunk[0]].label {
                let hit = argmax(&v[0..k]) == y as usize;
                record.acc = if hit { 1.0 } else { 0.0 };
                fp_hits += record.acc;
                fp_total += 1;
            }
            records.push(record);
            touches[chunk[0]] += 1;
        }
    }

    let final_acc = eval_or_nan(&lp.pair.student, target, cfg.eval_batch, false);
    if let Some(path) = out_model {
        save_checkpoint(path, &lp.pair.student.state_tensors())?;
    }
    if let Some(path) = metrics_out {
        write_metrics_csv(path, &records)?;
    }
    Ok(AdaptOutcome {
        zero_shot_acc,
        final_acc,
        online_first_pass_acc: if fp_total == 0 {
            f64::NAN
        } else {
            fp_hits / fp_total as f64
        },
        steps_taken: lp.opt.steps_taken(),
        trained_batches: trainable,
        records,
        touches,
    })
}
