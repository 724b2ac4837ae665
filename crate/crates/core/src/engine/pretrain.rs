//! Supervised source training with best-validation checkpointing.

use std::path::Path;

use crate::data::{split_source, Dataset};
use crate::error::{Error, Result};
use crate::model::{Mode, Network, UpdateMask};
use crate::numkit::{save_checkpoint, NamedTensor, Schedule, Sgd};
use crate::objective::ce_balanced;

use super::config::RunConfig;
use super::eval::evaluate;
use super::metrics::{write_metrics_csv, MetricsRecord};

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub final_val_acc: f64,
    pub records: Vec<MetricsRecord>,
    /// State of the best-validation model, the one written to disk.
    pub best_state: Vec<NamedTensor>,
}

/// Trains a fresh network on the labeled source domain and keeps the epoch
/// with the best held-out accuracy (latest epoch wins ties, so a saturated
/// run keeps the most-regularized weights). The source is split stratified
/// by `cfg.val_ratio`.
pub fn pretrain(
    cfg: &RunConfig,
    source: &Dataset,
    out_model: Option<&Path>,
    metrics_out: Option<&Path>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if source.num_classes != cfg.num_classes || source.input_dim != cfg.input_dim {
        return Err(Error::Config(format!(
            "dataset is {} classes x {} features, config says {} x {}",
            source.num_classes, source.input_dim, cfg.num_classes, cfg.input_dim
        )));
    }
    let (train, val) = split_source(source, 1.0 - cfg.val_ratio, cfg.seed)?;
    let mut net = Network::new(cfg.model_config(), cfg.seed ^ 0x6d6f_64, true)?;
    let params = net.named_parameters();
    // supervised loss never reaches the projection head
    let mask = UpdateMask::Backbone.flags(&params);

    let batches_per_epoch = super::adapt::epoch_batch_count(train.len(), cfg.batch_size);
    let total_steps = cfg.pretrain_epochs as u64 * batches_per_epoch as u64;
    let mut opt = Sgd::new(
        cfg.lr,
        cfg.momentum,
        cfg.weight_decay,
        Schedule::Cosine { total_steps },
    );

    let uniform = vec![1.0; cfg.num_classes as usize];
    let mut records = Vec::new();
    let mut best_val_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_state = net.state_tensors();
    let mut iter = 0u64;
    let mut final_val_acc = f64::NAN;
    for epoch in 0..cfg.pretrain_epochs {
        let order = super::adapt::shuffled_epoch_order(train.len(), cfg.seed, epoch as u32);
        for batch in super::adapt::batches_of(&order, cfg.batch_size) {
            let x = train.features_matrix(&batch)?;
            let labels: Vec<u32> = batch
                .iter()
                .map(|&p| train.samples[p].label.expect("split keeps labels"))
                .collect();
            let probs = net.predict(&x, Mode::Train)?;
            let loss = ce_balanced(&probs, &labels, &uniform)?;
            let mut record = MetricsRecord::blank(iter);
            record.l_ce = loss.item();
            record.l_total = record.l_ce;
            loss.backward()?;
            opt.step_masked(&params, &mask)?;
            for (_, p) in &params {
                p.zero_grad();
            }
            records.push(record);
            iter += 1;
        }
        let val_acc = evaluate(&net, &val, cfg.eval_batch)?.overall;
        final_val_acc = val_acc;
        if let Some(last) = records.last_mut() {
            last.acc = val_acc;
        }
        if val_acc >= best_val_acc {
            best_val_acc = val_acc;
            best_epoch = epoch;
            best_state = net.state_tensors();
        }
    }

    if let Some(path) = out_model {
        save_checkpoint(path, &best_state)?;
    }
    if let Some(path) = metrics_out {
        write_metrics_csv(path, &records)?;
    }
    Ok(PretrainOutcome {
        best_val_acc,
        best_epoch,
        final_val_acc,
        records,
        best_state,
    })
}
