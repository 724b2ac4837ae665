//! Pseudo-label statistics from the frozen teacher.
//!
//! Each sample is pushed through the teacher once per augmented view. The
//! per-view softmax outputs are averaged into the aggregate distribution;
//! the pseudo-label is its argmax (ties resolve to the lowest class index).
//! Confidence is the aggregate's top probability. Uncertainty is the
//! population standard deviation of the per-view top probabilities, so it
//! measures how much the views disagree about their favorite class's
//! strength, not which class it is. The margin (`doc`) is the gap between
//! the aggregate's two largest probabilities.

use crate::data::{AugmentationPolicy, Dataset};
use crate::error::{Error, Result};
use crate::model::Network;

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherStats {
    /// Aggregate class distribution, mean of the per-view softmax outputs.
    pub probs: Vec<f64>,
    pub pseudo_label: u32,
    /// Top probability of the aggregate distribution.
    pub confidence: f64,
    /// Population std of per-view top probabilities.
    pub uncertainty: f64,
    /// Aggregate top-1 minus top-2 probability.
    pub doc: f64,
}

/// Index of the largest value, lowest index on exact ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn top_two(values: &[f64]) -> (f64, f64) {
    let top = argmax(values);
    let mut second = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if i != top && v > second {
            second = v;
        }
    }
    (values[top], second)
}

/// Aggregates per-view class distributions into per-sample statistics.
/// `views[l][i]` is sample `i`'s distribution under view `l`; every view
/// must cover the same samples with the same class count.
pub fn stats_from_views(views: &[Vec<Vec<f64>>]) -> Result<Vec<TeacherStats>> {
    let l = views.len();
    if l == 0 {
        return Err(Error::EmptyBatch("stats_from_views: no views"));
    }
    let n = views[0].len();
    if n == 0 {
        return Err(Error::EmptyBatch("stats_from_views: empty batch"));
    }
    let k = views[0][0].len();
    if k < 2 {
        return Err(Error::ShapeMismatch {
            op: "stats_from_views",
            detail: format!("need at least 2 classes, got {k}"),
        });
    }
    for (vi, view) in views.iter().enumerate() {
        if view.len() != n || view.iter().any(|p| p.len() != k) {
            return Err(Error::ShapeMismatch {
                op: "stats_from_views",
                detail: format!("view {vi} disagrees on batch shape"),
            });
        }
    }

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut mean = vec![0.0; k];
        let mut view_tops = Vec::with_capacity(l);
        for view in views {
            let p = &view[i];
            for (m, &v) in mean.iter_mut().zip(p) {
                *m += v;
            }
            view_tops.push(p[argmax(p)]);
        }
        for m in mean.iter_mut() {
            *m /= l as f64;
        }
        let top_mean = view_tops.iter().sum::<f64>() / l as f64;
        let variance = view_tops
            .iter()
            .map(|c| (c - top_mean) * (c - top_mean))
            .sum::<f64>()
            / l as f64;
        let (top1, top2) = top_two(&mean);
        let pseudo_label = argmax(&mean) as u32;
        out.push(TeacherStats {
            probs: mean,
            pseudo_label,
            confidence: top1,
            uncertainty: variance.sqrt(),
            doc: top1 - top2,
        });
    }
    Ok(out)
}

/// Runs the teacher over `policy.count` augmented views of the given batch
/// positions and aggregates with [`stats_from_views`]. The teacher runs in
/// eval mode (running stats, no graph), so results are independent of batch
/// composition and order.
pub fn batch_stats(
    teacher: &Network,
    dataset: &Dataset,
    positions: &[usize],
    policy: &AugmentationPolicy,
    epoch: u32,
) -> Result<Vec<TeacherStats>> {
    if positions.is_empty() {
        return Err(Error::EmptyBatch("batch_stats"));
    }
    if policy.count == 0 {
        return Err(Error::Config("augmentation view count must be at least 1".into()));
    }
    let mut views = Vec::with_capacity(policy.count as usize);
    for slot in 0..policy.count {
        let rows: Vec<Vec<f64>> = positions
            .iter()
            .map(|&p| {
                let s = &dataset.samples[p];
                policy.augment(&s.features, s.index, slot, epoch)
            })
            .collect();
        let x = crate::numkit::Tensor::from_rows(&rows)?;
        let probs = teacher.predict_frozen(&x)?;
        let k = probs.shape()[1];
        let flat = probs.values();
        views.push(
            (0..positions.len())
                .map(|i| flat[i * k..(i + 1) * k].to_vec())
                .collect(),
        );
    }
    stats_from_views(&views)
}
