//! Reliability-based batch partitioning.
//!
//! A sample is reliable when its aggregate confidence is at least the batch
//! mean confidence and its view disagreement is at most the batch mean
//! disagreement; both comparisons are non-strict, so a sample sitting
//! exactly on a threshold is selected. Because the thresholds are batch
//! statistics rather than fixed constants, the criterion adapts as the
//! teacher sharpens.
//!
//! Rescue pass: a pseudo-class whose members all land in the unreliable set
//! would receive no supervised signal and could never recover. Each such
//! class promotes its highest-margin member. An optional second pass
//! promotes the overall top `rescue_fraction` of the remaining unreliable
//! samples by margin.
//!
//! The dense-map variant thresholds per class instead: pixels pass when
//! their confidence reaches their pseudo-class's percentile cutoff.

use crate::error::{Error, Result};
use crate::teacher::TeacherStats;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub tau_c: f64,
    pub tau_u: f64,
}

/// Batch means of confidence and uncertainty.
pub fn compute_thresholds(stats: &[TeacherStats]) -> Result<Thresholds> {
    if stats.is_empty() {
        return Err(Error::EmptyBatch("compute_thresholds"));
    }
    let n = stats.len() as f64;
    Ok(Thresholds {
        tau_c: stats.iter().map(|s| s.confidence).sum::<f64>() / n,
        tau_u: stats.iter().map(|s| s.uncertainty).sum::<f64>() / n,
    })
}

/// Batch positions split into the reliable and unreliable sets. Both sides
/// are sorted ascending; together they cover every position exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub reliable: Vec<usize>,
    pub unreliable: Vec<usize>,
}

impl Partition {
    pub fn selected_fraction(&self) -> f64 {
        let total = self.reliable.len() + self.unreliable.len();
        if total == 0 {
            return 0.0;
        }
        self.reliable.len() as f64 / total as f64
    }
}

/// Positions of the `want` highest-margin entries of `pool`, ties resolved
/// toward lower batch positions. `pool` is consumed in the returned order.
fn take_top_by_margin(pool: &mut Vec<usize>, stats: &[TeacherStats], want: usize) -> Vec<usize> {
    let mut order: Vec<usize> = pool.clone();
    order.sort_by(|&a, &b| {
        stats[b]
            .doc
            .partial_cmp(&stats[a].doc)
            .unwrap()
            .then(a.cmp(&b))
    });
    let chosen: Vec<usize> = order.into_iter().take(want).collect();
    pool.retain(|p| !chosen.contains(p));
    chosen
}

pub fn partition(
    stats: &[TeacherStats],
    thresholds: &Thresholds,
    rescue_fraction: f64,
) -> Result<Partition> {
    if stats.is_empty() {
        return Err(Error::EmptyBatch("partition"));
    }
    if !(0.0..=1.0).contains(&rescue_fraction) {
        return Err(Error::Config(format!(
            "rescue_fraction must lie in [0, 1], got {rescue_fraction}"
        )));
    }
    let mut reliable = Vec::new();
    let mut unreliable = Vec::new();
    for (i, s) in stats.iter().enumerate() {
        if s.confidence >= thresholds.tau_c && s.uncertainty <= thresholds.tau_u {
            reliable.push(i);
        } else {
            unreliable.push(i);
        }
    }

    // promote the best-margin member of every pseudo-class that ended up
    // with no reliable representative
    let classes: std::collections::BTreeSet<u32> =
        stats.iter().map(|s| s.pseudo_label).collect();
    for class in classes {
        if reliable.iter().any(|&p| stats[p].pseudo_label == class) {
            continue;
        }
        let mut members: Vec<usize> = unreliable
            .iter()
            .copied()
            .filter(|&p| stats[p].pseudo_label == class)
            .collect();
        let chosen = take_top_by_margin(&mut members, stats, 1);
        if let Some(&p) = chosen.first() {
            unreliable.retain(|&q| q != p);
            reliable.push(p);
        }
    }

    // overall rescue quota, measured against what is left unreliable now
    let quota = (rescue_fraction * unreliable.len() as f64).ceil() as usize;
    if quota > 0 {
        let promoted = take_top_by_margin(&mut unreliable, stats, quota);
        reliable.extend(promoted);
    }

    reliable.sort_unstable();
    unreliable.sort_unstable();
    Ok(Partition {
        reliable,
        unreliable,
    })
}

/// Inverse-frequency class weights over a labeled set: with `K'` distinct
/// labels present and `n_k` members of class `k`, class `k` weighs
/// `len / (K' * n_k)`. Absent classes get weight zero. The weighted member
/// count always sums back to `len`.
pub fn class_weights(labels: &[u32], num_classes: u32) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch("class_weights"));
    }
    let k = num_classes as usize;
    let mut counts = vec![0usize; k];
    for &y in labels {
        if y as usize >= k {
            return Err(Error::ShapeMismatch {
                op: "class_weights",
                detail: format!("label {y} out of range for {k} classes"),
            });
        }
        counts[y as usize] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    let total = labels.len() as f64;
    Ok(counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                total / (present as f64 * c as f64)
            }
        })
        .collect())
}

/// Per-class confidence cutoffs at the given percentile (nearest-rank with
/// ceiling). A class with no pseudo-labeled members gets `+inf`, so nothing
/// of that class can pass until the teacher produces some.
pub fn seg_thresholds(stats: &[TeacherStats], num_classes: u32, percentile: f64) -> Result<Vec<f64>> {
    if stats.is_empty() {
        return Err(Error::EmptyBatch("seg_thresholds"));
    }
    if !(0.0 < percentile && percentile <= 100.0) {
        return Err(Error::Config(format!(
            "percentile must lie in (0, 100], got {percentile}"
        )));
    }
    let k = num_classes as usize;
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); k];
    for s in stats {
        let y = s.pseudo_label as usize;
        if y >= k {
            return Err(Error::ShapeMismatch {
                op: "seg_thresholds",
                detail: format!("pseudo-label {y} out of range for {k} classes"),
            });
        }
        per_class[y].push(s.confidence);
    }
    Ok(per_class
        .into_iter()
        .map(|mut confs| {
            if confs.is_empty() {
                return f64::INFINITY;
            }
            confs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let rank = ((percentile / 100.0) * confs.len() as f64).ceil() as usize;
            confs[rank.max(1) - 1]
        })
        .collect())
}

/// Pixel-level partition: reliable iff confidence reaches the cutoff of the
/// pixel's own pseudo-class (non-strict).
pub fn seg_partition(stats: &[TeacherStats], thresholds: &[f64]) -> Result<Partition> {
    if stats.is_empty() {
        return Err(Error::EmptyBatch("seg_partition"));
    }
    let mut reliable = Vec::new();
    let mut unreliable = Vec::new();
    for (i, s) in stats.iter().enumerate() {
        let y = s.pseudo_label as usize;
        if y >= thresholds.len() {
            return Err(Error::ShapeMismatch {
                op: "seg_partition",
                detail: format!("pseudo-label {y} outside threshold table of {}", thresholds.len()),
            });
        }
        if s.confidence >= thresholds[y] {
            reliable.push(i);
        } else {
            unreliable.push(i);
        }
    }
    Ok(Partition {
        reliable,
        unreliable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ts(confidence: f64, uncertainty: f64, pseudo_label: u32, doc: f64) -> TeacherStats {
        TeacherStats {
            probs: vec![confidence, 1.0 - confidence],
            pseudo_label,
            confidence,
            uncertainty,
            doc,
        }
    }

    #[test]
    fn thresholds_are_batch_means() {
        let stats = vec![ts(0.9, 0.05, 0, 0.8), ts(0.5, 0.15, 1, 0.1)];
        let t = compute_thresholds(&stats).unwrap();
        assert!((t.tau_c - 0.7).abs() < 1e-15);
        assert!((t.tau_u - 0.1).abs() < 1e-15);
    }

    #[test]
    fn boundary_samples_are_selected() {
        // both samples share the same confidence and uncertainty, so each
        // sits exactly on both thresholds and must count as reliable
        let stats = vec![ts(0.6, 0.1, 0, 0.2), ts(0.6, 0.1, 1, 0.2)];
        let t = compute_thresholds(&stats).unwrap();
        let p = partition(&stats, &t, 0.0).unwrap();
        assert_eq!(p.reliable, vec![0, 1]);
        assert!(p.unreliable.is_empty());
    }

    #[test]
    fn low_confidence_or_high_spread_lands_unreliable() {
        let stats = vec![
            ts(0.95, 0.02, 0, 0.9),
            ts(0.40, 0.02, 0, 0.1),
            ts(0.95, 0.30, 0, 0.9),
        ];
        let t = compute_thresholds(&stats).unwrap();
        let p = partition(&stats, &t, 0.0).unwrap();
        assert_eq!(p.reliable, vec![0]);
        assert_eq!(p.unreliable, vec![1, 2]);
    }

    #[test]
    fn class_with_no_reliable_member_promotes_its_best_margin() {
        let stats = vec![
            ts(0.95, 0.02, 0, 0.9),
            ts(0.30, 0.40, 1, 0.05),
            ts(0.35, 0.40, 1, 0.20),
            ts(0.32, 0.40, 1, 0.20),
        ];
        let t = compute_thresholds(&stats).unwrap();
        let p = partition(&stats, &t, 0.0).unwrap();
        // class 1's best margin is shared by positions 2 and 3; the lower
        // position wins the tie
        assert!(p.reliable.contains(&0));
        assert!(p.reliable.contains(&2));
        assert!(!p.reliable.contains(&3));
        assert_eq!(p.unreliable, vec![1, 3]);
    }

    #[test]
    fn overall_rescue_promotes_by_margin_after_class_rescue() {
        let stats = vec![
            ts(0.95, 0.02, 0, 0.9),
            ts(0.10, 0.40, 0, 0.01),
            ts(0.20, 0.40, 0, 0.50),
            ts(0.15, 0.40, 0, 0.30),
            ts(0.12, 0.40, 0, 0.20),
        ];
        let t = compute_thresholds(&stats).unwrap();
        // four unreliable, quota ceil(0.5 * 4) = 2: positions 2 and 3
        let p = partition(&stats, &t, 0.5).unwrap();
        assert_eq!(p.reliable, vec![0, 2, 3]);
        assert_eq!(p.unreliable, vec![1, 4]);
    }

    #[test]
    fn zero_rescue_fraction_promotes_nothing_extra() {
        let stats = vec![ts(0.9, 0.0, 0, 0.8), ts(0.1, 0.5, 0, 0.0)];
        let t = compute_thresholds(&stats).unwrap();
        let a = partition(&stats, &t, 0.0).unwrap();
        assert_eq!(a.reliable, vec![0]);
    }

    #[test]
    fn weights_match_inverse_frequency() {
        let w = class_weights(&[0, 0, 1], 3).unwrap();
        assert!((w[0] - 0.75).abs() < 1e-15);
        assert!((w[1] - 1.5).abs() < 1e-15);
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn weighted_member_count_recovers_set_size() {
        let labels = [0u32, 1, 1, 2, 2, 2, 0, 1];
        let w = class_weights(&labels, 4).unwrap();
        let total: f64 = labels.iter().map(|&y| w[y as usize]).sum();
        assert!((total - labels.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn percentile_cutoff_uses_nearest_rank() {
        let stats: Vec<TeacherStats> = (1..=10)
            .map(|i| ts(i as f64 / 10.0, 0.0, 0, 0.1))
            .collect();
        let t = seg_thresholds(&stats, 2, 55.0).unwrap();
        assert!((t[0] - 0.6).abs() < 1e-15);
        assert_eq!(t[1], f64::INFINITY, "absent class stays unreachable");
        let p = seg_partition(&stats, &t).unwrap();
        assert_eq!(p.reliable, vec![5, 6, 7, 8, 9]);
    }

    #[test]
    fn percentile_100_keeps_only_the_top() {
        let stats: Vec<TeacherStats> = (1..=4).map(|i| ts(i as f64 / 5.0, 0.0, 0, 0.1)).collect();
        let t = seg_thresholds(&stats, 1, 100.0).unwrap();
        assert!((t[0] - 0.8).abs() < 1e-15);
        let p = seg_partition(&stats, &t).unwrap();
        assert_eq!(p.reliable, vec![3]);
    }

    #[test]
    fn seg_selection_fraction_is_bounded() {
        // distinct confidences: selected fraction per class can exceed the
        // nominal (100 - P)% by at most one pixel's worth
        let n = 37;
        let stats: Vec<TeacherStats> = (0..n)
            .map(|i| ts(0.3 + 0.6 * i as f64 / n as f64, 0.0, 0, 0.1))
            .collect();
        let pct = 55.0;
        let t = seg_thresholds(&stats, 1, pct).unwrap();
        let p = seg_partition(&stats, &t).unwrap();
        let frac = p.reliable.len() as f64 / n as f64;
        assert!(frac <= (100.0 - pct) / 100.0 + 1.0 / n as f64 + 1e-12, "{frac}");
        assert!(!p.reliable.is_empty());
    }

    proptest! {
        #[test]
        fn partition_is_exhaustive_and_disjoint(
            confs in proptest::collection::vec(0.01f64..1.0, 1..40),
            uncs_seed in proptest::collection::vec(0.0f64..0.5, 1..40),
            rescue in 0.0f64..1.0,
        ) {
            let n = confs.len().min(uncs_seed.len());
            let stats: Vec<TeacherStats> = (0..n)
                .map(|i| ts(confs[i], uncs_seed[i], (i % 3) as u32, confs[i] * 0.5))
                .collect();
            let t = compute_thresholds(&stats).unwrap();
            let p = partition(&stats, &t, rescue).unwrap();
            let mut all: Vec<usize> = p.reliable.iter().chain(&p.unreliable).copied().collect();
            all.sort_unstable();
            let expect: Vec<usize> = (0..n).collect();
            prop_assert_eq!(all, expect);
        }

        #[test]
        fn every_present_class_keeps_a_reliable_member(
            confs in proptest::collection::vec(0.01f64..1.0, 2..40),
        ) {
            let stats: Vec<TeacherStats> = confs
                .iter()
                .enumerate()
                .map(|(i, &c)| ts(c, 1.0 - c, (i % 4) as u32, c * c))
                .collect();
            let t = compute_thresholds(&stats).unwrap();
            let p = partition(&stats, &t, 0.0).unwrap();
            for class in stats.iter().map(|s| s.pseudo_label) {
                prop_assert!(
                    p.reliable.iter().any(|&q| stats[q].pseudo_label == class),
                    "class {} lost all members", class
                );
            }
        }

        #[test]
        fn seg_partition_is_exhaustive_and_disjoint(
            confs in proptest::collection::vec(0.01f64..1.0, 1..60),
            pct in 1.0f64..100.0,
        ) {
            let stats: Vec<TeacherStats> = confs
                .iter()
                .enumerate()
                .map(|(i, &c)| ts(c, 0.0, (i % 2) as u32, 0.1))
                .collect();
            let t = seg_thresholds(&stats, 2, pct).unwrap();
            let p = seg_partition(&stats, &t).unwrap();
            let mut all: Vec<usize> = p.reliable.iter().chain(&p.unreliable).copied().collect();
            all.sort_unstable();
            let expect: Vec<usize> = (0..stats.len()).collect();
            prop_assert_eq!(all, expect);
            // nearest-rank always selects at least one member per present class
            for class in 0..2u32 {
                let members = stats.iter().filter(|s| s.pseudo_label == class).count();
                if members > 0 {
                    prop_assert!(p.reliable.iter().any(|&q| stats[q].pseudo_label == class));
                }
            }
        }
    }
}
