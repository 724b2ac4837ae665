//! Clean evaluation on labeled data: running-stat forward passes over raw
//! features, no augmentation, no graph.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::teacher::argmax;

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Fraction of labeled samples predicted correctly.
    pub overall: f64,
    /// Per-class accuracy; `NaN` for classes with no labeled members.
    pub per_class: Vec<f64>,
    /// Mean of per-class accuracies over classes that have members.
    pub macro_avg: f64,
    /// Number of labeled samples scored.
    pub scored: usize,
}

pub fn evaluate(net: &Network, dataset: &Dataset, batch: usize) -> Result<Evaluation> {
    let labeled: Vec<usize> = dataset
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label.is_some())
        .map(|(i, _)| i)
        .collect();
    if labeled.is_empty() {
        return Err(Error::EmptyBatch("evaluate: no labeled samples"));
    }
    let k = dataset.num_classes as usize;
    let mut class_total = vec![0usize; k];
    let mut class_hit = vec![0usize; k];
    for chunk in labeled.chunks(batch.max(1)) {
        let x = dataset.features_matrix(chunk)?;
        let probs = net.predict_frozen(&x)?;
        let values = probs.values();
        let width = probs.shape()[1];
        for (row, &pos) in chunk.iter().enumerate() {
            let y = dataset.samples[pos].label.unwrap() as usize;
            let pred = argmax(&values[row * width..(row + 1) * width]);
            class_total[y] += 1;
            if pred == y {
                class_hit[y] += 1;
            }
        }
    }
    let per_class: Vec<f64> = class_total
        .iter()
        .zip(&class_hit)
        .map(|(&t, &h)| if t == 0 { f64::NAN } else { h as f64 / t as f64 })
        .collect();
    let present: Vec<f64> = per_class.iter().copied().filter(|v| !v.is_nan()).collect();
    Ok(Evaluation {
        overall: class_hit.iter().sum::<usize>() as f64 / labeled.len() as f64,
        macro_avg: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
        scored: labeled.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec};
    use crate::model::ModelConfig;

    fn small_setup() -> (Network, Dataset) {
        let spec = DatasetSpec {
            source_count: 120,
            target_count: 120,
            ..Default::default()
        };
        let (src, _) = generate(&spec).unwrap();
        let net = Network::new(ModelConfig::default(), 7, false).unwrap();
        (net, src)
    }

    #[test]
    fn relabeling_to_the_models_own_predictions_scores_one() {
        let (net, mut ds) = small_setup();
        let x = ds.features_matrix(&(0..ds.len()).collect::<Vec<_>>()).unwrap();
        let probs = net.predict_frozen(&x).unwrap();
        let v = probs.values();
        let k = probs.shape()[1];
        for (i, s) in ds.samples.iter_mut().enumerate() {
            s.label = Some(argmax(&v[i * k..(i + 1) * k]) as u32);
        }
        let e = evaluate(&net, &ds, 32).unwrap();
        assert_eq!(e.overall, 1.0);
        assert_eq!(e.macro_avg, 1.0);
        assert_eq!(e.scored, 120);
    }

    #[test]
    fn chunking_does_not_change_the_score() {
        let (net, ds) = small_setup();
        let a = evaluate(&net, &ds, 7).unwrap();
        let b = evaluate(&net, &ds, 1000).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unlabeled_dataset_is_an_error_and_partial_labels_score_partially() {
        let (net, ds) = small_setup();
        let stripped = ds.without_labels();
        assert!(evaluate(&net, &stripped, 32).is_err());
        let mut partial = ds.clone();
        for s in partial.samples.iter_mut().skip(40) {
            s.label = None;
        }
        let e = evaluate(&net, &partial, 32).unwrap();
        assert_eq!(e.scored, 40);
    }

    #[test]
    fn random_labels_score_near_chance() {
        use rand::{Rng, SeedableRng};
        let (net, mut ds) = small_setup();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        for s in ds.samples.iter_mut() {
            s.label = Some(rng.gen_range(0..4));
        }
        let e = evaluate(&net, &ds, 64).unwrap();
        // binomial(120, 1/4): three sigma is about 0.12
        assert!((e.overall - 0.25).abs() < 0.15, "overall {}", e.overall);
    }
}
