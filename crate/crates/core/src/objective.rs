//! Adaptation losses and their scheduled mixing.
//!
//! The reliable set trains with class-balanced cross-entropy on its
//! pseudo-labels. The unreliable set gets a soft quadratic pull toward its
//! pseudo-label one-hots, which tolerates label noise far better than CE.
//! A contrastive term keeps the embedding from collapsing while the split
//! is still coarse. Mixing weights follow a curriculum: the cross-entropy
//! share starts at 1 and decays at a rate tied to the uncertainty-to-
//! confidence ratio, handing weight over to the propagation term as the
//! teacher stabilizes; the contrastive and entropy weights decay on fixed
//! geometric schedules.

use crate::error::{Error, Result};
use crate::numkit::Tensor;

/// One-hot rows as a constant tensor, `[labels.len(), num_classes]`.
fn one_hot(labels: &[u32], num_classes: usize) -> Result<Tensor> {
    let mut values = vec![0.0; labels.len() * num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y as usize >= num_classes {
            return Err(Error::ShapeMismatch {
                op: "one_hot",
                detail: format!("label {y} out of range for {num_classes} classes"),
            });
        }
        values[i * num_classes + y as usize] = 1.0;
    }
    Tensor::new(vec![labels.len(), num_classes], values)
}

/// Class-balanced cross-entropy: mean over rows of
/// `weight[label] * -log p[label]`. `probs` is `[n, K]` of probabilities
/// (typically a softmax node, so gradients reach the logits through it).
pub fn ce_balanced(probs: &Tensor, labels: &[u32], weights: &[f64]) -> Result<Tensor> {
    let shape = probs.shape();
    if shape.len() != 2 || shape[0] != labels.len() || shape[1] != weights.len() {
        return Err(Error::ShapeMismatch {
            op: "ce_balanced",
            detail: format!(
                "probs {shape:?} vs {} labels and {} weights",
                labels.len(),
                weights.len()
            ),
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyBatch("ce_balanced"));
    }
    let k = shape[1];
    let mut picked = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        if y as usize >= k {
            return Err(Error::ShapeMismatch {
                op: "ce_balanced",
                detail: format!("label {y} out of range for {k} classes"),
            });
        }
        picked[i * k + y as usize] = weights[y as usize];
    }
    let weight_mask = Tensor::new(vec![labels.len(), k], picked)?;
    probs
        .log()?
        .mul(&weight_mask)?
        .sum()?
        .scale(-1.0 / labels.len() as f64)
}

/// Soft pull of each row toward its pseudo-label one-hot:
/// `(1 / 2n) * sum_i ||p_i - onehot(y_i)||^2`.
pub fn propagation_loss(probs: &Tensor, pseudo_labels: &[u32]) -> Result<Tensor> {
    let shape = probs.shape();
    if shape.len() != 2 || shape[0] != pseudo_labels.len() {
        return Err(Error::ShapeMismatch {
            op: "propagation_loss",
            detail: format!("probs {shape:?} vs {} pseudo-labels", pseudo_labels.len()),
        });
    }
    if pseudo_labels.is_empty() {
        return Err(Error::EmptyBatch("propagation_loss"));
    }
    let targets = one_hot(pseudo_labels, shape[1])?;
    probs
        .sub(&targets)?
        .square()?
        .sum()?
        .scale(1.0 / (2.0 * pseudo_labels.len() as f64))
}

/// Normalized-temperature cross-entropy over two aligned batches of
/// embeddings. Rows are unit-normalized, interleaved so views of sample `b`
/// sit at rows `2b` and `2b+1`, and compared by cosine similarity at
/// temperature `kappa`. Each row treats its partner as the positive and
/// every other row as a negative; the loss averages over all `2B` anchors.
///
/// Similarities are shifted by `-1/kappa` before exponentiation (the shift
/// cancels in the ratio), so the largest exponent is 0 and nothing
/// overflows regardless of temperature.
pub fn nt_xent(za: &Tensor, zb: &Tensor, kappa: f64) -> Result<Tensor> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::Config(format!(
            "contrastive temperature must be positive and finite, got {kappa}"
        )));
    }
    let (sa, sb) = (za.shape(), zb.shape());
    if sa.len() != 2 || sa != sb {
        return Err(Error::ShapeMismatch {
            op: "nt_xent",
            detail: format!("embedding batches disagree: {sa:?} vs {sb:?}"),
        });
    }
    let b = sa[0];
    if b < 2 {
        return Err(Error::BatchTooSmall {
            op: "nt_xent",
            need: 2,
            got: b,
        });
    }
    let n = 2 * b;
    let q = Tensor::interleave_rows(&za.l2_normalize_rows()?, &zb.l2_normalize_rows()?)?;
    let sims = q.matmul(&q.transpose()?)?;
    let shifted = sims.scale(1.0 / kappa)?.add(&Tensor::new(
        vec![n, n],
        vec![-1.0 / kappa; n * n],
    )?)?;

    let mut off_diag = vec![1.0; n * n];
    let mut pair = vec![0.0; n * n];
    for i in 0..n {
        off_diag[i * n + i] = 0.0;
        let partner = i ^ 1;
        pair[i * n + partner] = 1.0;
    }
    let negatives = shifted
        .exp()?
        .mul(&Tensor::new(vec![n, n], off_diag)?)?
        .sum_axis(1)?
        .log()?
        .sum()?;
    let positives = shifted.mul(&Tensor::new(vec![n, n], pair)?)?.sum()?;
    negatives.sub(&positives)?.scale(1.0 / n as f64)
}

/// Mean per-row Shannon entropy of a `[rows, K]` probability tensor.
/// Minimizing it sharpens predictions without any labels.
pub fn entropy_loss(probs: &Tensor) -> Result<Tensor> {
    let shape = probs.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "entropy_loss",
            detail: format!("need rank 2 probabilities, got {shape:?}"),
        });
    }
    probs
        .mul(&probs.log()?)?
        .sum()?
        .scale(-1.0 / shape[0] as f64)
}

/// Mixing weights evolved once per optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumState {
    /// Cross-entropy share; the propagation term gets `1 - mu_r`.
    pub mu_r: f64,
    /// Contrastive weight.
    pub mu_c: f64,
    /// Entropy weight (dense-map variant).
    pub mu_e: f64,
    pub alpha: f64,
    pub beta: f64,
    pub steps: u64,
    /// Uncertainty-to-confidence ratio from the latest step.
    pub last_ratio: Option<f64>,
}

pub const DEFAULT_ALPHA: f64 = 0.005;
pub const DEFAULT_BETA: f64 = 1e-4;
pub const INITIAL_MU_R: f64 = 1.0;
pub const INITIAL_MU_C: f64 = 0.5;
pub const INITIAL_MU_E: f64 = 1e-3;

impl CurriculumState {
    pub fn new(alpha: f64, beta: f64) -> CurriculumState {
        CurriculumState {
            mu_r: INITIAL_MU_R,
            mu_c: INITIAL_MU_C,
            mu_e: INITIAL_MU_E,
            alpha,
            beta,
            steps: 0,
            last_ratio: None,
        }
    }

    /// Advances every weight by one step. The cross-entropy share decays by
    /// the factor `1 - alpha * exp(-1/d)` with `d = tau_u / tau_c`: noisy
    /// teachers (large d) decay it quickly, settled teachers barely at all.
    /// `d <= 0` leaves it unchanged, matching the `d -> 0+` limit. The
    /// contrastive and entropy weights each decay by `exp(-beta)`.
    pub fn step(&mut self, tau_c: f64, tau_u: f64) -> Result<()> {
        if !(tau_c > 0.0) {
            return Err(Error::NonPositiveConfidence(tau_c));
        }
        let d = tau_u / tau_c;
        if d > 0.0 {
            self.mu_r *= 1.0 - self.alpha * (-1.0 / d).exp();
        }
        self.mu_c *= (-self.beta).exp();
        self.mu_e *= (-self.beta).exp();
        self.steps += 1;
        self.last_ratio = Some(d);
        Ok(())
    }
}

/// Scheduled total for the classification variant:
/// `mu_r * ce + (1 - mu_r) * prop + mu_c * con`. Absent terms (empty
/// reliable or unreliable sets) contribute zero.
pub fn total_classification(
    ce: Option<&Tensor>,
    prop: Option<&Tensor>,
    con: Option<&Tensor>,
    state: &CurriculumState,
) -> Result<Tensor> {
    let mut total = Tensor::scalar(0.0)?;
    if let Some(t) = ce {
        total = total.add(&t.scale(state.mu_r)?)?;
    }
    if let Some(t) = prop {
        total = total.add(&t.scale(1.0 - state.mu_r)?)?;
    }
    if let Some(t) = con {
        total = total.add(&t.scale(state.mu_c)?)?;
    }
    Ok(total)
}

/// Scheduled total for the dense-map variant: `ce + mu_e * entropy`, with
/// the cross-entropy term dropped when no pixel passed selection.
pub fn total_segmentation(
    ce: Option<&Tensor>,
    entropy: &Tensor,
    state: &CurriculumState,
) -> Result<Tensor> {
    let weighted = entropy.scale(state.mu_e)?;
    match ce {
        Some(t) => t.add(&weighted),
        None => Ok(weighted),
    }
}
