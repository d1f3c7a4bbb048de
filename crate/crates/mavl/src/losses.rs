//! The three training losses and their weighted combination.
//!
//! * Fine-grained contrastive loss: for each query position `k`, a softmax
//!   over all diseases' position-`k` embeddings; the loss is the negative
//!   log of the probability mass landing on the positively present set.
//!   With temperature 1 this is exactly the negation of the per-aspect
//!   log-probability sum; written with log-sum-exp it is
//!   `sum_k [ LSE_all(z_k) - LSE_pos(z_k) ]` with `z_jk = f . a_jk / tau`,
//!   which is non-negative because the positive set is a subset.
//! * Supervised loss: mean over diseases of two-class cross-entropy between
//!   the classifier logits and the presence bit.
//! * Location loss: InfoNCE over the location vocabulary for each positively
//!   present disease with a stated location, averaged over those diseases.
//!
//! Every function returns the scalar together with its exact gradient, and
//! each is checked against an independent direct-summation oracle.

use ndarray::{Array1, Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::MultiLabelTarget;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LossError {
    #[error("contrastive loss is undefined for an empty positive set")]
    EmptyPositiveSet,
}

/// Weights of the combined objective plus the softmax temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, gamma: 1.0, tau: 0.7 }
    }
}

/// Indices of diseases positively present in a sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveSet {
    pub indices: Vec<usize>,
}

impl PositiveSet {
    pub fn from_target(target: &MultiLabelTarget) -> Self {
        Self { indices: target.positive_indices() }
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Fine-grained contrastive loss of a pooled image feature against the
/// `[N, Q, d]` aspect-embedding block. Returns the scalar and its gradient
/// with respect to `f` (the aspect embeddings are frozen).
pub fn contrastive_loss(
    f: ArrayView1<f64>,
    aspect_embeddings: &Array3<f64>,
    positives: &PositiveSet,
    tau: f64,
) -> Result<(f64, Array1<f64>), LossError> {
    if positives.is_empty() {
        return Err(LossError::EmptyPositiveSet);
    }
    let (n, q, d) = aspect_embeddings.dim();
    debug_assert_eq!(f.len(), d);
    debug_assert!(positives.indices.iter().all(|&j| j < n));

    let mut loss = 0.0;
    let mut grad = Array1::<f64>::zeros(d);
    for k in 0..q {
        // logits over all N diseases at query position k
        let mut logits = Array1::<f64>::zeros(n);
        for j in 0..n {
            let a = aspect_embeddings.index_axis(ndarray::Axis(0), j);
            logits[j] = f.dot(&a.index_axis(ndarray::Axis(0), k)) / tau;
        }
        let lse_all = log_sum_exp(logits.iter().cloned());
        let lse_pos = log_sum_exp(positives.indices.iter().map(|&j| logits[j]));
        loss += lse_all - lse_pos;

        // d LSE / df = sum_j softmax_j * a_j / tau, over the respective sets
        let mut within_pos = Array1::<f64>::zeros(n);
        for &j in &positives.indices {
            within_pos[j] = (logits[j] - lse_pos).exp();
        }
        for j in 0..n {
            let p_all = (logits[j] - lse_all).exp();
            let coeff = (p_all - within_pos[j]) / tau;
            if coeff != 0.0 {
                let a = aspect_embeddings.index_axis(ndarray::Axis(0), j);
                grad.scaled_add(coeff, &a.index_axis(ndarray::Axis(0), k));
            }
        }
    }
    Ok((loss, grad))
}

/// Mean two-class cross-entropy over all diseases. The gradient with respect
/// to the logits is `(softmax - onehot) / N` per disease row.
pub fn supervised_loss(logits: &Array2<f64>, target: &MultiLabelTarget) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    debug_assert_eq!(logits.ncols(), 2);
    debug_assert_eq!(target.presence.len(), n);

    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros(logits.dim());
    for j in 0..n {
        let row = logits.row(j);
        let label = target.presence[j] as usize; // column 1 = present
        let lse = log_sum_exp(row.iter().cloned());
        loss += lse - row[label];
        for c in 0..2 {
            let p = (row[c] - lse).exp();
            grad[(j, c)] = (p - if c == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

/// Two-class cross-entropy of a single logit row against its presence bit.
/// `supervised_loss` is the mean of this over all disease rows.
pub fn supervised_loss_row_value(logits: ArrayView1<f64>, label: u8) -> f64 {
    let lse = log_sum_exp(logits.iter().cloned());
    lse - logits[label as usize]
}

/// InfoNCE between one predicted location embedding and the location table,
/// with the stated location as the positive. Returns the scalar and the
/// gradient with respect to the anchor.
pub fn location_infonce(
    anchor: ArrayView1<f64>,
    location_table: &Array2<f64>,
    positive: usize,
    tau: f64,
) -> (f64, Array1<f64>) {
    let m = location_table.nrows();
    debug_assert!(positive < m);
    let logits: Array1<f64> =
        (0..m).map(|l| anchor.dot(&location_table.row(l)) / tau).collect();
    let lse = log_sum_exp(logits.iter().cloned());
    let loss = lse - logits[positive];

    let mut grad = Array1::<f64>::zeros(anchor.len());
    for l in 0..m {
        let p = (logits[l] - lse).exp();
        let coeff = (p - if l == positive { 1.0 } else { 0.0 }) / tau;
        grad.scaled_add(coeff, &location_table.row(l));
    }
    (loss, grad)
}

/// Location loss over all diseases: InfoNCE per located positive disease,
/// averaged; zero (with zero gradient) when no disease states a location.
pub fn location_loss(
    predicted: &Array2<f64>,
    target: &MultiLabelTarget,
    location_table: &Array2<f64>,
    tau: f64,
) -> (f64, Array2<f64>) {
    let located = target.located();
    let mut grad = Array2::<f64>::zeros(predicted.dim());
    if located.is_empty() {
        return (0.0, grad);
    }
    let scale = 1.0 / located.len() as f64;
    let mut loss = 0.0;
    for (j, l) in located {
        let (term, g) = location_infonce(predicted.row(j), location_table, l, tau);
        loss += term * scale;
        grad.row_mut(j).scaled_add(scale, &g);
    }
    (loss, grad)
}

/// Weighted combination of the three loss parts.
pub fn total_loss(weights: &LossWeights, contrastive: f64, supervised: f64, location: f64) -> f64 {
    weights.alpha * contrastive + weights.beta * supervised + weights.gamma * location
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn target_with(presence: &[u8], located: &[(usize, usize)]) -> MultiLabelTarget {
        let mut t = MultiLabelTarget::empty(presence.len());
        t.presence = presence.to_vec();
        for &(j, l) in located {
            t.location_index[j] = Some(l);
        }
        t
    }

    #[test]
    fn uniform_logits_give_ln_n_per_query_position() {
        // all similarities equal -> softmax mass on one positive is 1/N
        let d = 6;
        let shared = Array1::from_elem(d, 1.0 / (d as f64).sqrt());
        let mut a = Array3::<f64>::zeros((4, 1, d));
        for j in 0..4 {
            a.index_axis_mut(ndarray::Axis(0), j)
                .index_axis_mut(ndarray::Axis(0), 0)
                .assign(&shared);
        }
        let f = Array1::from_elem(d, 0.3);
        let positives = PositiveSet { indices: vec![2] };
        let (loss, grad) = contrastive_loss(f.view(), &a, &positives, 1.0).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        assert!((loss - 1.386_294).abs() < 1e-6);
        // identical embeddings: gradient cancels exactly
        assert!(grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn multiple_query_positions_sum() {
        let d = 4;
        let shared = Array1::from_elem(d, 0.5);
        let mut a = Array3::<f64>::zeros((3, 5, d));
        for j in 0..3 {
            for k in 0..5 {
                a.index_axis_mut(ndarray::Axis(0), j)
                    .index_axis_mut(ndarray::Axis(0), k)
                    .assign(&shared);
            }
        }
        let f = Array1::from_elem(d, 1.0);
        let positives = PositiveSet { indices: vec![0] };
        let (loss, _) = contrastive_loss(f.view(), &a, &positives, 1.0).unwrap();
        assert!((loss - 5.0 * 3.0f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn saturated_positive_drives_loss_to_zero() {
        let d = 3;
        let mut a = Array3::<f64>::zeros((4, 1, d));
        a[(0, 0, 0)] = 40.0; // the positive's similarity dominates
        for j in 1..4 {
            a[(j, 0, 1)] = 1.0;
        }
        let f = array![1.0, 1.0, 0.0];
        let positives = PositiveSet { indices: vec![0] };
        let (loss, _) = contrastive_loss(f.view(), &a, &positives, 1.0).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn empty_positive_set_is_signaled() {
        let a = Array3::<f64>::zeros((2, 1, 3));
        let f = Array1::zeros(3);
        assert_eq!(
            contrastive_loss(f.view(), &a, &PositiveSet { indices: vec![] }, 1.0).unwrap_err(),
            LossError::EmptyPositiveSet
        );
    }

    #[test]
    fn zero_logits_cost_ln_two_per_disease() {
        let logits = Array2::<f64>::zeros((5, 2));
        let target = target_with(&[1, 0, 1, 0, 1], &[]);
        let (loss, _) = supervised_loss(&logits, &target);
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
        assert!((loss - 0.693_147).abs() < 1e-6);
    }

    #[test]
    fn saturated_correct_logit_contributes_nothing() {
        let mut logits = Array2::<f64>::zeros((1, 2));
        logits[(0, 1)] = 30.0;
        let target = target_with(&[1], &[]);
        let (loss, _) = supervised_loss(&logits, &target);
        assert!(loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn softmax_shift_invariance() {
        let logits = array![[0.7, -0.2], [1.5, 0.1]];
        let shifted = logits.mapv(|v| v + 11.0);
        let target = target_with(&[1, 0], &[]);
        let (a, _) = supervised_loss(&logits, &target);
        let (b, _) = supervised_loss(&shifted, &target);
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn equidistant_anchor_costs_ln_m() {
        let m = 4;
        let d = 5;
        // identical rows: anchor is equidistant from every location
        let table = Array2::from_shape_fn((m, d), |(_, c)| if c == 0 { 1.0 } else { 0.0 });
        let anchor = Array1::from_elem(d, 0.7);
        let predicted = anchor.clone().insert_axis(ndarray::Axis(0));
        let target = target_with(&[1], &[(0, 2)]);
        let (loss, _) = location_loss(&predicted, &target, &table, 1.0);
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        assert!((loss - 1.386_294).abs() < 1e-6);
    }

    #[test]
    fn no_located_disease_is_zero_with_zero_gradient() {
        let predicted = Array2::from_elem((3, 4), 0.5);
        let table = Array2::from_elem((2, 4), 0.25);
        let target = target_with(&[1, 0, 0], &[]); // positive but unlocated
        let (loss, grad) = location_loss(&predicted, &target, &table, 1.0);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn total_is_exact_weighted_sum() {
        let w = LossWeights { alpha: 1.0, beta: 1.0, gamma: 1.0, tau: 1.0 };
        assert_eq!(total_loss(&w, 1.0, 2.0, 0.5), 3.5);
        let sup_only = LossWeights { alpha: 0.0, beta: 1.0, gamma: 0.0, tau: 1.0 };
        assert_eq!(total_loss(&sup_only, 1.0, 2.0, 0.5), 2.0);
        let con_only = LossWeights { alpha: 1.0, beta: 0.0, gamma: 0.0, tau: 1.0 };
        assert_eq!(total_loss(&con_only, 1.0, 2.0, 0.5), 1.0);
    }

    #[test]
    fn losses_are_non_negative_on_random_instances() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..300 {
            let n = rng.gen_range(1..6);
            let q = rng.gen_range(1..4);
            let d = rng.gen_range(2..6);
            let a = Array3::from_shape_fn((n, q, d), |_| rng.gen_range(-1.0..1.0));
            let f = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0));
            let n_pos = rng.gen_range(1..=n);
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..n_pos {
                let j = rng.gen_range(i..n);
                idx.swap(i, j);
            }
            let positives = PositiveSet { indices: idx[..n_pos].to_vec() };
            let tau = rng.gen_range(0.05..2.0);
            let (cl, _) = contrastive_loss(f.view(), &a, &positives, tau).unwrap();
            assert!(cl >= -1e-12, "contrastive went negative: {cl}");

            let logits = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-3.0..3.0));
            let presence: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let target = target_with(&presence, &[]);
            let (sup, _) = supervised_loss(&logits, &target);
            assert!(sup >= 0.0);
        }
    }

    /// Central finite differences on each closed-form gradient.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let eps = 1e-6;
        let close = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-4) < 1e-4;

        for trial in 0..30 {
            let n = rng.gen_range(2..5);
            let q = rng.gen_range(1..4);
            let d = rng.gen_range(2..5);
            let a = Array3::from_shape_fn((n, q, d), |_| rng.gen_range(-1.0..1.0));
            let mut f = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0));
            let positives = PositiveSet { indices: vec![0, n - 1] };
            let tau = rng.gen_range(0.3..1.5);
            let (_, grad) = contrastive_loss(f.view(), &a, &positives, tau).unwrap();
            for i in 0..d {
                let orig = f[i];
                f[i] = orig + eps;
                let (lp, _) = contrastive_loss(f.view(), &a, &positives, tau).unwrap();
                f[i] = orig - eps;
                let (lm, _) = contrastive_loss(f.view(), &a, &positives, tau).unwrap();
                f[i] = orig;
                let numeric = (lp - lm) / (2.0 * eps);
                assert!(close(grad[i], numeric), "trial {trial} cl grad[{i}]");
            }

            let mut logits = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-2.0..2.0));
            let presence: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let target = target_with(&presence, &[]);
            let (_, grad) = supervised_loss(&logits, &target);
            for j in 0..n {
                for c in 0..2 {
                    let orig = logits[(j, c)];
                    logits[(j, c)] = orig + eps;
                    let (lp, _) = supervised_loss(&logits, &target);
                    logits[(j, c)] = orig - eps;
                    let (lm, _) = supervised_loss(&logits, &target);
                    logits[(j, c)] = orig;
                    let numeric = (lp - lm) / (2.0 * eps);
                    assert!(close(grad[(j, c)], numeric), "trial {trial} sup grad ({j},{c})");
                }
            }

            let m = rng.gen_range(2..5);
            let table = Array2::from_shape_fn((m, d), |_| rng.gen_range(-1.0..1.0));
            let mut predicted = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
            let mut presence = vec![0u8; n];
            presence[0] = 1;
            let target = target_with(&presence, &[(0, rng.gen_range(0..m))]);
            let (_, grad) = location_loss(&predicted, &target, &table, tau);
            for j in 0..n {
                for i in 0..d {
                    let orig = predicted[(j, i)];
                    predicted[(j, i)] = orig + eps;
                    let (lp, _) = location_loss(&predicted, &target, &table, tau);
                    predicted[(j, i)] = orig - eps;
                    let (lm, _) = location_loss(&predicted, &target, &table, tau);
                    predicted[(j, i)] = orig;
                    let numeric = (lp - lm) / (2.0 * eps);
                    assert!(close(grad[(j, i)], numeric), "trial {trial} loc grad ({j},{i})");
                }
            }
        }
    }
}
