//! Classification and grounding metrics.

use ndarray::Array2;

use super::EvalError;

/// Area under the ROC curve via the rank formulation with midrank tie
/// handling: the probability a random positive outranks a random negative,
/// ties counted half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // midranks: tied scores share the average of their 1-based ranks
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }

    let pos_rank_sum: f64 =
        labels.iter().zip(&ranks).filter(|(&l, _)| l == 1).map(|(_, &r)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ThresholdMetrics {
    pub f1: f64,
    pub acc: f64,
}

/// F1 and accuracy at a decision threshold (predicted positive when the
/// score is at or above it). F1 is zero by convention when precision and
/// recall are both undefined or zero.
pub fn threshold_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> ThresholdMetrics {
    assert_eq!(scores.len(), labels.len());
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let acc = (tp + tn) as f64 / scores.len().max(1) as f64;
    let denom = 2 * tp + fp + fn_;
    let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
    ThresholdMetrics { f1, acc }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroundingMetrics {
    pub iou: f64,
    pub dice: f64,
    pub pixel_acc: f64,
}

/// Binarize the heatmap at `threshold` and compare with the mask. Two empty
/// sets count as perfect overlap.
pub fn grounding_metrics(
    heatmap: &Array2<f64>,
    mask: &Array2<u8>,
    threshold: f64,
) -> Result<GroundingMetrics, EvalError> {
    if heatmap.dim() != mask.dim() {
        return Err(EvalError::ShapeMismatch {
            expected: format!("{:?}", mask.dim()),
            got: format!("{:?}", heatmap.dim()),
        });
    }
    let (mut inter, mut pred, mut truth, mut agree) = (0usize, 0usize, 0usize, 0usize);
    for (&h, &m) in heatmap.iter().zip(mask.iter()) {
        let p = h >= threshold;
        let t = m == 1;
        if p {
            pred += 1;
        }
        if t {
            truth += 1;
        }
        if p && t {
            inter += 1;
        }
        if p == t {
            agree += 1;
        }
    }
    let union = pred + truth - inter;
    let (iou, dice) = if union == 0 {
        (1.0, 1.0)
    } else {
        (inter as f64 / union as f64, 2.0 * inter as f64 / (pred + truth) as f64)
    };
    Ok(GroundingMetrics { iou, dice, pixel_acc: agree as f64 / heatmap.len() as f64 })
}

/// Spearman rank correlation with midranks on both sides.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = midranks(xs);
    let ry = midranks(ys);
    pearson(&rx, &ry)
}

fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx).powi(2);
        vy += (y - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn perfect_and_inverted_ranking() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        assert_eq!(auc(&scores, &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&scores, &[0, 0, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn ties_count_half() {
        let scores = [0.5, 0.5];
        assert_eq!(auc(&scores, &[1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(EvalError::SingleClass)));
        assert!(matches!(auc(&[0.1, 0.2], &[0, 0]), Err(EvalError::SingleClass)));
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..100 {
            let n = rng.gen_range(4..30);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            labels[0] = 1;
            labels[1] = 0;
            let base = auc(&scores, &labels).unwrap();
            let squashed: Vec<f64> = scores.iter().map(|&s| (3.0 * s).tanh()).collect();
            let shifted: Vec<f64> = scores.iter().map(|&s| 10.0 * s + 4.0).collect();
            assert!((auc(&squashed, &labels).unwrap() - base).abs() < 1e-12);
            assert!((auc(&shifted, &labels).unwrap() - base).abs() < 1e-12);
        }
    }

    /// Brute-force pair-counting oracle.
    #[test]
    fn auc_matches_pair_counting() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(4..25);
            // coarse scores force plenty of ties
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            labels[0] = 1;
            labels[1] = 0;
            let mut wins = 0.0;
            let mut pairs = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] == 1 && labels[j] == 0 {
                        pairs += 1.0;
                        if scores[i] > scores[j] {
                            wins += 1.0;
                        } else if scores[i] == scores[j] {
                            wins += 0.5;
                        }
                    }
                }
            }
            let expected = wins / pairs;
            assert!((auc(&scores, &labels).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_metric_conventions() {
        let m = threshold_metrics(&[0.9, 0.8, 0.1], &[1, 1, 0], 0.5);
        assert_eq!((m.f1, m.acc), (1.0, 1.0));
        // no predicted positives but true positives exist
        let m = threshold_metrics(&[0.1, 0.2], &[1, 1], 0.5);
        assert_eq!(m.f1, 0.0);
        assert_eq!(m.acc, 0.0);
    }

    #[test]
    fn grounding_formula_arithmetic() {
        // |A| = 2 predictions, |B| = 2 truth, 1 overlapping pixel
        let heatmap = array![[0.9, 0.9, 0.0], [0.0, 0.0, 0.0]];
        let mask = array![[0u8, 1, 1], [0, 0, 0]];
        let g = grounding_metrics(&heatmap, &mask, 0.5).unwrap();
        assert!((g.dice - 0.5).abs() < 1e-12);
        assert!((g.iou - 1.0 / 3.0).abs() < 1e-12);
        assert!((g.pixel_acc - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn identical_and_empty_masks() {
        let heatmap = array![[1.0, 0.0], [0.0, 1.0]];
        let mask = array![[1u8, 0], [0, 1]];
        let g = grounding_metrics(&heatmap, &mask, 0.5).unwrap();
        assert_eq!((g.iou, g.dice, g.pixel_acc), (1.0, 1.0, 1.0));
        let g = grounding_metrics(&Array2::zeros((2, 2)), &Array2::zeros((2, 2)), 0.5).unwrap();
        assert_eq!((g.iou, g.dice), (1.0, 1.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let heatmap = Array2::<f64>::zeros((2, 3));
        let mask = Array2::<u8>::zeros((3, 2));
        assert!(matches!(
            grounding_metrics(&heatmap, &mask, 0.5),
            Err(EvalError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn dice_dominates_iou() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        for _ in 0..200 {
            let heatmap = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0.0..1.0));
            let mask = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0..2) as u8);
            let g = grounding_metrics(&heatmap, &mask, 0.5).unwrap();
            assert!(g.dice >= g.iou - 1e-12);
        }
    }

    #[test]
    fn spearman_direction() {
        assert!((spearman(&[1.0, 3.0, 5.0, 9.0], &[0.1, 0.2, 0.3, 0.4]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 3.0, 5.0, 9.0], &[0.4, 0.3, 0.2, 0.1]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), 0.0);
    }
}
