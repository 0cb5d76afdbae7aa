//! MSE and pairwise lambda-rank losses, each returning the loss value and
//! the gradient with respect to the scores.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;

use crate::error::{Error, Result};

/// Mean of squared residuals; gradient `2 (score - label) / n`.
pub fn mse_loss(scores: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    if scores.is_empty() {
        return Err(Error::Validation("mse over an empty batch".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!(
            "mse length mismatch: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; scores.len()];
    for i in 0..scores.len() {
        let r = scores[i] - labels[i];
        loss += r * r;
        grad[i] = 2.0 * r / n;
    }
    Ok((loss / n, grad))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// log2(1 + e^x), stable for large |x|
fn log2_1p_exp(x: f64) -> f64 {
    if x > 36.0 {
        x / LN_2
    } else {
        x.exp().ln_1p() / LN_2
    }
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 2) as f64).log2()
}

fn gain(label: f64) -> f64 {
    label.exp2() - 1.0
}

/// Pairwise lambda-rank loss over ranking groups.
///
/// For every within-group pair with a strictly larger label on one side, the
/// pair contributes `|delta_ndcg| * log2(1 + exp(-(s_hi - s_lo)))`, where the
/// NDCG delta uses gains `2^label - 1` and log discounts at the pair's ranks
/// under the current scores (ties broken by input order). The total is
/// normalized by the number of strict pairs; the delta weights are treated
/// as constants by the gradient, as usual for lambda-style losses.
pub fn lambda_rank_loss(
    scores: &[f64],
    labels: &[f64],
    group_ids: &[usize],
) -> Result<(f64, Vec<f64>)> {
    if scores.len() != labels.len() || scores.len() != group_ids.len() {
        return Err(Error::Validation(
            "lambda rank inputs must have equal lengths".into(),
        ));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &g) in group_ids.iter().enumerate() {
        groups.entry(g).or_default().push(i);
    }

    let mut loss = 0.0;
    let mut grad = vec![0.0; scores.len()];
    let mut pair_count = 0u64;

    for (_, members) in groups {
        if members.len() < 2 {
            continue;
        }
        // ranks under current scores, descending, stable by input order
        let mut order: Vec<usize> = members.clone();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let mut rank_of = BTreeMap::new();
        for (rank, &idx) in order.iter().enumerate() {
            rank_of.insert(idx, rank);
        }
        // ideal DCG from labels sorted descending
        let mut sorted_labels: Vec<f64> = members.iter().map(|&i| labels[i]).collect();
        sorted_labels.sort_by(|a, b| b.total_cmp(a));
        let max_dcg: f64 = sorted_labels
            .iter()
            .enumerate()
            .map(|(r, &l)| gain(l) * discount(r))
            .sum();
        if max_dcg <= 0.0 {
            continue;
        }

        for (ai, &a) in members.iter().enumerate() {
            for &b in &members[ai + 1..] {
                let (hi, lo) = if labels[a] > labels[b] {
                    (a, b)
                } else if labels[b] > labels[a] {
                    (b, a)
                } else {
                    continue;
                };
                let delta = ((gain(labels[hi]) - gain(labels[lo]))
                    * (discount(rank_of[&hi]) - discount(rank_of[&lo])))
                .abs()
                    / max_dcg;
                let margin = scores[hi] - scores[lo];
                loss += delta * log2_1p_exp(-margin);
                let lambda = delta * sigmoid(-margin) / LN_2;
                grad[hi] -= lambda;
                grad[lo] += lambda;
                pair_count += 1;
            }
        }
    }

    if pair_count == 0 {
        return Ok((0.0, vec![0.0; scores.len()]));
    }
    let norm = pair_count as f64;
    for g in &mut grad {
        *g /= norm;
    }
    Ok((loss / norm, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_single_pair() {
        let (loss, grad) = mse_loss(&[0.5], &[1.0]).unwrap();
        assert!((loss - 0.25).abs() < 1e-15);
        assert!((grad[0] - 2.0 * (0.5 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn mse_exact_match_is_zero() {
        let (loss, grad) = mse_loss(&[0.3, 0.9], &[0.3, 0.9]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mse_empty_batch_errors() {
        assert!(mse_loss(&[], &[]).is_err());
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let scores = [0.2, -0.4, 0.9, 0.1];
        let labels = [0.5, 0.25, 1.0, 0.125];
        let (_, grad) = mse_loss(&scores, &labels).unwrap();
        let h = 1e-5;
        for i in 0..scores.len() {
            let mut plus = scores;
            let mut minus = scores;
            plus[i] += h;
            minus[i] -= h;
            let fd = (mse_loss(&plus, &labels).unwrap().0
                - mse_loss(&minus, &labels).unwrap().0)
                / (2.0 * h);
            let rel = (fd - grad[i]).abs() / (fd.abs() + grad[i].abs()).max(1e-8);
            assert!(rel < 1e-6, "index {i}: fd {fd} vs analytic {}", grad[i]);
        }
    }

    #[test]
    fn rank_tied_labels_give_zero_loss() {
        let (loss, grad) = lambda_rank_loss(&[0.1, 0.9], &[0.7, 0.7], &[0, 0]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn rank_zero_margin_pair_value() {
        // one strict pair at equal scores: loss = |delta_ndcg| * log2(2)
        let labels = [0.9, 0.3];
        let scores = [0.5, 0.5];
        let (loss, _) = lambda_rank_loss(&scores, &labels, &[0, 0]).unwrap();
        let g_hi = gain(0.9);
        let g_lo = gain(0.3);
        let max_dcg = g_hi * discount(0) + g_lo * discount(1);
        let delta = ((g_hi - g_lo) * (discount(0) - discount(1))).abs() / max_dcg;
        assert!((loss - delta).abs() < 1e-12, "{loss} vs {delta}");
    }

    #[test]
    fn rank_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        for _ in 0..10 {
            let n = 8;
            // well-separated scores so a small step cannot flip ranks
            let mut scores: Vec<f64> = (0..n).map(|i| i as f64 * 0.3).collect();
            use rand::seq::SliceRandom;
            scores.shuffle(&mut rng);
            let labels: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
            let groups: Vec<usize> = (0..n).map(|i| i / 4).collect();
            let (_, grad) = lambda_rank_loss(&scores, &labels, &groups).unwrap();
            let h = 1e-6;
            for i in 0..n {
                let mut plus = scores.clone();
                let mut minus = scores.clone();
                plus[i] += h;
                minus[i] -= h;
                let fd = (lambda_rank_loss(&plus, &labels, &groups).unwrap().0
                    - lambda_rank_loss(&minus, &labels, &groups).unwrap().0)
                    / (2.0 * h);
                let rel = (fd - grad[i]).abs() / (fd.abs() + grad[i].abs()).max(1e-3);
                assert!(rel < 1e-5, "index {i}: fd {fd} vs analytic {}", grad[i]);
            }
        }
    }

    #[test]
    fn rank_lowering_the_worse_item_lowers_loss() {
        let labels = [0.9, 0.3];
        let base = lambda_rank_loss(&[0.6, 0.5], &labels, &[0, 0]).unwrap().0;
        let lower = lambda_rank_loss(&[0.6, 0.2], &labels, &[0, 0]).unwrap().0;
        assert!(lower < base);
    }

    #[test]
    fn rank_singleton_groups_contribute_nothing() {
        let (loss, grad) = lambda_rank_loss(&[0.4, 0.6], &[0.2, 0.8], &[0, 1]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }
}
