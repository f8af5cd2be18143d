//! The three segment-level objectives and their closed-form gradients with
//! respect to the model's head output (logits for the classifier, the
//! embedding for the regressor). All values are batch means.

use rand::seq::index;

use crate::assignment::StepDistribution;
use crate::error::{Error, Result};
use crate::math::{dot, log_sum_exp, Matrix, SeededRng};

/// Model probabilities below this are clamped inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_batch(rows: usize, n: usize) -> Result<()> {
    if rows != n || n == 0 {
        return Err(Error::DimensionMismatch {
            expected: rows,
            actual: n,
        });
    }
    Ok(())
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Mean of `-ln p[label]`.
pub fn loss_step_ce(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_batch(probs.rows(), labels.len())?;
    let mut total = 0.0;
    for (row, &y) in probs.iter_rows().zip(labels) {
        check_label(y, row.len())?;
        total += -row[y].max(PROB_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

pub fn grad_step_ce(probs: &Matrix, labels: &[usize]) -> Result<Matrix> {
    check_batch(probs.rows(), labels.len())?;
    let scale = 1.0 / labels.len() as f64;
    let mut g = Matrix::zeros(probs.rows(), probs.cols());
    for (i, &y) in labels.iter().enumerate() {
        check_label(y, probs.cols())?;
        let p = probs.row(i);
        if p[y] < PROB_FLOOR {
            continue;
        }
        for (gj, pj) in g.row_mut(i).iter_mut().zip(p) {
            *gj = pj * scale;
        }
        g.row_mut(i)[y] -= scale;
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlLoss {
    pub value: f64,
    /// Supported entries where the model probability hit the floor.
    pub clamped: usize,
}

fn check_targets(targets: &[StepDistribution], classes: usize) -> Result<()> {
    for t in targets {
        for e in &t.entries {
            check_label(e.global_id, classes)?;
        }
    }
    Ok(())
}

/// Mean over the batch of `Σ P log(P / Q)` over each target's support.
pub fn loss_dist_match(probs: &Matrix, targets: &[StepDistribution]) -> Result<KlLoss> {
    check_batch(probs.rows(), targets.len())?;
    check_targets(targets, probs.cols())?;
    let mut total = 0.0;
    let mut clamped = 0;
    for (q, t) in probs.iter_rows().zip(targets) {
        for e in &t.entries {
            if e.p <= 0.0 {
                continue;
            }
            let qj = q[e.global_id];
            if qj < PROB_FLOOR {
                clamped += 1;
            }
            total += e.p * e.p.ln() - e.p * qj.max(PROB_FLOOR).ln();
        }
    }
    Ok(KlLoss {
        value: total / targets.len() as f64,
        clamped,
    })
}

/// `∂/∂z = q · W − P` where `W` is the unclamped target mass.
pub fn grad_dist_match(probs: &Matrix, targets: &[StepDistribution]) -> Result<Matrix> {
    check_batch(probs.rows(), targets.len())?;
    check_targets(targets, probs.cols())?;
    let scale = 1.0 / targets.len() as f64;
    let mut g = Matrix::zeros(probs.rows(), probs.cols());
    for (i, t) in targets.iter().enumerate() {
        let q = probs.row(i);
        let live: Vec<_> = t
            .entries
            .iter()
            .filter(|e| e.p > 0.0 && q[e.global_id] >= PROB_FLOOR)
            .collect();
        let mass: f64 = live.iter().map(|e| e.p).sum();
        let row = g.row_mut(i);
        for (gj, qj) in row.iter_mut().zip(q) {
            *gj = qj * mass * scale;
        }
        for e in live {
            row[e.global_id] -= e.p * scale;
        }
    }
    Ok(g)
}

/// Which steps form the NCE denominator for each sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Negatives {
    /// Every step except the positive.
    All,
    /// Explicit per-sample negative ids.
    Sampled(Vec<Vec<usize>>),
}

/// Draws `m` distinct negatives per sample uniformly from the steps other
/// than the positive (capped at `S - 1`).
pub fn sample_negatives(
    rng: &mut SeededRng,
    positives: &[usize],
    num_steps: usize,
    m: usize,
) -> Result<Negatives> {
    if m < 1 {
        return Err(Error::invalid("NCE needs at least one negative"));
    }
    if num_steps < 2 {
        return Err(Error::invalid("NCE needs at least two steps"));
    }
    let m = m.min(num_steps - 1);
    let sets = positives
        .iter()
        .map(|&pos| {
            index::sample(rng, num_steps - 1, m)
                .into_iter()
                .map(|i| if i >= pos { i + 1 } else { i })
                .collect()
        })
        .collect();
    Ok(Negatives::Sampled(sets))
}

fn denominator_ids(
    negatives: &Negatives,
    sample: usize,
    positive: usize,
    num_steps: usize,
    include_positive: bool,
) -> Result<Vec<usize>> {
    let mut ids: Vec<usize> = match negatives {
        Negatives::All => (0..num_steps).filter(|&j| j != positive).collect(),
        Negatives::Sampled(sets) => {
            let set = sets
                .get(sample)
                .ok_or_else(|| Error::invalid("missing negative set for sample"))?;
            for &j in set {
                check_label(j, num_steps)?;
                if j == positive {
                    return Err(Error::invalid("negative set contains the positive"));
                }
            }
            set.clone()
        }
    };
    if ids.is_empty() {
        return Err(Error::invalid("NCE needs at least one negative"));
    }
    if include_positive {
        ids.push(positive);
    }
    Ok(ids)
}

/// `-log( exp(e⁺ᵀz) / Σ_neg exp(e⁻ᵀz) )`, batch mean. With
/// `include_positive` the positive also enters the denominator (InfoNCE).
pub fn loss_step_nce(
    embeddings: &Matrix,
    positives: &[usize],
    steps: &Matrix,
    negatives: &Negatives,
    include_positive: bool,
) -> Result<f64> {
    check_batch(embeddings.rows(), positives.len())?;
    if steps.cols() != embeddings.cols() {
        return Err(Error::DimensionMismatch {
            expected: steps.cols(),
            actual: embeddings.cols(),
        });
    }
    let mut total = 0.0;
    for (i, (z, &pos)) in embeddings.iter_rows().zip(positives).enumerate() {
        check_label(pos, steps.rows())?;
        let ids = denominator_ids(negatives, i, pos, steps.rows(), include_positive)?;
        let scores: Vec<f64> = ids.iter().map(|&j| dot(steps.row(j), z)).collect();
        total += -dot(steps.row(pos), z) + log_sum_exp(&scores);
    }
    Ok(total / positives.len() as f64)
}

/// `∂/∂z = −e⁺ + Σ_n softmax(s)_n e_n` over the denominator set.
pub fn grad_step_nce(
    embeddings: &Matrix,
    positives: &[usize],
    steps: &Matrix,
    negatives: &Negatives,
    include_positive: bool,
) -> Result<Matrix> {
    check_batch(embeddings.rows(), positives.len())?;
    let scale = 1.0 / positives.len() as f64;
    let mut g = Matrix::zeros(embeddings.rows(), embeddings.cols());
    for (i, (z, &pos)) in embeddings.iter_rows().zip(positives).enumerate() {
        check_label(pos, steps.rows())?;
        let ids = denominator_ids(negatives, i, pos, steps.rows(), include_positive)?;
        let mut w: Vec<f64> = ids.iter().map(|&j| dot(steps.row(j), z)).collect();
        crate::math::softmax_in_place(&mut w);
        let row = g.row_mut(i);
        for (gj, e) in row.iter_mut().zip(steps.row(pos)) {
            *gj -= e * scale;
        }
        for (&j, wj) in ids.iter().zip(&w) {
            for (gj, e) in row.iter_mut().zip(steps.row(j)) {
                *gj += wj * e * scale;
            }
        }
    }
    Ok(g)
}

/// Keeps the `k` most probable entries of `dist`, renormalized.
pub fn truncate_target(dist: &StepDistribution, k: usize) -> StepDistribution {
    if dist.entries.len() <= k {
        return dist.clone();
    }
    let mut entries = dist.entries.clone();
    entries.sort_by(|a, b| b.p.total_cmp(&a.p).then(a.global_id.cmp(&b.global_id)));
    entries.truncate(k.max(1));
    let kept: f64 = entries.iter().map(|e| e.p).sum();
    for e in &mut entries {
        e.p /= kept;
    }
    StepDistribution {
        entries,
        k,
        retained_mass: dist.retained_mass * kept,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::StepProb;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn ce_examples() {
        assert_eq!(loss_step_ce(&m(&[&[0.0, 1.0, 0.0]]), &[1]).unwrap(), 0.0);
        let u = loss_step_ce(&m(&[&[0.25; 4]]), &[2]).unwrap();
        assert!((u - 4f64.ln()).abs() < 1e-15);
        let v = loss_step_ce(&m(&[&[0.5, 0.25, 0.25]]), &[1]).unwrap();
        assert!((v - 1.3863).abs() < 1e-4);
        assert!(matches!(
            loss_step_ce(&m(&[&[0.5, 0.5]]), &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn ce_gradient_is_probs_minus_onehot() {
        let p = m(&[&[0.2, 0.5, 0.3], &[0.6, 0.1, 0.3]]);
        let g = grad_step_ce(&p, &[1, 0]).unwrap();
        let want = [[0.1, -0.25, 0.15], [-0.2, 0.05, 0.15]];
        for (r, w) in g.iter_rows().zip(want) {
            for (a, b) in r.iter().zip(w) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    fn dist(entries: &[(usize, f64)]) -> StepDistribution {
        StepDistribution {
            entries: entries
                .iter()
                .map(|&(global_id, p)| StepProb { global_id, p })
                .collect(),
            k: entries.len(),
            retained_mass: 1.0,
        }
    }

    #[test]
    fn kl_examples() {
        let q = m(&[&[0.25; 4]]);
        let kl = loss_dist_match(&q, &[dist(&[(0, 0.8), (1, 0.2)])]).unwrap();
        let want = 0.8 * (0.8f64 / 0.25).ln() + 0.2 * (0.2f64 / 0.25).ln();
        assert!((kl.value - want).abs() < 1e-15);
        // Independent evaluation gives 0.885892; the commonly quoted 0.8863 is
        // a rounding slip.
        assert!((kl.value - 0.885_891_937_581_702_7).abs() < 1e-12);

        let p = m(&[&[0.7, 0.2, 0.1]]);
        let same = loss_dist_match(&p, &[dist(&[(0, 0.7), (1, 0.2), (2, 0.1)])]).unwrap();
        assert!(same.value.abs() < 1e-15);
    }

    #[test]
    fn kl_one_hot_equals_ce_bitwise() {
        let p = m(&[&[0.1, 0.6, 0.3], &[0.2, 0.2, 0.6]]);
        let ce = loss_step_ce(&p, &[1, 2]).unwrap();
        let kl = loss_dist_match(&p, &[StepDistribution::one_hot(1), StepDistribution::one_hot(2)])
            .unwrap();
        assert_eq!(ce, kl.value);
        let gce = grad_step_ce(&p, &[1, 2]).unwrap();
        let gkl = grad_dist_match(&p, &[StepDistribution::one_hot(1), StepDistribution::one_hot(2)])
            .unwrap();
        assert_eq!(gce, gkl);
    }

    #[test]
    fn kl_clamps_zero_probability() {
        let p = m(&[&[1.0, 0.0]]);
        let kl = loss_dist_match(&p, &[dist(&[(0, 0.5), (1, 0.5)])]).unwrap();
        assert_eq!(kl.clamped, 1);
        assert!(kl.value.is_finite());
    }

    #[test]
    fn nce_examples() {
        let steps = m(&[&[1.0, 0.0], &[0.0, 1.0], &[0.5, 0.5]]);
        // z orthogonal to all steps: ln(S - 1).
        let z = m(&[&[0.0, 0.0]]);
        let l = loss_step_nce(&z, &[1], &steps, &Negatives::All, false).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        // S = 2 with e⁺ᵀz = 1, e⁻ᵀz = 0 gives -1: the paper-literal form can
        // go negative because the positive is not in the denominator.
        let two = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let l = loss_step_nce(&m(&[&[1.0, 0.0]]), &[0], &two, &Negatives::All, false).unwrap();
        assert!((l - (-1.0)).abs() < 1e-15);
        let l = loss_step_nce(&m(&[&[1.0, 0.0]]), &[0], &two, &Negatives::All, true).unwrap();
        assert!((l - (1.0f64.exp() + 1.0).ln() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn nce_rejects_bad_negatives() {
        let steps = m(&[&[1.0], &[0.0]]);
        let z = m(&[&[1.0]]);
        let bad = Negatives::Sampled(vec![vec![0]]);
        assert!(loss_step_nce(&z, &[0], &steps, &bad, false).is_err());
        let mut r = crate::math::rng(0);
        assert!(sample_negatives(&mut r, &[0], 2, 0).is_err());
    }

    #[test]
    fn sampled_negatives_exclude_positive() {
        let mut r = crate::math::rng(5);
        let Negatives::Sampled(sets) = sample_negatives(&mut r, &[0, 3, 9], 10, 4).unwrap() else {
            unreachable!()
        };
        for (set, pos) in sets.iter().zip([0, 3, 9]) {
            assert_eq!(set.len(), 4);
            assert!(!set.contains(&pos));
            assert!(set.iter().all(|&j| j < 10));
        }
    }

    #[test]
    fn truncation_renormalizes() {
        let d = dist(&[(3, 0.5), (1, 0.3), (2, 0.2)]);
        let t = truncate_target(&d, 2);
        assert_eq!(t.entries.len(), 2);
        assert!((t.entries[0].p - 0.625).abs() < 1e-15);
        assert!((t.entries[1].p - 0.375).abs() < 1e-15);
    }
}
