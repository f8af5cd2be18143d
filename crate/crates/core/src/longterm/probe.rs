//! Multinomial logistic regression on frozen features.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{affine, affine_backward, argmax, init_uniform, rng, softmax_in_place, Matrix};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::segment_model::PROB_FLOOR;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// L2 penalty on the weights (not the biases), added to the mean loss.
    pub l2: f64,
    pub seed: u64,
    pub scaling: Scaling,
    /// Unlabeled samples (`None`) become an extra background class instead
    /// of being dropped.
    pub background: bool,
    /// Keep only the first `shots` training samples of each class.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shots: Option<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::sgd(0.5),
            epochs: 60,
            batch_size: 64,
            l2: 1e-4,
            seed: 0,
            scaling: Scaling::Global,
            background: false,
            shots: None,
        }
    }
}

/// Input normalization fitted on the training features. All modes center
/// each feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// Center only.
    None,
    /// Divide by the root-mean-square distance to the mean, keeping the
    /// relative scale of features.
    #[default]
    Global,
    /// Z-score each feature independently.
    PerFeature,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    classes: usize,
    dim: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `classes × dim` weights followed by `classes` biases.
    params: Vec<f64>,
}

impl LinearProbe {
    pub fn new(classes: usize, dim: usize, seed: u64) -> Result<Self> {
        if classes == 0 || dim == 0 {
            return Err(Error::invalid("probe needs >= 1 class and feature"));
        }
        let mut params = vec![0.0; classes * dim + classes];
        init_uniform(&mut rng(seed), &mut params[..classes * dim], dim);
        Ok(Self {
            classes,
            dim,
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
            params,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn prepare(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = (x[i] - self.mean[i]) * self.scale[i];
        }
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        let mut z = vec![0.0; self.dim];
        self.prepare(x, &mut z);
        let (w, b) = self.params.split_at(self.classes * self.dim);
        let mut out = vec![0.0; self.classes];
        affine(w, b, &z, &mut out);
        Ok(out)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Mean cross-entropy plus `l2/2 · ‖W‖²` and its gradient.
    pub fn loss_and_grad(&self, x: &Matrix, labels: &[usize], l2: f64) -> Result<(f64, Vec<f64>)> {
        if x.rows() != labels.len() || labels.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: x.rows(),
                actual: labels.len(),
            });
        }
        let nw = self.classes * self.dim;
        let (w, _) = self.params.split_at(nw);
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        let inv = 1.0 / labels.len() as f64;
        let mut z = vec![0.0; self.dim];
        for (row, &y) in x.iter_rows().zip(labels) {
            if y >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes: self.classes,
                });
            }
            let mut p = self.logits(row)?;
            softmax_in_place(&mut p);
            loss -= p[y].max(PROB_FLOOR).ln() * inv;
            p[y] -= 1.0;
            p.iter_mut().for_each(|v| *v *= inv);
            self.prepare(row, &mut z);
            let (gw, gb) = grad.split_at_mut(nw);
            affine_backward(w, &z, &p, gw, gb, None);
        }
        for (g, wi) in grad[..nw].iter_mut().zip(w) {
            *g += l2 * wi;
        }
        loss += 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
        Ok((loss, grad))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    /// Accuracy per class present in the evaluation set.
    pub per_class: BTreeMap<usize, f64>,
    pub n: usize,
    /// Classes with no evaluation samples, left out of `per_class`.
    pub empty_classes: Vec<usize>,
}

/// Maps optional labels into class ids, appending a background class when
/// requested; unlabeled samples are otherwise dropped.
fn resolve(x: &Matrix, y: &[Option<usize>], classes: usize, background: bool) -> (Matrix, Vec<usize>) {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, l) in y.iter().enumerate() {
        let l = match (l, background) {
            (Some(c), _) => *c,
            (None, true) => classes,
            (None, false) => continue,
        };
        rows.extend_from_slice(x.row(i));
        labels.push(l);
    }
    (Matrix::from_vec(labels.len(), x.cols(), rows).expect("shape"), labels)
}

/// Trains on `(train_x, train_y)` and reports accuracy on the test split.
/// `classes` counts the foreground classes only.
pub fn linear_probe(
    train_x: &Matrix,
    train_y: &[Option<usize>],
    test_x: &Matrix,
    test_y: &[Option<usize>],
    classes: usize,
    config: &ProbeConfig,
) -> Result<(LinearProbe, ClassificationReport)> {
    if train_x.rows() != train_y.len() || test_x.rows() != test_y.len() {
        return Err(Error::invalid("probe features and labels differ in length"));
    }
    if train_x.cols() != test_x.cols() {
        return Err(Error::DimensionMismatch {
            expected: train_x.cols(),
            actual: test_x.cols(),
        });
    }
    if let Some(&label) = train_y.iter().chain(test_y).flatten().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    config.optimizer.validate()?;
    let total = classes + usize::from(config.background);
    let (mut x, mut y) = resolve(train_x, train_y, classes, config.background);
    if let Some(shots) = config.shots {
        (x, y) = first_per_class(&x, &y, total, shots);
    }
    if y.is_empty() {
        return Err(Error::invalid("probe training set is empty"));
    }
    let mut probe = LinearProbe::new(total, x.cols(), config.seed)?;
    fit_scaling(&mut probe, &x, config.scaling);
    let mut opt = Optimizer::new(config.optimizer, probe.params.len());
    let mut order: Vec<usize> = (0..y.len()).collect();
    let mut r = rng(config.seed ^ 0x9e0b_e000);
    let bs = config.batch_size.max(1);
    for _ in 0..config.epochs {
        order.shuffle(&mut r);
        for idx in order.chunks(bs) {
            let mut bx = Matrix::zeros(idx.len(), x.cols());
            for (k, &i) in idx.iter().enumerate() {
                bx.row_mut(k).copy_from_slice(x.row(i));
            }
            let by: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            let (_, g) = probe.loss_and_grad(&bx, &by, config.l2)?;
            opt.step(&mut probe.params, &g, 1.0);
        }
    }

    let (tx, ty) = resolve(test_x, test_y, classes, config.background);
    let preds = (0..tx.rows())
        .map(|i| probe.predict(tx.row(i)))
        .collect::<Result<Vec<_>>>()?;
    let report = score(&preds, &ty, total);
    for c in &report.empty_classes {
        log::warn!("probe class {c} has no evaluation samples; excluded from per-class scores");
    }
    Ok((probe, report))
}

fn fit_scaling(probe: &mut LinearProbe, x: &Matrix, scaling: Scaling) {
    let n = x.rows() as f64;
    let inv = |var: f64| if var > 1e-24 { 1.0 / var.sqrt() } else { 1.0 };
    let mut total = 0.0;
    for j in 0..x.cols() {
        let mean = x.iter_rows().map(|r| r[j]).sum::<f64>() / n;
        let var = x.iter_rows().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        probe.mean[j] = mean;
        total += var;
        if scaling == Scaling::PerFeature {
            probe.scale[j] = inv(var);
        }
    }
    if scaling == Scaling::Global {
        probe.scale.fill(inv(total));
    }
}

fn first_per_class(x: &Matrix, y: &[usize], classes: usize, shots: usize) -> (Matrix, Vec<usize>) {
    let mut seen = vec![0usize; classes];
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, &l) in y.iter().enumerate() {
        if seen[l] < shots {
            seen[l] += 1;
            rows.extend_from_slice(x.row(i));
            labels.push(l);
        }
    }
    (Matrix::from_vec(labels.len(), x.cols(), rows).expect("shape"), labels)
}

/// Overall and per-class accuracy; labels must be below `classes`.
pub fn score(preds: &[usize], labels: &[usize], classes: usize) -> ClassificationReport {
    let mut hits = vec![0usize; classes];
    let mut counts = vec![0usize; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        counts[y] += 1;
        hits[y] += usize::from(p == y);
    }
    let correct: usize = hits.iter().sum();
    ClassificationReport {
        accuracy: if labels.is_empty() {
            0.0
        } else {
            correct as f64 / labels.len() as f64
        },
        per_class: (0..classes)
            .filter(|&c| counts[c] > 0)
            .map(|c| (c, hits[c] as f64 / counts[c] as f64))
            .collect(),
        n: labels.len(),
        empty_classes: (0..classes).filter(|&c| counts[c] == 0).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut r = rng(seed);
            let n = Normal::new(0.0, 1.0).unwrap();
            let x = Matrix::from_vec(4, 5, (0..20).map(|_| n.sample(&mut r)).collect()).unwrap();
            let y: Vec<usize> = (0..4).map(|_| r.random_range(0..3)).collect();
            let mut p = LinearProbe::new(3, 5, seed).unwrap();
            p.mean = (0..5).map(|i| i as f64 * 0.1).collect();
            p.scale = (0..5).map(|i| 1.0 + i as f64 * 0.2).collect();
            let (_, g) = p.loss_and_grad(&x, &y, 0.01).unwrap();
            let err = gradcheck::check(
                |params| {
                    let mut q = p.clone();
                    q.params.copy_from_slice(params);
                    q.loss_and_grad(&x, &y, 0.01).unwrap().0
                },
                &p.params,
                &g,
                1e-5,
            );
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn separable_two_class() {
        let x = Matrix::from_rows(&[[-2.0, 0.1], [-1.5, -0.3], [1.7, 0.2], [2.2, -0.1]]).unwrap();
        let y = [Some(0), Some(0), Some(1), Some(1)];
        let (_, rep) = linear_probe(&x, &y, &x, &y, 2, &ProbeConfig::default()).unwrap();
        assert_eq!(rep.accuracy, 1.0);
    }

    #[test]
    fn shuffled_labels_are_near_chance() {
        let mut r = rng(17);
        let n = Normal::new(0.0, 1.0).unwrap();
        let rows = 2000;
        let x = Matrix::from_vec(rows, 8, (0..rows * 8).map(|_| n.sample(&mut r)).collect()).unwrap();
        let mut labels: Vec<usize> = (0..rows).map(|i| i % 10).collect();
        labels.shuffle(&mut r);
        let y: Vec<_> = labels.into_iter().map(Some).collect();
        let (train, test) = (1000, 1000);
        let tx = Matrix::from_vec(train, 8, x.as_slice()[..train * 8].to_vec()).unwrap();
        let ex = Matrix::from_vec(test, 8, x.as_slice()[train * 8..].to_vec()).unwrap();
        let (_, rep) = linear_probe(&tx, &y[..train], &ex, &y[train..], 10, &ProbeConfig::default()).unwrap();
        assert!((rep.accuracy - 0.10).abs() <= 0.03, "{}", rep.accuracy);
    }

    #[test]
    fn background_class_and_empty_classes() {
        let x = Matrix::from_rows(&[[-3.0], [0.0], [3.0], [-2.5], [0.2], [2.8]]).unwrap();
        let y = [Some(0), None, Some(1), Some(0), None, Some(1)];
        let cfg = ProbeConfig {
            background: true,
            epochs: 300,
            ..Default::default()
        };
        let (probe, rep) = linear_probe(&x, &y, &x, &y, 2, &cfg).unwrap();
        assert_eq!(probe.classes(), 3);
        assert_eq!(rep.n, 6);
        let test = [Some(0), Some(0), Some(0), Some(0), Some(0), Some(0)];
        let (_, rep) = linear_probe(&x, &y, &x, &test, 2, &cfg).unwrap();
        assert_eq!(rep.empty_classes, vec![1, 2]);
        assert_eq!(rep.per_class.keys().copied().collect::<Vec<_>>(), vec![0]);

        let dropped = linear_probe(&x, &y, &x, &y, 2, &ProbeConfig::default()).unwrap().1;
        assert_eq!(dropped.n, 4);
    }

    #[test]
    fn shots_cap_each_class() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [2.0], [3.0], [4.0]]).unwrap();
        let (sx, sy) = first_per_class(&x, &[1, 0, 1, 1, 0], 2, 2);
        assert_eq!(sy, vec![1, 0, 1, 0]);
        assert_eq!(sx.as_slice(), &[0.0, 1.0, 2.0, 4.0]);
        let y = [Some(0), Some(5)];
        let x2 = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        assert!(matches!(
            linear_probe(&x2, &y, &x2, &y, 2, &ProbeConfig::default()),
            Err(Error::LabelOutOfRange { label: 5, classes: 2 })
        ));
    }
}
