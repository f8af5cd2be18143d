//! Segment-level model `f(x)` over precomputed segment features.
//!
//! A trunk (linear or one-hidden-layer GELU MLP) maps `D_in` inputs to a
//! `d`-dimensional step embedding. The classifier head adds a linear map to
//! `S` logits with softmax; the regressor head is the identity, so its
//! output lives in the language-embedding space of the step table.
//!
//! Parameters are one flat `f64` vector; gradients are hand-derived and
//! checked against central finite differences in the tests.

mod loss;

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use loss::{
    grad_dist_match, grad_step_ce, grad_step_nce, loss_dist_match, loss_step_ce, loss_step_nce,
    sample_negatives, truncate_target, KlLoss, Negatives, PROB_FLOOR,
};

use crate::assignment::{Assignment, StepDistribution};
use crate::checkpoint;
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::math::{
    affine, affine_backward, gelu, gelu_grad, init_uniform, rng, softmax_in_place, Matrix,
};
use crate::optim::{Optimizer, OptimizerConfig, StepDecay};

const MAGIC: &[u8; 4] = b"SWSM";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trunk {
    Linear,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Classifier { classes: usize },
    Regressor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentModelSpec {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub trunk: Trunk,
    pub head: Head,
}

impl SegmentModelSpec {
    pub fn classifier(input_dim: usize, embed_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            embed_dim,
            trunk: Trunk::Linear,
            head: Head::Classifier { classes },
        }
    }

    pub fn regressor(input_dim: usize, embed_dim: usize) -> Self {
        Self {
            input_dim,
            embed_dim,
            trunk: Trunk::Linear,
            head: Head::Regressor,
        }
    }

    pub fn with_trunk(mut self, trunk: Trunk) -> Self {
        self.trunk = trunk;
        self
    }

    fn validate(&self) -> Result<()> {
        let zero = self.input_dim == 0
            || self.embed_dim == 0
            || matches!(self.trunk, Trunk::Mlp { hidden: 0 })
            || matches!(self.head, Head::Classifier { classes: 0 });
        if zero {
            return Err(Error::invalid(format!("segment model dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// Offsets of each tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    hidden: Option<(Range<usize>, Range<usize>)>,
    w: Range<usize>,
    b: Range<usize>,
    head: Option<(Range<usize>, Range<usize>)>,
    total: usize,
}

impl Layout {
    fn new(spec: &SegmentModelSpec) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let (hidden, trunk_in) = match spec.trunk {
            Trunk::Linear => (None, spec.input_dim),
            Trunk::Mlp { hidden } => (
                Some((take(hidden * spec.input_dim), take(hidden))),
                hidden,
            ),
        };
        let w = take(spec.embed_dim * trunk_in);
        let b = take(spec.embed_dim);
        let head = match spec.head {
            Head::Classifier { classes } => Some((take(classes * spec.embed_dim), take(classes))),
            Head::Regressor => None,
        };
        Self {
            hidden,
            w,
            b,
            head,
            total: at,
        }
    }
}

/// Output of a forward pass over a batch.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `f(x)`: the trunk output, `batch × d`.
    pub features: Matrix,
    /// Pre-softmax scores, classifier only.
    pub logits: Option<Matrix>,
    /// Softmax of `logits`, classifier only.
    pub probs: Option<Matrix>,
    hidden_pre: Option<Matrix>,
}

impl Forward {
    /// What the loss is taken on: probabilities or regressor embeddings.
    pub fn head_output(&self) -> &Matrix {
        self.probs.as_ref().unwrap_or(&self.features)
    }
}

/// Supervision target for one batch, as consumed by the loss functions.
#[derive(Debug, Clone)]
pub enum LossTarget<'a> {
    Ce(&'a [usize]),
    Dist(&'a [StepDistribution]),
    Nce {
        positives: &'a [usize],
        steps: &'a Matrix,
        negatives: &'a Negatives,
        include_positive: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub value: f64,
    pub grad: Vec<f64>,
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentModel {
    spec: SegmentModelSpec,
    params: Vec<f64>,
}

impl SegmentModel {
    /// Seeded uniform(±1/√fan_in) initialization.
    pub fn new(spec: SegmentModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        let mut params = vec![0.0; layout.total];
        let mut r = rng(seed);
        if let Some((w, b)) = &layout.hidden {
            init_uniform(&mut r, &mut params[w.clone()], spec.input_dim);
            init_uniform(&mut r, &mut params[b.clone()], spec.input_dim);
        }
        let trunk_in = match spec.trunk {
            Trunk::Linear => spec.input_dim,
            Trunk::Mlp { hidden } => hidden,
        };
        init_uniform(&mut r, &mut params[layout.w.clone()], trunk_in);
        init_uniform(&mut r, &mut params[layout.b.clone()], trunk_in);
        if let Some((w, b)) = &layout.head {
            init_uniform(&mut r, &mut params[w.clone()], spec.embed_dim);
            init_uniform(&mut r, &mut params[b.clone()], spec.embed_dim);
        }
        Ok(Self { spec, params })
    }

    pub fn zeros(spec: SegmentModelSpec) -> Result<Self> {
        spec.validate()?;
        let n = Layout::new(&spec).total;
        Ok(Self {
            spec,
            params: vec![0.0; n],
        })
    }

    pub fn from_params(spec: SegmentModelSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let n = Layout::new(&spec).total;
        if params.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: params.len(),
            });
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &SegmentModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.spec.head {
            Head::Classifier { classes } => Some(classes),
            Head::Regressor => None,
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Forward> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec.input_dim,
                actual: x.cols(),
            });
        }
        if !x.all_finite() {
            return Err(Error::invalid("segment features contain non-finite values"));
        }
        let layout = Layout::new(&self.spec);
        let p = &self.params;
        let n = x.rows();
        let d = self.spec.embed_dim;

        let hidden_pre = layout.hidden.as_ref().map(|(w, b)| {
            let h = b.len();
            let mut pre = Matrix::zeros(n, h);
            for i in 0..n {
                affine(&p[w.clone()], &p[b.clone()], x.row(i), pre.row_mut(i));
            }
            pre
        });
        let mut features = Matrix::zeros(n, d);
        let mut act = vec![0.0; hidden_pre.as_ref().map_or(0, |m| m.cols())];
        for i in 0..n {
            let input = match &hidden_pre {
                Some(pre) => {
                    for (a, z) in act.iter_mut().zip(pre.row(i)) {
                        *a = gelu(*z);
                    }
                    &act[..]
                }
                None => x.row(i),
            };
            affine(&p[layout.w.clone()], &p[layout.b.clone()], input, features.row_mut(i));
        }
        let (logits, probs) = match &layout.head {
            Some((w, b)) => {
                let mut logits = Matrix::zeros(n, b.len());
                for i in 0..n {
                    affine(&p[w.clone()], &p[b.clone()], features.row(i), logits.row_mut(i));
                }
                let mut probs = logits.clone();
                for i in 0..n {
                    softmax_in_place(probs.row_mut(i));
                }
                (Some(logits), Some(probs))
            }
            None => (None, None),
        };
        Ok(Forward {
            features,
            logits,
            probs,
            hidden_pre,
        })
    }

    /// `f(x)` only.
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.features)
    }

    /// Backpropagates `d_out` (gradient w.r.t. logits for the classifier,
    /// w.r.t. the embedding for the regressor) into a flat gradient.
    pub fn backward(&self, x: &Matrix, fwd: &Forward, d_out: &Matrix) -> Vec<f64> {
        let layout = Layout::new(&self.spec);
        let p = &self.params;
        let mut g = vec![0.0; layout.total];
        let d = self.spec.embed_dim;
        let mut df = vec![0.0; d];
        let hidden_w = layout.hidden.as_ref().map_or(0, |(_, b)| b.len());
        let mut act = vec![0.0; hidden_w];
        let mut dact = vec![0.0; hidden_w];
        for i in 0..x.rows() {
            match &layout.head {
                Some((w, b)) => {
                    df.iter_mut().for_each(|v| *v = 0.0);
                    let (gw, gb) = split_two(&mut g, w, b);
                    affine_backward(
                        &p[w.clone()],
                        fwd.features.row(i),
                        d_out.row(i),
                        gw,
                        gb,
                        Some(&mut df),
                    );
                }
                None => df.copy_from_slice(d_out.row(i)),
            }
            match (&layout.hidden, &fwd.hidden_pre) {
                (Some((hw, hb)), Some(pre)) => {
                    for (a, z) in act.iter_mut().zip(pre.row(i)) {
                        *a = gelu(*z);
                    }
                    dact.iter_mut().for_each(|v| *v = 0.0);
                    let (gw, gb) = split_two(&mut g, &layout.w, &layout.b);
                    affine_backward(&p[layout.w.clone()], &act, &df, gw, gb, Some(&mut dact));
                    for (da, z) in dact.iter_mut().zip(pre.row(i)) {
                        *da *= gelu_grad(*z);
                    }
                    let (gw, gb) = split_two(&mut g, hw, hb);
                    affine_backward(&p[hw.clone()], x.row(i), &dact, gw, gb, None);
                }
                _ => {
                    let (gw, gb) = split_two(&mut g, &layout.w, &layout.b);
                    affine_backward(&p[layout.w.clone()], x.row(i), &df, gw, gb, None);
                }
            }
        }
        g
    }

    /// Batch-mean loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, x: &Matrix, target: &LossTarget) -> Result<BatchLoss> {
        let fwd = self.forward(x)?;
        let (value, d_out, clamped) = match (target, &fwd.probs) {
            (LossTarget::Ce(labels), Some(probs)) => {
                (loss_step_ce(probs, labels)?, grad_step_ce(probs, labels)?, 0)
            }
            (LossTarget::Dist(targets), Some(probs)) => {
                let kl = loss_dist_match(probs, targets)?;
                (kl.value, grad_dist_match(probs, targets)?, kl.clamped)
            }
            (
                LossTarget::Nce {
                    positives,
                    steps,
                    negatives,
                    include_positive,
                },
                None,
            ) => (
                loss_step_nce(&fwd.features, positives, steps, negatives, *include_positive)?,
                grad_step_nce(&fwd.features, positives, steps, negatives, *include_positive)?,
                0,
            ),
            (LossTarget::Nce { .. }, Some(_)) => {
                return Err(Error::invalid("NCE needs a regressor head"))
            }
            (_, None) => return Err(Error::invalid("CE and KL objectives need a classifier head")),
        };
        Ok(BatchLoss {
            value,
            grad: self.backward(x, &fwd, &d_out),
            clamped,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, MAGIC, &self.spec, &self.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (spec, params) = checkpoint::load(path, MAGIC)?;
        Self::from_params(spec, params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(MAGIC, &self.spec, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (spec, params) = checkpoint::decode(MAGIC, bytes)?;
        Self::from_params(spec, params)
    }
}

fn split_two<'a>(
    g: &'a mut [f64],
    a: &Range<usize>,
    b: &Range<usize>,
) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert_eq!(a.end, b.start);
    let (left, right) = g[a.start..b.end].split_at_mut(a.len());
    (left, right)
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    /// Cross-entropy on the argmax pseudo-label.
    StepCe,
    /// KL to the top-`k` step distribution.
    DistMatch { k: usize },
    /// Contrastive regression onto the step table. `negatives: None` uses
    /// every other step; `Some(m)` samples `m` per example.
    StepNce {
        negatives: Option<usize>,
        #[serde(default)]
        include_positive: bool,
    },
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Objective::StepCe => write!(f, "ce"),
            Objective::DistMatch { k } => write!(f, "kl{k}"),
            Objective::StepNce { negatives: None, .. } => write!(f, "nce"),
            Objective::StepNce { negatives: Some(m), .. } => write!(f, "nce:{m}"),
        }
    }
}

/// `ce`, `kl` (K = 3), `klK`, `nce`, or `nce:M`.
impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown objective {s:?}; expected ce, klK, nce or nce:M"));
        match s {
            "ce" | "step_ce" => return Ok(Objective::StepCe),
            "kl" | "dist_match" => return Ok(Objective::DistMatch { k: 3 }),
            "nce" | "step_nce" => {
                return Ok(Objective::StepNce {
                    negatives: None,
                    include_positive: false,
                })
            }
            _ => {}
        }
        if let Some(k) = s.strip_prefix("kl") {
            let k: usize = k.parse().map_err(|_| bad())?;
            if k == 0 {
                return Err(bad());
            }
            return Ok(Objective::DistMatch { k });
        }
        if let Some(m) = s.strip_prefix("nce:") {
            let m: usize = m.parse().map_err(|_| bad())?;
            if m == 0 {
                return Err(Error::invalid("NCE needs at least one negative"));
            }
            return Ok(Objective::StepNce {
                negatives: Some(m),
                include_positive: false,
            });
        }
        Err(bad())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentTrainConfig {
    pub objective: Objective,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub schedule: StepDecay,
    /// Splits each batch into fixed chunks reduced in order on the rayon pool.
    pub parallel: bool,
}

impl Default for SegmentTrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::DistMatch { k: 3 },
            optimizer: OptimizerConfig::sgd(0.01),
            batch_size: 32,
            epochs: 30,
            seed: 0,
            schedule: StepDecay::default(),
            parallel: false,
        }
    }
}

const PARALLEL_CHUNK: usize = 16;

/// Segment features paired with their pseudo-label distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentDataset {
    pub ids: Vec<String>,
    pub features: Matrix,
    pub targets: Vec<StepDistribution>,
}

impl SegmentDataset {
    pub fn new(ids: Vec<String>, features: Matrix, targets: Vec<StepDistribution>) -> Result<Self> {
        if ids.len() != features.rows() || targets.len() != features.rows() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                actual: targets.len().min(ids.len()),
            });
        }
        Ok(Self {
            ids,
            features,
            targets,
        })
    }

    /// Joins labeled segments with a feature table keyed by `video#idx`.
    pub fn from_assignment(assignment: &Assignment, features: &EmbeddingTable) -> Result<Self> {
        let mut missing = Vec::new();
        let mut rows = Vec::with_capacity(assignment.records.len());
        let mut ids = Vec::with_capacity(assignment.records.len());
        let mut targets = Vec::with_capacity(assignment.records.len());
        for rec in &assignment.records {
            let key = rec.key();
            match features.get_f64(&key) {
                Some(row) => {
                    rows.push(row);
                    targets.push(rec.distribution.clone());
                    ids.push(key);
                }
                None => missing.push(key),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingEmbeddings {
                count: missing.len(),
                first: missing.into_iter().take(10).collect(),
            });
        }
        let features = if rows.is_empty() {
            Matrix::zeros(0, features.dim())
        } else {
            Matrix::from_rows(&rows)?
        };
        Self::new(ids, features, targets)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn gather(&self, idx: &[usize]) -> (Matrix, Vec<StepDistribution>) {
        let mut x = Matrix::zeros(idx.len(), self.features.cols());
        for (r, &i) in idx.iter().enumerate() {
            x.row_mut(r).copy_from_slice(self.features.row(i));
        }
        (x, idx.iter().map(|&i| self.targets[i].clone()).collect())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedSegmentModel {
    pub model: SegmentModel,
    /// Mean minibatch loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Total KL terms whose model probability hit the floor.
    pub clamped: usize,
}

/// Owned per-batch target, sliced into a [`LossTarget`] per chunk.
enum BatchTarget {
    Ce(Vec<usize>),
    Dist(Vec<StepDistribution>),
    Nce(Vec<usize>, Negatives),
}

fn batch_loss(
    model: &SegmentModel,
    x: &Matrix,
    target: &BatchTarget,
    steps: Option<&Matrix>,
    include_positive: bool,
    parallel: bool,
) -> Result<BatchLoss> {
    let eval = |r: Range<usize>| -> Result<BatchLoss> {
        let mut sub = Matrix::zeros(r.len(), x.cols());
        for (k, i) in r.clone().enumerate() {
            sub.row_mut(k).copy_from_slice(x.row(i));
        }
        match target {
            BatchTarget::Ce(l) => model.loss_and_grad(&sub, &LossTarget::Ce(&l[r])),
            BatchTarget::Dist(t) => model.loss_and_grad(&sub, &LossTarget::Dist(&t[r])),
            BatchTarget::Nce(p, neg) => {
                let negatives = match neg {
                    Negatives::All => Negatives::All,
                    Negatives::Sampled(s) => Negatives::Sampled(s[r.clone()].to_vec()),
                };
                let steps = steps.ok_or_else(|| Error::invalid("NCE needs a step table"))?;
                model.loss_and_grad(
                    &sub,
                    &LossTarget::Nce {
                        positives: &p[r],
                        steps,
                        negatives: &negatives,
                        include_positive,
                    },
                )
            }
        }
    };
    let n = x.rows();
    if !parallel || n <= PARALLEL_CHUNK {
        return eval(0..n);
    }
    let chunks: Vec<Range<usize>> = (0..n)
        .step_by(PARALLEL_CHUNK)
        .map(|s| s..(s + PARALLEL_CHUNK).min(n))
        .collect();
    let parts: Vec<(usize, BatchLoss)> = chunks
        .into_par_iter()
        .map(|r| eval(r.clone()).map(|l| (r.len(), l)))
        .collect::<Result<_>>()?;
    // Chunk means reweighted and summed in chunk order.
    let mut total = BatchLoss {
        value: 0.0,
        grad: vec![0.0; model.num_params()],
        clamped: 0,
    };
    for (len, part) in parts {
        let w = len as f64 / n as f64;
        total.value += w * part.value;
        for (g, pg) in total.grad.iter_mut().zip(&part.grad) {
            *g += w * pg;
        }
        total.clamped += part.clamped;
    }
    Ok(total)
}

/// Minibatch training with a per-epoch seeded shuffle.
///
/// `steps` is the step-embedding table, required by the NCE objective (rows
/// addressed by global id, width equal to the model's `embed_dim`).
pub fn train(
    spec: SegmentModelSpec,
    data: &SegmentDataset,
    steps: Option<&EmbeddingTable>,
    config: &SegmentTrainConfig,
) -> Result<TrainedSegmentModel> {
    if data.is_empty() {
        return Err(Error::invalid("segment training set is empty"));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::invalid("batch size and epochs must be >= 1"));
    }
    config.optimizer.validate()?;
    let step_matrix = match config.objective {
        Objective::StepNce { negatives, .. } => {
            if !matches!(spec.head, Head::Regressor) {
                return Err(Error::invalid("NCE training needs a regressor head"));
            }
            if negatives == Some(0) {
                return Err(Error::invalid("NCE needs at least one negative"));
            }
            let table = steps.ok_or_else(|| Error::invalid("NCE training needs a step table"))?;
            if table.dim() != spec.embed_dim {
                return Err(Error::DimensionMismatch {
                    expected: spec.embed_dim,
                    actual: table.dim(),
                });
            }
            Some(table.to_matrix())
        }
        _ => {
            if !matches!(spec.head, Head::Classifier { .. }) {
                return Err(Error::invalid("CE and KL training need a classifier head"));
            }
            None
        }
    };
    let include_positive = matches!(
        config.objective,
        Objective::StepNce {
            include_positive: true,
            ..
        }
    );

    let mut model = SegmentModel::new(spec, config.seed)?;
    let mut opt = Optimizer::new(config.optimizer, model.num_params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = rng(config.seed ^ 0x5eed_5e9d);
    let mut neg_rng = rng(config.seed ^ 0x0e9a_7175);
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut clamped = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let scale = config.schedule.factor(epoch);
        let mut sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(config.batch_size) {
            let (x, dists) = data.gather(idx);
            let target = match config.objective {
                Objective::StepCe => BatchTarget::Ce(dists.iter().map(|d| d.argmax()).collect()),
                Objective::DistMatch { k } => {
                    BatchTarget::Dist(dists.iter().map(|d| truncate_target(d, k)).collect())
                }
                Objective::StepNce { negatives, .. } => {
                    let pos: Vec<usize> = dists.iter().map(|d| d.argmax()).collect();
                    let neg = match negatives {
                        None => Negatives::All,
                        Some(m) => sample_negatives(
                            &mut neg_rng,
                            &pos,
                            step_matrix.as_ref().map_or(0, |m| m.rows()),
                            m,
                        )?,
                    };
                    BatchTarget::Nce(pos, neg)
                }
            };
            let bl = batch_loss(
                &model,
                &x,
                &target,
                step_matrix.as_ref(),
                include_positive,
                config.parallel,
            )?;
            sum += bl.value;
            batches += 1;
            clamped += bl.clamped;
            opt.step(model.params_mut(), &bl.grad, scale);
        }
        loss_curve.push(sum / batches as f64);
    }
    if clamped > 0 {
        log::warn!("{clamped} KL terms clamped at model probability {PROB_FLOOR:e}");
    }
    Ok(TrainedSegmentModel {
        model,
        loss_curve,
        clamped,
    })
}
