//! Downstream models over sequences of step embeddings.
//!
//! A video becomes a sequence of segment features `f(x'_1..L')`. The
//! transformer classifies the whole sequence (task recognition) or the
//! step after it (forecasting). Knowledge-base transfer interleaves each
//! segment feature with the language embedding of the step it matches, or
//! of that step's successor when forecasting.

mod probe;
mod transformer;

use std::ops::{Deref, Range};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use probe::{linear_probe, score, ClassificationReport, LinearProbe, ProbeConfig, Scaling};
pub use transformer::{Positional, Transformer, TransformerSpec};

use crate::corpus::KnowledgeBase;
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::math::{argmax, dot, rng, Matrix, SeededRng};
use crate::optim::{Optimizer, OptimizerConfig, StepDecay};
use crate::segment_model::SegmentModel;

/// Segments per window, as in the 8-clip downstream setting.
pub const DEFAULT_WINDOW: usize = 8;

/// One transformer input position.
#[derive(Debug, Clone, PartialEq)]
pub enum Token {
    Vector(Vec<f64>),
    /// Learned placeholder for a missing successor step.
    Null,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tokens(Vec<Token>);

impl Tokens {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self(tokens)
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self(m.iter_rows().map(|r| Token::Vector(r.to_vec())).collect())
    }

    pub fn into_inner(self) -> Vec<Token> {
        self.0
    }
}

impl Deref for Tokens {
    type Target = [Token];

    fn deref(&self) -> &[Token] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// `[f₁ … f_L']`
    Basic,
    /// `[f₁, e(ŷ₁), f₂, e(ŷ₂), …]`
    KbTransfer,
    /// `[f₁, e(succ(ŷ₁)), …]` with a null token where no successor exists.
    ForecastKb,
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(InputMode::Basic),
            "kb" | "kb_transfer" => Ok(InputMode::KbTransfer),
            "forecast" | "forecast_kb" => Ok(InputMode::ForecastKb),
            _ => Err(Error::Config(format!("unknown input mode {s:?}; expected basic, kb or forecast"))),
        }
    }
}

/// Segment features of one video, optionally paired with per-segment KB
/// vectors (`None` marks a missing successor).
#[derive(Debug, Clone, PartialEq)]
pub struct StepEmbeddingSequence {
    pub id: String,
    pub features: Matrix,
    pub kb: Option<Vec<Option<Vec<f64>>>>,
}

impl StepEmbeddingSequence {
    pub fn new(id: impl Into<String>, features: Matrix) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::invalid("step embedding sequence needs L' >= 1"));
        }
        Ok(Self {
            id: id.into(),
            features,
            kb: None,
        })
    }

    pub fn with_kb(mut self, kb: Vec<Option<Vec<f64>>>) -> Result<Self> {
        if kb.len() != self.features.rows() {
            return Err(Error::DimensionMismatch {
                expected: self.features.rows(),
                actual: kb.len(),
            });
        }
        for v in kb.iter().flatten() {
            if v.len() != self.features.cols() {
                return Err(Error::DimensionMismatch {
                    expected: self.features.cols(),
                    actual: v.len(),
                });
            }
        }
        self.kb = Some(kb);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    /// Rows `range` of the features and KB vectors.
    pub fn window(&self, range: Range<usize>) -> Result<Self> {
        if range.is_empty() || range.end > self.len() {
            return Err(Error::invalid(format!(
                "window {range:?} outside sequence of length {}",
                self.len()
            )));
        }
        let rows: Vec<&[f64]> = range.clone().map(|i| self.features.row(i)).collect();
        Ok(Self {
            id: self.id.clone(),
            features: Matrix::from_rows(&rows)?,
            kb: self.kb.as_ref().map(|kb| kb[range].to_vec()),
        })
    }
}

/// Token sequence for the transformer.
pub fn build_input(seq: &StepEmbeddingSequence, mode: InputMode) -> Result<Tokens> {
    let basic = || seq.features.iter_rows().map(|r| Token::Vector(r.to_vec()));
    if mode == InputMode::Basic {
        return Ok(Tokens(basic().collect()));
    }
    let kb = seq
        .kb
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("{mode:?} input needs KB vectors for {}", seq.id)))?;
    let mut out = Vec::with_capacity(2 * seq.len());
    for (f, k) in basic().zip(kb) {
        out.push(f);
        out.push(match (k, mode) {
            (Some(v), _) => Token::Vector(v.clone()),
            (None, InputMode::ForecastKb) => Token::Null,
            (None, _) => {
                return Err(Error::invalid("KB transfer needs a vector for every segment"));
            }
        });
    }
    Ok(Tokens(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetrievedStep {
    pub global_id: usize,
    pub task_id: usize,
    pub step_index: usize,
}

/// Matched step per input row: the classifier's most probable class, or
/// for a regressor the step row with the largest dot product with `f(x)`.
/// Ties go to the lowest global id.
pub fn retrieve_step(
    model: &SegmentModel,
    x: &Matrix,
    kb: &KnowledgeBase,
    steps: &EmbeddingTable,
) -> Result<Vec<RetrievedStep>> {
    let fwd = model.forward(x)?;
    let gids: Vec<usize> = match &fwd.probs {
        Some(p) => p.iter_rows().map(argmax).collect(),
        None => {
            if steps.dim() != fwd.features.cols() {
                return Err(Error::DimensionMismatch {
                    expected: steps.dim(),
                    actual: fwd.features.cols(),
                });
            }
            let table = steps.to_matrix();
            fwd.features
                .iter_rows()
                .map(|z| argmax(&table.iter_rows().map(|e| dot(e, z)).collect::<Vec<_>>()))
                .collect()
        }
    };
    gids.into_iter()
        .map(|g| {
            let s = kb.step(g).ok_or(Error::LabelOutOfRange {
                label: g,
                classes: kb.num_steps(),
            })?;
            Ok(RetrievedStep {
                global_id: g,
                task_id: s.task_id,
                step_index: s.step_index,
            })
        })
        .collect()
}

/// Per-segment KB vectors for `mode`: the matched step's embedding, or its
/// successor's (`None` at the end of a task).
pub fn kb_vectors(
    matched: &[usize],
    kb: &KnowledgeBase,
    steps: &EmbeddingTable,
    mode: InputMode,
) -> Result<Vec<Option<Vec<f64>>>> {
    if steps.len() != kb.num_steps() {
        return Err(Error::DimensionMismatch {
            expected: kb.num_steps(),
            actual: steps.len(),
        });
    }
    matched
        .iter()
        .map(|&g| {
            if g >= kb.num_steps() {
                return Err(Error::LabelOutOfRange {
                    label: g,
                    classes: kb.num_steps(),
                });
            }
            Ok(match mode {
                InputMode::Basic => None,
                InputMode::KbTransfer => Some(steps.row_f64(g)),
                InputMode::ForecastKb => kb.successor(g).map(|s| steps.row_f64(s)),
            })
        })
        .collect()
}

/// `clips` evenly spaced windows of `window` rows (one window when the
/// sequence is short).
pub fn clip_windows(len: usize, window: usize, clips: usize) -> Vec<Range<usize>> {
    let window = window.max(1);
    if len <= window || clips <= 1 {
        let w = window.min(len);
        let start = (len - w) / 2;
        return std::iter::once(start..start + w).collect();
    }
    let span = len - window;
    (0..clips)
        .map(|i| {
            let s = (i * span + (clips - 1) / 2) / (clips - 1);
            s..s + window
        })
        .collect()
}

/// A seeded random window of `window` rows.
pub fn random_window(r: &mut SeededRng, len: usize, window: usize) -> Range<usize> {
    if len <= window {
        return 0..len;
    }
    let s = r.random_range(0..=len - window);
    s..s + window
}

/// Observed history and the index of the unobserved segment to predict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForecastSample {
    pub history: Range<usize>,
    pub target: usize,
}

/// Every split of a length-`len` sequence into a non-empty history (at
/// most `max_history` trailing segments) and the next segment.
pub fn forecast_samples(len: usize, max_history: usize) -> Vec<ForecastSample> {
    let max_history = max_history.max(1);
    (1..len)
        .map(|target| ForecastSample {
            history: target.saturating_sub(max_history)..target,
            target,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongtermSample {
    pub tokens: Tokens,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LongtermTrainConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: StepDecay,
    /// Evaluate fixed 4-sample chunks of each batch on the rayon pool. The
    /// reduction order is the same as serial mode, so results are identical.
    pub parallel: bool,
}

impl Default for LongtermTrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::adamw(1e-3),
            epochs: 30,
            batch_size: 16,
            seed: 0,
            schedule: StepDecay::default(),
            parallel: true,
        }
    }
}

const CHUNK: usize = 4;

#[derive(Debug, Clone)]
pub struct TrainedTransformer {
    pub model: Transformer,
    pub loss_curve: Vec<f64>,
}

fn chunk_grad(
    model: &Transformer,
    data: &[LongtermSample],
    idx: &[usize],
    weight: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut g = vec![0.0; model.num_params()];
    let mut loss = 0.0;
    for &i in idx {
        loss += weight * model.loss_and_grad_into(&data[i].tokens, data[i].label, weight, &mut g)?;
    }
    Ok((loss, g))
}

/// Cross-entropy training with per-epoch seeded shuffling.
pub fn train_longterm(
    spec: TransformerSpec,
    data: &[LongtermSample],
    config: &LongtermTrainConfig,
) -> Result<TrainedTransformer> {
    if data.is_empty() {
        return Err(Error::invalid("long-term training set is empty"));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::invalid("batch size and epochs must be >= 1"));
    }
    config.optimizer.validate()?;
    for s in data {
        if s.label >= spec.classes {
            return Err(Error::LabelOutOfRange {
                label: s.label,
                classes: spec.classes,
            });
        }
    }
    let mut model = Transformer::new(spec, config.seed)?;
    let mut opt = Optimizer::new(config.optimizer, model.num_params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut r = rng(config.seed ^ 0x10e9_7e53);
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let frozen = model.frozen_range().unwrap_or(0..0);
    for epoch in 0..config.epochs {
        order.shuffle(&mut r);
        let scale = config.schedule.factor(epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(config.batch_size) {
            let w = 1.0 / batch.len() as f64;
            let parts: Vec<(f64, Vec<f64>)> = if config.parallel {
                batch
                    .par_chunks(CHUNK)
                    .map(|c| chunk_grad(&model, data, c, w))
                    .collect::<Result<_>>()?
            } else {
                batch
                    .chunks(CHUNK)
                    .map(|c| chunk_grad(&model, data, c, w))
                    .collect::<Result<_>>()?
            };
            let mut grad = vec![0.0; model.num_params()];
            let mut loss = 0.0;
            for (l, g) in parts {
                loss += l;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            epoch_loss += loss;
            batches += 1;
            opt.step_masked(model.params_mut(), &grad, scale, |i| frozen.contains(&i));
        }
        loss_curve.push(epoch_loss / batches as f64);
    }
    Ok(TrainedTransformer { model, loss_curve })
}

/// Class with the highest mean probability over the clips.
pub fn predict_ensemble(model: &Transformer, clips: &[Tokens]) -> Result<usize> {
    if clips.is_empty() {
        return Err(Error::invalid("ensemble needs at least one clip"));
    }
    let mut acc = vec![0.0; model.spec().classes];
    for c in clips {
        for (a, p) in acc.iter_mut().zip(model.probs(c)?) {
            *a += p;
        }
    }
    Ok(argmax(&acc))
}

/// Top-1 and per-class accuracy over labeled samples.
pub fn evaluate_samples(model: &Transformer, data: &[LongtermSample]) -> Result<ClassificationReport> {
    let preds = data
        .par_iter()
        .map(|s| model.predict(&s.tokens))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    Ok(probe::score(&preds, &labels, model.spec().classes))
}

/// Mean of the token rows: the bag-of-embeddings baseline input.
pub fn mean_pool(tokens: &Tokens, null: &[f64]) -> Vec<f64> {
    let d = null.len();
    let mut out = vec![0.0; d];
    for t in tokens.iter() {
        let v = match t {
            Token::Vector(v) => &v[..],
            Token::Null => null,
        };
        out.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
    if !tokens.is_empty() {
        out.iter_mut().for_each(|a| *a /= tokens.len() as f64);
    }
    out
}
