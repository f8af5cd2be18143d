//! Downstream tasks on step-embedding sequences: video classification with
//! clip ensembling, and next-step forecasting.

use super::data::{DownstreamVideo, Split};
use crate::corpus::KnowledgeBase;
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::longterm::{
    build_input, clip_windows, evaluate_samples, forecast_samples, kb_vectors, predict_ensemble,
    score, train_longterm, ClassificationReport, InputMode, LongtermSample, LongtermTrainConfig,
    StepEmbeddingSequence, Tokens, Transformer, TransformerSpec,
};

#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamConfig {
    pub preset: String,
    pub window: usize,
    pub clips: usize,
    pub history: usize,
    pub train: LongtermTrainConfig,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            preset: "small".into(),
            window: crate::longterm::DEFAULT_WINDOW,
            clips: 4,
            history: crate::longterm::DEFAULT_WINDOW,
            train: LongtermTrainConfig::default(),
        }
    }
}

fn token_factor(input: InputMode) -> usize {
    if input == InputMode::Basic {
        1
    } else {
        2
    }
}

fn spec_for(cfg: &DownstreamConfig, classes: usize, token_dim: usize, len: usize) -> Result<TransformerSpec> {
    let mut spec = TransformerSpec::preset(&cfg.preset, classes)?.with_input_dim(token_dim);
    spec.max_len = spec.max_len.max(len);
    Ok(spec)
}

fn check_aligned(videos: &[DownstreamVideo], seqs: &[StepEmbeddingSequence]) -> Result<usize> {
    if videos.len() != seqs.len() {
        return Err(Error::DimensionMismatch {
            expected: videos.len(),
            actual: seqs.len(),
        });
    }
    seqs.first()
        .map(|s| s.features.cols())
        .ok_or_else(|| Error::invalid("no downstream videos"))
}

/// Attaches per-segment KB vectors for `input` given the matched global
/// step id of every segment.
pub fn attach_kb(
    seqs: Vec<StepEmbeddingSequence>,
    matched: &[Vec<usize>],
    kb: &KnowledgeBase,
    steps: &EmbeddingTable,
    input: InputMode,
) -> Result<Vec<StepEmbeddingSequence>> {
    if input == InputMode::Basic {
        return Ok(seqs);
    }
    seqs.into_iter()
        .zip(matched)
        .map(|(s, m)| s.with_kb(kb_vectors(m, kb, steps, input)?))
        .collect()
}

/// Trains on every clip window of the train videos; each test video is
/// classified by the mean prediction over its clips.
pub fn classify_videos(
    videos: &[DownstreamVideo],
    seqs: &[StepEmbeddingSequence],
    classes: usize,
    input: InputMode,
    cfg: &DownstreamConfig,
) -> Result<(Transformer, ClassificationReport)> {
    let token_dim = check_aligned(videos, seqs)?;
    let clips = |s: &StepEmbeddingSequence| -> Result<Vec<Tokens>> {
        clip_windows(s.len(), cfg.window, cfg.clips)
            .into_iter()
            .map(|w| build_input(&s.window(w)?, input))
            .collect()
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (v, s) in videos.iter().zip(seqs) {
        match v.split {
            Split::Train => {
                for tokens in clips(s)? {
                    train.push(LongtermSample { tokens, label: v.label });
                }
            }
            Split::Test => test.push((clips(s)?, v.label)),
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("video classification needs train and test videos"));
    }
    let spec = spec_for(cfg, classes, token_dim, cfg.window * token_factor(input))?;
    let model = train_longterm(spec, &train, &cfg.train)?.model;
    let preds = test
        .iter()
        .map(|(c, _)| predict_ensemble(&model, c))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = test.iter().map(|t| t.1).collect();
    let report = score(&preds, &labels, classes);
    Ok((model, report))
}

/// Next-step classification over global step ids. Every split of each
/// video into a non-empty history and the following segment is a sample.
pub fn forecast_steps(
    videos: &[DownstreamVideo],
    seqs: &[StepEmbeddingSequence],
    num_steps: usize,
    input: InputMode,
    cfg: &DownstreamConfig,
) -> Result<(Transformer, ClassificationReport)> {
    if input == InputMode::KbTransfer {
        return Err(Error::Config("forecasting input must be basic or forecast_kb".into()));
    }
    let token_dim = check_aligned(videos, seqs)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (v, s) in videos.iter().zip(seqs) {
        let steps = v
            .steps
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("video {} has no step annotation", v.video_id)))?;
        for fs in forecast_samples(s.len(), cfg.history) {
            let label = steps[fs.target];
            if label >= num_steps {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: num_steps,
                });
            }
            let sample = LongtermSample {
                tokens: build_input(&s.window(fs.history)?, input)?,
                label,
            };
            match v.split {
                Split::Train => train.push(sample),
                Split::Test => test.push(sample),
            }
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid(
            "forecasting needs videos of at least two segments in both splits",
        ));
    }
    let spec = spec_for(cfg, num_steps, token_dim, cfg.history.max(1) * token_factor(input))?;
    let model = train_longterm(spec, &train, &cfg.train)?.model;
    let report = evaluate_samples(&model, &test)?;
    Ok((model, report))
}
