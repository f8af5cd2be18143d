//! Synthetic corpora with planted ground truth.
//!
//! Every step gets one anchor word of its own plus words shared across the
//! knowledge base. Narrations are the step text with words dropped and
//! distractors inserted. Segment features are a scaled one-hot of the true
//! step plus Gaussian noise. Hidden truth is kept apart from anything a
//! training stage reads.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::{DownstreamVideo, ExperimentData, Split};
use crate::corpus::{segment_key, KnowledgeBase, NarratedVideo, NarrationSegment};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::longterm::{LongtermSample, Tokens};
use crate::math::{rng, Matrix, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub tasks: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    pub vocab: usize,
    pub words_per_step: usize,
    /// Random vocabulary words inserted into each narration.
    pub distractors: usize,
    /// Probability of dropping each step word from a narration.
    pub drop_prob: f64,
    /// Words drawn once per video and repeated in all of its narrations.
    pub chatter_words: usize,
    pub videos_per_task: usize,
    /// Segments per narrated video; defaults to the task's step count.
    pub segments_per_video: Option<usize>,
    pub feature_dim: usize,
    pub signal: f64,
    pub noise: f64,
    /// Std of the per-video scene offset, shared by all segments of a video
    /// and confined to `scene_rank` fixed random directions.
    pub scene: f64,
    pub scene_rank: usize,
    /// Fraction of videos whose observed task id is replaced by another.
    pub task_id_noise: f64,
    /// Downstream activity classes per task, each skipping a different step.
    pub variants: usize,
    pub downstream_per_class: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            tasks: 10,
            min_steps: 5,
            max_steps: 5,
            vocab: 400,
            words_per_step: 4,
            distractors: 2,
            drop_prob: 0.1,
            chatter_words: 8,
            videos_per_task: 60,
            segments_per_video: None,
            feature_dim: 64,
            signal: 4.5,
            noise: 1.0,
            scene: 4.0,
            scene_rank: 4,
            task_id_noise: 0.0,
            variants: 2,
            downstream_per_class: 60,
            train_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("tasks", self.tasks),
            ("min_steps", self.min_steps),
            ("vocab", self.vocab),
            ("words_per_step", self.words_per_step),
            ("videos_per_task", self.videos_per_task),
            ("feature_dim", self.feature_dim),
            ("variants", self.variants),
            ("downstream_per_class", self.downstream_per_class),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("synthetic {name} must be >= 1")));
            }
        }
        if self.segments_per_video == Some(0) {
            return Err(Error::Config("synthetic segments_per_video must be >= 1".into()));
        }
        if self.max_steps < self.min_steps {
            return Err(Error::Config("synthetic max_steps < min_steps".into()));
        }
        for (name, p) in [
            ("drop_prob", self.drop_prob),
            ("task_id_noise", self.task_id_noise),
            ("train_fraction", self.train_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("synthetic {name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.noise >= 0.0 && self.scene >= 0.0 && self.signal.is_finite() && self.noise.is_finite() && self.scene.is_finite()) {
            return Err(Error::Config("synthetic noise and scene must be finite and >= 0".into()));
        }
        Ok(())
    }
}

const ONSETS: [&str; 15] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh",
];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Deterministic pronounceable word for index `i`; distinct for distinct
/// `i`.
pub fn synthetic_word(mut i: usize) -> String {
    let base = ONSETS.len() * NUCLEI.len();
    let mut w = String::new();
    loop {
        let s = i % base;
        w.push_str(ONSETS[s / NUCLEI.len()]);
        w.push_str(NUCLEI[s % NUCLEI.len()]);
        i /= base;
        if i == 0 {
            break;
        }
        i -= 1;
    }
    w
}

fn feature_row(r: &mut SeededRng, spec: &SyntheticSpec, gid: usize, noise: &Normal<f64>, scene: &[f64]) -> Vec<f64> {
    let mut row: Vec<f64> = scene.iter().map(|o| o + noise.sample(r)).collect();
    row[gid] += spec.signal;
    row
}

/// Fixed unit directions that per-video scene offsets are drawn along.
fn scene_basis(r: &mut SeededRng, spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    (0..spec.scene_rank)
        .map(|_| {
            let mut u: Vec<f64> = (0..spec.feature_dim).map(|_| unit.sample(r)).collect();
            crate::math::l2_normalize(&mut u);
            u
        })
        .collect()
}

fn scene_offset(r: &mut SeededRng, spec: &SyntheticSpec, basis: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; spec.feature_dim];
    if spec.scene == 0.0 {
        return out;
    }
    let coef = Normal::new(0.0, spec.scene).expect("validated std");
    for u in basis {
        let c = coef.sample(r);
        out.iter_mut().zip(u).for_each(|(o, x)| *o += c * x);
    }
    out
}

fn narrate(r: &mut SeededRng, spec: &SyntheticSpec, text: &str, vocab: &[String], chatter: &[usize]) -> String {
    let mut words: Vec<&str> = text
        .split(' ')
        .filter(|_| !r.random_bool(spec.drop_prob))
        .collect();
    let distractors = (0..spec.distractors).map(|_| r.random_range(0..vocab.len()));
    for w in distractors.collect::<Vec<_>>().into_iter().chain(chatter.iter().copied()) {
        let at = r.random_range(0..=words.len());
        words.insert(at, &vocab[w]);
    }
    words.join(" ")
}

/// Segment `i` of `len` covers step `i · n / len` of an `n`-step task.
fn step_at(i: usize, len: usize, n: usize) -> usize {
    i * n / len
}

/// Builds a planted-truth corpus. Same spec, same bytes.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<ExperimentData> {
    spec.validate()?;
    let mut r = rng(spec.seed);
    let lens: Vec<usize> = (0..spec.tasks)
        .map(|_| r.random_range(spec.min_steps..=spec.max_steps))
        .collect();
    let num_steps: usize = lens.iter().sum();
    let shared_needed = spec.words_per_step - 1;
    if spec.vocab < num_steps + shared_needed {
        return Err(Error::Config(format!(
            "vocabulary of {} words is too small for {num_steps} distinct steps of {} words",
            spec.vocab, spec.words_per_step
        )));
    }
    if spec.feature_dim < num_steps {
        return Err(Error::Config(format!(
            "feature_dim {} is smaller than the {num_steps} steps",
            spec.feature_dim
        )));
    }
    let vocab: Vec<String> = (0..spec.vocab).map(synthetic_word).collect();

    let mut gid = 0;
    let mut tasks = Vec::with_capacity(spec.tasks);
    for (t, &n) in lens.iter().enumerate() {
        let mut texts = Vec::with_capacity(n);
        for _ in 0..n {
            let mut words = vec![vocab[gid].as_str()];
            for i in index::sample(&mut r, spec.vocab - num_steps, shared_needed) {
                words.push(&vocab[num_steps + i]);
            }
            texts.push(words.join(" "));
            gid += 1;
        }
        tasks.push((format!("task {t} {}", synthetic_word(spec.vocab + t)), texts));
    }
    let kb = KnowledgeBase::from_tasks(tasks)?;

    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let basis = scene_basis(&mut r, spec);
    let chatter_pool = if spec.vocab > num_steps { num_steps..spec.vocab } else { 0..spec.vocab };
    let mut videos = Vec::new();
    let mut truth = BTreeMap::new();
    let mut keys = Vec::new();
    let mut rows = Vec::new();
    for (t, &n) in lens.iter().enumerate() {
        let first = kb.task_steps(t)?.start;
        for v in 0..spec.videos_per_task {
            let video_id = format!("pre{t:03}v{v:03}");
            let len = spec.segments_per_video.unwrap_or(n);
            let chatter: Vec<usize> = (0..spec.chatter_words)
                .map(|_| r.random_range(chatter_pool.clone()))
                .collect();
            let scene = scene_offset(&mut r, spec, &basis);
            let mut cursor = 0u64;
            let mut segments = Vec::with_capacity(len);
            for i in 0..len {
                let g = first + step_at(i, len, n);
                cursor += r.random_range(0..1000);
                let start_ms = cursor;
                cursor += r.random_range(3000..9000);
                let text = narrate(&mut r, spec, &kb.steps()[g].text, &vocab, &chatter);
                segments.push(NarrationSegment {
                    video_id: video_id.clone(),
                    segment_index: i,
                    start_ms,
                    end_ms: cursor,
                    text,
                });
                let key = segment_key(&video_id, i);
                truth.insert(key.clone(), g);
                rows.push(feature_row(&mut r, spec, g, &noise, &scene));
                keys.push(key);
            }
            let observed = if spec.tasks > 1 && r.random_bool(spec.task_id_noise) {
                let other = r.random_range(0..spec.tasks - 1);
                if other >= t {
                    other + 1
                } else {
                    other
                }
            } else {
                t
            };
            videos.push(NarratedVideo {
                video_id,
                segments,
                task_id: Some(observed),
            });
        }
    }
    let features = EmbeddingTable::from_rows(spec.feature_dim, keys, &rows)?;

    let mut downstream = Vec::new();
    let mut dkeys = Vec::new();
    let mut drows = Vec::new();
    for (t, &n) in lens.iter().enumerate() {
        let first = kb.task_steps(t)?.start;
        for variant in 0..spec.variants {
            let label = t * spec.variants + variant;
            let skip = (spec.variants > 1 && n > 1).then_some(variant % n);
            let steps: Vec<usize> = (0..n).filter(|&s| Some(s) != skip).map(|s| first + s).collect();
            let mut order: Vec<usize> = (0..spec.downstream_per_class).collect();
            order.shuffle(&mut r);
            let n_train = (spec.train_fraction * spec.downstream_per_class as f64).round() as usize;
            for (k, &rank) in order.iter().enumerate() {
                let video_id = format!("ds{label:03}v{k:03}");
                let scene = scene_offset(&mut r, spec, &basis);
                for (i, &g) in steps.iter().enumerate() {
                    dkeys.push(segment_key(&video_id, i));
                    drows.push(feature_row(&mut r, spec, g, &noise, &scene));
                }
                downstream.push(DownstreamVideo {
                    video_id,
                    label,
                    split: if rank < n_train { Split::Train } else { Split::Test },
                    segments: steps.len(),
                    steps: Some(steps.clone()),
                });
            }
        }
    }
    let downstream_features = EmbeddingTable::from_rows(spec.feature_dim, dkeys, &drows)?;

    Ok(ExperimentData {
        kb,
        videos,
        features,
        truth: Some(truth),
        downstream,
        downstream_features,
        downstream_classes: spec.tasks * spec.variants,
    })
}

/// Sequences in which one planted token `A` and one planted token `B` sit
/// among distractors; the label says whether `A` comes first. Every
/// sequence holds the same multiset of token types, so order is the only
/// signal. Labels alternate, giving exactly balanced splits for even sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrderTaskSpec {
    pub len: usize,
    pub dim: usize,
    pub distractor_types: usize,
    pub token_noise: f64,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for OrderTaskSpec {
    fn default() -> Self {
        Self {
            len: 8,
            dim: 16,
            distractor_types: 4,
            token_noise: 0.05,
            train: 800,
            test: 400,
            seed: 0,
        }
    }
}

pub struct OrderTask {
    pub train: Vec<LongtermSample>,
    pub test: Vec<LongtermSample>,
}

pub fn order_task(spec: &OrderTaskSpec) -> Result<OrderTask> {
    if spec.len < 2 || spec.dim == 0 || spec.distractor_types == 0 {
        return Err(Error::Config("order task needs len >= 2, dim >= 1 and >= 1 distractor".into()));
    }
    let mut r = rng(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let jitter = Normal::new(0.0, spec.token_noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut protos: Vec<Vec<f64>> = (0..2 + spec.distractor_types)
        .map(|_| (0..spec.dim).map(|_| unit.sample(&mut r)).collect())
        .collect();
    for p in &mut protos {
        crate::math::l2_normalize(p);
    }
    // Distractor types repeat in a fixed cyclic pattern so the bag of
    // types is identical across sequences.
    let sample = |label: usize, r: &mut SeededRng| {
        let pos = index::sample(r, spec.len, 2).into_vec();
        let (first, second) = (pos[0].min(pos[1]), pos[0].max(pos[1]));
        let (a, b) = if label == 1 { (first, second) } else { (second, first) };
        let mut m = Matrix::zeros(spec.len, spec.dim);
        let mut next = 0;
        for i in 0..spec.len {
            let proto = if i == a {
                0
            } else if i == b {
                1
            } else {
                next += 1;
                2 + (next - 1) % spec.distractor_types
            };
            for (o, p) in m.row_mut(i).iter_mut().zip(&protos[proto]) {
                *o = p + jitter.sample(r);
            }
        }
        LongtermSample {
            tokens: Tokens::from_matrix(&m),
            label,
        }
    };
    let train = (0..spec.train).map(|i| sample(i % 2, &mut r)).collect();
    let test = (0..spec.test).map(|i| sample(i % 2, &mut r)).collect();
    Ok(OrderTask { train, test })
}

/// Paired task for KB transfer: each class is a fixed sequence of steps;
/// features are noisy one-hots of the step, KB vectors are exact ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KbPairSpec {
    pub steps: usize,
    pub classes: usize,
    pub len: usize,
    pub signal: f64,
    pub noise: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for KbPairSpec {
    fn default() -> Self {
        Self {
            steps: 12,
            classes: 6,
            len: 4,
            signal: 1.0,
            noise: 0.8,
            train_per_class: 30,
            test_per_class: 30,
            seed: 0,
        }
    }
}

/// Labeled sequences with one-hot KB vectors attached.
pub struct KbPairTask {
    pub train: Vec<(crate::longterm::StepEmbeddingSequence, usize)>,
    pub test: Vec<(crate::longterm::StepEmbeddingSequence, usize)>,
}

pub fn kb_pair_task(spec: &KbPairSpec) -> Result<KbPairTask> {
    if spec.steps < spec.len || spec.classes == 0 || spec.len == 0 {
        return Err(Error::Config("kb pair task needs steps >= len >= 1 and classes >= 1".into()));
    }
    let mut r = rng(spec.seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let patterns: Vec<Vec<usize>> = (0..spec.classes)
        .map(|_| index::sample(&mut r, spec.steps, spec.len).into_vec())
        .collect();
    let make = |c: usize, k: usize, r: &mut SeededRng| -> Result<_> {
        let mut f = Matrix::zeros(spec.len, spec.steps);
        let mut kb = Vec::with_capacity(spec.len);
        for (i, &s) in patterns[c].iter().enumerate() {
            for o in f.row_mut(i).iter_mut() {
                *o = noise.sample(r);
            }
            f.row_mut(i)[s] += spec.signal;
            let mut one = vec![0.0; spec.steps];
            one[s] = 1.0;
            kb.push(Some(one));
        }
        let seq = crate::longterm::StepEmbeddingSequence::new(format!("c{c}k{k}"), f)?.with_kb(kb)?;
        Ok((seq, c))
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..spec.classes {
        for k in 0..spec.train_per_class {
            train.push(make(c, k, &mut r)?);
        }
    }
    for c in 0..spec.classes {
        for k in 0..spec.test_per_class {
            test.push(make(c, spec.train_per_class + k, &mut r)?);
        }
    }
    Ok(KbPairTask { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_are_distinct() {
        let words: std::collections::HashSet<String> = (0..20_000).map(synthetic_word).collect();
        assert_eq!(words.len(), 20_000);
    }

    #[test]
    fn counts_and_truth() {
        let data = generate_synthetic(&SyntheticSpec::default()).unwrap();
        assert_eq!(data.kb.num_steps(), 50);
        assert_eq!(data.kb.num_tasks(), 10);
        assert_eq!(data.videos.len(), 600);
        let truth = data.truth.as_ref().unwrap();
        assert_eq!(truth.len(), 3000);
        assert_eq!(data.features.len(), 3000);
        assert_eq!(data.downstream_classes, 20);
        assert_eq!(data.downstream.len(), 1200);
        // Variants of one task differ in exactly the skipped step.
        let a = data.downstream.iter().find(|v| v.label == 0).unwrap();
        let b = data.downstream.iter().find(|v| v.label == 1).unwrap();
        assert_eq!(a.steps.as_deref(), Some(&[1, 2, 3, 4][..]));
        assert_eq!(b.steps.as_deref(), Some(&[0, 2, 3, 4][..]));
    }

    #[test]
    fn zero_noise_narration_is_step_text() {
        let spec = SyntheticSpec {
            drop_prob: 0.0,
            distractors: 0,
            chatter_words: 0,
            ..Default::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let truth = data.truth.as_ref().unwrap();
        for v in &data.videos {
            for s in &v.segments {
                assert_eq!(s.text, data.kb.steps()[truth[&s.key()]].text);
            }
        }
    }

    #[test]
    fn deterministic_bytes() {
        let a = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let b = generate_synthetic(&SyntheticSpec::default()).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let c = generate_synthetic(&SyntheticSpec {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a.to_bytes().unwrap(), c.to_bytes().unwrap());
    }

    #[test]
    fn small_vocabulary_rejected() {
        let spec = SyntheticSpec {
            vocab: 40,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
        let bad = SyntheticSpec {
            drop_prob: 1.5,
            ..Default::default()
        };
        assert!(generate_synthetic(&bad).is_err());
    }

    #[test]
    fn task_id_corruption_rate() {
        let spec = SyntheticSpec {
            task_id_noise: 0.2,
            videos_per_task: 100,
            ..Default::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let wrong = data
            .videos
            .iter()
            .filter(|v| v.task_id != Some(v.video_id[3..6].parse().unwrap()))
            .count();
        let rate = wrong as f64 / data.videos.len() as f64;
        assert!((rate - 0.2).abs() < 0.04, "{rate}");
    }

    #[test]
    fn order_task_is_balanced_and_order_only() {
        let t = order_task(&OrderTaskSpec::default()).unwrap();
        assert_eq!(t.test.iter().filter(|s| s.label == 1).count(), 200);
        assert_eq!(t.train.len(), 800);
    }

    #[test]
    fn kb_pair_shapes() {
        let t = kb_pair_task(&KbPairSpec::default()).unwrap();
        assert_eq!(t.train.len(), 180);
        let (seq, _) = &t.train[0];
        assert_eq!(seq.len(), 4);
        assert_eq!(seq.kb.as_ref().unwrap().len(), 4);
    }
}
