//! Distant supervision: turn each narration into a distribution over
//! knowledge-base steps and a hard pseudo-label.
//!
//! The similarity between a narration and a step is the dot product of their
//! sentence embeddings. A softmax over all candidate steps gives
//! `P(step | segment)`; the `K` most probable steps are kept and their mass is
//! renormalized to one. The pseudo-label is the most probable step.
//!
//! Three baseline label sources share the same output shape: the video's
//! (possibly wrong) task id, k-means clusters of the narration embeddings, and
//! steps restricted to the video's own task.

mod kmeans;

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans, kmeans_asr_labels, KMeans};

use crate::corpus::{KnowledgeBase, NarratedVideo};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::math::{dot, Matrix};

/// Default top-K truncation width.
pub const DEFAULT_TOP_K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepProb {
    pub global_id: usize,
    pub p: f64,
}

/// Top-K truncated `P(step | segment)`, sorted by descending probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDistribution {
    pub entries: Vec<StepProb>,
    pub k: usize,
    /// Probability mass of the kept entries before renormalization.
    pub retained_mass: f64,
}

impl StepDistribution {
    pub fn one_hot(global_id: usize) -> Self {
        Self {
            entries: vec![StepProb { global_id, p: 1.0 }],
            k: 1,
            retained_mass: 1.0,
        }
    }

    /// Most probable id; ties go to the lowest id.
    pub fn argmax(&self) -> usize {
        let mut best = self.entries[0];
        for e in &self.entries[1..] {
            if e.p > best.p || (e.p == best.p && e.global_id < best.global_id) {
                best = *e;
            }
        }
        best.global_id
    }

    pub fn prob(&self, global_id: usize) -> f64 {
        self.entries
            .iter()
            .find(|e| e.global_id == global_id)
            .map_or(0.0, |e| e.p)
    }
}

/// The step that best describes a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub best: usize,
    pub best_task: usize,
    pub best_step: usize,
}

pub fn argmax_step(dist: &StepDistribution, kb: &KnowledgeBase) -> Result<PseudoLabel> {
    if dist.entries.is_empty() {
        return Err(Error::invalid("empty step distribution"));
    }
    let best = dist.argmax();
    let step = kb
        .step(best)
        .ok_or(Error::LabelOutOfRange {
            label: best,
            classes: kb.num_steps(),
        })?;
    Ok(PseudoLabel {
        best,
        best_task: step.task_id,
        best_step: step.step_index,
    })
}

/// Softmax over `sims` (shifted by the max for stability), truncated to the
/// `k` largest entries and renormalized. Entry `i` is reported as id
/// `id_offset + i`. Selection is exact: ties in similarity go to the lower id.
pub fn distribution_from_similarities(
    sims: &[f64],
    id_offset: usize,
    k: usize,
) -> Result<StepDistribution> {
    if sims.is_empty() {
        return Err(Error::invalid("no candidate steps"));
    }
    if k < 1 {
        return Err(Error::invalid("top-K width must be at least 1"));
    }
    if let Some(i) = sims.iter().position(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("non-finite similarity for step {i}")));
    }
    let k = k.min(sims.len());
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let by_rank = |a: &usize, b: &usize| sims[*b].total_cmp(&sims[*a]).then(a.cmp(b));
    let mut order: Vec<usize> = (0..sims.len()).collect();
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, by_rank);
        order.truncate(k);
    }
    order.sort_unstable_by(by_rank);

    let total: f64 = sims.iter().map(|s| (s - max).exp()).sum();
    let weights: Vec<f64> = order.iter().map(|&i| (sims[i] - max).exp()).collect();
    let kept: f64 = weights.iter().sum();
    let entries = order
        .iter()
        .zip(&weights)
        .map(|(&i, w)| StepProb {
            global_id: id_offset + i,
            p: w / kept,
        })
        .collect();
    Ok(StepDistribution {
        entries,
        k,
        retained_mass: kept / total,
    })
}

/// Distribution over the steps in `candidates` (all steps when `None`) for
/// one narration embedding.
pub fn step_distribution(
    narr: &[f64],
    steps: &EmbeddingTable,
    k: usize,
    candidates: Option<Range<usize>>,
) -> Result<StepDistribution> {
    if narr.len() != steps.dim() {
        return Err(Error::DimensionMismatch {
            expected: steps.dim(),
            actual: narr.len(),
        });
    }
    let range = candidates.unwrap_or(0..steps.len());
    if range.end > steps.len() || range.is_empty() {
        return Err(Error::invalid(format!(
            "candidate range {range:?} outside the {} step rows",
            steps.len()
        )));
    }
    let sims: Vec<f64> = range
        .clone()
        .map(|g| {
            steps
                .row(g)
                .iter()
                .zip(narr)
                .map(|(&s, n)| s as f64 * n)
                .sum()
        })
        .collect();
    distribution_from_similarities(&sims, range.start, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SupervisionMode {
    /// Softmax over every knowledge-base step.
    Full,
    /// Softmax over the steps of the video's task only.
    TaskRestricted,
    /// The video's task id as the class.
    TaskId,
    /// k-means cluster of the narration embedding as the class.
    AsrKmeans { clusters: usize, iters: usize, seed: u64 },
}

impl SupervisionMode {
    pub fn label_space(&self) -> LabelSpace {
        match self {
            SupervisionMode::Full | SupervisionMode::TaskRestricted => LabelSpace::Steps,
            SupervisionMode::TaskId => LabelSpace::Tasks,
            SupervisionMode::AsrKmeans { .. } => LabelSpace::Clusters,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSpace {
    Steps,
    Tasks,
    Clusters,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignmentConfig {
    pub k: usize,
    pub mode: SupervisionMode,
}

impl Default for AssignmentConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_TOP_K,
            mode: SupervisionMode::Full,
        }
    }
}

/// The supervision attached to one narrated segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSegment {
    pub video_id: String,
    pub segment_index: usize,
    pub start_ms: u64,
    pub end_ms: u64,
    pub distribution: StepDistribution,
}

impl LabeledSegment {
    pub fn key(&self) -> String {
        crate::corpus::segment_key(&self.video_id, self.segment_index)
    }

    pub fn label(&self) -> usize {
        self.distribution.argmax()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub label_space: LabelSpace,
    pub num_classes: usize,
    pub records: Vec<LabeledSegment>,
    pub processed: usize,
    pub skipped_empty: usize,
}

/// Labels every non-empty segment of `videos`, in `(video, segment)` order.
///
/// Narration rows are looked up by segment key (`video#index`); step rows are
/// addressed by position, so `steps` must hold one row per global step id.
pub fn assign_corpus(
    videos: &[NarratedVideo],
    narrations: &EmbeddingTable,
    steps: &EmbeddingTable,
    kb: &KnowledgeBase,
    config: &AssignmentConfig,
) -> Result<Assignment> {
    let segments: Vec<_> = videos
        .iter()
        .flat_map(|v| v.segments.iter().map(move |s| (v, s)))
        .collect();
    let active: Vec<_> = segments.iter().filter(|(_, s)| s.has_text()).collect();
    let skipped_empty = segments.len() - active.len();

    let needs_text_embeddings = !matches!(config.mode, SupervisionMode::TaskId);
    let mut rows = Vec::new();
    if needs_text_embeddings {
        let mut missing = Vec::new();
        let mut count = 0;
        for (_, s) in &active {
            match narrations.position(&s.key()) {
                Some(r) => rows.push(r),
                None => {
                    count += 1;
                    if missing.len() < 10 {
                        missing.push(s.key());
                    }
                }
            }
        }
        if count > 0 {
            return Err(Error::MissingEmbeddings {
                count,
                first: missing,
            });
        }
    }

    let make = |(v, s): &(&NarratedVideo, &crate::corpus::NarrationSegment), distribution| {
        LabeledSegment {
            video_id: v.video_id.clone(),
            segment_index: s.segment_index,
            start_ms: s.start_ms,
            end_ms: s.end_ms,
            distribution,
        }
    };

    let (records, num_classes) = match config.mode {
        SupervisionMode::Full | SupervisionMode::TaskRestricted => {
            if steps.len() != kb.num_steps() {
                return Err(Error::DimensionMismatch {
                    expected: kb.num_steps(),
                    actual: steps.len(),
                });
            }
            if config.k > kb.num_steps() {
                return Err(Error::invalid(format!(
                    "K = {} exceeds S = {}",
                    config.k,
                    kb.num_steps()
                )));
            }
            let restricted = config.mode == SupervisionMode::TaskRestricted;
            let records = active
                .par_iter()
                .zip(rows.par_iter())
                .map(|(seg, &row)| {
                    let candidates = if restricted {
                        let task = seg.0.task_id.ok_or_else(|| {
                            Error::invalid(format!("video {} has no task id", seg.0.video_id))
                        })?;
                        Some(kb.task_steps(task)?)
                    } else {
                        None
                    };
                    let narr = narrations.row_f64(row);
                    let dist = step_distribution(&narr, steps, config.k, candidates)?;
                    Ok(make(seg, dist))
                })
                .collect::<Result<Vec<_>>>()?;
            (records, kb.num_steps())
        }
        SupervisionMode::TaskId => {
            let records = active
                .iter()
                .map(|seg| {
                    let task = seg.0.task_id.ok_or_else(|| {
                        Error::invalid(format!("video {} has no task id", seg.0.video_id))
                    })?;
                    if task >= kb.num_tasks() {
                        return Err(Error::UnknownTask(task));
                    }
                    Ok(make(seg, StepDistribution::one_hot(task)))
                })
                .collect::<Result<Vec<_>>>()?;
            (records, kb.num_tasks())
        }
        SupervisionMode::AsrKmeans {
            clusters,
            iters,
            seed,
        } => {
            let points: Vec<Vec<f64>> = rows.iter().map(|&r| narrations.row_f64(r)).collect();
            let km = kmeans(&Matrix::from_rows(&points)?, clusters, iters, seed)?;
            let records = active
                .iter()
                .zip(km.labels)
                .map(|(seg, c)| make(seg, StepDistribution::one_hot(c)))
                .collect();
            (records, clusters)
        }
    };

    Ok(Assignment {
        label_space: config.mode.label_space(),
        num_classes,
        processed: records.len(),
        records,
        skipped_empty,
    })
}

/// Fraction of records whose label equals the hidden truth for its segment.
pub fn recovery_rate(records: &[LabeledSegment], truth: impl Fn(&LabeledSegment) -> usize) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.label() == truth(r)).count() as f64 / records.len() as f64
}

#[derive(Serialize, Deserialize)]
struct TopKEntry {
    gid: usize,
    task: Option<usize>,
    step: Option<usize>,
    p: f64,
}

#[derive(Serialize, Deserialize)]
struct LabelRecord {
    video_id: String,
    segment_index: usize,
    start_ms: u64,
    end_ms: u64,
    topk: Vec<TopKEntry>,
}

/// Writes the pseudo-label JSONL. `task`/`step` are filled in for step label
/// spaces and `null` otherwise.
pub fn write_labels_jsonl<W: Write>(
    records: &[LabeledSegment],
    kb: Option<&KnowledgeBase>,
    mut out: W,
) -> Result<()> {
    for r in records {
        let topk = r
            .distribution
            .entries
            .iter()
            .map(|e| {
                let step = kb.and_then(|kb| kb.step(e.global_id));
                TopKEntry {
                    gid: e.global_id,
                    task: step.map(|s| s.task_id),
                    step: step.map(|s| s.step_index),
                    p: e.p,
                }
            })
            .collect();
        let rec = LabelRecord {
            video_id: r.video_id.clone(),
            segment_index: r.segment_index,
            start_ms: r.start_ms,
            end_ms: r.end_ms,
            topk,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_labels_jsonl<R: Read>(reader: R) -> Result<Vec<LabeledSegment>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.topk.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: "empty topk list".into(),
            });
        }
        let k = rec.topk.len();
        out.push(LabeledSegment {
            video_id: rec.video_id,
            segment_index: rec.segment_index,
            start_ms: rec.start_ms,
            end_ms: rec.end_ms,
            distribution: StepDistribution {
                entries: rec
                    .topk
                    .into_iter()
                    .map(|e| StepProb {
                        global_id: e.gid,
                        p: e.p,
                    })
                    .collect(),
                k,
                retained_mass: f64::NAN,
            },
        });
    }
    Ok(out)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<LabeledSegment>> {
    let path = path.as_ref();
    read_labels_jsonl(File::open(path).map_err(|e| Error::io(path, e))?)
}

/// Similarities of `query` to every row of `table`.
pub fn similarities(query: &[f64], table: &EmbeddingTable) -> Vec<f64> {
    (0..table.len())
        .map(|i| dot(&table.row_f64(i), query))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Cue;
    use crate::embedding::{embed_keyed, HashProvider};
    use proptest::prelude::*;

    fn probs(d: &StepDistribution) -> Vec<(usize, f64)> {
        d.entries.iter().map(|e| (e.global_id, e.p)).collect()
    }

    #[test]
    fn three_steps_full_softmax() {
        let d = distribution_from_similarities(&[1.0, 2.0, 3.0], 0, 3).unwrap();
        let want = [(2, 0.6652), (1, 0.2447), (0, 0.0900)];
        for ((g, p), (wg, wp)) in probs(&d).into_iter().zip(want) {
            assert_eq!(g, wg);
            assert!((p - wp).abs() < 1e-4, "{p} vs {wp}");
        }
        assert!((d.retained_mass - 1.0).abs() < 1e-15);
    }

    #[test]
    fn equal_similarities_give_uniform() {
        let d = distribution_from_similarities(&[0.7; 6], 0, 6).unwrap();
        assert!(d.entries.iter().all(|e| (e.p - 1.0 / 6.0).abs() < 1e-15));
        let ids: Vec<_> = d.entries.iter().map(|e| e.global_id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn truncated_and_renormalized() {
        let d = distribution_from_similarities(&[5.0, 1.0, 0.0, -2.0, -3.0], 0, 2).unwrap();
        let p = probs(&d);
        assert_eq!(p[0].0, 0);
        assert_eq!(p[1].0, 1);
        assert!((p[0].1 - 0.9820).abs() < 1e-4);
        assert!((p[1].1 - 0.0180).abs() < 1e-4);
        let kb = KnowledgeBase::from_tasks(vec![(
            "t",
            (0..5).map(|i| format!("s{i}")).collect::<Vec<_>>(),
        )])
        .unwrap();
        assert_eq!(argmax_step(&d, &kb).unwrap().best, 0);
    }

    #[test]
    fn argmax_ties_to_lowest_id() {
        let d = StepDistribution {
            entries: vec![StepProb { global_id: 9, p: 0.5 }, StepProb { global_id: 4, p: 0.5 }],
            k: 2,
            retained_mass: 1.0,
        };
        assert_eq!(d.argmax(), 4);
        let d = StepDistribution {
            entries: vec![StepProb { global_id: 0, p: 0.7 }, StepProb { global_id: 1, p: 0.3 }],
            k: 2,
            retained_mass: 1.0,
        };
        assert_eq!(d.argmax(), 0);
    }

    #[test]
    fn huge_similarities_do_not_overflow() {
        let d = distribution_from_similarities(&[900.0, 899.0, -900.0], 0, 2).unwrap();
        assert!(d.entries.iter().all(|e| e.p.is_finite()));
        assert!((d.entries.iter().map(|e| e.p).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn tiny_corpus() -> (KnowledgeBase, Vec<NarratedVideo>) {
        let kb = KnowledgeBase::from_tasks(vec![
            ("tea", vec!["boil the water".to_string(), "steep the leaves".into()]),
            ("shirt", vec!["lay shirt flat".to_string(), "fold both sleeves".into()]),
        ])
        .unwrap();
        let mut v = NarratedVideo::from_cues(
            "v0",
            vec![
                Cue { start_ms: 0, end_ms: 1000, text: "now boil the water".into() },
                Cue { start_ms: 1000, end_ms: 2000, text: "  ".into() },
                Cue { start_ms: 2000, end_ms: 3000, text: "fold both sleeves".into() },
            ],
        )
        .unwrap();
        v.task_id = Some(0);
        (kb, vec![v])
    }

    fn tables(kb: &KnowledgeBase, videos: &[NarratedVideo]) -> (EmbeddingTable, EmbeddingTable) {
        let p = HashProvider::new(64, 1).unwrap();
        let steps: Vec<_> = kb.steps().iter().map(|s| s.text.clone()).collect();
        let step_ids = (0..steps.len()).map(|i| i.to_string()).collect();
        let segs: Vec<_> = videos.iter().flat_map(|v| v.segments.iter()).collect();
        let narr = embed_keyed(
            &p,
            segs.iter().map(|s| s.key()).collect(),
            &segs.iter().map(|s| s.text.clone()).collect::<Vec<_>>(),
        )
        .unwrap();
        (embed_keyed(&p, step_ids, &steps).unwrap(), narr)
    }

    #[test]
    fn assign_corpus_modes() {
        let (kb, videos) = tiny_corpus();
        let (steps, narr) = tables(&kb, &videos);
        let full = assign_corpus(&videos, &narr, &steps, &kb, &AssignmentConfig::default()).unwrap();
        assert_eq!(full.skipped_empty, 1);
        assert_eq!(full.processed, 2);
        assert_eq!(full.records[0].label(), 0);
        assert_eq!(full.records[1].label(), 3);
        assert_eq!(full.records[1].segment_index, 2);

        let restricted = AssignmentConfig { k: 2, mode: SupervisionMode::TaskRestricted };
        let r = assign_corpus(&videos, &narr, &steps, &kb, &restricted).unwrap();
        for rec in &r.records {
            assert!(rec.distribution.entries.iter().all(|e| e.global_id < 2));
        }

        let task = AssignmentConfig { k: 1, mode: SupervisionMode::TaskId };
        let t = assign_corpus(&videos, &narr, &steps, &kb, &task).unwrap();
        assert_eq!(t.num_classes, 2);
        assert!(t.records.iter().all(|r| r.label() == 0));

        let km = AssignmentConfig {
            k: 1,
            mode: SupervisionMode::AsrKmeans { clusters: 2, iters: 10, seed: 0 },
        };
        let c = assign_corpus(&videos, &narr, &steps, &kb, &km).unwrap();
        assert_eq!(c.label_space, LabelSpace::Clusters);
        assert_ne!(c.records[0].label(), c.records[1].label());
    }

    #[test]
    fn unknown_task_in_restricted_mode() {
        let (kb, mut videos) = tiny_corpus();
        videos[0].task_id = Some(42);
        let (steps, narr) = tables(&kb, &videos);
        let cfg = AssignmentConfig { k: 1, mode: SupervisionMode::TaskRestricted };
        assert!(matches!(
            assign_corpus(&videos, &narr, &steps, &kb, &cfg),
            Err(Error::UnknownTask(42))
        ));
    }

    #[test]
    fn all_empty_video_yields_no_labels() {
        let (kb, _) = tiny_corpus();
        let v = NarratedVideo::from_cues(
            "quiet",
            (0..4)
                .map(|i| Cue { start_ms: i * 10, end_ms: i * 10 + 5, text: String::new() })
                .collect(),
        )
        .unwrap();
        let (steps, narr) = tables(&kb, std::slice::from_ref(&v));
        let a = assign_corpus(&[v], &narr, &steps, &kb, &AssignmentConfig::default()).unwrap();
        assert_eq!((a.processed, a.skipped_empty), (0, 4));
    }

    #[test]
    fn missing_embeddings_listed() {
        let (kb, videos) = tiny_corpus();
        let (steps, _) = tables(&kb, &videos);
        let empty = EmbeddingTable::new(64, vec![], vec![]).unwrap();
        match assign_corpus(&videos, &empty, &steps, &kb, &AssignmentConfig::default()) {
            Err(Error::MissingEmbeddings { count, first }) => {
                assert_eq!(count, 2);
                assert_eq!(first, vec!["v0#0".to_string(), "v0#2".into()]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn labels_jsonl_round_trip() {
        let (kb, videos) = tiny_corpus();
        let (steps, narr) = tables(&kb, &videos);
        let a = assign_corpus(&videos, &narr, &steps, &kb, &AssignmentConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_labels_jsonl(&a.records, Some(&kb), &mut buf).unwrap();
        let first: serde_json::Value =
            serde_json::from_str(std::str::from_utf8(&buf).unwrap().lines().next().unwrap())
                .unwrap();
        assert_eq!(first["topk"][0]["gid"], 0);
        assert_eq!(first["topk"][0]["task"], 0);
        assert_eq!(first["topk"][0]["step"], 0);
        let back = read_labels_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back.len(), a.records.len());
        for (x, y) in back.iter().zip(&a.records) {
            assert_eq!(x.distribution.entries, y.distribution.entries);
            assert_eq!(x.key(), y.key());
        }
    }

    proptest! {
        #[test]
        fn shift_invariance(sims in prop::collection::vec(-50.0f64..50.0, 1..40),
                            shift in -100.0f64..100.0, k in 1usize..10) {
            let a = distribution_from_similarities(&sims, 0, k).unwrap();
            let shifted: Vec<f64> = sims.iter().map(|s| s + shift).collect();
            let b = distribution_from_similarities(&shifted, 0, k).unwrap();
            prop_assert_eq!(a.argmax(), b.argmax());
            for (x, y) in a.entries.iter().zip(&b.entries) {
                prop_assert_eq!(x.global_id, y.global_id);
                prop_assert!((x.p - y.p).abs() < 1e-9);
            }
        }

        #[test]
        fn sums_to_one_and_sorted(sims in prop::collection::vec(-30.0f64..30.0, 1..60), k in 1usize..70) {
            let d = distribution_from_similarities(&sims, 0, k).unwrap();
            prop_assert_eq!(d.entries.len(), k.min(sims.len()));
            prop_assert!((d.entries.iter().map(|e| e.p).sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(d.entries.windows(2).all(|w| w[0].p >= w[1].p));
        }

        #[test]
        fn monotone_in_own_similarity(sims in prop::collection::vec(-10.0f64..10.0, 2..30),
                                      idx in any::<prop::sample::Index>(), bump in 0.0f64..5.0) {
            let i = idx.index(sims.len());
            let n = sims.len();
            let before = distribution_from_similarities(&sims, 0, n).unwrap().prob(i);
            let mut up = sims.clone();
            up[i] += bump;
            let after = distribution_from_similarities(&up, 0, n).unwrap().prob(i);
            prop_assert!(after >= before - 1e-15);
        }
    }
}
