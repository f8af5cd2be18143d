use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_segments_jsonl, segment_key, write_segments_jsonl, KnowledgeBase, NarratedVideo};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::longterm::StepEmbeddingSequence;
use crate::math::Matrix;

pub const KB_FILE: &str = "kb.jsonl";
pub const SEGMENTS_FILE: &str = "segments.jsonl";
pub const FEATURES_FILE: &str = "features.emb";
pub const TRUTH_FILE: &str = "truth.jsonl";
pub const DOWNSTREAM_FILE: &str = "downstream.jsonl";
pub const DOWNSTREAM_FEATURES_FILE: &str = "downstream_features.emb";

/// Files of an experiment directory, in digest order. The truth file is
/// optional.
pub const EXPERIMENT_FILES: [&str; 6] = [
    KB_FILE,
    SEGMENTS_FILE,
    FEATURES_FILE,
    DOWNSTREAM_FILE,
    DOWNSTREAM_FEATURES_FILE,
    TRUTH_FILE,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// A labeled video of the downstream task. Its segment features live in the
/// downstream table under `video#i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamVideo {
    pub video_id: String,
    pub label: usize,
    pub split: Split,
    pub segments: usize,
    /// Annotated step per segment, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<Vec<usize>>,
}

impl DownstreamVideo {
    pub fn keys(&self) -> impl Iterator<Item = String> + '_ {
        (0..self.segments).map(|i| segment_key(&self.video_id, i))
    }

    /// Segment features as a `segments × D` matrix.
    pub fn features(&self, table: &EmbeddingTable) -> Result<Matrix> {
        let mut rows = Vec::with_capacity(self.segments);
        let mut missing = Vec::new();
        for k in self.keys() {
            match table.get_f64(&k) {
                Some(r) => rows.push(r),
                None => missing.push(k),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingEmbeddings {
                count: missing.len(),
                first: missing.into_iter().take(10).collect(),
            });
        }
        Matrix::from_rows(&rows)
    }

    pub fn sequence(&self, table: &EmbeddingTable) -> Result<StepEmbeddingSequence> {
        StepEmbeddingSequence::new(self.video_id.clone(), self.features(table)?)
    }
}

/// Reads downstream video records. The class count comes from an optional
/// `{"classes": N}` header line, else from the largest label.
pub fn read_downstream_jsonl<R: Read>(reader: R) -> Result<(Vec<DownstreamVideo>, usize)> {
    let mut downstream = Vec::new();
    let mut classes = None;
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })? {
            DownstreamLine::Header { classes: c } => classes = Some(c),
            DownstreamLine::Video(v) => downstream.push(v),
        }
    }
    let classes = classes
        .or_else(|| downstream.iter().map(|v| v.label + 1).max())
        .unwrap_or(0);
    Ok((downstream, classes))
}

/// Everything one experiment reads: the pretraining corpus with segment
/// features, and a labeled downstream set.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub kb: KnowledgeBase,
    pub videos: Vec<NarratedVideo>,
    /// Visual features of pretraining segments, keyed `video#i`.
    pub features: EmbeddingTable,
    /// Hidden true step per pretraining segment. Used for scoring only.
    pub truth: Option<BTreeMap<String, usize>>,
    pub downstream: Vec<DownstreamVideo>,
    pub downstream_features: EmbeddingTable,
    pub downstream_classes: usize,
}

#[derive(Serialize, Deserialize)]
struct TruthRecord {
    key: String,
    global_id: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum DownstreamLine {
    Header { classes: usize },
    Video(DownstreamVideo),
}

impl ExperimentData {
    pub fn validate(&self) -> Result<()> {
        if self.features.dim() != self.downstream_features.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.features.dim(),
                actual: self.downstream_features.dim(),
            });
        }
        for v in &self.downstream {
            if v.label >= self.downstream_classes {
                return Err(Error::LabelOutOfRange {
                    label: v.label,
                    classes: self.downstream_classes,
                });
            }
            if v.segments == 0 {
                return Err(Error::invalid(format!("downstream video {} has no segments", v.video_id)));
            }
            if let Some(steps) = &v.steps {
                if steps.len() != v.segments {
                    return Err(Error::DimensionMismatch {
                        expected: v.segments,
                        actual: steps.len(),
                    });
                }
                if let Some(&g) = steps.iter().find(|&&g| g >= self.kb.num_steps()) {
                    return Err(Error::LabelOutOfRange {
                        label: g,
                        classes: self.kb.num_steps(),
                    });
                }
            }
        }
        Ok(())
    }

    fn file_bytes(&self) -> Result<Vec<(&'static str, Vec<u8>)>> {
        let mut kb = Vec::new();
        self.kb.write_jsonl(&mut kb)?;
        let mut segments = Vec::new();
        write_segments_jsonl(&self.videos, &mut segments)?;
        let mut downstream = Vec::new();
        serde_json::to_writer(&mut downstream, &DownstreamLine::Header {
            classes: self.downstream_classes,
        })?;
        downstream.push(b'\n');
        for v in &self.downstream {
            serde_json::to_writer(&mut downstream, v)?;
            downstream.push(b'\n');
        }
        let mut files = vec![
            (KB_FILE, kb),
            (SEGMENTS_FILE, segments),
            (FEATURES_FILE, self.features.to_bytes()),
            (DOWNSTREAM_FILE, downstream),
            (DOWNSTREAM_FEATURES_FILE, self.downstream_features.to_bytes()),
        ];
        if let Some(truth) = &self.truth {
            let mut out = Vec::new();
            for (key, &global_id) in truth {
                serde_json::to_writer(&mut out, &TruthRecord {
                    key: key.clone(),
                    global_id,
                })?;
                out.push(b'\n');
            }
            files.push((TRUTH_FILE, out));
        }
        Ok(files)
    }

    /// Concatenation of every file `write_dir` would produce.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for (name, bytes) in self.file_bytes()? {
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&bytes);
        }
        Ok(out)
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, bytes) in self.file_bytes()? {
            let path = dir.join(name);
            let mut f = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            f.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
            f.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let open = |name: &str| {
            let path = dir.join(name);
            File::open(&path).map_err(|e| Error::io(&path, e))
        };
        let (kb, report) = KnowledgeBase::read_jsonl(open(KB_FILE)?)?;
        if report.rejected_records > 0 {
            log::warn!("{KB_FILE}: rejected {} record(s)", report.rejected_records);
        }
        let videos = read_segments_jsonl(open(SEGMENTS_FILE)?)?;
        let features = EmbeddingTable::load(dir.join(FEATURES_FILE))?;
        let downstream_features = EmbeddingTable::load(dir.join(DOWNSTREAM_FEATURES_FILE))?;

        let (downstream, downstream_classes) = read_downstream_jsonl(open(DOWNSTREAM_FILE)?)?;

        let truth_path = dir.join(TRUTH_FILE);
        let truth = if truth_path.exists() {
            let mut map = BTreeMap::new();
            for (i, line) in BufReader::new(open(TRUTH_FILE)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: TruthRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                map.insert(r.key, r.global_id);
            }
            Some(map)
        } else {
            None
        };

        let data = Self {
            kb,
            videos,
            features,
            truth,
            downstream,
            downstream_features,
            downstream_classes,
        };
        data.validate()?;
        Ok(data)
    }
}
