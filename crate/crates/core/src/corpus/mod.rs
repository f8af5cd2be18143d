//! Knowledge-base and transcript ingestion.

mod kb;
mod transcript;
mod window;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use kb::{load_knowledge_base, KbLoadReport, KnowledgeBase, StepDescription, Task};
pub use transcript::{
    load_transcript, parse_jsonl_cues, parse_srt, parse_transcript, parse_webvtt, segment_key,
    write_srt, write_webvtt, Cue, NarratedVideo, NarrationSegment, TranscriptFormat,
    TranscriptWarnings,
};
pub use window::{window_segments, SegmentWindow, WindowPolicy, DEFAULT_SPAN_S};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct SegmentRecord {
    video_id: String,
    segment_index: usize,
    start_ms: u64,
    end_ms: u64,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    task_id: Option<usize>,
}

/// Writes one JSON object per segment, videos in the given order.
pub fn write_segments_jsonl<W: Write>(videos: &[NarratedVideo], mut out: W) -> Result<()> {
    for v in videos {
        for s in &v.segments {
            let rec = SegmentRecord {
                video_id: s.video_id.clone(),
                segment_index: s.segment_index,
                start_ms: s.start_ms,
                end_ms: s.end_ms,
                text: s.text.clone(),
                task_id: v.task_id,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Reads segments written by [`write_segments_jsonl`], regrouping them into
/// videos. Each video's records must be contiguous and in segment order.
pub fn read_segments_jsonl<R: Read>(reader: R) -> Result<Vec<NarratedVideo>> {
    let mut videos: Vec<NarratedVideo> = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SegmentRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let bad = |msg: &str| Error::Parse {
            line: i + 1,
            message: msg.to_string(),
        };
        if rec.end_ms <= rec.start_ms {
            return Err(bad("segment end is not after its start"));
        }
        let continues = videos.last().is_some_and(|v| v.video_id == rec.video_id);
        if !continues {
            if videos.iter().any(|v| v.video_id == rec.video_id) {
                return Err(bad("segments of a video must be contiguous"));
            }
            videos.push(NarratedVideo {
                video_id: rec.video_id.clone(),
                segments: Vec::new(),
                task_id: rec.task_id,
            });
        }
        let video = videos.last_mut().unwrap();
        if rec.segment_index != video.segments.len() {
            return Err(bad("segment_index out of sequence"));
        }
        if video
            .segments
            .last()
            .is_some_and(|prev| prev.start_ms > rec.start_ms)
        {
            return Err(bad("segments are not sorted by start time"));
        }
        video.segments.push(NarrationSegment {
            video_id: rec.video_id,
            segment_index: rec.segment_index,
            start_ms: rec.start_ms,
            end_ms: rec.end_ms,
            text: rec.text,
        });
    }
    Ok(videos)
}

pub fn load_segments(path: impl AsRef<Path>) -> Result<Vec<NarratedVideo>> {
    let path = path.as_ref();
    read_segments_jsonl(File::open(path).map_err(|e| Error::io(path, e))?)
}

/// Loads every transcript with the format's extension in `dir`, sorted by
/// file name.
pub fn load_transcript_dir(
    dir: impl AsRef<Path>,
    format: TranscriptFormat,
) -> Result<(Vec<NarratedVideo>, TranscriptWarnings)> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .is_some_and(|x| x.eq_ignore_ascii_case(format.extension()))
        })
        .collect();
    paths.sort();
    let mut total = TranscriptWarnings::default();
    let mut videos = Vec::with_capacity(paths.len());
    for p in paths {
        let (v, w) = load_transcript(&p, format)?;
        total.replaced_chars += w.replaced_chars;
        videos.push(v);
    }
    Ok((videos, total))
}
