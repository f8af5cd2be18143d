//! ASR transcript ingestion: SRT, WebVTT and a JSONL cue list.
//!
//! All three formats reduce to the same cue list. Timestamps are kept as
//! integer milliseconds. Cues are never merged, even when they overlap.

use std::borrow::Cow;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One time-bounded ASR sentence within a video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NarrationSegment {
    pub video_id: String,
    pub segment_index: usize,
    pub start_ms: u64,
    pub end_ms: u64,
    pub text: String,
}

impl NarrationSegment {
    pub fn start_s(&self) -> f64 {
        self.start_ms as f64 / 1000.0
    }

    pub fn end_s(&self) -> f64 {
        self.end_ms as f64 / 1000.0
    }

    pub fn duration_ms(&self) -> u64 {
        self.end_ms - self.start_ms
    }

    /// Key used to look up this segment's rows in embedding tables.
    pub fn key(&self) -> String {
        segment_key(&self.video_id, self.segment_index)
    }

    pub fn has_text(&self) -> bool {
        !self.text.trim().is_empty()
    }
}

pub fn segment_key(video_id: &str, segment_index: usize) -> String {
    format!("{video_id}#{segment_index}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NarratedVideo {
    pub video_id: String,
    pub segments: Vec<NarrationSegment>,
    /// Search-keyword task label; unverified.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<usize>,
}

impl NarratedVideo {
    /// Builds a video from raw cues, checking ordering and bounds.
    pub fn from_cues(video_id: impl Into<String>, cues: Vec<Cue>) -> Result<Self> {
        let video_id = video_id.into();
        validate_cues(&cues)?;
        let segments = cues
            .into_iter()
            .enumerate()
            .map(|(segment_index, c)| NarrationSegment {
                video_id: video_id.clone(),
                segment_index,
                start_ms: c.start_ms,
                end_ms: c.end_ms,
                text: c.text,
            })
            .collect();
        Ok(Self {
            video_id,
            segments,
            task_id: None,
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Latest cue end.
    pub fn end_ms(&self) -> u64 {
        self.segments.iter().map(|s| s.end_ms).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cue {
    pub start_ms: u64,
    pub end_ms: u64,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TranscriptFormat {
    Srt,
    #[serde(alias = "vtt")]
    WebVtt,
    Jsonl,
}

impl TranscriptFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TranscriptFormat::Srt => "srt",
            TranscriptFormat::WebVtt => "vtt",
            TranscriptFormat::Jsonl => "jsonl",
        }
    }
}

impl FromStr for TranscriptFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "srt" => Ok(Self::Srt),
            "vtt" | "webvtt" => Ok(Self::WebVtt),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(Error::invalid(format!("unknown transcript format `{other}`"))),
        }
    }
}

/// Non-fatal findings from parsing one transcript.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TranscriptWarnings {
    /// Number of U+FFFD characters substituted for undecodable bytes.
    pub replaced_chars: usize,
}

/// Parses transcript bytes in the declared format.
pub fn parse_transcript(
    video_id: &str,
    bytes: &[u8],
    format: TranscriptFormat,
) -> Result<(NarratedVideo, TranscriptWarnings)> {
    let mut warnings = TranscriptWarnings::default();
    let text = match String::from_utf8_lossy(bytes) {
        Cow::Borrowed(s) => Cow::Borrowed(s),
        Cow::Owned(s) => {
            warnings.replaced_chars = s.chars().filter(|&c| c == '\u{FFFD}').count();
            warn!(
                "{video_id}: {} undecodable byte sequence(s) replaced",
                warnings.replaced_chars
            );
            Cow::Owned(s)
        }
    };
    let text = text.strip_prefix('\u{FEFF}').unwrap_or(&text);
    let cues = match format {
        TranscriptFormat::Srt => parse_srt(text)?,
        TranscriptFormat::WebVtt => parse_webvtt(text)?,
        TranscriptFormat::Jsonl => parse_jsonl_cues(text)?,
    };
    Ok((NarratedVideo::from_cues(video_id, cues)?, warnings))
}

/// Reads a transcript file; the file stem becomes the video id.
pub fn load_transcript(
    path: impl AsRef<Path>,
    format: TranscriptFormat,
) -> Result<(NarratedVideo, TranscriptWarnings)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let video_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_transcript(&video_id, &bytes, format)
}

fn validate_cues(cues: &[Cue]) -> Result<()> {
    if cues.is_empty() {
        return Err(Error::invalid("transcript contains no cues"));
    }
    for (i, c) in cues.iter().enumerate() {
        if c.end_ms <= c.start_ms {
            return Err(Error::Timestamp {
                index: i,
                message: format!("end {} ms is not after start {} ms", c.end_ms, c.start_ms),
            });
        }
        if i > 0 && c.start_ms < cues[i - 1].start_ms {
            return Err(Error::Timestamp {
                index: i,
                message: format!(
                    "cue starts at {} ms, before previous cue at {} ms",
                    c.start_ms,
                    cues[i - 1].start_ms
                ),
            });
        }
    }
    Ok(())
}

fn normalize_text(lines: &[&str]) -> String {
    lines
        .iter()
        .flat_map(|l| l.split_whitespace())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parses `[HH:]MM:SS(,|.)mmm`. Hours may have any number of digits.
pub(crate) fn parse_timestamp(s: &str) -> Option<u64> {
    let s = s.trim();
    let (clock, frac) = s.rsplit_once([',', '.'])?;
    if frac.len() != 3 || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let ms: u64 = frac.parse().ok()?;
    let parts: Vec<&str> = clock.split(':').collect();
    let (h, m, sec) = match parts.as_slice() {
        [h, m, s] => (*h, *m, *s),
        [m, s] => ("0", *m, *s),
        _ => return None,
    };
    let num = |x: &str, max: Option<u64>| -> Option<u64> {
        if x.is_empty() || !x.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let v: u64 = x.parse().ok()?;
        match max {
            Some(m) if v >= m => None,
            _ => Some(v),
        }
    };
    let h = num(h, None)?;
    let m = num(m, Some(60))?;
    let sec = num(sec, Some(60))?;
    h.checked_mul(3_600_000)?
        .checked_add(m * 60_000)?
        .checked_add(sec * 1000)?
        .checked_add(ms)
}

fn parse_timing(line: &str, lineno: usize) -> Result<(u64, u64)> {
    let bad = |what: &str| Error::Parse {
        line: lineno,
        message: format!("{what} in timing line `{line}`"),
    };
    let (start, rest) = line.split_once("-->").ok_or_else(|| bad("missing `-->`"))?;
    if start.trim_start().starts_with('-') {
        return Err(bad("negative timestamp"));
    }
    // WebVTT allows cue settings after the end timestamp.
    let end = rest.split_whitespace().next().ok_or_else(|| bad("missing end"))?;
    if end.starts_with('-') {
        return Err(bad("negative timestamp"));
    }
    let start = parse_timestamp(start).ok_or_else(|| bad("bad start timestamp"))?;
    let end = parse_timestamp(end).ok_or_else(|| bad("bad end timestamp"))?;
    Ok((start, end))
}

/// Splits text into blank-line separated blocks of `(line number, line)`.
fn blocks(text: &str) -> Vec<Vec<(usize, &str)>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push((i + 1, line));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn cue_from_block(block: &[(usize, &str)]) -> Result<Cue> {
    let timing_at = block
        .iter()
        .take(2)
        .position(|(_, l)| l.contains("-->"))
        .ok_or_else(|| Error::Parse {
            line: block[0].0,
            message: "cue block without a timing line".into(),
        })?;
    let (lineno, timing) = block[timing_at];
    let (start_ms, end_ms) = parse_timing(timing, lineno)?;
    let text_lines: Vec<&str> = block[timing_at + 1..].iter().map(|(_, l)| *l).collect();
    Ok(Cue {
        start_ms,
        end_ms,
        text: normalize_text(&text_lines),
    })
}

pub fn parse_srt(text: &str) -> Result<Vec<Cue>> {
    blocks(text).iter().map(|b| cue_from_block(b)).collect()
}

pub fn parse_webvtt(text: &str) -> Result<Vec<Cue>> {
    let mut blocks = blocks(text).into_iter();
    let header = blocks.next().ok_or_else(|| Error::Parse {
        line: 1,
        message: "empty WebVTT file".into(),
    })?;
    let first = header[0].1;
    if !(first == "WEBVTT" || first.starts_with("WEBVTT ") || first.starts_with("WEBVTT\t")) {
        return Err(Error::Parse {
            line: header[0].0,
            message: "missing WEBVTT signature".into(),
        });
    }
    let mut cues = Vec::new();
    // A cue directly under the signature line without a blank separator is
    // not valid WebVTT; anything in the header block is metadata.
    for block in blocks {
        let head = block[0].1;
        if ["NOTE", "STYLE", "REGION"]
            .iter()
            .any(|kw| head == *kw || head.starts_with(&format!("{kw} ")) || head.starts_with(&format!("{kw}\t")))
        {
            continue;
        }
        cues.push(cue_from_block(&block)?);
    }
    Ok(cues)
}

#[derive(Deserialize)]
struct JsonCue {
    start_ms: i64,
    end_ms: i64,
    #[serde(default)]
    text: String,
}

pub fn parse_jsonl_cues(text: &str) -> Result<Vec<Cue>> {
    let mut cues = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let c: JsonCue = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if c.start_ms < 0 || c.end_ms < 0 {
            return Err(Error::Timestamp {
                index: cues.len(),
                message: "negative timestamp".into(),
            });
        }
        cues.push(Cue {
            start_ms: c.start_ms as u64,
            end_ms: c.end_ms as u64,
            text: normalize_text(&[c.text.as_str()]),
        });
    }
    Ok(cues)
}

/// Serializes cues in SRT form.
pub fn write_srt(cues: &[Cue]) -> String {
    let mut out = String::new();
    for (i, c) in cues.iter().enumerate() {
        out.push_str(&format!(
            "{}\n{} --> {}\n{}\n\n",
            i + 1,
            fmt_ts(c.start_ms, ','),
            fmt_ts(c.end_ms, ','),
            c.text
        ));
    }
    out
}

/// Serializes cues in WebVTT form.
pub fn write_webvtt(cues: &[Cue]) -> String {
    let mut out = String::from("WEBVTT\n\n");
    for c in cues {
        out.push_str(&format!(
            "{} --> {}\n{}\n\n",
            fmt_ts(c.start_ms, '.'),
            fmt_ts(c.end_ms, '.'),
            c.text
        ));
    }
    out
}

fn fmt_ts(ms: u64, sep: char) -> String {
    let (h, rem) = (ms / 3_600_000, ms % 3_600_000);
    let (m, rem) = (rem / 60_000, rem % 60_000);
    let (s, ms) = (rem / 1000, rem % 1000);
    format!("{h:02}:{m:02}:{s:02}{sep}{ms:03}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SRT: &str = "1\r\n00:00:01,000 --> 00:00:04,500\r\nfirst add the\r\n  flour\r\n\r\n2\r\n00:00:05,000 --> 00:01:02,250\r\nthen stir\r\n";

    #[test]
    fn srt_timestamps_to_seconds() {
        let (v, w) = parse_transcript("v", SRT.as_bytes(), TranscriptFormat::Srt).unwrap();
        assert_eq!(w.replaced_chars, 0);
        assert_eq!(v.segments[0].start_s(), 1.0);
        assert_eq!(v.segments[0].end_s(), 4.5);
        assert_eq!(v.segments[0].text, "first add the flour");
        assert_eq!(v.segments[1].end_ms, 62_250);
        assert_eq!(v.segments[1].segment_index, 1);
    }

    #[test]
    fn webvtt_and_srt_agree() {
        let vtt = "WEBVTT - some title\n\nNOTE a comment\nspanning lines\n\nintro\n00:01.000 --> 00:04.500 align:start\nfirst add the flour\n\n00:00:05.000 --> 00:01:02.250\nthen stir\n";
        let (a, _) = parse_transcript("v", SRT.as_bytes(), TranscriptFormat::Srt).unwrap();
        let (b, _) = parse_transcript("v", vtt.as_bytes(), TranscriptFormat::WebVtt).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn webvtt_requires_signature() {
        let err = parse_webvtt("00:01.000 --> 00:02.000\nhi\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn jsonl_out_of_order_names_index() {
        let jsonl = r#"{"start_ms":0,"end_ms":1000,"text":"a"}
{"start_ms":5000,"end_ms":6000,"text":"b"}
{"start_ms":2000,"end_ms":3000,"text":"c"}"#;
        let err = parse_transcript("v", jsonl.as_bytes(), TranscriptFormat::Jsonl).unwrap_err();
        assert!(matches!(err, Error::Timestamp { index: 2, .. }), "{err}");
    }

    #[test]
    fn negative_timestamps_rejected() {
        let jsonl = r#"{"start_ms":-5,"end_ms":1000,"text":"a"}"#;
        assert!(parse_jsonl_cues(jsonl).is_err());
        assert!(parse_srt("1\n-00:00:01,000 --> 00:00:02,000\nx\n").is_err());
    }

    #[test]
    fn end_before_start_rejected() {
        let srt = "1\n00:00:03,000 --> 00:00:02,000\nx\n";
        let err = parse_transcript("v", srt.as_bytes(), TranscriptFormat::Srt).unwrap_err();
        assert!(matches!(err, Error::Timestamp { index: 0, .. }));
    }

    #[test]
    fn overlapping_cues_are_kept() {
        let srt = "1\n00:00:01,000 --> 00:00:05,000\na\n\n2\n00:00:02,000 --> 00:00:03,000\nb\n";
        let (v, _) = parse_transcript("v", srt.as_bytes(), TranscriptFormat::Srt).unwrap();
        assert_eq!(v.len(), 2);
    }

    #[test]
    fn invalid_utf8_is_replaced_with_warning() {
        let mut bytes = b"1\n00:00:01,000 --> 00:00:02,000\nca".to_vec();
        bytes.extend_from_slice(&[0xff, 0xfe]);
        bytes.extend_from_slice(b"fe\n");
        let (v, w) = parse_transcript("v", &bytes, TranscriptFormat::Srt).unwrap();
        assert_eq!(w.replaced_chars, 2);
        assert!(v.segments[0].text.contains('\u{FFFD}'));
    }

    #[test]
    fn empty_text_cues_pass_through() {
        let srt = "1\n00:00:01,000 --> 00:00:02,000\n\n2\n00:00:03,000 --> 00:00:04,000\nx\n";
        let (v, _) = parse_transcript("v", srt.as_bytes(), TranscriptFormat::Srt).unwrap();
        // The empty-text cue collapses into a timing-only block.
        assert_eq!(v.segments[0].text, "");
        assert!(!v.segments[0].has_text());
    }

    #[test]
    fn timestamp_edge_cases() {
        assert_eq!(parse_timestamp("123:00:00,001"), Some(442_800_001));
        assert_eq!(parse_timestamp("00:60:00,000"), None);
        assert_eq!(parse_timestamp("00:00:00,1"), None);
        assert_eq!(parse_timestamp("99999999999999999999:00:00,000"), None);
    }

    fn arb_cues() -> impl Strategy<Value = Vec<Cue>> {
        prop::collection::vec((0u64..10_000, 1u64..10_000, "[a-z ]{0,20}"), 1..8).prop_map(
            |raw| {
                let mut t = 0;
                raw.into_iter()
                    .map(|(gap, dur, text)| {
                        t += gap;
                        Cue {
                            start_ms: t,
                            end_ms: t + dur,
                            text: normalize_text(&[text.as_str()]),
                        }
                    })
                    .collect()
            },
        )
    }

    proptest! {
        #[test]
        fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..400)) {
            for f in [TranscriptFormat::Srt, TranscriptFormat::WebVtt, TranscriptFormat::Jsonl] {
                if let Ok((v, _)) = parse_transcript("fuzz", &bytes, f) {
                    prop_assert!(!v.is_empty());
                    prop_assert!(v.segments.iter().all(|s| s.start_ms < s.end_ms));
                }
            }
        }

        #[test]
        fn srt_vtt_writers_round_trip(cues in arb_cues()) {
            let (a, _) = parse_transcript("v", write_srt(&cues).as_bytes(), TranscriptFormat::Srt).unwrap();
            let (b, _) = parse_transcript("v", write_webvtt(&cues).as_bytes(), TranscriptFormat::WebVtt).unwrap();
            prop_assert_eq!(&a, &b);
            let got: Vec<_> = a.segments.iter().map(|s| (s.start_ms, s.end_ms)).collect();
            let want: Vec<_> = cues.iter().map(|c| (c.start_ms, c.end_ms)).collect();
            prop_assert_eq!(got, want);
        }
    }
}
