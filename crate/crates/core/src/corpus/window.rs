use rand::Rng;
use serde::{Deserialize, Serialize};

use super::transcript::{NarratedVideo, NarrationSegment};
use crate::error::{Error, Result};
use crate::math::{rng, stable_hash};

/// How a window is placed inside a cue longer than the span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowPolicy {
    Center,
    Random { seed: u64 },
}

/// A fixed-span clip window attached to the narration cue it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentWindow {
    pub segment: NarrationSegment,
    pub start_ms: u64,
    pub end_ms: u64,
}

pub const DEFAULT_SPAN_S: f64 = 8.0;

/// Places one `span_s` window per cue.
///
/// Cues longer than the span get a window inside the cue (midpoint or
/// seeded random offset). Shorter cues get a window centered on the cue
/// midpoint, shifted to stay within `[0, video end]`. A video shorter than
/// the span yields `[0, video end]`.
pub fn window_segments(
    video: &NarratedVideo,
    span_s: f64,
    policy: WindowPolicy,
) -> Result<Vec<SegmentWindow>> {
    if !(span_s.is_finite() && span_s > 0.0) {
        return Err(Error::invalid(format!("span must be positive, got {span_s}")));
    }
    let span = ((span_s * 1000.0).round() as u64).max(1);
    let video_end = video.end_ms();
    let mut rng = match policy {
        WindowPolicy::Random { seed } => Some(rng(stable_hash(video.video_id.as_bytes(), seed))),
        WindowPolicy::Center => None,
    };

    let windows = video
        .segments
        .iter()
        .map(|seg| {
            let (s, e) = (seg.start_ms, seg.end_ms);
            let (start, end) = if e - s > span {
                let start = match rng.as_mut() {
                    Some(r) => r.random_range(s..=e - span),
                    None => s + (e - s) / 2 - span / 2,
                };
                (start, start + span)
            } else if video_end <= span {
                (0, video_end)
            } else {
                let mid = s + (e - s) / 2;
                let start = mid.saturating_sub(span / 2).min(video_end - span);
                (start, start + span)
            };
            SegmentWindow {
                segment: seg.clone(),
                start_ms: start,
                end_ms: end,
            }
        })
        .collect();
    Ok(windows)
}
