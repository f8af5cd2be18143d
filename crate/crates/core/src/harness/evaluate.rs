use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Fraction of correct predictions.
    Top1,
    /// Mean of per-class accuracies over classes present in the labels.
    PerClass,
    /// Accuracy over 1-second units; needs segment spans.
    FrameAcc,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top1" => Ok(Metric::Top1),
            "per_class" => Ok(Metric::PerClass),
            "frame_acc" => Ok(Metric::FrameAcc),
            _ => Err(Error::Config(format!("unknown metric {s:?}"))),
        }
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected: b,
            actual: a,
        });
    }
    if a == 0 {
        return Err(Error::invalid("cannot score an empty prediction set"));
    }
    Ok(())
}

pub fn top1(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_len(preds.len(), labels.len())?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Accuracy of every class that occurs in `labels`.
pub fn per_class_accuracy(preds: &[usize], labels: &[usize]) -> Result<BTreeMap<usize, f64>> {
    check_len(preds.len(), labels.len())?;
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (p, l) in preds.iter().zip(labels) {
        let c = counts.entry(*l).or_default();
        c.1 += 1;
        if p == l {
            c.0 += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(k, (hit, n))| (k, hit as f64 / n as f64))
        .collect())
}

pub fn per_class_mean(preds: &[usize], labels: &[usize]) -> Result<f64> {
    let pc = per_class_accuracy(preds, labels)?;
    Ok(pc.values().sum::<f64>() / pc.len() as f64)
}

/// Frame accuracy with each segment `[start_ms, end_ms)` expanded into
/// non-overlapping 1-second units. A unit belongs to the segment covering
/// its midpoint; uncovered units are ignored.
pub fn frame_accuracy(preds: &[usize], labels: &[usize], spans_ms: &[(u64, u64)]) -> Result<f64> {
    check_len(preds.len(), labels.len())?;
    check_len(spans_ms.len(), labels.len())?;
    let end = spans_ms.iter().map(|s| s.1).max().unwrap_or(0);
    let (mut hit, mut total) = (0usize, 0usize);
    for unit in 0..end.div_ceil(1000) {
        let mid = unit * 1000 + 500;
        if let Some(i) = spans_ms.iter().position(|&(s, e)| s <= mid && mid < e) {
            total += 1;
            if preds[i] == labels[i] {
                hit += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::invalid("segments cover no 1-second unit"));
    }
    Ok(hit as f64 / total as f64)
}

/// Scores `preds` with `metric`. Frame accuracy needs `spans_ms`.
pub fn evaluate(
    preds: &[usize],
    labels: &[usize],
    metric: Metric,
    spans_ms: Option<&[(u64, u64)]>,
) -> Result<f64> {
    match metric {
        Metric::Top1 => top1(preds, labels),
        Metric::PerClass => per_class_mean(preds, labels),
        Metric::FrameAcc => {
            let spans = spans_ms.ok_or_else(|| Error::invalid("frame accuracy needs segment spans"))?;
            frame_accuracy(preds, labels, spans)
        }
    }
}
