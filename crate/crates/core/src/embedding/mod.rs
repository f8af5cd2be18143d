//! Sentence embeddings: providers, the binary `EMB1` table, and the
//! dot-product similarity used for step matching.

mod provider;
mod table;

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rayon::prelude::*;
use serde::Deserialize;

pub use provider::{hash_provider, EmbeddingProvider, HashProvider, LookupProvider};
pub use table::{EmbeddingTable, HEADER_BYTES};

use crate::error::{Error, Result};
use crate::math::dot;

/// Default language-embedding width.
pub const DEFAULT_DIM: usize = 768;

/// Raw dot product `aᵀb`. No normalization is applied.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(dot(a, b))
}

/// Embeds `texts` in order; row ids are `"0"`, `"1"`, ...
pub fn embed_texts<S: AsRef<str> + Sync>(
    provider: &dyn EmbeddingProvider,
    texts: &[S],
) -> Result<EmbeddingTable> {
    let ids = (0..texts.len()).map(|i| i.to_string()).collect();
    embed_keyed(provider, ids, texts)
}

/// Embeds `texts` with explicit row ids. Work is spread over the rayon pool;
/// row order always follows the input.
pub fn embed_keyed<S: AsRef<str> + Sync>(
    provider: &dyn EmbeddingProvider,
    ids: Vec<String>,
    texts: &[S],
) -> Result<EmbeddingTable> {
    let dim = provider.dim();
    let rows = texts
        .par_iter()
        .enumerate()
        .map(|(index, t)| {
            let v = provider.embed(t.as_ref()).map_err(|e| Error::Provider {
                index,
                message: e.to_string(),
            })?;
            if v.len() != dim {
                return Err(Error::Provider {
                    index,
                    message: format!("returned {} values, expected {dim}", v.len()),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Provider {
                    index,
                    message: "returned a non-finite value".into(),
                });
            }
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    EmbeddingTable::from_rows(dim, ids, &rows)
}

/// One `(id, text)` pair of a texts file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TextLine {
    Kb {
        #[allow(dead_code)]
        title: String,
        steps: Vec<String>,
    },
    Segment {
        video_id: String,
        segment_index: usize,
        text: String,
    },
    Plain {
        id: serde_json::Value,
        text: String,
    },
}

/// Reads texts to embed from JSONL. Three record shapes are accepted:
/// `{"id","text"}`, segment records (id = `video#index`), and knowledge-base
/// records (one text per step, id = global step id).
pub fn read_texts_jsonl<R: Read>(reader: R) -> Result<Vec<TextRecord>> {
    let mut out = Vec::new();
    let mut next_gid = 0usize;
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TextLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        match rec {
            TextLine::Kb { title: _, steps } => {
                for text in steps {
                    out.push(TextRecord {
                        id: next_gid.to_string(),
                        text: text.trim().to_string(),
                    });
                    next_gid += 1;
                }
            }
            TextLine::Segment {
                video_id,
                segment_index,
                text,
            } => out.push(TextRecord {
                id: crate::corpus::segment_key(&video_id, segment_index),
                text,
            }),
            TextLine::Plain { id, text } => out.push(TextRecord {
                id: match id {
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                },
                text,
            }),
        }
    }
    Ok(out)
}

pub fn load_texts(path: impl AsRef<Path>) -> Result<Vec<TextRecord>> {
    let path = path.as_ref();
    read_texts_jsonl(File::open(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(similarity(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert!(matches!(
            similarity(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn embed_texts_shapes_and_determinism() {
        let p = HashProvider::new(16, 5).unwrap();
        let t = embed_texts(&p, &["a b", "c", "a b"]).unwrap();
        assert_eq!((t.len(), t.dim()), (3, 16));
        assert_eq!(t.row(0), t.row(2));
    }

    #[test]
    fn empty_string_regression_hash() {
        let p = HashProvider::new(16, 5).unwrap();
        let t = embed_texts(&p, &[""]).unwrap();
        let bytes: Vec<u8> = t.raw().iter().flat_map(|v| v.to_le_bytes()).collect();
        let digest = hex::encode(Sha256::digest(&bytes));
        // Sixteen zero float32 values.
        assert_eq!(digest, hex::encode(Sha256::digest([0u8; 64])));
    }

    struct Failing;
    impl EmbeddingProvider for Failing {
        fn name(&self) -> &str {
            "failing"
        }
        fn dim(&self) -> usize {
            2
        }
        fn embed(&self, text: &str) -> Result<Vec<f64>> {
            if text == "bad" {
                Err(Error::invalid("boom"))
            } else {
                Ok(vec![0.0, 1.0])
            }
        }
    }

    #[test]
    fn provider_failure_carries_index() {
        let err = embed_texts(&Failing, &["ok", "ok", "bad"]).unwrap_err();
        assert!(matches!(err, Error::Provider { index: 2, .. }), "{err}");
    }

    #[test]
    fn texts_jsonl_shapes() {
        let s = r#"{"title":"t","steps":["a","b"]}
{"video_id":"v","segment_index":3,"start_ms":0,"end_ms":1,"text":"hi"}
{"id":7,"text":"x"}"#;
        let recs = read_texts_jsonl(s.as_bytes()).unwrap();
        let ids: Vec<_> = recs.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["0", "1", "v#3", "7"]);
    }
}
