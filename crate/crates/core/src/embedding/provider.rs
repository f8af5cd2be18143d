use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::math::{l2_normalize, stable_hash};

use super::EmbeddingTable;

/// A source of sentence embeddings. Identical text must map to an identical
/// vector.
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Signed feature hashing over whitespace tokens.
///
/// Each token lands in one of `d` buckets with a ±1 sign; the bucket sums are
/// L2-normalized. Texts sharing tokens get higher dot products. Text without
/// tokens maps to the zero vector.
#[derive(Debug, Clone)]
pub struct HashProvider {
    dim: usize,
    seed: u64,
    name: String,
}

impl HashProvider {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("hash provider needs d >= 1"));
        }
        Ok(Self {
            dim,
            seed,
            name: format!("hash-d{dim}-s{seed}"),
        })
    }
}

/// Shorthand for [`HashProvider::new`].
pub fn hash_provider(dim: usize, seed: u64) -> Result<HashProvider> {
    HashProvider::new(dim, seed)
}

impl EmbeddingProvider for HashProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        for token in text.split_whitespace() {
            let h = stable_hash(token.as_bytes(), self.seed);
            let bucket = (h % self.dim as u64) as usize;
            v[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
        l2_normalize(&mut v);
        Ok(v)
    }
}

/// Serves precomputed vectors (e.g. exported from a neural sentence encoder)
/// keyed by the exact text they were computed from.
#[derive(Debug, Clone)]
pub struct LookupProvider {
    name: String,
    dim: usize,
    rows: HashMap<String, Vec<f64>>,
}

impl LookupProvider {
    /// `texts[i]` is the sentence whose embedding is row `i` of `table`.
    pub fn new(name: impl Into<String>, texts: &[String], table: &EmbeddingTable) -> Result<Self> {
        if texts.len() != table.len() {
            return Err(Error::DimensionMismatch {
                expected: table.len(),
                actual: texts.len(),
            });
        }
        let rows = texts
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), table.row_f64(i)))
            .collect();
        Ok(Self {
            name: name.into(),
            dim: table.dim(),
            rows,
        })
    }
}

impl EmbeddingProvider for LookupProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.rows
            .get(text)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("no precomputed embedding for `{text}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{dot, norm};

    #[test]
    fn identical_sentences_have_unit_similarity() {
        let p = HashProvider::new(64, 1).unwrap();
        let a = p.embed("whisk the eggs").unwrap();
        let b = p.embed("whisk the eggs").unwrap();
        assert_eq!(a, b);
        assert!((dot(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_text_is_zero_vector() {
        let p = HashProvider::new(8, 1).unwrap();
        assert_eq!(p.embed("   ").unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn outputs_are_unit_norm() {
        let p = HashProvider::new(32, 9).unwrap();
        for t in ["a", "a a a", "one two three four five six seven"] {
            assert!((norm(&p.embed(t).unwrap()) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn extra_token_lowers_similarity_but_keeps_it_positive() {
        let p = HashProvider::new(256, 3).unwrap();
        let a = p.embed("cut the onion into small pieces").unwrap();
        let b = p.embed("cut the onion into small pieces quickly").unwrap();
        let c = p.embed("preheat oven before baking bread loaf").unwrap();
        let (ab, ac) = (dot(&a, &b), dot(&a, &c));
        assert!(ab < 1.0 && ab > ac, "ab={ab} ac={ac}");
        // Direct computation: six shared unit-weight tokens against seven,
        // when no two tokens share a bucket, gives 6 / sqrt(6 * 7).
        assert!((ab - 6.0 / 42f64.sqrt()).abs() < 1e-12, "ab={ab}");
    }

    #[test]
    fn lookup_provider_serves_rows() {
        let table =
            EmbeddingTable::new(2, vec!["0".into(), "1".into()], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = LookupProvider::new("file", &["x".into(), "y".into()], &table).unwrap();
        assert_eq!(p.embed("y").unwrap(), vec![0.0, 1.0]);
        assert!(p.embed("z").is_err());
    }
}
