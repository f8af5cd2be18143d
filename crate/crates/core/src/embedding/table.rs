use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{l2_normalize, Matrix};

const MAGIC: &[u8; 4] = b"EMB1";
/// Magic, `u32` dimension and `u64` row count.
pub const HEADER_BYTES: u64 = 16;

/// Id-indexed store of `d`-dimensional vectors.
///
/// Rows are held in float32, the on-disk precision; callers convert rows to
/// float64 before doing math on them.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, ids: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be at least 1"));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: ids.len() * dim,
                actual: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value in row {} of embedding table",
                pos / dim
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate embedding id `{id}`")));
            }
        }
        Ok(Self {
            dim,
            ids,
            data,
            index,
        })
    }

    /// Builds a table from float64 rows, rounding to float32.
    pub fn from_rows<R: AsRef<[f64]>>(dim: usize, ids: Vec<String>, rows: &[R]) -> Result<Self> {
        if rows.len() != ids.len() {
            return Err(Error::DimensionMismatch {
                expected: ids.len(),
                actual: rows.len(),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: r.len(),
                });
            }
            data.extend(r.iter().map(|&v| v as f32));
        }
        Self::new(dim, ids, data)
    }

    pub fn from_matrix(ids: Vec<String>, m: &Matrix) -> Result<Self> {
        let rows: Vec<&[f64]> = m.iter_rows().collect();
        Self::from_rows(m.cols(), ids, &rows)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn get_f64(&self, id: &str) -> Option<Vec<f64>> {
        self.position(id).map(|i| self.row_f64(i))
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.len(),
            self.dim,
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("table shape is consistent")
    }

    /// Copy with every non-zero row scaled to unit norm, turning dot-product
    /// similarity into cosine similarity.
    pub fn l2_normalized(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..self.len() {
            let mut r = self.row_f64(i);
            l2_normalize(&mut r);
            data.extend(r.into_iter().map(|v| v as f32));
        }
        Self {
            dim: self.dim,
            ids: self.ids.clone(),
            data,
            index: self.index.clone(),
        }
    }

    /// Size in bytes of this table in the on-disk format.
    pub fn encoded_len(&self) -> u64 {
        HEADER_BYTES
            + self.ids.iter().map(|id| 4 + id.len() as u64).sum::<u64>()
            + self.data.len() as u64 * 4
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        let dim = u32::try_from(self.dim).map_err(|_| Error::invalid("dimension exceeds u32"))?;
        w.write_all(&dim.to_le_bytes())?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        for id in &self.ids {
            let len = u32::try_from(id.len()).map_err(|_| Error::invalid("id exceeds u32"))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(id.as_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.dim * 4);
        for row in self.data.chunks_exact(self.dim) {
            buf.clear();
            for v in row {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.encoded_len() as usize);
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let actual = bytes.len() as u64;
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4, HEADER_BYTES)?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"EMB1\"",
                String::from_utf8_lossy(magic)
            )));
        }
        let dim = u32::from_le_bytes(cur.take(4, HEADER_BYTES)?.try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(cur.take(8, HEADER_BYTES)?.try_into().unwrap());
        if dim == 0 {
            return Err(Error::Format("dimension 0".into()));
        }
        // Every id costs at least its 4-byte length prefix.
        if count > actual / 4 {
            return Err(Error::Truncated {
                expected: HEADER_BYTES.saturating_add(count.saturating_mul(4)),
                actual,
            });
        }
        let mut ids = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let need = cur.pos as u64 + 4;
            let len = u32::from_le_bytes(cur.take(4, need)?.try_into().unwrap()) as usize;
            let need = cur.pos as u64 + len as u64;
            let raw = cur.take(len, need)?;
            let id = std::str::from_utf8(raw)
                .map_err(|_| Error::Format(format!("id {} is not valid UTF-8", ids.len())))?;
            ids.push(id.to_string());
        }
        let matrix_bytes = count
            .checked_mul(dim as u64)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("matrix size overflows".into()))?;
        let expected = cur.pos as u64 + matrix_bytes;
        if actual != expected {
            return Err(Error::Truncated { expected, actual });
        }
        let data = bytes[cur.pos..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(dim, ids, data).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, expected_total: u64) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Truncated {
                expected: expected_total.max(self.pos as u64 + n as u64),
                actual: self.bytes.len() as u64,
            }),
        }
    }
}
