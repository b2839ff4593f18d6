//! Exact maximum-inner-product search over unit-normalized embeddings.
//!
//! Rows are stored as `f32`; dot products accumulate in `f64` with the query
//! rounded to `f32` first, so single and batched searches are bit-identical.
//! Results are ordered by descending score, ties by ascending id.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::retriever::UnitEmbedding;

pub const INDEX_MAGIC: &[u8; 4] = b"MIDX";
pub const INDEX_VERSION: u32 = 1;
const UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    ids: Vec<String>,
    rows: Vec<f32>,
    frozen: bool,
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        Self { dim, ids: Vec::new(), rows: Vec::new(), frozen: false }
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
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Makes the index read-only; further `add` calls fail.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn add(&mut self, id: &str, v: &UnitEmbedding) -> Result<()> {
        self.add_vector(id, v.as_slice())
    }

    /// Appends a raw vector, which must already have unit L2 norm.
    pub fn add_vector(&mut self, id: &str, v: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: v.len() });
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= UNIT_TOL) {
            return Err(Error::NotUnitNormalized(norm));
        }
        // linear scan keeps the struct free of a second copy of every id
        if self.ids.iter().any(|x| x == id) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        self.ids.push(id.to_string());
        self.rows.extend(v.iter().map(|&x| x as f32));
        Ok(())
    }

    fn check_query(&self, q: &[f64], k: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if q.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: q.len() });
        }
        Ok(())
    }

    pub fn search_top_k(&self, q: &UnitEmbedding, k: usize) -> Result<Vec<Hit>> {
        self.search_slice(q.as_slice(), k)
    }

    pub fn search_slice(&self, q: &[f64], k: usize) -> Result<Vec<Hit>> {
        self.check_query(q, k)?;
        let q32: Vec<f32> = q.iter().map(|&x| x as f32).collect();
        let scores: Vec<f64> = (0..self.len()).map(|i| dot(self.row(i), &q32)).collect();
        Ok(self.top_k(scores, k))
    }

    /// Searches many queries in one pass over the stored rows. Each result
    /// list equals the corresponding `search_top_k` call.
    pub fn batch_search(&self, queries: &[UnitEmbedding], k: usize) -> Result<Vec<Vec<Hit>>> {
        for q in queries {
            self.check_query(q.as_slice(), k)?;
        }
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let q32: Vec<Vec<f32>> = queries.iter().map(|q| q.as_slice().iter().map(|&x| x as f32).collect()).collect();
        let mut scores = vec![vec![0.0; self.len()]; queries.len()];
        for i in 0..self.len() {
            let row = self.row(i);
            for (qi, q) in q32.iter().enumerate() {
                scores[qi][i] = dot(row, q);
            }
        }
        Ok(scores.into_iter().map(|s| self.top_k(s, k)).collect())
    }

    fn top_k(&self, scores: Vec<f64>, k: usize) -> Vec<Hit> {
        let order = |a: &usize, b: &usize| -> Ordering {
            scores[*b].total_cmp(&scores[*a]).then_with(|| self.ids[*a].cmp(&self.ids[*b]))
        };
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        if k < idx.len() {
            idx.select_nth_unstable_by(k - 1, order);
            idx.truncate(k);
        }
        idx.sort_unstable_by(order);
        idx.into_iter().map(|i| Hit { id: self.ids[i].clone(), score: scores[i] }).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_u32::<LittleEndian>(INDEX_VERSION)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u64::<LittleEndian>(self.ids.len() as u64)?;
        for id in &self.ids {
            w.write_u32::<LittleEndian>(id.len() as u32)?;
            w.write_all(id.as_bytes())?;
        }
        for &x in &self.rows {
            w.write_f32::<LittleEndian>(x)?;
        }
        Ok(())
    }

    /// Loads an index file; the result is frozen.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut index = Self::read_from(&mut r)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if !rest.is_empty() {
            return Err(Error::Corrupt(format!("{} trailing bytes after index payload", rest.len())));
        }
        index.frozen = true;
        Ok(index)
    }

    fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::TruncatedIndex)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(INDEX_MAGIC).into(),
                found: String::from_utf8_lossy(&magic).into(),
            });
        }
        let trunc = |_| Error::TruncatedIndex;
        let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
        if version != INDEX_VERSION {
            return Err(Error::UnsupportedVersion { expected: INDEX_VERSION, found: version });
        }
        let dim = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let count = r.read_u64::<LittleEndian>().map_err(trunc)? as usize;
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(trunc)?;
            let id = String::from_utf8(buf).map_err(|_| Error::Corrupt("id is not UTF-8".into()))?;
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateId(id));
            }
            ids.push(id);
        }
        let mut rows = vec![0f32; count * dim];
        r.read_f32_into::<LittleEndian>(&mut rows).map_err(trunc)?;
        Ok(Self { dim, ids, rows, frozen: true })
    }
}

fn dot(row: &[f32], q: &[f32]) -> f64 {
    row.iter().zip(q).map(|(&a, &b)| a as f64 * b as f64).sum()
}
