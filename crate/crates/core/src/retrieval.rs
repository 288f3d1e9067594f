//! Private datastore, retrieval scoring, prompt merging, and the
//! retrieval-conditioned score functions.
//!
//! Records carry a caption embedding and an item embedding in the same
//! synthetic space the condition maps consume. Retrieval ranks by the sum
//! of the two L2 distances to the query and returns the top m with merged
//! prompts (caption + query) and the mean item embedding; the latter is
//! what the retrieval score conditions on.
//!
//! The store persists as one JSON record per line. Removal is constant
//! amortized time: the record leaves the in-memory index immediately and a
//! tombstone line is appended; once tombstones outnumber live lines the
//! file is compacted back to plain records. A removed id is unreachable by
//! retrieval from the moment `remove` returns.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::dist::{OracleScore, ScoreOracle};
use crate::error::{Error, Result};
use crate::num::{l2_dist, Real};
use crate::score::ScoreFn;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord<T> {
    pub id: String,
    pub caption_embedding: Vec<T>,
    pub item_embedding: Vec<T>,
    pub payload: Option<Vec<u8>>,
}

impl<T: Real> EmbeddingRecord<T> {
    pub fn new(id: impl Into<String>, caption_embedding: Vec<T>, item_embedding: Vec<T>) -> Self {
        Self {
            id: id.into(),
            caption_embedding,
            item_embedding,
            payload: None,
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.caption_embedding.len() != dim {
            return Err(Error::DimensionMismatch {
                context: "record caption embedding",
                expected: dim,
                actual: self.caption_embedding.len(),
            });
        }
        if self.item_embedding.len() != dim {
            return Err(Error::DimensionMismatch {
                context: "record item embedding",
                expected: dim,
                actual: self.item_embedding.len(),
            });
        }
        let finite = |v: &[T]| v.iter().all(|x| x.is_finite());
        if !finite(&self.caption_embedding) || !finite(&self.item_embedding) {
            return Err(Error::config("embedding", "record embeddings must be finite"));
        }
        Ok(())
    }
}

/// On-disk line format: either a record or a tombstone marking a removal.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum StoreLine {
    Tombstone { unlearn: String },
    Record(WireRecord),
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    id: String,
    caption: Vec<f64>,
    item: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    payload: Option<String>,
}

impl WireRecord {
    fn from_record<T: Real>(r: &EmbeddingRecord<T>) -> Self {
        let narrow = |v: &[T]| v.iter().map(|x| x.to_f64().expect("finite embedding")).collect();
        Self {
            id: r.id.clone(),
            caption: narrow(&r.caption_embedding),
            item: narrow(&r.item_embedding),
            payload: r.payload.as_ref().map(|b| BASE64.encode(b)),
        }
    }

    fn into_record<T: Real>(self, line: usize) -> Result<EmbeddingRecord<T>> {
        let widen = |v: Vec<f64>| v.into_iter().map(T::lit).collect();
        let payload = match self.payload {
            Some(s) => Some(BASE64.decode(s.as_bytes()).map_err(|e| Error::StoreFormat {
                line,
                message: format!("invalid payload encoding: {e}"),
            })?),
            None => None,
        };
        Ok(EmbeddingRecord {
            id: self.id,
            caption_embedding: widen(self.caption),
            item_embedding: widen(self.item),
            payload,
        })
    }
}

#[derive(Debug)]
pub struct DataStore<T> {
    records: Vec<EmbeddingRecord<T>>,
    index: HashMap<String, usize>,
    /// Embedding dimension; 0 until the first record arrives.
    dim: usize,
    path: Option<PathBuf>,
    /// Live record lines and pending tombstone lines in the backing file.
    file_records: usize,
    file_tombstones: usize,
}

impl<T: Real> DataStore<T> {
    /// Store without a backing file.
    pub fn in_memory(dim: usize) -> Self {
        Self {
            records: Vec::new(),
            index: HashMap::new(),
            dim,
            path: None,
            file_records: 0,
            file_tombstones: 0,
        }
    }

    /// Create or truncate a backing file and start empty.
    pub fn create(path: impl AsRef<Path>, dim: usize) -> Result<Self> {
        File::create(path.as_ref())?;
        let mut store = Self::in_memory(dim);
        store.path = Some(path.as_ref().to_path_buf());
        Ok(store)
    }

    /// Load a store by replaying its record and tombstone lines.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path.as_ref())?;
        let mut store = Self::in_memory(0);
        store.path = Some(path.as_ref().to_path_buf());
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: StoreLine = serde_json::from_str(&line).map_err(|e| Error::StoreFormat {
                line: lineno + 1,
                message: e.to_string(),
            })?;
            match parsed {
                StoreLine::Record(wire) => {
                    let record = wire.into_record(lineno + 1)?;
                    if store.dim == 0 {
                        store.dim = record.caption_embedding.len();
                    }
                    record.validate(store.dim).map_err(|e| Error::StoreFormat {
                        line: lineno + 1,
                        message: e.to_string(),
                    })?;
                    if store.index.contains_key(&record.id) {
                        return Err(Error::StoreFormat {
                            line: lineno + 1,
                            message: format!("duplicate id {}", record.id),
                        });
                    }
                    store.index.insert(record.id.clone(), store.records.len());
                    store.records.push(record);
                    store.file_records += 1;
                }
                StoreLine::Tombstone { unlearn } => {
                    store.remove_in_memory(&unlearn).map_err(|_| Error::StoreFormat {
                        line: lineno + 1,
                        message: format!("tombstone for unknown id {unlearn}"),
                    })?;
                    store.file_tombstones += 1;
                }
            }
        }
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[EmbeddingRecord<T>] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingRecord<T>> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn insert(&mut self, record: EmbeddingRecord<T>) -> Result<()> {
        if self.dim == 0 {
            self.dim = record.caption_embedding.len();
        }
        record.validate(self.dim)?;
        if self.index.contains_key(&record.id) {
            return Err(Error::config("id", format!("duplicate id {}", record.id)));
        }
        if let Some(path) = &self.path {
            let mut file = OpenOptions::new().append(true).open(path)?;
            let mut line = serde_json::to_string(&StoreLine::Record(WireRecord::from_record(
                &record,
            )))
            .expect("record serialization cannot fail");
            line.push('\n');
            file.write_all(line.as_bytes())?;
            self.file_records += 1;
        }
        self.index.insert(record.id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    fn remove_in_memory(&mut self, id: &str) -> Result<()> {
        let pos = self.index.remove(id).ok_or_else(|| Error::UnknownId(id.into()))?;
        self.records.swap_remove(pos);
        if pos < self.records.len() {
            self.index.insert(self.records[pos].id.clone(), pos);
        }
        Ok(())
    }

    /// Remove a record. Constant amortized time: a tombstone is appended
    /// and the file is compacted only when tombstones outnumber records.
    pub fn remove(&mut self, id: &str) -> Result<()> {
        self.remove_in_memory(id)?;
        if let Some(path) = &self.path {
            let mut file = OpenOptions::new().append(true).open(path)?;
            let mut line = serde_json::to_string(&StoreLine::Tombstone { unlearn: id.into() })
                .expect("tombstone serialization cannot fail");
            line.push('\n');
            file.write_all(line.as_bytes())?;
            self.file_tombstones += 1;
            if self.file_tombstones > self.records.len() {
                self.compact()?;
            }
        }
        Ok(())
    }

    /// Rewrite the backing file with only the live records.
    pub fn compact(&mut self) -> Result<()> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let tmp = path.with_extension("tmp");
        {
            let mut out = BufWriter::new(File::create(&tmp)?);
            for record in &self.records {
                let mut line =
                    serde_json::to_string(&StoreLine::Record(WireRecord::from_record(record)))
                        .expect("record serialization cannot fail");
                line.push('\n');
                out.write_all(line.as_bytes())?;
            }
            out.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        self.file_records = self.records.len();
        self.file_tombstones = 0;
        Ok(())
    }
}

/// Top-m retrieval outcome: a snapshot of the matched records plus the
/// derived conditioning vectors.
#[derive(Debug, Clone)]
pub struct RetrievalResult<T> {
    pub records: Vec<EmbeddingRecord<T>>,
    /// Merged prompts: caption + query, one per record.
    pub merged_prompts: Vec<Vec<T>>,
    pub mean_item_embedding: Vec<T>,
    pub query: Vec<T>,
}

/// Retrieval score of one record against a query: the sum of L2 distances
/// from the query to the caption and to the item embedding.
pub fn record_score<T: Real>(record: &EmbeddingRecord<T>, c_test: &[T]) -> T {
    l2_dist(c_test, &record.caption_embedding) + l2_dist(c_test, &record.item_embedding)
}

/// The min(m, store size) records with the smallest retrieval score, ties
/// broken by id order.
pub fn retrieve<T: Real>(
    store: &DataStore<T>,
    c_test: &[T],
    m: usize,
) -> Result<RetrievalResult<T>> {
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    if m == 0 {
        return Err(Error::config("m", "must retrieve at least one record"));
    }
    if c_test.len() != store.dim() {
        return Err(Error::DimensionMismatch {
            context: "retrieval query",
            expected: store.dim(),
            actual: c_test.len(),
        });
    }
    let mut order: Vec<(T, &EmbeddingRecord<T>)> = store
        .records()
        .iter()
        .map(|r| (record_score(r, c_test), r))
        .collect();
    order.sort_by(|(sa, ra), (sb, rb)| {
        sa.partial_cmp(sb)
            .expect("retrieval scores are finite")
            .then_with(|| ra.id.cmp(&rb.id))
    });
    order.truncate(m);

    let records: Vec<EmbeddingRecord<T>> = order.into_iter().map(|(_, r)| r.clone()).collect();
    let merged_prompts = records
        .iter()
        .map(|r| {
            r.caption_embedding
                .iter()
                .zip(c_test)
                .map(|(&a, &b)| a + b)
                .collect()
        })
        .collect();
    let k = store.dim();
    let mut mean_item_embedding = vec![T::zero(); k];
    for r in &records {
        for j in 0..k {
            mean_item_embedding[j] += r.item_embedding[j];
        }
    }
    let count = T::lit(records.len() as f64);
    for v in &mut mean_item_embedding {
        *v /= count;
    }
    Ok(RetrievalResult {
        records,
        merged_prompts,
        mean_item_embedding,
        query: c_test.to_vec(),
    })
}

/// Score function conditioning the base oracle on the mean retrieved item
/// embedding.
pub fn retrieval_score_fn<T: Real>(
    base: &ScoreOracle<T>,
    result: &RetrievalResult<T>,
) -> Result<OracleScore<T>> {
    base.score_fn(&result.mean_item_embedding)
}

/// Fixed-weight combination of the query-conditioned score and the
/// retrieval score: w0 * s(x, t, c_test) + w1 * s(x, t, mean item).
pub struct RetrievalMixtureScore<T> {
    base: OracleScore<T>,
    retrieved: OracleScore<T>,
    w0: T,
    w1: T,
}

impl<T: Real> ScoreFn<T> for RetrievalMixtureScore<T> {
    fn eval(&self, x: &[T], step: usize) -> Result<Vec<T>> {
        let a = self.base.eval(x, step)?;
        let b = self.retrieved.eval(x, step)?;
        Ok(a.iter()
            .zip(&b)
            .map(|(&sa, &sb)| self.w0 * sa + self.w1 * sb)
            .collect())
    }
}

pub fn retrieval_mixture_score_fn<T: Real>(
    base: &ScoreOracle<T>,
    result: &RetrievalResult<T>,
    w0: T,
    w1: T,
) -> Result<RetrievalMixtureScore<T>> {
    if !(w0.is_finite() && w1.is_finite() && w0 >= T::zero() && w1 >= T::zero()) {
        return Err(Error::config("w0", "mixture weights must be non-negative"));
    }
    if (w0 + w1 - T::one()).abs() > T::weight_tol() {
        return Err(Error::config("w0", "mixture weights must sum to 1"));
    }
    Ok(RetrievalMixtureScore {
        base: base.score_fn(&result.query)?,
        retrieved: base.score_fn(&result.mean_item_embedding)?,
        w0,
        w1,
    })
}

/// Remove a record from the store and persist the removal; the id is
/// unreachable by any subsequent retrieval.
pub fn unlearn<T: Real>(store: &mut DataStore<T>, id: &str) -> Result<()> {
    store.remove(id)
}
