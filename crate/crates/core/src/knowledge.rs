//! The contextual knowledge database: labelled training molecules plus
//! validation molecules with the model's predictions, each with a cached
//! embedding, and similarity-ranked retrieval over it.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embed::{cosine_similarity, molecule_text, Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::hashing::SplitMix64;
use crate::ingest::{DatasetBundle, PredictionSet, Split, TaskKind, TaskSpec};

pub const SIDECAR_MAGIC: &[u8; 4] = b"LCDB";
pub const METADATA_FILE: &str = "knowledge.jsonl";
pub const SIDECAR_FILE: &str = "embeddings.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Train,
    Valid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeEntry {
    pub id: String,
    pub smiles: String,
    pub description: Option<String>,
    pub label: f64,
    /// Present exactly for validation entries.
    pub primary_prediction: Option<f64>,
    pub source: Source,
    pub embedding: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderFingerprint {
    pub backend: String,
    pub dim: usize,
    pub include_description: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeDatabase {
    task: TaskSpec,
    fingerprint: EmbedderFingerprint,
    entries: Vec<KnowledgeEntry>,
}

impl KnowledgeDatabase {
    /// Assembles a database from prepared entries, checking its invariants.
    pub fn from_entries(
        task: TaskSpec,
        fingerprint: EmbedderFingerprint,
        entries: Vec<KnowledgeEntry>,
    ) -> Result<Self> {
        let mut ids = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !ids.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
            if e.embedding.dim() != fingerprint.dim {
                return Err(Error::DimMismatch {
                    left: fingerprint.dim,
                    right: e.embedding.dim(),
                });
            }
            let consistent = match e.source {
                Source::Train => e.primary_prediction.is_none(),
                Source::Valid => e.primary_prediction.is_some(),
            };
            if !consistent {
                return Err(Error::Config(format!(
                    "entry {:?}: primary prediction must be present exactly for validation entries",
                    e.id
                )));
            }
        }
        Ok(Self {
            task,
            fingerprint,
            entries,
        })
    }

    pub fn task(&self) -> TaskSpec {
        self.task
    }

    pub fn fingerprint(&self) -> &EmbedderFingerprint {
        &self.fingerprint
    }

    pub fn dim(&self) -> usize {
        self.fingerprint.dim
    }

    pub fn entries(&self) -> &[KnowledgeEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, source: Source) -> usize {
        self.entries.iter().filter(|e| e.source == source).count()
    }
}

/// Builds the database from the train and valid splits. Embeddings are
/// stored at binary32 precision so that persistence is lossless.
pub fn build_database(
    bundle: &DatasetBundle,
    val_predictions: &PredictionSet,
    embedder: &Embedder,
    include_description: bool,
) -> Result<KnowledgeDatabase> {
    if val_predictions.split != Split::Valid {
        return Err(Error::Config("knowledge database needs validation predictions".into()));
    }
    let members: Vec<_> = bundle
        .records
        .iter()
        .filter(|r| matches!(r.split, Split::Train | Split::Valid))
        .collect();
    let mut primaries = Vec::with_capacity(members.len());
    for r in &members {
        primaries.push(match r.split {
            Split::Valid => Some(
                val_predictions
                    .get(&r.id)
                    .ok_or_else(|| Error::MissingPrediction(r.id.clone()))?,
            ),
            _ => None,
        });
    }
    let texts: Vec<String> = members.iter().map(|r| molecule_text(r, include_description)).collect();
    let vectors = embedder.embed_batch(&texts)?;
    let dim = match (vectors.first(), embedder.config().known_dim()) {
        (Some(v), _) => v.dim(),
        (None, Some(d)) => d,
        (None, None) => 0,
    };

    let entries = members
        .iter()
        .zip(primaries)
        .zip(vectors)
        .map(|((r, primary), v)| KnowledgeEntry {
            id: r.id.clone(),
            smiles: r.smiles.clone(),
            description: r.description.clone(),
            label: r.label.expect("train/valid labels validated on load"),
            primary_prediction: primary,
            source: if r.split == Split::Train {
                Source::Train
            } else {
                Source::Valid
            },
            embedding: v.quantized(),
        })
        .collect();
    KnowledgeDatabase::from_entries(
        bundle.task,
        EmbedderFingerprint {
            backend: embedder.config().backend_id(),
            dim,
            include_description,
        },
        entries,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum RetrievalStrategy {
    TopK,
    Jump,
    Random { seed: u64 },
}

impl RetrievalStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            RetrievalStrategy::TopK => "topk",
            RetrievalStrategy::Jump => "jump",
            RetrievalStrategy::Random { .. } => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredEntry<'a> {
    pub entry: &'a KnowledgeEntry,
    /// Position in the similarity ranking of the candidate pool.
    pub rank: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrievedContext<'a> {
    pub train_entries: Vec<ScoredEntry<'a>>,
    pub valid_entries: Vec<ScoredEntry<'a>>,
}

impl<'a> RetrievedContext<'a> {
    pub fn len(&self) -> usize {
        self.train_entries.len() + self.valid_entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All entries in rank order.
    pub fn ranked(&self) -> Vec<&ScoredEntry<'a>> {
        let mut all: Vec<_> = self.train_entries.iter().chain(&self.valid_entries).collect();
        all.sort_by_key(|s| s.rank);
        all
    }

    pub fn ids(&self) -> Vec<String> {
        self.ranked().iter().map(|s| s.entry.id.clone()).collect()
    }
}

/// Ranks every entry except `exclude_id` by descending similarity, ties by
/// ascending id.
pub fn rank_pool<'a>(
    db: &'a KnowledgeDatabase,
    query: &EmbeddingVector,
    exclude_id: Option<&str>,
    source: Option<Source>,
) -> Result<Vec<(&'a KnowledgeEntry, f64)>> {
    if query.dim() != db.dim() {
        return Err(Error::DimMismatch {
            left: db.dim(),
            right: query.dim(),
        });
    }
    let mut pool = Vec::with_capacity(db.len());
    for e in &db.entries {
        if Some(e.id.as_str()) == exclude_id || source.is_some_and(|s| s != e.source) {
            continue;
        }
        pool.push((e, cosine_similarity(query, &e.embedding)?));
    }
    pool.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.id.cmp(&b.0.id))
    });
    Ok(pool)
}

/// Ranks chosen from a pool of `n` by `strategy`, ascending.
pub fn select_ranks(strategy: RetrievalStrategy, n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    match strategy {
        RetrievalStrategy::TopK => (0..k).collect(),
        RetrievalStrategy::Jump if k == 1 => vec![0],
        RetrievalStrategy::Jump => (0..k).map(|i| i * (n - 1) / (k - 1)).collect(),
        RetrievalStrategy::Random { seed } => {
            let mut rng = SplitMix64::new(seed);
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..k {
                let j = i + (rng.next_u64() % (n - i) as u64) as usize;
                idx.swap(i, j);
            }
            let mut chosen = idx[..k].to_vec();
            chosen.sort_unstable();
            chosen
        }
    }
}

pub fn retrieve<'a>(
    db: &'a KnowledgeDatabase,
    query: &EmbeddingVector,
    k: usize,
    strategy: RetrievalStrategy,
    exclude_id: Option<&str>,
) -> Result<RetrievedContext<'a>> {
    retrieve_from(db, query, k, strategy, exclude_id, None)
}

/// Like [`retrieve`], optionally restricted to one source split.
pub fn retrieve_from<'a>(
    db: &'a KnowledgeDatabase,
    query: &EmbeddingVector,
    k: usize,
    strategy: RetrievalStrategy,
    exclude_id: Option<&str>,
    source: Option<Source>,
) -> Result<RetrievedContext<'a>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let pool = rank_pool(db, query, exclude_id, source)?;
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut ctx = RetrievedContext::default();
    for rank in select_ranks(strategy, pool.len(), k) {
        let (entry, similarity) = pool[rank];
        let scored = ScoredEntry {
            entry,
            rank,
            similarity,
        };
        match entry.source {
            Source::Train => ctx.train_entries.push(scored),
            Source::Valid => ctx.valid_entries.push(scored),
        }
    }
    Ok(ctx)
}

#[derive(Serialize, Deserialize)]
struct MetadataHeader {
    task: TaskKind,
    backend: String,
    dim: usize,
    include_description: bool,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct MetadataLine {
    id: String,
    smiles: String,
    description: Option<String>,
    label: f64,
    primary_prediction: Option<f64>,
    source: Source,
}

/// Writes `knowledge.jsonl` and `embeddings.bin` into `dir`.
pub fn save_database(db: &KnowledgeDatabase, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta_path = dir.join(METADATA_FILE);
    let side_path = dir.join(SIDECAR_FILE);

    let io = |p: &PathBuf| {
        let p = p.clone();
        move |e| Error::io(p, e)
    };
    let mut meta = BufWriter::new(File::create(&meta_path).map_err(io(&meta_path))?);
    let header = MetadataHeader {
        task: db.task.kind(),
        backend: db.fingerprint.backend.clone(),
        dim: db.dim(),
        include_description: db.fingerprint.include_description,
        count: db.len(),
    };
    writeln!(meta, "{}", json_line(&header)).map_err(io(&meta_path))?;
    for e in &db.entries {
        let line = MetadataLine {
            id: e.id.clone(),
            smiles: e.smiles.clone(),
            description: e.description.clone(),
            label: e.label,
            primary_prediction: e.primary_prediction,
            source: e.source,
        };
        writeln!(meta, "{}", json_line(&line)).map_err(io(&meta_path))?;
    }
    meta.flush().map_err(io(&meta_path))?;

    let mut side = BufWriter::new(File::create(&side_path).map_err(io(&side_path))?);
    side.write_all(SIDECAR_MAGIC).map_err(io(&side_path))?;
    side.write_all(&(db.dim() as u32).to_le_bytes())
        .map_err(io(&side_path))?;
    side.write_all(&(db.len() as u32).to_le_bytes())
        .map_err(io(&side_path))?;
    for e in &db.entries {
        for &x in e.embedding.values() {
            side.write_all(&(x as f32).to_le_bytes()).map_err(io(&side_path))?;
        }
    }
    side.flush().map_err(io(&side_path))?;
    Ok(())
}

fn json_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("metadata serializes")
}

pub fn load_database(dir: impl AsRef<Path>) -> Result<KnowledgeDatabase> {
    let dir = dir.as_ref();
    let meta_path = dir.join(METADATA_FILE);
    let side_path = dir.join(SIDECAR_FILE);

    let meta = File::open(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut lines = BufReader::new(meta).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::format(&meta_path, "missing header line"))?
        .map_err(|e| Error::io(&meta_path, e))?;
    let header: MetadataHeader =
        serde_json::from_str(&header_line).map_err(|e| Error::format(&meta_path, format!("header: {e}")))?;
    let mut records = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(&meta_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetadataLine =
            serde_json::from_str(&line).map_err(|e| Error::format(&meta_path, format!("line {}: {e}", i + 2)))?;
        records.push(rec);
    }
    if records.len() != header.count {
        return Err(Error::CountMismatch {
            metadata: header.count,
            sidecar: records.len(),
        });
    }

    let mut bytes = Vec::new();
    File::open(&side_path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&side_path, e))?;
    let vectors = decode_sidecar(&bytes, header.dim, header.count)?;

    let entries = records
        .into_iter()
        .zip(vectors)
        .map(|(r, embedding)| KnowledgeEntry {
            id: r.id,
            smiles: r.smiles,
            description: r.description,
            label: r.label,
            primary_prediction: r.primary_prediction,
            source: r.source,
            embedding,
        })
        .collect();
    KnowledgeDatabase::from_entries(
        TaskSpec::new(header.task),
        EmbedderFingerprint {
            backend: header.backend,
            dim: header.dim,
            include_description: header.include_description,
        },
        entries,
    )
}

fn decode_sidecar(bytes: &[u8], dim: usize, count: usize) -> Result<Vec<EmbeddingVector>> {
    if bytes.len() < 12 {
        return Err(Error::TruncatedEmbeddings {
            expected: 12,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != SIDECAR_MAGIC {
        return Err(Error::BadMagic);
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let (file_dim, file_count) = (word(4), word(8));
    if file_dim != dim {
        return Err(Error::DimMismatch {
            left: dim,
            right: file_dim,
        });
    }
    if file_count != count {
        return Err(Error::CountMismatch {
            metadata: count,
            sidecar: file_count,
        });
    }
    let expected = 12 + 4 * dim * count;
    if bytes.len() != expected {
        return Err(Error::TruncatedEmbeddings {
            expected,
            found: bytes.len(),
        });
    }
    let floats: Vec<f64> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Ok(floats
        .chunks(dim.max(1))
        .take(count)
        .map(|c| EmbeddingVector::new(c.to_vec()))
        .collect())
}
