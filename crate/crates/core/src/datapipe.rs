//! Corpus ingestion, consistency filtering, positive-aware hard-negative
//! mining, one-dataset-per-batch sampling, and language-temperature weights.
//!
//! Corpora are JSON-lines, one [`PairRecord`] per line. Shards are
//! independent, so filtering and mining parallelize across them.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode, EncoderModel, Role};
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::objectives::mix;

/// One training pair: a query, its positive document, and optional mined
/// hard negatives.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PairRecord {
    pub query: String,
    pub document: String,
    #[serde(default = "default_dataset")]
    pub dataset: String,
    #[serde(default = "default_language")]
    pub language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard_negatives: Option<Vec<String>>,
}

fn default_dataset() -> String {
    "default".into()
}

fn default_language() -> String {
    "und".into()
}

impl PairRecord {
    pub fn new(query: impl Into<String>, document: impl Into<String>) -> Self {
        PairRecord {
            query: query.into(),
            document: document.into(),
            dataset: default_dataset(),
            language: default_language(),
            hard_negatives: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.query.trim().is_empty() || self.document.trim().is_empty() {
            return Err(Error::Input("pair record has an empty query or document".into()));
        }
        Ok(())
    }
}

/// An ordered slice of a corpus, at most `shard_size` records.
#[derive(Debug, Clone)]
pub struct Shard {
    records: Vec<PairRecord>,
    shard_size: usize,
}

impl Shard {
    pub fn new(records: Vec<PairRecord>, shard_size: usize) -> Result<Self> {
        if shard_size == 0 {
            return Err(Error::Config("shard_size must be positive".into()));
        }
        if records.len() > shard_size {
            return Err(Error::Config(format!(
                "{} records exceed shard_size {shard_size}",
                records.len()
            )));
        }
        Ok(Shard { records, shard_size })
    }

    pub fn records(&self) -> &[PairRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn shard_size(&self) -> usize {
        self.shard_size
    }
}

/// Split a corpus into consecutive shards of at most `shard_size` records.
pub fn split_into_shards(records: Vec<PairRecord>, shard_size: usize) -> Result<Vec<Shard>> {
    if shard_size == 0 {
        return Err(Error::Config("shard_size must be positive".into()));
    }
    let mut shards = Vec::new();
    let mut it = records.into_iter().peekable();
    while it.peek().is_some() {
        let chunk: Vec<PairRecord> = it.by_ref().take(shard_size).collect();
        shards.push(Shard { records: chunk, shard_size });
    }
    Ok(shards)
}

// ── embedder interface ──────────────────────────────────────────────────

/// Anything that maps texts to unit-norm embedding rows. Teachers for
/// filtering/mining and the trained models themselves both qualify.
pub trait Embedder: Sync {
    fn embed(&self, texts: &[String], role: Role) -> Result<Tensor>;
    fn dim(&self) -> usize;
    /// Embedding widths this embedder can serve (Matryoshka truncation).
    fn supports_dim(&self, dim: usize) -> bool {
        dim == self.dim()
    }
}

/// An [`EncoderModel`] acting as an embedder.
pub struct ModelEmbedder<'a> {
    pub model: &'a EncoderModel,
    pub max_len: usize,
    /// Texts are embedded in chunks of this many rows.
    pub chunk: usize,
}

impl<'a> ModelEmbedder<'a> {
    pub fn new(model: &'a EncoderModel) -> Self {
        ModelEmbedder { model, max_len: model.config.max_seq_len, chunk: 64 }
    }

    pub fn with_max_len(model: &'a EncoderModel, max_len: usize) -> Self {
        ModelEmbedder { model, max_len, chunk: 64 }
    }
}

impl Embedder for ModelEmbedder<'_> {
    fn embed(&self, texts: &[String], role: Role) -> Result<Tensor> {
        if texts.is_empty() {
            return Err(Error::Input("cannot embed an empty text list".into()));
        }
        let dim = self.model.config.hidden_dim;
        let mut data = Vec::with_capacity(texts.len() * dim);
        for chunk in texts.chunks(self.chunk.max(1)) {
            let batch = self.model.tokenize_batch(chunk, role, self.max_len)?;
            let (emb, _) = encode(self.model, &batch)?;
            data.extend_from_slice(emb.data());
        }
        Tensor::new(vec![texts.len(), dim], data)
    }

    fn dim(&self) -> usize {
        self.model.config.hidden_dim
    }

    fn supports_dim(&self, dim: usize) -> bool {
        self.model.config.output_dims.contains(&dim)
    }
}

/// Deterministic lexical embedder: FNV-hashed bag of tokens with signs,
/// L2-normalized. Serves as a dependency-free teacher in tests and as the
/// default mining/filtering teacher when no checkpoint is supplied. Role
/// prefixes are ignored; similarity is purely lexical overlap.
pub struct HashEmbedder {
    pub dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        HashEmbedder { dim }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

impl Embedder for HashEmbedder {
    fn embed(&self, texts: &[String], _role: Role) -> Result<Tensor> {
        if texts.is_empty() {
            return Err(Error::Input("cannot embed an empty text list".into()));
        }
        let mut data = vec![0.0; texts.len() * self.dim];
        for (i, text) in texts.iter().enumerate() {
            let row = &mut data[i * self.dim..(i + 1) * self.dim];
            for token in text.to_lowercase().split_whitespace() {
                let h = fnv1a(token.as_bytes());
                let slot = (h % self.dim as u64) as usize;
                let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
                row[slot] += sign;
            }
        }
        Ok(Tensor::new(vec![texts.len(), self.dim], data)?.l2_normalize())
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

// ── consistency filtering ───────────────────────────────────────────────

/// Keep pair i iff document i ranks among the `top_k` most similar documents
/// (within the shard) to query i; ties break toward the lower document
/// index. An empty shard filters to an empty list.
pub fn consistency_filter(
    shard: &Shard,
    embedder: &dyn Embedder,
    top_k: usize,
) -> Result<Vec<PairRecord>> {
    if top_k == 0 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    if shard.is_empty() {
        return Ok(Vec::new());
    }
    let queries: Vec<String> = shard.records().iter().map(|r| r.query.clone()).collect();
    let documents: Vec<String> = shard.records().iter().map(|r| r.document.clone()).collect();
    let q = embedder.embed(&queries, Role::Query)?;
    let d = embedder.embed(&documents, Role::Document)?;
    let scores = q.matmul_nt(&d)?;

    let n = shard.len();
    let mut retained = Vec::new();
    for i in 0..n {
        let row = scores.row(i);
        let own = row[i];
        // Rank of document i for query i: strictly-better docs plus equal
        // docs with a lower index.
        let rank = (0..n)
            .filter(|&j| j != i && (row[j] > own || (row[j] == own && j < i)))
            .count();
        if rank < top_k {
            retained.push(shard.records()[i].clone());
        }
    }
    Ok(retained)
}

/// Aggregate report for a filtering run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterReport {
    pub input_count: usize,
    pub retained_count: usize,
    pub per_shard: Vec<ShardStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShardStats {
    pub shard_index: usize,
    pub input_count: usize,
    pub retained_count: usize,
}

/// Shard a corpus and consistency-filter every shard (in parallel).
pub fn filter_corpus(
    records: Vec<PairRecord>,
    shard_size: usize,
    embedder: &dyn Embedder,
    top_k: usize,
) -> Result<(Vec<PairRecord>, FilterReport)> {
    let input_count = records.len();
    let shards = split_into_shards(records, shard_size)?;
    let filtered: Result<Vec<Vec<PairRecord>>> = shards
        .par_iter()
        .map(|shard| consistency_filter(shard, embedder, top_k))
        .collect();
    let filtered = filtered?;
    let per_shard: Vec<ShardStats> = filtered
        .iter()
        .enumerate()
        .map(|(i, kept)| ShardStats {
            shard_index: i,
            input_count: shards[i].len(),
            retained_count: kept.len(),
        })
        .collect();
    let retained: Vec<PairRecord> = filtered.into_iter().flatten().collect();
    let report =
        FilterReport { input_count, retained_count: retained.len(), per_shard };
    Ok((retained, report))
}

// ── hard-negative mining ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningConfig {
    /// Accept candidates scoring strictly below pos_sim · margin; in (0, 1].
    pub margin: f64,
    pub num_negatives: usize,
    /// How many top-ranked candidates are scanned before thresholding.
    pub candidate_pool: usize,
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin <= 1.0) {
            return Err(Error::Config(format!("margin {} must lie in (0, 1]", self.margin)));
        }
        if self.num_negatives == 0 {
            return Err(Error::Config("num_negatives must be at least 1".into()));
        }
        if self.candidate_pool == 0 {
            return Err(Error::Config("candidate_pool must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mining result; `underfull` flags pools exhausted before `num_negatives`.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningOutcome {
    pub negatives: Vec<String>,
    pub underfull: bool,
}

/// Rank the corpus by teacher similarity to the query and accept the
/// highest-ranked documents scoring strictly below pos_sim · margin,
/// skipping the positive itself and its exact duplicates.
pub fn mine_hard_negatives(
    query: &str,
    positive: &str,
    corpus: &[String],
    teacher: &dyn Embedder,
    cfg: &MiningConfig,
) -> Result<MiningOutcome> {
    cfg.validate()?;
    let ranked = rank_candidates(query, positive, corpus, teacher)?;
    let threshold = ranked.pos_sim * cfg.margin;
    let negatives: Vec<String> = ranked
        .candidates
        .into_iter()
        .take(cfg.candidate_pool)
        .filter(|(_, sim)| *sim < threshold)
        .map(|(text, _)| text)
        .take(cfg.num_negatives)
        .collect();
    let underfull = negatives.len() < cfg.num_negatives;
    Ok(MiningOutcome { negatives, underfull })
}

/// Unfiltered baseline: the top `num_negatives` most similar documents with
/// no margin threshold (the positive and its duplicates still excluded).
pub fn mine_topk_unfiltered(
    query: &str,
    positive: &str,
    corpus: &[String],
    teacher: &dyn Embedder,
    num_negatives: usize,
) -> Result<MiningOutcome> {
    if num_negatives == 0 {
        return Err(Error::Config("num_negatives must be at least 1".into()));
    }
    let ranked = rank_candidates(query, positive, corpus, teacher)?;
    let negatives: Vec<String> =
        ranked.candidates.into_iter().map(|(text, _)| text).take(num_negatives).collect();
    let underfull = negatives.len() < num_negatives;
    Ok(MiningOutcome { negatives, underfull })
}

struct RankedCandidates {
    pos_sim: f64,
    /// (document, similarity), most similar first, positives excluded.
    candidates: Vec<(String, f64)>,
}

fn rank_candidates(
    query: &str,
    positive: &str,
    corpus: &[String],
    teacher: &dyn Embedder,
) -> Result<RankedCandidates> {
    let q = teacher.embed(&[query.to_string()], Role::Query)?;
    let mut docs: Vec<String> = corpus.to_vec();
    docs.push(positive.to_string());
    let d = teacher.embed(&docs, Role::Document)?;
    let sims = q.matmul_nt(&d)?;
    let pos_sim = sims.data()[corpus.len()];

    let mut candidates: Vec<(usize, f64)> = (0..corpus.len())
        .filter(|&j| corpus[j] != positive)
        .map(|j| (j, sims.data()[j]))
        .collect();
    candidates.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).expect("similarities are finite").then(a.0.cmp(&b.0))
    });
    Ok(RankedCandidates {
        pos_sim,
        candidates: candidates.into_iter().map(|(j, s)| (corpus[j].clone(), s)).collect(),
    })
}

// ── batch sampling ──────────────────────────────────────────────────────

/// A batch drawn entirely from one dataset tag.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub dataset: String,
    pub pairs: Vec<PairRecord>,
}

/// One epoch of batches: within each dataset, records are consumed without
/// replacement in seeded order and the final short batch is dropped; the
/// resulting batches are interleaved in seeded random order.
pub fn sample_batches(
    datasets: &BTreeMap<String, Vec<PairRecord>>,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<PairBatch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if datasets.is_empty() {
        return Err(Error::Config("need at least one dataset".into()));
    }
    if datasets.values().any(|v| v.is_empty()) {
        return Err(Error::Config("every dataset needs at least one record".into()));
    }
    let largest = datasets.values().map(Vec::len).max().unwrap();
    if batch_size > largest {
        return Err(Error::Config(format!(
            "batch_size {batch_size} exceeds the largest dataset ({largest} records)"
        )));
    }

    let mut batches = Vec::new();
    for (tag_index, (tag, records)) in datasets.iter().enumerate() {
        let mut order: Vec<usize> = (0..records.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, tag_index as u64 + 1));
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            if chunk.len() < batch_size {
                break; // drop the short remainder
            }
            batches.push(PairBatch {
                dataset: tag.clone(),
                pairs: chunk.iter().map(|&i| records[i].clone()).collect(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0));
    batches.shuffle(&mut rng);
    Ok(batches)
}

// ── language weights ────────────────────────────────────────────────────

/// Multinomial temperature sampling: p_l ∝ (n_l / Σn)^α, normalized.
/// α = 1 reproduces raw frequencies; α → 0 approaches uniform.
pub fn language_weights(
    counts: &BTreeMap<String, u64>,
    temperature_alpha: f64,
) -> Result<BTreeMap<String, f64>> {
    if counts.is_empty() {
        return Err(Error::Config("language counts must not be empty".into()));
    }
    if temperature_alpha <= 0.0 {
        return Err(Error::Config(format!(
            "temperature alpha {temperature_alpha} must be positive"
        )));
    }
    if counts.values().any(|&n| n == 0) {
        return Err(Error::Config("language counts must be positive".into()));
    }
    let total: f64 = counts.values().map(|&n| n as f64).sum();
    let powered: BTreeMap<String, f64> = counts
        .iter()
        .map(|(l, &n)| (l.clone(), (n as f64 / total).powf(temperature_alpha)))
        .collect();
    let z: f64 = powered.values().sum();
    Ok(powered.into_iter().map(|(l, w)| (l, w / z)).collect())
}

// ── JSONL I/O ───────────────────────────────────────────────────────────

pub fn read_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    let file = File::open(path)?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PairRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Input(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_pairs(path: &Path, records: &[PairRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Language distribution config: a JSON object mapping language → count.
pub fn read_language_counts(path: &Path) -> Result<BTreeMap<String, u64>> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}
