//! Brute-force dense retrieval over local corpora and nDCG@10, for full and
//! Matryoshka-truncated embeddings.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datapipe::Embedder;
use crate::encoder::Role;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Queries, corpus, and graded relevance judgments.
#[derive(Debug, Clone, Default)]
pub struct RetrievalTask {
    pub queries: BTreeMap<String, String>,
    pub corpus: BTreeMap<String, String>,
    /// query id → (doc id → relevance grade ≥ 0)
    pub qrels: BTreeMap<String, BTreeMap<String, u32>>,
}

impl RetrievalTask {
    pub fn validate(&self) -> Result<()> {
        for (qid, docs) in &self.qrels {
            if !self.queries.contains_key(qid) {
                return Err(Error::Input(format!("qrels reference unknown query {qid}")));
            }
            for doc_id in docs.keys() {
                if !self.corpus.contains_key(doc_id) {
                    return Err(Error::Input(format!(
                        "qrels for {qid} reference unknown document {doc_id}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Ranked candidates per query: descending score, ties broken by doc id.
#[derive(Debug, Clone)]
pub struct RetrievalRun {
    pub ranked: BTreeMap<String, Vec<(String, f64)>>,
}

/// Truncate unit rows to the first `dim` coordinates and re-normalize;
/// identity when `dim` equals the current width.
pub fn truncate_unit_rows(e: &Tensor, dim: usize) -> Result<Tensor> {
    let width = e.last_dim();
    if dim == 0 || dim > width {
        return Err(Error::Config(format!(
            "truncation dim {dim} out of range for width {width}"
        )));
    }
    if dim == width {
        return Ok(e.clone());
    }
    let rows = e.rows();
    let mut out = vec![0.0; rows * dim];
    for r in 0..rows {
        out[r * dim..(r + 1) * dim].copy_from_slice(&e.row(r)[..dim]);
    }
    Ok(Tensor::new(vec![rows, dim], out)?.l2_normalize())
}

/// Embed queries and corpus, rank every document per query by cosine, and
/// keep the top `k`. `dim` must be a width the embedder supports.
pub fn retrieve(
    embedder: &dyn Embedder,
    task: &RetrievalTask,
    dim: usize,
    k: usize,
) -> Result<RetrievalRun> {
    if task.corpus.is_empty() {
        return Err(Error::Input("retrieve: empty corpus".into()));
    }
    if task.queries.is_empty() {
        return Err(Error::Input("retrieve: no queries".into()));
    }
    if k == 0 {
        return Err(Error::Config("retrieve: k must be at least 1".into()));
    }
    if !embedder.supports_dim(dim) {
        return Err(Error::Config(format!("embedder does not serve dimension {dim}")));
    }

    let query_ids: Vec<&String> = task.queries.keys().collect();
    let doc_ids: Vec<&String> = task.corpus.keys().collect();
    let query_texts: Vec<String> = task.queries.values().cloned().collect();
    let doc_texts: Vec<String> = task.corpus.values().cloned().collect();

    let q = truncate_unit_rows(&embedder.embed(&query_texts, Role::Query)?, dim)?;
    let d = truncate_unit_rows(&embedder.embed(&doc_texts, Role::Document)?, dim)?;
    let scores = q.matmul_nt(&d)?;

    let mut ranked = BTreeMap::new();
    for (qi, qid) in query_ids.iter().enumerate() {
        let row = scores.row(qi);
        let mut order: Vec<usize> = (0..doc_ids.len()).collect();
        order.sort_by(|&a, &b| {
            row[b].partial_cmp(&row[a]).expect("scores are finite").then(doc_ids[a].cmp(doc_ids[b]))
        });
        let top: Vec<(String, f64)> =
            order.into_iter().take(k).map(|j| (doc_ids[j].clone(), row[j])).collect();
        ranked.insert((*qid).clone(), top);
    }
    Ok(RetrievalRun { ranked })
}

/// nDCG@k with the 2^rel − 1 gain and log2(rank+1) discount. Queries with no
/// relevant documents are excluded from the mean; if every query lacks them
/// the metric is undefined and reported as an error.
pub fn ndcg_at_k(
    run: &RetrievalRun,
    qrels: &BTreeMap<String, BTreeMap<String, u32>>,
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("ndcg: k must be at least 1".into()));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for (qid, ranking) in &run.ranked {
        let Some(rels) = qrels.get(qid) else {
            continue;
        };
        let mut grades: Vec<u32> = rels.values().copied().filter(|&g| g > 0).collect();
        if grades.is_empty() {
            continue; // no relevant documents: excluded from the mean
        }
        let mut dcg = 0.0;
        for (rank, (doc_id, _)) in ranking.iter().take(k).enumerate() {
            let rel = rels.get(doc_id).copied().unwrap_or(0);
            if rel > 0 {
                dcg += (2f64.powi(rel as i32) - 1.0) / ((rank as f64 + 2.0).log2());
            }
        }
        grades.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = grades
            .iter()
            .take(k)
            .enumerate()
            .map(|(rank, &g)| (2f64.powi(g as i32) - 1.0) / ((rank as f64 + 2.0).log2()))
            .sum();
        total += dcg / idcg;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Input(
            "ndcg undefined: no query has a relevant document".into(),
        ));
    }
    Ok(total / counted as f64)
}

// ── run comparison ──────────────────────────────────────────────────────

/// One measured configuration in a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunScore {
    pub model: String,
    pub batch_size: usize,
    pub dim: usize,
    pub ndcg: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub rows: Vec<RunScore>,
    /// Pairs of row labels whose scores coincide (within 1e-12).
    pub ties: Vec<(String, String)>,
    pub text: String,
}

fn row_label(r: &RunScore) -> String {
    format!("{}/bs{}/d{}", r.model, r.batch_size, r.dim)
}

/// Render a metric-by-(model, batch size, dim) table as text + JSON.
pub fn compare_runs(rows: &[RunScore]) -> CompareReport {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| {
        a.model
            .cmp(&b.model)
            .then(a.batch_size.cmp(&b.batch_size))
            .then(a.dim.cmp(&b.dim))
    });
    let mut ties = Vec::new();
    for i in 0..sorted.len() {
        for j in i + 1..sorted.len() {
            if (sorted[i].ndcg - sorted[j].ndcg).abs() <= 1e-12 {
                ties.push((row_label(&sorted[i]), row_label(&sorted[j])));
            }
        }
    }
    let mut text = String::from("model                    batch     dim   ndcg@10\n");
    for r in &sorted {
        text.push_str(&format!(
            "{:<24} {:>5} {:>7} {:>9.4}\n",
            r.model, r.batch_size, r.dim, r.ndcg
        ));
    }
    if !ties.is_empty() {
        text.push_str("ties:\n");
        for (a, b) in &ties {
            text.push_str(&format!("  {a} == {b}\n"));
        }
    }
    CompareReport { rows: sorted, ties, text }
}

// ── task and run files ──────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct TextLine {
    id: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct QrelLine {
    query_id: String,
    doc_id: String,
    relevance: u32,
}

#[derive(Serialize, Deserialize)]
struct RunLine {
    query_id: String,
    doc_id: String,
    rank: usize,
    score: f64,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line)
            .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(v);
    }
    Ok(out)
}

/// Load a task from `queries.jsonl`, `corpus.jsonl`, and `qrels.jsonl` in
/// one directory.
pub fn load_task(dir: &Path) -> Result<RetrievalTask> {
    let queries: Vec<TextLine> = read_jsonl(&dir.join("queries.jsonl"))?;
    let corpus: Vec<TextLine> = read_jsonl(&dir.join("corpus.jsonl"))?;
    let qrels: Vec<QrelLine> = read_jsonl(&dir.join("qrels.jsonl"))?;
    let mut task = RetrievalTask::default();
    for q in queries {
        task.queries.insert(q.id, q.text);
    }
    for d in corpus {
        task.corpus.insert(d.id, d.text);
    }
    for r in qrels {
        task.qrels.entry(r.query_id).or_default().insert(r.doc_id, r.relevance);
    }
    task.validate()?;
    Ok(task)
}

pub fn save_task(dir: &Path, task: &RetrievalTask) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let write = |name: &str, lines: Vec<serde_json::Value>| -> Result<()> {
        let mut w = BufWriter::new(File::create(dir.join(name))?);
        for l in lines {
            serde_json::to_writer(&mut w, &l)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    };
    write(
        "queries.jsonl",
        task.queries
            .iter()
            .map(|(id, text)| serde_json::json!({"id": id, "text": text}))
            .collect(),
    )?;
    write(
        "corpus.jsonl",
        task.corpus
            .iter()
            .map(|(id, text)| serde_json::json!({"id": id, "text": text}))
            .collect(),
    )?;
    write(
        "qrels.jsonl",
        task.qrels
            .iter()
            .flat_map(|(qid, docs)| {
                docs.iter().map(move |(did, rel)| {
                    serde_json::json!({"query_id": qid, "doc_id": did, "relevance": rel})
                })
            })
            .collect(),
    )?;
    Ok(())
}

/// Write a run as JSONL rows {query_id, doc_id, rank, score}.
pub fn save_run(path: &Path, run: &RetrievalRun) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (qid, ranking) in &run.ranked {
        for (rank, (doc_id, score)) in ranking.iter().enumerate() {
            let line = RunLine {
                query_id: qid.clone(),
                doc_id: doc_id.clone(),
                rank: rank + 1,
                score: *score,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}
