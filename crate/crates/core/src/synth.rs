//! Synthetic clustered-pair retrieval corpora.
//!
//! Each cluster is a pair of content tokens; queries and documents carry
//! their cluster's token pair plus an item token and correlated fillers.
//! Distinguishing documents inside a cluster requires the item/filler
//! conjunctions, so embedding quality (and model capacity) shows up directly
//! in nDCG. Optional near-duplicate documents create the false-negative
//! traps that margin-based mining is meant to avoid.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datapipe::PairRecord;
use crate::eval::RetrievalTask;

/// Number of distinct u → v remapping groups (see [`clustered_pairs`]).
pub const MAP_GROUPS: usize = 4;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub num_pairs: usize,
    pub eval_pairs: usize,
    pub num_clusters: usize,
    pub content_tokens: usize,
    pub item_tokens: usize,
    pub filler_tokens: usize,
    pub dataset_tags: usize,
    /// Add 1–2 near-duplicates of some positives to the mining pool and the
    /// eval corpus (false-negative traps for unfiltered mining).
    pub near_duplicates: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_pairs: 5120,
            eval_pairs: 640,
            num_clusters: 128,
            content_tokens: 40,
            item_tokens: 192,
            filler_tokens: 30,
            dataset_tags: 4,
            near_duplicates: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    /// dataset tag → training records
    pub train: BTreeMap<String, Vec<PairRecord>>,
    pub eval_task: RetrievalTask,
    /// Every text in the corpus (vocabulary building).
    pub all_texts: Vec<String>,
    /// Candidate documents for hard-negative mining: all training documents
    /// plus any near-duplicates.
    pub mining_pool: Vec<String>,
}

struct TokenSets {
    content: Vec<String>,
    /// Query-side item tokens; aligned by index with `doc_items`. The two
    /// vocabularies are disjoint, so item matching cannot come from lexical
    /// overlap: the encoder has to learn each uᵢ ↔ vᵢ association.
    query_items: Vec<String>,
    doc_items: Vec<String>,
    fillers: Vec<String>,
    clusters: Vec<(usize, usize)>,
}

fn token_sets(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> TokenSets {
    let content: Vec<String> = (0..spec.content_tokens).map(|i| format!("w{i:02}")).collect();
    let query_items: Vec<String> = (0..spec.item_tokens).map(|i| format!("u{i:03}")).collect();
    let doc_items: Vec<String> = (0..spec.item_tokens).map(|i| format!("v{i:03}")).collect();
    let fillers: Vec<String> = (0..spec.filler_tokens).map(|i| format!("f{i:02}")).collect();

    // Distinct unordered content-token pairs as cluster signatures.
    let mut all_pairs = Vec::new();
    for a in 0..spec.content_tokens {
        for b in (a + 1)..spec.content_tokens {
            all_pairs.push((a, b));
        }
    }
    all_pairs.shuffle(rng);
    all_pairs.truncate(spec.num_clusters);
    TokenSets { content, query_items, doc_items, fillers, clusters: all_pairs }
}

struct GeneratedPair {
    query: String,
    document: String,
    cluster: usize,
}

fn generate_pair(
    sets: &TokenSets,
    spec: &SynthSpec,
    index: usize,
    rng: &mut ChaCha8Rng,
) -> GeneratedPair {
    let cluster = index % sets.clusters.len();
    let (a, b) = sets.clusters[cluster];
    let item_id = (index * 7 + cluster) % sets.query_items.len();
    // The u → v alias mapping is remapped per cluster group, so the same
    // query item aligns with different document items depending on cluster
    // context. No static embedding alignment can satisfy all groups at once;
    // resolving it takes context-conditional transformation capacity. Groups
    // run orthogonal to dataset tags, so every single-tag batch mixes all
    // mapping groups.
    let group = cluster % MAP_GROUPS;
    let doc_item_id =
        (item_id + group * (sets.query_items.len() / MAP_GROUPS)) % sets.query_items.len();
    // Fillers are uncorrelated noise on both sides; within a cluster, only
    // the item association separates documents.
    let mut filler = || &sets.fillers[rng.random_range(0..spec.filler_tokens)];
    let qf = filler().clone();
    let df1 = filler().clone();
    let df2 = filler().clone();
    // Off-cluster noise tokens create lexical interference.
    let noise_content = &sets.content[rng.random_range(0..sets.content.len())];
    let noise_item = &sets.doc_items[rng.random_range(0..sets.doc_items.len())];

    // The group marker is observable on both sides, like a language code:
    // conditioning on it is learnable, and how much of the item × group
    // mapping a model masters is a function of its capacity.
    let marker = format!("g{group}");
    let query = format!(
        "{} {} {} {} {}",
        marker, sets.content[a], sets.query_items[item_id], sets.content[b], qf,
    );
    let document = format!(
        "{} {} {} {} {} {} {} {}",
        marker,
        sets.content[b],
        df1,
        sets.doc_items[doc_item_id],
        noise_content,
        sets.content[a],
        df2,
        noise_item,
    );
    GeneratedPair { query, document, cluster }
}

/// Perturb a document into a near-duplicate: one filler swapped.
fn near_duplicate(doc: &str, sets: &TokenSets, rng: &mut ChaCha8Rng) -> String {
    let mut words: Vec<String> = doc.split_whitespace().map(String::from).collect();
    let swap_at = words.iter().position(|w| w.starts_with('f')).unwrap_or(words.len() - 1);
    words[swap_at] = sets.fillers[rng.random_range(0..sets.fillers.len())].clone();
    words.join(" ")
}

/// Build a clustered-pair corpus with a held-out retrieval task.
pub fn clustered_pairs(spec: &SynthSpec) -> SynthData {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sets = token_sets(spec, &mut rng);

    let mut train: BTreeMap<String, Vec<PairRecord>> = BTreeMap::new();
    let mut all_texts = Vec::new();
    let mut mining_pool = Vec::new();
    for i in 0..spec.num_pairs {
        let g = generate_pair(&sets, spec, i, &mut rng);
        let tag = format!("ds{}", (g.cluster / MAP_GROUPS) % spec.dataset_tags);
        let mut record = PairRecord::new(g.query.clone(), g.document.clone());
        record.dataset = tag.clone();
        all_texts.push(g.query);
        all_texts.push(g.document.clone());
        mining_pool.push(g.document.clone());
        if spec.near_duplicates && i % 3 == 0 {
            let dup = near_duplicate(&g.document, &sets, &mut rng);
            all_texts.push(dup.clone());
            mining_pool.push(dup);
        }
        train.entry(tag).or_default().push(record);
    }

    // Held-out task: fresh pairs over the same clusters/items; each query has
    // exactly one relevant document, everything else is a distractor.
    let mut task = RetrievalTask::default();
    for e in 0..spec.eval_pairs {
        let g = generate_pair(&sets, spec, spec.num_pairs + e, &mut rng);
        let qid = format!("q{e:04}");
        let did = format!("d{e:04}");
        task.queries.insert(qid.clone(), g.query.clone());
        task.corpus.insert(did.clone(), g.document.clone());
        task.qrels.entry(qid).or_default().insert(did.clone(), 1);
        all_texts.push(g.query);
        all_texts.push(g.document.clone());
        if spec.near_duplicates && e % 3 == 0 {
            let dup = near_duplicate(&g.document, &sets, &mut rng);
            task.corpus.insert(format!("d{e:04}x"), dup.clone());
            all_texts.push(dup);
        }
    }

    SynthData { train, eval_task: task, all_texts, mining_pool }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_has_requested_shape() {
        let spec = SynthSpec { num_pairs: 640, eval_pairs: 32, ..SynthSpec::default() };
        let data = clustered_pairs(&spec);
        let total: usize = data.train.values().map(Vec::len).sum();
        assert_eq!(total, 640);
        assert_eq!(data.train.len(), 4);
        assert_eq!(data.eval_task.queries.len(), 32);
        assert_eq!(data.eval_task.corpus.len(), 32);
        data.eval_task.validate().unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec { num_pairs: 100, eval_pairs: 10, ..SynthSpec::default() };
        let a = clustered_pairs(&spec);
        let b = clustered_pairs(&spec);
        assert_eq!(a.all_texts, b.all_texts);
    }

    #[test]
    fn near_duplicates_enlarge_pool_and_corpus() {
        let base = SynthSpec { num_pairs: 90, eval_pairs: 30, ..SynthSpec::default() };
        let plain = clustered_pairs(&base);
        let dup = clustered_pairs(&SynthSpec { near_duplicates: true, ..base });
        assert!(dup.mining_pool.len() > plain.mining_pool.len());
        assert!(dup.eval_task.corpus.len() > plain.eval_task.corpus.len());
        // Near-duplicates are unlabeled distractors.
        for qrels in dup.eval_task.qrels.values() {
            assert!(qrels.keys().all(|d| !d.ends_with('x')));
        }
    }

    #[test]
    fn queries_share_cluster_tokens_with_their_documents() {
        let spec = SynthSpec { num_pairs: 50, eval_pairs: 5, ..SynthSpec::default() };
        let data = clustered_pairs(&spec);
        for records in data.train.values() {
            for r in records {
                let q_content: Vec<&str> =
                    r.query.split_whitespace().filter(|w| w.starts_with('w')).collect();
                for c in &q_content {
                    assert!(r.document.contains(c), "document lost content token {c}");
                }
            }
        }
    }
}
