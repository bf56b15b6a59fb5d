//! Seed retrieval: an in-memory inverted index scored with Okapi BM25, then a
//! rerank of the first-stage list by a [`RelevanceScorer`].
//!
//! ```text
//! idf(t)      = ln(1 + (N − df + 0.5) / (df + 0.5))
//! w(t, d)     = idf(t) · tf·(k1 + 1) / (tf + k1·(1 − b + b·|d|/avgdl))
//! score(q, d) = Σ_{t ∈ distinct(q)} w(t, d)
//! ```
//!
//! Repeated query terms count once. Only documents matching at least one query
//! term are returned; ties are broken by ascending `doc_id`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, Query, Tokenizer};
use crate::fitness::RelevanceScorer;
use crate::service::ServiceError;

const INDEX_FORMAT: &str = "groundgen-bm25-index";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("cannot build an index over an empty collection")]
    EmptyCollection,
    #[error("document `{0}` has no tokens")]
    EmptyDocument(String),
    #[error("result depth must be at least 1")]
    ZeroDepth,
    #[error("seed count {seeds} exceeds first-stage depth {first_k}")]
    SeedsExceedDepth { seeds: usize, first_k: usize },
    #[error("document `{0}` is in the index but not in the corpus")]
    UnknownDocument(String),
    #[error("reranker failed: {0}")]
    Reranker(#[from] ServiceError),
    #[error("index file {path}: {reason}")]
    Persist { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc_id: String,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    tokenizer: Tokenizer,
    /// Postings are sorted by `doc_id`.
    postings: BTreeMap<String, Vec<Posting>>,
    doc_lengths: BTreeMap<String, usize>,
    avg_doc_length: f64,
    doc_count: usize,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    format: String,
    version: u32,
    index: InvertedIndex,
}

impl InvertedIndex {
    pub fn build(docs: &[Document], tokenizer: Tokenizer) -> Result<Self, RetrievalError> {
        if docs.is_empty() {
            return Err(RetrievalError::EmptyCollection);
        }
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = BTreeMap::new();
        let mut sorted: Vec<&Document> = docs.iter().collect();
        sorted.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        for doc in sorted {
            let tokens = tokenizer.tokenize(&doc.text);
            if tokens.is_empty() {
                return Err(RetrievalError::EmptyDocument(doc.doc_id.clone()));
            }
            let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
            for t in tokens.iter() {
                *tf.entry(t).or_insert(0) += 1;
            }
            for (term, count) in tf {
                postings.entry(term.to_string()).or_default().push(Posting {
                    doc_id: doc.doc_id.clone(),
                    tf: count,
                });
            }
            doc_lengths.insert(doc.doc_id.clone(), tokens.len());
        }
        let doc_count = doc_lengths.len();
        let avg_doc_length = doc_lengths.values().sum::<usize>() as f64 / doc_count as f64;
        Ok(Self {
            tokenizer,
            postings,
            doc_lengths,
            avg_doc_length,
            doc_count,
        })
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn tokenizer(&self) -> Tokenizer {
        self.tokenizer
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<usize> {
        self.doc_lengths.get(doc_id).copied()
    }

    pub fn term_count(&self) -> usize {
        self.postings.len()
    }

    pub fn to_json(&self) -> String {
        let file = IndexFile {
            format: INDEX_FORMAT.into(),
            version: INDEX_VERSION,
            index: self.clone(),
        };
        serde_json::to_string(&file).expect("index serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let file: IndexFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if file.format != INDEX_FORMAT {
            return Err(format!("not an index file (format `{}`)", file.format));
        }
        if file.version != INDEX_VERSION {
            return Err(format!("unsupported index version {}", file.version));
        }
        Ok(file.index)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        fs::write(path, self.to_json()).map_err(|e| RetrievalError::Persist {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let persist = |reason: String| RetrievalError::Persist {
            path: path.display().to_string(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|e| persist(e.to_string()))?;
        Self::from_json(&text).map_err(persist)
    }
}

/// Build an index with the default tokenizer.
pub fn build_index(docs: &[Document]) -> Result<InvertedIndex, RetrievalError> {
    InvertedIndex::build(docs, Tokenizer::default())
}

/// A ranked hit; `rank` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
    pub rank: usize,
}

/// Top-`k` documents by BM25.
pub fn bm25_search(index: &InvertedIndex, query: &Query, k: usize, params: Bm25Params) -> Vec<ScoredDoc> {
    if k == 0 {
        return Vec::new();
    }
    let terms: BTreeSet<String> = index.tokenizer.tokenize(&query.text).into_inner().into_iter().collect();
    let n = index.doc_count as f64;
    let mut acc: HashMap<&str, f64> = HashMap::new();
    for term in &terms {
        let postings = index.postings(term);
        if postings.is_empty() {
            continue;
        }
        let df = postings.len() as f64;
        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
        for p in postings {
            let len = index.doc_lengths[&p.doc_id] as f64;
            let tf = p.tf as f64;
            let norm = params.k1 * (1.0 - params.b + params.b * len / index.avg_doc_length);
            *acc.entry(p.doc_id.as_str()).or_insert(0.0) += idf * tf * (params.k1 + 1.0) / (tf + norm);
        }
    }
    let mut hits: Vec<(&str, f64)> = acc.into_iter().collect();
    hits.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    hits.into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (doc_id, score))| ScoredDoc {
            doc_id: doc_id.to_string(),
            score,
            rank: i + 1,
        })
        .collect()
}

/// A seed document: reranked hit plus its text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seed {
    pub doc_id: String,
    pub rank: usize,
    pub score: f64,
    pub text: String,
}

impl Seed {
    pub fn document(&self) -> Document {
        Document::new(self.doc_id.clone(), self.text.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedPool {
    pub seeds: Vec<Seed>,
    /// Fewer documents than requested were retrieved.
    pub short: bool,
}

/// BM25 top-`first_k`, reranked by `scorer`; the best `seed_count` become seeds.
///
/// Rerank ties keep their first-stage order.
pub fn seed_population(
    index: &InvertedIndex,
    corpus: &Corpus,
    query: &Query,
    scorer: &dyn RelevanceScorer,
    first_k: usize,
    seed_count: usize,
    params: Bm25Params,
) -> Result<SeedPool, RetrievalError> {
    if seed_count == 0 {
        return Err(RetrievalError::ZeroDepth);
    }
    if seed_count > first_k {
        return Err(RetrievalError::SeedsExceedDepth {
            seeds: seed_count,
            first_k,
        });
    }
    let first_stage = bm25_search(index, query, first_k, params);
    let docs = first_stage
        .iter()
        .map(|hit| corpus.get(&hit.doc_id).ok_or_else(|| RetrievalError::UnknownDocument(hit.doc_id.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    let scores = scorer.score(&query.text, &texts)?;
    if scores.len() != texts.len() {
        return Err(ServiceError::Protocol(format!("reranker returned {} scores for {} texts", scores.len(), texts.len())).into());
    }
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let seeds: Vec<Seed> = order
        .into_iter()
        .take(seed_count)
        .enumerate()
        .map(|(i, j)| Seed {
            doc_id: docs[j].doc_id.clone(),
            rank: i + 1,
            score: scores[j],
            text: docs[j].text.clone(),
        })
        .collect();
    let short = seeds.len() < seed_count;
    if short {
        tracing::warn!(
            query_id = %query.query_id,
            requested = seed_count,
            retrieved = seeds.len(),
            "short seed pool"
        );
    }
    Ok(SeedPool { seeds, short })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitness::Normalization;

    fn two_docs() -> Vec<Document> {
        vec![Document::new("d1", "cat sat"), Document::new("d2", "dog ran")]
    }

    #[test]
    fn build_counts() {
        let idx = build_index(&two_docs()).unwrap();
        assert_eq!(idx.doc_count(), 2);
        assert_eq!(idx.avg_doc_length(), 2.0);

        let idx = build_index(&[Document::new("d", "a a b")]).unwrap();
        assert_eq!(idx.postings("a"), &[Posting { doc_id: "d".into(), tf: 2 }]);
        assert_eq!(idx.postings("b"), &[Posting { doc_id: "d".into(), tf: 1 }]);
        assert!(matches!(build_index(&[]), Err(RetrievalError::EmptyCollection)));
    }

    #[test]
    fn single_term_worked_example() {
        let idx = build_index(&two_docs()).unwrap();
        let hits = bm25_search(&idx, &Query::new("q", "cat"), 10, Bm25Params { k1: 0.9, b: 0.4 });
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].doc_id, "d1");
        assert!((hits[0].score - 2f64.ln()).abs() < 1e-12);
        assert!(bm25_search(&idx, &Query::new("q", "zebra"), 10, Bm25Params::default()).is_empty());
    }

    #[test]
    fn ties_break_by_doc_id() {
        let docs = vec![Document::new("b", "cat dog"), Document::new("a", "cat dog")];
        let idx = build_index(&docs).unwrap();
        let hits = bm25_search(&idx, &Query::new("q", "cat"), 10, Bm25Params::default());
        let ids: Vec<_> = hits.iter().map(|h| h.doc_id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        assert_eq!(hits[0].score, hits[1].score);
        assert_eq!((hits[0].rank, hits[1].rank), (1, 2));
    }

    #[test]
    fn repeated_query_terms_count_once() {
        let idx = build_index(&two_docs()).unwrap();
        let once = bm25_search(&idx, &Query::new("q", "cat"), 1, Bm25Params::default());
        let twice = bm25_search(&idx, &Query::new("q", "cat cat"), 1, Bm25Params::default());
        assert_eq!(once, twice);
    }

    #[test]
    fn persistence_round_trip_is_lossless() {
        let docs = vec![
            Document::new("x", "The quick brown fox jumps over the lazy dog."),
            Document::new("y", "A stitch in time saves nine, said the fox."),
            Document::new("z", "Nine lives for a cat."),
        ];
        let idx = InvertedIndex::build(&docs, Tokenizer::stemming()).unwrap();
        let json = idx.to_json();
        let back = InvertedIndex::from_json(&json).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.to_json(), json);
        assert!(InvertedIndex::from_json(&json.replace(INDEX_FORMAT, "other")).is_err());
    }

    struct Fixed(Vec<(String, f64)>);

    impl RelevanceScorer for Fixed {
        fn id(&self) -> &str {
            "fixed"
        }
        fn normalization(&self) -> Normalization {
            Normalization::Identity
        }
        fn score(&self, _: &str, texts: &[&str]) -> Result<Vec<f64>, ServiceError> {
            Ok(texts
                .iter()
                .map(|t| self.0.iter().find(|(k, _)| k == t).map(|(_, s)| *s).unwrap_or(0.0))
                .collect())
        }
    }

    fn three_docs() -> (InvertedIndex, Corpus) {
        let docs = vec![
            Document::new("d1", "cat cat cat"),
            Document::new("d2", "cat cat dog"),
            Document::new("d3", "cat dog dog"),
        ];
        (build_index(&docs).unwrap(), Corpus::new(docs).unwrap())
    }

    #[test]
    fn identity_rerank_keeps_bm25_order() {
        let (idx, corpus) = three_docs();
        let q = Query::new("q", "cat");
        let first = bm25_search(&idx, &q, 3, Bm25Params::default());
        let echo = Fixed(
            first
                .iter()
                .map(|h| (corpus.get(&h.doc_id).unwrap().text.clone(), h.score))
                .collect(),
        );
        let pool = seed_population(&idx, &corpus, &q, &echo, 3, 3, Bm25Params::default()).unwrap();
        let ids: Vec<_> = pool.seeds.iter().map(|s| s.doc_id.clone()).collect();
        let expected: Vec<_> = first.iter().map(|h| h.doc_id.clone()).collect();
        assert_eq!(ids, expected);
        assert!(!pool.short);
    }

    #[test]
    fn reversing_reranker_promotes_tail() {
        let (idx, corpus) = three_docs();
        let q = Query::new("q", "cat");
        let first = bm25_search(&idx, &q, 3, Bm25Params::default());
        assert_eq!(first.iter().map(|h| h.doc_id.as_str()).collect::<Vec<_>>(), ["d1", "d2", "d3"]);
        let reverse = Fixed(vec![
            ("cat cat cat".into(), 0.1),
            ("cat cat dog".into(), 0.2),
            ("cat dog dog".into(), 0.3),
        ]);
        let pool = seed_population(&idx, &corpus, &q, &reverse, 3, 2, Bm25Params::default()).unwrap();
        let ids: Vec<_> = pool.seeds.iter().map(|s| (s.doc_id.as_str(), s.rank)).collect();
        assert_eq!(ids, [("d3", 1), ("d2", 2)]);
    }

    #[test]
    fn short_pool_is_flagged() {
        let docs = vec![Document::new("only", "cats purr")];
        let idx = build_index(&docs).unwrap();
        let corpus = Corpus::new(docs).unwrap();
        let pool = seed_population(&idx, &corpus, &Query::new("q", "cats"), &Fixed(vec![]), 100, 10, Bm25Params::default()).unwrap();
        assert_eq!(pool.seeds.len(), 1);
        assert!(pool.short);
        assert!(matches!(
            seed_population(&idx, &corpus, &Query::new("q", "cats"), &Fixed(vec![]), 2, 3, Bm25Params::default()),
            Err(RetrievalError::SeedsExceedDepth { .. })
        ));
    }
}
