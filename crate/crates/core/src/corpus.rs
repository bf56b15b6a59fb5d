//! Corpus and query ingestion, tokenization and n-gram extraction.
//!
//! Everything downstream (BM25, ROUGE grounding, the mock rewriters) sees text
//! through [`Tokenizer`], so the tokenization rule lives here and only here:
//! lowercase, split on every run of non-alphanumeric characters, drop empty
//! pieces. Tokens are compared by exact codepoint equality after lowercasing.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("n-gram order must be at least 1")]
    InvalidOrder,
    #[error("text for `{0}` cannot be written as TSV (contains a tab or newline)")]
    Unserializable(String),
}

/// A corpus passage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            text: text.into(),
        }
    }
}

/// A user question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub text: String,
}

impl Query {
    pub fn new(query_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            query_id: query_id.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Tsv,
}

impl CorpusFormat {
    /// Guess the format from a file extension; anything but `.tsv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("tsv") => CorpusFormat::Tsv,
            _ => CorpusFormat::Jsonl,
        }
    }
}

impl FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "tsv" => Ok(CorpusFormat::Tsv),
            other => Err(format!("unknown corpus format `{other}` (expected jsonl or tsv)")),
        }
    }
}

/// Documents in file order with lookup by id.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(docs: Vec<Document>) -> Result<Self, CorpusError> {
        let mut by_id = HashMap::with_capacity(docs.len());
        for (i, doc) in docs.iter().enumerate() {
            if by_id.insert(doc.doc_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId(doc.doc_id.clone()));
            }
        }
        Ok(Self { docs, by_id })
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.by_id.get(doc_id).map(|&i| &self.docs[i])
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

/// Read every document from `path`.
pub fn ingest_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<Document>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_corpus(BufReader::new(file), format).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

/// Parse a corpus from any reader. Blank lines are skipped.
pub fn parse_corpus<R: BufRead>(reader: R, format: CorpusFormat) -> Result<Vec<Document>, CorpusError> {
    let mut seen = HashSet::new();
    let mut docs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: PathBuf::new(),
            source,
        })?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        let doc = match format {
            CorpusFormat::Jsonl => serde_json::from_str::<Document>(line).map_err(|e| CorpusError::Malformed {
                line: line_no,
                reason: e.to_string(),
            })?,
            CorpusFormat::Tsv => {
                let (id, text) = split_tsv(line, line_no)?;
                Document::new(id, text)
            }
        };
        check_record(&doc.doc_id, &doc.text, line_no)?;
        if !seen.insert(doc.doc_id.clone()) {
            return Err(CorpusError::DuplicateId(doc.doc_id));
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Write documents in `format`; `parse_corpus` reads the output back unchanged.
pub fn write_corpus<W: Write>(docs: &[Document], format: CorpusFormat, mut out: W) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: PathBuf::new(),
        source,
    };
    for doc in docs {
        match format {
            CorpusFormat::Jsonl => {
                let line = serde_json::to_string(doc).expect("document serializes");
                writeln!(out, "{line}").map_err(io_err)?;
            }
            CorpusFormat::Tsv => {
                if doc.text.contains(['\t', '\n', '\r']) || doc.doc_id.contains(['\t', '\n', '\r']) {
                    return Err(CorpusError::Unserializable(doc.doc_id.clone()));
                }
                writeln!(out, "{}\t{}", doc.doc_id, doc.text).map_err(io_err)?;
            }
        }
    }
    Ok(())
}

/// Read a `query_id<TAB>text` query file.
pub fn read_queries(path: &Path) -> Result<Vec<Query>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_queries(BufReader::new(file))
}

pub fn parse_queries<R: BufRead>(reader: R) -> Result<Vec<Query>, CorpusError> {
    let mut seen = HashSet::new();
    let mut queries = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: PathBuf::new(),
            source,
        })?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = split_tsv(line, line_no)?;
        check_record(id, text, line_no)?;
        if !seen.insert(id.to_string()) {
            return Err(CorpusError::DuplicateId(id.to_string()));
        }
        queries.push(Query::new(id, text));
    }
    Ok(queries)
}

fn split_tsv(line: &str, line_no: usize) -> Result<(&str, &str), CorpusError> {
    line.split_once('\t').ok_or_else(|| CorpusError::Malformed {
        line: line_no,
        reason: "expected `id<TAB>text`".into(),
    })
}

fn check_record(id: &str, text: &str, line_no: usize) -> Result<(), CorpusError> {
    if id.trim().is_empty() {
        return Err(CorpusError::Malformed {
            line: line_no,
            reason: "empty id".into(),
        });
    }
    if text.trim().is_empty() {
        return Err(CorpusError::Malformed {
            line: line_no,
            reason: format!("empty text for `{id}`"),
        });
    }
    Ok(())
}

/// Ordered lowercase tokens of a text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    pub fn new(tokens: Vec<String>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<String> {
        self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

impl<S: Into<String>> FromIterator<S> for TokenSequence {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self(iter.into_iter().map(Into::into).collect())
    }
}

/// Tokenization rule shared by retrieval and grounding.
///
/// Stemming (English Snowball) is off unless asked for.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    #[serde(default)]
    pub stem: bool,
}

impl Tokenizer {
    pub fn stemming() -> Self {
        Self { stem: true }
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let raw = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|piece| !piece.is_empty())
            .map(str::to_lowercase);
        if self.stem {
            let stemmer = Stemmer::create(Algorithm::English);
            raw.map(|t| stemmer.stem(&t).into_owned()).collect()
        } else {
            raw.collect()
        }
    }
}

/// Tokenize with the default (non-stemming) rule.
pub fn tokenize(text: &str) -> TokenSequence {
    Tokenizer::default().tokenize(text)
}

/// Multiset of contiguous n-grams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGramBag {
    n: usize,
    counts: HashMap<Vec<String>, usize>,
}

impl NGramBag {
    pub fn empty(n: usize) -> Result<Self, CorpusError> {
        if n == 0 {
            return Err(CorpusError::InvalidOrder);
        }
        Ok(Self {
            n,
            counts: HashMap::new(),
        })
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn count(&self, gram: &[String]) -> usize {
        self.counts.get(gram).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> &HashMap<Vec<String>, usize> {
        &self.counts
    }

    /// Number of n-grams, with multiplicity.
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Add every n-gram of `seq` to the bag.
    pub fn extend_from(&mut self, seq: &TokenSequence) {
        for window in seq.tokens().windows(self.n) {
            *self.counts.entry(window.to_vec()).or_insert(0) += 1;
        }
    }

    /// Multiset sum: counts add.
    pub fn merge(&mut self, other: &NGramBag) {
        debug_assert_eq!(self.n, other.n);
        for (gram, count) in &other.counts {
            *self.counts.entry(gram.clone()).or_insert(0) += count;
        }
    }

    /// Σ_g min(self(g), other(g)).
    pub fn clipped_overlap(&self, other: &NGramBag) -> usize {
        let (small, large) = if self.counts.len() <= other.counts.len() {
            (self, other)
        } else {
            (other, self)
        };
        small
            .counts
            .iter()
            .map(|(gram, &c)| c.min(large.count(gram)))
            .sum()
    }
}

/// Contiguous n-grams of `seq` with multiplicity.
pub fn ngrams(seq: &TokenSequence, n: usize) -> Result<NGramBag, CorpusError> {
    let mut bag = NGramBag::empty(n)?;
    bag.extend_from(seq);
    Ok(bag)
}

/// Split on `.`, `!` or `?` followed by whitespace. The terminator stays with
/// its sentence; surrounding whitespace is trimmed and empty pieces dropped.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            if let Some(&(_, next)) = chars.peek() {
                if next.is_whitespace() {
                    let end = i + c.len_utf8();
                    push_trimmed(&mut sentences, &text[start..end]);
                    start = end;
                }
            }
        }
    }
    push_trimmed(&mut sentences, &text[start..]);
    sentences
}

fn push_trimmed<'a>(out: &mut Vec<&'a str>, piece: &'a str) {
    let piece = piece.trim();
    if !piece.is_empty() {
        out.push(piece);
    }
}
