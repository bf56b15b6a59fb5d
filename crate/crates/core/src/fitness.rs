//! Balanced fitness: normalized query relevance plus λ times ROUGE grounding
//! against the seed documents.
//!
//! ```text
//! f(c) = relevance(q, c) + λ · rouge_f1(c, seeds)
//! ```
//!
//! Relevance comes from a [`RelevanceScorer`] and is squashed into `[0, 1]`
//! first, so with λ = 1 both terms carry the same weight.

use std::cmp::Ordering;
use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{split_sentences, Document, NGramBag, TokenSequence, Tokenizer};
use crate::service::{RetryPolicy, ServiceError, SidecarClient};

#[derive(Debug, thiserror::Error)]
pub enum FitnessError {
    #[error("grounding needs at least one seed document")]
    NoSeeds,
    #[error("lambda must be finite and non-negative, got {0}")]
    InvalidLambda(f64),
    #[error(transparent)]
    Scorer(#[from] ServiceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RougeVariant {
    Rouge1,
    Rouge2,
    #[serde(rename = "rougeL")]
    RougeL,
}

impl RougeVariant {
    /// N-gram order, or `None` for the LCS variant.
    pub fn order(self) -> Option<usize> {
        match self {
            RougeVariant::Rouge1 => Some(1),
            RougeVariant::Rouge2 => Some(2),
            RougeVariant::RougeL => None,
        }
    }
}

impl fmt::Display for RougeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RougeVariant::Rouge1 => "rouge1",
            RougeVariant::Rouge2 => "rouge2",
            RougeVariant::RougeL => "rougeL",
        })
    }
}

impl FromStr for RougeVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rouge1" => Ok(RougeVariant::Rouge1),
            "rouge2" => Ok(RougeVariant::Rouge2),
            "rougeL" | "rougel" => Ok(RougeVariant::RougeL),
            other => Err(format!("unknown rouge variant `{other}`")),
        }
    }
}

/// How per-seed ROUGE is folded into a single grounding value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundingMode {
    /// Best F1 against any single seed (multi-reference ROUGE).
    #[default]
    MaxOverSeeds,
    /// Precision against the pooled n-grams of all seeds, recall against the
    /// best single seed. N-grams are taken within sentences only.
    UnionPrecisionF1,
}

impl FromStr for GroundingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max_over_seeds" => Ok(GroundingMode::MaxOverSeeds),
            "union_precision_f1" => Ok(GroundingMode::UnionPrecisionF1),
            other => Err(format!("unknown grounding mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Logistic,
    Identity,
}

/// Map a raw relevance score into `[0, 1]`.
pub fn normalize_relevance(raw: f64, mode: Normalization) -> f64 {
    match mode {
        Normalization::Logistic => 1.0 / (1.0 + (-raw).exp()),
        Normalization::Identity => {
            if raw.is_nan() {
                0.0
            } else {
                raw.clamp(0.0, 1.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitnessScore {
    pub relevance: f64,
    pub grounding: f64,
    pub lambda: f64,
    pub combined: f64,
}

impl FitnessScore {
    pub fn new(relevance: f64, grounding: f64, lambda: f64) -> Self {
        Self {
            relevance,
            grounding,
            lambda,
            combined: relevance + lambda * grounding,
        }
    }
}

/// Survivor ordering: combined fitness descending, then grounding descending,
/// then candidate id ascending.
pub fn rank_order(a: (&FitnessScore, &str), b: (&FitnessScore, &str)) -> Ordering {
    b.0.combined
        .total_cmp(&a.0.combined)
        .then_with(|| b.0.grounding.total_cmp(&a.0.grounding))
        .then_with(|| a.1.cmp(b.1))
}

/// F1 of clipped n-gram overlap. Symmetric in its arguments.
///
/// # Panics
/// If `n == 0`.
pub fn rouge_n_f1(candidate: &TokenSequence, reference: &TokenSequence, n: usize) -> f64 {
    assert!(n >= 1, "rouge order must be at least 1");
    let cand = crate::corpus::ngrams(candidate, n).expect("order checked");
    let refs = crate::corpus::ngrams(reference, n).expect("order checked");
    f1_from_counts(cand.clipped_overlap(&refs), cand.total(), refs.total())
}

/// F1 over longest-common-subsequence length.
pub fn rouge_l_f1(candidate: &TokenSequence, reference: &TokenSequence) -> f64 {
    let lcs = lcs_len(candidate.tokens(), reference.tokens());
    f1_from_counts(lcs, candidate.len(), reference.len())
}

/// `2PR/(P+R)` with `P = overlap/cand`, `R = overlap/refs`, written in the
/// equivalent form `2·overlap/(cand+refs)`.
fn f1_from_counts(overlap: usize, cand: usize, refs: usize) -> f64 {
    if overlap == 0 || cand == 0 || refs == 0 {
        return 0.0;
    }
    2.0 * overlap as f64 / (cand + refs) as f64
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision <= 0.0 || recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// LCS length by the bit-parallel recurrence over the shorter side:
/// `U = V & M[y]; V = (V + U) | (V - U)`; the answer is the count of cleared
/// bits in `V`.
pub(crate) fn lcs_len<T: Eq + Hash>(a: &[T], b: &[T]) -> usize {
    let (a, b) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let m = a.len();
    if m == 0 {
        return 0;
    }
    let words = m.div_ceil(64);
    let mut masks: HashMap<&T, Vec<u64>> = HashMap::new();
    for (i, sym) in a.iter().enumerate() {
        masks.entry(sym).or_insert_with(|| vec![0; words])[i / 64] |= 1 << (i % 64);
    }
    let mut v = vec![u64::MAX; words];
    let tail_bits = m % 64;
    if tail_bits != 0 {
        v[words - 1] = (1u64 << tail_bits) - 1;
    }
    let live_mask = v.clone();
    let mut u = vec![0u64; words];
    for sym in b {
        let Some(mask) = masks.get(sym) else { continue };
        for w in 0..words {
            u[w] = v[w] & mask[w];
        }
        let mut carry = 0u64;
        let mut borrow = 0u64;
        for w in 0..words {
            let (s1, c1) = v[w].overflowing_add(u[w]);
            let (s2, c2) = s1.overflowing_add(carry);
            carry = (c1 | c2) as u64;
            let (d1, b1) = v[w].overflowing_sub(u[w]);
            let (d2, b2) = d1.overflowing_sub(borrow);
            borrow = (b1 | b2) as u64;
            v[w] = (s2 | d2) & live_mask[w];
        }
    }
    m - v.iter().map(|w| w.count_ones() as usize).sum::<usize>()
}

struct SeedText {
    whole: TokenSequence,
    sentences: Vec<TokenSequence>,
    whole_bag: Option<NGramBag>,
    sentence_bag: Option<NGramBag>,
}

/// Seed documents prepared once for scoring many candidates against them.
pub struct GroundingReference {
    variant: RougeVariant,
    mode: GroundingMode,
    tokenizer: Tokenizer,
    seeds: Vec<SeedText>,
    union_bag: Option<NGramBag>,
    union_unigrams: HashSet<String>,
}

impl GroundingReference {
    pub fn new(
        seeds: &[Document],
        variant: RougeVariant,
        mode: GroundingMode,
        tokenizer: Tokenizer,
    ) -> Result<Self, FitnessError> {
        Self::from_texts(seeds.iter().map(|d| d.text.as_str()), variant, mode, tokenizer)
    }

    pub fn from_texts<'a>(
        seeds: impl IntoIterator<Item = &'a str>,
        variant: RougeVariant,
        mode: GroundingMode,
        tokenizer: Tokenizer,
    ) -> Result<Self, FitnessError> {
        let mut prepared = Vec::new();
        let mut union_bag = variant.order().map(|n| NGramBag::empty(n).expect("order >= 1"));
        let mut union_unigrams = HashSet::new();
        for text in seeds {
            let whole = tokenizer.tokenize(text);
            let sentences: Vec<TokenSequence> = split_sentences(text).into_iter().map(|s| tokenizer.tokenize(s)).collect();
            let (whole_bag, sentence_bag) = match variant.order() {
                Some(n) => {
                    let whole_bag = crate::corpus::ngrams(&whole, n).expect("order >= 1");
                    let sentence_bag = sentence_ngrams(&sentences, n);
                    if let Some(u) = union_bag.as_mut() {
                        u.merge(&sentence_bag);
                    }
                    (Some(whole_bag), Some(sentence_bag))
                }
                None => (None, None),
            };
            union_unigrams.extend(whole.tokens().iter().cloned());
            prepared.push(SeedText {
                whole,
                sentences,
                whole_bag,
                sentence_bag,
            });
        }
        if prepared.is_empty() {
            return Err(FitnessError::NoSeeds);
        }
        Ok(Self {
            variant,
            mode,
            tokenizer,
            seeds: prepared,
            union_bag,
            union_unigrams,
        })
    }

    pub fn variant(&self) -> RougeVariant {
        self.variant
    }

    pub fn mode(&self) -> GroundingMode {
        self.mode
    }

    /// Grounding of `candidate` in `[0, 1]`.
    pub fn score(&self, candidate: &str) -> f64 {
        match self.mode {
            GroundingMode::MaxOverSeeds => self.max_over_seeds(candidate),
            GroundingMode::UnionPrecisionF1 => self.union_precision_f1(candidate),
        }
    }

    /// Fraction of candidate tokens that occur anywhere in the seeds.
    pub fn token_support(&self, candidate: &str) -> f64 {
        let toks = self.tokenizer.tokenize(candidate);
        if toks.is_empty() {
            return 0.0;
        }
        let hits = toks.iter().filter(|t| self.union_unigrams.contains(*t)).count();
        hits as f64 / toks.len() as f64
    }

    /// Count-clipped share of the candidate's within-sentence n-grams found in
    /// the pooled seed n-grams. For the LCS variant this is unigram precision.
    pub fn union_precision(&self, candidate: &str) -> f64 {
        let n = self.variant.order().unwrap_or(1);
        let sentences: Vec<TokenSequence> = split_sentences(candidate)
            .into_iter()
            .map(|s| self.tokenizer.tokenize(s))
            .collect();
        let bag = sentence_ngrams(&sentences, n);
        if bag.total() == 0 {
            return 0.0;
        }
        let overlap = match (&self.union_bag, self.variant.order()) {
            (Some(union), Some(_)) => bag.clipped_overlap(union),
            _ => {
                let mut union = NGramBag::empty(1).expect("order >= 1");
                for s in &self.seeds {
                    union.extend_from(&s.whole);
                }
                bag.clipped_overlap(&union)
            }
        };
        overlap as f64 / bag.total() as f64
    }

    fn max_over_seeds(&self, candidate: &str) -> f64 {
        let cand = self.tokenizer.tokenize(candidate);
        match self.variant.order() {
            Some(n) => {
                let bag = crate::corpus::ngrams(&cand, n).expect("order >= 1");
                self.seeds
                    .iter()
                    .map(|s| {
                        let refs = s.whole_bag.as_ref().expect("n-gram variant");
                        f1_from_counts(bag.clipped_overlap(refs), bag.total(), refs.total())
                    })
                    .fold(0.0, f64::max)
            }
            None => self.seeds.iter().map(|s| rouge_l_f1(&cand, &s.whole)).fold(0.0, f64::max),
        }
    }

    fn union_precision_f1(&self, candidate: &str) -> f64 {
        let sentences: Vec<TokenSequence> = split_sentences(candidate)
            .into_iter()
            .map(|s| self.tokenizer.tokenize(s))
            .collect();
        let (precision, recall) = match self.variant.order() {
            Some(n) => {
                let bag = sentence_ngrams(&sentences, n);
                if bag.total() == 0 {
                    return 0.0;
                }
                let union = self.union_bag.as_ref().expect("n-gram variant");
                let precision = bag.clipped_overlap(union) as f64 / bag.total() as f64;
                let recall = self
                    .seeds
                    .iter()
                    .map(|s| {
                        let refs = s.sentence_bag.as_ref().expect("n-gram variant");
                        if refs.total() == 0 {
                            0.0
                        } else {
                            bag.clipped_overlap(refs) as f64 / refs.total() as f64
                        }
                    })
                    .fold(0.0, f64::max);
                (precision, recall)
            }
            None => {
                // Each candidate sentence is matched in order against its best seed sentence.
                let cand_len: usize = sentences.iter().map(TokenSequence::len).sum();
                if cand_len == 0 {
                    return 0.0;
                }
                let covered: usize = sentences
                    .iter()
                    .map(|cs| {
                        self.seeds
                            .iter()
                            .flat_map(|s| s.sentences.iter())
                            .map(|ss| lcs_len(cs.tokens(), ss.tokens()))
                            .max()
                            .unwrap_or(0)
                    })
                    .sum();
                let whole: TokenSequence = sentences.iter().flat_map(|s| s.iter()).collect();
                let recall = self
                    .seeds
                    .iter()
                    .map(|s| {
                        if s.whole.is_empty() {
                            0.0
                        } else {
                            lcs_len(whole.tokens(), s.whole.tokens()) as f64 / s.whole.len() as f64
                        }
                    })
                    .fold(0.0, f64::max);
                (covered as f64 / cand_len as f64, recall)
            }
        };
        f1(precision, recall)
    }
}

fn sentence_ngrams(sentences: &[TokenSequence], n: usize) -> NGramBag {
    let mut bag = NGramBag::empty(n).expect("order >= 1");
    for s in sentences {
        bag.extend_from(s);
    }
    bag
}

/// One-shot grounding of `candidate` against `seeds`.
pub fn grounding_score(
    candidate: &str,
    seeds: &[Document],
    variant: RougeVariant,
    mode: GroundingMode,
) -> Result<f64, FitnessError> {
    Ok(GroundingReference::new(seeds, variant, mode, Tokenizer::default())?.score(candidate))
}

/// Query–text relevance model.
pub trait RelevanceScorer: Send + Sync {
    /// Stable identifier; the evaluation judge must not share it with the
    /// scorer used inside fitness.
    fn id(&self) -> &str;

    fn normalization(&self) -> Normalization;

    /// One raw score per text, in order.
    fn score(&self, query: &str, texts: &[&str]) -> Result<Vec<f64>, ServiceError>;

    /// Scores mapped through [`Self::normalization`].
    fn score_normalized(&self, query: &str, texts: &[&str]) -> Result<Vec<f64>, ServiceError> {
        let mode = self.normalization();
        Ok(self
            .score(query, texts)?
            .into_iter()
            .map(|raw| normalize_relevance(raw, mode))
            .collect())
    }
}

/// Fitness of a single text.
pub fn fitness(
    query: &str,
    candidate: &str,
    reference: &GroundingReference,
    scorer: &dyn RelevanceScorer,
    lambda: f64,
) -> Result<FitnessScore, FitnessError> {
    Ok(fitness_batch(query, &[candidate], reference, scorer, lambda)?.remove(0))
}

/// Fitness of a batch, with one scorer call for the whole batch.
pub fn fitness_batch(
    query: &str,
    candidates: &[&str],
    reference: &GroundingReference,
    scorer: &dyn RelevanceScorer,
    lambda: f64,
) -> Result<Vec<FitnessScore>, FitnessError> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(FitnessError::InvalidLambda(lambda));
    }
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let relevance = scorer.score_normalized(query, candidates)?;
    if relevance.len() != candidates.len() {
        return Err(ServiceError::Protocol(format!(
            "scorer returned {} scores for {} texts",
            relevance.len(),
            candidates.len()
        ))
        .into());
    }
    Ok(candidates
        .iter()
        .zip(relevance)
        .map(|(text, rel)| FitnessScore::new(rel, reference.score(text), lambda))
        .collect())
}

/// Deterministic lexical stand-in for a cross-encoder.
///
/// Raw score is `w·coverage + (1−w)·density`, where coverage is the share of
/// distinct query tokens present in the text and density is the share of text
/// tokens that are query tokens. An optional hash-derived offset in
/// `[−jitter/2, jitter/2]` stands in for model-specific preferences that are
/// unrelated to grounding; it depends only on `(salt, text)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexicalScorer {
    pub id: String,
    pub coverage_weight: f64,
    pub jitter: f64,
    pub salt: u64,
    #[serde(default)]
    pub tokenizer: Tokenizer,
}

impl LexicalScorer {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            coverage_weight: 0.7,
            jitter: 0.0,
            salt: 0,
            tokenizer: Tokenizer::default(),
        }
    }

    pub fn with_jitter(mut self, jitter: f64, salt: u64) -> Self {
        self.jitter = jitter;
        self.salt = salt;
        self
    }

    pub fn with_coverage_weight(mut self, w: f64) -> Self {
        self.coverage_weight = w;
        self
    }

    fn raw(&self, query: &HashSet<String>, text: &str) -> f64 {
        let toks = self.tokenizer.tokenize(text);
        let base = if query.is_empty() || toks.is_empty() {
            0.0
        } else {
            let present: HashSet<&str> = toks.iter().filter(|t| query.contains(*t)).collect();
            let coverage = present.len() as f64 / query.len() as f64;
            let density = toks.iter().filter(|t| query.contains(*t)).count() as f64 / toks.len() as f64;
            self.coverage_weight * coverage + (1.0 - self.coverage_weight) * density
        };
        if self.jitter == 0.0 {
            return base;
        }
        let mut h = DefaultHasher::new();
        self.salt.hash(&mut h);
        text.hash(&mut h);
        let unit = (h.finish() >> 11) as f64 / (1u64 << 53) as f64;
        base + self.jitter * (unit - 0.5)
    }
}

impl RelevanceScorer for LexicalScorer {
    fn id(&self) -> &str {
        &self.id
    }

    fn normalization(&self) -> Normalization {
        Normalization::Identity
    }

    fn score(&self, query: &str, texts: &[&str]) -> Result<Vec<f64>, ServiceError> {
        let q: HashSet<String> = self.tokenizer.tokenize(query).into_inner().into_iter().collect();
        Ok(texts.iter().map(|t| self.raw(&q, t)).collect())
    }
}

#[derive(Serialize)]
struct RelevanceRequest<'a> {
    query: &'a str,
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct RelevanceResponse {
    scores: Vec<f64>,
}

/// Cross-encoder scoring through the sidecar's `POST /relevance`.
#[derive(Debug, Clone)]
pub struct HttpRelevanceScorer {
    id: String,
    client: SidecarClient,
    retry: RetryPolicy,
    normalization: Normalization,
}

impl HttpRelevanceScorer {
    pub fn new(id: impl Into<String>, client: SidecarClient) -> Self {
        Self {
            id: id.into(),
            client,
            retry: RetryPolicy::default(),
            normalization: Normalization::Logistic,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }
}

impl RelevanceScorer for HttpRelevanceScorer {
    fn id(&self) -> &str {
        &self.id
    }

    fn normalization(&self) -> Normalization {
        self.normalization
    }

    fn score(&self, query: &str, texts: &[&str]) -> Result<Vec<f64>, ServiceError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = RelevanceRequest { query, texts };
        let resp: RelevanceResponse = self.retry.run(|| self.client.post_json("/relevance", &body))?;
        if resp.scores.len() != texts.len() {
            return Err(ServiceError::Protocol(format!(
                "expected {} scores, got {}",
                texts.len(),
                resp.scores.len()
            )));
        }
        Ok(resp.scores)
    }
}
