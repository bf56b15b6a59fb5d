#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

use groundgen::corpus::{tokenize, Corpus, Document, Query};
use groundgen::evolution::{evolve, EvolutionConfig, EvolutionTrace};
use groundgen::fitness::{LexicalScorer, RelevanceScorer};
use groundgen::retrieval::{build_index, seed_population, Bm25Params, InvertedIndex, Seed};
use groundgen::rewriter::{RewriterBackend, NOISE_VOCABULARY};
use groundgen::service::RetryPolicy;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FIRST_K: usize = 20;
pub const SEED_COUNT: usize = 5;
const KEYS: usize = 2;

const FILLER: &[&str] = &["the", "a", "of", "in", "and", "to", "near", "with", "from", "by"];
const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st", "tr"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

/// Fixed synthetic collection: keyword queries whose terms are spread over
/// several multi-sentence documents, plus distractors.
pub struct Synthetic {
    pub corpus: Corpus,
    pub queries: Vec<Query>,
    pub index: InvertedIndex,
    pub vocabulary: HashSet<String>,
}

fn pseudo_words(rng: &mut ChaCha8Rng, count: usize) -> Vec<String> {
    let banned: HashSet<&str> = NOISE_VOCABULARY.iter().chain(FILLER).copied().collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let syllables = rng.gen_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
            .collect();
        if !banned.contains(w.as_str()) && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn sentence(rng: &mut ChaCha8Rng, content: &[&str]) -> String {
    let mut words: Vec<&str> = content.to_vec();
    for _ in 0..rng.gen_range(2..=4) {
        let at = rng.gen_range(0..=words.len());
        words.insert(at, FILLER.choose(rng).unwrap());
    }
    let mut s = words.join(" ");
    s[..1].make_ascii_uppercase();
    s.push('.');
    s
}

pub fn synthetic_set(seed: u64, n_queries: usize) -> Synthetic {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = pseudo_words(&mut rng, n_queries * 15 + 200);
    let (topical, general) = words.split_at(n_queries * 15);
    let mut docs = Vec::new();
    let mut queries = Vec::new();
    for q in 0..n_queries {
        let pool = &topical[q * 15..(q + 1) * 15];
        let keys = &pool[..KEYS];
        let context = &pool[3..];
        queries.push(Query::new(format!("q{q:02}"), keys.join(" ")));
        for j in 0..6 {
            let key = keys[j % KEYS].as_str();
            let sentences: Vec<String> = (0..2)
                .map(|_| {
                    let mut content: Vec<&str> = context.choose_multiple(&mut rng, 3).map(String::as_str).collect();
                    content.push(general.choose(&mut rng).unwrap());
                    content.push(key);
                    content.shuffle(&mut rng);
                    sentence(&mut rng, &content)
                })
                .collect();
            docs.push(Document::new(format!("q{q:02}-r{j}"), sentences.join(" ")));
        }
    }
    for d in 0..n_queries * 4 {
        let sentences: Vec<String> = (0..rng.gen_range(2..=4))
            .map(|_| {
                let mut content: Vec<&str> = general.choose_multiple(&mut rng, 4).map(String::as_str).collect();
                if rng.gen_bool(0.3) {
                    content.push(topical.choose(&mut rng).unwrap());
                }
                sentence(&mut rng, &content)
            })
            .collect();
        docs.push(Document::new(format!("x{d:03}"), sentences.join(" ")));
    }
    let vocabulary = docs.iter().flat_map(|d| tokenize(&d.text).into_inner()).collect();
    let index = build_index(&docs).unwrap();
    Synthetic {
        corpus: Corpus::new(docs).unwrap(),
        queries,
        index,
        vocabulary,
    }
}

impl Synthetic {
    pub fn seeds(&self, query: &Query) -> Vec<Seed> {
        let reranker = LexicalScorer::new("lexical-rerank");
        seed_population(&self.index, &self.corpus, query, &reranker, FIRST_K, SEED_COUNT, Bm25Params::default())
            .unwrap()
            .seeds
    }

    pub fn all_seeds(&self) -> Vec<Vec<Seed>> {
        self.queries.iter().map(|q| self.seeds(q)).collect()
    }

    /// Share of answer tokens that never occur in the corpus.
    pub fn oov_rate(&self, text: &str) -> f64 {
        let toks = tokenize(text);
        if toks.is_empty() {
            return 0.0;
        }
        toks.iter().filter(|t| !self.vocabulary.contains(*t)).count() as f64 / toks.len() as f64
    }

    pub fn run_all(
        &self,
        seeds: &[Vec<Seed>],
        backend: &dyn RewriterBackend,
        scorer: &dyn RelevanceScorer,
        config: &EvolutionConfig,
    ) -> Vec<EvolutionTrace> {
        self.queries
            .iter()
            .zip(seeds)
            .map(|(q, s)| evolve(q, s, backend, scorer, config).unwrap())
            .collect()
    }
}

pub fn fitness_scorer() -> LexicalScorer {
    LexicalScorer::new("lexical-fitness").with_jitter(0.15, 7)
}

pub fn judge() -> LexicalScorer {
    LexicalScorer::new("lexical-judge")
}

pub fn mock_config() -> EvolutionConfig {
    EvolutionConfig {
        retry: RetryPolicy::none(),
        ..EvolutionConfig::default()
    }
}
