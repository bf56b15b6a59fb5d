//! Genetic operators backed by a text rewriter.
//!
//! Three operators, each a single rewrite call with a fixed instruction:
//!
//! | operator              | inputs | query | instruction |
//! |-----------------------|--------|-------|-------------|
//! | random mutation       | 1      | no    | `Summarize the document` |
//! | controlled mutation   | 1      | yes   | `Re-write the document to better answer the query` |
//! | crossover             | ≥ 2    | yes   | `Re-write the given documents to better answer the query` |
//!
//! Backends are anything implementing [`RewriterBackend`]: the sidecar HTTP
//! client, or one of the deterministic mocks used for offline runs.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::fmt;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{split_sentences, tokenize};
use crate::fitness::FitnessScore;
use crate::service::{RetryPolicy, ServiceError, SidecarClient};

pub const SUMMARIZE_PROMPT: &str = "Summarize the document";
pub const REWRITE_PROMPT: &str = "Re-write the document to better answer the query";
pub const CROSSOVER_PROMPT: &str = "Re-write the given documents to better answer the query";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    RandomMutation,
    ControlledMutation,
    Crossover,
}

impl Operator {
    pub fn prompt(self) -> &'static str {
        match self {
            Operator::RandomMutation => SUMMARIZE_PROMPT,
            Operator::ControlledMutation => REWRITE_PROMPT,
            Operator::Crossover => CROSSOVER_PROMPT,
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Operator::RandomMutation => "random_mutation",
            Operator::ControlledMutation => "controlled_mutation",
            Operator::Crossover => "crossover",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RewriteError {
    #[error("invalid rewrite request: {0}")]
    InvalidRequest(String),
    #[error("rewrite failed: {0}")]
    Backend(#[from] ServiceError),
}

/// One call to a rewriter backend.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RewriteRequest {
    pub operator: Operator,
    pub prompt: String,
    pub query: Option<String>,
    pub inputs: Vec<String>,
    /// Distinguishes otherwise identical requests (offspring slot). Not sent
    /// over the wire; stochastic mocks fold it into their seed.
    pub variation: u64,
}

impl RewriteRequest {
    pub fn random_mutation(text: impl Into<String>) -> Self {
        Self {
            operator: Operator::RandomMutation,
            prompt: SUMMARIZE_PROMPT.into(),
            query: None,
            inputs: vec![text.into()],
            variation: 0,
        }
    }

    pub fn controlled_mutation(query: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            operator: Operator::ControlledMutation,
            prompt: REWRITE_PROMPT.into(),
            query: Some(query.into()),
            inputs: vec![text.into()],
            variation: 0,
        }
    }

    pub fn crossover(query: impl Into<String>, texts: Vec<String>) -> Self {
        Self {
            operator: Operator::Crossover,
            prompt: CROSSOVER_PROMPT.into(),
            query: Some(query.into()),
            inputs: texts,
            variation: 0,
        }
    }

    pub fn with_variation(mut self, variation: u64) -> Self {
        self.variation = variation;
        self
    }

    /// Arity and query rules for the operator.
    pub fn validate(&self) -> Result<(), RewriteError> {
        let arity_ok = match self.operator {
            Operator::RandomMutation | Operator::ControlledMutation => self.inputs.len() == 1,
            Operator::Crossover => self.inputs.len() >= 2,
        };
        if !arity_ok {
            return Err(RewriteError::InvalidRequest(format!(
                "{} cannot take {} input(s)",
                self.operator,
                self.inputs.len()
            )));
        }
        if self.inputs.iter().any(|t| t.trim().is_empty()) {
            return Err(RewriteError::InvalidRequest("empty input text".into()));
        }
        let needs_query = self.operator != Operator::RandomMutation;
        match &self.query {
            Some(q) if q.trim().is_empty() => Err(RewriteError::InvalidRequest("empty query".into())),
            None if needs_query => Err(RewriteError::InvalidRequest(format!("{} needs a query", self.operator))),
            _ => Ok(()),
        }
    }

    /// Prompt text as sent to a language model:
    /// `"<instruction>\n\nQuery: <q>\n\nDocument 1: <t1>\n\nDocument 2: <t2>..."`.
    pub fn render(&self) -> String {
        let mut out = self.prompt.clone();
        if let Some(q) = &self.query {
            out.push_str("\n\nQuery: ");
            out.push_str(q);
        }
        for (i, text) in self.inputs.iter().enumerate() {
            out.push_str(&format!("\n\nDocument {}: {}", i + 1, text));
        }
        out
    }
}

/// Produces one rewritten text per request.
pub trait RewriterBackend: Send + Sync {
    fn rewrite(&self, request: &RewriteRequest) -> Result<String, ServiceError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub generation: u32,
    /// `None` for seeds.
    pub operator: Option<Operator>,
    pub parents: Vec<String>,
}

/// A member of the evolving population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub text: String,
    pub lineage: Lineage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fitness: Option<FitnessScore>,
}

impl Candidate {
    pub fn seed(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            lineage: Lineage {
                generation: 0,
                operator: None,
                parents: Vec::new(),
            },
            fitness: None,
        }
    }

    pub fn generation(&self) -> u32 {
        self.lineage.generation
    }
}

/// Applies the operators through a backend with retries.
#[derive(Clone, Copy)]
pub struct GeneticOperators<'a> {
    backend: &'a dyn RewriterBackend,
    retry: RetryPolicy,
}

impl<'a> GeneticOperators<'a> {
    pub fn new(backend: &'a dyn RewriterBackend, retry: RetryPolicy) -> Self {
        Self { backend, retry }
    }

    pub fn random_mutate(&self, parent: &Candidate, child_id: String, variation: u64) -> Result<Candidate, RewriteError> {
        let request = RewriteRequest::random_mutation(parent.text.clone()).with_variation(variation);
        self.apply(request, &[parent], child_id)
    }

    pub fn controlled_mutate(
        &self,
        query: &str,
        parent: &Candidate,
        child_id: String,
        variation: u64,
    ) -> Result<Candidate, RewriteError> {
        let request = RewriteRequest::controlled_mutation(query, parent.text.clone()).with_variation(variation);
        self.apply(request, &[parent], child_id)
    }

    pub fn crossover(
        &self,
        query: &str,
        parents: &[&Candidate],
        child_id: String,
        variation: u64,
    ) -> Result<Candidate, RewriteError> {
        let request =
            RewriteRequest::crossover(query, parents.iter().map(|p| p.text.clone()).collect()).with_variation(variation);
        self.apply(request, parents, child_id)
    }

    fn apply(&self, request: RewriteRequest, parents: &[&Candidate], child_id: String) -> Result<Candidate, RewriteError> {
        request.validate()?;
        let text = self.retry.run(|| {
            let out = self.backend.rewrite(&request)?;
            let out = out.trim();
            if out.is_empty() {
                Err(ServiceError::EmptyOutput)
            } else {
                Ok(out.to_string())
            }
        })?;
        let generation = 1 + parents.iter().map(|p| p.generation()).max().unwrap_or(0);
        Ok(Candidate {
            id: child_id,
            text,
            lineage: Lineage {
                generation,
                operator: Some(request.operator),
                parents: parents.iter().map(|p| p.id.clone()).collect(),
            },
            fitness: None,
        })
    }
}

/// Deterministic sentence-selecting stand-in for a language model.
///
/// * random mutation: the first sentence;
/// * controlled mutation: every sentence sharing a token with the query, in
///   order, or the first sentence if none does;
/// * crossover: the query-matching sentences of each input interleaved
///   round-robin starting with the first input (an input without matches
///   contributes its first sentence), duplicates dropped.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExtractiveMock;

impl ExtractiveMock {
    pub fn output(request: &RewriteRequest) -> String {
        let query: HashSet<String> = request
            .query
            .as_deref()
            .map(|q| tokenize(q).into_inner().into_iter().collect())
            .unwrap_or_default();
        let matching = |text: &'_ str| -> Vec<String> {
            let sentences = split_sentences(text);
            let hits: Vec<String> = sentences
                .iter()
                .filter(|s| tokenize(s).iter().any(|t| query.contains(t)))
                .map(|s| s.to_string())
                .collect();
            if hits.is_empty() {
                sentences.first().map(|s| vec![s.to_string()]).unwrap_or_default()
            } else {
                hits
            }
        };
        match request.operator {
            Operator::RandomMutation => split_sentences(&request.inputs[0]).first().copied().unwrap_or("").to_string(),
            Operator::ControlledMutation => matching(&request.inputs[0]).join(" "),
            Operator::Crossover => {
                let per_input: Vec<Vec<String>> = request.inputs.iter().map(|t| matching(t)).collect();
                let longest = per_input.iter().map(Vec::len).max().unwrap_or(0);
                let mut seen = HashSet::new();
                let mut out = Vec::new();
                for i in 0..longest {
                    for sentences in &per_input {
                        if let Some(s) = sentences.get(i) {
                            if seen.insert(s.clone()) {
                                out.push(s.clone());
                            }
                        }
                    }
                }
                out.join(" ")
            }
        }
    }
}

impl RewriterBackend for ExtractiveMock {
    fn rewrite(&self, request: &RewriteRequest) -> Result<String, ServiceError> {
        Ok(Self::output(request))
    }
}

/// Returns its first input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityMock;

impl RewriterBackend for IdentityMock {
    fn rewrite(&self, request: &RewriteRequest) -> Result<String, ServiceError> {
        request
            .inputs
            .first()
            .cloned()
            .ok_or_else(|| ServiceError::InvalidRequest("no inputs".into()))
    }
}

/// Replacement words for the noisy mock. None of them is an English word.
pub const NOISE_VOCABULARY: &[&str] = &[
    "zorvik", "quenlat", "brisquo", "vandrel", "multhex", "pravonk", "yestrum", "glimbor", "tofrask", "wendalq",
    "oskrine", "fulmatch", "dravisk", "kelmora", "plunvex", "zaphrid", "quorbel", "inthask", "maldrox", "vospern",
    "trellik", "gandrup", "hesquil", "nobrath",
];

/// Extractive output with each token independently swapped, with probability
/// `p`, for a word from [`NOISE_VOCABULARY`]. A pure function of its arguments.
pub fn noisy_mock_rewrite(request: &RewriteRequest, p: f64, rng_seed: u64) -> String {
    let clean = ExtractiveMock::output(request);
    let p = p.clamp(0.0, 1.0);
    if p == 0.0 {
        return clean;
    }
    let mut h = DefaultHasher::new();
    rng_seed.hash(&mut h);
    request.hash(&mut h);
    let mut rng = ChaCha8Rng::seed_from_u64(h.finish());

    let mut out = String::with_capacity(clean.len());
    let mut token = String::new();
    let flush = |token: &mut String, out: &mut String, rng: &mut ChaCha8Rng| {
        if token.is_empty() {
            return;
        }
        if rng.gen_bool(p) {
            out.push_str(NOISE_VOCABULARY[rng.gen_range(0..NOISE_VOCABULARY.len())]);
        } else {
            out.push_str(token);
        }
        token.clear();
    };
    for c in clean.chars() {
        if c.is_alphanumeric() {
            token.push(c);
        } else {
            flush(&mut token, &mut out, &mut rng);
            out.push(c);
        }
    }
    flush(&mut token, &mut out, &mut rng);
    out
}

/// Stochastic stand-in for a language model that sometimes invents words.
#[derive(Debug, Clone, Copy)]
pub struct NoisyMock {
    pub hallucination_rate: f64,
    pub seed: u64,
}

impl NoisyMock {
    pub fn new(hallucination_rate: f64, seed: u64) -> Self {
        Self {
            hallucination_rate,
            seed,
        }
    }
}

impl RewriterBackend for NoisyMock {
    fn rewrite(&self, request: &RewriteRequest) -> Result<String, ServiceError> {
        Ok(noisy_mock_rewrite(request, self.hallucination_rate, self.seed))
    }
}

#[derive(Serialize)]
struct RewriteBody<'a> {
    prompt: &'a str,
    query: Option<&'a str>,
    documents: &'a [String],
}

#[derive(Deserialize)]
struct RewriteResponse {
    text: String,
}

/// Language-model rewrites through the sidecar's `POST /rewrite`.
#[derive(Debug, Clone)]
pub struct HttpRewriter {
    client: SidecarClient,
}

impl HttpRewriter {
    pub fn new(client: SidecarClient) -> Self {
        Self { client }
    }
}

impl RewriterBackend for HttpRewriter {
    fn rewrite(&self, request: &RewriteRequest) -> Result<String, ServiceError> {
        let body = RewriteBody {
            prompt: &request.prompt,
            query: request.query.as_deref(),
            documents: &request.inputs,
        };
        let resp: RewriteResponse = self.client.post_json("/rewrite", &body)?;
        Ok(resp.text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn ops(backend: &dyn RewriterBackend) -> GeneticOperators<'_> {
        GeneticOperators::new(backend, RetryPolicy::none())
    }

    #[test]
    fn random_mutation_takes_first_sentence() {
        let parent = Candidate::seed("s0", "Cats purr. Dogs bark.");
        let child = ops(&ExtractiveMock).random_mutate(&parent, "c".into(), 0).unwrap();
        assert_eq!(child.text, "Cats purr.");
        assert_eq!(child.generation(), 1);
        assert_eq!(child.lineage.operator, Some(Operator::RandomMutation));
        assert_eq!(child.lineage.parents, vec!["s0"]);
    }

    #[test]
    fn controlled_mutation_keeps_matching_sentences() {
        let parent = Candidate::seed("s0", "Cats purr. Dogs bark.");
        let child = ops(&ExtractiveMock).controlled_mutate("cats", &parent, "c".into(), 0).unwrap();
        assert_eq!(child.text, "Cats purr.");
        assert_eq!(child.lineage.operator, Some(Operator::ControlledMutation));
        let fallback = ops(&ExtractiveMock).controlled_mutate("owls", &parent, "c".into(), 0).unwrap();
        assert_eq!(fallback.text, "Cats purr.");
        let both = ops(&ExtractiveMock).controlled_mutate("dogs and cats", &parent, "c".into(), 0).unwrap();
        assert_eq!(both.text, "Cats purr. Dogs bark.");
    }

    #[test]
    fn noiseless_noisy_mock_matches_extractive() {
        let req = RewriteRequest::controlled_mutation("cats", "Cats purr. Dogs bark. Cats nap.");
        assert_eq!(noisy_mock_rewrite(&req, 0.0, 9), ExtractiveMock::output(&req));
    }

    #[test]
    fn crossover_interleaves_first_parent_first() {
        let a = Candidate::seed("a", "Cats purr.");
        let b = Candidate::seed("b", "Cats nap.");
        let child = ops(&ExtractiveMock).crossover("cats", &[&a, &b], "c".into(), 0).unwrap();
        assert_eq!(child.text, "Cats purr. Cats nap.");
        assert_eq!(child.lineage.parents, vec!["a", "b"]);
        assert_eq!(child.lineage.operator, Some(Operator::Crossover));

        let err = ops(&ExtractiveMock).crossover("cats", &[&a], "c".into(), 0).unwrap_err();
        assert!(matches!(err, RewriteError::InvalidRequest(_)));
    }

    #[test]
    fn crossover_generation_follows_oldest_parent() {
        let a = Candidate::seed("a", "Cats purr.");
        let mut b = Candidate::seed("b", "Cats nap.");
        b.lineage.generation = 2;
        let child = ops(&ExtractiveMock).crossover("cats", &[&a, &b], "c".into(), 0).unwrap();
        assert_eq!(child.generation(), 3);
    }

    #[test]
    fn crossover_drops_repeated_sentences() {
        let req = RewriteRequest::crossover("cats", vec!["Cats purr. Cats nap.".into(), "Cats purr. Dogs bark.".into()]);
        assert_eq!(ExtractiveMock::output(&req), "Cats purr. Cats nap.");
    }

    struct Blank;
    impl RewriterBackend for Blank {
        fn rewrite(&self, _: &RewriteRequest) -> Result<String, ServiceError> {
            Ok("   ".into())
        }
    }

    #[test]
    fn empty_output_yields_no_child() {
        let parent = Candidate::seed("s0", "Cats purr.");
        let err = ops(&Blank).random_mutate(&parent, "c".into(), 0).unwrap_err();
        assert!(matches!(err, RewriteError::Backend(ServiceError::EmptyOutput)));
    }

    struct FailTwice(AtomicUsize);
    impl RewriterBackend for FailTwice {
        fn rewrite(&self, request: &RewriteRequest) -> Result<String, ServiceError> {
            if self.0.fetch_add(1, Ordering::SeqCst) < 2 {
                Err(ServiceError::Transport("connection reset".into()))
            } else {
                Ok(request.inputs[0].clone())
            }
        }
    }

    #[test]
    fn transport_errors_are_retried() {
        let parent = Candidate::seed("s0", "Cats purr.");
        let backend = FailTwice(AtomicUsize::new(0));
        let retry = RetryPolicy {
            max_retries: 2,
            base_backoff_ms: 0,
        };
        let child = GeneticOperators::new(&backend, retry).random_mutate(&parent, "c".into(), 0).unwrap();
        assert_eq!(child.text, "Cats purr.");

        let backend = FailTwice(AtomicUsize::new(0));
        let retry = RetryPolicy {
            max_retries: 1,
            base_backoff_ms: 0,
        };
        assert!(GeneticOperators::new(&backend, retry).random_mutate(&parent, "c".into(), 0).is_err());
    }

    #[test]
    fn request_rendering() {
        let req = RewriteRequest::crossover("why is the sky blue", vec!["Rayleigh.".into(), "Scattering.".into()]);
        assert_eq!(
            req.render(),
            "Re-write the given documents to better answer the query\n\nQuery: why is the sky blue\n\nDocument 1: Rayleigh.\n\nDocument 2: Scattering."
        );
        assert_eq!(
            RewriteRequest::random_mutation("Text.").render(),
            "Summarize the document\n\nDocument 1: Text."
        );
    }

    #[test]
    fn request_validation() {
        let mut req = RewriteRequest::controlled_mutation("q", "t");
        req.query = None;
        assert!(req.validate().is_err());
        let mut req = RewriteRequest::random_mutation("t");
        req.inputs.push("u".into());
        assert!(req.validate().is_err());
        assert!(RewriteRequest::random_mutation("t").validate().is_ok());
    }

    #[test]
    fn fully_noisy_output_has_no_source_tokens() {
        let req = RewriteRequest::controlled_mutation("cats", "Cats purr loudly at night. Dogs bark.");
        let out = noisy_mock_rewrite(&req, 1.0, 3);
        let source: HashSet<String> = tokenize(&req.inputs[0]).into_inner().into_iter().collect();
        let toks = tokenize(&out);
        assert_eq!(toks.len(), tokenize("Cats purr loudly at night.").len());
        assert!(toks.iter().all(|t| !source.contains(t) && NOISE_VOCABULARY.contains(&t)));
        assert!(out.ends_with('.'));
    }

    #[test]
    fn noisy_mock_is_deterministic() {
        let req = RewriteRequest::random_mutation("One two three four five six seven eight.").with_variation(4);
        let a = noisy_mock_rewrite(&req, 0.5, 11);
        assert_eq!(a, noisy_mock_rewrite(&req, 0.5, 11));
        let others: HashSet<String> = (0..16).map(|s| noisy_mock_rewrite(&req, 0.5, s)).collect();
        assert!(others.len() > 1);
    }
}
