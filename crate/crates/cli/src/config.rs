//! Run configuration: one JSON file, optional `key=value` overrides, and two
//! environment variables for the sidecar.

use std::path::{Path, PathBuf};

use groundgen::corpus::CorpusFormat;
use groundgen::evaluation::{GroundingVerifier, HttpVerifier, RougeMockVerifier};
use groundgen::fitness::{HttpRelevanceScorer, LexicalScorer, Normalization, RelevanceScorer};
use groundgen::retrieval::Bm25Params;
use groundgen::rewriter::{ExtractiveMock, HttpRewriter, IdentityMock, NoisyMock, RewriterBackend};
use groundgen::service::{RetryPolicy, SidecarClient};
use groundgen::EvolutionConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const ENV_SIDECAR_URL: &str = "GROUNDGEN_SIDECAR_URL";
pub const ENV_API_KEY: &str = "GROUNDGEN_API_KEY";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("bad override `{0}`: expected key=value")]
    Override(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Http,
    ExtractiveMock,
    NoisyMock {
        #[serde(default = "default_noise")]
        hallucination_rate: f64,
    },
    IdentityMock,
}

fn default_noise() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScorerConfig {
    Http {
        id: String,
        #[serde(default)]
        normalization: Option<Normalization>,
    },
    LexicalMock {
        id: String,
        #[serde(default)]
        jitter: f64,
        #[serde(default)]
        salt: u64,
    },
}

impl ScorerConfig {
    pub fn id(&self) -> &str {
        match self {
            ScorerConfig::Http { id, .. } | ScorerConfig::LexicalMock { id, .. } => id,
        }
    }

    fn lexical(id: &str) -> Self {
        ScorerConfig::LexicalMock {
            id: id.into(),
            jitter: 0.0,
            salt: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VerifierConfig {
    Http {
        id: String,
    },
    RougeMock {
        #[serde(default)]
        contradictions: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub first_k: usize,
    pub seed_count: usize,
    pub k1: f64,
    pub b: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        let bm25 = Bm25Params::default();
        Self {
            first_k: 100,
            seed_count: 10,
            k1: bm25.k1,
            b: bm25.b,
        }
    }
}

impl RetrievalConfig {
    pub fn bm25(&self) -> Bm25Params {
        Bm25Params { k1: self.k1, b: self.b }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Row label in reports.
    pub method: String,
    pub epsilon: f64,
    pub retry: RetryPolicy,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            method: "groundgen".into(),
            epsilon: 0.01,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub corpus_format: Option<CorpusFormat>,
    pub queries: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/index.json`.
    pub index: Option<PathBuf>,
    pub sidecar_url: Option<String>,
    pub backend: BackendConfig,
    pub scorer: ScorerConfig,
    /// Second-stage ranker for seeds; defaults to `scorer`.
    pub reranker: Option<ScorerConfig>,
    pub judge: ScorerConfig,
    pub verifier: VerifierConfig,
    pub retrieval: RetrievalConfig,
    pub evolution: EvolutionConfig,
    pub evaluation: EvalConfig,
    /// Queries processed concurrently.
    pub parallelism: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            corpus_format: None,
            queries: None,
            output_dir: PathBuf::from("groundgen-out"),
            index: None,
            sidecar_url: None,
            backend: BackendConfig::ExtractiveMock,
            scorer: ScorerConfig::lexical("lexical-fitness"),
            reranker: None,
            judge: ScorerConfig::lexical("lexical-judge"),
            verifier: VerifierConfig::RougeMock { contradictions: Vec::new() },
            retrieval: RetrievalConfig::default(),
            evolution: EvolutionConfig::default(),
            evaluation: EvalConfig::default(),
            parallelism: 4,
        }
    }
}

/// Apply a `key=value` override. The value is parsed as JSON when possible
/// and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| ConfigError::Override(assignment.into()))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    set_path(root, key, value).map_err(|_| ConfigError::Override(assignment.into()))
}

/// Set a dot-separated key in a JSON object tree, creating objects on the
/// way. Changing a `kind` tag clears the sibling fields of the old kind.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let bad = || ConfigError::Override(key.into());
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(bad());
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let map = node.as_object_mut().ok_or_else(bad)?;
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    let map = node.as_object_mut().ok_or_else(bad)?;
    let last = parts[parts.len() - 1];
    if last == "kind" && map.get("kind").is_some_and(|k| *k != value) {
        map.clear();
    }
    map.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Defaults, then the file, then the environment, then overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self, ConfigError> {
        let mut value = serde_json::to_value(RunConfig::default()).expect("default config serializes");
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
            let file: Value = serde_json::from_str(&text).map_err(|e| ConfigError::Read {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
            merge(&mut value, file);
        }
        if let Ok(url) = std::env::var(ENV_SIDECAR_URL) {
            if !url.is_empty() {
                value["sidecar_url"] = Value::String(url);
            }
        }
        for (key, v) in overrides {
            set_path(&mut value, key, v.clone())?;
        }
        let config: RunConfig = serde_json::from_value(value).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        let needs_http = matches!(self.backend, BackendConfig::Http)
            || matches!(self.scorer, ScorerConfig::Http { .. })
            || matches!(self.reranker, Some(ScorerConfig::Http { .. }))
            || matches!(self.judge, ScorerConfig::Http { .. })
            || matches!(self.verifier, VerifierConfig::Http { .. });
        if needs_http && self.sidecar_url.as_deref().unwrap_or("").is_empty() {
            return invalid(format!("http selections need `sidecar_url` (or {ENV_SIDECAR_URL})"));
        }
        if let BackendConfig::NoisyMock { hallucination_rate } = self.backend {
            if !(0.0..=1.0).contains(&hallucination_rate) {
                return invalid(format!("backend.hallucination_rate must be in [0, 1], got {hallucination_rate}"));
            }
        }
        if self.retrieval.seed_count == 0 || self.retrieval.seed_count > self.retrieval.first_k {
            return invalid(format!(
                "need 1 <= retrieval.seed_count <= retrieval.first_k, got {} and {}",
                self.retrieval.seed_count, self.retrieval.first_k
            ));
        }
        if self.parallelism == 0 {
            return invalid("parallelism must be at least 1".into());
        }
        if !(self.evaluation.epsilon >= 0.0) {
            return invalid("evaluation.epsilon must be >= 0".into());
        }
        self.evolution.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn corpus_path(&self) -> Result<&Path, ConfigError> {
        self.corpus.as_deref().ok_or_else(|| ConfigError::Invalid("`corpus` is not set".into()))
    }

    pub fn queries_path(&self) -> Result<&Path, ConfigError> {
        self.queries.as_deref().ok_or_else(|| ConfigError::Invalid("`queries` is not set".into()))
    }

    pub fn corpus_format(&self) -> Result<CorpusFormat, ConfigError> {
        Ok(self.corpus_format.unwrap_or_else(|| CorpusFormat::from_path(self.corpus.as_deref().unwrap_or(Path::new("")))))
    }

    pub fn index_path(&self) -> PathBuf {
        self.index.clone().unwrap_or_else(|| self.output_dir.join("index.json"))
    }

    pub fn traces_dir(&self) -> PathBuf {
        self.output_dir.join("traces")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.output_dir.join("eval")
    }

    fn client(&self) -> SidecarClient {
        let url = self.sidecar_url.clone().unwrap_or_default();
        let key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        SidecarClient::new(url).with_api_key(key)
    }

    pub fn build_backend(&self) -> Box<dyn RewriterBackend> {
        match self.backend {
            BackendConfig::Http => Box::new(HttpRewriter::new(self.client())),
            BackendConfig::ExtractiveMock => Box::new(ExtractiveMock),
            BackendConfig::NoisyMock { hallucination_rate } => Box::new(NoisyMock::new(hallucination_rate, self.evolution.rng_seed)),
            BackendConfig::IdentityMock => Box::new(IdentityMock),
        }
    }

    pub fn build_scorer(&self, which: &ScorerConfig) -> Box<dyn RelevanceScorer> {
        match which {
            ScorerConfig::Http { id, normalization } => {
                let mut s = HttpRelevanceScorer::new(id.clone(), self.client()).with_retry(self.evolution.retry);
                if let Some(n) = normalization {
                    s = s.with_normalization(*n);
                }
                Box::new(s)
            }
            ScorerConfig::LexicalMock { id, jitter, salt } => Box::new(LexicalScorer::new(id.clone()).with_jitter(*jitter, *salt)),
        }
    }

    pub fn reranker(&self) -> &ScorerConfig {
        self.reranker.as_ref().unwrap_or(&self.scorer)
    }

    pub fn build_verifier(&self) -> Box<dyn GroundingVerifier> {
        match &self.verifier {
            VerifierConfig::Http { id } => Box::new(HttpVerifier::new(id.clone(), self.client())),
            VerifierConfig::RougeMock { contradictions } => Box::new(RougeMockVerifier::new().with_contradictions(contradictions)),
        }
    }
}

/// Recursive object merge; non-object values in `patch` replace.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() && !is_tagged(slot, &v) => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Tagged selections (`{"kind": ...}`) are replaced whole when the kind
/// changes, so fields of the default kind do not leak into the new one.
fn is_tagged(base: &Value, patch: &Value) -> bool {
    match (base.get("kind"), patch.get("kind")) {
        (Some(a), Some(b)) => a != b,
        _ => false,
    }
}
