//! Evaluation of final answers: a grounding verdict against the seed
//! documents, a pairwise relevance preference against the top reranked
//! passage, and the aggregate table (Sup / NEI / Ref / Acc and + / = / −).

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Tokenizer};
use crate::evolution::EvolutionTrace;
use crate::fitness::{GroundingMode, GroundingReference, RelevanceScorer, RougeVariant};
use crate::service::{RetryPolicy, ServiceError, SidecarClient};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("accuracy of an empty verdict list is undefined")]
    NoVerdicts,
    #[error("no evaluation for query `{0}`")]
    MissingEvaluation(String),
    #[error("evaluation for unknown query `{0}`")]
    UnknownQuery(String),
    #[error("nothing to report")]
    Empty,
    #[error("malformed report: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "SUPPORTS")]
    Supports,
    #[serde(rename = "NOT ENOUGH INFO")]
    NotEnoughInfo,
    #[serde(rename = "REFUTES")]
    Refutes,
}

impl Verdict {
    /// Wire label.
    pub fn label(self) -> &'static str {
        match self {
            Verdict::Supports => "SUPPORTS",
            Verdict::NotEnoughInfo => "NOT ENOUGH INFO",
            Verdict::Refutes => "REFUTES",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Verdict {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "SUPPORTS" => Ok(Verdict::Supports),
            "NOT ENOUGH INFO" => Ok(Verdict::NotEnoughInfo),
            "REFUTES" => Ok(Verdict::Refutes),
            other => Err(format!("unknown verdict label `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferenceOutcome {
    ModelPreferred,
    Equivalent,
    BaselinePreferred,
}

impl PreferenceOutcome {
    pub fn symbol(self) -> &'static str {
        match self {
            PreferenceOutcome::ModelPreferred => "+",
            PreferenceOutcome::Equivalent => "=",
            PreferenceOutcome::BaselinePreferred => "-",
        }
    }
}

/// Claim verification against evidence passages.
pub trait GroundingVerifier: Send + Sync {
    fn id(&self) -> &str;
    fn verify(&self, claim: &str, evidence: &[String]) -> Result<Verdict, ServiceError>;
}

/// Lexical verifier: SUPPORTS when every unigram of the claim is covered by
/// the pooled evidence unigrams (count-clipped), otherwise REFUTES when the
/// claim contains a contradiction-lexicon token, otherwise NOT ENOUGH INFO.
#[derive(Debug, Clone, Default)]
pub struct RougeMockVerifier {
    contradiction_lexicon: HashSet<String>,
    tokenizer: Tokenizer,
}

impl RougeMockVerifier {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_contradictions<I, S>(mut self, words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        for w in words {
            self.contradiction_lexicon
                .extend(self.tokenizer.tokenize(w.as_ref()).into_inner());
        }
        self
    }
}

impl GroundingVerifier for RougeMockVerifier {
    fn id(&self) -> &str {
        "rouge-mock-verifier"
    }

    fn verify(&self, claim: &str, evidence: &[String]) -> Result<Verdict, ServiceError> {
        if evidence.is_empty() {
            return Err(ServiceError::InvalidRequest("no evidence".into()));
        }
        let reference = GroundingReference::from_texts(
            evidence.iter().map(String::as_str),
            RougeVariant::Rouge1,
            GroundingMode::UnionPrecisionF1,
            self.tokenizer,
        )
        .map_err(|e| ServiceError::InvalidRequest(e.to_string()))?;
        if reference.union_precision(claim) == 1.0 {
            return Ok(Verdict::Supports);
        }
        let claim_tokens = self.tokenizer.tokenize(claim);
        if claim_tokens.iter().any(|t| self.contradiction_lexicon.contains(t)) {
            Ok(Verdict::Refutes)
        } else {
            Ok(Verdict::NotEnoughInfo)
        }
    }
}

#[derive(Serialize)]
struct VerifyBody<'a> {
    claim: &'a str,
    evidence: &'a [String],
}

#[derive(Deserialize)]
struct VerifyResponse {
    label: String,
}

/// Fact verification through the sidecar's `POST /verify`.
#[derive(Debug, Clone)]
pub struct HttpVerifier {
    id: String,
    client: SidecarClient,
}

impl HttpVerifier {
    pub fn new(id: impl Into<String>, client: SidecarClient) -> Self {
        Self { id: id.into(), client }
    }
}

impl GroundingVerifier for HttpVerifier {
    fn id(&self) -> &str {
        &self.id
    }

    fn verify(&self, claim: &str, evidence: &[String]) -> Result<Verdict, ServiceError> {
        let resp: VerifyResponse = self.client.post_json("/verify", &VerifyBody { claim, evidence })?;
        resp.label.parse().map_err(ServiceError::Protocol)
    }
}

/// Verdict for `answer` with the seed texts, in the given order, as evidence.
pub fn classify_grounding(
    verifier: &dyn GroundingVerifier,
    answer: &str,
    seeds: &[Document],
    retry: RetryPolicy,
) -> Result<Verdict, ServiceError> {
    if seeds.is_empty() {
        return Err(ServiceError::InvalidRequest("no seed documents".into()));
    }
    let evidence: Vec<String> = seeds.iter().map(|d| d.text.clone()).collect();
    retry.run(|| verifier.verify(answer, &evidence))
}

/// Judge-scored comparison with a tie margin on normalized scores.
pub fn pairwise_preference(
    judge: &dyn RelevanceScorer,
    query: &str,
    model_answer: &str,
    baseline: &str,
    epsilon: f64,
) -> Result<(PreferenceOutcome, f64, f64), ServiceError> {
    if model_answer.trim().is_empty() || baseline.trim().is_empty() {
        return Err(ServiceError::InvalidRequest("empty text in preference pair".into()));
    }
    let scores = judge.score_normalized(query, &[model_answer, baseline])?;
    let [model, base] = scores[..] else {
        return Err(ServiceError::Protocol(format!("judge returned {} scores for 2 texts", scores.len())));
    };
    Ok((preference_from_scores(model, base, epsilon), model, base))
}

pub fn preference_from_scores(model: f64, baseline: f64, epsilon: f64) -> PreferenceOutcome {
    let diff = model - baseline;
    if diff > epsilon {
        PreferenceOutcome::ModelPreferred
    } else if diff < -epsilon {
        PreferenceOutcome::BaselinePreferred
    } else {
        PreferenceOutcome::Equivalent
    }
}

/// Share of SUPPORTS verdicts.
pub fn accuracy(verdicts: &[Verdict]) -> Result<f64, EvalError> {
    if verdicts.is_empty() {
        return Err(EvalError::NoVerdicts);
    }
    let sup = verdicts.iter().filter(|v| **v == Verdict::Supports).count();
    Ok(sup as f64 / verdicts.len() as f64)
}

/// Outcome of evaluating one query's final answer. `None` fields were not
/// evaluated; `errors` says why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEvaluation {
    pub query_id: String,
    pub verdict: Option<Verdict>,
    pub preference: Option<PreferenceOutcome>,
    pub model_score: Option<f64>,
    pub baseline_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub epsilon: f64,
    pub retry: RetryPolicy,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            retry: RetryPolicy::default(),
        }
    }
}

/// Verdict and preference for a trace's final answer. The baseline is the
/// top reranked seed; evidence is every seed in rank order.
pub fn evaluate_trace(
    trace: &EvolutionTrace,
    verifier: &dyn GroundingVerifier,
    judge: &dyn RelevanceScorer,
    settings: EvalSettings,
) -> QueryEvaluation {
    if judge.id() == trace.scorer_id {
        tracing::warn!(
            query_id = %trace.query_id,
            scorer = judge.id(),
            "evaluation judge is the same scorer that drove fitness"
        );
    }
    let mut seeds = trace.seeds.clone();
    seeds.sort_by_key(|s| s.rank);
    let docs: Vec<Document> = seeds.iter().map(|s| s.document()).collect();
    let mut errors = Vec::new();
    let verdict = match classify_grounding(verifier, &trace.final_answer, &docs, settings.retry) {
        Ok(v) => Some(v),
        Err(e) => {
            errors.push(format!("verifier: {e}"));
            None
        }
    };
    let (preference, model_score, baseline_score) = match seeds.first() {
        Some(top) => match settings
            .retry
            .run(|| pairwise_preference(judge, &trace.query, &trace.final_answer, &top.text, settings.epsilon))
        {
            Ok((p, m, b)) => (Some(p), Some(m), Some(b)),
            Err(e) => {
                errors.push(format!("judge: {e}"));
                (None, None, None)
            }
        },
        None => {
            errors.push("judge: trace has no seeds".into());
            (None, None, None)
        }
    };
    QueryEvaluation {
        query_id: trace.query_id.clone(),
        verdict,
        preference,
        model_score,
        baseline_score,
        errors,
    }
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub queries: usize,
    pub sup: usize,
    pub nei: usize,
    #[serde(rename = "ref")]
    pub refutes: usize,
    pub accuracy: f64,
    pub plus: usize,
    pub equal: usize,
    pub minus: usize,
    pub unevaluated_verdicts: usize,
    pub unevaluated_preferences: usize,
}

impl ReportRow {
    pub fn from_evaluations(method: impl Into<String>, evals: &[QueryEvaluation]) -> Self {
        let count_v = |v: Verdict| evals.iter().filter(|e| e.verdict == Some(v)).count();
        let count_p = |p: PreferenceOutcome| evals.iter().filter(|e| e.preference == Some(p)).count();
        let sup = count_v(Verdict::Supports);
        let nei = count_v(Verdict::NotEnoughInfo);
        let refutes = count_v(Verdict::Refutes);
        let judged = sup + nei + refutes;
        Self {
            method: method.into(),
            queries: evals.len(),
            sup,
            nei,
            refutes,
            accuracy: if judged == 0 { 0.0 } else { sup as f64 / judged as f64 },
            plus: count_p(PreferenceOutcome::ModelPreferred),
            equal: count_p(PreferenceOutcome::Equivalent),
            minus: count_p(PreferenceOutcome::BaselinePreferred),
            unevaluated_verdicts: evals.len() - judged,
            unevaluated_preferences: evals.iter().filter(|e| e.preference.is_none()).count(),
        }
    }

    /// Column sums match the query count and the accuracy agrees with the
    /// counts to three decimals.
    pub fn reconcile(&self) -> Result<(), EvalError> {
        let judged = self.sup + self.nei + self.refutes;
        if judged + self.unevaluated_verdicts != self.queries {
            return Err(EvalError::Malformed(format!(
                "{}: Sup+NEI+Ref+unevaluated = {} but {} queries",
                self.method,
                judged + self.unevaluated_verdicts,
                self.queries
            )));
        }
        if self.plus + self.equal + self.minus + self.unevaluated_preferences != self.queries {
            return Err(EvalError::Malformed(format!("{}: preference columns do not sum to query count", self.method)));
        }
        let expected = if judged == 0 { 0.0 } else { self.sup as f64 / judged as f64 };
        if format!("{expected:.3}") != format!("{:.3}", self.accuracy) {
            return Err(EvalError::Malformed(format!(
                "{}: accuracy {:.3} does not match counts ({expected:.3})",
                self.method, self.accuracy
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Tsv,
    Markdown,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Tsv => "tsv",
            ReportFormat::Markdown => "md",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "tsv" => Ok(ReportFormat::Tsv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

/// Per-query results for one method plus their aggregate row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: ReportRow,
    pub queries: Vec<QueryEvaluation>,
}

/// Align evaluations with traces by query id and aggregate.
pub fn build_report(
    method: impl Into<String>,
    traces: &[EvolutionTrace],
    evaluations: &[QueryEvaluation],
) -> Result<EvalReport, EvalError> {
    if traces.is_empty() {
        return Err(EvalError::Empty);
    }
    let by_id: BTreeMap<&str, &QueryEvaluation> = evaluations.iter().map(|e| (e.query_id.as_str(), e)).collect();
    let trace_ids: HashSet<&str> = traces.iter().map(|t| t.query_id.as_str()).collect();
    if let Some(extra) = evaluations.iter().find(|e| !trace_ids.contains(e.query_id.as_str())) {
        return Err(EvalError::UnknownQuery(extra.query_id.clone()));
    }
    let aligned = traces
        .iter()
        .map(|t| {
            by_id
                .get(t.query_id.as_str())
                .map(|e| (*e).clone())
                .ok_or_else(|| EvalError::MissingEvaluation(t.query_id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport {
        summary: ReportRow::from_evaluations(method, &aligned),
        queries: aligned,
    })
}

impl EvalReport {
    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => {
                let mut s = serde_json::to_string_pretty(self).expect("report serializes");
                s.push('\n');
                s
            }
            other => render_table(std::slice::from_ref(&self.summary), other),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let report: EvalReport = serde_json::from_str(text).map_err(|e| EvalError::Malformed(e.to_string()))?;
        report.summary.reconcile()?;
        Ok(report)
    }
}

const TSV_HEADER: &str = "method\tqueries\tsup\tnei\tref\tacc\tplus\tequal\tminus\tunevaluated_verdicts\tunevaluated_preferences";

/// Render rows as a TSV or Markdown table (JSON renders as an array of rows).
pub fn render_table(rows: &[ReportRow], format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Json => {
            out = serde_json::to_string_pretty(rows).expect("rows serialize");
            out.push('\n');
        }
        ReportFormat::Tsv => {
            out.push_str(TSV_HEADER);
            out.push('\n');
            for r in rows {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{:.3}\t{}\t{}\t{}\t{}\t{}",
                    r.method.replace(['\t', '\n'], " "),
                    r.queries,
                    r.sup,
                    r.nei,
                    r.refutes,
                    r.accuracy,
                    r.plus,
                    r.equal,
                    r.minus,
                    r.unevaluated_verdicts,
                    r.unevaluated_preferences
                );
            }
        }
        ReportFormat::Markdown => {
            out.push_str("| Method | Queries | Sup | NEI | Ref | Acc. | + | = | − | Unevaluated |\n");
            out.push_str("|---|---:|---:|---:|---:|---:|---:|---:|---:|---:|\n");
            for r in rows {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} | {:.3} | {} | {} | {} | {} |",
                    r.method.replace('|', "\\|"),
                    r.queries,
                    r.sup,
                    r.nei,
                    r.refutes,
                    r.accuracy,
                    r.plus,
                    r.equal,
                    r.minus,
                    r.unevaluated_verdicts.max(r.unevaluated_preferences)
                );
            }
        }
    }
    out
}

/// Parse a TSV table written by [`render_table`]. Accuracy is recomputed from
/// the counts and checked against the printed value.
pub fn parse_table_tsv(text: &str) -> Result<Vec<ReportRow>, EvalError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h == TSV_HEADER => {}
        _ => return Err(EvalError::Malformed("missing or unexpected TSV header".into())),
    }
    lines
        .map(|line| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 11 {
                return Err(EvalError::Malformed(format!("expected 11 columns, got {}", cols.len())));
            }
            let num = |i: usize| {
                cols[i]
                    .parse::<usize>()
                    .map_err(|e| EvalError::Malformed(format!("column {}: {e}", i + 1)))
            };
            let (sup, nei, refutes) = (num(2)?, num(3)?, num(4)?);
            let judged = sup + nei + refutes;
            let row = ReportRow {
                method: cols[0].to_string(),
                queries: num(1)?,
                sup,
                nei,
                refutes,
                accuracy: if judged == 0 { 0.0 } else { sup as f64 / judged as f64 },
                plus: num(6)?,
                equal: num(7)?,
                minus: num(8)?,
                unevaluated_verdicts: num(9)?,
                unevaluated_preferences: num(10)?,
            };
            if format!("{:.3}", row.accuracy) != cols[5] {
                return Err(EvalError::Malformed(format!(
                    "{}: printed accuracy {} disagrees with counts",
                    row.method, cols[5]
                )));
            }
            row.reconcile()?;
            Ok(row)
        })
        .collect()
}
