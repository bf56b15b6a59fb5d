use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use groundgen::corpus::{ingest_corpus, read_queries, Corpus, Query};
use groundgen::evaluation::{
    build_report, evaluate_trace, render_table, EvalReport, EvalSettings, QueryEvaluation, ReportFormat, ReportRow,
};
use groundgen::retrieval::{seed_population, InvertedIndex};
use groundgen::{evolve, EvolutionError, EvolutionTrace};
use serde::Serialize;
use tracing::{error, info, warn};

use crate::config::{ConfigError, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| failed(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| failed(format!("cannot write {}: {e}", path.display())))
}

/// Apply `f` to every item with at most `workers` threads; results keep the
/// input order.
fn bounded_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    thread::scope(|scope| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("every slot filled")).collect()
}

fn file_name_for(query_id: &str) -> String {
    let safe: String = query_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect();
    format!("{safe}.json")
}

fn load_corpus(config: &RunConfig) -> Result<Corpus, CliError> {
    let path = config.corpus_path()?;
    let docs = ingest_corpus(path, config.corpus_format()?).map_err(failed)?;
    Corpus::new(docs).map_err(failed)
}

pub fn cmd_index(config: &RunConfig) -> Result<(), CliError> {
    let corpus = load_corpus(config)?;
    let index = InvertedIndex::build(corpus.docs(), config.evolution.tokenizer).map_err(failed)?;
    let path = config.index_path();
    write_file(&path, &index.to_json())?;
    info!(path = %path.display(), doc_count = index.doc_count(), "index written");
    println!(
        "doc_count={} avg_doc_length={:.2} terms={} index={}",
        index.doc_count(),
        index.avg_doc_length(),
        index.term_count(),
        path.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct QueryStatus {
    query_id: String,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    termination_reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    generations: Option<usize>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    short_seed_pool: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn clear_json_files(dir: &Path) -> Result<(), CliError> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in fs::read_dir(dir).map_err(failed)? {
        let path = entry.map_err(failed)?.path();
        if path.extension().is_some_and(|e| e == "json") {
            fs::remove_file(&path).map_err(|e| failed(format!("cannot remove {}: {e}", path.display())))?;
        }
    }
    Ok(())
}

pub fn cmd_run(config: &RunConfig) -> Result<(), CliError> {
    let corpus = load_corpus(config)?;
    let queries = read_queries(config.queries_path()?).map_err(failed)?;
    let index_path = config.index_path();
    let index = InvertedIndex::load(&index_path).map_err(|e| failed(format!("{e} (run `groundgen index` first)")))?;
    if index.doc_count() != corpus.len() {
        return Err(failed(format!(
            "index {} covers {} documents but the corpus has {}; rebuild it with `groundgen index`",
            index_path.display(),
            index.doc_count(),
            corpus.len()
        )));
    }
    let backend = config.build_backend();
    let reranker = config.build_scorer(config.reranker());
    let scorer = config.build_scorer(&config.scorer);
    let traces_dir = config.traces_dir();
    let failed_dir = config.output_dir.join("failed");
    clear_json_files(&traces_dir)?;
    clear_json_files(&failed_dir)?;

    let statuses = bounded_map(&queries, config.parallelism, |query: &Query| {
        let mut status = QueryStatus {
            query_id: query.query_id.clone(),
            status: "failed",
            termination_reason: None,
            generations: None,
            short_seed_pool: false,
            error: None,
        };
        let pool = match seed_population(
            &index,
            &corpus,
            query,
            reranker.as_ref(),
            config.retrieval.first_k,
            config.retrieval.seed_count,
            config.retrieval.bm25(),
        ) {
            Ok(pool) => pool,
            Err(e) => {
                error!(query_id = %query.query_id, error = %e, "seed retrieval failed");
                status.error = Some(format!("retrieval: {e}"));
                return Ok(status);
            }
        };
        status.short_seed_pool = pool.short;
        if pool.seeds.is_empty() {
            warn!(query_id = %query.query_id, "no document matches the query");
            status.error = Some("retrieval: no matching documents".into());
            return Ok(status);
        }
        match evolve(query, &pool.seeds, backend.as_ref(), scorer.as_ref(), &config.evolution) {
            Ok(trace) => {
                write_file(&traces_dir.join(file_name_for(&query.query_id)), &trace.to_json())?;
                info!(
                    query_id = %query.query_id,
                    termination_reason = %trace.termination_reason,
                    generations = trace.generations.len(),
                    "query finished"
                );
                status.status = "ok";
                status.termination_reason = Some(trace.termination_reason.to_string());
                status.generations = Some(trace.generations.len());
            }
            Err(e) => {
                error!(query_id = %query.query_id, error = %e, "evolution failed");
                if let Some(partial) = e.partial_trace() {
                    write_file(&failed_dir.join(file_name_for(&query.query_id)), &partial.to_json())?;
                    status.generations = Some(partial.generations.len());
                    status.termination_reason = Some(partial.termination_reason.to_string());
                }
                status.error = Some(describe(&e));
            }
        }
        Ok(status)
    })
    .into_iter()
    .collect::<Result<Vec<_>, CliError>>()?;

    let summary = serde_json::to_string_pretty(&serde_json::json!({ "queries": statuses })).expect("summary serializes");
    write_file(&config.output_dir.join("run_summary.json"), &(summary + "\n"))?;
    let bad: Vec<&str> = statuses.iter().filter(|s| s.status != "ok").map(|s| s.query_id.as_str()).collect();
    println!(
        "queries={} ok={} failed={} traces={}",
        statuses.len(),
        statuses.len() - bad.len(),
        bad.len(),
        traces_dir.display()
    );
    if bad.is_empty() {
        Ok(())
    } else {
        Err(failed(format!("{} queries failed: {}", bad.len(), bad.join(", "))))
    }
}

fn describe(e: &EvolutionError) -> String {
    match e {
        EvolutionError::Scoring { iteration, source, .. } => format!("scoring failed at iteration {iteration}: {source}"),
        other => other.to_string(),
    }
}

/// Read every `*.json` trace in `dir`, keyed by query id.
pub fn load_traces(dir: &Path) -> Result<BTreeMap<String, EvolutionTrace>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| failed(format!("cannot read trace directory {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut traces = BTreeMap::new();
    for path in paths {
        let text = fs::read_to_string(&path).map_err(|e| failed(format!("cannot read {}: {e}", path.display())))?;
        let trace = EvolutionTrace::from_json(&text).map_err(|e| failed(format!("{}: {e}", path.display())))?;
        if let Some(prev) = traces.insert(trace.query_id.clone(), trace) {
            return Err(failed(format!("two traces for query `{}` in {}", prev.query_id, dir.display())));
        }
    }
    if traces.is_empty() {
        return Err(failed(format!("no traces found in {}", dir.display())));
    }
    Ok(traces)
}

pub fn cmd_eval(config: &RunConfig, traces_dir: Option<&Path>) -> Result<(), CliError> {
    let dir = traces_dir.map(Path::to_path_buf).unwrap_or_else(|| config.traces_dir());
    let mut by_id = load_traces(&dir)?;
    let queries = read_queries(config.queries_path()?).map_err(failed)?;
    let known: HashSet<&str> = queries.iter().map(|q| q.query_id.as_str()).collect();
    if let Some(extra) = by_id.keys().find(|id| !known.contains(id.as_str())) {
        return Err(failed(format!("alignment error: trace for unknown query `{extra}`")));
    }
    let traces = queries
        .iter()
        .map(|q| {
            by_id
                .remove(&q.query_id)
                .ok_or_else(|| failed(format!("alignment error: no trace for query `{}`", q.query_id)))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let verifier = config.build_verifier();
    let judge = config.build_scorer(&config.judge);
    let settings = EvalSettings {
        epsilon: config.evaluation.epsilon,
        retry: config.evaluation.retry,
    };
    let evaluations: Vec<QueryEvaluation> = bounded_map(&traces, config.parallelism, |t| {
        let e = evaluate_trace(t, verifier.as_ref(), judge.as_ref(), settings);
        for msg in &e.errors {
            warn!(query_id = %e.query_id, error = %msg, "query left unevaluated");
        }
        e
    });
    let report = build_report(config.evaluation.method.clone(), &traces, &evaluations).map_err(failed)?;
    report.summary.reconcile().map_err(failed)?;

    let out = config.eval_dir();
    for format in [ReportFormat::Json, ReportFormat::Tsv, ReportFormat::Markdown] {
        write_file(&out.join(format!("report.{}", format.extension())), &report.render(format))?;
    }
    let verdicts: String = evaluations
        .iter()
        .map(|e| serde_json::to_string(e).expect("evaluation serializes") + "\n")
        .collect();
    write_file(&out.join("verdicts.jsonl"), &verdicts)?;
    print!("{}", report.render(ReportFormat::Markdown));

    let s = &report.summary;
    let unevaluated = s.unevaluated_verdicts.max(s.unevaluated_preferences);
    if unevaluated > 0 {
        return Err(failed(format!("{unevaluated} queries could not be fully evaluated; see {}", out.join("verdicts.jsonl").display())));
    }
    Ok(())
}

/// Combine report files into one table.
pub fn cmd_report(reports: &[PathBuf], format: ReportFormat, out: Option<&Path>) -> Result<(), CliError> {
    if reports.is_empty() {
        return Err(CliError::Config(ConfigError::Invalid("no report files given".into())));
    }
    let rows = reports
        .iter()
        .map(|path| {
            let text = fs::read_to_string(path).map_err(|e| failed(format!("cannot read {}: {e}", path.display())))?;
            EvalReport::from_json(&text)
                .map(|r| r.summary)
                .map_err(|e| failed(format!("{}: {e}", path.display())))
        })
        .collect::<Result<Vec<ReportRow>, _>>()?;
    let table = render_table(&rows, format);
    match out {
        Some(path) => {
            write_file(path, &table)?;
            println!("rows={} written={}", rows.len(), path.display());
        }
        None => print!("{table}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounded_map_keeps_order() {
        let items: Vec<u32> = (0..50).collect();
        assert_eq!(bounded_map(&items, 7, |x| x * 2), items.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert!(bounded_map(&Vec::<u32>::new(), 3, |x| *x).is_empty());
    }

    #[test]
    fn trace_file_names_are_safe() {
        assert_eq!(file_name_for("q1"), "q1.json");
        assert_eq!(file_name_for("a/b c"), "a_b_c.json");
    }
}
