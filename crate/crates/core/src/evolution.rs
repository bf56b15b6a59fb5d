//! The generational loop.
//!
//! Generation 0 is the seed documents, scored like everything else. Each
//! iteration takes the top `parent_count` candidates as parents, spawns
//! `offspring_per_iteration` children through the genetic operators, scores
//! them, and keeps the best `population_cap` of parents' generation plus
//! children. The run stops when the ordered ids of the top `top_d`
//! candidates are unchanged from the previous generation, or after
//! `max_iterations` iterations.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::corpus::{Query, Tokenizer};
use crate::fitness::{fitness_batch, rank_order, FitnessError, GroundingMode, GroundingReference, RelevanceScorer, RougeVariant};
use crate::retrieval::Seed;
use crate::rewriter::{Candidate, GeneticOperators, Operator, RewriteError, RewriterBackend};
use crate::service::RetryPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionConfig {
    pub lambda: f64,
    pub variant: RougeVariant,
    pub grounding_mode: GroundingMode,
    pub offspring_per_iteration: usize,
    pub parent_count: usize,
    pub population_cap: usize,
    pub top_d: usize,
    pub max_iterations: usize,
    pub rng_seed: u64,
    pub parallelism: usize,
    pub retry: RetryPolicy,
    pub tokenizer: Tokenizer,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            variant: RougeVariant::Rouge1,
            grounding_mode: GroundingMode::MaxOverSeeds,
            offspring_per_iteration: 12,
            parent_count: 2,
            population_cap: 10,
            top_d: 2,
            max_iterations: 8,
            rng_seed: 0,
            parallelism: 4,
            retry: RetryPolicy::default(),
            tokenizer: Tokenizer::default(),
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<(), EvolutionError> {
        let bad = |msg: String| Err(EvolutionError::Config(msg));
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.parent_count == 0 {
            return bad("parent_count must be >= 1".into());
        }
        if self.offspring_per_iteration < self.parent_count {
            return bad(format!(
                "offspring_per_iteration ({}) must be >= parent_count ({})",
                self.offspring_per_iteration, self.parent_count
            ));
        }
        if self.top_d == 0 || self.top_d > self.population_cap {
            return bad(format!(
                "top_d ({}) must be in 1..=population_cap ({})",
                self.top_d, self.population_cap
            ));
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be >= 1".into());
        }
        if self.parallelism == 0 {
            return bad("parallelism must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub index: usize,
    pub population: Vec<Candidate>,
    pub top_d_ids: Vec<String>,
}

impl Generation {
    fn new(index: usize, population: Vec<Candidate>, top_d: usize) -> Self {
        let top_d_ids = population.iter().take(top_d).map(|c| c.id.clone()).collect();
        Self {
            index,
            population,
            top_d_ids,
        }
    }

    pub fn best(&self) -> Option<&Candidate> {
        self.population.first()
    }

    pub fn best_fitness(&self) -> Option<f64> {
        self.best().and_then(|c| c.fitness).map(|f| f.combined)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Converged,
    IterationCap,
    /// Run stopped on an error; only found in partial traces.
    Aborted,
}

impl std::fmt::Display for TerminationReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TerminationReason::Converged => "converged",
            TerminationReason::IterationCap => "iteration_cap",
            TerminationReason::Aborted => "aborted",
        })
    }
}

/// Full record of one run, serialized one file per query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionTrace {
    pub query_id: String,
    pub query: String,
    /// Identifier of the relevance scorer used inside fitness.
    pub scorer_id: String,
    pub config: EvolutionConfig,
    pub seeds: Vec<Seed>,
    pub generations: Vec<Generation>,
    pub final_answer: String,
    pub termination_reason: TerminationReason,
}

impl EvolutionTrace {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("trace serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn last(&self) -> &Generation {
        self.generations.last().expect("trace is never empty")
    }

    /// Top seed by rerank position.
    pub fn top_seed(&self) -> Option<&Seed> {
        self.seeds.iter().min_by_key(|s| s.rank)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvolutionError {
    #[error("invalid evolution config: {0}")]
    Config(String),
    #[error("evolution needs at least one seed")]
    NoSeeds,
    #[error("iteration {iteration} produced no offspring")]
    Starvation { iteration: usize, partial: Box<EvolutionTrace> },
    #[error("fitness scoring failed at iteration {iteration}: {source}")]
    Scoring {
        iteration: usize,
        #[source]
        source: FitnessError,
        partial: Option<Box<EvolutionTrace>>,
    },
}

impl EvolutionError {
    pub fn partial_trace(&self) -> Option<&EvolutionTrace> {
        match self {
            EvolutionError::Starvation { partial, .. } => Some(partial),
            EvolutionError::Scoring { partial, .. } => partial.as_deref(),
            _ => None,
        }
    }
}

/// True iff the ordered ids of the first `top_d` candidates match.
pub fn has_converged(prev: &Generation, curr: &Generation, top_d: usize) -> bool {
    let a = prev.population.iter().take(top_d).map(|c| &c.id);
    let b = curr.population.iter().take(top_d).map(|c| &c.id);
    a.eq(b)
}

/// Elitist (μ + λ) selection: previous population plus scored offspring,
/// sorted by [`rank_order`], deduplicated by text (the best-ranked copy
/// stays, so an unchanged text keeps its original id), truncated to
/// `population_cap`.
pub fn select_survivors(previous: &Generation, offspring: Vec<Candidate>, population_cap: usize, top_d: usize) -> Generation {
    let mut pool: Vec<Candidate> = previous.population.iter().cloned().chain(offspring).collect();
    sort_population(&mut pool);
    let mut seen = HashSet::new();
    pool.retain(|c| seen.insert(c.text.clone()));
    pool.truncate(population_cap);
    Generation::new(previous.index + 1, pool, top_d)
}

fn sort_population(pool: &mut [Candidate]) {
    pool.sort_by(|a, b| {
        let fa = a.fitness.as_ref().expect("candidate scored before selection");
        let fb = b.fitness.as_ref().expect("candidate scored before selection");
        rank_order((fa, &a.id), (fb, &b.id))
    });
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotPlan {
    pub operator: Operator,
    /// Indices into the parent list, in the order they are passed.
    pub parents: Vec<usize>,
}

/// Operator assignment for one iteration.
///
/// With two or more parents a third of the slots are crossovers over all
/// parents (rotated so each parent leads in turn). The remaining slots are
/// split into contiguous per-parent blocks, each block half random mutation
/// (rounded up) then half controlled mutation. Twelve slots over two parents
/// gives 2+2 mutations per parent and 4 crossovers; a single parent gets 6+6.
pub fn plan_offspring(parent_count: usize, slots: usize) -> Vec<SlotPlan> {
    let crossovers = if parent_count >= 2 { slots / 3 } else { 0 };
    let mutations = slots - crossovers;
    let mut plan = Vec::with_capacity(slots);
    for p in 0..parent_count {
        let start = p * mutations / parent_count;
        let end = (p + 1) * mutations / parent_count;
        let block = end - start;
        let randoms = block.div_ceil(2);
        for i in 0..block {
            plan.push(SlotPlan {
                operator: if i < randoms {
                    Operator::RandomMutation
                } else {
                    Operator::ControlledMutation
                },
                parents: vec![p],
            });
        }
    }
    for k in 0..crossovers {
        plan.push(SlotPlan {
            operator: Operator::Crossover,
            parents: (0..parent_count).map(|i| (i + k) % parent_count).collect(),
        });
    }
    plan
}

pub fn candidate_id(generation: usize, slot: usize) -> String {
    format!("g{generation:03}-{slot:03}")
}

fn slot_variation(rng_seed: u64, generation: usize, slot: usize) -> u64 {
    let mut h = DefaultHasher::new();
    (rng_seed, generation as u64, slot as u64).hash(&mut h);
    h.finish()
}

/// Children of `parents` for generation `generation`, in slot order. Failed
/// slots are logged and skipped.
pub fn spawn_offspring(
    parents: &[&Candidate],
    query: &Query,
    backend: &dyn RewriterBackend,
    config: &EvolutionConfig,
    generation: usize,
) -> Result<Vec<Candidate>, EvolutionError> {
    if parents.is_empty() {
        return Err(EvolutionError::NoSeeds);
    }
    let ops = GeneticOperators::new(backend, config.retry);
    let plan = plan_offspring(parents.len(), config.offspring_per_iteration);
    let run_slot = |slot: usize| -> Result<Candidate, RewriteError> {
        let item = &plan[slot];
        let id = candidate_id(generation, slot);
        let variation = slot_variation(config.rng_seed, generation, slot);
        match item.operator {
            Operator::RandomMutation => ops.random_mutate(parents[item.parents[0]], id, variation),
            Operator::ControlledMutation => ops.controlled_mutate(&query.text, parents[item.parents[0]], id, variation),
            Operator::Crossover => {
                let chosen: Vec<&Candidate> = item.parents.iter().map(|&i| parents[i]).collect();
                ops.crossover(&query.text, &chosen, id, variation)
            }
        }
    };

    let results: Vec<Result<Candidate, RewriteError>> = if config.parallelism <= 1 || plan.len() <= 1 {
        (0..plan.len()).map(run_slot).collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<Candidate, RewriteError>>>> = Mutex::new((0..plan.len()).map(|_| None).collect());
        thread::scope(|scope| {
            for _ in 0..config.parallelism.min(plan.len()) {
                scope.spawn(|| loop {
                    let slot = next.fetch_add(1, AtomicOrdering::Relaxed);
                    if slot >= plan.len() {
                        break;
                    }
                    let r = run_slot(slot);
                    slots.lock().expect("slot table poisoned")[slot] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .expect("slot table poisoned")
            .into_iter()
            .map(|r| r.expect("every slot filled"))
            .collect()
    };

    let mut children = Vec::with_capacity(results.len());
    for (slot, r) in results.into_iter().enumerate() {
        match r {
            Ok(child) => children.push(child),
            Err(e) => tracing::warn!(generation, slot, error = %e, "offspring slot failed"),
        }
    }
    Ok(children)
}

/// Run the loop for one query.
pub fn evolve(
    query: &Query,
    seeds: &[Seed],
    backend: &dyn RewriterBackend,
    scorer: &dyn RelevanceScorer,
    config: &EvolutionConfig,
) -> Result<EvolutionTrace, EvolutionError> {
    config.validate()?;
    if seeds.is_empty() {
        return Err(EvolutionError::NoSeeds);
    }
    let reference = GroundingReference::from_texts(
        seeds.iter().map(|s| s.text.as_str()),
        config.variant,
        config.grounding_mode,
        config.tokenizer,
    )
    .map_err(|source| EvolutionError::Scoring {
        iteration: 0,
        source,
        partial: None,
    })?;

    let score = |candidates: &mut [Candidate]| -> Result<(), FitnessError> {
        let texts: Vec<&str> = candidates.iter().map(|c| c.text.as_str()).collect();
        let scores = fitness_batch(&query.text, &texts, &reference, scorer, config.lambda)?;
        for (c, f) in candidates.iter_mut().zip(scores) {
            c.fitness = Some(f);
        }
        Ok(())
    };

    let mut ordered: Vec<&Seed> = seeds.iter().collect();
    ordered.sort_by_key(|s| s.rank);
    let mut population: Vec<Candidate> = ordered
        .iter()
        .enumerate()
        .map(|(i, s)| Candidate::seed(candidate_id(0, i), s.text.clone()))
        .collect();
    score(&mut population).map_err(|source| EvolutionError::Scoring {
        iteration: 0,
        source,
        partial: None,
    })?;
    sort_population(&mut population);
    population.truncate(config.population_cap);

    let mut trace = EvolutionTrace {
        query_id: query.query_id.clone(),
        query: query.text.clone(),
        scorer_id: scorer.id().to_string(),
        config: config.clone(),
        seeds: seeds.to_vec(),
        generations: vec![Generation::new(0, population, config.top_d)],
        final_answer: String::new(),
        termination_reason: TerminationReason::IterationCap,
    };

    for iteration in 1..=config.max_iterations {
        let prev = trace.last();
        let parents: Vec<&Candidate> = prev.population.iter().take(config.parent_count).collect();
        let mut children = spawn_offspring(&parents, query, backend, config, iteration)?;
        if children.is_empty() {
            return Err(EvolutionError::Starvation {
                iteration,
                partial: Box::new(finish(trace, TerminationReason::Aborted)),
            });
        }
        if let Err(source) = score(&mut children) {
            return Err(EvolutionError::Scoring {
                iteration,
                source,
                partial: Some(Box::new(finish(trace, TerminationReason::Aborted))),
            });
        }
        let next = select_survivors(prev, children, config.population_cap, config.top_d);
        let converged = has_converged(prev, &next, config.top_d);
        tracing::debug!(
            query_id = %query.query_id,
            iteration,
            best = next.best_fitness().unwrap_or(f64::NAN),
            converged,
            "generation complete"
        );
        trace.generations.push(next);
        if converged {
            return Ok(finish(trace, TerminationReason::Converged));
        }
    }
    Ok(finish(trace, TerminationReason::IterationCap))
}

fn finish(mut trace: EvolutionTrace, reason: TerminationReason) -> EvolutionTrace {
    trace.final_answer = trace.last().best().map(|c| c.text.clone()).unwrap_or_default();
    trace.termination_reason = reason;
    trace
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitness::{FitnessScore, LexicalScorer};
    use crate::rewriter::{ExtractiveMock, IdentityMock, NoisyMock, RewriteRequest};
    use crate::service::ServiceError;
    use std::collections::{HashMap, HashSet};

    fn scored(id: &str, combined: f64) -> Candidate {
        let mut c = Candidate::seed(id, id);
        c.fitness = Some(FitnessScore::new(combined, 0.0, 1.0));
        c
    }

    fn generation(cands: Vec<Candidate>) -> Generation {
        Generation::new(0, cands, 2)
    }

    fn seeds() -> Vec<Seed> {
        [
            "Owls hunt mice at night. Owls have silent feathers.",
            "Barn owls nest in old barns. They hunt voles.",
            "Mice eat grain. Farmers keep cats.",
        ]
        .iter()
        .enumerate()
        .map(|(i, t)| Seed {
            doc_id: format!("d{i}"),
            rank: i + 1,
            score: 1.0 - i as f64 * 0.1,
            text: t.to_string(),
        })
        .collect()
    }

    fn quick_config() -> EvolutionConfig {
        EvolutionConfig {
            retry: RetryPolicy::none(),
            ..EvolutionConfig::default()
        }
    }

    #[test]
    fn default_mix_for_two_parents() {
        let plan = plan_offspring(2, 12);
        assert_eq!(plan.len(), 12);
        let mut hist: HashMap<Operator, usize> = HashMap::new();
        for s in &plan {
            *hist.entry(s.operator).or_default() += 1;
        }
        assert_eq!(hist[&Operator::RandomMutation], 4);
        assert_eq!(hist[&Operator::ControlledMutation], 4);
        assert_eq!(hist[&Operator::Crossover], 4);
        for p in 0..2 {
            let per: Vec<_> = plan.iter().filter(|s| s.parents == vec![p]).map(|s| s.operator).collect();
            assert_eq!(
                per,
                [
                    Operator::RandomMutation,
                    Operator::RandomMutation,
                    Operator::ControlledMutation,
                    Operator::ControlledMutation
                ]
            );
        }
    }

    #[test]
    fn single_parent_gets_no_crossover() {
        let plan = plan_offspring(1, 12);
        let randoms = plan.iter().filter(|s| s.operator == Operator::RandomMutation).count();
        let controlled = plan.iter().filter(|s| s.operator == Operator::ControlledMutation).count();
        assert_eq!((randoms, controlled, plan.len()), (6, 6, 12));
    }

    #[test]
    fn spawn_produces_full_batch() {
        let a = Candidate::seed("a", "Owls hunt mice. Owls fly.");
        let b = Candidate::seed("b", "Owls nest. Mice hide.");
        let children = spawn_offspring(&[&a, &b], &Query::new("q", "owls mice"), &ExtractiveMock, &quick_config(), 1).unwrap();
        assert_eq!(children.len(), 12);
        let crossovers = children.iter().filter(|c| c.lineage.operator == Some(Operator::Crossover)).count();
        assert_eq!(crossovers, 4);
        assert!(children.iter().all(|c| c.generation() == 1));
        let ids: HashSet<_> = children.iter().map(|c| c.id.clone()).collect();
        assert_eq!(ids.len(), 12);
    }

    struct FailSome(HashSet<u64>);

    impl RewriterBackend for FailSome {
        fn rewrite(&self, request: &RewriteRequest) -> Result<String, ServiceError> {
            if self.0.contains(&request.variation) {
                Err(ServiceError::Transport("refused".into()))
            } else {
                ExtractiveMock.rewrite(request)
            }
        }
    }

    #[test]
    fn failed_slots_shrink_the_batch() {
        let config = quick_config();
        let failing: HashSet<u64> = [0, 5, 11].iter().map(|&s| slot_variation(config.rng_seed, 1, s)).collect();
        let a = Candidate::seed("a", "Owls hunt mice.");
        let b = Candidate::seed("b", "Owls nest.");
        let children = spawn_offspring(&[&a, &b], &Query::new("q", "owls"), &FailSome(failing), &config, 1).unwrap();
        assert_eq!(children.len(), 9);
        let ids: Vec<_> = children.iter().map(|c| c.id.as_str()).collect();
        assert!(!ids.contains(&"g001-005"));
    }

    #[test]
    fn convergence_rule() {
        let g = |ids: &[&str]| generation(ids.iter().map(|i| scored(i, 1.0)).collect());
        assert!(has_converged(&g(&["A", "B"]), &g(&["A", "B"]), 2));
        assert!(!has_converged(&g(&["A", "B"]), &g(&["B", "A"]), 2));
        assert!(!has_converged(&g(&["A", "B"]), &g(&["A", "C"]), 2));
        assert!(has_converged(&g(&["A", "B", "X"]), &g(&["A", "B", "Y"]), 2));
    }

    #[test]
    fn weak_offspring_leave_population_unchanged() {
        let prev = generation(vec![scored("a", 0.9), scored("b", 0.8)]);
        let next = select_survivors(&prev, vec![scored("x", 0.1), scored("y", 0.2)], 2, 2);
        assert_eq!(next.population, prev.population);
        assert_eq!(next.index, 1);
    }

    #[test]
    fn strong_offspring_takes_rank_one() {
        let prev = generation(vec![scored("a", 0.9), scored("b", 0.8)]);
        let next = select_survivors(&prev, vec![scored("x", 1.5)], 10, 2);
        assert_eq!(next.population[0].id, "x");
        assert_eq!(next.population.len(), 3);
        assert_eq!(next.top_d_ids, ["x", "a"]);
    }

    #[test]
    fn iteration_cap_of_one_gives_two_generations() {
        let config = EvolutionConfig {
            max_iterations: 1,
            ..quick_config()
        };
        let scorer = LexicalScorer::new("lex");
        let trace = evolve(&Query::new("q1", "owls hunt mice"), &seeds(), &NoisyMock::new(0.5, 1), &scorer, &config).unwrap();
        assert_eq!(trace.generations.len(), 2);
    }

    #[test]
    fn identity_backend_converges_immediately() {
        let scorer = LexicalScorer::new("lex");
        let trace = evolve(&Query::new("q1", "owls hunt mice"), &seeds(), &IdentityMock, &scorer, &quick_config()).unwrap();
        assert_eq!(trace.termination_reason, TerminationReason::Converged);
        assert_eq!(trace.generations.len(), 2);
        assert_eq!(trace.final_answer, trace.generations[0].population[0].text);
    }

    #[test]
    fn runs_are_reproducible() {
        let scorer = LexicalScorer::new("lex").with_jitter(0.1, 3);
        let q = Query::new("q1", "owls hunt mice");
        let a = evolve(&q, &seeds(), &NoisyMock::new(0.3, 5), &scorer, &quick_config()).unwrap();
        let b = evolve(&q, &seeds(), &NoisyMock::new(0.3, 5), &scorer, &quick_config()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(EvolutionTrace::from_json(&a.to_json()).unwrap(), a);
    }

    struct Dead;
    impl RewriterBackend for Dead {
        fn rewrite(&self, _: &RewriteRequest) -> Result<String, ServiceError> {
            Err(ServiceError::Transport("no route".into()))
        }
    }

    #[test]
    fn dead_backend_starves() {
        let scorer = LexicalScorer::new("lex");
        let err = evolve(&Query::new("q1", "owls"), &seeds(), &Dead, &scorer, &quick_config()).unwrap_err();
        assert!(matches!(err, EvolutionError::Starvation { iteration: 1, .. }));
        let partial = err.partial_trace().unwrap();
        assert_eq!(partial.generations.len(), 1);
        assert_eq!(partial.termination_reason, TerminationReason::Aborted);
    }

    #[test]
    fn config_validation() {
        let bad = EvolutionConfig {
            top_d: 11,
            ..EvolutionConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EvolutionConfig {
            parent_count: 13,
            ..EvolutionConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(EvolutionConfig::default().validate().is_ok());
    }
}
