use groundgen::corpus::{split_sentences, tokenize, Document, Query, TokenSequence, Tokenizer};
use groundgen::evaluation::{accuracy, parse_table_tsv, render_table, PreferenceOutcome, QueryEvaluation, ReportFormat, ReportRow, Verdict};
use groundgen::evolution::{evolve, EvolutionConfig};
use groundgen::fitness::{grounding_score, rouge_l_f1, rouge_n_f1, GroundingMode, GroundingReference, LexicalScorer, RougeVariant};
use groundgen::retrieval::Seed;
use groundgen::rewriter::{ExtractiveMock, NoisyMock, RewriteRequest};
use groundgen::service::RetryPolicy;
use proptest::prelude::*;

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["owl", "mouse", "barn", "night", "hunt", "the", "grain"]), 0..16)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

fn passage() -> impl Strategy<Value = String> {
    prop::collection::vec(words().prop_filter("non-empty", |w| !w.is_empty()), 1..4)
        .prop_map(|sentences| sentences.iter().map(|s| format!("{}.", s.join(" "))).collect::<Vec<_>>().join(" "))
}

fn verdict() -> impl Strategy<Value = Verdict> {
    prop_oneof![Just(Verdict::Supports), Just(Verdict::NotEnoughInfo), Just(Verdict::Refutes)]
}

fn preference() -> impl Strategy<Value = Option<PreferenceOutcome>> {
    prop_oneof![
        Just(None),
        Just(Some(PreferenceOutcome::ModelPreferred)),
        Just(Some(PreferenceOutcome::Equivalent)),
        Just(Some(PreferenceOutcome::BaselinePreferred)),
    ]
}

proptest! {
    #[test]
    fn rouge_is_symmetric_and_bounded(a in words(), b in words()) {
        let (a, b) = (TokenSequence::new(a), TokenSequence::new(b));
        for n in [1, 2, 3] {
            let f = rouge_n_f1(&a, &b, n);
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert_eq!(f, rouge_n_f1(&b, &a, n));
        }
        let l = rouge_l_f1(&a, &b);
        prop_assert_eq!(l, rouge_l_f1(&b, &a));
        prop_assert!(l <= rouge_n_f1(&a, &b, 1));
    }

    #[test]
    fn a_seed_is_fully_grounded_in_itself(seeds in prop::collection::vec(passage(), 1..4), pick in any::<prop::sample::Index>()) {
        let docs: Vec<Document> = seeds.iter().enumerate().map(|(i, t)| Document::new(format!("d{i}"), t.clone())).collect();
        let chosen = &seeds[pick.index(seeds.len())];
        for mode in [GroundingMode::MaxOverSeeds, GroundingMode::UnionPrecisionF1] {
            prop_assert_eq!(grounding_score(chosen, &docs, RougeVariant::Rouge1, mode).unwrap(), 1.0);
        }
    }

    #[test]
    fn extractive_crossover_is_union_grounded(a in passage(), b in passage(), q in words()) {
        let query = q.join(" ");
        let out = ExtractiveMock::output(&RewriteRequest::crossover(query, vec![a.clone(), b.clone()]));
        prop_assume!(!tokenize(&out).is_empty());
        let has_bigrams = split_sentences(&out).iter().any(|s| tokenize(s).len() >= 2);
        for variant in [RougeVariant::Rouge1, RougeVariant::Rouge2, RougeVariant::RougeL] {
            if variant == RougeVariant::Rouge2 && !has_bigrams {
                continue;
            }
            let r = GroundingReference::from_texts([a.as_str(), b.as_str()], variant, GroundingMode::UnionPrecisionF1, Tokenizer::default()).unwrap();
            prop_assert_eq!(r.union_precision(&out), 1.0);
        }
        for s in split_sentences(&out) {
            prop_assert!(split_sentences(&a).contains(&s) || split_sentences(&b).contains(&s));
        }
    }

    #[test]
    fn accuracy_ignores_order(mut v in prop::collection::vec(verdict(), 1..60), seed in any::<u64>()) {
        let before = accuracy(&v).unwrap();
        let k = (seed as usize) % v.len();
        v.rotate_left(k);
        v.reverse();
        prop_assert_eq!(before, accuracy(&v).unwrap());
    }

    #[test]
    fn reports_reconcile_and_round_trip(items in prop::collection::vec((prop::option::of(verdict()), preference()), 1..80)) {
        let evals: Vec<QueryEvaluation> = items.iter().enumerate().map(|(i, (v, p))| QueryEvaluation {
            query_id: format!("q{i}"),
            verdict: *v,
            preference: *p,
            model_score: None,
            baseline_score: None,
            errors: vec![],
        }).collect();
        let row = ReportRow::from_evaluations("method", &evals);
        row.reconcile().unwrap();
        prop_assert_eq!(row.sup + row.nei + row.refutes + row.unevaluated_verdicts, evals.len());
        prop_assert_eq!(row.plus + row.equal + row.minus + row.unevaluated_preferences, evals.len());
        let parsed = parse_table_tsv(&render_table(std::slice::from_ref(&row), ReportFormat::Tsv)).unwrap();
        let via_json: Vec<ReportRow> = serde_json::from_str(&render_table(std::slice::from_ref(&row), ReportFormat::Json)).unwrap();
        prop_assert_eq!(&parsed, &via_json);
    }

    #[test]
    fn noisy_mock_is_a_pure_function(text in passage(), p in 0.0f64..=1.0, seed in any::<u64>()) {
        let req = RewriteRequest::random_mutation(text);
        let a = groundgen::rewriter::noisy_mock_rewrite(&req, p, seed);
        prop_assert_eq!(&a, &groundgen::rewriter::noisy_mock_rewrite(&req, p, seed));
        prop_assert_eq!(tokenize(&a).len(), tokenize(&ExtractiveMock::output(&req)).len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn best_fitness_never_drops(
        seeds in prop::collection::vec(passage(), 1..5),
        q in words().prop_filter("non-empty", |w| !w.is_empty()),
        lambda in 0.0f64..3.0,
        offspring in 2usize..8,
        cap in 2usize..6,
        rng_seed in any::<u64>(),
    ) {
        let seeds: Vec<Seed> = seeds.into_iter().enumerate().map(|(i, text)| Seed { doc_id: format!("d{i}"), rank: i + 1, score: 0.0, text }).collect();
        let config = EvolutionConfig {
            lambda,
            offspring_per_iteration: offspring,
            population_cap: cap,
            max_iterations: 4,
            rng_seed,
            retry: RetryPolicy::none(),
            ..EvolutionConfig::default()
        };
        let scorer = LexicalScorer::new("lex").with_jitter(0.2, rng_seed);
        let trace = evolve(&Query::new("q", q.join(" ")), &seeds, &NoisyMock::new(0.3, rng_seed), &scorer, &config).unwrap();
        prop_assert!(trace.generations.len() <= config.max_iterations + 1);
        let best: Vec<f64> = trace.generations.iter().map(|g| g.best_fitness().unwrap()).collect();
        prop_assert!(best.windows(2).all(|w| w[1] >= w[0]), "{:?}", best);
        prop_assert_eq!(&trace.final_answer, &trace.last().best().unwrap().text);
        for g in &trace.generations {
            prop_assert!(g.population.len() <= cap.max(seeds.len()));
        }
    }
}
