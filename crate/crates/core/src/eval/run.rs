use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    assemble_prompt, bleu, bleu_tokens, corpus_bleu, exact_match, generate, mean_std, EvalError, GenerationRequest,
    InferenceBackend, Metric, PromptTemplate,
};
use crate::corpus::{Dataset, NoiseKind, Pool};
use crate::pipeline::SelectionPlan;
use crate::selectors::{DemonstrationSet, SelectorConfig};

/// Share of failed examples above which a run is rejected.
pub const MAX_FAILURE_RATE: f64 = 0.05;

/// What the pool's noise looked like, as far as the report is concerned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSummary {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<NoiseKind>,
    pub rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub noisy_count: usize,
    pub pool_size: usize,
}

impl NoiseSummary {
    /// From the dataset's spec when known, else from its ground-truth flags.
    pub fn of(pool: &Dataset) -> Option<Self> {
        let truth = pool.ground_truth()?;
        let noisy_count = truth.noisy_count();
        let spec = pool.noise_spec.as_ref();
        Some(Self {
            kind: spec.map(|s| s.kind),
            rate: spec.map_or(noisy_count as f64 / pool.len().max(1) as f64, |s| s.rate),
            seed: spec.map(|s| s.seed),
            noisy_count,
            pool_size: pool.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub id: String,
    pub seed: u64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub selector: String,
    pub lpr_enabled: bool,
    pub global_rank: bool,
    pub noise_spec: Option<NoiseSummary>,
    pub metric: Metric,
    /// Percent scale.
    pub mean: f64,
    pub std: f64,
    pub n_runs: usize,
    pub run_means: Vec<f64>,
    pub seeds: Vec<u64>,
    pub examples_per_run: usize,
    pub failures: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_example: Option<Vec<ExampleScore>>,
}

/// One line of the per-example sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRow {
    pub id: String,
    pub seed: u64,
    pub prediction: Option<String>,
    pub score: Option<f64>,
    pub demo_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Where demonstrations come from.
pub enum DemoSource<'a> {
    /// Select per test example, once per seed.
    Plan(&'a SelectionPlan<'a>),
    /// Precomputed sets keyed by test id; one run.
    Fixed(&'a HashMap<String, DemonstrationSet>),
}

pub struct EvalConfig<'a> {
    pub dataset: String,
    pub selector: String,
    pub lpr_enabled: bool,
    pub global_rank: bool,
    pub noise: Option<NoiseSummary>,
    pub pool: Pool<'a>,
    pub test: &'a Dataset,
    pub demos: DemoSource<'a>,
    pub template: &'a PromptTemplate,
    pub generator: &'a dyn InferenceBackend,
    pub metric: Metric,
    pub seeds: Vec<u64>,
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub rows: Vec<ExampleRow>,
}

fn example_row(cfg: &EvalConfig<'_>, plan: Option<&SelectionPlan<'_>>, idx: usize, seed: u64) -> ExampleRow {
    let test = &cfg.test.examples()[idx];
    let mut row = ExampleRow { id: test.id.clone(), seed, prediction: None, score: None, demo_ids: Vec::new(), error: None };
    let demo_ids = match (&cfg.demos, plan) {
        (DemoSource::Fixed(sets), _) => match sets.get(&test.id) {
            Some(s) => Ok(s.demo_ids.clone()),
            None => Err(EvalError::UnresolvedId(test.id.clone()).to_string()),
        },
        (DemoSource::Plan(_), Some(p)) => p.select(test).map(|s| s.set.demo_ids).map_err(|e| e.to_string()),
        (DemoSource::Plan(_), None) => unreachable!("plan source always passes a plan"),
    };
    let demo_ids = match demo_ids {
        Ok(d) => d,
        Err(e) => {
            row.error = Some(e);
            return row;
        }
    };
    row.demo_ids = demo_ids;
    let result = (|| {
        let demos = row
            .demo_ids
            .iter()
            .map(|id| cfg.pool.get(id).ok_or_else(|| EvalError::UnresolvedId(id.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let prompt = assemble_prompt(&demos, test, cfg.template);
        let req = GenerationRequest { test_id: &test.id, prompt: &prompt, max_tokens: cfg.template.max_tokens, stop: &cfg.template.stop };
        let prediction = generate(cfg.generator, &req)?;
        let refs = [test.output_text.as_str()];
        let score = match cfg.metric {
            Metric::Em => 100.0 * f64::from(exact_match(prediction.trim(), &refs)?),
            Metric::Bleu => 100.0 * bleu(&bleu_tokens(&prediction), &[bleu_tokens(refs[0])], 4)?,
        };
        Ok::<_, EvalError>((prediction, score))
    })();
    match result {
        Ok((p, s)) => {
            row.prediction = Some(p);
            row.score = Some(s);
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

fn run_once(cfg: &EvalConfig<'_>, plan: Option<&SelectionPlan<'_>>, seed: u64) -> Vec<ExampleRow> {
    let n = cfg.test.len();
    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<Option<ExampleRow>>> = Mutex::new(vec![None; n]);
    std::thread::scope(|s| {
        for _ in 0..cfg.jobs.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let row = example_row(cfg, plan, i, seed);
                rows.lock().expect("rows lock")[i] = Some(row);
            });
        }
    });
    rows.into_inner().expect("rows lock").into_iter().map(|r| r.expect("every row filled")).collect()
}

/// Selects, generates and scores every test example once per seed.
///
/// Failed examples are left out of the metric and counted; a run with more
/// than 5% failures fails the evaluation.
pub fn run_eval(cfg: &EvalConfig<'_>) -> Result<EvalOutcome, EvalError> {
    if cfg.test.is_empty() {
        return Err(EvalError::Config("test set is empty".into()));
    }
    let seeds = match cfg.demos {
        DemoSource::Plan(_) if cfg.seeds.is_empty() => return Err(EvalError::Config("at least one seed is required".into())),
        DemoSource::Plan(_) => cfg.seeds.clone(),
        DemoSource::Fixed(_) => vec![cfg.seeds.first().copied().unwrap_or(0)],
    };
    let mut all_rows = Vec::with_capacity(seeds.len() * cfg.test.len());
    let mut run_means = Vec::with_capacity(seeds.len());
    let mut failures = 0;
    let mut counts = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let rows = match cfg.demos {
            DemoSource::Plan(plan) => {
                let seeded = plan.reseeded(SelectorConfig { seed, ..plan.selector.clone() });
                run_once(cfg, Some(&seeded), seed)
            }
            DemoSource::Fixed(_) => run_once(cfg, None, seed),
        };
        let failed: Vec<&ExampleRow> = rows.iter().filter(|r| r.error.is_some()).collect();
        if failed.len() as f64 > MAX_FAILURE_RATE * rows.len() as f64 {
            return Err(EvalError::TooManyFailures {
                failed: failed.len(),
                total: rows.len(),
                first: format!("{}: {}", failed[0].id, failed[0].error.as_deref().unwrap_or_default()),
            });
        }
        for r in &failed {
            log::warn!("example {} failed: {}", r.id, r.error.as_deref().unwrap_or_default());
        }
        failures += failed.len();
        let ok: Vec<&ExampleRow> = rows.iter().filter(|r| r.score.is_some()).collect();
        counts.push(ok.len());
        let mean = match cfg.metric {
            Metric::Em => ok.iter().map(|r| r.score.unwrap_or(0.0)).sum::<f64>() / ok.len().max(1) as f64,
            Metric::Bleu => {
                let pairs: Vec<(Vec<String>, Vec<Vec<String>>)> = ok
                    .iter()
                    .map(|r| {
                        let reference = &cfg.test.get(&r.id).expect("row ids come from the test set").output_text;
                        let pred = r.prediction.as_deref().unwrap_or_default();
                        (tokens(pred), vec![tokens(reference)])
                    })
                    .collect();
                100.0 * corpus_bleu(&pairs, 4)?
            }
        };
        run_means.push(mean);
        all_rows.extend(rows);
    }
    let (mean, std) = mean_std(&run_means);
    // Per-example scores average to the report mean only for EM with equal
    // run sizes, so they are emitted only then.
    let per_example = (cfg.metric == Metric::Em && counts.windows(2).all(|w| w[0] == w[1])).then(|| {
        all_rows
            .iter()
            .filter_map(|r| r.score.map(|score| ExampleScore { id: r.id.clone(), seed: r.seed, score }))
            .collect()
    });
    let report = EvalReport {
        dataset: cfg.dataset.clone(),
        selector: cfg.selector.clone(),
        lpr_enabled: cfg.lpr_enabled,
        global_rank: cfg.global_rank,
        noise_spec: cfg.noise.clone(),
        metric: cfg.metric,
        mean,
        std,
        n_runs: seeds.len(),
        run_means,
        seeds,
        examples_per_run: cfg.test.len(),
        failures,
        per_example,
    };
    Ok(EvalOutcome { report, rows: all_rows })
}

fn tokens(s: &str) -> Vec<String> {
    bleu_tokens(s).into_iter().map(str::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Example, Split};
    use crate::eval::EchoBackend;
    use crate::pipeline::Filter;
    use crate::selectors::{build_pool_index, SelectorMethod};
    use crate::sim::{planted_corpus, PlantedConfig};

    struct FailSome(usize);

    impl InferenceBackend for FailSome {
        fn name(&self) -> &str {
            "fail-some"
        }

        fn complete(&self, req: &GenerationRequest<'_>) -> Result<String, EvalError> {
            let n: usize = req.test_id.rsplit('-').next().unwrap().parse().unwrap();
            if n < self.0 {
                Err(EvalError::BackendUnavailable("down".into()))
            } else {
                Ok("x".into())
            }
        }
    }

    fn run(generator: &dyn InferenceBackend, metric: Metric, seeds: Vec<u64>, method: SelectorMethod) -> Result<EvalOutcome, EvalError> {
        let p = planted_corpus(&PlantedConfig { clusters: 4, per_cluster: 20, test_queries: 40, ..PlantedConfig::default() });
        let index = build_pool_index(p.pool.pool(), &p.embeddings).unwrap();
        let plan = SelectionPlan {
            pool: p.pool.pool(),
            index: &index,
            emb: &p.embeddings,
            neighbors: &index,
            scores: None,
            selector: SelectorConfig { method, k_demos: 4, candidate_pool_size: 10, seed: 0 },
            filter: Filter::None,
        };
        let template = PromptTemplate::question_answer("planted");
        let cfg = EvalConfig {
            dataset: "planted".into(),
            selector: method.as_str().into(),
            lpr_enabled: false,
            global_rank: false,
            noise: NoiseSummary::of(&p.pool),
            pool: p.pool.pool(),
            test: &p.test,
            demos: DemoSource::Plan(&plan),
            template: &template,
            generator,
            metric,
            seeds,
            jobs: 4,
        };
        run_eval(&cfg)
    }

    fn refs() -> HashMap<String, String> {
        let p = planted_corpus(&PlantedConfig { clusters: 4, per_cluster: 20, test_queries: 40, ..PlantedConfig::default() });
        p.test.examples().iter().map(|e| (e.id.clone(), e.output_text.clone())).collect()
    }

    #[test]
    fn oracle_and_empty_generators() {
        let oracle = EchoBackend::from_uri("echo:reference", refs()).unwrap();
        let out = run(&oracle, Metric::Em, vec![0], SelectorMethod::Topk).unwrap();
        assert_eq!(out.report.mean, 100.0);
        let per = out.report.per_example.as_ref().unwrap();
        assert_eq!(per.len(), 40);
        let empty = EchoBackend::from_uri("echo:empty", refs()).unwrap();
        assert_eq!(run(&empty, Metric::Em, vec![0], SelectorMethod::Topk).unwrap().report.mean, 0.0);
        let bleu = run(&oracle, Metric::Bleu, vec![0], SelectorMethod::Topk).unwrap();
        assert!((bleu.report.mean - 100.0).abs() < 1e-9);
        assert!(bleu.report.per_example.is_none());
    }

    #[test]
    fn three_seeds_give_three_run_means() {
        let oracle = EchoBackend::Const("answer 0 q0".into());
        let out = run(&oracle, Metric::Em, vec![1, 2, 3], SelectorMethod::Random).unwrap();
        assert_eq!(out.report.n_runs, 3);
        assert_eq!(out.report.run_means.len(), 3);
        let per = out.report.per_example.unwrap();
        let pooled = per.iter().map(|e| e.score).sum::<f64>() / per.len() as f64;
        assert!((pooled - out.report.mean).abs() < 1e-9);
        assert_eq!(out.rows.len(), 120);
    }

    #[test]
    fn failure_budget() {
        // Test ids end in their index; ids 0 and 1 fail: 2/40 = 5% passes.
        let ok = run(&FailSome(2), Metric::Em, vec![0], SelectorMethod::Topk).unwrap();
        assert_eq!(ok.report.failures, 2);
        let err = run(&FailSome(3), Metric::Em, vec![0], SelectorMethod::Topk).unwrap_err();
        assert!(matches!(err, EvalError::TooManyFailures { failed: 3, total: 40, .. }));
    }

    #[test]
    fn fixed_sets() {
        let pool = Dataset::new(vec![Example::new("d1", "t", "q1", "a1")], Split::Pool).unwrap();
        let test = Dataset::new(vec![Example::new("t1", "t", "q", "a")], Split::Test).unwrap();
        let sets = HashMap::from([("t1".to_string(), DemonstrationSet::raw("t1", vec!["d1".into()]))]);
        let template = PromptTemplate::question_answer("t");
        let generator = EchoBackend::Const("a".into());
        let cfg = EvalConfig {
            dataset: "d".into(),
            selector: "fixed".into(),
            lpr_enabled: false,
            global_rank: false,
            noise: None,
            pool: pool.pool(),
            test: &test,
            demos: DemoSource::Fixed(&sets),
            template: &template,
            generator: &generator,
            metric: Metric::Em,
            seeds: vec![5, 6],
            jobs: 1,
        };
        let out = run_eval(&cfg).unwrap();
        assert_eq!(out.report.n_runs, 1);
        assert_eq!(out.rows[0].demo_ids, ["d1"]);
        assert_eq!(out.report.mean, 100.0);
    }
}
