use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use super::{PerplexityScore, Result, ScoreCache, ScoreError, ScorerBackend};
use crate::corpus::{Example, Pool};

/// Exponential back-off for transport failures.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, initial_delay: Duration::from_millis(500) }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self { max_retries: 0, initial_delay: Duration::ZERO }
    }

    pub fn immediate(max_retries: u32) -> Self {
        Self { max_retries, initial_delay: Duration::ZERO }
    }

    pub fn run<T>(&self, mut f: impl FnMut() -> Result<T>) -> Result<T> {
        let mut delay = self.initial_delay;
        let mut attempt = 0;
        loop {
            match f() {
                Err(e) if e.is_retriable() && attempt < self.max_retries => {
                    log::debug!("retrying after {e}");
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Scores `ids` from `pool`, consulting and filling `cache`.
///
/// Duplicate ids are scored once. Successful scores are cached even when
/// some ids fail, in which case the failed ids come back in
/// [`ScoreError::PartialFailure`].
pub fn batch_score(
    backend: &dyn ScorerBackend,
    pool: Pool<'_>,
    ids: &[String],
    cache: &ScoreCache,
    parallelism: usize,
    retry: &RetryPolicy,
) -> Result<BTreeMap<String, f64>> {
    let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let mut out = BTreeMap::new();
    let mut misses: Vec<&Example> = Vec::new();
    for id in &wanted {
        let ex = pool.get(id).ok_or_else(|| ScoreError::UnknownId(id.to_string()))?;
        match cache.get(backend.tag(), ex) {
            Some(p) => {
                out.insert(id.to_string(), p);
            }
            None => misses.push(ex),
        }
    }
    if misses.is_empty() {
        return Ok(out);
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<PerplexityScore>)>> = Mutex::new(Vec::with_capacity(misses.len()));
    let workers = parallelism.clamp(1, misses.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(ex) = misses.get(i) else { break };
                let r = retry.run(|| backend.score(ex));
                results.lock().expect("results lock").push((i, r));
            });
        }
    });

    let mut results = results.into_inner().expect("results lock");
    results.sort_by_key(|(i, _)| *i);
    let mut scored = Vec::new();
    let mut failed = Vec::new();
    for (i, r) in results {
        let ex = misses[i];
        match r {
            Ok(s) => scored.push((ex, s)),
            Err(e) => {
                log::warn!("scoring {:?} failed: {e}", ex.id);
                failed.push(ex.id.clone());
            }
        }
    }
    let pairs: Vec<(&Example, &PerplexityScore)> = scored.iter().map(|(e, s)| (*e, s)).collect();
    cache.insert_many(&pairs)?;
    out.extend(scored.into_iter().map(|(e, s)| (e.id.clone(), s.perplexity)));
    if failed.is_empty() {
        Ok(out)
    } else {
        Err(ScoreError::PartialFailure { failed, total: wanted.len() })
    }
}

/// Wraps a backend and counts calls, for cache and retry checks.
#[derive(Debug)]
pub struct CountingScorer<B> {
    inner: B,
    calls: AtomicUsize,
    seen: Mutex<HashSet<String>>,
}

impl<B: ScorerBackend> CountingScorer<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, calls: AtomicUsize::new(0), seen: Mutex::new(HashSet::new()) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn unique_ids(&self) -> usize {
        self.seen.lock().expect("seen lock").len()
    }

    pub fn into_inner(self) -> B {
        self.inner
    }
}

impl<B: ScorerBackend> ScorerBackend for CountingScorer<B> {
    fn tag(&self) -> &str {
        self.inner.tag()
    }

    fn score(&self, ex: &Example) -> Result<PerplexityScore> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.seen.lock().expect("seen lock").insert(ex.id.clone());
        self.inner.score(ex)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Dataset, Split};
    use std::sync::atomic::AtomicU32;

    struct Flaky {
        tag: String,
        transient_left: AtomicU32,
    }

    impl ScorerBackend for Flaky {
        fn tag(&self) -> &str {
            &self.tag
        }

        fn score(&self, ex: &Example) -> Result<PerplexityScore> {
            if ex.id == "x" {
                return Err(ScoreError::BackendUnavailable("x is down".into()));
            }
            if ex.id == "e0"
                && self
                    .transient_left
                    .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
                    .is_ok()
            {
                return Err(ScoreError::BackendUnavailable("blip".into()));
            }
            Ok(PerplexityScore { example_id: ex.id.clone(), perplexity: 2.0 + ex.id.len() as f64, backend_tag: self.tag.clone() })
        }
    }

    fn pool(with_x: bool) -> Dataset {
        let mut ex: Vec<Example> = (0..99).map(|i| Example::new(format!("e{i}"), "t", format!("q{i}"), "a")).collect();
        if with_x {
            ex.push(Example::new("x", "t", "qx", "a"));
        }
        Dataset::new(ex, Split::Pool).unwrap()
    }

    fn flaky(tag: &str) -> CountingScorer<Flaky> {
        CountingScorer::new(Flaky { tag: tag.into(), transient_left: AtomicU32::new(2) })
    }

    #[test]
    fn partial_failure_caches_successes() {
        let ds = pool(true);
        let ids: Vec<String> = ds.pool().ids().map(str::to_string).collect();
        let cache = ScoreCache::in_memory();
        let backend = flaky("m");
        let err = batch_score(&backend, ds.pool(), &ids, &cache, 8, &RetryPolicy::immediate(3)).unwrap_err();
        match err {
            ScoreError::PartialFailure { failed, total } => {
                assert_eq!(failed, ["x"]);
                assert_eq!(total, 100);
            }
            other => panic!("{other}"),
        }
        assert_eq!(cache.len(), 99);
        // x: 1 + 3 retries; e0: two transient failures then success.
        assert_eq!(backend.calls(), 98 + 4 + 3);
    }

    #[test]
    fn warm_cache_makes_no_calls() {
        let ds = pool(false);
        let ids: Vec<String> = ds.pool().ids().map(str::to_string).collect();
        let cache = ScoreCache::in_memory();
        let first = batch_score(&flaky("m"), ds.pool(), &ids, &cache, 4, &RetryPolicy::immediate(3)).unwrap();
        let backend = flaky("m");
        let second = batch_score(&backend, ds.pool(), &ids, &cache, 4, &RetryPolicy::immediate(3)).unwrap();
        assert_eq!(backend.calls(), 0);
        assert_eq!(first, second);
    }

    #[test]
    fn new_tag_rescores_everything_and_keeps_old_entries() {
        let ds = pool(false);
        let ids: Vec<String> = ds.pool().ids().map(str::to_string).collect();
        let cache = ScoreCache::in_memory();
        batch_score(&flaky("m1"), ds.pool(), &ids, &cache, 4, &RetryPolicy::immediate(3)).unwrap();
        let backend = flaky("m2");
        batch_score(&backend, ds.pool(), &ids, &cache, 4, &RetryPolicy::immediate(3)).unwrap();
        assert_eq!(backend.unique_ids(), 99);
        assert_eq!(cache.count_for_tag("m1"), 99);
        assert_eq!(cache.count_for_tag("m2"), 99);
    }

    #[test]
    fn duplicates_scored_once_and_unknown_rejected() {
        let ds = pool(false);
        let backend = flaky("m");
        let cache = ScoreCache::in_memory();
        let ids = vec!["e1".to_string(), "e1".to_string(), "e2".to_string()];
        let got = batch_score(&backend, ds.pool(), &ids, &cache, 2, &RetryPolicy::none()).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(backend.calls(), 2);
        let bad = vec!["nope".to_string()];
        assert!(matches!(
            batch_score(&backend, ds.pool(), &bad, &cache, 2, &RetryPolicy::none()),
            Err(ScoreError::UnknownId(_))
        ));
    }
}
