//! Step-text embeddings: cache-first lookup, remote fetch with bounded
//! retries, and prefix-truncation + L2 normalization.

pub mod cache;
pub mod service;

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

pub use cache::{cache_key, CacheKey, EmbeddingCache, EmbeddingCacheEntry};
pub use service::{EmbeddingService, ServiceError};

use crate::error::{Error, Result};

pub const DEFAULT_D_TARGET: usize = 256;
pub const DEFAULT_BATCH_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub model_id: String,
    pub reduced_dim: usize,
}

impl EmbeddingVector {
    pub fn full(values: Vec<f64>, model_id: impl Into<String>) -> Self {
        let reduced_dim = values.len();
        Self {
            values,
            model_id: model_id.into(),
            reduced_dim,
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Keeps the first `d_target` coordinates and rescales them to unit L2 norm.
pub fn reduce_and_normalize(v: &EmbeddingVector, d_target: usize) -> Result<EmbeddingVector> {
    if d_target == 0 || d_target > v.values.len() {
        return Err(Error::InvalidTargetDim {
            d_target,
            len: v.values.len(),
        });
    }
    let prefix = &v.values[..d_target];
    let norm = prefix.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::ZeroVector);
    }
    Ok(EmbeddingVector {
        values: prefix.iter().map(|x| x / norm).collect(),
        model_id: v.model_id.clone(),
        reduced_dim: d_target,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

/// Cache-first embedding lookup. Without a service the gateway runs
/// offline and reports the first uncached text as missing.
pub struct EmbeddingGateway {
    cache: Arc<EmbeddingCache>,
    service: Option<Box<dyn EmbeddingService>>,
    pub batch_size: usize,
    pub retry: RetryPolicy,
}

impl EmbeddingGateway {
    pub fn offline(cache: Arc<EmbeddingCache>) -> Self {
        Self {
            cache,
            service: None,
            batch_size: DEFAULT_BATCH_SIZE,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_service(cache: Arc<EmbeddingCache>, service: Box<dyn EmbeddingService>) -> Self {
        Self {
            service: Some(service),
            ..Self::offline(cache)
        }
    }

    pub fn cache(&self) -> &Arc<EmbeddingCache> {
        &self.cache
    }

    pub fn load_precomputed_embeddings(&self, path: &std::path::Path) -> Result<usize> {
        self.cache.load(path)?;
        Ok(self.cache.len())
    }

    fn fetch_with_retry(
        &self,
        service: &dyn EmbeddingService,
        model_id: &str,
        batch: &[String],
    ) -> Result<Vec<Vec<f32>>> {
        let mut last = String::new();
        for attempt in 0..self.retry.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(self.retry.base_delay * 2u32.pow(attempt - 1));
            }
            match service.embed_batch(model_id, batch) {
                Ok(v) => return Ok(v),
                Err(ServiceError(msg)) => last = msg,
            }
        }
        Err(Error::ServiceUnavailable(format!(
            "{} attempt(s) failed, last error: {last}",
            self.retry.attempts.max(1)
        )))
    }

    /// Full-dimension vectors for `texts`, in input order. Every remote
    /// result is cached before returning; repeated texts are fetched once.
    pub fn embed_texts(&self, texts: &[String], model_id: &str) -> Result<Vec<EmbeddingVector>> {
        let keys: Vec<CacheKey> = texts.iter().map(|t| cache_key(model_id, t)).collect();
        let mut missing: Vec<String> = Vec::new();
        let mut queued: HashMap<CacheKey, ()> = HashMap::new();
        for (t, k) in texts.iter().zip(&keys) {
            if !self.cache.contains(k) && queued.insert(*k, ()).is_none() {
                missing.push(t.clone());
            }
        }

        if !missing.is_empty() {
            let Some(service) = self.service.as_deref() else {
                return Err(Error::MissingEmbedding(missing.swap_remove(0)));
            };
            for batch in missing.chunks(self.batch_size.max(1)) {
                let vectors = self.fetch_with_retry(service, model_id, batch)?;
                if vectors.len() != batch.len() {
                    return Err(Error::ServiceUnavailable(format!(
                        "service returned {} vectors for {} texts",
                        vectors.len(),
                        batch.len()
                    )));
                }
                let dim = vectors.first().map_or(0, Vec::len);
                if let Some(bad) = vectors.iter().find(|v| v.len() != dim) {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: bad.len(),
                    });
                }
                for (text, v) in batch.iter().zip(vectors) {
                    self.cache.insert(model_id, text, v);
                }
            }
        }

        keys.iter()
            .zip(texts)
            .map(|(k, t)| {
                let raw = self.cache.get(k).ok_or_else(|| Error::MissingEmbedding(t.clone()))?;
                Ok(EmbeddingVector::full(
                    raw.into_iter().map(f64::from).collect(),
                    model_id,
                ))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct CountingService {
        calls: AtomicUsize,
        texts_seen: AtomicUsize,
        fail: bool,
    }

    impl CountingService {
        fn new(fail: bool) -> Self {
            Self {
                calls: AtomicUsize::new(0),
                texts_seen: AtomicUsize::new(0),
                fail,
            }
        }
    }

    impl EmbeddingService for Arc<CountingService> {
        fn embed_batch(&self, _m: &str, texts: &[String]) -> std::result::Result<Vec<Vec<f32>>, ServiceError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.fail {
                return Err(ServiceError("down".into()));
            }
            self.texts_seen.fetch_add(texts.len(), Ordering::SeqCst);
            Ok(texts
                .iter()
                .map(|t| vec![t.len() as f32, t.bytes().next().unwrap_or(0) as f32])
                .collect())
        }
    }

    fn gateway(fail: bool) -> (EmbeddingGateway, Arc<CountingService>) {
        let svc = Arc::new(CountingService::new(fail));
        let mut g = EmbeddingGateway::with_service(Arc::new(EmbeddingCache::new()), Box::new(svc.clone()));
        g.retry.base_delay = Duration::from_millis(1);
        (g, svc)
    }

    #[test]
    fn duplicate_text_fetched_once() {
        let (g, svc) = gateway(false);
        let out = g.embed_texts(&["x".into(), "x".into()], "m").unwrap();
        assert_eq!(out[0], out[1]);
        assert_eq!(svc.texts_seen.load(Ordering::SeqCst), 1);
        g.embed_texts(&["x".into()], "m").unwrap();
        assert_eq!(svc.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn order_preserved() {
        let (g, _) = gateway(false);
        let out = g.embed_texts(&["a".into(), "b".into(), "c".into()], "m").unwrap();
        let firsts: Vec<f64> = out.iter().map(|v| v.values[1]).collect();
        assert_eq!(firsts, vec![97.0, 98.0, 99.0]);
    }

    #[test]
    fn service_down_cold_cache() {
        let (g, svc) = gateway(true);
        let err = g.embed_texts(&["a".into()], "m").unwrap_err();
        assert!(matches!(err, Error::ServiceUnavailable(_)));
        assert_eq!(svc.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn batching_respects_size() {
        let (mut g, svc) = gateway(false);
        g.batch_size = 2;
        let texts: Vec<String> = (0..5).map(|i| format!("t{i}")).collect();
        g.embed_texts(&texts, "m").unwrap();
        assert_eq!(svc.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn offline_names_missing_text() {
        let g = EmbeddingGateway::offline(Arc::new(EmbeddingCache::new()));
        match g.embed_texts(&["nope".into()], "m") {
            Err(Error::MissingEmbedding(t)) => assert_eq!(t, "nope"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reduce_examples() {
        let v = EmbeddingVector::full(vec![3.0, 4.0, 0.0, 0.0], "m");
        let r = reduce_and_normalize(&v, 2).unwrap();
        assert!((r.values[0] - 0.6).abs() < 1e-15 && (r.values[1] - 0.8).abs() < 1e-15);
        assert_eq!(r.reduced_dim, 2);

        let r = reduce_and_normalize(&EmbeddingVector::full(vec![0.0, 2.0], "m"), 2).unwrap();
        assert_eq!(r.values, vec![0.0, 1.0]);

        let err = reduce_and_normalize(&EmbeddingVector::full(vec![0.0, 0.0, 5.0], "m"), 2);
        assert!(matches!(err, Err(Error::ZeroVector)));

        assert!(matches!(
            reduce_and_normalize(&EmbeddingVector::full(vec![1.0], "m"), 2),
            Err(Error::InvalidTargetDim { .. })
        ));
    }
}
