//! Remote embedding service interface and the common embeddings-API wire
//! format: request `{"model", "input": [...]}`, response
//! `{"data": [{"index", "embedding": [...]}, ...]}`.

use serde::{Deserialize, Serialize};

/// Environment variable holding the bearer token for the embedding service.
pub const TOKEN_ENV: &str = "MATU_EMBED_TOKEN";

/// A failed remote call. Retries are decided by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceError(pub String);

pub trait EmbeddingService: Send + Sync {
    /// Returns one raw vector per input text, in input order.
    fn embed_batch(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f32>>, ServiceError>;
}

#[derive(Debug, Serialize, PartialEq)]
pub struct EmbeddingRequest<'a> {
    pub model: &'a str,
    pub input: &'a [String],
}

#[derive(Debug, Deserialize)]
struct ResponseItem {
    index: usize,
    embedding: Vec<f32>,
}

#[derive(Debug, Deserialize)]
struct EmbeddingResponse {
    data: Vec<ResponseItem>,
}

pub fn request_body(model_id: &str, texts: &[String]) -> String {
    serde_json::to_string(&EmbeddingRequest {
        model: model_id,
        input: texts,
    })
    .expect("request serializes")
}

/// Decodes a response body, reordering items by their `index` field.
pub fn parse_response(body: &str, expected: usize) -> Result<Vec<Vec<f32>>, ServiceError> {
    let resp: EmbeddingResponse =
        serde_json::from_str(body).map_err(|e| ServiceError(format!("bad response body: {e}")))?;
    if resp.data.len() != expected {
        return Err(ServiceError(format!(
            "expected {expected} embeddings, got {}",
            resp.data.len()
        )));
    }
    let mut out: Vec<Option<Vec<f32>>> = vec![None; expected];
    for item in resp.data {
        let slot = out
            .get_mut(item.index)
            .ok_or_else(|| ServiceError(format!("index {} out of range", item.index)))?;
        *slot = Some(item.embedding);
    }
    out.into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| ServiceError(format!("missing index {i}"))))
        .collect()
}

#[cfg(feature = "http")]
pub use self::http::HttpEmbeddingService;

#[cfg(feature = "http")]
mod http {
    use super::*;

    /// Blocking HTTP client for an embeddings endpoint.
    pub struct HttpEmbeddingService {
        url: String,
        token: Option<String>,
        agent: ureq::Agent,
    }

    impl HttpEmbeddingService {
        pub fn new(url: impl Into<String>, token: Option<String>) -> Self {
            let agent = ureq::Agent::config_builder()
                .http_status_as_error(false)
                .timeout_global(Some(std::time::Duration::from_secs(60)))
                .build()
                .into();
            Self {
                url: url.into(),
                token,
                agent,
            }
        }

        /// Reads the bearer token from `MATU_EMBED_TOKEN`, if set.
        pub fn from_env(url: impl Into<String>) -> Self {
            Self::new(url, std::env::var(TOKEN_ENV).ok())
        }
    }

    impl EmbeddingService for HttpEmbeddingService {
        fn embed_batch(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f32>>, ServiceError> {
            let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
            if let Some(tok) = &self.token {
                req = req.header("Authorization", &format!("Bearer {tok}"));
            }
            let mut resp = req
                .send(request_body(model_id, texts))
                .map_err(|e| ServiceError(e.to_string()))?;
            let status = resp.status();
            let body = resp
                .body_mut()
                .read_to_string()
                .map_err(|e| ServiceError(e.to_string()))?;
            if !status.is_success() {
                return Err(ServiceError(format!("HTTP {status}: {body}")));
            }
            parse_response(&body, texts.len())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_shape() {
        let body = request_body("m", &["a".into(), "b".into()]);
        assert_eq!(body, r#"{"model":"m","input":["a","b"]}"#);
    }

    #[test]
    fn response_reordered_by_index() {
        let body = r#"{"data":[{"index":1,"embedding":[2.0]},{"index":0,"embedding":[1.0]}]}"#;
        assert_eq!(parse_response(body, 2).unwrap(), vec![vec![1.0], vec![2.0]]);
    }

    #[test]
    fn response_count_mismatch() {
        let body = r#"{"data":[{"index":0,"embedding":[1.0]}]}"#;
        assert!(parse_response(body, 2).is_err());
    }
}
