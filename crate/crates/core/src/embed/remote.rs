//! Client for an external embedding service.
//!
//! Wire protocol:
//!
//! ```text
//! POST <endpoint>/embed
//! {"items": [{"kind": "text", "data": "a cat"}, {"kind": "image_b64", "data": "..."}]}
//!
//! 200 {"dim": 512, "vectors": [[...], null], "errors": [null, "decode failed"]}
//! ```

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use url::Url;

use super::{EmbedError, EmbedInput, Embedder, EmbeddingVector};

#[derive(Serialize)]
struct WireItem<'a> {
    kind: &'static str,
    data: std::borrow::Cow<'a, str>,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    items: Vec<WireItem<'a>>,
}

#[derive(Deserialize)]
struct WireResponse {
    dim: usize,
    vectors: Vec<Option<Vec<f32>>>,
    #[serde(default)]
    errors: Vec<Option<String>>,
}

pub struct RemoteEmbedder {
    endpoint: Url,
    dim: usize,
    client: Option<reqwest::blocking::Client>,
}

impl Drop for RemoteEmbedder {
    /// The blocking client owns a runtime that cannot be dropped on an async
    /// worker thread.
    fn drop(&mut self) {
        if let Some(client) = self.client.take() {
            let _ = std::thread::spawn(move || drop(client)).join();
        }
    }
}

impl RemoteEmbedder {
    pub fn new(endpoint: Url, dim: usize) -> Result<Self, EmbedError> {
        let endpoint = if endpoint.path().ends_with("/embed") {
            endpoint
        } else {
            let mut base = endpoint;
            if !base.path().ends_with('/') {
                let path = format!("{}/", base.path());
                base.set_path(&path);
            }
            base.join("embed").map_err(|e| EmbedError::Protocol(e.to_string()))?
        };
        // built off-thread so construction is also legal inside an async runtime
        let client = std::thread::spawn(|| {
            reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(60))
                .build()
        })
        .join()
        .map_err(|_| EmbedError::Protocol("client construction panicked".into()))?
        .map_err(|e| EmbedError::EndpointUnreachable(e.to_string()))?;
        Ok(Self {
            endpoint,
            dim,
            client: Some(client),
        })
    }

    pub fn endpoint(&self) -> &Url {
        &self.endpoint
    }
}

impl Embedder for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, bytes: &[u8]) -> Result<EmbeddingVector, EmbedError> {
        single(self.embed_batch(&[EmbedInput::Image(bytes)])?)
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        single(self.embed_batch(&[EmbedInput::Text(text)])?)
    }

    fn embed_batch(
        &self,
        items: &[EmbedInput<'_>],
    ) -> Result<Vec<Result<EmbeddingVector, String>>, EmbedError> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let b64 = base64::engine::general_purpose::STANDARD;
        let request = WireRequest {
            items: items
                .iter()
                .map(|item| match *item {
                    EmbedInput::Text(t) => WireItem { kind: "text", data: t.into() },
                    EmbedInput::Image(b) => WireItem { kind: "image_b64", data: b64.encode(b).into() },
                })
                .collect(),
        };
        let response = self
            .client
            .as_ref()
            .expect("client lives until drop")
            .post(self.endpoint.clone())
            .json(&request)
            .send()
            .map_err(|e| EmbedError::EndpointUnreachable(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(EmbedError::Protocol(format!("HTTP {status}")));
        }
        let body: WireResponse = response.json().map_err(|e| EmbedError::Protocol(e.to_string()))?;
        if body.dim != self.dim {
            return Err(EmbedError::DimensionMismatch { expected: self.dim, got: body.dim });
        }
        if body.vectors.len() != items.len() {
            return Err(EmbedError::Protocol(format!(
                "{} vectors for {} items",
                body.vectors.len(),
                items.len()
            )));
        }
        let mut out = Vec::with_capacity(items.len());
        for (i, vector) in body.vectors.into_iter().enumerate() {
            if let Some(Some(msg)) = body.errors.get(i) {
                out.push(Err(msg.clone()));
                continue;
            }
            match vector {
                None => out.push(Err("no vector returned".to_string())),
                Some(v) if v.len() != self.dim => {
                    return Err(EmbedError::DimensionMismatch { expected: self.dim, got: v.len() });
                }
                Some(v) => out.push(EmbeddingVector::normalized(v).map_err(|e| e.to_string())),
            }
        }
        Ok(out)
    }
}

fn single(mut batch: Vec<Result<EmbeddingVector, String>>) -> Result<EmbeddingVector, EmbedError> {
    match batch.pop() {
        Some(Ok(v)) => Ok(v),
        Some(Err(msg)) => Err(EmbedError::Item(msg)),
        None => Err(EmbedError::Protocol("empty response".into())),
    }
}
