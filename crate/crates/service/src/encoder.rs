//! Client for the external text encoder sidecar.
//!
//! One POST per checkpoint:
//!
//! ```text
//! -> {"model_id":"epoch10","modality":"text","payload":"polo neck t-shirt"}
//! <- {"vec":[0.01, -0.2, ...]}
//! ```

use std::collections::BTreeMap;
use std::time::Duration;

use enclip_core::evalkit::QueryRecord;
use enclip_core::ModelSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("encoder request for {model_id} failed: {source}")]
    Transport {
        model_id: String,
        #[source]
        source: reqwest::Error,
    },
    #[error("encoder returned status {status} for {model_id}: {body}")]
    Status {
        model_id: String,
        status: u16,
        body: String,
    },
    #[error("encoder returned {found} components for {model_id}, expected {expected}")]
    Dimension {
        model_id: String,
        expected: usize,
        found: usize,
    },
}

#[derive(Debug, Serialize)]
pub struct EncodeRequest<'a> {
    pub model_id: &'a str,
    pub modality: &'a str,
    pub payload: &'a str,
}

#[derive(Debug, Deserialize)]
pub struct EncodeResponse {
    pub vec: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct HttpEncoder {
    client: reqwest::Client,
    url: String,
}

impl HttpEncoder {
    pub fn new(url: impl Into<String>) -> Self {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .expect("http client builds");
        Self { client, url: url.into() }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub async fn encode(&self, model_id: &str, text: &str) -> Result<Vec<f32>, EncoderError> {
        let transport = |source| EncoderError::Transport {
            model_id: model_id.to_string(),
            source,
        };
        let resp = self
            .client
            .post(&self.url)
            .json(&EncodeRequest {
                model_id,
                modality: "text",
                payload: text,
            })
            .send()
            .await
            .map_err(transport)?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(EncoderError::Status {
                model_id: model_id.to_string(),
                status: status.as_u16(),
                body,
            });
        }
        Ok(resp.json::<EncodeResponse>().await.map_err(transport)?.vec)
    }

    /// Encodes `text` with every checkpoint of `set` concurrently.
    pub async fn encode_all(&self, set: &ModelSet, text: &str) -> Result<BTreeMap<String, Vec<f32>>, EncoderError> {
        let calls = set.models().iter().map(|m| async move {
            let v = self.encode(m.model_id(), text).await?;
            if v.len() != set.dim() {
                return Err(EncoderError::Dimension {
                    model_id: m.model_id().to_string(),
                    expected: set.dim(),
                    found: v.len(),
                });
            }
            Ok((m.model_id().to_string(), v))
        });
        futures::future::try_join_all(calls).await.map(|pairs| pairs.into_iter().collect())
    }

    /// Fills in vectors for text-only query records.
    pub async fn resolve_queries(&self, set: &ModelSet, queries: &mut [QueryRecord]) -> Result<(), EncoderError> {
        for q in queries.iter_mut() {
            if q.vectors.is_none() {
                if let Some(text) = q.text.as_deref() {
                    q.vectors = Some(self.encode_all(set, text).await?);
                }
            }
        }
        Ok(())
    }
}
