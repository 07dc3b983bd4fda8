//! Client for the review service's HTTP API.
//!
//! ```no_run
//! # async fn demo() -> Result<(), loopmark_client::ClientError> {
//! let client = loopmark_client::ReviewClient::new("http://127.0.0.1:8765")?;
//! for item in client.items().await?.items {
//!     client.accept(&item.id).await?;
//! }
//! client.finalize(None).await?;
//! # Ok(()) }
//! ```

use reqwest::{Method, Url};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use loopmark::labelfmt::BoundingBox;
use loopmark::review::api::{
    ErrorBody, FinalizeResult, ItemList, ItemUpdate, LabelMapView, LabelsBody, PredictionsView, SessionView,
};
use loopmark::workspace::ImageId;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid service URL {url:?}: {message}")]
    Url { url: String, message: String },
    #[error("request to {url} failed: {source}")]
    Transport {
        url: String,
        #[source]
        source: reqwest::Error,
    },
    /// The service answered with an error status.
    #[error("{status}: {}", .body.error)]
    Api { status: u16, body: ErrorBody },
}

impl ClientError {
    /// HTTP status of an API error.
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            _ => None,
        }
    }

    /// Items still pending, when finalize was refused for that reason.
    pub fn pending(&self) -> Option<&[ImageId]> {
        match self {
            ClientError::Api { body, .. } => body.pending.as_deref(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReviewClient {
    base: Url,
    http: reqwest::Client,
}

#[derive(Serialize)]
struct FinalizeRequest {
    #[serde(skip_serializing_if = "Option::is_none")]
    iteration: Option<u32>,
}

impl ReviewClient {
    /// `base` is the service root, e.g. `http://127.0.0.1:8765`.
    pub fn new(base: &str) -> Result<Self, ClientError> {
        let mut base = Url::parse(base).map_err(|e| ClientError::Url {
            url: base.to_string(),
            message: e.to_string(),
        })?;
        if !matches!(base.scheme(), "http" | "https") {
            return Err(ClientError::Url {
                url: base.to_string(),
                message: "scheme must be http or https".into(),
            });
        }
        if !base.path().ends_with('/') {
            let path = format!("{}/", base.path());
            base.set_path(&path);
        }
        Ok(Self {
            base,
            http: reqwest::Client::new(),
        })
    }

    pub fn base_url(&self) -> &Url {
        &self.base
    }

    fn url(&self, path: &str) -> Result<Url, ClientError> {
        self.base.join(path).map_err(|e| ClientError::Url {
            url: format!("{}{path}", self.base),
            message: e.to_string(),
        })
    }

    fn item_url(&self, id: &ImageId, leaf: &str) -> Result<Url, ClientError> {
        let mut url = self.url("api/items/")?;
        url.path_segments_mut()
            .expect("http URLs have paths")
            .pop_if_empty()
            .push(id.as_str())
            .push(leaf);
        Ok(url)
    }

    async fn send(&self, method: Method, url: Url, body: Option<String>) -> Result<reqwest::Response, ClientError> {
        let shown = url.to_string();
        let mut req = self.http.request(method, url);
        if let Some(body) = body {
            req = req.header(reqwest::header::CONTENT_TYPE, "application/json").body(body);
        }
        let resp = req
            .send()
            .await
            .map_err(|source| ClientError::Transport { url: shown.clone(), source })?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await.unwrap_or_default();
        let body = serde_json::from_str::<ErrorBody>(&text).unwrap_or_else(|_| ErrorBody {
            error: if text.is_empty() {
                status.canonical_reason().unwrap_or("error").to_string()
            } else {
                text
            },
            pending: None,
        });
        Err(ClientError::Api {
            status: status.as_u16(),
            body,
        })
    }

    async fn json<T: DeserializeOwned>(&self, method: Method, url: Url, body: Option<String>) -> Result<T, ClientError> {
        let shown = url.to_string();
        self.send(method, url, body)
            .await?
            .json()
            .await
            .map_err(|source| ClientError::Transport { url: shown, source })
    }

    pub async fn session(&self) -> Result<SessionView, ClientError> {
        self.json(Method::GET, self.url("api/session")?, None).await
    }

    pub async fn items(&self) -> Result<ItemList, ClientError> {
        self.json(Method::GET, self.url("api/items")?, None).await
    }

    pub async fn predictions(&self, id: &ImageId) -> Result<PredictionsView, ClientError> {
        self.json(Method::GET, self.item_url(id, "predictions")?, None).await
    }

    /// Raw image bytes.
    pub async fn image(&self, id: &ImageId) -> Result<Vec<u8>, ClientError> {
        let url = self.item_url(id, "image")?;
        let shown = url.to_string();
        let resp = self.send(Method::GET, url, None).await?;
        let bytes = resp
            .bytes()
            .await
            .map_err(|source| ClientError::Transport { url: shown, source })?;
        Ok(bytes.to_vec())
    }

    pub async fn label_map(&self) -> Result<LabelMapView, ClientError> {
        self.json(Method::GET, self.url("api/labelmap")?, None).await
    }

    /// Replaces the labels of one item.
    pub async fn put_labels(&self, id: &ImageId, boxes: &[BoundingBox]) -> Result<ItemUpdate, ClientError> {
        let body = serde_json::to_string(&LabelsBody { boxes: boxes.to_vec() }).expect("labels serialize");
        self.json(Method::PUT, self.item_url(id, "labels")?, Some(body)).await
    }

    pub async fn accept(&self, id: &ImageId) -> Result<ItemUpdate, ClientError> {
        self.json(Method::POST, self.item_url(id, "accept")?, None).await
    }

    /// Merges the review. With `iteration`, the service refuses if a
    /// different iteration is under review.
    pub async fn finalize(&self, iteration: Option<u32>) -> Result<FinalizeResult, ClientError> {
        let body = serde_json::to_string(&FinalizeRequest { iteration }).expect("request serializes");
        self.json(Method::POST, self.url("api/finalize")?, Some(body)).await
    }
}
