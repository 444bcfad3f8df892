//! Blocking HTTP client for protocol v1.

use std::time::Duration;

use image::RgbImage;
use log::warn;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::wire::*;
use super::{check_health, Backend, BackendError, Health, InpaintOutput, InpaintRequest};
use crate::raster::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff_ms: 250,
            max_backoff_ms: 4000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based), doubling each time.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(20);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }
}

#[derive(Debug, Clone)]
pub struct HttpBackend {
    base_url: String,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
}

impl HttpBackend {
    pub fn new(base_url: &str, timeout: Duration, retry: RetryPolicy) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Ok(HttpBackend {
            base_url: base_url.trim_end_matches('/').to_string(),
            client,
            retry,
        })
    }

    /// Builds a client and verifies the backend speaks protocol v1 with all
    /// five endpoints.
    pub fn connect(base_url: &str, timeout: Duration, retry: RetryPolicy) -> Result<Self, BackendError> {
        let b = Self::new(base_url, timeout, retry)?;
        check_health(&b)?;
        Ok(b)
    }

    /// Inpaint call returning the raw response body, including echoed
    /// seed and steps.
    pub fn inpaint_raw(&self, body: &InpaintRequestBody) -> Result<InpaintResponseBody, BackendError> {
        self.call("/v1/inpaint", Some(body))
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn send_once(&self, path: &str, body: Option<&[u8]>) -> Result<Vec<u8>, BackendError> {
        let url = format!("{}{}", self.base_url, path);
        let req = match body {
            Some(b) => self
                .client
                .post(&url)
                .header("content-type", "application/json")
                .body(b.to_vec()),
            None => self.client.get(&url),
        };
        let resp = req
            .send()
            .map_err(|e| BackendError::Unavailable(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        let bytes = resp
            .bytes()
            .map_err(|e| BackendError::Unavailable(format!("{url}: {e}")))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status {
                status,
                body: String::from_utf8_lossy(&bytes).into_owned(),
            });
        }
        Ok(bytes.to_vec())
    }

    fn call<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        path: &str,
        body: Option<&Req>,
    ) -> Result<Resp, BackendError> {
        let payload = body
            .map(serde_json::to_vec)
            .transpose()
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let mut attempt = 1;
        loop {
            match self.send_once(path, payload.as_deref()) {
                Ok(bytes) => {
                    return serde_json::from_slice(&bytes)
                        .map_err(|e| BackendError::Protocol(format!("{path}: bad response body: {e}")))
                }
                Err(e) if e.is_transient() && attempt < self.retry.max_attempts => {
                    let wait = self.retry.backoff(attempt);
                    warn!("{path} failed ({e}), retry {attempt} in {wait:?}");
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

impl Backend for HttpBackend {
    fn health(&self) -> Result<Health, BackendError> {
        self.call::<(), Health>("/v1/health", None)
    }

    fn tags(&self, images: &[RgbImage], max_tags: usize) -> Result<Vec<Vec<String>>, BackendError> {
        let req = TagsRequest {
            images: images.iter().map(encode_image).collect(),
            max_tags,
        };
        let resp: TagsResponse = self.call("/v1/tags", Some(&req))?;
        Ok(resp.tags)
    }

    fn inpaint(&self, req: &InpaintRequest) -> Result<InpaintOutput, BackendError> {
        req.validate()?;
        let body = InpaintRequestBody {
            image: encode_image(&req.background_patch),
            mask: encode_mask(&req.mask_patch),
            prompt: req.prompt.clone(),
            seed: req.seed,
            steps: req.steps,
        };
        let resp: InpaintResponseBody = self.call("/v1/inpaint", Some(&body))?;
        let image = decode_image(&resp.image)?;
        if image.dimensions() != req.background_patch.dimensions() {
            return Err(BackendError::Protocol(format!(
                "inpaint returned {:?}, expected {:?}",
                image.dimensions(),
                req.background_patch.dimensions()
            )));
        }
        Ok(InpaintOutput {
            image,
            metadata: resp.metadata,
        })
    }

    fn embed(&self, image: &RgbImage) -> Result<Vec<f32>, BackendError> {
        let resp: EmbedResponse = self.call("/v1/embed", Some(&EmbedRequest { image: encode_image(image) }))?;
        decode_vector(&resp.vector)
    }

    fn align(&self, image: &RgbImage, text: &str) -> Result<f64, BackendError> {
        let req = AlignRequest {
            image: encode_image(image),
            text: text.to_string(),
        };
        let resp: AlignResponse = self.call("/v1/align", Some(&req))?;
        Ok(resp.score)
    }

    fn segment(
        &self,
        image: &RgbImage,
        bbox: [f64; 4],
        text_cue: &str,
        hint: Option<&BinaryMask>,
    ) -> Result<BinaryMask, BackendError> {
        let req = SegmentRequest {
            image: encode_image(image),
            bbox,
            text_cue: text_cue.to_string(),
            mask: hint.map(encode_mask),
        };
        let resp: SegmentResponse = self.call("/v1/segment", Some(&req))?;
        decode_mask(&resp.mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy { max_attempts: 5, initial_backoff_ms: 100, max_backoff_ms: 350 };
        assert_eq!(p.backoff(1), Duration::from_millis(100));
        assert_eq!(p.backoff(2), Duration::from_millis(200));
        assert_eq!(p.backoff(3), Duration::from_millis(350));
    }

    #[test]
    fn unreachable_backend_is_unavailable() {
        let p = RetryPolicy { max_attempts: 2, initial_backoff_ms: 1, max_backoff_ms: 1 };
        let b = HttpBackend::new("http://127.0.0.1:9", Duration::from_millis(300), p).unwrap();
        assert!(matches!(b.health(), Err(BackendError::Unavailable(_))));
    }
}
