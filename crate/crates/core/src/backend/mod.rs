//! Inference backend protocol v1: the trait every backend implements, the
//! JSON wire format, an HTTP client, a deterministic in-process mock and a
//! transport-agnostic request handler used to serve any backend.

use image::RgbImage;
use thiserror::Error;

use crate::raster::BinaryMask;

pub mod conformance;
pub mod http;
pub mod mock;
pub mod server;
pub mod wire;

pub use http::{HttpBackend, RetryPolicy};
pub use mock::{MockBackend, MockProfile};

pub const PROTOCOL_VERSION: &str = "1";
pub const ENDPOINTS: [&str; 5] = ["tags", "inpaint", "embed", "align", "segment"];
pub const DEFAULT_STEPS: u32 = 30;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    /// Connection failures and server-side errors are worth retrying.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Unavailable(_) => true,
            BackendError::Status { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InpaintRequest {
    pub background_patch: RgbImage,
    pub mask_patch: BinaryMask,
    pub prompt: String,
    pub seed: u64,
    pub steps: u32,
}

impl InpaintRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.steps == 0 {
            return Err(BackendError::InvalidRequest("steps must be >= 1".into()));
        }
        if self.mask_patch.is_empty() {
            return Err(BackendError::InvalidRequest("mask is empty".into()));
        }
        if self.mask_patch.dims() != self.background_patch.dimensions() {
            return Err(BackendError::InvalidRequest("mask and image sizes differ".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct InpaintOutput {
    pub image: RgbImage,
    /// Opaque sampler settings reported by the backend.
    pub metadata: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Health {
    pub protocol: String,
    #[serde(default)]
    pub endpoints: Vec<String>,
}

pub trait Backend: Send + Sync {
    fn health(&self) -> Result<Health, BackendError>;

    /// One tag list per input image, each at most `max_tags` long.
    fn tags(&self, images: &[RgbImage], max_tags: usize) -> Result<Vec<Vec<String>>, BackendError>;

    fn inpaint(&self, req: &InpaintRequest) -> Result<InpaintOutput, BackendError>;

    /// Unit-norm perceptual embedding.
    fn embed(&self, image: &RgbImage) -> Result<Vec<f32>, BackendError>;

    /// Text–image alignment in [0, 100].
    fn align(&self, image: &RgbImage, text: &str) -> Result<f64, BackendError>;

    /// Promptable segmentation inside `bbox`. `hint` is the inpainting mask,
    /// which backends may use as an extra prompt or ignore.
    fn segment(
        &self,
        image: &RgbImage,
        bbox: [f64; 4],
        text_cue: &str,
        hint: Option<&BinaryMask>,
    ) -> Result<BinaryMask, BackendError>;
}

/// Checks that a backend speaks protocol v1 and exposes every endpoint.
pub fn check_health(backend: &dyn Backend) -> Result<Health, BackendError> {
    let h = backend.health()?;
    if h.protocol != PROTOCOL_VERSION {
        return Err(BackendError::Protocol(format!(
            "backend speaks protocol {:?}, expected {PROTOCOL_VERSION:?}",
            h.protocol
        )));
    }
    let missing: Vec<&str> = ENDPOINTS
        .iter()
        .copied()
        .filter(|e| !h.endpoints.iter().any(|x| x == e))
        .collect();
    if !missing.is_empty() {
        return Err(BackendError::Protocol(format!("missing endpoints: {}", missing.join(", "))));
    }
    Ok(h)
}

/// Applies `f` to every item with at most `limit` calls in flight. Results
/// come back in input order regardless of completion order.
pub fn map_bounded<T, R, F>(items: &[T], limit: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    let workers = limit.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}
