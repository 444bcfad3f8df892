//! Transport-agnostic protocol v1 request handler. Wrap it in any HTTP
//! server to expose a [`Backend`] over the wire.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use super::wire::*;
use super::{Backend, BackendError, InpaintRequest};

#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub status: u16,
    pub body: Vec<u8>,
}

fn reply<T: Serialize>(status: u16, value: &T) -> Reply {
    Reply {
        status,
        body: serde_json::to_vec(value).expect("serializable reply"),
    }
}

fn error(status: u16, msg: impl std::fmt::Display) -> Reply {
    reply(status, &json!({ "error": msg.to_string() }))
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, Reply> {
    serde_json::from_slice(body).map_err(|e| error(422, format!("malformed payload: {e}")))
}

fn backend_failure(e: BackendError) -> Reply {
    match e {
        BackendError::InvalidRequest(m) | BackendError::Protocol(m) => error(422, m),
        BackendError::Unavailable(m) => error(503, m),
        BackendError::Status { status, body } => error(status, body),
    }
}

fn decoded<T>(r: Result<T, BackendError>) -> Result<T, Reply> {
    r.map_err(|e| error(422, e))
}

/// Dispatches one request. `path` excludes scheme and host.
pub fn handle(backend: &dyn Backend, method: &str, path: &str, body: &[u8]) -> Reply {
    let path = path.split('?').next().unwrap_or(path);
    let result = match (method, path) {
        ("GET", "/v1/health") => backend.health().map(|h| reply(200, &h)).map_err(backend_failure),
        ("POST", "/v1/tags") => tags(backend, body),
        ("POST", "/v1/inpaint") => inpaint(backend, body),
        ("POST", "/v1/embed") => embed(backend, body),
        ("POST", "/v1/align") => align(backend, body),
        ("POST", "/v1/segment") => segment(backend, body),
        (_, "/v1/health" | "/v1/tags" | "/v1/inpaint" | "/v1/embed" | "/v1/align" | "/v1/segment") => {
            Err(error(405, "method not allowed"))
        }
        _ => Err(error(404, format!("no such endpoint {path}"))),
    };
    result.unwrap_or_else(|r| r)
}

fn tags(backend: &dyn Backend, body: &[u8]) -> Result<Reply, Reply> {
    let req: TagsRequest = parse(body)?;
    let images = req
        .images
        .iter()
        .map(|s| decoded(decode_image(s)))
        .collect::<Result<Vec<_>, _>>()?;
    let tags = backend.tags(&images, req.max_tags).map_err(backend_failure)?;
    Ok(reply(200, &TagsResponse { tags }))
}

fn inpaint(backend: &dyn Backend, body: &[u8]) -> Result<Reply, Reply> {
    let req: InpaintRequestBody = parse(body)?;
    let r = InpaintRequest {
        background_patch: decoded(decode_image(&req.image))?,
        mask_patch: decoded(decode_mask(&req.mask))?,
        prompt: req.prompt,
        seed: req.seed,
        steps: req.steps,
    };
    let out = backend.inpaint(&r).map_err(backend_failure)?;
    Ok(reply(
        200,
        &InpaintResponseBody {
            image: encode_image(&out.image),
            seed: Some(r.seed),
            steps: Some(r.steps),
            metadata: out.metadata,
        },
    ))
}

fn embed(backend: &dyn Backend, body: &[u8]) -> Result<Reply, Reply> {
    let req: EmbedRequest = parse(body)?;
    let v = backend.embed(&decoded(decode_image(&req.image))?).map_err(backend_failure)?;
    Ok(reply(200, &EmbedResponse { vector: encode_vector(&v) }))
}

fn align(backend: &dyn Backend, body: &[u8]) -> Result<Reply, Reply> {
    let req: AlignRequest = parse(body)?;
    let score = backend
        .align(&decoded(decode_image(&req.image))?, &req.text)
        .map_err(backend_failure)?;
    Ok(reply(200, &AlignResponse { score }))
}

fn segment(backend: &dyn Backend, body: &[u8]) -> Result<Reply, Reply> {
    let req: SegmentRequest = parse(body)?;
    let image = decoded(decode_image(&req.image))?;
    let hint = req.mask.as_deref().map(|m| decoded(decode_mask(m))).transpose()?;
    let mask = backend
        .segment(&image, req.bbox, &req.text_cue, hint.as_ref())
        .map_err(backend_failure)?;
    Ok(reply(200, &SegmentResponse { mask: encode_mask(&mask) }))
}
