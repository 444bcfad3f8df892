//! JSON bodies of protocol v1 and the payload encodings they use.
//!
//! Images travel as base64 PNG. Masks are 1-bit PNGs. Vectors are base64 of
//! a little-endian `u32` length followed by that many IEEE-754 binary32
//! values.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::BackendError;
use crate::imageio;
use crate::raster::BinaryMask;

fn bad(what: &str, e: impl std::fmt::Display) -> BackendError {
    BackendError::Protocol(format!("cannot decode {what}: {e}"))
}

pub fn encode_image(img: &RgbImage) -> String {
    STANDARD.encode(imageio::encode_png_rgb(img).expect("in-memory PNG encoding"))
}

pub fn decode_image(s: &str) -> Result<RgbImage, BackendError> {
    let bytes = STANDARD.decode(s).map_err(|e| bad("image base64", e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| bad("image PNG", e))?;
    Ok(img.into_rgb8())
}

pub fn encode_mask(mask: &BinaryMask) -> String {
    STANDARD.encode(imageio::encode_mask_png(mask).expect("in-memory PNG encoding"))
}

pub fn decode_mask(s: &str) -> Result<BinaryMask, BackendError> {
    let bytes = STANDARD.decode(s).map_err(|e| bad("mask base64", e))?;
    imageio::decode_mask_png(&bytes).map_err(|e| bad("mask PNG", e))
}

pub fn encode_vector(v: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(4 + 4 * v.len());
    bytes.extend_from_slice(&(v.len() as u32).to_le_bytes());
    for x in v {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_vector(s: &str) -> Result<Vec<f32>, BackendError> {
    let bytes = STANDARD.decode(s).map_err(|e| bad("vector base64", e))?;
    if bytes.len() < 4 {
        return Err(bad("vector", "missing length prefix"));
    }
    let n = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    let body = &bytes[4..];
    if body.len() != 4 * n {
        return Err(bad("vector", format!("length prefix {n} but {} payload bytes", body.len())));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagsRequest {
    pub images: Vec<String>,
    pub max_tags: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagsResponse {
    pub tags: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintRequestBody {
    pub image: String,
    pub mask: String,
    pub prompt: String,
    pub seed: u64,
    pub steps: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintResponseBody {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vector: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignRequest {
    pub image: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignResponse {
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub image: String,
    pub bbox: [f64; 4],
    pub text_cue: String,
    /// Optional mask prompt; not part of the minimal protocol.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub mask: String,
}
