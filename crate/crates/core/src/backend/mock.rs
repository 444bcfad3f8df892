//! Deterministic offline backend.
//!
//! Every behaviour is a pure function of its inputs, so two runs with the
//! same seed produce identical bytes.

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, Health, InpaintOutput, InpaintRequest, ENDPOINTS, PROTOCOL_VERSION};
use crate::raster::BinaryMask;

pub const EMBED_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MockProfile {
    Bsdata,
    Msd,
}

const BSDATA_TAGS: &[&str] = &[
    "pitting defect on galvanized steel",
    "irregular pitted surface",
    "rough grainy texture",
    "dark pits",
    "subtle metallic sheen",
    "close-up industrial inspection photo",
    "shallow depth of field",
    "low contrast",
    "dim diffuse lighting",
    "shadowed edges",
    "horizontal striations",
    "metal",
    "image",
];

const MSD_TAGS: &[&str] = &[
    "high contrast scratch defect on dark glass display",
    "thin linear scratch",
    "occasional diagonal orientation",
    "sharp edges",
    "isolated single defect",
    "reflective glossy surface with subtle metallic sheen",
    "fine texture on smooth surface",
    "close-up industrial inspection photo",
    "uniform lighting with faint glow",
    "minimal dark background",
    "minimal noise shallow depth of field",
    "screen",
    "photo",
];

impl MockProfile {
    pub fn tag_list(self) -> &'static [&'static str] {
        match self {
            MockProfile::Bsdata => BSDATA_TAGS,
            MockProfile::Msd => MSD_TAGS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    pub profile: MockProfile,
}

impl MockBackend {
    pub fn new(profile: MockProfile) -> Self {
        MockBackend { profile }
    }
}

/// Expands a digest of `data` into a unit vector with a keyed SHA-256
/// counter-mode stream.
fn hash_unit_vector(key: &[u8], data: &[u8]) -> Vec<f32> {
    let digest = Sha256::digest(data);
    let mut raw = Vec::with_capacity(EMBED_DIM);
    let mut block = 0u32;
    while raw.len() < EMBED_DIM {
        let mut h = Sha256::new();
        h.update(key);
        h.update(digest);
        h.update(block.to_le_bytes());
        for c in h.finalize().chunks_exact(4) {
            let u = u32::from_le_bytes(c.try_into().expect("4 bytes"));
            raw.push(u as f64 / u32::MAX as f64 * 2.0 - 1.0);
        }
        block += 1;
    }
    raw.truncate(EMBED_DIM);
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    raw.iter().map(|x| (x / norm) as f32).collect()
}

fn image_bytes(img: &RgbImage) -> Vec<u8> {
    let mut b = Vec::with_capacity(8 + img.as_raw().len());
    b.extend_from_slice(&img.width().to_le_bytes());
    b.extend_from_slice(&img.height().to_le_bytes());
    b.extend_from_slice(img.as_raw());
    b
}

pub fn mock_image_embedding(img: &RgbImage) -> Vec<f32> {
    hash_unit_vector(b"defectforge-mock-image", &image_bytes(img))
}

pub fn mock_text_embedding(text: &str) -> Vec<f32> {
    hash_unit_vector(b"defectforge-mock-text", text.as_bytes())
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn request_seed(req: &InpaintRequest) -> u64 {
    let mut h = Sha256::new();
    h.update(req.seed.to_le_bytes());
    h.update(req.steps.to_le_bytes());
    h.update(req.prompt.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Darkens an ellipse inscribed in the mask bbox (and clipped to the mask)
/// with seeded noise. Pixels outside the mask are untouched.
pub fn mock_inpaint(req: &InpaintRequest) -> RgbImage {
    let mut out = req.background_patch.clone();
    let Some(b) = req.mask_patch.bbox() else {
        return out;
    };
    let mut rng = ChaCha8Rng::seed_from_u64(request_seed(req));
    let tone: f64 = rng.random_range(0.25..0.5);
    let (cx, cy) = (b.x as f64 + b.w as f64 / 2.0, b.y as f64 + b.h as f64 / 2.0);
    let (ax, ay) = (b.w as f64 / 2.0, b.h as f64 / 2.0);
    for y in b.y..b.bottom() {
        for x in b.x..b.right() {
            if !req.mask_patch.get(x, y) {
                continue;
            }
            let dx = (x as f64 + 0.5 - cx) / ax;
            let dy = (y as f64 + 0.5 - cy) / ay;
            if dx * dx + dy * dy > 1.0 {
                continue;
            }
            let noise: i32 = rng.random_range(-12..=12);
            let p = out.get_pixel_mut(x, y);
            for c in p.0.iter_mut() {
                *c = ((*c as f64 * tone).round() as i32 + noise).clamp(0, 255) as u8;
            }
        }
    }
    out
}

impl Backend for MockBackend {
    fn health(&self) -> Result<Health, BackendError> {
        Ok(Health {
            protocol: PROTOCOL_VERSION.into(),
            endpoints: ENDPOINTS.iter().map(|s| s.to_string()).collect(),
        })
    }

    fn tags(&self, images: &[RgbImage], max_tags: usize) -> Result<Vec<Vec<String>>, BackendError> {
        let list: Vec<String> = self
            .profile
            .tag_list()
            .iter()
            .take(max_tags)
            .map(|s| s.to_string())
            .collect();
        Ok(images.iter().map(|_| list.clone()).collect())
    }

    fn inpaint(&self, req: &InpaintRequest) -> Result<InpaintOutput, BackendError> {
        req.validate()?;
        Ok(InpaintOutput {
            image: mock_inpaint(req),
            metadata: Some(serde_json::json!({"backend": "mock", "steps": req.steps})),
        })
    }

    fn embed(&self, image: &RgbImage) -> Result<Vec<f32>, BackendError> {
        Ok(mock_image_embedding(image))
    }

    fn align(&self, image: &RgbImage, text: &str) -> Result<f64, BackendError> {
        let c = cosine(&mock_image_embedding(image), &mock_text_embedding(text));
        Ok(100.0 * c.max(0.0))
    }

    fn segment(
        &self,
        image: &RgbImage,
        bbox: [f64; 4],
        _text_cue: &str,
        hint: Option<&BinaryMask>,
    ) -> Result<BinaryMask, BackendError> {
        let (w, h) = image.dimensions();
        if let Some(m) = hint {
            if m.dims() != (w, h) {
                return Err(BackendError::InvalidRequest("mask and image sizes differ".into()));
            }
            return Ok(m.erode(1));
        }
        // without a mask prompt: darker-than-average pixels inside the bbox
        let x0 = bbox[0].max(0.0).floor() as u32;
        let y0 = bbox[1].max(0.0).floor() as u32;
        let x1 = ((bbox[0] + bbox[2]).ceil().max(0.0) as u32).min(w);
        let y1 = ((bbox[1] + bbox[3]).ceil().max(0.0) as u32).min(h);
        let luma = |x: u32, y: u32| image.get_pixel(x, y).0.iter().map(|&c| c as u32).sum::<u32>();
        let mut sum = 0u64;
        let mut n = 0u64;
        for y in y0..y1 {
            for x in x0..x1 {
                sum += luma(x, y) as u64;
                n += 1;
            }
        }
        let mean = sum.checked_div(n).unwrap_or(0);
        Ok(BinaryMask::from_fn(w, h, |x, y| {
            x >= x0 && x < x1 && y >= y0 && y < y1 && (luma(x, y) as u64) < mean
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn bg() -> RgbImage {
        RgbImage::from_fn(64, 48, |x, y| Rgb([120 + (x % 7) as u8, 130 + (y % 5) as u8, 140]))
    }

    fn req(seed: u64) -> InpaintRequest {
        InpaintRequest {
            background_patch: bg(),
            mask_patch: BinaryMask::from_fn(64, 48, |x, y| (10..40).contains(&x) && (8..30).contains(&y)),
            prompt: "dark pits".into(),
            seed,
            steps: 30,
        }
    }

    #[test]
    fn inpaint_is_deterministic_and_local() {
        let m = MockBackend::new(MockProfile::Bsdata);
        let a = m.inpaint(&req(3)).unwrap().image;
        let b = m.inpaint(&req(3)).unwrap().image;
        assert_eq!(a, b);
        assert_ne!(a, m.inpaint(&req(4)).unwrap().image);
        let r = req(3);
        let mut changed = 0;
        for (x, y, p) in a.enumerate_pixels() {
            if !r.mask_patch.get(x, y) {
                assert_eq!(p, r.background_patch.get_pixel(x, y));
            } else if p != r.background_patch.get_pixel(x, y) {
                changed += 1;
            }
        }
        assert!(changed > 300);
    }

    #[test]
    fn embeddings_are_unit_and_keyed() {
        let m = MockBackend::new(MockProfile::Bsdata);
        let e = m.embed(&bg()).unwrap();
        assert_eq!(e.len(), EMBED_DIM);
        let n: f64 = e.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert_eq!(e, m.embed(&bg()).unwrap());
        let s = m.align(&bg(), "pitting").unwrap();
        assert!((0.0..=100.0).contains(&s));
    }

    #[test]
    fn segment_is_contained_in_hint() {
        let m = MockBackend::new(MockProfile::Msd);
        let r = req(1);
        let s = m.segment(&r.background_patch, [10.0, 8.0, 30.0, 22.0], "scratch", Some(&r.mask_patch)).unwrap();
        assert!(s.is_subset_of(&r.mask_patch));
        assert_eq!(s.area(), 28 * 20);
    }

    #[test]
    fn tags_are_capped() {
        let m = MockBackend::new(MockProfile::Msd);
        let t = m.tags(&[bg(), bg()], 5).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].len(), 5);
        assert!(BSDATA_TAGS.len() <= 15 && MSD_TAGS.len() <= 15);
    }
}
