//! Mask refinement, feathering, blending into full-resolution backgrounds
//! and COCO export of the composed images.

use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::coco::{CocoAnnotation, CocoCategory, CocoFile, CocoImage, CocoSegmentation, RleCounts};
use crate::dataset::{Category, ImageId};
use crate::generation::Candidate;
use crate::imageio::{self, IoError};
use crate::patch::CropRect;
use crate::raster::{crop_rgb, resize_bilinear, BinaryMask, PixelBox, Rle};

pub const DEFAULT_SIGMA: f64 = 2.0;
pub const SPILL_MARGIN: u32 = 3;

/// Fixed-point one: soft masks store weights in units of 2^-32.
pub const SOFT_ONE: u64 = 1 << 32;
const KERNEL_ONE: u64 = 1 << 16;

#[derive(Debug, Error)]
pub enum CompositeError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("backend unavailable: {0}")]
    Backend(#[from] BackendError),
    #[error("crop {0:?} does not fit background {1}x{2}")]
    CropOutOfBounds(CropRect, u32, u32),
    #[error("sigma must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("candidate {0}: mask is empty in image coordinates")]
    EmptyAnnotation(String),
    #[error("{0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefineMode {
    /// Segment backend constrained to the dilated inpaint mask.
    Segment,
    /// Use the inpainting mask as the label.
    InpaintMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSource {
    SegmentBackend,
    InpaintMask,
    /// The segment backend returned nothing usable.
    InpaintMaskFallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedMask {
    pub mask: BinaryMask,
    pub source: MaskSource,
}

impl RefinedMask {
    pub fn area(&self) -> u64 {
        self.mask.area()
    }
}

pub fn refine_mask(
    patch: &RgbImage,
    inpaint_mask: &BinaryMask,
    mode: RefineMode,
    text_cue: &str,
    backend: &dyn Backend,
) -> Result<RefinedMask, CompositeError> {
    let fallback = |source| RefinedMask { mask: inpaint_mask.clone(), source };
    if mode == RefineMode::InpaintMask {
        return Ok(fallback(MaskSource::InpaintMask));
    }
    let Some(b) = inpaint_mask.bbox() else {
        return Err(CompositeError::Mismatch("inpaint mask is empty".into()));
    };
    let seg = backend.segment(patch, b.to_xywh(), text_cue, Some(inpaint_mask))?;
    if seg.dims() != inpaint_mask.dims() {
        return Err(CompositeError::Mismatch(format!(
            "segment returned {:?}, expected {:?}",
            seg.dims(),
            inpaint_mask.dims()
        )));
    }
    let kept = seg.intersect(&inpaint_mask.dilate(SPILL_MARGIN)).largest_component();
    if kept.is_empty() {
        log::warn!("segment result empty, falling back to the inpainting mask");
        return Ok(fallback(MaskSource::InpaintMaskFallback));
    }
    Ok(RefinedMask {
        mask: kept,
        source: MaskSource::SegmentBackend,
    })
}

/// Soft mask in fixed point: value `v` means `v / 2^32`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub width: u32,
    pub height: u32,
    pub values: Vec<u64>,
}

impl SoftMask {
    pub fn raw(&self, x: u32, y: u32) -> u64 {
        self.values[(y * self.width + x) as usize]
    }

    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.raw(x, y) as f64 / SOFT_ONE as f64
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / SOFT_ONE as f64
    }
}

/// Symmetric integer Gaussian taps of radius ceil(3σ) summing to 2^16.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<u64>, CompositeError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(CompositeError::InvalidSigma(sigma));
    }
    let r = (3.0 * sigma).ceil() as i64;
    let g: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = g.iter().sum();
    let mut w: Vec<u64> = g.iter().map(|v| (v / total * KERNEL_ONE as f64).round() as u64).collect();
    let centre = r as usize;
    let others: u64 = w.iter().enumerate().filter(|(i, _)| *i != centre).map(|(_, v)| v).sum();
    w[centre] = KERNEL_ONE - others;
    Ok(w)
}

/// Separable Gaussian blur of a binary mask with replicated borders. Exact
/// integer arithmetic: pixels whose whole kernel footprint is inside the
/// mask are exactly 1, pixels beyond the kernel reach are exactly 0.
pub fn feather_mask(mask: &BinaryMask, sigma: f64) -> Result<SoftMask, CompositeError> {
    let k = gaussian_kernel(sigma)?;
    let r = (k.len() / 2) as i64;
    let (w, h) = mask.dims();
    let clamp = |v: i64, hi: u32| v.clamp(0, hi as i64 - 1) as u32;
    let mut horiz = vec![0u64; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0;
            for (j, kw) in k.iter().enumerate() {
                if mask.get(clamp(x as i64 + j as i64 - r, w), y) {
                    s += kw;
                }
            }
            horiz[(y * w + x) as usize] = s;
        }
    }
    let mut values = vec![0u64; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0;
            for (j, kw) in k.iter().enumerate() {
                s += kw * horiz[(clamp(y as i64 + j as i64 - r, h) * w + x) as usize];
            }
            values[(y * w + x) as usize] = s;
        }
    }
    Ok(SoftMask { width: w, height: h, values })
}

/// `(v·p + (2^32 − v)·b) / 2^32` rounded half to even.
pub fn blend_channel(v: u64, p: u8, b: u8) -> u8 {
    let num = v * p as u64 + (SOFT_ONE - v) * b as u64;
    let q = num >> 32;
    let rem = num & (SOFT_ONE - 1);
    let half = SOFT_ONE / 2;
    let up = rem > half || (rem == half && q % 2 == 1);
    (q + up as u64) as u8
}

/// Refined mask mapped from patch coordinates into the background frame.
pub fn mask_to_image(mask: &BinaryMask, crop: CropRect, frame: (u32, u32)) -> BinaryMask {
    mask.resize_nearest(crop.side, crop.side).embed(frame.0, frame.1, crop.x, crop.y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedAnnotation {
    pub bbox: [f64; 4],
    pub area: u64,
    pub segmentation: Rle,
}

#[derive(Debug, Clone)]
pub struct ComposedImage {
    pub image: RgbImage,
    pub annotation: DerivedAnnotation,
    /// Soft mask over the crop window (crop coordinates).
    pub soft: SoftMask,
    pub crop: CropRect,
}

/// Resizes the patch back to the crop window and alpha-blends it into the
/// background using the feathered refined mask.
pub fn blend(
    background: &RgbImage,
    patch: &RgbImage,
    crop: CropRect,
    refined: &RefinedMask,
    sigma: f64,
) -> Result<ComposedImage, CompositeError> {
    let (w, h) = background.dimensions();
    if !crop.fits(w, h) {
        return Err(CompositeError::CropOutOfBounds(crop, w, h));
    }
    let local_mask = refined.mask.resize_nearest(crop.side, crop.side);
    let soft = feather_mask(&local_mask, sigma)?;
    let local_patch = resize_bilinear(patch, crop.side, crop.side);
    let mut out = background.clone();
    for y in 0..crop.side {
        for x in 0..crop.side {
            let v = soft.raw(x, y);
            if v == 0 {
                continue;
            }
            let p = local_patch.get_pixel(x, y);
            let px = out.get_pixel_mut(crop.x + x, crop.y + y);
            for c in 0..3 {
                px.0[c] = blend_channel(v, p.0[c], px.0[c]);
            }
        }
    }
    let full = local_mask.embed(w, h, crop.x, crop.y);
    let b = full
        .bbox()
        .ok_or_else(|| CompositeError::EmptyAnnotation(String::new()))?;
    Ok(ComposedImage {
        image: out,
        annotation: DerivedAnnotation {
            bbox: b.to_xywh(),
            area: full.area(),
            segmentation: full.to_rle(),
        },
        soft,
        crop,
    })
}

/// Metadata of one composed image on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposedEntry {
    pub image_id: ImageId,
    pub annotation_id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub category_id: u32,
    pub rank: usize,
    pub candidate_id: String,
    pub synthetic_mask_id: String,
    pub background_image_id: ImageId,
    pub seed: u64,
    pub profile: String,
    pub sigma: f64,
    pub mask_source: MaskSource,
    pub annotation: DerivedAnnotation,
}

pub struct ComposeContext<'a> {
    pub backend: &'a dyn Backend,
    pub mode: RefineMode,
    pub text_cue: &'a str,
    pub sigma: f64,
    pub profile: &'a str,
}

/// Composes one selected candidate and writes `<out_dir>/<file_name>`.
#[allow(clippy::too_many_arguments)]
pub fn compose_one(
    ctx: &ComposeContext,
    candidate: &Candidate,
    patch: &RgbImage,
    inpaint_mask: &BinaryMask,
    background: &RgbImage,
    rank: usize,
    image_id: ImageId,
    category_id: u32,
    out_dir: &Path,
) -> Result<ComposedEntry, CompositeError> {
    let refined = refine_mask(patch, inpaint_mask, ctx.mode, ctx.text_cue, ctx.backend)?;
    let composed = blend(background, patch, candidate.crop, &refined, ctx.sigma)
        .map_err(|e| match e {
            CompositeError::EmptyAnnotation(_) => CompositeError::EmptyAnnotation(candidate.candidate_id.clone()),
            e => e,
        })?;
    let file_name = format!("images/syn_{rank:04}_{}.png", candidate.candidate_id);
    imageio::save_png_rgb(&out_dir.join(&file_name), &composed.image)?;
    Ok(ComposedEntry {
        image_id,
        annotation_id: image_id,
        file_name,
        width: background.width(),
        height: background.height(),
        category_id,
        rank,
        candidate_id: candidate.candidate_id.clone(),
        synthetic_mask_id: candidate.synthetic_mask_id.clone(),
        background_image_id: candidate.background_image_id,
        seed: candidate.seed,
        profile: ctx.profile.to_string(),
        sigma: ctx.sigma,
        mask_source: refined.source,
        annotation: composed.annotation,
    })
}

pub fn entry_to_coco(e: &ComposedEntry, file_name: String) -> (CocoImage, CocoAnnotation) {
    let image = CocoImage {
        id: e.image_id,
        file_name,
        width: e.width,
        height: e.height,
    };
    let ann = CocoAnnotation {
        id: e.annotation_id,
        image_id: e.image_id,
        category_id: e.category_id,
        bbox: e.annotation.bbox,
        segmentation: CocoSegmentation::Rle {
            size: e.annotation.segmentation.size,
            counts: RleCounts::Uncompressed(e.annotation.segmentation.counts.clone()),
        },
        area: e.annotation.area as f64,
        iscrowd: 0,
        provenance: Some(serde_json::json!({
            "candidate_id": e.candidate_id,
            "seed": e.seed,
            "mask_id": e.synthetic_mask_id,
            "background_image_id": e.background_image_id,
            "profile": e.profile,
            "sigma": e.sigma,
            "mask_source": e.mask_source,
        })),
    };
    (image, ann)
}

/// Writes a COCO file for composed images whose PNGs sit next to it.
pub fn export_coco(entries: &[ComposedEntry], categories: &[Category], path: &Path) -> Result<CocoFile, CompositeError> {
    let mut ids = std::collections::BTreeSet::new();
    for e in entries {
        if !ids.insert(e.image_id) {
            return Err(CompositeError::Mismatch(format!("duplicate image id {}", e.image_id)));
        }
    }
    let mut file = CocoFile {
        info: Some(serde_json::json!({ "description": "synthetic defects" })),
        images: Vec::new(),
        annotations: Vec::new(),
        categories: categories
            .iter()
            .map(|c| CocoCategory { id: c.id, name: c.name.clone(), supercategory: None })
            .collect(),
    };
    for e in entries {
        let (im, ann) = entry_to_coco(e, e.file_name.clone());
        file.images.push(im);
        file.annotations.push(ann);
    }
    imageio::write_json(path, &file)?;
    Ok(file)
}

/// Pixel box of a crop, for callers that need image-space geometry.
pub fn crop_box(crop: CropRect) -> PixelBox {
    crop.to_box()
}

/// Background pixels under the crop window, handy for diagnostics.
pub fn background_window(background: &RgbImage, crop: CropRect) -> RgbImage {
    crop_rgb(background, crop.to_box())
}
