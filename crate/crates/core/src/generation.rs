//! Inpainting input preparation and seeded candidate generation.

use std::collections::{BTreeMap, BTreeSet};

use image::RgbImage;
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{map_bounded, Backend, BackendError, InpaintRequest, DEFAULT_STEPS};
use crate::dataset::{Dataset, ImageId, ImageRecord, Resolution};
use crate::imageio::IoError;
use crate::masks::{derive_seed, MaskPool, SyntheticMask};
use crate::patch::{crop_window, load_record_rgb, CropRect, PatchError, PATCH_SIDE};
use crate::prompt::Prompt;
use crate::raster::{crop_rgb, resize_bilinear, BinaryMask};
use crate::store::PatchStore;

/// Generation fails outright below this success rate.
pub const MIN_SUCCESS_RATE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error("mask {mask_id} is {mask_res}, background {image_id} is {image_res}")]
    ResolutionMismatch {
        mask_id: String,
        mask_res: Resolution,
        image_id: ImageId,
        image_res: Resolution,
    },
    #[error("background image {0} has annotations")]
    DefectiveBackground(ImageId),
    #[error("unknown background image {0}")]
    UnknownBackground(ImageId),
    #[error("no backgrounds match any mask resolution")]
    NoUsableBackgrounds,
    #[error("mask {0} is empty in the inpainting crop")]
    EmptyMask(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backend unavailable: {succeeded} of {attempted} candidates generated")]
    BackendUnavailable { attempted: usize, succeeded: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Crop window for a synthetic mask on its background, per the patch
/// extraction rule.
pub fn mask_crop(sm: &SyntheticMask) -> CropRect {
    crop_window(sm.bbox.to_xywh(), (sm.resolution.width, sm.resolution.height))
}

/// Mask of `sm` inside `crop`, at crop resolution.
pub fn mask_in_crop(sm: &SyntheticMask, crop: CropRect) -> BinaryMask {
    let (ox, oy) = (sm.bbox.x as i64, sm.bbox.y as i64);
    BinaryMask::from_fn(crop.side, crop.side, |x, y| {
        sm.local.get_signed(crop.x as i64 + x as i64 - ox, crop.y as i64 + y as i64 - oy)
    })
}

/// Crops the background and the mask with the same window and resizes both
/// to the patch size (bilinear for pixels, nearest for the mask).
pub fn prepare_inpaint_input(
    background: &ImageRecord,
    pixels: &RgbImage,
    background_annotated: bool,
    sm: &SyntheticMask,
    prompt: &str,
    seed: u64,
    steps: u32,
) -> Result<(InpaintRequest, CropRect), GenerationError> {
    if background.resolution() != sm.resolution || pixels.dimensions() != (sm.resolution.width, sm.resolution.height) {
        return Err(GenerationError::ResolutionMismatch {
            mask_id: sm.mask_id.clone(),
            mask_res: sm.resolution,
            image_id: background.id,
            image_res: background.resolution(),
        });
    }
    if background_annotated {
        return Err(GenerationError::DefectiveBackground(background.id));
    }
    let crop = mask_crop(sm);
    let mask = mask_in_crop(sm, crop).resize_nearest(PATCH_SIDE, PATCH_SIDE);
    if mask.is_empty() {
        return Err(GenerationError::EmptyMask(sm.mask_id.clone()));
    }
    let image = resize_bilinear(&crop_rgb(pixels, crop.to_box()), PATCH_SIDE, PATCH_SIDE);
    Ok((
        InpaintRequest {
            background_patch: image,
            mask_patch: mask,
            prompt: prompt.to_string(),
            seed,
            steps,
        },
        crop,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub align_score: f64,
    pub min_dist: f64,
    pub mean_k_dist: f64,
    pub k: usize,
}

/// Candidate metadata; pixels live in a [`PatchStore`] under `candidate_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub candidate_id: String,
    pub index: usize,
    pub synthetic_mask_id: String,
    pub background_image_id: ImageId,
    pub crop: CropRect,
    pub seed: u64,
    pub steps: u32,
    pub prompt_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_metadata: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<MetricScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationGap {
    pub index: usize,
    pub synthetic_mask_id: String,
    pub background_image_id: ImageId,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub seed: u64,
    pub attempted: usize,
    pub succeeded: usize,
    pub prompt_hash: String,
    pub candidates: Vec<Candidate>,
    pub gaps: Vec<GenerationGap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub count: usize,
    pub steps: u32,
    pub concurrency: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            count: 1000,
            steps: DEFAULT_STEPS,
            concurrency: 4,
        }
    }
}

pub fn candidate_id(index: usize) -> String {
    format!("c{index:05}")
}

/// One planned (mask, background, seed) triple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Draw {
    pub index: usize,
    pub mask: usize,
    pub background: ImageId,
    pub seed: u64,
}

/// Draws `count` triples. Draw `i` uses its own stream, so the plan does not
/// depend on evaluation order. Masks without a same-resolution background
/// are never drawn.
pub fn plan_draws(
    pool: &MaskPool,
    backgrounds: &BTreeMap<Resolution, Vec<ImageId>>,
    count: usize,
    seed: u64,
) -> Result<Vec<Draw>, GenerationError> {
    let usable: Vec<usize> = (0..pool.masks.len())
        .filter(|&i| backgrounds.get(&pool.masks[i].resolution).is_some_and(|b| !b.is_empty()))
        .collect();
    if usable.is_empty() {
        return Err(GenerationError::NoUsableBackgrounds);
    }
    Ok((0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1 << 32 | i as u64));
            let mask = usable[rng.random_range(0..usable.len())];
            let bgs = &backgrounds[&pool.masks[mask].resolution];
            let background = bgs[rng.random_range(0..bgs.len())];
            let seed = rng.random::<u32>() as u64;
            Draw { index: i, mask, background, seed }
        })
        .collect())
}

/// Generates `cfg.count` candidates, writing pixels to `store`. Failed
/// backend calls are recorded as gaps; fewer than half succeeding is an
/// error.
#[allow(clippy::too_many_arguments)]
pub fn generate_candidates(
    pool: &MaskPool,
    ds: &Dataset,
    background_ids: &[ImageId],
    prompt: &Prompt,
    cfg: &GenerationConfig,
    seed: u64,
    backend: &dyn Backend,
    store: &dyn PatchStore,
) -> Result<CandidatePool, GenerationError> {
    if background_ids.is_empty() || cfg.count == 0 || cfg.steps == 0 {
        return Err(GenerationError::InvalidArgument(
            "backgrounds, count and steps must be non-empty".into(),
        ));
    }
    let annotated: BTreeSet<ImageId> = ds.annotations.iter().map(|a| a.image_id).collect();
    let mut by_res: BTreeMap<Resolution, Vec<ImageId>> = BTreeMap::new();
    let mut ids = background_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    for id in ids {
        let im = ds.image(id).ok_or(GenerationError::UnknownBackground(id))?;
        if annotated.contains(&id) {
            return Err(GenerationError::DefectiveBackground(id));
        }
        by_res.entry(im.resolution()).or_default().push(id);
    }
    let draws = plan_draws(pool, &by_res, cfg.count, seed)?;
    let prompt_hash = prompt.hash();
    let results = map_bounded(&draws, cfg.concurrency, |_, d| {
        let sm = &pool.masks[d.mask];
        let im = ds.image(d.background).expect("checked above");
        let attempt = || -> Result<Candidate, GenerationError> {
            let pixels = load_record_rgb(im)?;
            let (req, crop) = prepare_inpaint_input(im, &pixels, false, sm, &prompt.text, d.seed, cfg.steps)?;
            drop(pixels);
            let out = backend.inpaint(&req)?;
            let id = candidate_id(d.index);
            store.put(&id, &out.image, &req.mask_patch)?;
            Ok(Candidate {
                candidate_id: id,
                index: d.index,
                synthetic_mask_id: sm.mask_id.clone(),
                background_image_id: d.background,
                crop,
                seed: d.seed,
                steps: cfg.steps,
                prompt_hash: prompt_hash.clone(),
                backend_metadata: out.metadata,
                scores: None,
            })
        };
        attempt().map_err(|e| GenerationGap {
            index: d.index,
            synthetic_mask_id: sm.mask_id.clone(),
            background_image_id: d.background,
            error: e.to_string(),
        })
    });
    let mut candidates = Vec::new();
    let mut gaps = Vec::new();
    for r in results {
        match r {
            Ok(c) => candidates.push(c),
            Err(g) => {
                warn!("candidate {} skipped: {}", g.index, g.error);
                gaps.push(g);
            }
        }
    }
    let attempted = draws.len();
    if (candidates.len() as f64) < MIN_SUCCESS_RATE * attempted as f64 {
        return Err(GenerationError::BackendUnavailable {
            attempted,
            succeeded: candidates.len(),
        });
    }
    Ok(CandidatePool {
        seed,
        attempted,
        succeeded: candidates.len(),
        prompt_hash,
        candidates,
        gaps,
    })
}
