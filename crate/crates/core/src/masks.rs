//! Single-defect inpainting masks derived from real annotations by random
//! scaling and shifting under a placement prior.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AnnotationId, AnnotationInstance, Dataset, Heatmap, ImageId, Resolution};
use crate::imageio::{self, IoError};
use crate::raster::{BinaryMask, PixelBox};

pub const MAX_ATTEMPTS: u32 = 100;
pub const MIN_SUCCESS_RATE: f64 = 0.9;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("invalid transform config: {0}")]
    InvalidConfig(String),
    #[error("annotation {id} is on a {actual} image, target is {target}")]
    ResolutionMismatch {
        id: AnnotationId,
        actual: Resolution,
        target: Resolution,
    },
    #[error("annotation {0} has an empty mask")]
    EmptySource(AnnotationId),
    #[error("no placement for annotation {source_id} after {attempts} attempts")]
    PlacementFailed { source_id: AnnotationId, attempts: u32 },
    #[error("no training annotations at resolution {0}")]
    NoSourceAnnotations(Resolution),
    #[error("heatmap prior without a heatmap for {0}")]
    MissingHeatmap(Resolution),
    #[error("heatmap for {0} has no mass")]
    EmptyHeatmap(Resolution),
    #[error("only {succeeded} of {attempted} masks placed (need 90%)")]
    PoolBelowThreshold { attempted: usize, succeeded: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub shift_max: i32,
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig {
            scale_min: 0.8,
            scale_max: 1.2,
            shift_max: 50,
        }
    }
}

impl TransformConfig {
    pub fn validate(&self) -> Result<(), MaskError> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return Err(MaskError::InvalidConfig(format!(
                "scale range [{}, {}]",
                self.scale_min, self.scale_max
            )));
        }
        if self.shift_max < 0 {
            return Err(MaskError::InvalidConfig(format!("shift_max {}", self.shift_max)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskTransform {
    pub scale: f64,
    pub dx: i32,
    pub dy: i32,
    pub source_annotation_id: AnnotationId,
    pub rng_seed: u64,
}

/// Draws scale ~ U[scale_min, scale_max] and independent integer shifts
/// ~ U{-shift_max..=shift_max}. Source id and seed are filled by the caller.
pub fn sample_transform<R: Rng>(rng: &mut R, cfg: &TransformConfig) -> MaskTransform {
    let scale = if cfg.scale_min == cfg.scale_max {
        cfg.scale_min
    } else {
        rng.random_range(cfg.scale_min..=cfg.scale_max)
    };
    let (dx, dy) = sample_shift(rng, cfg);
    MaskTransform {
        scale,
        dx,
        dy,
        source_annotation_id: 0,
        rng_seed: 0,
    }
}

fn sample_shift<R: Rng>(rng: &mut R, cfg: &TransformConfig) -> (i32, i32) {
    let s = cfg.shift_max;
    (rng.random_range(-s..=s), rng.random_range(-s..=s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlacementMode {
    SourcePosition,
    FullArea,
    HeatmapWeighted,
}

#[derive(Debug, Clone)]
pub struct PlacementPrior {
    mode: PlacementMode,
    heatmap: Option<(Heatmap, WeightedIndex<u64>)>,
}

impl PlacementPrior {
    pub fn source_position() -> Self {
        PlacementPrior { mode: PlacementMode::SourcePosition, heatmap: None }
    }

    pub fn full_area() -> Self {
        PlacementPrior { mode: PlacementMode::FullArea, heatmap: None }
    }

    pub fn heatmap_weighted(h: Heatmap) -> Result<Self, MaskError> {
        let w = WeightedIndex::new(h.counts.iter().copied()).map_err(|_| MaskError::EmptyHeatmap(h.resolution))?;
        Ok(PlacementPrior { mode: PlacementMode::HeatmapWeighted, heatmap: Some((h, w)) })
    }

    pub fn mode(&self) -> PlacementMode {
        self.mode
    }

    /// Base centroid before the (dx, dy) shift.
    fn base_centroid<R: Rng>(&self, rng: &mut R, source: (f64, f64), res: Resolution) -> (f64, f64) {
        match &self.heatmap {
            None if self.mode == PlacementMode::SourcePosition => source,
            None => (
                rng.random_range(0.0..res.width as f64),
                rng.random_range(0.0..res.height as f64),
            ),
            Some((h, w)) => {
                let cell = w.sample(rng) as u32;
                let (gx, gy) = (cell % h.grid_width, cell / h.grid_width);
                let d = h.downscale as f64;
                let x0 = gx as f64 * d;
                let y0 = gy as f64 * d;
                let x1 = (x0 + d).min(res.width as f64);
                let y1 = (y0 + d).min(res.height as f64);
                (rng.random_range(x0..x1), rng.random_range(y0..y1))
            }
        }
    }
}

/// Largest connected component of an annotation, cropped to its bbox.
#[derive(Debug, Clone)]
pub struct SourceShape {
    pub annotation_id: AnnotationId,
    pub resolution: Resolution,
    pub local: BinaryMask,
    pub offset: (u32, u32),
    pub centroid: (f64, f64),
}

impl SourceShape {
    pub fn from_annotation(ann: &AnnotationInstance, resolution: Resolution) -> Result<Self, MaskError> {
        let full = ann.mask().largest_component();
        let b = full.bbox().ok_or(MaskError::EmptySource(ann.id))?;
        let local = full.crop(b);
        let (lx, ly) = local.centroid().expect("non-empty");
        Ok(SourceShape {
            annotation_id: ann.id,
            resolution,
            local,
            offset: (b.x, b.y),
            centroid: (lx + b.x as f64, ly + b.y as f64),
        })
    }

    pub fn area(&self) -> u64 {
        self.local.area()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticMask {
    pub mask_id: String,
    pub resolution: Resolution,
    /// Mask cropped to its bounding box.
    pub local: BinaryMask,
    pub bbox: PixelBox,
    pub transform: MaskTransform,
    pub target_centroid: (f64, f64),
    pub attempts: u32,
}

impl SyntheticMask {
    pub fn full(&self) -> BinaryMask {
        self.local
            .embed(self.resolution.width, self.resolution.height, self.bbox.x, self.bbox.y)
    }

    pub fn area(&self) -> u64 {
        self.local.area()
    }

    pub fn centroid(&self) -> (f64, f64) {
        let (x, y) = self.local.centroid().expect("synthetic masks are non-empty");
        (x + self.bbox.x as f64, y + self.bbox.y as f64)
    }
}

/// Sub-samples per output pixel along each axis.
const SUPERSAMPLE: u32 = 4;

/// Scales the shape about its centroid and places the centroid at `target`.
/// Each output pixel is inverse-mapped with 4×4 sub-samples to estimate its
/// coverage; the mask is re-binarized by keeping the `round(scale² · area)`
/// best-covered pixels (ties: nearest to `target`, then raster order), so the
/// area follows the transform exactly up to rounding. Returns `None` when the
/// result leaves the frame, is empty or is not a single 8-connected
/// component.
fn place(shape: &SourceShape, scale: f64, target: (f64, f64), res: Resolution) -> Option<(PixelBox, BinaryMask)> {
    let (cx, cy) = shape.centroid;
    let (ox, oy) = (shape.offset.0 as f64, shape.offset.1 as f64);
    let (lw, lh) = (shape.local.width() as f64, shape.local.height() as f64);
    // forward image of the source bbox, padded by a pixel
    let fx0 = ((ox - cx) * scale + target.0).floor() as i64 - 1;
    let fy0 = ((oy - cy) * scale + target.1).floor() as i64 - 1;
    let fx1 = ((ox + lw - cx) * scale + target.0).ceil() as i64 + 1;
    let fy1 = ((oy + lh - cy) * scale + target.1).ceil() as i64 + 1;
    let n = SUPERSAMPLE as i64;
    let sub: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    let src_index = |v: f64, c: f64, t: f64, off: u32| ((c + (v - t) / scale).floor() as i64) - off as i64;
    let mut covered: Vec<(i64, f64, i64, i64)> = Vec::new();
    for y in fy0..fy1 {
        let rows: Vec<i64> = sub.iter().map(|f| src_index(y as f64 + f, cy, target.1, shape.offset.1)).collect();
        for x in fx0..fx1 {
            let mut count = 0;
            for f in &sub {
                let lx = src_index(x as f64 + f, cx, target.0, shape.offset.0);
                count += rows.iter().filter(|&&ly| shape.local.get_signed(lx, ly)).count() as i64;
            }
            if count > 0 {
                let d = (x as f64 + 0.5 - target.0).powi(2) + (y as f64 + 0.5 - target.1).powi(2);
                covered.push((count, d, y, x));
            }
        }
    }
    let keep = ((scale * scale * shape.area() as f64).round() as usize).max(1);
    covered.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.total_cmp(&b.1)).then((a.2, a.3).cmp(&(b.2, b.3))));
    covered.truncate(keep);
    let mut hits = Vec::with_capacity(covered.len());
    for &(_, _, y, x) in &covered {
        if x < 0 || y < 0 || x >= res.width as i64 || y >= res.height as i64 {
            return None;
        }
        hits.push((x as u32, y as u32));
    }
    if hits.is_empty() {
        return None;
    }
    let x0 = hits.iter().map(|p| p.0).min().expect("non-empty");
    let y0 = hits.iter().map(|p| p.1).min().expect("non-empty");
    let x1 = hits.iter().map(|p| p.0).max().expect("non-empty");
    let y1 = hits.iter().map(|p| p.1).max().expect("non-empty");
    let mut local = BinaryMask::new(x1 - x0 + 1, y1 - y0 + 1);
    for (x, y) in hits {
        local.set(x - x0, y - y0, true);
    }
    if local.component_count() != 1 {
        return None;
    }
    Some((PixelBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1), local))
}

/// Places one transformed copy of `shape`. On rejection the shift (and the
/// random base position, for random priors) is redrawn while the scale is
/// kept, up to [`MAX_ATTEMPTS`] attempts in total.
pub fn synthesize_shape<R: Rng>(
    shape: &SourceShape,
    t: MaskTransform,
    target: Resolution,
    prior: &PlacementPrior,
    cfg: &TransformConfig,
    rng: &mut R,
) -> Result<SyntheticMask, MaskError> {
    if shape.resolution != target {
        return Err(MaskError::ResolutionMismatch {
            id: shape.annotation_id,
            actual: shape.resolution,
            target,
        });
    }
    let mut t = t;
    t.source_annotation_id = shape.annotation_id;
    let mut base = prior.base_centroid(rng, shape.centroid, target);
    for attempt in 1..=MAX_ATTEMPTS {
        if attempt > 1 {
            let (dx, dy) = sample_shift(rng, cfg);
            t.dx = dx;
            t.dy = dy;
            if prior.mode != PlacementMode::SourcePosition {
                base = prior.base_centroid(rng, shape.centroid, target);
            }
        }
        let centre = (base.0 + t.dx as f64, base.1 + t.dy as f64);
        if let Some((bbox, local)) = place(shape, t.scale, centre, target) {
            return Ok(SyntheticMask {
                mask_id: String::new(),
                resolution: target,
                local,
                bbox,
                transform: t,
                target_centroid: centre,
                attempts: attempt,
            });
        }
    }
    Err(MaskError::PlacementFailed {
        source_id: shape.annotation_id,
        attempts: MAX_ATTEMPTS,
    })
}

/// Convenience wrapper taking an annotation directly.
pub fn synthesize_mask<R: Rng>(
    ann: &AnnotationInstance,
    ann_resolution: Resolution,
    t: MaskTransform,
    target: Resolution,
    prior: &PlacementPrior,
    cfg: &TransformConfig,
    rng: &mut R,
) -> Result<SyntheticMask, MaskError> {
    let shape = SourceShape::from_annotation(ann, ann_resolution)?;
    synthesize_shape(&shape, t, target, prior, cfg, rng)
}

/// Seed for stream `index` of a run seeded with `seed` (SplitMix64 mix).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementFailure {
    pub index: usize,
    pub resolution: Resolution,
    pub source_annotation_id: AnnotationId,
    pub attempts: u32,
}

#[derive(Debug, Clone)]
pub struct MaskPool {
    pub seed: u64,
    pub per_resolution: usize,
    pub mode: PlacementMode,
    pub masks: Vec<SyntheticMask>,
    pub failures: Vec<PlacementFailure>,
}

impl MaskPool {
    pub fn attempted(&self) -> usize {
        self.masks.len() + self.failures.len()
    }

    pub fn get(&self, mask_id: &str) -> Option<&SyntheticMask> {
        self.masks.iter().find(|m| m.mask_id == mask_id)
    }
}

pub fn mask_id(index: usize) -> String {
    format!("m{index:05}")
}

/// Builds `per_resolution` masks for every resolution in `priors`, cycling
/// round-robin over the training annotations at that resolution. Mask `i`
/// draws from its own RNG seeded by `derive_seed(seed, i)`.
pub fn generate_pool(
    ds: &Dataset,
    train_ids: &[ImageId],
    per_resolution: usize,
    priors: &BTreeMap<Resolution, PlacementPrior>,
    cfg: &TransformConfig,
    seed: u64,
) -> Result<MaskPool, MaskError> {
    cfg.validate()?;
    if per_resolution == 0 {
        return Err(MaskError::InvalidConfig("per_resolution must be >= 1".into()));
    }
    let train: std::collections::BTreeSet<ImageId> = train_ids.iter().copied().collect();
    let mut mode = PlacementMode::SourcePosition;
    let mut jobs: Vec<(usize, Resolution, &PlacementPrior)> = Vec::new();
    let mut sources: BTreeMap<Resolution, Vec<SourceShape>> = BTreeMap::new();
    for (r_idx, (&res, prior)) in priors.iter().enumerate() {
        mode = prior.mode;
        let mut anns: Vec<&AnnotationInstance> = ds
            .annotations
            .iter()
            .filter(|a| {
                train.contains(&a.image_id)
                    && ds.image(a.image_id).is_some_and(|im| im.resolution() == res)
            })
            .collect();
        anns.sort_by_key(|a| a.id);
        if anns.is_empty() {
            return Err(MaskError::NoSourceAnnotations(res));
        }
        let shapes = anns
            .par_iter()
            .map(|a| SourceShape::from_annotation(a, res))
            .collect::<Result<Vec<_>, _>>()?;
        sources.insert(res, shapes);
        for k in 0..per_resolution {
            jobs.push((r_idx * per_resolution + k, res, prior));
        }
    }
    let results: Vec<Result<SyntheticMask, PlacementFailure>> = jobs
        .par_iter()
        .map(|&(index, res, prior)| {
            let shapes = &sources[&res];
            let shape = &shapes[(index % per_resolution) % shapes.len()];
            let rng_seed = derive_seed(seed, index as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            let mut t = sample_transform(&mut rng, cfg);
            t.rng_seed = rng_seed;
            match synthesize_shape(shape, t, res, prior, cfg, &mut rng) {
                Ok(mut m) => {
                    m.mask_id = mask_id(index);
                    Ok(m)
                }
                Err(_) => Err(PlacementFailure {
                    index,
                    resolution: res,
                    source_annotation_id: shape.annotation_id,
                    attempts: MAX_ATTEMPTS,
                }),
            }
        })
        .collect();
    let mut masks = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(m) => masks.push(m),
            Err(f) => failures.push(f),
        }
    }
    let attempted = masks.len() + failures.len();
    if (masks.len() as f64) < MIN_SUCCESS_RATE * attempted as f64 {
        return Err(MaskError::PoolBelowThreshold {
            attempted,
            succeeded: masks.len(),
        });
    }
    if !failures.is_empty() {
        log::warn!("{} of {attempted} mask placements failed", failures.len());
    }
    Ok(MaskPool {
        seed,
        per_resolution,
        mode,
        masks,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskIndexEntry {
    pub mask_id: String,
    pub resolution: Resolution,
    pub file: String,
    pub bbox: [u32; 4],
    pub area: u64,
    pub target_centroid: [f64; 2],
    pub attempts: u32,
    pub transform: MaskTransform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskIndex {
    pub seed: u64,
    pub per_resolution: usize,
    pub placement: PlacementMode,
    pub transform_order: String,
    pub masks: Vec<MaskIndexEntry>,
    pub failures: Vec<PlacementFailure>,
}

/// Writes every mask as a full-frame 1-bit PNG plus `index.json`.
pub fn save_pool(pool: &MaskPool, dir: &Path) -> Result<MaskIndex, MaskError> {
    let entries = pool
        .masks
        .par_iter()
        .map(|m| {
            let file = format!("{}.png", m.mask_id);
            imageio::save_mask_png(&dir.join(&file), &m.full())?;
            Ok(MaskIndexEntry {
                mask_id: m.mask_id.clone(),
                resolution: m.resolution,
                file,
                bbox: [m.bbox.x, m.bbox.y, m.bbox.w, m.bbox.h],
                area: m.area(),
                target_centroid: [m.target_centroid.0, m.target_centroid.1],
                attempts: m.attempts,
                transform: m.transform,
            })
        })
        .collect::<Result<Vec<_>, MaskError>>()?;
    let index = MaskIndex {
        seed: pool.seed,
        per_resolution: pool.per_resolution,
        placement: pool.mode,
        transform_order: "scale about source centroid, then place centroid at prior position + (dx, dy)".into(),
        masks: entries,
        failures: pool.failures.clone(),
    };
    imageio::write_json(&dir.join("index.json"), &index)?;
    Ok(index)
}

pub fn load_pool(dir: &Path) -> Result<MaskPool, MaskError> {
    let index: MaskIndex = imageio::read_json(&dir.join("index.json"))?;
    let masks = index
        .masks
        .par_iter()
        .map(|e| {
            let full = imageio::load_mask_png(&dir.join(&e.file))?;
            let bbox = PixelBox::new(e.bbox[0], e.bbox[1], e.bbox[2], e.bbox[3]);
            Ok(SyntheticMask {
                mask_id: e.mask_id.clone(),
                resolution: e.resolution,
                local: full.crop(bbox),
                bbox,
                transform: e.transform,
                target_centroid: (e.target_centroid[0], e.target_centroid[1]),
                attempts: e.attempts,
            })
        })
        .collect::<Result<Vec<_>, MaskError>>()?;
    Ok(MaskPool {
        seed: index.seed,
        per_resolution: index.per_resolution,
        mode: index.placement,
        masks,
        failures: index.failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::square_dataset;
    use proptest::prelude::*;

    fn ellipse_shape(res: Resolution, cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> SourceShape {
        let m = BinaryMask::from_fn(res.width, res.height, |x, y| {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let u = dx * theta.cos() + dy * theta.sin();
            let v = -dx * theta.sin() + dy * theta.cos();
            (u / a).powi(2) + (v / b).powi(2) <= 1.0
        });
        let b = m.bbox().unwrap();
        let local = m.crop(b);
        let (lx, ly) = local.centroid().unwrap();
        SourceShape {
            annotation_id: 1,
            resolution: res,
            local,
            offset: (b.x, b.y),
            centroid: (lx + b.x as f64, ly + b.y as f64),
        }
    }

    #[test]
    fn transforms_are_seeded_and_ranged() {
        let cfg = TransformConfig::default();
        let a = sample_transform(&mut ChaCha8Rng::seed_from_u64(0), &cfg);
        let b = sample_transform(&mut ChaCha8Rng::seed_from_u64(0), &cfg);
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sum = 0.0;
        for _ in 0..10_000 {
            let t = sample_transform(&mut rng, &cfg);
            assert!((0.8..=1.2).contains(&t.scale) && t.dx.abs() <= 50 && t.dy.abs() <= 50);
            sum += t.scale;
        }
        assert!((sum / 10_000.0 - 1.0).abs() < 0.01);
        let id = TransformConfig { scale_min: 1.0, scale_max: 1.0, shift_max: 0 };
        let t = sample_transform(&mut rng, &id);
        assert_eq!((t.scale, t.dx, t.dy), (1.0, 0, 0));
    }

    #[test]
    fn identity_reproduces_source() {
        let res = Resolution::new(300, 200);
        let ds = square_dataset(300, 200, &[vec![(40, 50, 17)]]);
        let ann = &ds.annotations[0];
        let id = TransformConfig { scale_min: 1.0, scale_max: 1.0, shift_max: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = sample_transform(&mut rng, &id);
        let m = synthesize_mask(ann, res, t, res, &PlacementPrior::source_position(), &id, &mut rng).unwrap();
        assert_eq!(m.full(), ann.mask());
        assert_eq!(m.attempts, 1);
    }

    #[test]
    fn upscaled_square_area() {
        // 10x10 square scaled by 1.2 about its centroid
        let res = Resolution::new(200, 200);
        let ds = square_dataset(200, 200, &[vec![(95, 95, 10)]]);
        let shape = SourceShape::from_annotation(&ds.annotations[0], res).unwrap();
        let t = MaskTransform { scale: 1.2, dx: 0, dy: 0, source_annotation_id: 1, rng_seed: 0 };
        let cfg = TransformConfig::default();
        let m = synthesize_shape(&shape, t, res, &PlacementPrior::source_position(), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((138..=150).contains(&m.area()), "area {}", m.area());
    }

    #[test]
    fn edge_placement_is_resampled_or_fails() {
        let res = Resolution::new(120, 120);
        let shape = ellipse_shape(res, 110.0, 60.0, 8.0, 5.0, 0.0);
        let cfg = TransformConfig::default();
        let t = MaskTransform { scale: 1.0, dx: 50, dy: 0, source_annotation_id: 1, rng_seed: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = synthesize_shape(&shape, t, res, &PlacementPrior::source_position(), &cfg, &mut rng).unwrap();
        assert!(m.attempts > 1);
        assert!(m.bbox.right() <= 120);
        // a shape wider than the frame can never be placed
        let wide = ellipse_shape(Resolution::new(120, 120), 60.0, 60.0, 55.0, 3.0, 0.0);
        let t = MaskTransform { scale: 1.2, ..t };
        let err = synthesize_shape(&wide, t, res, &PlacementPrior::source_position(), &cfg, &mut rng).unwrap_err();
        assert!(matches!(err, MaskError::PlacementFailed { attempts: 100, .. }));
    }

    #[test]
    fn pool_is_deterministic_and_round_trips() {
        let ds = square_dataset(
            400,
            300,
            &[vec![(100, 100, 12)], vec![(200, 60, 20), (50, 200, 9)], vec![]],
        );
        let res = Resolution::new(400, 300);
        let heat = crate::dataset::spatial_heatmap(&ds, res, 8).unwrap();
        for prior in [
            PlacementPrior::source_position(),
            PlacementPrior::full_area(),
            PlacementPrior::heatmap_weighted(heat.clone()).unwrap(),
        ] {
            let priors = BTreeMap::from([(res, prior)]);
            let cfg = TransformConfig::default();
            let a = generate_pool(&ds, &[1, 2, 3], 40, &priors, &cfg, 9).unwrap();
            let b = generate_pool(&ds, &[1, 2, 3], 40, &priors, &cfg, 9).unwrap();
            assert_eq!(a.masks.len(), 40);
            for (x, y) in a.masks.iter().zip(&b.masks) {
                assert_eq!(x.mask_id, y.mask_id);
                assert_eq!(x.full(), y.full());
                let full = x.full();
                assert_eq!(full.component_count(), 1);
                let (cx, cy) = x.centroid();
                assert!((cx - x.target_centroid.0).abs() <= 1.0 && (cy - x.target_centroid.1).abs() <= 1.0);
            }
            let dir = tempfile::tempdir().unwrap();
            save_pool(&a, dir.path()).unwrap();
            let back = load_pool(dir.path()).unwrap();
            assert_eq!(back.masks.len(), a.masks.len());
            assert_eq!(back.masks[7].full(), a.masks[7].full());
            assert_eq!(back.masks[7].transform, a.masks[7].transform);
        }
        let one = generate_pool(&ds, &[1], 1, &BTreeMap::from([(res, PlacementPrior::full_area())]), &TransformConfig::default(), 0).unwrap();
        assert_eq!(one.masks.len(), 1);
        let none = generate_pool(&ds, &[3], 1, &BTreeMap::from([(res, PlacementPrior::full_area())]), &TransformConfig::default(), 0);
        assert!(matches!(none, Err(MaskError::NoSourceAnnotations(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn area_and_centroid_follow_the_transform(
            a in 8.0f64..25.0, b in 5.0f64..20.0, theta in 0.0f64..std::f64::consts::PI,
            scale in 0.8f64..1.2, dx in -50i32..=50, dy in -50i32..=50,
        ) {
            let res = Resolution::new(320, 320);
            let shape = ellipse_shape(res, 160.3, 158.7, a, b, theta);
            prop_assume!(shape.area() >= 100);
            let t = MaskTransform { scale, dx, dy, source_annotation_id: 1, rng_seed: 0 };
            let cfg = TransformConfig::default();
            let m = synthesize_shape(&shape, t, res, &PlacementPrior::source_position(), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            prop_assert_eq!(m.attempts, 1);
            let ratio = m.area() as f64 / shape.area() as f64;
            prop_assert!((ratio - scale * scale).abs() <= 0.06, "ratio {} scale^2 {}", ratio, scale * scale);
            let (cx, cy) = m.centroid();
            prop_assert!((cx - (shape.centroid.0 + dx as f64)).abs() <= 1.0);
            prop_assert!((cy - (shape.centroid.1 + dy as f64)).abs() <= 1.0);
        }
    }
}
