//! Context-padded 1024×1024 defect patches.
//!
//! The crop window around a defect is a square whose area is three times the
//! bbox area (the bbox plus roughly twice its area of surrounding context).

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AnnotationId, AnnotationInstance, Dataset, ImageId, ImageRecord};
use crate::imageio::{self, IoError};
use crate::raster::{crop_rgb, resize_bilinear, BinaryMask, PixelBox};

pub const PATCH_SIDE: u32 = 1024;

/// Maximum fraction of a patch the defect mask may cover.
pub const MAX_MASK_COVERAGE: f64 = 0.9;

/// Crop windows whose IoU exceeds this are treated as overlapping defects.
pub const OVERLAP_IOU: f64 = 0.5;

pub const CROP_RULE: &str = "side = ceil(sqrt(3 * bbox_w * bbox_h)), centred, translated into the image, shrunk to min(w, h) if larger";
pub const OVERLAP_RULE: &str = "crop-window IoU > 0.5 keeps only the larger-area instance";

#[derive(Debug, Error)]
pub enum PatchError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("annotation {0}: mask is empty after resizing to the patch")]
    EmptyMaskAfterResize(AnnotationId),
    #[error("annotation {0}: mask covers {1:.3} of the patch (limit 0.9)")]
    MaskCoverage(AnnotationId, f64),
    #[error("crop {0:?} does not fit image {1}x{2}")]
    CropOutOfBounds(CropRect, u32, u32),
    #[error("image {id} is {actual:?} on disk but recorded as {recorded:?}")]
    DimensionMismatch {
        id: ImageId,
        actual: (u32, u32),
        recorded: (u32, u32),
    },
    #[error("split is empty")]
    EmptySplit,
}

/// Square crop window in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropRect {
    pub x: u32,
    pub y: u32,
    pub side: u32,
    /// Whether the window had to be translated or shrunk to fit the image.
    #[serde(default)]
    pub clamped: bool,
}

impl CropRect {
    pub fn to_box(&self) -> PixelBox {
        PixelBox::new(self.x, self.y, self.side, self.side)
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.side > 0 && self.x + self.side <= width && self.y + self.side <= height
    }

    pub fn scale_factor(&self) -> f64 {
        PATCH_SIDE as f64 / self.side as f64
    }
}

/// Square window centred on `bbox` (`[x, y, w, h]`) with three times its
/// area, translated to lie inside the image and shrunk only if the image is
/// smaller than the window.
pub fn crop_window(bbox: [f64; 4], image_dims: (u32, u32)) -> CropRect {
    let [bx, by, bw, bh] = bbox;
    let (iw, ih) = image_dims;
    let wanted = (3.0 * bw * bh).sqrt().ceil().max(1.0) as u32;
    let side = wanted.min(iw).min(ih);
    let place = |centre: f64, limit: u32| -> (u32, bool) {
        let start = (centre - side as f64 / 2.0).floor();
        let max = (limit - side) as f64;
        let clamped = start.clamp(0.0, max);
        (clamped as u32, clamped != start)
    };
    let (x, cx) = place(bx + bw / 2.0, iw);
    let (y, cy) = place(by + bh / 2.0, ih);
    CropRect {
        x,
        y,
        side,
        clamped: cx || cy || side < wanted,
    }
}

#[derive(Debug, Clone)]
pub struct DefectPatch {
    pub patch_id: String,
    pub source_annotation_id: AnnotationId,
    pub source_image_id: ImageId,
    pub image: RgbImage,
    pub mask: BinaryMask,
    pub crop: CropRect,
    pub scale_factor: f64,
}

impl DefectPatch {
    /// Maps the patch mask back into full-image coordinates.
    pub fn reproject_mask(&self, image_dims: (u32, u32)) -> BinaryMask {
        self.mask
            .resize_nearest(self.crop.side, self.crop.side)
            .embed(image_dims.0, image_dims.1, self.crop.x, self.crop.y)
    }
}

pub fn patch_id(annotation_id: AnnotationId) -> String {
    format!("p{annotation_id:06}")
}

/// Crops `crop` out of `image` and resizes it to the patch size (bilinear
/// for pixels, nearest-neighbour for the instance mask).
pub fn extract_patch(
    image: &RgbImage,
    annotation: &AnnotationInstance,
    crop: CropRect,
) -> Result<DefectPatch, PatchError> {
    let (w, h) = image.dimensions();
    if !crop.fits(w, h) {
        return Err(PatchError::CropOutOfBounds(crop, w, h));
    }
    let rect = crop.to_box();
    let pixels = resize_bilinear(&crop_rgb(image, rect), PATCH_SIDE, PATCH_SIDE);
    let mask = annotation
        .mask()
        .crop(rect)
        .resize_nearest(PATCH_SIDE, PATCH_SIDE);
    let area = mask.area();
    if area == 0 {
        return Err(PatchError::EmptyMaskAfterResize(annotation.id));
    }
    let coverage = area as f64 / (PATCH_SIDE as f64 * PATCH_SIDE as f64);
    if coverage >= MAX_MASK_COVERAGE {
        return Err(PatchError::MaskCoverage(annotation.id, coverage));
    }
    Ok(DefectPatch {
        patch_id: patch_id(annotation.id),
        source_annotation_id: annotation.id,
        source_image_id: annotation.image_id,
        image: pixels,
        mask,
        crop,
        scale_factor: crop.scale_factor(),
    })
}

/// One patch to be extracted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchPlan {
    pub patch_id: String,
    pub source_annotation_id: AnnotationId,
    pub source_image_id: ImageId,
    pub crop: CropRect,
    /// Instances dropped because their window overlapped this one.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub suppressed: Vec<AnnotationId>,
}

/// Chooses which instances of the split images yield patches. Within an
/// image, instances are visited largest area first; an instance whose crop
/// window has IoU > 0.5 with an already kept window is dropped.
pub fn plan_patches(ds: &Dataset, split_ids: &[ImageId]) -> Result<Vec<PatchPlan>, PatchError> {
    if split_ids.is_empty() {
        return Err(PatchError::EmptySplit);
    }
    let by_image = ds.annotations_by_image();
    let mut plans = Vec::new();
    let mut ids = split_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    for id in ids {
        let (Some(im), Some(anns)) = (ds.image(id), by_image.get(&id)) else {
            continue;
        };
        let mut order: Vec<&AnnotationInstance> = anns.clone();
        order.sort_by(|a, b| b.area.total_cmp(&a.area).then(a.id.cmp(&b.id)));
        let mut kept: Vec<PatchPlan> = Vec::new();
        for a in order {
            let crop = crop_window(a.bbox, (im.width, im.height));
            if let Some(winner) = kept
                .iter_mut()
                .find(|k| k.crop.to_box().iou(&crop.to_box()) > OVERLAP_IOU)
            {
                winner.suppressed.push(a.id);
                continue;
            }
            kept.push(PatchPlan {
                patch_id: patch_id(a.id),
                source_annotation_id: a.id,
                source_image_id: id,
                crop,
                suppressed: Vec::new(),
            });
        }
        plans.extend(kept);
    }
    plans.sort_by_key(|p| p.source_annotation_id);
    Ok(plans)
}

pub fn load_record_rgb(record: &ImageRecord) -> Result<RgbImage, PatchError> {
    let img = imageio::load_rgb(&record.file_path)?;
    if img.dimensions() != (record.width, record.height) {
        return Err(PatchError::DimensionMismatch {
            id: record.id,
            actual: img.dimensions(),
            recorded: (record.width, record.height),
        });
    }
    Ok(img)
}

/// Extracts every planned patch of the split, loading source images from
/// disk. Holds all patches in memory; see [`extract_to_dir`] for large sets.
pub fn extract_all(ds: &Dataset, split_ids: &[ImageId]) -> Result<Vec<DefectPatch>, PatchError> {
    let plans = plan_patches(ds, split_ids)?;
    plans
        .par_iter()
        .map(|p| render_plan(ds, p))
        .collect()
}

fn render_plan(ds: &Dataset, plan: &PatchPlan) -> Result<DefectPatch, PatchError> {
    let im = ds.image(plan.source_image_id).expect("planned image exists");
    let ann = ds
        .annotation(plan.source_annotation_id)
        .expect("planned annotation exists");
    let pixels = load_record_rgb(im)?;
    extract_patch(&pixels, ann, plan.crop)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchIndexEntry {
    pub patch_id: String,
    pub source_annotation_id: AnnotationId,
    pub source_image_id: ImageId,
    pub crop: CropRect,
    pub scale_factor: f64,
    pub image_file: String,
    pub mask_file: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub suppressed: Vec<AnnotationId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchIndex {
    pub patch_side: u32,
    pub crop_rule: String,
    pub overlap_rule: String,
    pub patches: Vec<PatchIndexEntry>,
}

impl PatchIndex {
    pub fn load(dir: &Path) -> Result<PatchIndex, PatchError> {
        Ok(imageio::read_json(&dir.join("index.json"))?)
    }

    pub fn load_image(&self, dir: &Path, entry: &PatchIndexEntry) -> Result<RgbImage, PatchError> {
        Ok(imageio::load_rgb(&dir.join(&entry.image_file))?)
    }

    pub fn load_mask(&self, dir: &Path, entry: &PatchIndexEntry) -> Result<BinaryMask, PatchError> {
        Ok(imageio::load_mask_png(&dir.join(&entry.mask_file))?)
    }
}

/// Writes `<id>.png`, `<id>.mask.png` and `index.json` for every planned
/// patch, rendering in parallel without holding the whole set in memory.
pub fn extract_to_dir(ds: &Dataset, split_ids: &[ImageId], dir: &Path) -> Result<PatchIndex, PatchError> {
    let plans = plan_patches(ds, split_ids)?;
    let entries: Vec<PatchIndexEntry> = plans
        .par_iter()
        .map(|plan| {
            let patch = render_plan(ds, plan)?;
            let image_file = format!("{}.png", patch.patch_id);
            let mask_file = format!("{}.mask.png", patch.patch_id);
            imageio::save_png_rgb(&dir.join(&image_file), &patch.image)?;
            imageio::save_mask_png(&dir.join(&mask_file), &patch.mask)?;
            Ok(PatchIndexEntry {
                patch_id: patch.patch_id,
                source_annotation_id: patch.source_annotation_id,
                source_image_id: patch.source_image_id,
                crop: patch.crop,
                scale_factor: patch.scale_factor,
                image_file,
                mask_file,
                suppressed: plan.suppressed.clone(),
            })
        })
        .collect::<Result<_, PatchError>>()?;
    let index = PatchIndex {
        patch_side: PATCH_SIDE,
        crop_rule: CROP_RULE.into(),
        overlap_rule: OVERLAP_RULE.into(),
        patches: entries,
    };
    imageio::write_json(&dir.join("index.json"), &index)?;
    Ok(index)
}

/// Patch count per source image, handy for reports.
pub fn patches_per_image(plans: &[PatchPlan]) -> BTreeMap<ImageId, usize> {
    let mut m = BTreeMap::new();
    for p in plans {
        *m.entry(p.source_image_id).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::square_dataset;
    use crate::dataset::{Category, ImageRecord};
    use image::Rgb;

    #[test]
    fn crop_side_closed_form() {
        let c = crop_window([950.0, 950.0, 100.0, 100.0], (2000, 2000));
        assert_eq!(c.side, 174);
        assert_eq!((c.x, c.y), (913, 913));
        assert!(!c.clamped);
        // window centre sits on the bbox centre within half a pixel
        assert!((c.x as f64 + 87.0 - 1000.0).abs() <= 0.5);
    }

    #[test]
    fn crop_whole_image_bbox() {
        let c = crop_window([0.0, 0.0, 500.0, 500.0], (500, 500));
        assert_eq!((c.x, c.y, c.side), (0, 0, 500));
        assert!(c.clamped);
    }

    #[test]
    fn crop_near_left_edge_translates() {
        let c = crop_window([0.0, 100.0, 10.0, 40.0], (400, 400));
        assert_eq!(c.side, 35);
        assert_eq!(c.x, 0);
        assert!(c.clamped);
        // vertical placement untouched: centre 120 - 17.5 = 102.5 -> 102
        assert_eq!(c.y, 102);
    }

    #[test]
    fn crop_area_is_three_times_bbox() {
        for &(w, h) in &[(7.0, 13.0), (50.0, 50.0), (3.0, 90.0), (120.0, 33.0)] {
            let c = crop_window([500.0, 500.0, w, h], (2000, 2000));
            let ratio = (c.side as f64).powi(2) / (w * h);
            assert!(ratio >= 3.0 && ratio < 3.0 * (1.0 + 2.0 / c.side as f64) + 1e-9);
        }
    }

    fn disk_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 90]))
    }

    #[test]
    fn half_size_crop_scales_by_two() {
        let ds = square_dataset(2000, 2000, &[vec![(800, 800, 296)]]);
        let crop = CropRect { x: 700, y: 700, side: 512, clamped: false };
        let p = extract_patch(&disk_image(2000, 2000), &ds.annotations[0], crop).unwrap();
        assert_eq!(p.scale_factor, 2.0);
        assert_eq!(p.image.dimensions(), (PATCH_SIDE, PATCH_SIDE));
        assert_eq!(p.mask.dims(), (PATCH_SIDE, PATCH_SIDE));
    }

    #[test]
    fn single_pixel_mask_survives_unit_scale() {
        let ds = square_dataset(1100, 1100, &[vec![(512, 512, 1)]]);
        let crop = CropRect { x: 0, y: 0, side: 1024, clamped: false };
        let p = extract_patch(&disk_image(1100, 1100), &ds.annotations[0], crop).unwrap();
        assert_eq!(p.mask.area(), 1);
    }

    #[test]
    fn tiny_mask_lost_on_downscale_is_an_error() {
        let ds = square_dataset(3000, 3000, &[vec![(2, 2, 1)]]);
        let crop = CropRect { x: 0, y: 0, side: 3000, clamped: false };
        let err = extract_patch(&disk_image(3000, 3000), &ds.annotations[0], crop).unwrap_err();
        assert!(matches!(err, PatchError::EmptyMaskAfterResize(1)));
    }

    #[test]
    fn overlap_keeps_the_larger_instance() {
        // same centre, different size: windows overlap heavily
        let ds = square_dataset(600, 600, &[vec![(100, 100, 8), (99, 99, 10)]]);
        let plans = plan_patches(&ds, &[1]).unwrap();
        assert_eq!(plans.len(), 1);
        assert_eq!(plans[0].source_annotation_id, 2);
        assert_eq!(plans[0].suppressed, vec![1]);

        let ds = square_dataset(600, 600, &[vec![(10, 10, 8), (400, 400, 8)]]);
        assert_eq!(plan_patches(&ds, &[1]).unwrap().len(), 2);
        assert!(matches!(plan_patches(&ds, &[]), Err(PatchError::EmptySplit)));
    }

    fn disk_dataset(dir: &Path, w: u32, h: u32, disks: &[(f64, f64, f64)]) -> Dataset {
        let img = disk_image(w, h);
        let path = dir.join("img.png");
        img.save(&path).unwrap();
        let mut ds = Dataset {
            categories: vec![Category { id: 1, name: "d".into() }],
            images: vec![ImageRecord {
                id: 1,
                file_name: "img.png".into(),
                file_path: path,
                width: w,
                height: h,
            }],
            annotations: vec![],
        };
        for (i, &(cx, cy, r)) in disks.iter().enumerate() {
            let m = BinaryMask::from_fn(w, h, |x, y| {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                dx * dx + dy * dy <= r * r
            });
            let b = m.bbox().unwrap();
            ds.annotations.push(AnnotationInstance {
                id: i as u64 + 1,
                image_id: 1,
                category_id: 1,
                bbox: b.to_xywh(),
                area: m.area() as f64,
                segmentation: m.to_rle(),
                provenance: None,
            });
        }
        ds
    }

    #[test]
    fn reprojection_centroid_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let ds = disk_dataset(dir.path(), 1500, 700, &[(300.5, 200.5, 12.0), (1000.0, 400.0, 40.0), (30.0, 650.0, 25.0)]);
        let patches = extract_all(&ds, &[1]).unwrap();
        assert_eq!(patches.len(), 3);
        for p in &patches {
            let orig = ds.annotation(p.source_annotation_id).unwrap().mask();
            let iou = p.reproject_mask((1500, 700)).iou(&orig);
            assert!(iou >= 0.85, "iou {iou}");
            if !p.crop.clamped {
                let (cx, cy) = p.mask.centroid().unwrap();
                let lo = 0.2 * PATCH_SIDE as f64;
                let hi = 0.8 * PATCH_SIDE as f64;
                assert!(cx > lo && cx < hi && cy > lo && cy < hi);
            }
        }
        let again = extract_all(&ds, &[1]).unwrap();
        for (a, b) in patches.iter().zip(&again) {
            assert_eq!(a.image.as_raw(), b.image.as_raw());
            assert_eq!(a.mask, b.mask);
        }
    }

    #[test]
    fn extract_to_dir_writes_pairs_and_index() {
        let dir = tempfile::tempdir().unwrap();
        let ds = disk_dataset(dir.path(), 400, 300, &[(100.0, 100.0, 10.0)]);
        let out = dir.path().join("patches");
        let index = extract_to_dir(&ds, &[1], &out).unwrap();
        assert_eq!(index.patches.len(), 1);
        let e = &index.patches[0];
        assert!(out.join(&e.image_file).is_file());
        let m = index.load_mask(&out, e).unwrap();
        assert!(m.area() > 0);
        assert_eq!(PatchIndex::load(&out).unwrap(), index);
    }
}
