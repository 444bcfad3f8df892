//! In-memory inspection dataset: COCO loading and saving, resolution
//! filtering, stratified splitting and defect statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coco::{CocoAnnotation, CocoCategory, CocoFile, CocoImage, CocoSegmentation, RleCounts};
use crate::imageio::{self, IoError};
use crate::raster::{rasterize_polygons, BinaryMask, PixelBox, Rle};

pub type ImageId = u64;
pub type AnnotationId = u64;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("image {0}: file not found at {1}")]
    MissingImageFile(ImageId, PathBuf),
    #[error("annotation {annotation_id} references missing {kind} {missing_id}")]
    DanglingReference {
        annotation_id: AnnotationId,
        kind: &'static str,
        missing_id: u64,
    },
    #[error("annotation {0}: malformed segmentation ({1})")]
    MalformedSegmentation(AnnotationId, String),
    #[error("annotation {0}: bounding box {1:?} is empty or outside the image")]
    InvalidBbox(AnnotationId, [f64; 4]),
    #[error("image {0}: width and height must be positive")]
    InvalidImage(ImageId),
    #[error("duplicate {0} id {1}")]
    DuplicateId(&'static str, u64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no image survives the resolution filter")]
    EmptyResult,
    #[error("{stratum} stratum has {size} images; at least 3 are needed to split")]
    InsufficientImages { stratum: &'static str, size: usize },
    #[error("no images at resolution {0}x{1}")]
    NoImagesAtResolution(u32, u32),
    #[error("{0} instances in split; at least 3 are needed for size buckets")]
    TooFewInstances(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: ImageId,
    /// Path as written in the annotation file.
    pub file_name: String,
    /// `file_name` resolved against the dataset root.
    pub file_path: PathBuf,
    pub width: u32,
    pub height: u32,
}

impl ImageRecord {
    pub fn resolution(&self) -> Resolution {
        Resolution::new(self.width, self.height)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationInstance {
    pub id: AnnotationId,
    pub image_id: ImageId,
    pub category_id: u32,
    /// COCO `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub segmentation: Rle,
    pub area: f64,
    pub provenance: Option<serde_json::Value>,
}

impl AnnotationInstance {
    pub fn mask(&self) -> BinaryMask {
        // validated at construction; counts always match the size
        self.segmentation
            .decode()
            .expect("annotation segmentation validated on load")
    }

    /// The bbox rounded outward to whole pixels.
    pub fn pixel_bbox(&self) -> PixelBox {
        let [x, y, w, h] = self.bbox;
        let x0 = x.floor().max(0.0) as u32;
        let y0 = y.floor().max(0.0) as u32;
        let x1 = (x + w).ceil() as u32;
        let y1 = (y + h).ceil() as u32;
        PixelBox::new(x0, y0, (x1 - x0).max(1), (y1 - y0).max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Resolution {
    pub width: u32,
    pub height: u32,
}

impl Resolution {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }
}

impl std::fmt::Display for Resolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

impl std::str::FromStr for Resolution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
        let w = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
        let h = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
        Ok(Resolution::new(w, h))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationInstance>,
    pub categories: Vec<Category>,
}

impl Dataset {
    pub fn image(&self, id: ImageId) -> Option<&ImageRecord> {
        self.images.iter().find(|im| im.id == id)
    }

    pub fn annotation(&self, id: AnnotationId) -> Option<&AnnotationInstance> {
        self.annotations.iter().find(|a| a.id == id)
    }

    /// Annotations grouped by image id, each group ordered by annotation id.
    pub fn annotations_by_image(&self) -> BTreeMap<ImageId, Vec<&AnnotationInstance>> {
        let mut map: BTreeMap<ImageId, Vec<&AnnotationInstance>> = BTreeMap::new();
        for a in &self.annotations {
            map.entry(a.image_id).or_default().push(a);
        }
        for v in map.values_mut() {
            v.sort_by_key(|a| a.id);
        }
        map
    }

    pub fn defective_image_ids(&self) -> BTreeSet<ImageId> {
        self.annotations.iter().map(|a| a.image_id).collect()
    }

    pub fn defect_free_image_ids(&self) -> BTreeSet<ImageId> {
        let defective = self.defective_image_ids();
        self.images
            .iter()
            .map(|im| im.id)
            .filter(|id| !defective.contains(id))
            .collect()
    }

    pub fn resolutions(&self) -> BTreeSet<Resolution> {
        self.images.iter().map(|im| im.resolution()).collect()
    }

    /// Validates every type invariant. `check_files` also requires each
    /// image file to exist.
    pub fn validate(&self, check_files: bool) -> Result<(), DatasetError> {
        let mut image_ids = HashMap::new();
        for im in &self.images {
            if image_ids.insert(im.id, im).is_some() {
                return Err(DatasetError::DuplicateId("image", im.id));
            }
            if im.width == 0 || im.height == 0 {
                return Err(DatasetError::InvalidImage(im.id));
            }
            if check_files && !im.file_path.is_file() {
                return Err(DatasetError::MissingImageFile(im.id, im.file_path.clone()));
            }
        }
        let category_ids: HashSet<u32> = self.categories.iter().map(|c| c.id).collect();
        let mut ann_ids = HashSet::new();
        for a in &self.annotations {
            if !ann_ids.insert(a.id) {
                return Err(DatasetError::DuplicateId("annotation", a.id));
            }
            let Some(im) = image_ids.get(&a.image_id) else {
                return Err(DatasetError::DanglingReference {
                    annotation_id: a.id,
                    kind: "image",
                    missing_id: a.image_id,
                });
            };
            if !category_ids.contains(&a.category_id) {
                return Err(DatasetError::DanglingReference {
                    annotation_id: a.id,
                    kind: "category",
                    missing_id: a.category_id as u64,
                });
            }
            check_bbox(a.id, a.bbox, im.width, im.height)?;
            if a.segmentation.size != [im.height, im.width] {
                return Err(DatasetError::MalformedSegmentation(
                    a.id,
                    format!(
                        "size {:?} does not match image {}x{}",
                        a.segmentation.size, im.width, im.height
                    ),
                ));
            }
            let mask = a
                .segmentation
                .decode()
                .map_err(|e| DatasetError::MalformedSegmentation(a.id, e.to_string()))?;
            check_mask_geometry(a.id, &mask, a.bbox)?;
            let raster_area = mask.area() as f64;
            if (raster_area - a.area).abs() > 0.01 * raster_area {
                return Err(DatasetError::MalformedSegmentation(
                    a.id,
                    format!("area {} differs from rasterized area {}", a.area, raster_area),
                ));
            }
        }
        Ok(())
    }
}

fn check_bbox(id: AnnotationId, bbox: [f64; 4], width: u32, height: u32) -> Result<(), DatasetError> {
    const EPS: f64 = 1e-6;
    let [x, y, w, h] = bbox;
    let ok = bbox.iter().all(|v| v.is_finite())
        && w > 0.0
        && h > 0.0
        && x >= -EPS
        && y >= -EPS
        && x + w <= width as f64 + EPS
        && y + h <= height as f64 + EPS;
    if ok {
        Ok(())
    } else {
        Err(DatasetError::InvalidBbox(id, bbox))
    }
}

fn check_mask_geometry(id: AnnotationId, mask: &BinaryMask, bbox: [f64; 4]) -> Result<(), DatasetError> {
    let Some(tight) = mask.bbox() else {
        return Err(DatasetError::MalformedSegmentation(id, "empty mask".into()));
    };
    let [x, y, w, h] = bbox;
    let inside = tight.x as f64 >= x.floor() - 1.0
        && tight.y as f64 >= y.floor() - 1.0
        && tight.right() as f64 <= (x + w).ceil() + 1.0
        && tight.bottom() as f64 <= (y + h).ceil() + 1.0;
    if inside {
        Ok(())
    } else {
        Err(DatasetError::MalformedSegmentation(
            id,
            format!("mask extent {tight:?} escapes bbox {bbox:?}"),
        ))
    }
}

/// Loads a COCO annotation file; relative `file_name`s resolve against
/// `root_dir`. Images without annotations are kept as defect-free images.
///
/// A recorded `area` that disagrees with the rasterized segmentation by more
/// than 1% is replaced by the rasterized area (with a warning).
pub fn load_coco(root_dir: &Path, annotation_file: &Path) -> Result<Dataset, DatasetError> {
    let file: CocoFile = imageio::read_json(annotation_file)?;
    from_coco(root_dir, file)
}

pub fn from_coco(root_dir: &Path, file: CocoFile) -> Result<Dataset, DatasetError> {
    let mut images = Vec::with_capacity(file.images.len());
    let mut dims = HashMap::new();
    for im in file.images {
        if dims.insert(im.id, (im.width, im.height)).is_some() {
            return Err(DatasetError::DuplicateId("image", im.id));
        }
        images.push(ImageRecord {
            id: im.id,
            file_path: root_dir.join(&im.file_name),
            file_name: im.file_name,
            width: im.width,
            height: im.height,
        });
    }
    let categories: Vec<Category> = file
        .categories
        .into_iter()
        .map(|c| Category { id: c.id, name: c.name })
        .collect();
    let category_ids: HashSet<u32> = categories.iter().map(|c| c.id).collect();

    let mut annotations = Vec::with_capacity(file.annotations.len());
    for a in file.annotations {
        let Some(&(w, h)) = dims.get(&a.image_id) else {
            return Err(DatasetError::DanglingReference {
                annotation_id: a.id,
                kind: "image",
                missing_id: a.image_id,
            });
        };
        if !category_ids.contains(&a.category_id) {
            return Err(DatasetError::DanglingReference {
                annotation_id: a.id,
                kind: "category",
                missing_id: a.category_id as u64,
            });
        }
        let malformed = |e: String| DatasetError::MalformedSegmentation(a.id, e);
        let rle = match &a.segmentation {
            CocoSegmentation::Polygons(polys) => rasterize_polygons(polys, w, h)
                .map_err(|e| malformed(e.to_string()))?
                .to_rle(),
            CocoSegmentation::Rle { size, counts } => {
                if *size != [h, w] {
                    return Err(malformed(format!(
                        "RLE size {size:?} does not match image {w}x{h}"
                    )));
                }
                let rle = match counts {
                    RleCounts::Uncompressed(c) => Rle {
                        size: *size,
                        counts: c.clone(),
                    },
                    RleCounts::Compressed(s) => {
                        Rle::from_compressed(*size, s).map_err(|e| malformed(e.to_string()))?
                    }
                };
                // normalise: validates the run lengths and canonicalises
                rle.decode().map_err(|e| malformed(e.to_string()))?.to_rle()
            }
        };
        let raster_area = rle.area() as f64;
        let area = if (raster_area - a.area).abs() > 0.01 * raster_area {
            warn!(
                "annotation {}: recorded area {} replaced by rasterized area {}",
                a.id, a.area, raster_area
            );
            raster_area
        } else {
            a.area
        };
        annotations.push(AnnotationInstance {
            id: a.id,
            image_id: a.image_id,
            category_id: a.category_id,
            bbox: a.bbox,
            segmentation: rle,
            area,
            provenance: a.provenance,
        });
    }
    let ds = Dataset {
        images,
        annotations,
        categories,
    };
    ds.validate(true)?;
    Ok(ds)
}

pub fn to_coco(ds: &Dataset) -> CocoFile {
    CocoFile {
        info: None,
        images: ds
            .images
            .iter()
            .map(|im| CocoImage {
                id: im.id,
                file_name: im.file_name.clone(),
                width: im.width,
                height: im.height,
            })
            .collect(),
        annotations: ds
            .annotations
            .iter()
            .map(|a| CocoAnnotation {
                id: a.id,
                image_id: a.image_id,
                category_id: a.category_id,
                bbox: a.bbox,
                segmentation: CocoSegmentation::Rle {
                    size: a.segmentation.size,
                    counts: RleCounts::Uncompressed(a.segmentation.counts.clone()),
                },
                area: a.area,
                iscrowd: 0,
                provenance: a.provenance.clone(),
            })
            .collect(),
        categories: ds
            .categories
            .iter()
            .map(|c| CocoCategory {
                id: c.id,
                name: c.name.clone(),
                supercategory: None,
            })
            .collect(),
    }
}

pub fn save_coco(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    imageio::write_json(path, &to_coco(ds))?;
    Ok(())
}

/// Keeps only images whose resolution is in `allowed`, together with their
/// annotations.
pub fn filter_resolutions(ds: &Dataset, allowed: &BTreeSet<Resolution>) -> Result<Dataset, DatasetError> {
    if allowed.is_empty() {
        return Err(DatasetError::InvalidArgument(
            "allowed resolution set is empty".into(),
        ));
    }
    let images: Vec<ImageRecord> = ds
        .images
        .iter()
        .filter(|im| allowed.contains(&im.resolution()))
        .cloned()
        .collect();
    if images.is_empty() {
        return Err(DatasetError::EmptyResult);
    }
    let kept: HashSet<ImageId> = images.iter().map(|im| im.id).collect();
    Ok(Dataset {
        images,
        annotations: ds
            .annotations
            .iter()
            .filter(|a| kept.contains(&a.image_id))
            .cloned()
            .collect(),
        categories: ds.categories.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub train: Vec<ImageId>,
    pub val: Vec<ImageId>,
    pub test: Vec<ImageId>,
}

impl SplitManifest {
    pub fn all_ids(&self) -> impl Iterator<Item = ImageId> + '_ {
        self.train.iter().chain(&self.val).chain(&self.test).copied()
    }
}

/// Image-level split, stratified over defective and defect-free images.
///
/// Per stratum of size `n`: `round(ratio_val·n)` validation images,
/// `round(ratio_test·n)` test images, remainder to train. Empty strata are
/// skipped; a non-empty stratum smaller than 3 is an error.
pub fn split(ds: &Dataset, ratios: [f64; 3], seed: u64) -> Result<SplitManifest, DatasetError> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatasetError::InvalidArgument(format!(
            "split ratios {ratios:?} must be in [0, 1] and sum to 1"
        )));
    }
    let strata = [
        ("defective", ds.defective_image_ids()),
        ("defect-free", ds.defect_free_image_ids()),
    ];
    if strata.iter().all(|(_, ids)| ids.is_empty()) {
        return Err(DatasetError::InsufficientImages {
            stratum: "all",
            size: 0,
        });
    }
    let mut out = SplitManifest {
        seed,
        ratios,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (stream, (name, ids)) in strata.into_iter().enumerate() {
        if ids.is_empty() {
            continue;
        }
        let n = ids.len();
        if n < 3 {
            return Err(DatasetError::InsufficientImages { stratum: name, size: n });
        }
        let mut ids: Vec<ImageId> = ids.into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64);
        ids.shuffle(&mut rng);
        let n_val = ((ratios[1] * n as f64).round() as usize).min(n);
        let n_test = ((ratios[2] * n as f64).round() as usize).min(n - n_val);
        let n_train = n - n_val - n_test;
        out.train.extend_from_slice(&ids[..n_train]);
        out.val.extend_from_slice(&ids[n_train..n_train + n_val]);
        out.test.extend_from_slice(&ids[n_train + n_val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectStats {
    pub image_count: usize,
    pub defective_images: usize,
    pub defect_free_images: usize,
    pub instance_count: usize,
    /// Number of defective images keyed by their instance count.
    pub instances_per_image: BTreeMap<usize, usize>,
    pub images_per_resolution: BTreeMap<String, usize>,
    /// Instance areas in annotation-id order.
    pub instance_areas: Vec<f64>,
}

pub fn defect_stats(ds: &Dataset) -> DefectStats {
    let by_image = ds.annotations_by_image();
    let mut hist = BTreeMap::new();
    for anns in by_image.values() {
        *hist.entry(anns.len()).or_insert(0) += 1;
    }
    let mut per_res = BTreeMap::new();
    for im in &ds.images {
        *per_res.entry(im.resolution().to_string()).or_insert(0) += 1;
    }
    let mut anns: Vec<&AnnotationInstance> = ds.annotations.iter().collect();
    anns.sort_by_key(|a| a.id);
    let defective = by_image.len();
    DefectStats {
        image_count: ds.images.len(),
        defective_images: defective,
        defect_free_images: ds.images.len() - defective,
        instance_count: ds.annotations.len(),
        instances_per_image: hist,
        images_per_resolution: per_res,
        instance_areas: anns.iter().map(|a| a.area).collect(),
    }
}

/// Accumulated defect locations for one image resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub resolution: Resolution,
    pub downscale: u32,
    pub grid_width: u32,
    pub grid_height: u32,
    /// Raw per-cell pixel counts, row-major.
    pub counts: Vec<u64>,
    /// `counts` divided by the maximum cell.
    pub grid: Vec<f64>,
    pub total_instances: usize,
}

impl Heatmap {
    pub fn total_mass(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn value(&self, gx: u32, gy: u32) -> f64 {
        self.grid[(gy * self.grid_width + gx) as usize]
    }

    /// Fraction of the accumulated mass whose cell centre lies in the upper
    /// left quadrant of the image.
    pub fn upper_left_fraction(&self) -> f64 {
        let total = self.total_mass();
        if total == 0 {
            return 0.0;
        }
        let (hw, hh) = (self.resolution.width as f64 / 2.0, self.resolution.height as f64 / 2.0);
        let mut mass = 0u64;
        for gy in 0..self.grid_height {
            let cy = (gy as f64 + 0.5) * self.downscale as f64;
            if cy >= hh {
                continue;
            }
            for gx in 0..self.grid_width {
                let cx = (gx as f64 + 0.5) * self.downscale as f64;
                if cx < hw {
                    mass += self.counts[(gy * self.grid_width + gx) as usize];
                }
            }
        }
        mass as f64 / total as f64
    }

    /// Grayscale rendering of the normalised grid.
    pub fn to_gray_image(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.grid_width, self.grid_height, |x, y| {
            image::Luma([(self.value(x, y) * 255.0).round() as u8])
        })
    }
}

/// Sums the rasterized masks of all instances on images of `resolution`.
/// `downscale` groups `downscale × downscale` pixels per cell.
pub fn spatial_heatmap(ds: &Dataset, resolution: Resolution, downscale: u32) -> Result<Heatmap, DatasetError> {
    if downscale == 0 {
        return Err(DatasetError::InvalidArgument("downscale must be >= 1".into()));
    }
    let ids: HashSet<ImageId> = ds
        .images
        .iter()
        .filter(|im| im.resolution() == resolution)
        .map(|im| im.id)
        .collect();
    if ids.is_empty() {
        return Err(DatasetError::NoImagesAtResolution(resolution.width, resolution.height));
    }
    let gw = resolution.width.div_ceil(downscale);
    let gh = resolution.height.div_ceil(downscale);
    let mut counts = vec![0u64; (gw * gh) as usize];
    let mut total = 0;
    for a in ds.annotations.iter().filter(|a| ids.contains(&a.image_id)) {
        total += 1;
        let m = a.mask();
        for y in 0..m.height() {
            for x in 0..m.width() {
                if m.get(x, y) {
                    counts[((y / downscale) * gw + x / downscale) as usize] += 1;
                }
            }
        }
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    let grid = counts
        .iter()
        .map(|&c| if max == 0 { 0.0 } else { c as f64 / max as f64 })
        .collect();
    Ok(Heatmap {
        resolution,
        downscale,
        grid_width: gw,
        grid_height: gh,
        counts,
        grid,
        total_instances: total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 3] = [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large];

    pub fn name(self) -> &'static str {
        match self {
            SizeBucket::Small => "small",
            SizeBucket::Medium => "medium",
            SizeBucket::Large => "large",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketAssignment {
    /// Upper (inclusive) area bounds of the small and medium buckets.
    pub thresholds: [f64; 2],
    pub buckets: BTreeMap<AnnotationId, SizeBucket>,
}

impl BucketAssignment {
    pub fn count(&self, bucket: SizeBucket) -> usize {
        self.buckets.values().filter(|&&b| b == bucket).count()
    }
}

/// Tercile size buckets over the instances of the given images. An area equal
/// to a threshold falls in the smaller bucket.
pub fn size_buckets(ds: &Dataset, split_ids: &[ImageId]) -> Result<BucketAssignment, DatasetError> {
    let ids: HashSet<ImageId> = split_ids.iter().copied().collect();
    let anns: Vec<&AnnotationInstance> = ds
        .annotations
        .iter()
        .filter(|a| ids.contains(&a.image_id))
        .collect();
    let n = anns.len();
    if n < 3 {
        return Err(DatasetError::TooFewInstances(n));
    }
    let mut areas: Vec<f64> = anns.iter().map(|a| a.area).collect();
    areas.sort_by(|a, b| a.total_cmp(b));
    let t1 = areas[n.div_ceil(3) - 1];
    let t2 = areas[(2 * n).div_ceil(3) - 1];
    let buckets = anns
        .iter()
        .map(|a| {
            let b = if a.area <= t1 {
                SizeBucket::Small
            } else if a.area <= t2 {
                SizeBucket::Medium
            } else {
                SizeBucket::Large
            };
            (a.id, b)
        })
        .collect();
    Ok(BucketAssignment {
        thresholds: [t1, t2],
        buckets,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::raster::BinaryMask;

    /// In-memory dataset with square instances; `instances[i]` lists
    /// `(x, y, side)` for image `i + 1`. Files are not checked.
    pub(crate) fn square_dataset(w: u32, h: u32, instances: &[Vec<(u32, u32, u32)>]) -> Dataset {
        let mut ds = Dataset {
            categories: vec![Category { id: 1, name: "defect".into() }],
            ..Default::default()
        };
        let mut next_ann = 1;
        for (i, list) in instances.iter().enumerate() {
            let id = i as u64 + 1;
            ds.images.push(ImageRecord {
                id,
                file_name: format!("{id}.png"),
                file_path: PathBuf::from(format!("{id}.png")),
                width: w,
                height: h,
            });
            for &(x, y, s) in list {
                let m = BinaryMask::from_fn(w, h, |px, py| px >= x && px < x + s && py >= y && py < y + s);
                ds.annotations.push(AnnotationInstance {
                    id: next_ann,
                    image_id: id,
                    category_id: 1,
                    bbox: [x as f64, y as f64, s as f64, s as f64],
                    area: m.area() as f64,
                    segmentation: m.to_rle(),
                    provenance: None,
                });
                next_ann += 1;
            }
        }
        ds
    }

    fn write_fixture(dir: &Path, json: &str, files: &[&str]) -> PathBuf {
        for f in files {
            std::fs::write(dir.join(f), b"x").unwrap();
        }
        let p = dir.join("ann.json");
        std::fs::write(&p, json).unwrap();
        p
    }

    #[test]
    fn empty_annotation_list_keeps_images() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_fixture(
            dir.path(),
            r#"{"images":[
                {"id":1,"file_name":"a.png","width":4,"height":4},
                {"id":2,"file_name":"b.png","width":4,"height":4},
                {"id":3,"file_name":"c.png","width":4,"height":4}],
              "annotations":[],"categories":[{"id":1,"name":"d"}]}"#,
            &["a.png", "b.png", "c.png"],
        );
        let ds = load_coco(dir.path(), &p).unwrap();
        assert_eq!(ds.images.len(), 3);
        assert!(ds.annotations.is_empty());
        assert_eq!(ds.defect_free_image_ids().len(), 3);
    }

    #[test]
    fn dangling_image_reference_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_fixture(
            dir.path(),
            r#"{"images":[{"id":1,"file_name":"a.png","width":4,"height":4}],
              "annotations":[{"id":5,"image_id":999,"category_id":1,"bbox":[0,0,1,1],
                "segmentation":[[0,0,1,0,1,1,0,1]],"area":1}],
              "categories":[{"id":1,"name":"d"}]}"#,
            &["a.png"],
        );
        match load_coco(dir.path(), &p) {
            Err(DatasetError::DanglingReference { missing_id, annotation_id, kind }) => {
                assert_eq!((missing_id, annotation_id, kind), (999, 5, "image"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_and_bad_segmentation() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_fixture(
            dir.path(),
            r#"{"images":[{"id":7,"file_name":"gone.png","width":4,"height":4}],
              "annotations":[],"categories":[]}"#,
            &[],
        );
        assert!(matches!(load_coco(dir.path(), &p), Err(DatasetError::MissingImageFile(7, _))));

        let p = write_fixture(
            dir.path(),
            r#"{"images":[{"id":1,"file_name":"a.png","width":4,"height":4}],
              "annotations":[{"id":3,"image_id":1,"category_id":1,"bbox":[0,0,1,1],
                "segmentation":{"size":[4,4],"counts":[3,2]},"area":2}],
              "categories":[{"id":1,"name":"d"}]}"#,
            &["a.png"],
        );
        assert!(matches!(
            load_coco(dir.path(), &p),
            Err(DatasetError::MalformedSegmentation(3, _))
        ));
    }

    #[test]
    fn segmentation_outside_dilated_bbox_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_fixture(
            dir.path(),
            r#"{"images":[{"id":1,"file_name":"a.png","width":10,"height":10}],
              "annotations":[{"id":3,"image_id":1,"category_id":1,"bbox":[0,0,2,2],
                "segmentation":[[0,0,6,0,6,6,0,6]],"area":36}],
              "categories":[{"id":1,"name":"d"}]}"#,
            &["a.png"],
        );
        assert!(matches!(
            load_coco(dir.path(), &p),
            Err(DatasetError::MalformedSegmentation(3, _))
        ));
    }

    #[test]
    fn area_is_replaced_when_off_by_more_than_one_percent() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_fixture(
            dir.path(),
            r#"{"images":[{"id":1,"file_name":"a.png","width":10,"height":10}],
              "annotations":[
                {"id":1,"image_id":1,"category_id":1,"bbox":[0,0,4,4],
                 "segmentation":[[0,0,4,0,4,4,0,4]],"area":16.1},
                {"id":2,"image_id":1,"category_id":1,"bbox":[0,0,4,4],
                 "segmentation":[[0,0,4,0,4,4,0,4]],"area":20}],
              "categories":[{"id":1,"name":"d"}]}"#,
            &["a.png"],
        );
        let ds = load_coco(dir.path(), &p).unwrap();
        assert_eq!(ds.annotations[0].area, 16.1);
        assert_eq!(ds.annotations[1].area, 16.0);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_fixture(
            dir.path(),
            r#"{"images":[{"id":1,"file_name":"a.png","width":10,"height":8},
                          {"id":2,"file_name":"b.png","width":10,"height":8}],
              "annotations":[{"id":9,"image_id":1,"category_id":1,"bbox":[1,1,5,4],
                "segmentation":[[1.2,1.0,6,1.5,5.5,5,1,4.8]],"area":17}],
              "categories":[{"id":1,"name":"d"}]}"#,
            &["a.png", "b.png"],
        );
        let ds = load_coco(dir.path(), &p).unwrap();
        let out = dir.path().join("out.json");
        save_coco(&ds, &out).unwrap();
        let again = load_coco(dir.path(), &out).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn resolution_filter() {
        let mut ds = square_dataset(20, 10, &[vec![(1, 1, 2)], vec![]]);
        ds.images[1].width = 30;
        let keep: BTreeSet<_> = [Resolution::new(20, 10)].into();
        let f = filter_resolutions(&ds, &keep).unwrap();
        assert_eq!(f.images.len(), 1);
        assert_eq!(f.annotations.len(), 1);
        let all = ds.resolutions();
        assert_eq!(filter_resolutions(&ds, &all).unwrap(), ds);
        let none: BTreeSet<_> = [Resolution::new(1, 1)].into();
        assert!(matches!(filter_resolutions(&ds, &none), Err(DatasetError::EmptyResult)));
    }

    #[test]
    fn split_counts_and_determinism() {
        let instances: Vec<Vec<(u32, u32, u32)>> = (0..400).map(|_| vec![(1, 1, 2)]).collect();
        let ds = square_dataset(8, 8, &instances);
        let s = split(&ds, [0.65, 0.15, 0.20], 7).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (260, 60, 80));
        let again = split(&ds, [0.65, 0.15, 0.20], 7).unwrap();
        assert_eq!(
            serde_json::to_vec(&s).unwrap(),
            serde_json::to_vec(&again).unwrap()
        );
        let other = split(&ds, [0.65, 0.15, 0.20], 8).unwrap();
        assert_ne!(s.train, other.train);
        assert_eq!(other.train.len(), 260);

        let all_train = split(&ds, [1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(all_train.train.len(), 400);
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        // 325 defective + 710 defect-free, as in the ball-screw data
        let mut instances: Vec<Vec<(u32, u32, u32)>> = (0..325).map(|_| vec![(1, 1, 2)]).collect();
        instances.extend((0..710).map(|_| vec![]));
        let ds = square_dataset(8, 8, &instances);
        let s = split(&ds, [0.65, 0.15, 0.20], 3).unwrap();
        let defective = ds.defective_image_ids();
        let d_train = s.train.iter().filter(|id| defective.contains(id)).count();
        let d_val = s.val.iter().filter(|id| defective.contains(id)).count();
        // 0.15*325 = 48.75 -> 49, 0.20*325 = 65, train takes the rest
        assert_eq!((d_train, d_val), (211, 49));
        let all: BTreeSet<_> = s.all_ids().collect();
        assert_eq!(all.len(), 1035);
    }

    #[test]
    fn split_rejects_tiny_strata_and_bad_ratios() {
        let ds = square_dataset(8, 8, &[vec![(1, 1, 2)], vec![], vec![], vec![]]);
        assert!(matches!(
            split(&ds, [0.65, 0.15, 0.2], 1),
            Err(DatasetError::InsufficientImages { stratum: "defective", size: 1 })
        ));
        assert!(matches!(split(&ds, [0.5, 0.5, 0.5], 1), Err(DatasetError::InvalidArgument(_))));
    }

    #[test]
    fn stats_on_hand_counted_fixture() {
        let ds = square_dataset(
            20,
            20,
            &[
                vec![],
                vec![(0, 0, 2)],
                vec![(5, 5, 2)],
                vec![(0, 0, 2), (10, 10, 3)],
                vec![(0, 0, 1), (4, 4, 1), (8, 8, 1)],
            ],
        );
        let st = defect_stats(&ds);
        assert_eq!(st.instances_per_image, BTreeMap::from([(1, 2), (2, 1), (3, 1)]));
        assert_eq!(st.defect_free_images, 1);
        assert_eq!(st.instance_count, 7);

        let empty = square_dataset(4, 4, &[vec![], vec![]]);
        let st = defect_stats(&empty);
        assert!(st.instances_per_image.is_empty());
        assert_eq!(st.instance_count, 0);
    }

    #[test]
    fn heatmap_centered_square() {
        let ds = square_dataset(30, 30, &[vec![(10, 10, 10)]]);
        let hm = spatial_heatmap(&ds, Resolution::new(30, 30), 1).unwrap();
        for y in 0..30 {
            for x in 0..30 {
                let inside = (10..20).contains(&x) && (10..20).contains(&y);
                assert_eq!(hm.value(x, y), if inside { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(hm.total_mass(), 100);
    }

    #[test]
    fn heatmap_two_disjoint_unit_masks_and_conservation() {
        let ds = square_dataset(10, 10, &[vec![(1, 1, 1)], vec![(7, 3, 1)]]);
        let hm = spatial_heatmap(&ds, Resolution::new(10, 10), 1).unwrap();
        let ones = hm.grid.iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, 2);
        assert_eq!(hm.grid.iter().filter(|&&v| v > 0.0).count(), 2);

        let ds = square_dataset(17, 9, &[vec![(1, 1, 4), (9, 2, 5)], vec![(0, 0, 3)]]);
        let hm = spatial_heatmap(&ds, Resolution::new(17, 9), 4).unwrap();
        let area: f64 = ds.annotations.iter().map(|a| a.area).sum();
        assert_eq!(hm.total_mass() as f64, area);
        assert_eq!((hm.grid_width, hm.grid_height), (5, 3));
        assert!(matches!(
            spatial_heatmap(&ds, Resolution::new(1, 1), 1),
            Err(DatasetError::NoImagesAtResolution(1, 1))
        ));
    }

    #[test]
    fn buckets_uniform_areas_one_to_nine() {
        let mut ds = square_dataset(10, 10, &[(0..9).map(|_| (0, 0, 1)).collect()]);
        for (i, a) in ds.annotations.iter_mut().enumerate() {
            a.area = (i + 1) as f64;
        }
        let b = size_buckets(&ds, &[1]).unwrap();
        assert_eq!(b.thresholds, [3.0, 6.0]);
        for bucket in SizeBucket::ALL {
            assert_eq!(b.count(bucket), 3);
        }
    }

    #[test]
    fn buckets_ties_go_small_and_distinct_sizes_balance() {
        let ds = square_dataset(10, 10, &[(0..7).map(|_| (0, 0, 2)).collect()]);
        let b = size_buckets(&ds, &[1]).unwrap();
        assert_eq!(b.count(SizeBucket::Small), 7);

        for n in 3..40usize {
            let mut ds = square_dataset(10, 10, &[(0..n).map(|_| (0, 0, 1)).collect()]);
            for (i, a) in ds.annotations.iter_mut().enumerate() {
                a.area = ((i * 7919) % 1009) as f64 + 0.5;
            }
            let b = size_buckets(&ds, &[1]).unwrap();
            let counts: Vec<usize> = SizeBucket::ALL.iter().map(|&k| b.count(k)).collect();
            assert_eq!(counts.iter().sum::<usize>(), n);
            let (mn, mx) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(mx - mn <= 1, "n={n} counts={counts:?}");
        }
        let ds = square_dataset(10, 10, &[vec![(0, 0, 1), (2, 2, 1)]]);
        assert!(matches!(size_buckets(&ds, &[1]), Err(DatasetError::TooFewInstances(2))));
    }
}
