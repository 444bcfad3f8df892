//! Synthetic inspection datasets with known counts, used by tests and the
//! `make-fixture` subcommand.

use std::collections::BTreeSet;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coco::{CocoAnnotation, CocoCategory, CocoFile, CocoImage, CocoSegmentation, RleCounts};
use crate::dataset::{self, DatasetError, ImageId, Resolution};
use crate::imageio::{self, IoError};
use crate::patch;
use crate::raster::{rasterize_polygons, BinaryMask};

pub const SPLIT_RATIOS: [f64; 3] = [0.65, 0.15, 0.20];
pub const FIXTURE_SPLIT_SEED: u64 = 7;
pub const ANNOTATION_FILE: &str = "annotations.json";

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Patch(#[from] patch::PatchError),
    #[error("fixture self-check failed: {0}")]
    SelfCheck(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixtureKind {
    /// 1,104 images, 1,035 at the two main resolutions.
    Bsdata,
    /// Small set for end-to-end runs.
    Small,
}

impl std::str::FromStr for FixtureKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bsdata" => Ok(FixtureKind::Bsdata),
            "small" => Ok(FixtureKind::Small),
            _ => Err(format!("unknown fixture kind {s:?} (bsdata, small)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSummary {
    pub images: usize,
    pub annotations: usize,
    pub retained_images: usize,
    pub train_patches: usize,
    pub split_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Layout {
    Single,
    /// Instances far apart: each yields a patch.
    Disjoint(usize),
    /// Stacked instances whose crop windows overlap: one patch.
    Stacked(usize),
}

#[derive(Debug, Clone)]
struct ImagePlan {
    id: ImageId,
    res: Resolution,
    layout: Option<Layout>,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn polygon(&self, n: usize) -> Vec<f64> {
        let (s, c) = self.theta.sin_cos();
        (0..n)
            .flat_map(|i| {
                let t = i as f64 / n as f64 * std::f64::consts::TAU;
                let (x, y) = (self.a * t.cos(), self.b * t.sin());
                [self.cx + x * c - y * s, self.cy + x * s + y * c]
            })
            .collect()
    }
}

/// Upper-left biased position: u² pulls draws towards the origin.
fn biased(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random();
    lo + (hi - lo) * u * u.sqrt()
}

fn layout_ellipses(rng: &mut ChaCha8Rng, res: Resolution, layout: Layout) -> Vec<Ellipse> {
    let (w, h) = (res.width as f64, res.height as f64);
    match layout {
        Layout::Single => {
            let a = rng.random_range(6.0..36.0);
            let b = a * rng.random_range(0.45..1.0);
            let m = a + 4.0;
            vec![Ellipse {
                cx: biased(rng, m, w - m),
                cy: biased(rng, m, h - m),
                a,
                b,
                theta: rng.random_range(0.0..std::f64::consts::PI),
            }]
        }
        Layout::Disjoint(n) => {
            // one instance per horizontal band so windows never meet
            let band = w / n as f64;
            (0..n)
                .map(|i| {
                    let a = rng.random_range(6.0..14.0);
                    let lo = band * i as f64 + 80.0;
                    Ellipse {
                        cx: rng.random_range(lo..lo + band - 160.0),
                        cy: biased(rng, 40.0, h - 40.0),
                        a,
                        b: a * rng.random_range(0.6..1.0),
                        theta: rng.random_range(0.0..std::f64::consts::PI),
                    }
                })
                .collect()
        }
        Layout::Stacked(n) => {
            // thin horizontal streaks 8 px apart; the middle one is longest
            let cx = biased(rng, 60.0, w - 60.0);
            let cy = biased(rng, 40.0, h - 40.0);
            let offsets: &[f64] = if n == 2 { &[0.0, 8.0] } else { &[-8.0, 0.0, 8.0] };
            offsets
                .iter()
                .enumerate()
                .map(|(i, dy)| Ellipse {
                    cx,
                    cy: cy + dy,
                    a: if (n == 3 && i == 1) || (n == 2 && i == 0) { 22.0 } else { 20.0 },
                    b: 3.0,
                    theta: 0.0,
                })
                .collect()
        }
    }
}

fn texture(res: Resolution, seed: u64) -> RgbImage {
    let base = 135 + (seed % 30) as i32;
    RgbImage::from_fn(res.width, res.height, |x, y| {
        let mut hsh = (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ seed;
        hsh ^= hsh >> 29;
        hsh = hsh.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        let noise = ((hsh >> 40) % 9) as i32 - 4;
        let grad = (x * 24 / res.width) as i32 - (y * 16 / res.height) as i32;
        let v = (base + grad + noise).clamp(0, 255) as u8;
        Rgb([v, v.saturating_add(3), v.saturating_add(6)])
    })
}

struct Built {
    coco: CocoFile,
    images: Vec<(String, Resolution, Vec<BinaryMask>, u64)>,
}

fn build(plans: &[ImagePlan], seed: u64) -> Result<Built, FixtureError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF1F1);
    let mut coco = CocoFile {
        info: Some(serde_json::json!({ "description": "synthetic inspection fixture" })),
        images: Vec::new(),
        annotations: Vec::new(),
        categories: vec![CocoCategory {
            id: 1,
            name: "pitting".into(),
            supercategory: None,
        }],
    };
    let mut images = Vec::new();
    let mut ann_id = 1u64;
    for p in plans {
        let file_name = format!("images/img_{:05}.png", p.id);
        coco.images.push(CocoImage {
            id: p.id,
            file_name: file_name.clone(),
            width: p.res.width,
            height: p.res.height,
        });
        let mut masks = Vec::new();
        if let Some(layout) = p.layout {
            for e in layout_ellipses(&mut rng, p.res, layout) {
                let poly = e.polygon(32);
                let mask = rasterize_polygons(std::slice::from_ref(&poly), p.res.width, p.res.height)
                    .map_err(|e| FixtureError::SelfCheck(e.to_string()))?;
                let bbox = mask
                    .bbox()
                    .ok_or_else(|| FixtureError::SelfCheck(format!("empty defect on image {}", p.id)))?;
                let segmentation = if ann_id.is_multiple_of(2) {
                    CocoSegmentation::Polygons(vec![poly])
                } else {
                    let rle = mask.to_rle();
                    CocoSegmentation::Rle {
                        size: rle.size,
                        counts: RleCounts::Compressed(rle.to_compressed()),
                    }
                };
                coco.annotations.push(CocoAnnotation {
                    id: ann_id,
                    image_id: p.id,
                    category_id: 1,
                    bbox: bbox.to_xywh(),
                    segmentation,
                    area: mask.area() as f64,
                    iscrowd: 0,
                    provenance: None,
                });
                ann_id += 1;
                masks.push(mask);
            }
        }
        images.push((file_name, p.res, masks, p.id.wrapping_mul(31) ^ seed));
    }
    Ok(Built { coco, images })
}

fn write(dir: &Path, built: &Built) -> Result<(), FixtureError> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|source| IoError::Io {
        path: images.display().to_string(),
        source,
    })?;
    built.images.par_iter().try_for_each(|(name, res, masks, tex_seed)| {
        let mut img = texture(*res, *tex_seed);
        for m in masks {
            let b = m.bbox().expect("non-empty");
            for y in b.y..b.bottom() {
                for x in b.x..b.right() {
                    if m.get(x, y) {
                        let p = img.get_pixel_mut(x, y);
                        let depth = 70 + ((x * 7 + y * 13) % 20) as u8;
                        p.0 = [p.0[0].saturating_sub(depth), p.0[1].saturating_sub(depth), p.0[2].saturating_sub(depth)];
                    }
                }
            }
        }
        imageio::save_png_rgb(&dir.join(name), &img)
    })?;
    imageio::write_json(&dir.join(ANNOTATION_FILE), &built.coco)?;
    Ok(())
}

pub const BSDATA_RESOLUTIONS: [Resolution; 2] = [Resolution { width: 1130, height: 460 }, Resolution { width: 1540, height: 645 }];
const OTHER_RESOLUTIONS: [Resolution; 3] = [
    Resolution { width: 640, height: 480 },
    Resolution { width: 800, height: 600 },
    Resolution { width: 1024, height: 768 },
];

/// Defective ids of the retained images that land in train for the fixture
/// split seed; multiplicities never change which stratum an image is in.
fn train_defective(plans: &[ImagePlan], seed: u64) -> Result<Vec<ImageId>, FixtureError> {
    let probe = build_probe(plans);
    let retained = dataset::filter_resolutions(&probe, &BSDATA_RESOLUTIONS.into_iter().collect())?;
    let split = dataset::split(&retained, SPLIT_RATIOS, seed)?;
    let defective = retained.defective_image_ids();
    Ok(split.train.iter().copied().filter(|id| defective.contains(id)).collect())
}

fn build_probe(plans: &[ImagePlan]) -> dataset::Dataset {
    let images = plans
        .iter()
        .map(|p| dataset::ImageRecord {
            id: p.id,
            file_name: String::new(),
            file_path: Default::default(),
            width: p.res.width,
            height: p.res.height,
        })
        .collect();
    let annotations = plans
        .iter()
        .filter(|p| p.layout.is_some())
        .map(|p| {
            let mut m = BinaryMask::new(p.res.width, p.res.height);
            m.set(1, 1, true);
            dataset::AnnotationInstance {
                id: p.id,
                image_id: p.id,
                category_id: 1,
                bbox: [1.0, 1.0, 1.0, 1.0],
                segmentation: m.to_rle(),
                area: 1.0,
                provenance: None,
            }
        })
        .collect();
    dataset::Dataset {
        images,
        annotations,
        categories: vec![dataset::Category { id: 1, name: "pitting".into() }],
    }
}

fn bsdata_plans(seed: u64) -> Result<Vec<ImagePlan>, FixtureError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plans = Vec::new();
    let mut id = 1u64;
    // (resolution, defective, defect-free)
    let groups = [(BSDATA_RESOLUTIONS[0], 200, 430), (BSDATA_RESOLUTIONS[1], 125, 280)];
    for (res, defective, clean) in groups {
        let mut flags: Vec<bool> = (0..defective + clean).map(|i| i < defective).collect();
        flags.shuffle(&mut rng);
        for f in flags {
            plans.push(ImagePlan { id, res, layout: f.then_some(Layout::Single) });
            id += 1;
        }
    }
    // 69 images at other resolutions carrying 37 instances
    for i in 0..69usize {
        let layout = match i {
            0..=29 => Some(Layout::Single),
            30..=31 => Some(Layout::Disjoint(2)),
            32 => Some(Layout::Disjoint(3)),
            _ => None,
        };
        plans.push(ImagePlan { id, res: OTHER_RESOLUTIONS[i % 3], layout });
        id += 1;
    }
    plans.shuffle(&mut rng);
    plans.sort_by_key(|p| p.id);

    // 20 doubles and 6 triples among the retained images, all placed in train:
    // 4 disjoint doubles and 3 disjoint triples add 10 patches; the stacked
    // rest collapse to one patch each. 211 + 10 = 221.
    let mut train = train_defective(&plans, FIXTURE_SPLIT_SEED)?;
    train.shuffle(&mut rng);
    let multi: Vec<Layout> = std::iter::repeat_n(Layout::Disjoint(2), 4)
        .chain(std::iter::repeat_n(Layout::Disjoint(3), 3))
        .chain(std::iter::repeat_n(Layout::Stacked(2), 16))
        .chain(std::iter::repeat_n(Layout::Stacked(3), 3))
        .collect();
    for (img, layout) in train.iter().zip(multi) {
        let p = plans.iter_mut().find(|p| p.id == *img).expect("train id from plans");
        p.layout = Some(layout);
    }
    Ok(plans)
}

fn small_plans(seed: u64) -> Vec<ImagePlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = BSDATA_RESOLUTIONS[0];
    let mut plans: Vec<ImagePlan> = (0..100u64)
        .map(|i| ImagePlan {
            id: i + 1,
            res,
            layout: (i < 36).then_some(Layout::Single),
        })
        .collect();
    let mut order: Vec<usize> = (0..plans.len()).collect();
    order.shuffle(&mut rng);
    let layouts: Vec<Option<Layout>> = order.iter().map(|&i| plans[i].layout).collect();
    for (p, l) in plans.iter_mut().zip(layouts) {
        p.layout = l;
    }
    for p in plans.iter_mut().filter(|p| p.layout.is_some()).take(3) {
        p.layout = Some(Layout::Disjoint(2));
    }
    plans.push(ImagePlan { id: 101, res: OTHER_RESOLUTIONS[0], layout: Some(Layout::Single) });
    plans
}

/// Writes `<dir>/annotations.json` and `<dir>/images/*.png`.
pub fn make_fixture(dir: &Path, kind: FixtureKind, seed: u64) -> Result<FixtureSummary, FixtureError> {
    let plans = match kind {
        FixtureKind::Bsdata => bsdata_plans(seed)?,
        FixtureKind::Small => small_plans(seed),
    };
    let built = build(&plans, seed)?;
    write(dir, &built)?;
    let ds = dataset::load_coco(dir, &dir.join(ANNOTATION_FILE))?;
    let retained = dataset::filter_resolutions(&ds, &BSDATA_RESOLUTIONS.into_iter().collect())?;
    let split = dataset::split(&retained, SPLIT_RATIOS, FIXTURE_SPLIT_SEED)?;
    let train_patches = patch::plan_patches(&retained, &split.train)?.len();
    let summary = FixtureSummary {
        images: ds.images.len(),
        annotations: ds.annotations.len(),
        retained_images: retained.images.len(),
        train_patches,
        split_seed: FIXTURE_SPLIT_SEED,
    };
    if kind == FixtureKind::Bsdata {
        let expected = (1104, 394, 1035, 221);
        let got = (summary.images, summary.annotations, summary.retained_images, summary.train_patches);
        if got != expected {
            return Err(FixtureError::SelfCheck(format!("counts {got:?}, expected {expected:?}")));
        }
    }
    Ok(summary)
}

/// Number of distinct image resolutions in a fixture directory.
pub fn resolutions(dir: &Path) -> Result<BTreeSet<Resolution>, FixtureError> {
    Ok(dataset::load_coco(dir, &dir.join(ANNOTATION_FILE))?.resolutions())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_fixture_loads() {
        let dir = tempfile::tempdir().unwrap();
        let s = make_fixture(dir.path(), FixtureKind::Small, 3).unwrap();
        assert_eq!((s.images, s.annotations, s.retained_images), (101, 40, 100));
        let again = tempfile::tempdir().unwrap();
        make_fixture(again.path(), FixtureKind::Small, 3).unwrap();
        let a = std::fs::read(dir.path().join(ANNOTATION_FILE)).unwrap();
        let b = std::fs::read(again.path().join(ANNOTATION_FILE)).unwrap();
        assert_eq!(a, b);
    }
}
