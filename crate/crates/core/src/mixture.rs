//! Real/synthetic training regimes as reproducible manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coco::CocoFile;
use crate::compositor::{self, ComposedEntry};
use crate::dataset::{self, Dataset, ImageId};
use crate::imageio::{self, IoError};

#[derive(Debug, Error)]
pub enum MixtureError {
    #[error("regime {label} needs {needed} synthetic images, pool has {available}")]
    InsufficientSyntheticPool {
        label: String,
        needed: usize,
        available: usize,
    },
    #[error("invalid regime: {0}")]
    InvalidRegime(String),
    #[error("duplicate id {0} in input")]
    DuplicateId(u64),
    #[error("expected {expected} seeds, got {got}")]
    SeedCount { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("unknown image id {0}")]
    UnknownImage(ImageId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub real_pct: u32,
    pub synth_pct: u32,
    pub seed: u64,
}

impl RegimeSpec {
    pub fn new(real_pct: u32, synth_pct: u32, seed: u64) -> Result<Self, MixtureError> {
        if real_pct > 100 {
            return Err(MixtureError::InvalidRegime(format!("real_pct {real_pct} > 100")));
        }
        Ok(RegimeSpec { real_pct, synth_pct, seed })
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.real_pct, self.synth_pct)
    }

    pub fn dir_name(&self) -> String {
        format!("{}-{}_seed{}", self.real_pct, self.synth_pct, self.seed)
    }
}

pub const STANDARD_REGIMES: [(u32, u32); 7] = [(100, 0), (0, 100), (75, 25), (50, 50), (25, 75), (100, 100), (100, 200)];

/// round(pct/100 · r), halves rounded up, in exact integer arithmetic.
pub fn regime_count(pct: u32, r_full: usize) -> usize {
    (pct as usize * r_full + 50) / 100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub label: String,
    pub regime: RegimeSpec,
    pub r_full: usize,
    pub real_count: usize,
    pub synthetic_count: usize,
    pub real_ids: Vec<ImageId>,
    pub synthetic_ids: Vec<ImageId>,
}

fn check_unique(ids: &[ImageId]) -> Result<(), MixtureError> {
    let mut seen = BTreeSet::new();
    for &id in ids {
        if !seen.insert(id) {
            return Err(MixtureError::DuplicateId(id));
        }
    }
    Ok(())
}

/// Seeded permutation of the real split; every real subset for that seed is
/// a prefix of it, so smaller budgets nest inside larger ones.
pub fn real_permutation(real_split: &[ImageId], seed: u64) -> Vec<ImageId> {
    let mut ids = real_split.to_vec();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids
}

/// `synth_ranked` is in selection-rank order; budgets take its prefix.
pub fn compose(real_split: &[ImageId], synth_ranked: &[ImageId], spec: RegimeSpec) -> Result<TrainingManifest, MixtureError> {
    if spec.real_pct > 100 {
        return Err(MixtureError::InvalidRegime(format!("real_pct {} > 100", spec.real_pct)));
    }
    check_unique(real_split)?;
    check_unique(synth_ranked)?;
    let r_full = real_split.len();
    let real_count = regime_count(spec.real_pct, r_full);
    let synthetic_count = regime_count(spec.synth_pct, r_full);
    if synthetic_count > synth_ranked.len() {
        return Err(MixtureError::InsufficientSyntheticPool {
            label: spec.label(),
            needed: synthetic_count,
            available: synth_ranked.len(),
        });
    }
    let mut real_ids = real_permutation(real_split, spec.seed);
    real_ids.truncate(real_count);
    Ok(TrainingManifest {
        label: spec.label(),
        regime: spec,
        r_full,
        real_count,
        synthetic_count,
        real_ids,
        synthetic_ids: synth_ranked[..synthetic_count].to_vec(),
    })
}

pub fn regime_suite(real_split: &[ImageId], synth_ranked: &[ImageId], seeds: &[u64]) -> Result<Vec<TrainingManifest>, MixtureError> {
    if seeds.len() != 3 {
        return Err(MixtureError::SeedCount { expected: 3, got: seeds.len() });
    }
    let mut out = Vec::with_capacity(STANDARD_REGIMES.len() * seeds.len());
    for &(r, s) in &STANDARD_REGIMES {
        for &seed in seeds {
            out.push(compose(real_split, synth_ranked, RegimeSpec::new(r, s, seed)?)?);
        }
    }
    Ok(out)
}

pub fn suite_seeds(seed: u64) -> [u64; 3] {
    [seed, seed.wrapping_add(1), seed.wrapping_add(2)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimesLock {
    pub seeds: Vec<u64>,
    pub r_full: usize,
    pub real_pool_sha256: String,
    pub synthetic_pool_sha256: String,
    pub regimes: Vec<String>,
    pub manifests: BTreeMap<String, String>,
}

pub fn id_list_hash(ids: &[ImageId]) -> String {
    let text: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
    imageio::sha256_hex(text.join("\n").as_bytes())
}

/// COCO subset for one manifest: real images keep their annotations and are
/// referenced by `real_paths`; synthetic images reference their PNG through
/// `synth_prefix` (relative to the manifest directory).
pub fn manifest_coco(
    m: &TrainingManifest,
    real: &Dataset,
    real_paths: &dyn Fn(&dataset::ImageRecord) -> String,
    synthetic: &BTreeMap<ImageId, &ComposedEntry>,
    synth_prefix: &str,
) -> Result<CocoFile, MixtureError> {
    let wanted: BTreeSet<ImageId> = m.real_ids.iter().copied().collect();
    let mut coco = dataset::to_coco(&Dataset {
        images: real.images.iter().filter(|r| wanted.contains(&r.id)).cloned().collect(),
        annotations: real.annotations.iter().filter(|a| wanted.contains(&a.image_id)).cloned().collect(),
        categories: real.categories.clone(),
    });
    for img in &mut coco.images {
        let rec = real.image(img.id).ok_or(MixtureError::UnknownImage(img.id))?;
        img.file_name = real_paths(rec);
    }
    for id in &m.synthetic_ids {
        let e = synthetic.get(id).ok_or(MixtureError::UnknownImage(*id))?;
        let (im, ann) = compositor::entry_to_coco(e, format!("{synth_prefix}{}", e.file_name));
        coco.images.push(im);
        coco.annotations.push(ann);
    }
    coco.info = Some(serde_json::json!({
        "regime": m.label,
        "seed": m.regime.seed,
        "real_count": m.real_count,
        "synthetic_count": m.synthetic_count,
    }));
    Ok(coco)
}

/// Writes `<dir>/<regime>/manifest.json` and `annotations.json` for every
/// manifest, then `<dir>/regimes.lock`.
pub fn write_suite(
    dir: &Path,
    manifests: &[TrainingManifest],
    seeds: &[u64],
    real_split: &[ImageId],
    synth_ranked: &[ImageId],
    coco_for: &dyn Fn(&TrainingManifest) -> Result<CocoFile, MixtureError>,
) -> Result<RegimesLock, MixtureError> {
    let mut files = BTreeMap::new();
    for m in manifests {
        let sub = dir.join(m.regime.dir_name());
        imageio::write_json(&sub.join("manifest.json"), m)?;
        imageio::write_json(&sub.join("annotations.json"), &coco_for(m)?)?;
        files.insert(m.regime.dir_name(), imageio::sha256_file(&sub.join("manifest.json"))?);
    }
    let mut sorted = real_split.to_vec();
    sorted.sort_unstable();
    let lock = RegimesLock {
        seeds: seeds.to_vec(),
        r_full: real_split.len(),
        real_pool_sha256: id_list_hash(&sorted),
        synthetic_pool_sha256: id_list_hash(synth_ranked),
        regimes: STANDARD_REGIMES.iter().map(|(r, s)| format!("{r}/{s}")).collect(),
        manifests: files,
    };
    imageio::write_json(&dir.join("regimes.lock"), &lock)?;
    Ok(lock)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counts_follow_rounding_rule() {
        let real: Vec<u64> = (1..=221).collect();
        let synth: Vec<u64> = (1000..1500).collect();
        let m = compose(&real, &synth, RegimeSpec::new(75, 25, 7).unwrap()).unwrap();
        assert_eq!((m.real_ids.len(), m.synthetic_ids.len()), (166, 55));
        let real: Vec<u64> = (1..=200).collect();
        let m = compose(&real, &synth, RegimeSpec::new(75, 25, 7).unwrap()).unwrap();
        assert_eq!((m.real_count, m.synthetic_count), (150, 50));
        let m = compose(&real, &synth, RegimeSpec::new(100, 0, 7).unwrap()).unwrap();
        assert!(m.synthetic_ids.is_empty());
        assert_eq!(m.real_ids.len(), 200);
        let m = compose(&real, &synth, RegimeSpec::new(0, 100, 7).unwrap()).unwrap();
        assert!(m.real_ids.is_empty());
        assert_eq!(m.synthetic_ids, synth[..200]);
        let short: Vec<u64> = (1000..1399).collect();
        assert!(matches!(
            compose(&real, &short, RegimeSpec::new(100, 200, 7).unwrap()),
            Err(MixtureError::InsufficientSyntheticPool { needed: 400, available: 399, .. })
        ));
        assert!(RegimeSpec::new(101, 0, 1).is_err());
        assert!(compose(&[1, 1], &synth, RegimeSpec::new(50, 0, 1).unwrap()).is_err());
    }

    #[test]
    fn suite_has_21_manifests() {
        let real: Vec<u64> = (1..=50).collect();
        let synth: Vec<u64> = (1000..1100).collect();
        let suite = regime_suite(&real, &synth, &suite_seeds(7)).unwrap();
        assert_eq!(suite.len(), 21);
        assert!(regime_suite(&real, &synth, &[1, 2]).is_err());
        let a = suite.iter().find(|m| m.label == "100/100" && m.regime.seed == 8).unwrap();
        let b = suite.iter().find(|m| m.label == "100/200" && m.regime.seed == 8).unwrap();
        assert_eq!(a.real_ids, b.real_ids);
    }

    proptest! {
        #[test]
        fn real_subsets_nest(n in 1usize..300, seed in any::<u64>()) {
            let real: Vec<u64> = (0..n as u64).map(|i| i * 3 + 1).collect();
            let synth: Vec<u64> = (10_000..10_000 + 2 * n as u64).collect();
            let mut prev: Option<BTreeSet<u64>> = None;
            for pct in [25, 50, 75, 100] {
                let m = compose(&real, &synth, RegimeSpec::new(pct, 0, seed).unwrap()).unwrap();
                let set: BTreeSet<u64> = m.real_ids.iter().copied().collect();
                prop_assert_eq!(set.len(), regime_count(pct, n));
                if let Some(p) = &prev {
                    prop_assert!(p.is_subset(&set));
                }
                prev = Some(set);
            }
        }
    }
}
