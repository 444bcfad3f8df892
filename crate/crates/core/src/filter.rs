//! Candidate scoring (embedding k-NN distances, prompt alignment), ranked
//! selection and variant reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{map_bounded, Backend, BackendError};
use crate::generation::{Candidate, MetricScores};
use crate::imageio::IoError;
use crate::store::PatchStore;

pub const DEFAULT_K: usize = 3;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("need at least {k} references, have {have}")]
    TooFewReferences { k: usize, have: usize },
    #[error("k must be >= 1")]
    ZeroK,
    #[error("vector length {0} does not match {1}")]
    DimensionMismatch(usize, usize),
    #[error("target {target} exceeds pool of {pool}")]
    TargetExceedsPool { target: usize, pool: usize },
    #[error("candidate {0} has no scores")]
    Unscored(String),
    #[error("group {0:?} is empty")]
    EmptyGroup(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(#[from] BackendError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// `1 − cosine` for unit vectors, clamped to [0, 2].
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    (1.0 - dot).clamp(0.0, 2.0)
}

/// Distance to the nearest reference and mean distance to the `k` nearest.
/// Keeps a sorted buffer of the k smallest distances and sums it in
/// ascending order.
pub fn knn_distances(candidate: &[f32], references: &[Vec<f32>], k: usize) -> Result<(f64, f64), FilterError> {
    if k == 0 {
        return Err(FilterError::ZeroK);
    }
    if references.len() < k {
        return Err(FilterError::TooFewReferences { k, have: references.len() });
    }
    let mut best: Vec<f64> = Vec::with_capacity(k + 1);
    for r in references {
        if r.len() != candidate.len() {
            return Err(FilterError::DimensionMismatch(r.len(), candidate.len()));
        }
        let d = cosine_distance(candidate, r);
        if best.len() == k && d >= best[k - 1] {
            continue;
        }
        let pos = best.partition_point(|&x| x <= d);
        best.insert(pos, d);
        best.truncate(k);
    }
    let sum: f64 = best.iter().sum();
    Ok((best[0], sum / k as f64))
}

/// `100 · max(0, cos)`.
pub fn align_score(image_emb: &[f32], text_emb: &[f32]) -> f64 {
    let dot: f64 = image_emb.iter().zip(text_emb).map(|(&x, &y)| x as f64 * y as f64).sum();
    100.0 * dot.max(0.0)
}

/// Embeds every reference patch once.
pub fn embed_references(
    n: usize,
    load: impl Fn(usize) -> Result<RgbImage, IoError> + Sync,
    backend: &dyn Backend,
    concurrency: usize,
) -> Result<Vec<Vec<f32>>, FilterError> {
    let idx: Vec<usize> = (0..n).collect();
    map_bounded(&idx, concurrency, |_, &i| {
        let img = load(i)?;
        Ok(backend.embed(&img)?)
    })
    .into_iter()
    .collect()
}

/// Scores every candidate against the cached reference embeddings and the
/// prompt.
pub fn score_pool(
    candidates: &[Candidate],
    store: &dyn PatchStore,
    references: &[Vec<f32>],
    prompt: &str,
    k: usize,
    backend: &dyn Backend,
    concurrency: usize,
) -> Result<Vec<Candidate>, FilterError> {
    if references.len() < k.max(1) {
        return Err(FilterError::TooFewReferences { k, have: references.len() });
    }
    map_bounded(candidates, concurrency, |_, c| {
        let img = store.image(&c.candidate_id)?;
        let emb = backend.embed(&img)?;
        let align = backend.align(&img, prompt)?;
        let (min_dist, mean_k_dist) = knn_distances(&emb, references, k)?;
        let mut c = c.clone();
        c.scores = Some(MetricScores {
            align_score: align,
            min_dist,
            mean_k_dist,
            k,
        });
        Ok(c)
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionPolicy {
    pub target_count: usize,
    pub w_align: f64,
    pub w_dist: f64,
}

impl SelectionPolicy {
    pub fn new(target_count: usize) -> Self {
        SelectionPolicy {
            target_count,
            w_align: 1.0,
            w_dist: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub candidate_id: String,
    pub rank: usize,
    pub composite: f64,
    pub z_align: f64,
    pub z_dist: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedSet {
    pub policy: SelectionPolicy,
    pub pool_size: usize,
    pub rule: String,
    /// Selected candidates in rank order.
    pub selected: Vec<RankedCandidate>,
}

impl SelectedSet {
    pub fn ids(&self) -> Vec<String> {
        self.selected.iter().map(|r| r.candidate_id.clone()).collect()
    }
}

/// Population z-scores; a constant column maps to zeros.
pub fn z_scores(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    values
        .iter()
        .map(|v| if sd == 0.0 { 0.0 } else { (v - mean) / sd })
        .collect()
}

/// Ranks by `w_align · z(align) − w_dist · z(mean_k_dist)`, ties broken by
/// lower min_dist then candidate id, and keeps the top `target_count`.
pub fn select(pool: &[Candidate], policy: &SelectionPolicy) -> Result<SelectedSet, FilterError> {
    if policy.target_count > pool.len() {
        return Err(FilterError::TargetExceedsPool {
            target: policy.target_count,
            pool: pool.len(),
        });
    }
    let scores = pool
        .iter()
        .map(|c| c.scores.as_ref().ok_or_else(|| FilterError::Unscored(c.candidate_id.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let za = z_scores(&scores.iter().map(|s| s.align_score).collect::<Vec<_>>());
    let zd = z_scores(&scores.iter().map(|s| s.mean_k_dist).collect::<Vec<_>>());
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let composite: Vec<f64> = (0..pool.len())
        .map(|i| policy.w_align * za[i] - policy.w_dist * zd[i])
        .collect();
    order.sort_by(|&a, &b| {
        composite[b]
            .total_cmp(&composite[a])
            .then(scores[a].min_dist.total_cmp(&scores[b].min_dist))
            .then(pool[a].candidate_id.cmp(&pool[b].candidate_id))
    });
    let selected = order
        .into_iter()
        .take(policy.target_count)
        .enumerate()
        .map(|(rank, i)| RankedCandidate {
            candidate_id: pool[i].candidate_id.clone(),
            rank,
            composite: composite[i],
            z_align: za[i],
            z_dist: zd[i],
        })
        .collect();
    Ok(SelectedSet {
        policy: *policy,
        pool_size: pool.len(),
        rule: "composite = w_align*z(align_score) - w_dist*z(mean_k_dist); population z; ties: min_dist asc, candidate_id asc".into(),
        selected,
    })
}

/// Writes `candidate_id,align_score,min_dist,mean_k_dist` rows.
pub fn write_scores_csv(path: &Path, pool: &[Candidate]) -> Result<(), FilterError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["candidate_id", "align_score", "min_dist", "mean_k_dist"])?;
    for c in pool {
        let s = c.scores.as_ref().ok_or_else(|| FilterError::Unscored(c.candidate_id.clone()))?;
        w.write_record([
            c.candidate_id.clone(),
            s.align_score.to_string(),
            s.min_dist.to_string(),
            s.mean_k_dist.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| FilterError::Csv(e.into_error().into()))?;
    crate::imageio::write_atomic(path, &bytes)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub candidate_id: String,
    pub align_score: f64,
    pub min_dist: f64,
    pub mean_k_dist: f64,
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRow>, FilterError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(FilterError::from)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub group: String,
    pub n: usize,
    pub align_mean: f64,
    pub align_std: f64,
    pub align_median: f64,
    pub min_dist_mean: f64,
    pub mean_k_dist_mean: f64,
    pub mean_k_dist_median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub rows: Vec<ReportRow>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n − 1); zero for a single value.
fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Median with mid-point interpolation for even lengths.
fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

pub fn variant_report(groups: &BTreeMap<String, Vec<MetricScores>>) -> Result<VariantReport, FilterError> {
    let mut rows = Vec::new();
    for (name, g) in groups {
        if g.is_empty() {
            return Err(FilterError::EmptyGroup(name.clone()));
        }
        let align: Vec<f64> = g.iter().map(|s| s.align_score).collect();
        let mind: Vec<f64> = g.iter().map(|s| s.min_dist).collect();
        let mk: Vec<f64> = g.iter().map(|s| s.mean_k_dist).collect();
        rows.push(ReportRow {
            group: name.clone(),
            n: g.len(),
            align_mean: mean(&align),
            align_std: sample_std(&align),
            align_median: median(&align),
            min_dist_mean: mean(&mind),
            mean_k_dist_mean: mean(&mk),
            mean_k_dist_median: median(&mk),
        });
    }
    Ok(VariantReport { rows })
}

pub const REPORT_HEADER: [&str; 7] = [
    "Group",
    "n",
    "align mean ± std ↑",
    "align median ↑",
    "min_dist mean ↓",
    "mean_k_dist mean ↓",
    "mean_k_dist med. ↓",
];

impl VariantReport {
    /// Markdown table with four decimals.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| {} |", REPORT_HEADER.join(" | "));
        let _ = writeln!(s, "|---|---:|---:|---:|---:|---:|---:|");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {:.4} ± {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
                r.group, r.n, r.align_mean, r.align_std, r.align_median, r.min_dist_mean, r.mean_k_dist_mean, r.mean_k_dist_median
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockProfile};
    use crate::patch::CropRect;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| (x / n) as f32).collect()
    }

    /// Independent oracle: compute every distance, sort, slice.
    fn brute(c: &[f32], refs: &[Vec<f32>], k: usize) -> (f64, f64) {
        let mut d: Vec<f64> = refs
            .iter()
            .map(|r| {
                let mut dot = 0.0f64;
                for i in 0..c.len() {
                    dot += c[i] as f64 * r[i] as f64;
                }
                (1.0 - dot).clamp(0.0, 2.0)
            })
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut s = 0.0;
        for x in &d[..k] {
            s += x;
        }
        (d[0], s / k as f64)
    }

    #[test]
    fn knn_identities_and_oracle() {
        let e = vec![1.0f32, 0.0, 0.0];
        let refs = vec![e.clone(), vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        assert_eq!(knn_distances(&e, &refs, 1).unwrap().0, 0.0);
        let o = vec![0.0f32, 0.0, 0.0, 1.0];
        let orth = vec![vec![1.0f32, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]];
        assert_eq!(knn_distances(&o, &orth, 3).unwrap(), (1.0, 1.0));
        assert!(matches!(knn_distances(&e, &refs, 4), Err(FilterError::TooFewReferences { .. })));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let refs: Vec<Vec<f32>> = (0..10).map(|_| unit(&mut rng, 16)).collect();
        let c = unit(&mut rng, 16);
        assert_eq!(knn_distances(&c, &refs, 3).unwrap(), brute(&c, &refs, 3));
    }

    #[test]
    fn alignment_clamps() {
        let a = vec![0.6f32, 0.8];
        assert!((align_score(&a, &a) - 100.0).abs() < 1e-5);
        assert_eq!(align_score(&a, &[-0.6, -0.8]), 0.0);
        let c = [0.279f32, (1.0f32 - 0.279 * 0.279).sqrt()];
        assert!((align_score(&c, &[1.0, 0.0]) - 27.9).abs() < 1e-4);
    }

    fn cand(id: &str, align: f64, min_dist: f64, mean_k: f64) -> Candidate {
        Candidate {
            candidate_id: id.into(),
            index: 0,
            synthetic_mask_id: "m".into(),
            background_image_id: 1,
            crop: CropRect { x: 0, y: 0, side: 1, clamped: false },
            seed: 0,
            steps: 30,
            prompt_hash: String::new(),
            backend_metadata: None,
            scores: Some(MetricScores { align_score: align, min_dist, mean_k_dist: mean_k, k: 3 }),
        }
    }

    #[test]
    fn selection_ties_and_bounds() {
        let pool = vec![cand("b", 10.0, 0.2, 0.3), cand("a", 10.0, 0.1, 0.3), cand("c", 5.0, 0.0, 0.5)];
        let s = select(&pool, &SelectionPolicy::new(2)).unwrap();
        assert_eq!(s.ids(), vec!["a", "b"]);
        assert_eq!(select(&pool, &SelectionPolicy::new(3)).unwrap().selected.len(), 3);
        assert!(matches!(select(&pool, &SelectionPolicy::new(4)), Err(FilterError::TargetExceedsPool { .. })));
        let flat = vec![cand("x", 1.0, 0.3, 0.3), cand("y", 1.0, 0.3, 0.3)];
        assert_eq!(select(&flat, &SelectionPolicy::new(2)).unwrap().ids(), vec!["x", "y"]);
    }

    #[test]
    fn scoring_uses_cached_references() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        struct Counting(MockBackend, AtomicUsize);
        impl Backend for Counting {
            fn health(&self) -> Result<crate::backend::Health, BackendError> {
                self.0.health()
            }
            fn tags(&self, i: &[RgbImage], m: usize) -> Result<Vec<Vec<String>>, BackendError> {
                self.0.tags(i, m)
            }
            fn inpaint(&self, r: &crate::backend::InpaintRequest) -> Result<crate::backend::InpaintOutput, BackendError> {
                self.0.inpaint(r)
            }
            fn embed(&self, i: &RgbImage) -> Result<Vec<f32>, BackendError> {
                self.1.fetch_add(1, Ordering::SeqCst);
                self.0.embed(i)
            }
            fn align(&self, i: &RgbImage, t: &str) -> Result<f64, BackendError> {
                self.0.align(i, t)
            }
            fn segment(
                &self,
                i: &RgbImage,
                b: [f64; 4],
                t: &str,
                h: Option<&crate::raster::BinaryMask>,
            ) -> Result<crate::raster::BinaryMask, BackendError> {
                self.0.segment(i, b, t, h)
            }
        }
        let backend = Counting(MockBackend::new(MockProfile::Bsdata), AtomicUsize::new(0));
        let store = crate::store::MemoryStore::new();
        let img = |v: u8| RgbImage::from_pixel(8, 8, image::Rgb([v, v, v]));
        let mask = crate::raster::BinaryMask::new(8, 8);
        let pool: Vec<Candidate> = (0..6)
            .map(|i| {
                store.put(&format!("c{i}"), &img(i as u8), &mask).unwrap();
                cand(&format!("c{i}"), 0.0, 0.0, 0.0)
            })
            .collect();
        let refs = embed_references(4, |i| Ok(img(100 + i as u8)), &backend, 2).unwrap();
        let scored = score_pool(&pool, &store, &refs, "pits", 3, &backend, 3).unwrap();
        assert_eq!(backend.1.load(Ordering::SeqCst), 10);
        let mut rev = refs.clone();
        rev.reverse();
        let again = score_pool(&pool, &store, &rev, "pits", 3, &backend, 1).unwrap();
        assert_eq!(scored, again);
        for c in &scored {
            let s = c.scores.as_ref().unwrap();
            assert!(s.min_dist <= s.mean_k_dist);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.csv");
        write_scores_csv(&p, &scored).unwrap();
        let rows = read_scores_csv(&p).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[2].min_dist, scored[2].scores.as_ref().unwrap().min_dist);
    }

    #[test]
    fn report_statistics() {
        let s = |a: f64| MetricScores { align_score: a, min_dist: a, mean_k_dist: a, k: 3 };
        let groups = BTreeMap::from([
            ("flat".to_string(), vec![s(2.5); 4]),
            ("four".to_string(), vec![s(1.0), s(4.0), s(2.0), s(3.0)]),
        ]);
        let r = variant_report(&groups).unwrap();
        assert_eq!((r.rows[0].align_mean, r.rows[0].align_std, r.rows[0].align_median), (2.5, 0.0, 2.5));
        assert_eq!(r.rows[1].align_median, 2.5);
        let md = r.to_markdown();
        assert_eq!(md.lines().count(), 4);
        assert!(md.lines().all(|l| l.matches('|').count() == 8));
        assert!(md.contains("| four | 4 | 2.5000 ± 1.2910 | 2.5000 |"));
    }

    proptest! {
        #[test]
        fn min_never_exceeds_mean_k(seed in any::<u64>(), n in 3usize..30, k in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let refs: Vec<Vec<f32>> = (0..n).map(|_| unit(&mut rng, 8)).collect();
            let c = unit(&mut rng, 8);
            let (mn, mk) = knn_distances(&c, &refs, k).unwrap();
            prop_assert!(mn <= mk);
            prop_assert_eq!((mn, mk), brute(&c, &refs, k));
        }

        #[test]
        fn selection_is_monotone_and_affine_invariant(
            seed in any::<u64>(), a in 0.1f64..10.0, b in -5.0f64..5.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pool: Vec<Candidate> = (0..40)
                .map(|i| cand(&format!("c{i:03}"), rng.random_range(0.0..40.0), rng.random_range(0.0..0.3), rng.random_range(0.3..0.6)))
                .collect();
            let small = select(&pool, &SelectionPolicy::new(10)).unwrap().ids();
            let large = select(&pool, &SelectionPolicy::new(25)).unwrap().ids();
            prop_assert_eq!(&small[..], &large[..10]);
            let scaled: Vec<Candidate> = pool.iter().map(|c| {
                let mut c = c.clone();
                let s = c.scores.as_mut().unwrap();
                s.align_score = a * s.align_score + b;
                c
            }).collect();
            prop_assert_eq!(select(&scaled, &SelectionPolicy::new(10)).unwrap().ids(), small);
        }
    }
}
