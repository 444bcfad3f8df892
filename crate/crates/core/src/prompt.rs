//! Conditioning prompt from backend tags: batch, count, prune, order.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use image::RgbImage;
use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{map_bounded, Backend, BackendError};
use crate::imageio::sha256_hex;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(#[from] BackendError),
    #[error("no tags survived pruning")]
    EmptyPromptCandidates,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("cannot load patch {index}: {message}")]
    PatchLoad { index: usize, message: String },
    #[error("{path}:{line}: {message}")]
    Lexicon { path: String, line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TagFrequency {
    pub counts: BTreeMap<String, u32>,
    pub total_batches: u32,
}

impl TagFrequency {
    /// Adds one batch worth of tags (already normalized and deduplicated).
    pub fn add_batch(&mut self, tags: &[String]) {
        self.total_batches += 1;
        for t in tags {
            *self.counts.entry(t.clone()).or_insert(0) += 1;
        }
    }
}

pub fn normalize_tag(t: &str) -> String {
    t.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Flattens the per-image lists of one batch, normalizes, deduplicates in
/// first-seen order and truncates to `max_tags`.
pub fn batch_tags(lists: &[Vec<String>], max_tags: usize) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for t in lists.iter().flatten() {
        let n = normalize_tag(t);
        if !n.is_empty() && seen.insert(n.clone()) {
            out.push(n);
        }
    }
    if out.len() > max_tags {
        warn!("tag limit exceeded: batch returned {} tags, keeping {max_tags}", out.len());
        out.truncate(max_tags);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TagConfig {
    pub batch_size: usize,
    pub max_tags: usize,
    pub concurrency: usize,
}

impl Default for TagConfig {
    fn default() -> Self {
        TagConfig {
            batch_size: 4,
            max_tags: 15,
            concurrency: 4,
        }
    }
}

pub fn batch_count(patches: usize, batch_size: usize) -> usize {
    patches.div_ceil(batch_size)
}

/// Queries the backend once per batch of patches and counts tags across
/// batches. `load(i)` returns patch `i`.
pub fn collect_tags<F>(
    n_patches: usize,
    load: F,
    backend: &dyn Backend,
    cfg: &TagConfig,
) -> Result<TagFrequency, PromptError>
where
    F: Fn(usize) -> Result<RgbImage, String> + Sync,
{
    if cfg.batch_size == 0 || cfg.max_tags == 0 {
        return Err(PromptError::InvalidArgument("batch_size and max_tags must be >= 1".into()));
    }
    let batches: Vec<std::ops::Range<usize>> = (0..batch_count(n_patches, cfg.batch_size))
        .map(|b| b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n_patches))
        .collect();
    let results = map_bounded(&batches, cfg.concurrency, |_, range| {
        let images = range
            .clone()
            .map(|i| load(i).map_err(|message| PromptError::PatchLoad { index: i, message }))
            .collect::<Result<Vec<_>, _>>()?;
        let lists = backend.tags(&images, cfg.max_tags)?;
        Ok::<_, PromptError>(batch_tags(&lists, cfg.max_tags))
    });
    let mut tf = TagFrequency::default();
    for r in results {
        tf.add_batch(&r?);
    }
    Ok(tf)
}

/// Keeps tags seen in at least `min_fraction` of batches and not in the
/// stoplist, most frequent first, ties alphabetical.
pub fn prune_tags(
    tf: &TagFrequency,
    stoplist: &BTreeSet<String>,
    min_fraction: f64,
) -> Result<Vec<String>, PromptError> {
    if !(0.0..=1.0).contains(&min_fraction) {
        return Err(PromptError::InvalidArgument(format!("min_fraction {min_fraction} outside [0, 1]")));
    }
    if tf.total_batches == 0 {
        return Err(PromptError::EmptyPromptCandidates);
    }
    let mut kept: Vec<(&String, u32)> = tf
        .counts
        .iter()
        .filter(|(t, &c)| c as f64 / tf.total_batches as f64 >= min_fraction && !stoplist.contains(*t))
        .map(|(t, &c)| (t, c))
        .collect();
    if kept.is_empty() {
        return Err(PromptError::EmptyPromptCandidates);
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(kept.into_iter().map(|(t, _)| t.clone()).collect())
}

pub const DEFAULT_STOPLIST: [&str; 30] = [
    "image", "photo", "picture", "photograph", "close-up", "closeup", "detail", "details", "object",
    "objects", "background", "surface", "texture", "material", "metal", "steel", "screen", "display",
    "industrial", "inspection", "sample", "part", "component", "high quality", "high resolution",
    "product", "item", "view", "camera", "scene",
];

pub fn default_stoplist() -> BTreeSet<String> {
    DEFAULT_STOPLIST.iter().map(|s| s.to_string()).collect()
}

/// One stoplist entry per line; `#` starts a comment.
pub fn parse_stoplist(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(|l| normalize_tag(l.split('#').next().unwrap_or("")))
        .filter(|l| !l.is_empty())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagCategory {
    Scene,
    Defect,
    Texture,
    Conditions,
}

impl std::str::FromStr for TagCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "scene" => Ok(TagCategory::Scene),
            "defect" => Ok(TagCategory::Defect),
            "texture" => Ok(TagCategory::Texture),
            "conditions" => Ok(TagCategory::Conditions),
            other => Err(format!("unknown category {other:?}")),
        }
    }
}

/// Keyword lexicon. A tag is a scene tag when it names a defect and carries
/// a scene marker ("on", "of"); otherwise the first category with a
/// matching keyword wins and unmatched tags fall into conditions.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Lexicon {
    pub scene_markers: Vec<String>,
    pub keywords: Vec<(TagCategory, String)>,
    pub overrides: BTreeMap<String, TagCategory>,
}

pub const DEFAULT_LEXICON: &str = "\
# category: keyword (matches the start of any word in a tag)
scene: on
scene: of
defect: defect
defect: pit
defect: scratch
defect: crack
defect: dent
defect: corrosion
defect: rust
defect: stain
defect: chip
defect: hole
defect: flaw
texture: texture
texture: surface
texture: grain
texture: rough
texture: smooth
texture: sheen
texture: gloss
texture: metallic
texture: striation
texture: reflective
texture: linear
texture: orientation
texture: sharp
texture: isolated
";

impl Lexicon {
    pub fn default_lexicon() -> Lexicon {
        Lexicon::parse(DEFAULT_LEXICON, "<default>").expect("built-in lexicon parses")
    }

    pub fn parse(text: &str, origin: &str) -> Result<Lexicon, PromptError> {
        let mut lex = Lexicon::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| PromptError::Lexicon {
                path: origin.to_string(),
                line: i + 1,
                message,
            };
            let (cat, kw) = line.split_once(':').ok_or_else(|| err("expected `category: keyword`".into()))?;
            let cat: TagCategory = cat.parse().map_err(err)?;
            let kw = normalize_tag(kw);
            if cat == TagCategory::Scene {
                lex.scene_markers.push(kw);
            } else {
                lex.keywords.push((cat, kw));
            }
        }
        Ok(lex)
    }

    /// Override lines are `tag = category`.
    pub fn load_overrides(&mut self, path: &Path) -> Result<(), PromptError> {
        let text = std::fs::read_to_string(path).map_err(|e| PromptError::Lexicon {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| PromptError::Lexicon {
                path: path.display().to_string(),
                line: i + 1,
                message,
            };
            let (tag, cat) = line.split_once('=').ok_or_else(|| err("expected `tag = category`".into()))?;
            self.overrides.insert(normalize_tag(tag), cat.parse().map_err(err)?);
        }
        Ok(())
    }

    fn matches(tag: &str, kw: &str) -> bool {
        let words: Vec<&str> = kw.split(' ').collect();
        let tw: Vec<&str> = tag.split(' ').collect();
        tw.windows(words.len()).any(|w| {
            w.iter().zip(&words).enumerate().all(|(j, (t, k))| {
                if j + 1 == words.len() {
                    t.starts_with(k)
                } else {
                    t == k
                }
            })
        })
    }

    pub fn categorize(&self, tag: &str) -> TagCategory {
        if let Some(&c) = self.overrides.get(tag) {
            return c;
        }
        let words: BTreeSet<&str> = tag.split(' ').collect();
        let is_defect = |t: &str| {
            self.keywords
                .iter()
                .any(|(c, k)| *c == TagCategory::Defect && Self::matches(t, k))
        };
        if self.scene_markers.iter().any(|m| words.contains(m.as_str())) && is_defect(tag) {
            return TagCategory::Scene;
        }
        for cat in [TagCategory::Defect, TagCategory::Texture] {
            if self.keywords.iter().any(|(c, k)| *c == cat && Self::matches(tag, k)) {
                return cat;
            }
        }
        TagCategory::Conditions
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub ordered_tags: Vec<String>,
    pub profile: String,
}

impl Prompt {
    pub fn hash(&self) -> String {
        sha256_hex(self.text.as_bytes())
    }
}

/// Orders tags by category (scene, defect, texture, conditions), keeping the
/// incoming frequency order within a category, and joins them with ", ".
pub fn assemble_prompt(tags: &[String], lexicon: &Lexicon, profile: &str) -> Result<Prompt, PromptError> {
    let mut seen = BTreeSet::new();
    let mut ordered: Vec<(TagCategory, usize, String)> = Vec::new();
    for (i, t) in tags.iter().enumerate() {
        let n = normalize_tag(t);
        if !n.is_empty() && seen.insert(n.clone()) {
            ordered.push((lexicon.categorize(&n), i, n));
        }
    }
    if ordered.is_empty() {
        return Err(PromptError::EmptyPromptCandidates);
    }
    ordered.sort();
    let ordered_tags: Vec<String> = ordered.into_iter().map(|(_, _, t)| t).collect();
    Ok(Prompt {
        text: ordered_tags.join(", "),
        ordered_tags,
        profile: profile.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockProfile};
    use proptest::prelude::*;

    fn tf(pairs: &[(&str, u32)], total: u32) -> TagFrequency {
        TagFrequency {
            counts: pairs.iter().map(|(t, c)| (t.to_string(), *c)).collect(),
            total_batches: total,
        }
    }

    struct Fixed(Vec<String>);

    impl Backend for Fixed {
        fn health(&self) -> Result<crate::backend::Health, BackendError> {
            unimplemented!()
        }
        fn tags(&self, images: &[RgbImage], _: usize) -> Result<Vec<Vec<String>>, BackendError> {
            Ok(vec![self.0.clone(); images.len().min(1)])
        }
        fn inpaint(&self, _: &crate::backend::InpaintRequest) -> Result<crate::backend::InpaintOutput, BackendError> {
            unimplemented!()
        }
        fn embed(&self, _: &RgbImage) -> Result<Vec<f32>, BackendError> {
            unimplemented!()
        }
        fn align(&self, _: &RgbImage, _: &str) -> Result<f64, BackendError> {
            unimplemented!()
        }
        fn segment(
            &self,
            _: &RgbImage,
            _: [f64; 4],
            _: &str,
            _: Option<&crate::raster::BinaryMask>,
        ) -> Result<crate::raster::BinaryMask, BackendError> {
            unimplemented!()
        }
    }

    fn tiny(_: usize) -> Result<RgbImage, String> {
        Ok(RgbImage::new(4, 4))
    }

    #[test]
    fn batching_and_per_batch_dedup() {
        let b = Fixed(vec!["Pit".into(), "pit ".into(), "steel".into()]);
        let f = collect_tags(8, tiny, &b, &TagConfig::default()).unwrap();
        assert_eq!(f.total_batches, 2);
        assert_eq!(f, tf(&[("pit", 2), ("steel", 2)], 2));
        assert_eq!(batch_count(221, 4), 56);
    }

    #[test]
    fn oversized_batches_are_truncated() {
        let many: Vec<String> = (0..20).map(|i| format!("t{i:02}")).collect();
        let f = collect_tags(3, tiny, &Fixed(many), &TagConfig::default()).unwrap();
        assert_eq!(f.counts.len(), 15);
    }

    #[test]
    fn pruning_rules() {
        let none = BTreeSet::new();
        assert_eq!(prune_tags(&tf(&[("a", 10), ("b", 1)], 10), &none, 0.5).unwrap(), vec!["a"]);
        let stop: BTreeSet<String> = ["image".to_string(), "photo of".to_string()].into();
        let t = tf(&[("image", 9), ("photo of", 9), ("pit", 3)], 9);
        assert_eq!(prune_tags(&t, &stop, 0.0).unwrap(), vec!["pit"]);
        assert_eq!(prune_tags(&tf(&[("y", 5), ("x", 5)], 5), &none, 0.2).unwrap(), vec!["x", "y"]);
        assert!(matches!(
            prune_tags(&tf(&[("a", 1)], 10), &none, 0.5),
            Err(PromptError::EmptyPromptCandidates)
        ));
    }

    fn mock_prompt(profile: MockProfile, name: &str) -> Prompt {
        let m = MockBackend::new(profile);
        let f = collect_tags(221, tiny, &m, &TagConfig::default()).unwrap();
        assert_eq!(f.total_batches, 56);
        let kept = prune_tags(&f, &default_stoplist(), 0.2).unwrap();
        assemble_prompt(&kept, &Lexicon::default_lexicon(), name).unwrap()
    }

    #[test]
    fn leading_clauses_for_both_profiles() {
        let p = mock_prompt(MockProfile::Bsdata, "bsdata");
        assert!(p.text.starts_with("pitting defect on galvanized steel, "), "{}", p.text);
        assert!(!p.ordered_tags.contains(&"image".to_string()));
        let p = mock_prompt(MockProfile::Msd, "msd");
        assert!(p.text.starts_with("high contrast scratch defect on dark glass display, "), "{}", p.text);
    }

    #[test]
    fn single_tag_prompt_and_overrides() {
        let lex = Lexicon::default_lexicon();
        assert_eq!(assemble_prompt(&["dark pits".into()], &lex, "x").unwrap().text, "dark pits");
        assert_eq!(lex.categorize("rough grainy texture"), TagCategory::Texture);
        assert_eq!(lex.categorize("dim diffuse lighting"), TagCategory::Conditions);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ov.txt");
        std::fs::write(&p, "dim diffuse lighting = scene\n").unwrap();
        let mut lex = lex;
        lex.load_overrides(&p).unwrap();
        assert_eq!(lex.categorize("dim diffuse lighting"), TagCategory::Scene);
        std::fs::write(&p, "oops\n").unwrap();
        assert!(lex.load_overrides(&p).is_err());
    }

    fn arb_tf() -> impl Strategy<Value = TagFrequency> {
        (1u32..20).prop_flat_map(|total| {
            proptest::collection::btree_map("[a-e]{1,3}", 1..=total, 0..12)
                .prop_map(move |counts| TagFrequency { counts, total_batches: total })
        })
    }

    proptest! {
        #[test]
        fn aggregation_ignores_batch_order(batches in proptest::collection::vec(
            proptest::collection::vec("[a-d]{1,2}", 0..6), 1..10), rot in 0usize..10) {
            let mut a = TagFrequency::default();
            for b in &batches { a.add_batch(&batch_tags(std::slice::from_ref(b), 15)); }
            let mut rotated = batches.clone();
            rotated.rotate_left(rot % batches.len());
            rotated.reverse();
            let mut b = TagFrequency::default();
            for x in &rotated { b.add_batch(&batch_tags(std::slice::from_ref(x), 15)); }
            prop_assert_eq!(a, b);
        }

        #[test]
        fn raising_threshold_never_adds(t in arb_tf(), lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let none = BTreeSet::new();
            let a: BTreeSet<String> = prune_tags(&t, &none, lo).unwrap_or_default().into_iter().collect();
            let b: BTreeSet<String> = prune_tags(&t, &none, hi).unwrap_or_default().into_iter().collect();
            prop_assert!(b.is_subset(&a));
        }

        #[test]
        fn assembly_is_idempotent(tags in proptest::collection::vec("[a-z]{1,6}( on [a-z]{2,5})?", 1..10)) {
            let lex = Lexicon::default_lexicon();
            let p = assemble_prompt(&tags, &lex, "x").unwrap();
            let q = assemble_prompt(&p.ordered_tags, &lex, "x").unwrap();
            prop_assert_eq!(&p, &q);
            let unique: BTreeSet<&String> = p.ordered_tags.iter().collect();
            prop_assert_eq!(unique.len(), p.ordered_tags.len());
        }
    }
}
