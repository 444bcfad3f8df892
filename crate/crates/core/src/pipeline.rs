//! Workspace stages. Every stage reads the outputs of earlier stages from
//! the workspace, writes its own directory and records a `stage.json` with
//! the hashes of what it consumed and produced.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::http::{HttpBackend, RetryPolicy};
use crate::backend::{self, Backend, BackendError, MockBackend};
use crate::compositor::{self, ComposeContext, ComposedEntry, CompositeError};
use crate::config::{Config, ConfigError};
use crate::dataset::{self, Dataset, DatasetError, ImageId, SplitManifest};
use crate::filter::{self, FilterError, SelectedSet, SelectionPolicy};
use crate::generation::{self, Candidate, CandidatePool, GenerationConfig, GenerationError, MetricScores};
use crate::imageio::{self, IoError};
use crate::masks::{self, MaskError, PlacementMode, PlacementPrior};
use crate::mixture::{self, MixtureError};
use crate::patch::{self, PatchIndex};
use crate::prompt::{self, Lexicon, Prompt, PromptError, TagConfig, TagFrequency};
use crate::store::{DirStore, PatchStore};

pub const MANIFEST_FILE: &str = "stage.json";
pub const BACKEND_URL_ENV: &str = "DEFECTFORGE_BACKEND_URL";
/// Composed images get ids above every real id.
pub const SYNTHETIC_ID_BASE: ImageId = 1_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Analyze,
    Patches,
    Prompt,
    Masks,
    Candidates,
    Scores,
    Selection,
    Compose,
    Regimes,
    Report,
}

impl Stage {
    pub fn dir(self) -> &'static str {
        match self {
            Stage::Analyze => "analyze",
            Stage::Patches => "patches",
            Stage::Prompt => "prompt",
            Stage::Masks => "masks",
            Stage::Candidates => "candidates",
            Stage::Scores => "scores",
            Stage::Selection => "selection",
            Stage::Compose => "compose",
            Stage::Regimes => "regimes",
            Stage::Report => "report",
        }
    }

    /// Subcommand that produces this stage.
    pub fn command(self) -> &'static str {
        match self {
            Stage::Analyze => "analyze",
            Stage::Patches => "extract-patches",
            Stage::Prompt => "build-prompt",
            Stage::Masks => "gen-masks",
            Stage::Candidates => "generate",
            Stage::Scores => "score",
            Stage::Selection => "select",
            Stage::Compose => "compose-images",
            Stage::Regimes => "regimes",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{stage}: missing input {missing}; run `defectforge {producer}` first")]
    StageInputMissing {
        stage: &'static str,
        missing: String,
        producer: &'static str,
    },
    #[error("{stage}: input {input} changed after it was produced; rerun `defectforge {producer}` or pass --force")]
    StaleInput {
        stage: &'static str,
        input: String,
        producer: &'static str,
    },
    #[error("{stage}: invalid input: {message}")]
    InvalidInput { stage: &'static str, message: String },
    #[error("backend error: {0}")]
    Backend(String),
    #[error("{stage}: {message}")]
    Failed { stage: &'static str, message: String },
}

impl PipelineError {
    /// 2 config, 3 stage input, 4 backend, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::StageInputMissing { .. } | PipelineError::StaleInput { .. } | PipelineError::InvalidInput { .. } => 3,
            PipelineError::Backend(_) => 4,
            PipelineError::Failed { .. } => 1,
        }
    }

    fn failed(stage: Stage, e: impl Display) -> Self {
        PipelineError::Failed {
            stage: stage.command(),
            message: e.to_string(),
        }
    }

    fn input(stage: Stage, e: impl Display) -> Self {
        PipelineError::InvalidInput {
            stage: stage.command(),
            message: e.to_string(),
        }
    }
}

trait Classify {
    fn classify(self, stage: Stage) -> PipelineError;
}

impl Classify for BackendError {
    fn classify(self, _: Stage) -> PipelineError {
        PipelineError::Backend(self.to_string())
    }
}

impl Classify for IoError {
    fn classify(self, stage: Stage) -> PipelineError {
        PipelineError::failed(stage, self)
    }
}

impl Classify for DatasetError {
    fn classify(self, stage: Stage) -> PipelineError {
        PipelineError::input(stage, self)
    }
}

impl Classify for patch::PatchError {
    fn classify(self, stage: Stage) -> PipelineError {
        PipelineError::failed(stage, self)
    }
}

impl Classify for MaskError {
    fn classify(self, stage: Stage) -> PipelineError {
        PipelineError::failed(stage, self)
    }
}

impl Classify for PromptError {
    fn classify(self, stage: Stage) -> PipelineError {
        match self {
            PromptError::BackendUnavailable(e) => PipelineError::Backend(e.to_string()),
            e => PipelineError::failed(stage, e),
        }
    }
}

impl Classify for GenerationError {
    fn classify(self, stage: Stage) -> PipelineError {
        match self {
            e @ (GenerationError::BackendUnavailable { .. } | GenerationError::Backend(_)) => PipelineError::Backend(e.to_string()),
            e => PipelineError::failed(stage, e),
        }
    }
}

impl Classify for FilterError {
    fn classify(self, stage: Stage) -> PipelineError {
        match self {
            FilterError::BackendUnavailable(e) => PipelineError::Backend(e.to_string()),
            e @ FilterError::TargetExceedsPool { .. } => PipelineError::input(stage, e),
            e => PipelineError::failed(stage, e),
        }
    }
}

impl Classify for CompositeError {
    fn classify(self, stage: Stage) -> PipelineError {
        match self {
            CompositeError::Backend(e) => PipelineError::Backend(e.to_string()),
            e => PipelineError::failed(stage, e),
        }
    }
}

impl Classify for MixtureError {
    fn classify(self, stage: Stage) -> PipelineError {
        match self {
            e @ MixtureError::InsufficientSyntheticPool { .. } => PipelineError::input(stage, e),
            e => PipelineError::failed(stage, e),
        }
    }
}

trait At<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: Classify> At<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| e.classify(stage))
    }
}

/// `stage.json`: what a stage consumed and produced, without timestamps or
/// absolute paths so reruns over unchanged inputs are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub command: String,
    pub params: serde_json::Value,
    /// Workspace-relative path (or `dataset:<name>`) → sha256.
    pub inputs: BTreeMap<String, String>,
    /// Stage-relative path → sha256.
    pub outputs: BTreeMap<String, String>,
}

impl StageManifest {
    pub fn load(ws: &Path, stage: Stage) -> Result<StageManifest, IoError> {
        imageio::read_json(&ws.join(stage.dir()).join(MANIFEST_FILE))
    }
}

/// sha256 of every file below `dir` except the manifest, keyed by the
/// slash-separated relative path.
pub fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>, IoError> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<(), IoError> {
        let rd = std::fs::read_dir(dir).map_err(|source| IoError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let mut entries: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel = p.strip_prefix(root).expect("below root");
                let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                if key != MANIFEST_FILE {
                    out.insert(key, imageio::sha256_file(&p)?);
                }
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeStats {
    pub total_images: usize,
    pub retained_images: usize,
    pub dropped_images: usize,
    pub defective_images: usize,
    pub defect_free_images: usize,
    pub instance_count: usize,
    pub instances_per_image: BTreeMap<usize, usize>,
    pub images_per_resolution: BTreeMap<String, usize>,
    pub split_counts: BTreeMap<String, usize>,
    pub train_defective_images: usize,
    pub train_patches: usize,
    pub suppressed_instances: usize,
    pub bucket_thresholds: [f64; 2],
    pub upper_left_fraction: BTreeMap<String, f64>,
}

pub struct Pipeline {
    pub cfg: Config,
    pub workspace: PathBuf,
    pub force: bool,
    pub backend_url: Option<String>,
    pub mock_backend: bool,
    /// Extra `name → scores.csv` groups for the report.
    pub report_groups: Vec<(String, PathBuf)>,
    backend: Option<Arc<dyn Backend>>,
}

impl Pipeline {
    pub fn new(cfg: Config, workspace: &Path) -> Self {
        Pipeline {
            cfg,
            workspace: workspace.to_path_buf(),
            force: false,
            backend_url: None,
            mock_backend: false,
            report_groups: Vec::new(),
            backend: None,
        }
    }

    pub fn with_backend(mut self, backend: Arc<dyn Backend>) -> Self {
        self.backend = Some(backend);
        self
    }

    fn dir(&self, s: Stage) -> PathBuf {
        self.workspace.join(s.dir())
    }

    /// Mock if requested, else HTTP at flag, environment, then config URL.
    pub fn backend(&self) -> Result<Arc<dyn Backend>, PipelineError> {
        if let Some(b) = &self.backend {
            return Ok(b.clone());
        }
        if self.mock_backend || self.cfg.backend.mock {
            return Ok(Arc::new(MockBackend::new(self.cfg.backend.mock_profile)));
        }
        let url = self
            .backend_url
            .clone()
            .or_else(|| std::env::var(BACKEND_URL_ENV).ok().filter(|s| !s.is_empty()))
            .or_else(|| self.cfg.backend.base_url.clone())
            .ok_or_else(|| {
                ConfigError::Invalid(format!("no backend: pass --backend-url, set {BACKEND_URL_ENV}, or use --mock-backend"))
            })?;
        let retry = RetryPolicy {
            max_attempts: self.cfg.backend.max_attempts.max(1),
            ..RetryPolicy::default()
        };
        let http = HttpBackend::connect(&url, Duration::from_secs(self.cfg.backend.timeout_secs), retry)
            .map_err(|e| PipelineError::Backend(e.to_string()))?;
        Ok(Arc::new(http))
    }

    /// Checks an upstream stage and returns its manifest key and hash.
    fn require(&self, consumer: Stage, upstream: Stage) -> Result<(String, String), PipelineError> {
        let path = self.dir(upstream).join(MANIFEST_FILE);
        let key = format!("{}/{}", upstream.dir(), MANIFEST_FILE);
        if !path.exists() {
            return Err(PipelineError::StageInputMissing {
                stage: consumer.command(),
                missing: key,
                producer: upstream.command(),
            });
        }
        let hash = imageio::sha256_file(&path).at(consumer)?;
        if self.force {
            return Ok((key, hash));
        }
        let m = StageManifest::load(&self.workspace, upstream).map_err(|e| PipelineError::input(consumer, e))?;
        let stale = |input: String| PipelineError::StaleInput {
            stage: consumer.command(),
            input,
            producer: upstream.command(),
        };
        if hash_tree(&self.dir(upstream)).at(consumer)? != m.outputs {
            return Err(stale(format!("{}/", upstream.dir())));
        }
        for (k, h) in &m.inputs {
            if k.starts_with("dataset:") {
                continue;
            }
            let p = self.workspace.join(k);
            if !p.exists() || imageio::sha256_file(&p).at(consumer)? != *h {
                return Err(stale(k.clone()));
            }
        }
        Ok((key, hash))
    }

    fn begin(&self, s: Stage) -> Result<PathBuf, PipelineError> {
        let d = self.dir(s);
        let io = |source| PipelineError::failed(s, IoError::Io { path: d.display().to_string(), source });
        if d.exists() {
            std::fs::remove_dir_all(&d).map_err(io)?;
        }
        std::fs::create_dir_all(&d).map_err(io)?;
        Ok(d)
    }

    fn finish(
        &self,
        s: Stage,
        params: serde_json::Value,
        inputs: BTreeMap<String, String>,
    ) -> Result<StageManifest, PipelineError> {
        let m = StageManifest {
            stage: s.dir().to_string(),
            command: s.command().to_string(),
            params,
            inputs,
            outputs: hash_tree(&self.dir(s)).at(s)?,
        };
        imageio::write_json(&self.dir(s).join(MANIFEST_FILE), &m).at(s)?;
        info!("{}: {} outputs", s.command(), m.outputs.len());
        Ok(m)
    }

    fn dataset_key(&self) -> String {
        let name = self.cfg.dataset.annotations.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        format!("dataset:{name}")
    }

    /// Loads the dataset and applies the resolution filter. Consumers of
    /// `analyze` also check the annotation file still matches.
    fn dataset(&self, stage: Stage) -> Result<(Dataset, Dataset, String), PipelineError> {
        let ann = self.cfg.annotation_path();
        if !ann.exists() {
            return Err(PipelineError::StageInputMissing {
                stage: stage.command(),
                missing: ann.display().to_string(),
                producer: "make-fixture",
            });
        }
        let hash = imageio::sha256_file(&ann).at(stage)?;
        if stage != Stage::Analyze && !self.force {
            let m = StageManifest::load(&self.workspace, Stage::Analyze).map_err(|e| PipelineError::input(stage, e))?;
            if m.inputs.get(&self.dataset_key()) != Some(&hash) {
                return Err(PipelineError::StaleInput {
                    stage: stage.command(),
                    input: self.dataset_key(),
                    producer: Stage::Analyze.command(),
                });
            }
        }
        let full = dataset::load_coco(&self.cfg.dataset.root, &ann).at(stage)?;
        let allowed = self.cfg.allowed_resolutions()?;
        let retained = if allowed.is_empty() {
            full.clone()
        } else {
            dataset::filter_resolutions(&full, &allowed).at(stage)?
        };
        Ok((full, retained, hash))
    }

    fn split(&self, stage: Stage) -> Result<SplitManifest, PipelineError> {
        imageio::read_json(&self.dir(Stage::Analyze).join("split.json")).map_err(|e| PipelineError::input(stage, e))
    }

    fn seed(&self) -> u64 {
        self.cfg.seed
    }

    pub fn analyze(&self) -> Result<AnalyzeStats, PipelineError> {
        let s = Stage::Analyze;
        let (full, ds, hash) = self.dataset(s)?;
        let dir = self.begin(s)?;
        let stats = dataset::defect_stats(&ds);
        let split = dataset::split(&ds, self.cfg.dataset.split_ratios, self.seed()).at(s)?;
        let plans = patch::plan_patches(&ds, &split.train).at(s)?;
        let buckets = dataset::size_buckets(&ds, &split.train).at(s)?;
        let defective = ds.defective_image_ids();
        let mut upper_left = BTreeMap::new();
        for res in ds.resolutions() {
            let h = dataset::spatial_heatmap(&ds, res, self.cfg.dataset.heatmap_downscale).at(s)?;
            upper_left.insert(res.to_string(), h.upper_left_fraction());
            let img = h.to_gray_image();
            imageio::write_atomic(&dir.join(format!("heatmap_{res}.png")), &encode_gray(&img).at(s)?).at(s)?;
        }
        let out = AnalyzeStats {
            total_images: full.images.len(),
            retained_images: ds.images.len(),
            dropped_images: full.images.len() - ds.images.len(),
            defective_images: stats.defective_images,
            defect_free_images: stats.defect_free_images,
            instance_count: stats.instance_count,
            instances_per_image: stats.instances_per_image.clone(),
            images_per_resolution: stats.images_per_resolution.clone(),
            split_counts: BTreeMap::from([
                ("train".to_string(), split.train.len()),
                ("val".to_string(), split.val.len()),
                ("test".to_string(), split.test.len()),
            ]),
            train_defective_images: split.train.iter().filter(|i| defective.contains(i)).count(),
            train_patches: plans.len(),
            suppressed_instances: plans.iter().map(|p| p.suppressed.len()).sum(),
            bucket_thresholds: buckets.thresholds,
            upper_left_fraction: upper_left,
        };
        imageio::write_json(&dir.join("stats.json"), &out).at(s)?;
        imageio::write_json(&dir.join("split.json"), &split).at(s)?;
        imageio::write_json(&dir.join("buckets.json"), &buckets).at(s)?;
        let params = serde_json::json!({
            "seed": self.seed(),
            "allowed_resolutions": self.cfg.dataset.allowed_resolutions,
            "split_ratios": self.cfg.dataset.split_ratios,
            "heatmap_downscale": self.cfg.dataset.heatmap_downscale,
        });
        self.finish(s, params, BTreeMap::from([(self.dataset_key(), hash)]))?;
        Ok(out)
    }

    pub fn extract_patches(&self) -> Result<PatchIndex, PipelineError> {
        let s = Stage::Patches;
        let up = self.require(s, Stage::Analyze)?;
        let (_, ds, _) = self.dataset(s)?;
        let split = self.split(s)?;
        let dir = self.begin(s)?;
        let index = patch::extract_to_dir(&ds, &split.train, &dir).at(s)?;
        self.finish(s, serde_json::json!({ "patch_side": patch::PATCH_SIDE }), BTreeMap::from([up]))?;
        Ok(index)
    }

    pub fn build_prompt(&self) -> Result<Prompt, PipelineError> {
        let s = Stage::Prompt;
        let up = self.require(s, Stage::Patches)?;
        let pdir = self.dir(Stage::Patches);
        let index = PatchIndex::load(&pdir).at(s)?;
        let backend = self.backend()?;
        let pc = &self.cfg.prompt;
        let tcfg = TagConfig {
            batch_size: pc.batch_size,
            max_tags: pc.max_tags,
            concurrency: self.cfg.generation.concurrency,
        };
        let tf: TagFrequency = prompt::collect_tags(
            index.patches.len(),
            |i| index.load_image(&pdir, &index.patches[i]).map_err(|e| e.to_string()),
            backend.as_ref(),
            &tcfg,
        )
        .at(s)?;
        let stoplist = match &pc.stoplist {
            Some(p) => prompt::parse_stoplist(&read_text(p, s)?),
            None => prompt::default_stoplist(),
        };
        let mut lexicon = Lexicon::default_lexicon();
        if let Some(p) = &pc.lexicon_overrides {
            lexicon.load_overrides(p).at(s)?;
        }
        let tags = prompt::prune_tags(&tf, &stoplist, pc.min_fraction).at(s)?;
        let p = prompt::assemble_prompt(&tags, &lexicon, &self.cfg.profile).at(s)?;
        let dir = self.begin(s)?;
        imageio::write_json(&dir.join("tags.json"), &serde_json::json!({ "frequency": tf, "kept": tags })).at(s)?;
        imageio::write_json(&dir.join("prompt.json"), &p).at(s)?;
        imageio::write_atomic(&dir.join("prompt.txt"), format!("{}\n", p.text).as_bytes()).at(s)?;
        let params = serde_json::json!({
            "profile": self.cfg.profile,
            "batch_size": pc.batch_size,
            "max_tags": pc.max_tags,
            "min_fraction": pc.min_fraction,
            "stoplist": stoplist,
        });
        self.finish(s, params, BTreeMap::from([up]))?;
        Ok(p)
    }

    pub fn gen_masks(&self) -> Result<masks::MaskPool, PipelineError> {
        let s = Stage::Masks;
        let up = self.require(s, Stage::Analyze)?;
        let (_, ds, _) = self.dataset(s)?;
        let split = self.split(s)?;
        let train: BTreeSet<ImageId> = split.train.iter().copied().collect();
        let train_ds = Dataset {
            images: ds.images.iter().filter(|i| train.contains(&i.id)).cloned().collect(),
            annotations: ds.annotations.iter().filter(|a| train.contains(&a.image_id)).cloned().collect(),
            categories: ds.categories.clone(),
        };
        let mut priors = BTreeMap::new();
        let with_sources: BTreeSet<_> = train_ds
            .annotations
            .iter()
            .filter_map(|a| train_ds.image(a.image_id).map(|i| i.resolution()))
            .collect();
        for res in with_sources {
            let prior = match self.cfg.masks.placement {
                PlacementMode::SourcePosition => PlacementPrior::source_position(),
                PlacementMode::FullArea => PlacementPrior::full_area(),
                PlacementMode::HeatmapWeighted => {
                    let h = dataset::spatial_heatmap(&train_ds, res, self.cfg.dataset.heatmap_downscale).at(s)?;
                    PlacementPrior::heatmap_weighted(h).at(s)?
                }
            };
            priors.insert(res, prior);
        }
        let pool = masks::generate_pool(&ds, &split.train, self.cfg.masks.per_resolution, &priors, &self.cfg.masks.transform(), self.seed()).at(s)?;
        let dir = self.begin(s)?;
        masks::save_pool(&pool, &dir).at(s)?;
        let params = serde_json::json!({ "seed": self.seed(), "masks": self.cfg.masks });
        self.finish(s, params, BTreeMap::from([up]))?;
        Ok(pool)
    }

    pub fn generate(&self) -> Result<CandidatePool, PipelineError> {
        let s = Stage::Candidates;
        let inputs = BTreeMap::from([
            self.require(s, Stage::Analyze)?,
            self.require(s, Stage::Masks)?,
            self.require(s, Stage::Prompt)?,
        ]);
        let (_, ds, _) = self.dataset(s)?;
        let split = self.split(s)?;
        let pool = masks::load_pool(&self.dir(Stage::Masks)).at(s)?;
        let p: Prompt = imageio::read_json(&self.dir(Stage::Prompt).join("prompt.json")).at(s)?;
        let clean = ds.defect_free_image_ids();
        let backgrounds: Vec<ImageId> = split.train.iter().copied().filter(|i| clean.contains(i)).collect();
        let backend = self.backend()?;
        let dir = self.begin(s)?;
        let store = DirStore::new(&dir.join("patches"));
        let gcfg = GenerationConfig {
            count: self.cfg.generation.count,
            steps: self.cfg.generation.steps,
            concurrency: self.cfg.generation.concurrency,
        };
        let cp = generation::generate_candidates(&pool, &ds, &backgrounds, &p, &gcfg, self.seed(), backend.as_ref(), &store).at(s)?;
        imageio::write_json(&dir.join("pool.json"), &cp).at(s)?;
        let params = serde_json::json!({ "seed": self.seed(), "generation": self.cfg.generation });
        self.finish(s, params, inputs)?;
        Ok(cp)
    }

    pub fn score(&self) -> Result<Vec<Candidate>, PipelineError> {
        let s = Stage::Scores;
        let inputs = BTreeMap::from([
            self.require(s, Stage::Candidates)?,
            self.require(s, Stage::Patches)?,
            self.require(s, Stage::Prompt)?,
        ]);
        let cdir = self.dir(Stage::Candidates);
        let cp: CandidatePool = imageio::read_json(&cdir.join("pool.json")).at(s)?;
        let pdir = self.dir(Stage::Patches);
        let index = PatchIndex::load(&pdir).at(s)?;
        let p: Prompt = imageio::read_json(&self.dir(Stage::Prompt).join("prompt.json")).at(s)?;
        let backend = self.backend()?;
        let conc = self.cfg.generation.concurrency;
        let refs = filter::embed_references(
            index.patches.len(),
            |i| imageio::load_rgb(&pdir.join(&index.patches[i].image_file)),
            backend.as_ref(),
            conc,
        )
        .at(s)?;
        let store = DirStore::new(&cdir.join("patches"));
        let scored = filter::score_pool(&cp.candidates, &store, &refs, &p.text, self.cfg.selection.k, backend.as_ref(), conc).at(s)?;
        let dir = self.begin(s)?;
        imageio::write_json(&dir.join("scores.json"), &scored).at(s)?;
        filter::write_scores_csv(&dir.join("scores.csv"), &scored).at(s)?;
        self.finish(s, serde_json::json!({ "k": self.cfg.selection.k }), inputs)?;
        Ok(scored)
    }

    pub fn select(&self, target: Option<usize>) -> Result<SelectedSet, PipelineError> {
        let s = Stage::Selection;
        let inputs = BTreeMap::from([self.require(s, Stage::Scores)?]);
        let scored: Vec<Candidate> = imageio::read_json(&self.dir(Stage::Scores).join("scores.json")).at(s)?;
        let policy = SelectionPolicy {
            target_count: target.unwrap_or(self.cfg.selection.target),
            w_align: self.cfg.selection.w_align,
            w_dist: self.cfg.selection.w_dist,
        };
        let sel = filter::select(&scored, &policy).at(s)?;
        let dir = self.begin(s)?;
        imageio::write_json(&dir.join("selected.json"), &sel).at(s)?;
        self.finish(s, serde_json::to_value(policy).expect("policy serializes"), inputs)?;
        Ok(sel)
    }

    pub fn compose_images(&self) -> Result<Vec<ComposedEntry>, PipelineError> {
        let s = Stage::Compose;
        let inputs = BTreeMap::from([
            self.require(s, Stage::Analyze)?,
            self.require(s, Stage::Masks)?,
            self.require(s, Stage::Candidates)?,
            self.require(s, Stage::Selection)?,
        ]);
        let (_, ds, _) = self.dataset(s)?;
        let sel: SelectedSet = imageio::read_json(&self.dir(Stage::Selection).join("selected.json")).at(s)?;
        let cp: CandidatePool = imageio::read_json(&self.dir(Stage::Candidates).join("pool.json")).at(s)?;
        let mask_index: masks::MaskIndex = imageio::read_json(&self.dir(Stage::Masks).join("index.json")).at(s)?;
        let source_of: BTreeMap<&str, u64> = mask_index
            .masks
            .iter()
            .map(|m| (m.mask_id.as_str(), m.transform.source_annotation_id))
            .collect();
        let by_id: BTreeMap<&str, &Candidate> = cp.candidates.iter().map(|c| (c.candidate_id.as_str(), c)).collect();
        let backend: Arc<dyn Backend> = match self.cfg.compose.refine {
            compositor::RefineMode::Segment => self.backend()?,
            // no segment calls are made in this mode
            compositor::RefineMode::InpaintMask => Arc::new(MockBackend::new(self.cfg.backend.mock_profile)),
        };
        let ctx = ComposeContext {
            backend: backend.as_ref(),
            mode: self.cfg.compose.refine,
            text_cue: &self.cfg.compose.text_cue,
            sigma: self.cfg.compose.sigma,
            profile: &self.cfg.profile,
        };
        let store = DirStore::new(&self.dir(Stage::Candidates).join("patches"));
        let dir = self.begin(s)?;
        let results = backend::map_bounded(&sel.selected, self.cfg.generation.concurrency, |_, r| {
            let c = by_id
                .get(r.candidate_id.as_str())
                .ok_or_else(|| PipelineError::input(s, format!("selected candidate {} not in pool", r.candidate_id)))?;
            let bg = ds
                .image(c.background_image_id)
                .ok_or_else(|| PipelineError::input(s, format!("unknown background {}", c.background_image_id)))?;
            let category = source_of
                .get(c.synthetic_mask_id.as_str())
                .and_then(|a| ds.annotation(*a))
                .map(|a| a.category_id)
                .or_else(|| ds.categories.first().map(|c| c.id))
                .ok_or_else(|| PipelineError::input(s, "dataset has no categories"))?;
            let background = patch::load_record_rgb(bg).at(s)?;
            let img = store.image(&c.candidate_id).at(s)?;
            let mask = store.mask(&c.candidate_id).at(s)?;
            compositor::compose_one(&ctx, c, &img, &mask, &background, r.rank, SYNTHETIC_ID_BASE + r.rank as u64, category, &dir)
                .at(s)
        });
        let entries: Vec<ComposedEntry> = results.into_iter().collect::<Result<_, _>>()?;
        compositor::export_coco(&entries, &ds.categories, &dir.join("annotations.json")).at(s)?;
        imageio::write_json(&dir.join("entries.json"), &entries).at(s)?;
        let params = serde_json::json!({ "profile": self.cfg.profile, "compose": self.cfg.compose });
        self.finish(s, params, inputs)?;
        Ok(entries)
    }

    pub fn regimes(&self) -> Result<mixture::RegimesLock, PipelineError> {
        let s = Stage::Regimes;
        let inputs = BTreeMap::from([self.require(s, Stage::Analyze)?, self.require(s, Stage::Compose)?]);
        let (_, ds, _) = self.dataset(s)?;
        let split = self.split(s)?;
        let defective = ds.defective_image_ids();
        let real: Vec<ImageId> = split.train.iter().copied().filter(|i| defective.contains(i)).collect();
        let entries: Vec<ComposedEntry> = imageio::read_json(&self.dir(Stage::Compose).join("entries.json")).at(s)?;
        let mut ranked: Vec<&ComposedEntry> = entries.iter().collect();
        ranked.sort_by_key(|e| e.rank);
        let synth: Vec<ImageId> = ranked.iter().map(|e| e.image_id).collect();
        let by_id: BTreeMap<ImageId, &ComposedEntry> = entries.iter().map(|e| (e.image_id, e)).collect();
        let seeds = mixture::suite_seeds(self.seed());
        let manifests = mixture::regime_suite(&real, &synth, &seeds).at(s)?;
        let dir = self.begin(s)?;
        let real_path = |r: &dataset::ImageRecord| {
            std::path::absolute(&r.file_path)
                .unwrap_or_else(|_| r.file_path.clone())
                .display()
                .to_string()
        };
        let synth_prefix = format!("../../{}/", Stage::Compose.dir());
        let lock = mixture::write_suite(&dir, &manifests, &seeds, &real, &synth, &|m| {
            mixture::manifest_coco(m, &ds, &real_path, &by_id, &synth_prefix)
        })
        .at(s)?;
        self.finish(s, serde_json::json!({ "seeds": seeds }), inputs)?;
        Ok(lock)
    }

    pub fn report(&self) -> Result<filter::VariantReport, PipelineError> {
        let s = Stage::Report;
        let mut inputs = BTreeMap::from([self.require(s, Stage::Scores)?, self.require(s, Stage::Selection)?]);
        let scored: Vec<Candidate> = imageio::read_json(&self.dir(Stage::Scores).join("scores.json")).at(s)?;
        let sel: SelectedSet = imageio::read_json(&self.dir(Stage::Selection).join("selected.json")).at(s)?;
        let chosen: BTreeSet<&str> = sel.selected.iter().map(|r| r.candidate_id.as_str()).collect();
        let mut groups: BTreeMap<String, Vec<MetricScores>> = BTreeMap::new();
        for c in &scored {
            let sc = c.scores.clone().ok_or_else(|| PipelineError::input(s, format!("candidate {} unscored", c.candidate_id)))?;
            groups.entry("pool".into()).or_default().push(sc.clone());
            let g = if chosen.contains(c.candidate_id.as_str()) { "selected" } else { "rejected" };
            groups.entry(g.into()).or_default().push(sc);
        }
        groups.retain(|_, v| !v.is_empty());
        for (name, path) in &self.report_groups {
            let rows = filter::read_scores_csv(path).map_err(|e| PipelineError::input(s, e))?;
            let k = self.cfg.selection.k;
            groups.insert(
                name.clone(),
                rows.into_iter()
                    .map(|r| MetricScores {
                        align_score: r.align_score,
                        min_dist: r.min_dist,
                        mean_k_dist: r.mean_k_dist,
                        k,
                    })
                    .collect(),
            );
            inputs.insert(format!("dataset:group:{name}"), imageio::sha256_file(path).at(s)?);
        }
        let rep = filter::variant_report(&groups).at(s)?;
        let dir = self.begin(s)?;
        imageio::write_atomic(&dir.join("report.md"), rep.to_markdown().as_bytes()).at(s)?;
        imageio::write_json(&dir.join("report.json"), &rep).at(s)?;
        self.finish(s, serde_json::json!({ "groups": groups.keys().collect::<Vec<_>>() }), inputs)?;
        Ok(rep)
    }

    /// masks → generate → score → select → compose → regimes, after the
    /// analysis stages.
    pub fn run_all(&self) -> Result<(), PipelineError> {
        self.analyze()?;
        self.extract_patches()?;
        self.build_prompt()?;
        self.gen_masks()?;
        self.generate()?;
        self.score()?;
        self.select(None)?;
        self.compose_images()?;
        self.regimes()?;
        self.report()?;
        Ok(())
    }
}

fn read_text(p: &Path, s: Stage) -> Result<String, PipelineError> {
    std::fs::read_to_string(p).map_err(|e| PipelineError::input(s, format!("{}: {e}", p.display())))
}

fn encode_gray(img: &image::GrayImage) -> Result<Vec<u8>, IoError> {
    use image::ImageEncoder;
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::L8)
        .map_err(|source| IoError::Image {
            path: "heatmap".into(),
            source,
        })?;
    Ok(buf)
}
