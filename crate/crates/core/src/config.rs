//! Profile configuration: one TOML document, unknown keys rejected.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::MockProfile;
use crate::compositor::{RefineMode, DEFAULT_SIGMA};
use crate::dataset::Resolution;
use crate::masks::{PlacementMode, TransformConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("unknown profile {0:?} (bsdata, msd)")]
    UnknownProfile(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{field}: path {path} does not exist")]
    MissingPath { field: &'static str, path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Directory image file names are relative to.
    pub root: PathBuf,
    /// COCO file, relative to `root` unless absolute.
    pub annotations: PathBuf,
    /// Empty keeps every resolution.
    pub allowed_resolutions: Vec<String>,
    pub split_ratios: [f64; 3],
    pub heatmap_downscale: u32,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            root: PathBuf::from("dataset"),
            annotations: PathBuf::from("annotations.json"),
            allowed_resolutions: Vec::new(),
            split_ratios: [0.65, 0.15, 0.20],
            heatmap_downscale: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSection {
    pub stoplist: Option<PathBuf>,
    pub lexicon_overrides: Option<PathBuf>,
    pub batch_size: usize,
    pub max_tags: usize,
    pub min_fraction: f64,
}

impl Default for PromptSection {
    fn default() -> Self {
        PromptSection {
            stoplist: None,
            lexicon_overrides: None,
            batch_size: 4,
            max_tags: 15,
            min_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MasksSection {
    pub per_resolution: usize,
    pub placement: PlacementMode,
    pub scale_min: f64,
    pub scale_max: f64,
    pub shift_max: i32,
}

impl Default for MasksSection {
    fn default() -> Self {
        let t = TransformConfig::default();
        MasksSection {
            per_resolution: 500,
            placement: PlacementMode::HeatmapWeighted,
            scale_min: t.scale_min,
            scale_max: t.scale_max,
            shift_max: t.shift_max,
        }
    }
}

impl MasksSection {
    pub fn transform(&self) -> TransformConfig {
        TransformConfig {
            scale_min: self.scale_min,
            scale_max: self.scale_max,
            shift_max: self.shift_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationSection {
    pub count: usize,
    pub steps: u32,
    pub concurrency: usize,
}

impl Default for GenerationSection {
    fn default() -> Self {
        GenerationSection {
            count: 1000,
            steps: 30,
            concurrency: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionSection {
    pub target: usize,
    pub k: usize,
    pub w_align: f64,
    pub w_dist: f64,
}

impl Default for SelectionSection {
    fn default() -> Self {
        SelectionSection {
            target: 420,
            k: 3,
            w_align: 1.0,
            w_dist: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComposeSection {
    pub refine: RefineMode,
    pub sigma: f64,
    pub text_cue: String,
}

impl Default for ComposeSection {
    fn default() -> Self {
        ComposeSection {
            refine: RefineMode::Segment,
            sigma: DEFAULT_SIGMA,
            text_cue: "pitting".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    pub base_url: Option<String>,
    pub mock: bool,
    pub mock_profile: MockProfile,
    pub timeout_secs: u64,
    pub max_attempts: u32,
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection {
            base_url: None,
            mock: false,
            mock_profile: MockProfile::Bsdata,
            timeout_secs: 120,
            max_attempts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub profile: String,
    pub seed: u64,
    pub dataset: DatasetSection,
    pub prompt: PromptSection,
    pub masks: MasksSection,
    pub generation: GenerationSection,
    pub selection: SelectionSection,
    pub compose: ComposeSection,
    pub backend: BackendSection,
}

impl Default for Config {
    fn default() -> Self {
        Config::builtin("bsdata").expect("builtin profile")
    }
}

impl Config {
    pub fn builtin(name: &str) -> Result<Config, ConfigError> {
        let base = Config {
            profile: name.to_string(),
            seed: 7,
            dataset: DatasetSection::default(),
            prompt: PromptSection::default(),
            masks: MasksSection::default(),
            generation: GenerationSection::default(),
            selection: SelectionSection::default(),
            compose: ComposeSection::default(),
            backend: BackendSection::default(),
        };
        match name {
            "bsdata" => Ok(Config {
                dataset: DatasetSection {
                    allowed_resolutions: vec!["1130x460".into(), "1540x645".into()],
                    ..base.dataset.clone()
                },
                ..base
            }),
            "msd" => Ok(Config {
                masks: MasksSection {
                    placement: PlacementMode::FullArea,
                    ..base.masks.clone()
                },
                compose: ComposeSection {
                    refine: RefineMode::InpaintMask,
                    sigma: DEFAULT_SIGMA,
                    text_cue: "scratch".into(),
                },
                backend: BackendSection {
                    mock_profile: MockProfile::Msd,
                    ..base.backend.clone()
                },
                ..base
            }),
            other => Err(ConfigError::UnknownProfile(other.to_string())),
        }
    }

    /// Parses a TOML document. Relative paths are resolved against `base_dir`.
    pub fn parse(text: &str, origin: &str, base_dir: &Path) -> Result<Config, ConfigError> {
        let value: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        let profile = value.get("profile").and_then(|v| v.as_str()).unwrap_or("bsdata");
        // start from the named builtin so a file only states what differs
        let mut merged = toml::Table::try_from(Config::builtin(profile).unwrap_or_else(|_| Config {
            profile: profile.to_string(),
            ..Config::default()
        }))
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        merge(&mut merged, value);
        let mut cfg: Config = merged.try_into().map_err(|e: toml::de::Error| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Config::parse(&text, &path.display().to_string(), base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset.root);
        if let Some(p) = self.prompt.stoplist.as_mut() {
            fix(p);
        }
        if let Some(p) = self.prompt.lexicon_overrides.as_mut() {
            fix(p);
        }
    }

    pub fn annotation_path(&self) -> PathBuf {
        self.dataset.root.join(&self.dataset.annotations)
    }

    pub fn allowed_resolutions(&self) -> Result<BTreeSet<Resolution>, ConfigError> {
        self.dataset
            .allowed_resolutions
            .iter()
            .map(|s| s.parse::<Resolution>().map_err(|e| ConfigError::Invalid(format!("allowed_resolutions: {e}"))))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.allowed_resolutions()?;
        if (self.dataset.split_ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return invalid(format!("split_ratios {:?} must sum to 1", self.dataset.split_ratios));
        }
        if self.dataset.heatmap_downscale == 0 {
            return invalid("heatmap_downscale must be >= 1".into());
        }
        self.masks
            .transform()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.masks.per_resolution == 0 || self.generation.count == 0 || self.generation.steps == 0 {
            return invalid("per_resolution, count and steps must be positive".into());
        }
        if self.generation.concurrency == 0 || self.prompt.batch_size == 0 || self.prompt.max_tags == 0 {
            return invalid("concurrency, batch_size and max_tags must be positive".into());
        }
        if self.selection.k == 0 || self.selection.target == 0 {
            return invalid("selection k and target must be positive".into());
        }
        if !(self.compose.sigma.is_finite() && self.compose.sigma > 0.0) {
            return invalid(format!("sigma must be positive, got {}", self.compose.sigma));
        }
        for (field, p) in [("prompt.stoplist", &self.prompt.stoplist), ("prompt.lexicon_overrides", &self.prompt.lexicon_overrides)] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(ConfigError::MissingPath {
                        field,
                        path: p.display().to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
