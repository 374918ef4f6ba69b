use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::calibrate::{TemperatureGrid, DEFAULT_DIAGRAM_BINS, DEFAULT_FIT_BINS};
use crate::domain::{Paradigm, DEFAULT_K};
use crate::gateway::{CacheMode, GatewayConfig};
use crate::perturb::DEFAULT_PLACEHOLDER;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// OpenAI-compatible chat-completions endpoint.
    Openai,
    /// Offline lexicon mock.
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    /// Name used in reports; must be unique within a run.
    pub name: String,
    pub backend: BackendKind,
    /// Lexicon file for the mock backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    #[serde(flatten)]
    pub gateway: GatewayConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanImport {
    /// JSON file produced by the annotation service export.
    pub path: PathBuf,
    #[serde(default = "default_human_name")]
    pub name: String,
}

fn default_human_name() -> String {
    "human".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSettings {
    #[serde(default)]
    pub grid: TemperatureGrid,
    #[serde(default = "default_fit_bins")]
    pub fit_bins: usize,
    #[serde(default = "default_diagram_bins")]
    pub diagram_bins: usize,
}

fn default_fit_bins() -> usize {
    DEFAULT_FIT_BINS
}

fn default_diagram_bins() -> usize {
    DEFAULT_DIAGRAM_BINS
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self { grid: TemperatureGrid::default(), fit_bins: DEFAULT_FIT_BINS, diagram_bins: DEFAULT_DIAGRAM_BINS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub eval_per_class: usize,
    pub calib_per_class: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { eval_per_class: 50, calib_per_class: 35 }
    }
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_placeholder() -> String {
    DEFAULT_PLACEHOLDER.into()
}

fn default_paradigms() -> Vec<Paradigm> {
    Paradigm::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: PathBuf,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_paradigms")]
    pub paradigms: Vec<Paradigm>,
    #[serde(default)]
    pub sources: Vec<SourceConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human: Option<HumanImport>,
    #[serde(default)]
    pub calibration: CalibrationSettings,
    #[serde(default = "default_placeholder")]
    pub placeholder: String,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub seed: u64,
    /// Overrides every source's cache mode when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_mode: Option<CacheMode>,
    /// Default cache directory for sources that do not set one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// Reads TOML (`.toml`) or JSON. Relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let mut config: RunConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.output_dir);
        if let Some(d) = self.cache_dir.as_mut() {
            fix(d);
        }
        if let Some(h) = self.human.as_mut() {
            fix(&mut h.path);
        }
        for s in &mut self.sources {
            if let Some(l) = s.lexicon.as_mut() {
                fix(l);
            }
            if let Some(d) = s.gateway.cache_dir.as_mut() {
                fix(d);
            }
        }
    }

    /// Gateway config for a source with run-level cache settings applied.
    pub fn effective_gateway(&self, source: &SourceConfig) -> GatewayConfig {
        let mut g = source.gateway.clone();
        if let Some(mode) = self.cache_mode {
            g.cache_mode = mode;
        }
        if g.cache_dir.is_none() {
            g.cache_dir = self.cache_dir.clone();
        }
        g
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.paradigms.is_empty() {
            return err("at least one paradigm is required");
        }
        if self.k == 0 {
            return err("k must be at least 1");
        }
        if self.split.eval_per_class == 0 {
            return err("eval_per_class must be at least 1");
        }
        if !self.sources.is_empty() && self.split.calib_per_class == 0 {
            return err("calib_per_class must be at least 1 when model sources are configured");
        }
        if self.sources.is_empty() && self.human.is_none() {
            return err("no sources configured");
        }
        if self.placeholder.trim().is_empty() {
            return err("placeholder must not be empty");
        }
        if self.calibration.fit_bins == 0 || self.calibration.diagram_bins == 0 {
            return err("bin counts must be at least 1");
        }
        self.calibration
            .grid
            .points()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let mut names: Vec<&str> = self.sources.iter().map(|s| s.name.as_str()).collect();
        if let Some(h) = &self.human {
            names.push(&h.name);
        }
        let mut sorted = names.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != names.len() {
            return err("source names must be unique");
        }
        for s in &self.sources {
            if s.backend == BackendKind::Mock && s.lexicon.is_none() {
                return Err(PipelineError::Config(format!("mock source '{}' needs a lexicon", s.name)));
            }
            self.effective_gateway(s)
                .validate()
                .map_err(|e| PipelineError::Config(format!("source '{}': {e}", s.name)))?;
        }
        Ok(())
    }
}
