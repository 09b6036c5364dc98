//! Run configuration: a single JSON document, with paths resolved against
//! the directory of the file that declared them.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cotdrive_core::client::ProviderConfig;
use cotdrive_core::pipeline::{DecisionRecord, PromptTemplates};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DEFAULT_MAX_WORKERS: usize = 4;

fn default_max_workers() -> usize {
    DEFAULT_MAX_WORKERS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplatePaths {
    pub stage1: PathBuf,
    pub stage2: PathBuf,
    pub stage3: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub scenario_path: PathBuf,
    /// Directory that frame image paths are relative to. Defaults to the
    /// scenario file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_root: Option<PathBuf>,
    pub provider: ProviderConfig,
    /// Shipped defaults are used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates: Option<TemplatePaths>,
    pub output_dir: PathBuf,
    #[serde(default = "default_max_workers")]
    pub max_workers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_limit: Option<usize>,
    /// Zero latency fields before writing so runs compare byte for byte.
    #[serde(default)]
    pub normalize_latency: bool,
    /// If given, must match the choices this build implements.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_record: Option<DecisionRecord>,
}

impl RunConfig {
    /// Reads, resolves and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    /// Makes every relative path absolute with respect to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.scenario_path);
        fix(&mut self.output_dir);
        if let Some(root) = &mut self.image_root {
            fix(root);
        }
        if let Some(t) = &mut self.templates {
            fix(&mut t.stage1);
            fix(&mut t.stage2);
            fix(&mut t.stage3);
        }
        if let Some(script) = &mut self.provider.script_path {
            fix(script);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty()
            || self.run_id.starts_with('.')
            || !self.run_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            bail!("run_id {:?} must be non-empty and use only letters, digits, '-', '_' or '.'", self.run_id);
        }
        if self.max_workers == 0 {
            bail!("max_workers must be at least 1");
        }
        self.provider.validate().context("provider config")?;
        if let Some(record) = &self.decision_record {
            let current = self.current_decisions();
            if record != &current {
                bail!("decision_record {record:?} does not match this build's choices {current:?}");
            }
        }
        Ok(())
    }

    pub fn current_decisions(&self) -> DecisionRecord {
        DecisionRecord::current(self.provider.temperature)
    }

    pub fn image_root(&self) -> PathBuf {
        match &self.image_root {
            Some(root) => root.clone(),
            None => self.scenario_path.parent().map(Path::to_path_buf).unwrap_or_default(),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    pub fn load_templates(&self) -> Result<PromptTemplates> {
        match &self.templates {
            None => Ok(PromptTemplates::default()),
            Some(t) => PromptTemplates::load([&t.stage1, &t.stage2, &t.stage3]).context("loading templates"),
        }
    }

    /// SHA-256 over everything that affects results. The frame limit and
    /// worker count are left out so a resumed run may change them.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.frame_limit = None;
        canonical.max_workers = DEFAULT_MAX_WORKERS;
        canonical.decision_record = Some(self.current_decisions());
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
