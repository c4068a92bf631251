//! Run configuration stored as TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_dataset, OmicsDataset, SyntheticSpec};
use crate::error::{CmglError, Result};
use crate::evidence::Stage1Config;
use crate::fusion::FusionConfig;
use crate::gnn::Stage2Config;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub k_candidates: Vec<usize>,
    pub warmup_epochs: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            k_candidates: vec![7, 11, 15, 19, 23],
            warmup_epochs: 30,
        }
    }
}

/// Everything that determines a run. Scalar keys come first so the TOML
/// form keeps them above the section tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub n_folds: usize,
    pub jobs: usize,
    /// Directory in the TSV layout; when absent the synthetic fixture is used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_dir: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub stage1: Stage1Config,
    pub fusion: FusionConfig,
    pub graph: GraphConfig,
    pub stage2: Stage2Config,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_folds: 5,
            jobs: 1,
            dataset_dir: None,
            synthetic: SyntheticSpec::default(),
            stage1: Stage1Config::default(),
            fusion: FusionConfig::default(),
            graph: GraphConfig::default(),
            stage2: Stage2Config::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CmglError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CmglError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CmglError::Config(msg) => CmglError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_folds < 2 {
            return Err(CmglError::Config("n_folds must be >= 2".into()));
        }
        if self.jobs == 0 {
            return Err(CmglError::Config("jobs must be >= 1".into()));
        }
        if self.graph.k_candidates.is_empty() || self.graph.k_candidates.contains(&0) {
            return Err(CmglError::Config("graph.k_candidates must be non-empty and positive".into()));
        }
        if self.graph.warmup_epochs == 0 {
            return Err(CmglError::Config("graph.warmup_epochs must be >= 1".into()));
        }
        if self.stage2.epochs == 0 {
            return Err(CmglError::Config("stage2.epochs must be >= 1".into()));
        }
        self.synthetic.validate()?;
        self.stage1.validate()?;
        self.fusion.validate()?;
        self.stage2.validate()
    }

    pub fn dataset(&self) -> Result<OmicsDataset> {
        match &self.dataset_dir {
            Some(dir) => load_dataset(dir),
            None => generate_synthetic(&self.synthetic),
        }
    }

    /// Returns a copy with the dotted `key` (e.g. `stage1.lambda_edl`) set.
    pub fn with_value(&self, key: &str, value: &toml::Value) -> Result<Self> {
        let mut root = toml::Value::try_from(self).expect("config serialises");
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| CmglError::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = match (&*slot, value) {
            (toml::Value::Integer(_), toml::Value::Float(f)) if f.fract() == 0.0 => toml::Value::Integer(*f as i64),
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(*i as f64),
            _ => value.clone(),
        };
        let cfg: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| CmglError::Config(format!("`{key}`: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
