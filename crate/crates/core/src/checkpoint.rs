//! Versioned model checkpoints: a `CMGL1` magic line followed by JSON.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CmglError, Result};
use crate::eval::cv::{FoldArtifacts, Variant};
use crate::evidence::{ConfidenceTable, Stage1Config, Stage1Model};
use crate::fusion::FusionConfig;
use crate::gnn::{Stage2Config, Stage2Model};
use crate::nn::NamedTensor;
use crate::rng;

pub const MAGIC: &str = "CMGL1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub variant: Variant,
    pub fold: usize,
    pub k: usize,
    pub modality_names: Vec<String>,
    pub modality_dims: Vec<usize>,
    pub num_classes: usize,
    pub stage1_config: Stage1Config,
    pub fusion_config: FusionConfig,
    pub stage2_config: Stage2Config,
    /// Absent when the variant uses uniform confidences.
    pub stage1: Option<Vec<NamedTensor>>,
    pub stage2: Vec<NamedTensor>,
    pub confidences: ConfidenceTable,
}

impl Checkpoint {
    pub fn from_fold(art: &FoldArtifacts, variant: Variant, modality_names: &[String]) -> Self {
        let s2 = &art.stage2;
        Self {
            variant,
            fold: art.split.fold_index,
            k: art.k,
            modality_names: modality_names.to_vec(),
            modality_dims: s2.fusion.input_dims(),
            num_classes: s2.num_classes,
            stage1_config: art.stage1.as_ref().map(|m| m.config.clone()).unwrap_or_default(),
            fusion_config: s2.fusion.config.clone(),
            stage2_config: s2.config.clone(),
            stage1: art.stage1.as_ref().map(|m| m.params.to_tensors()),
            stage2: s2.params.to_tensors(),
            confidences: art.confidences.clone(),
        }
    }

    pub fn to_string(&self) -> String {
        format!("{MAGIC}\n{}\n", serde_json::to_string(self).expect("checkpoint serialises"))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (head, body) = text.split_once('\n').unwrap_or((text, ""));
        if head.trim_end() != MAGIC {
            return Err(CmglError::Checkpoint(format!("bad magic line `{}`", head.chars().take(16).collect::<String>())));
        }
        serde_json::from_str(body).map_err(|e| CmglError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_string()).map_err(|e| CmglError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CmglError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn stage2_model(&self) -> Result<Stage2Model> {
        let mut rng = rng::stream(0, "checkpoint", 0);
        let mut m = Stage2Model::new(
            self.fusion_config.clone(),
            self.stage2_config.clone(),
            &self.modality_dims,
            self.num_classes,
            &mut rng,
        )?;
        m.params.load_tensors(&self.stage2).map_err(CmglError::Checkpoint)?;
        Ok(m)
    }

    pub fn stage1_model(&self) -> Result<Option<Stage1Model>> {
        let Some(tensors) = &self.stage1 else {
            return Ok(None);
        };
        let mut rng = rng::stream(0, "checkpoint", 1);
        let mut m = Stage1Model::new(self.stage1_config.clone(), &self.modality_dims, self.num_classes, &mut rng);
        m.params.load_tensors(tensors).map_err(CmglError::Checkpoint)?;
        Ok(Some(m))
    }
}
