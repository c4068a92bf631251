//! Frozen-inference embedding export.

use std::fs;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::data::OmicsDataset;
use crate::error::{CmglError, Result};
use crate::eval::cv::Variant;
use crate::eval::metrics::argmax_rows;
use crate::evidence::ConfidenceTable;
use crate::graph::inference_graph;
use crate::tape::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub sample_ids: Vec<String>,
    pub pred: Vec<usize>,
    /// Maximum class probability.
    pub confidence: Vec<f64>,
    /// `N x 64`.
    pub embeddings: Mat,
    /// Modality confidences used for the pass.
    pub modality_confidence: ConfidenceTable,
}

impl EmbeddingTable {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("sample_id\tpred\tconfidence");
        for j in 0..self.embeddings.ncols() {
            s.push_str(&format!("\te_{j}"));
        }
        s.push('\n');
        for (i, id) in self.sample_ids.iter().enumerate() {
            s.push_str(&format!("{id}\t{}\t{}", self.pred[i], self.confidence[i]));
            for v in self.embeddings.row(i) {
                s.push('\t');
                s.push_str(&v.to_string());
            }
            s.push('\n');
        }
        s
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| CmglError::io(path, e))
    }
}

/// Checks `ds` matches the checkpoint's modality layout.
pub fn check_compatible(ckpt: &Checkpoint, ds: &OmicsDataset) -> Result<()> {
    if ds.n_modalities() != ckpt.modality_dims.len() {
        return Err(CmglError::Shape(format!(
            "dataset has {} modalities, checkpoint expects {}",
            ds.n_modalities(),
            ckpt.modality_dims.len()
        )));
    }
    for (m, (&got, &want)) in ds.modality_dims().iter().zip(&ckpt.modality_dims).enumerate() {
        if got != want {
            return Err(CmglError::Shape(format!(
                "modality {} has {got} features, checkpoint modality {} expects {want}",
                ds.modality_names()[m],
                ckpt.modality_names[m]
            )));
        }
    }
    Ok(())
}

/// Single forward pass over every sample of `ds` on its own intersection
/// graph, with confidences from the checkpoint's Stage 1.
pub fn export_embeddings(ckpt: &Checkpoint, ds: &OmicsDataset) -> Result<EmbeddingTable> {
    check_compatible(ckpt, ds)?;
    let model = ckpt.stage2_model()?;
    let names = ds.modality_names().to_vec();
    let ids = ds.sample_ids().to_vec();
    let table = match ckpt.stage1_model()? {
        Some(s1) => ConfidenceTable::new(names, ids, &s1.infer_confidence(ds.matrices())),
        None => ConfidenceTable::uniform(names, ids),
    };
    let k = ckpt.k.min(ds.n_samples().saturating_sub(1));
    let graph = inference_graph(ds.matrices(), k)?;
    let skip = ckpt.variant == Variant::NoCrossFusion;
    let inf = model.infer(ds.matrices(), &table.matrix(), &graph.adjacency, skip)?;
    let pred = argmax_rows(&inf.probs);
    let confidence = pred.iter().enumerate().map(|(i, &c)| inf.probs[[i, c]]).collect();
    Ok(EmbeddingTable {
        sample_ids: ds.sample_ids().to_vec(),
        pred,
        confidence,
        embeddings: inf.embeddings,
        modality_confidence: table,
    })
}
