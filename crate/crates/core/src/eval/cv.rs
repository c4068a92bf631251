//! Cross-validation, ablation variants and the small-sample sweep.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{stratified_kfold, subsample_train, FoldSplit, OmicsDataset};
use crate::error::{CmglError, Result};
use crate::eval::metrics::{compute_metrics, MetricsReport};
use crate::evidence::{train_stage1, ConfidenceTable, Stage1Model};
use crate::gnn::{select_k, train_stage2, Confidence, FoldIndex, KScore, Stage2Model, Stage2Setup, TrainOptions};
use crate::graph::ModalityIndex;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoUncertainty,
    NoCrossFusion,
    NoTwoStage,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Self::Full, Self::NoUncertainty, Self::NoCrossFusion, Self::NoTwoStage];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoUncertainty => "no_uncertainty",
            Self::NoCrossFusion => "no_cross_fusion",
            Self::NoTwoStage => "no_two_stage",
        }
    }

    pub fn skip_attention(self) -> bool {
        self == Self::NoCrossFusion
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = CmglError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                CmglError::Config(format!(
                    "unknown variant `{s}` (expected full, no_uncertainty, no_cross_fusion or no_two_stage)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub seed: u64,
    pub k_selected: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_macro_f1: f64,
    /// Mean frozen confidence per modality over all samples.
    pub modality_confidence: Vec<f64>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub macro_recall: f64,
    pub k_scores: Vec<KScore>,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: MeanStd,
    pub macro_f1: MeanStd,
    pub weighted_f1: MeanStd,
    pub macro_recall: MeanStd,
    /// Over folds where the metric is defined.
    pub macro_auc: Option<MeanStd>,
    pub macro_auprc: Option<MeanStd>,
}

impl Summary {
    pub fn of(folds: &[FoldResult]) -> Self {
        let col = |f: fn(&FoldResult) -> f64| MeanStd::of(&folds.iter().map(f).collect::<Vec<_>>());
        let opt = |f: fn(&MetricsReport) -> Option<f64>| {
            let v: Vec<f64> = folds.iter().filter_map(|r| f(&r.metrics)).collect();
            (!v.is_empty()).then(|| MeanStd::of(&v))
        };
        Self {
            accuracy: col(|r| r.accuracy),
            macro_f1: col(|r| r.macro_f1),
            weighted_f1: col(|r| r.weighted_f1),
            macro_recall: col(|r| r.macro_recall),
            macro_auc: opt(|m| m.macro_auc),
            macro_auprc: opt(|m| m.macro_auprc),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub seed: u64,
    pub n_folds: usize,
    pub modality_names: Vec<String>,
    pub mean_modality_confidence: Vec<f64>,
    pub summary: Summary,
    pub folds: Vec<FoldResult>,
    pub config: RunConfig,
}

impl RunReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serialises")
    }
}

/// Trained state of one fold, kept out of the report.
#[derive(Debug, Clone)]
pub struct FoldArtifacts {
    pub split: FoldSplit,
    pub k: usize,
    pub stage1: Option<Stage1Model>,
    pub stage2: Stage2Model,
    pub confidences: ConfidenceTable,
    /// Test-node class probabilities, rows aligned with `split.test_idx`.
    pub test_probs: crate::tape::Mat,
}

pub struct FoldRun {
    pub result: FoldResult,
    pub artifacts: FoldArtifacts,
    pub seconds: f64,
}

fn frozen_confidences(
    ds: &OmicsDataset,
    split: &FoldSplit,
    cfg: &RunConfig,
    variant: Variant,
    seed: u64,
) -> Result<(ConfidenceTable, Option<Stage1Model>)> {
    let names = ds.modality_names().to_vec();
    let ids = ds.sample_ids().to_vec();
    match variant {
        Variant::NoUncertainty | Variant::NoTwoStage => Ok((ConfidenceTable::uniform(names, ids), None)),
        Variant::Full | Variant::NoCrossFusion => {
            let out = train_stage1(ds, split, &cfg.stage1, seed).map_err(|e| e.in_fold(split.fold_index, "stage1"))?;
            Ok((out.confidences, Some(out.model)))
        }
    }
}

/// Stage 1, k selection, Stage 2 and test evaluation for one split.
pub fn run_fold(ds: &OmicsDataset, split: &FoldSplit, cfg: &RunConfig, variant: Variant, seed: u64) -> Result<FoldRun> {
    let start = Instant::now();
    let fold = split.fold_index;
    let (mut table, mut stage1) = frozen_confidences(ds, split, cfg, variant, seed)?;
    let setup = Stage2Setup {
        fusion: &cfg.fusion,
        stage2: &cfg.stage2,
        skip_attention: variant.skip_attention(),
    };
    let r_all = table.matrix();
    let ksel = select_k(ds, split, &r_all, &cfg.graph.k_candidates, cfg.graph.warmup_epochs, &setup, seed)
        .map_err(|e| e.in_fold(fold, "select_k"))?;
    let k = ksel.k;
    info!("fold {fold}: selected k = {k}");

    let stage2 = (|| {
        let graphs = FoldIndex::build(ds, split, k)?.graphs(k)?;
        let mut init = rng::stream(seed, "stage2.init", fold as u64);
        let mut drop_rng = rng::stream(seed, "stage2.dropout", fold as u64);
        let model = Stage2Model::new(cfg.fusion.clone(), cfg.stage2.clone(), &ds.modality_dims(), ds.num_classes(), &mut init)?;
        let conf = if variant == Variant::NoTwoStage {
            let mut s1_init = rng::stream(seed, "stage1.init", fold as u64);
            Confidence::Joint(Stage1Model::new(cfg.stage1.clone(), &ds.modality_dims(), ds.num_classes(), &mut s1_init))
        } else {
            Confidence::Frozen(&r_all)
        };
        train_stage2(ds, &graphs, conf, model, &TrainOptions::from_config(&cfg.stage2, setup.skip_attention), &mut drop_rng)
    })()
    .map_err(|e| e.in_fold(fold, "stage2"))?;

    if let Some(m1) = &stage2.stage1 {
        let r = m1.infer_confidence(ds.matrices());
        table = ConfidenceTable::new(ds.modality_names().to_vec(), ds.sample_ids().to_vec(), &r);
        stage1 = stage2.stage1.clone();
    }

    let (metrics, test_probs) = (|| {
        let test_graph = ModalityIndex::build(ds.matrices(), &split.train_idx, &split.test_idx, k)?.graph(k)?;
        let inf = stage2
            .model
            .infer_graph(ds, &table.matrix(), &test_graph, setup.skip_attention)?;
        let probs = inf.probs.slice(ndarray::s![test_graph.n_train.., ..]).to_owned();
        let labels: Vec<usize> = split.test_idx.iter().map(|&i| ds.labels()[i]).collect();
        Ok::<_, CmglError>((compute_metrics(&probs, &labels)?, probs))
    })()
    .map_err(|e| e.in_fold(fold, "test"))?;

    let result = FoldResult {
        fold,
        seed,
        k_selected: k,
        best_epoch: stage2.best_epoch,
        epochs_run: stage2.epochs_run,
        best_val_macro_f1: stage2.best_val_f1,
        modality_confidence: table.modality_means(),
        accuracy: metrics.accuracy,
        macro_f1: metrics.macro_f1,
        weighted_f1: metrics.weighted_f1,
        macro_recall: metrics.macro_recall,
        k_scores: ksel.scores,
        metrics,
    };
    Ok(FoldRun {
        result,
        artifacts: FoldArtifacts {
            split: split.clone(),
            k,
            stage1,
            stage2: stage2.model,
            confidences: table,
            test_probs,
        },
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs `f` over `0..n` on up to `jobs` threads; results keep index order.
pub fn parallel_map<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    if jobs <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let out = f(i);
                slots.lock().expect("no poisoned workers")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|s| s.expect("every index ran"))
        .collect()
}

pub struct CvRun {
    pub report: RunReport,
    pub artifacts: Vec<FoldArtifacts>,
    pub fold_seconds: Vec<f64>,
}

fn assemble(ds: &OmicsDataset, cfg: &RunConfig, variant: Variant, runs: Vec<FoldRun>) -> CvRun {
    let folds: Vec<FoldResult> = runs.iter().map(|r| r.result.clone()).collect();
    let m = ds.n_modalities();
    let mean_conf = (0..m)
        .map(|j| folds.iter().map(|f| f.modality_confidence[j]).sum::<f64>() / folds.len() as f64)
        .collect();
    let report = RunReport {
        variant,
        seed: cfg.seed,
        n_folds: folds.len(),
        modality_names: ds.modality_names().to_vec(),
        mean_modality_confidence: mean_conf,
        summary: Summary::of(&folds),
        folds,
        config: cfg.clone(),
    };
    let fold_seconds = runs.iter().map(|r| r.seconds).collect();
    CvRun {
        report,
        artifacts: runs.into_iter().map(|r| r.artifacts).collect(),
        fold_seconds,
    }
}

/// Cross-validation of `variant` over precomputed `splits`.
pub fn run_splits(ds: &OmicsDataset, splits: &[FoldSplit], cfg: &RunConfig, variant: Variant) -> Result<CvRun> {
    let runs = parallel_map(splits.len(), cfg.jobs, |i| run_fold(ds, &splits[i], cfg, variant, cfg.seed))?;
    Ok(assemble(ds, cfg, variant, runs))
}

pub fn folds_for(ds: &OmicsDataset, cfg: &RunConfig) -> Result<Vec<FoldSplit>> {
    stratified_kfold(ds, cfg.n_folds, rng::stream_seed(cfg.seed, "data", 0))
}

/// Stratified k-fold evaluation of the full model.
pub fn run_cv(ds: &OmicsDataset, cfg: &RunConfig) -> Result<CvRun> {
    run_ablation(ds, Variant::Full, cfg)
}

/// Same protocol as [`run_cv`] with one component removed; folds are
/// identical across variants.
pub fn run_ablation(ds: &OmicsDataset, variant: Variant, cfg: &RunConfig) -> Result<CvRun> {
    cfg.validate()?;
    let splits = folds_for(ds, cfg)?;
    run_splits(ds, &splits, cfg, variant)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleRow {
    pub fraction: f64,
    pub train_sizes: Vec<usize>,
    /// Per fold, classes kept at one sample.
    pub raised_classes: Vec<Vec<usize>>,
    pub summary: Summary,
    pub folds: Vec<FoldResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleReport {
    pub seed: u64,
    pub rows: Vec<SubsampleRow>,
    pub config: RunConfig,
}

/// Re-runs cross-validation with each fold's training set subsampled.
pub fn run_subsample(ds: &OmicsDataset, fractions: &[f64], cfg: &RunConfig) -> Result<SubsampleReport> {
    cfg.validate()?;
    let splits = folds_for(ds, cfg)?;
    let mut rows = Vec::new();
    for &fraction in fractions {
        let subs = splits
            .iter()
            .map(|s| subsample_train(s, ds.labels(), fraction, rng::stream_seed(cfg.seed, "data.subsample", 0)))
            .collect::<Result<Vec<_>>>()?;
        let sub_splits: Vec<FoldSplit> = subs.iter().map(|s| s.split.clone()).collect();
        let run = run_splits(ds, &sub_splits, cfg, Variant::Full)?;
        rows.push(SubsampleRow {
            fraction,
            train_sizes: sub_splits.iter().map(|s| s.train_idx.len()).collect(),
            raised_classes: subs.into_iter().map(|s| s.raised_classes).collect(),
            summary: run.report.summary,
            folds: run.report.folds,
        });
    }
    Ok(SubsampleReport {
        seed: cfg.seed,
        rows,
        config: cfg.clone(),
    })
}
