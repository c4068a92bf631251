//! GraphSAGE classifier, Stage-2 losses and the Stage-2 training loop.

use std::rc::Rc;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::data::{FoldSplit, OmicsDataset};
use crate::error::{CmglError, Result};
use crate::eval::metrics::{argmax_rows, macro_f1};
use crate::evidence::{one_hot, Stage1Model};
use crate::fusion::{FusionConfig, FusionForward, FusionModel};
use crate::graph::{ModalityIndex, NodeGraph};
use crate::nn::{dropout, Adam, Bound, Linear, ParamSet};
use crate::rng::{self, Rng};
use crate::tape::{Mat, SparseRows, Tape, Var};

const NORM_EPS_SQ: f64 = 1e-24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub epochs: usize,
    pub lr: f64,
    pub patience: usize,
    pub lambda_cls: f64,
    pub lambda_con: f64,
    pub label_smoothing: f64,
    pub temperature: f64,
    pub hidden: usize,
    pub embed: usize,
    pub sage_dropout: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 1e-3,
            patience: 30,
            lambda_cls: 3.0,
            lambda_con: 1.0,
            label_smoothing: 0.1,
            temperature: 0.1,
            hidden: 128,
            embed: 64,
            sage_dropout: 0.0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CmglError::Config(format!("stage2.{m}")));
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must be in [0, 1)");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        if self.lambda_cls < 0.0 || self.lambda_con < 0.0 {
            return bad("loss weights must be >= 0");
        }
        if !(0.0..1.0).contains(&self.sage_dropout) {
            return bad("sage_dropout must be in [0, 1)");
        }
        if self.hidden == 0 || self.embed == 0 || !(self.lr > 0.0) || self.patience == 0 {
            return bad("hidden, embed, lr and patience must be positive");
        }
        Ok(())
    }
}

/// `w_c ∝ 1/√n_c`, normalised to mean one.
pub fn class_weights(labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(CmglError::Dataset(format!("class {c} has no training samples")));
    }
    let raw: Vec<f64> = counts.iter().map(|&n| 1.0 / (n as f64).sqrt()).collect();
    let mean = raw.iter().sum::<f64>() / num_classes as f64;
    Ok(raw.iter().map(|w| w / mean).collect())
}

/// Rows `w_{y_i} · ỹ_i` with `1 - ε` on the target, `ε/(C-1)` elsewhere.
pub fn smoothed_targets(labels: &[usize], weights: &[f64], num_classes: usize, eps: f64) -> Mat {
    let off = if num_classes > 1 { eps / (num_classes - 1) as f64 } else { 0.0 };
    let mut t = Mat::zeros((labels.len(), num_classes));
    for (i, &y) in labels.iter().enumerate() {
        let w = weights[y];
        for c in 0..num_classes {
            t[[i, c]] = w * if c == y { 1.0 - eps } else { off };
        }
    }
    t
}

/// Weighted label-smoothing cross-entropy, averaged over rows.
pub fn ce_loss(logits: &Mat, labels: &[usize], weights: &[f64], eps: f64) -> f64 {
    let target = smoothed_targets(labels, weights, logits.ncols(), eps);
    let mut total = 0.0;
    for (row, t) in logits.rows().into_iter().zip(target.rows()) {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total -= row.iter().zip(t.iter()).map(|(&z, &w)| w * (z - lse)).sum::<f64>();
    }
    total / logits.nrows() as f64
}

/// Supervised contrastive loss value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupCon {
    pub loss: f64,
    /// Anchors with at least one same-class partner; zero means the loss
    /// is reported as 0 and carries no signal.
    pub valid_anchors: usize,
}

fn positive_weights(labels: &[usize]) -> (Mat, usize) {
    let n = labels.len();
    let mut w = Mat::zeros((n, n));
    let mut valid = 0;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        valid += 1;
        for &j in &pos {
            w[[i, j]] = 1.0 / pos.len() as f64;
        }
    }
    (w, valid)
}

pub fn supcon_loss(embeddings: &Mat, labels: &[usize], tau: f64) -> SupCon {
    let n = embeddings.nrows();
    let mut unit = embeddings.clone();
    for mut row in unit.rows_mut() {
        let norm = (row.dot(&row) + NORM_EPS_SQ).sqrt();
        row.mapv_inplace(|v| v / norm);
    }
    let sim = unit.dot(&unit.t()) / tau;
    let (w, valid) = positive_weights(labels);
    if valid == 0 {
        return SupCon { loss: 0.0, valid_anchors: 0 };
    }
    let mut total = 0.0;
    for i in 0..n {
        let others = (0..n).filter(|&k| k != i);
        let mx = others.clone().map(|k| sim[[i, k]]).fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + others.map(|k| (sim[[i, k]] - mx).exp()).sum::<f64>().ln();
        for j in 0..n {
            if w[[i, j]] > 0.0 {
                total -= w[[i, j]] * (sim[[i, j]] - lse);
            }
        }
    }
    SupCon {
        loss: total / valid as f64,
        valid_anchors: valid,
    }
}

fn tape_ce(tape: &mut Tape, logits: Var, target: &Mat) -> Var {
    let n = tape.shape(logits).0 as f64;
    let lp = tape.log_softmax_rows(logits, None);
    let t = tape.constant(target.clone());
    let prod = tape.mul(lp, t);
    let s = tape.sum(prod);
    tape.scale(s, -1.0 / n)
}

/// Tape route of [`supcon_loss`]; `None` when no anchor is valid.
fn tape_supcon(tape: &mut Tape, e: Var, labels: &[usize], tau: f64) -> Option<(Var, usize)> {
    let n = labels.len();
    let (w, valid) = positive_weights(labels);
    if valid == 0 {
        return None;
    }
    let sq = tape.mul(e, e);
    let norm = tape.sum_rows(sq);
    let norm = tape.add_scalar(norm, NORM_EPS_SQ);
    let norm = tape.sqrt(norm);
    let unit = tape.div(e, norm);
    let sim = tape.matmul_t(unit, unit);
    let sim = tape.scale(sim, 1.0 / tau);
    let mask = Rc::new(ndarray::Array2::from_shape_fn((n, n), |(i, j)| i != j));
    let lp = tape.log_softmax_rows(sim, Some(mask));
    let w = tape.constant(w);
    let prod = tape.mul(lp, w);
    let s = tape.sum(prod);
    Some((tape.scale(s, -1.0 / valid as f64), valid))
}

/// Two mean-aggregator GraphSAGE layers, residual projection and
/// classifier.
#[derive(Debug, Clone)]
pub struct Sage {
    layer1: Linear,
    layer2: Linear,
    residual: Linear,
    classifier: Linear,
    dropout: f64,
}

impl Sage {
    pub fn new(cfg: &Stage2Config, width: usize, num_classes: usize, params: &mut ParamSet, rng: &mut Rng) -> Self {
        Self {
            layer1: Linear::new(params, rng, "s2.sage1", 2 * width, cfg.hidden, true),
            layer2: Linear::new(params, rng, "s2.sage2", 2 * cfg.hidden, cfg.embed, true),
            residual: Linear::new(params, rng, "s2.res", width, cfg.embed, false),
            classifier: Linear::new(params, rng, "s2.cls", cfg.embed, num_classes, true),
            dropout: cfg.sage_dropout,
        }
    }

    /// Returns `(embeddings, logits)`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, z: Var, adj: &Rc<SparseRows>, mut rng: Option<&mut Rng>) -> (Var, Var) {
        let agg = tape.aggregate(adj.clone(), z);
        let h = tape.concat_cols(&[z, agg]);
        let h = self.layer1.forward(tape, bound, h);
        let h = tape.silu(h);
        let h = dropout(tape, h, self.dropout, rng.as_deref_mut());
        let agg = tape.aggregate(adj.clone(), h);
        let h = tape.concat_cols(&[h, agg]);
        let h = self.layer2.forward(tape, bound, h);
        let res = self.residual.forward(tape, bound, z);
        let e = tape.add(h, res);
        let logits = self.classifier.forward(tape, bound, e);
        (e, logits)
    }
}

/// Fusion block plus GraphSAGE head in a single parameter set.
#[derive(Debug, Clone)]
pub struct Stage2Model {
    pub config: Stage2Config,
    pub num_classes: usize,
    pub params: ParamSet,
    pub fusion: FusionModel,
    sage: Sage,
}

pub struct Stage2Forward {
    pub fusion: FusionForward,
    pub embeddings: Var,
    pub logits: Var,
}

pub struct Stage2Loss {
    pub total: Var,
    pub ce: Var,
    pub supcon: Option<Var>,
    pub valid_anchors: usize,
}

/// Frozen-inference outputs for the nodes of one graph.
#[derive(Debug, Clone)]
pub struct Inference {
    pub embeddings: Mat,
    pub logits: Mat,
    pub probs: Mat,
}

fn softmax(logits: &Mat) -> Mat {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

impl Stage2Model {
    pub fn new(
        fusion: FusionConfig,
        config: Stage2Config,
        dims: &[usize],
        num_classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let width = fusion.width;
        let fusion = FusionModel::new(fusion, dims, &mut params, rng)?;
        let sage = Sage::new(&config, width, num_classes, &mut params, rng);
        Ok(Self {
            config,
            num_classes,
            params,
            fusion,
            sage,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        inputs: &[Var],
        r: Var,
        adj: &Rc<SparseRows>,
        skip_attention: bool,
        mut rng: Option<&mut Rng>,
    ) -> Result<Stage2Forward> {
        let n = tape.shape(r).0;
        if adj.n_rows() != n || adj.n_cols() != n {
            return Err(CmglError::Structural(format!(
                "adjacency is {}x{} for {n} nodes",
                adj.n_rows(),
                adj.n_cols()
            )));
        }
        let fusion = self.fusion.forward(tape, bound, inputs, r, skip_attention, rng.as_deref_mut())?;
        let (embeddings, logits) = self.sage.forward(tape, bound, fusion.z, adj, rng);
        Ok(Stage2Forward {
            fusion,
            embeddings,
            logits,
        })
    }

    /// `λ_cls · CE + λ_con · SupCon` over all rows of the forward pass.
    pub fn loss(&self, tape: &mut Tape, fwd: &Stage2Forward, labels: &[usize], weights: &[f64]) -> Stage2Loss {
        let cfg = &self.config;
        let target = smoothed_targets(labels, weights, self.num_classes, cfg.label_smoothing);
        let ce = tape_ce(tape, fwd.logits, &target);
        let mut total = tape.scale(ce, cfg.lambda_cls);
        let sc = tape_supcon(tape, fwd.embeddings, labels, cfg.temperature);
        if let Some((s, _)) = sc {
            let weighted = tape.scale(s, cfg.lambda_con);
            total = tape.add(total, weighted);
        }
        Stage2Loss {
            total,
            ce,
            supcon: sc.map(|p| p.0),
            valid_anchors: sc.map_or(0, |p| p.1),
        }
    }

    /// Evaluation-mode forward pass over the nodes of `graph`.
    pub fn infer(&self, inputs: &[Mat], r: &Mat, adj: &Rc<SparseRows>, skip_attention: bool) -> Result<Inference> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xs: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let rv = tape.constant(r.clone());
        let fwd = self.forward(&mut tape, &bound, &xs, rv, adj, skip_attention, None)?;
        let logits = tape.value(fwd.logits).clone();
        Ok(Inference {
            embeddings: tape.value(fwd.embeddings).clone(),
            probs: softmax(&logits),
            logits,
        })
    }

    /// Inference on `graph`, whose nodes index rows of `ds` and of `r_all`.
    pub fn infer_graph(&self, ds: &OmicsDataset, r_all: &Mat, graph: &NodeGraph, skip_attention: bool) -> Result<Inference> {
        let inputs = ds.select_rows(&graph.nodes);
        let r = r_all.select(ndarray::Axis(0), &graph.nodes);
        self.infer(&inputs, &r, &graph.adjacency, skip_attention)
    }
}

/// Graphs used to train and validate one fold.
#[derive(Debug, Clone)]
pub struct FoldGraphs {
    /// Training nodes only; used for parameter updates.
    pub train: NodeGraph,
    /// Training plus validation nodes; used for checkpoint selection.
    pub val: NodeGraph,
}

/// Neighbour lists for a fold, reusable across candidate `k`.
pub struct FoldIndex {
    train: ModalityIndex,
    val: ModalityIndex,
}

impl FoldIndex {
    pub fn build(ds: &OmicsDataset, split: &FoldSplit, max_k: usize) -> Result<Self> {
        Ok(Self {
            train: ModalityIndex::build(ds.matrices(), &split.train_idx, &[], max_k)?,
            val: ModalityIndex::build(ds.matrices(), &split.train_idx, &split.val_idx, max_k)?,
        })
    }

    pub fn graphs(&self, k: usize) -> Result<FoldGraphs> {
        Ok(FoldGraphs {
            train: self.train.graph(k)?,
            val: self.val.graph(k)?,
        })
    }
}

/// How the loop obtains modality confidences.
pub enum Confidence<'a> {
    /// Fixed `N x M` table from a trained Stage 1.
    Frozen(&'a Mat),
    /// Stage 1 trained jointly, with `r` kept live on the tape.
    Joint(Stage1Model),
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    /// `None` disables early stopping.
    pub patience: Option<usize>,
    pub skip_attention: bool,
}

impl TrainOptions {
    pub fn from_config(cfg: &Stage2Config, skip_attention: bool) -> Self {
        Self {
            epochs: cfg.epochs,
            patience: Some(cfg.patience),
            skip_attention,
        }
    }
}

pub struct Stage2Outcome {
    /// Parameters at the best validation Macro-F1.
    pub model: Stage2Model,
    /// Jointly trained Stage 1 at the same epoch, if any.
    pub stage1: Option<Stage1Model>,
    pub best_val_f1: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_f1_history: Vec<f64>,
    pub loss_history: Vec<f64>,
}

fn diverged(epoch: usize, value: f64) -> CmglError {
    CmglError::Training {
        stage: "stage2",
        epoch,
        msg: format!("loss is {value}"),
    }
}

/// Full-batch Stage-2 training on `graphs.train`, keeping the snapshot
/// with the best Macro-F1 on the validation nodes of `graphs.val`.
pub fn train_stage2(
    ds: &OmicsDataset,
    graphs: &FoldGraphs,
    confidence: Confidence<'_>,
    mut model: Stage2Model,
    opts: &TrainOptions,
    drop_rng: &mut Rng,
) -> Result<Stage2Outcome> {
    let c = ds.num_classes();
    let train_nodes = &graphs.train.nodes;
    let labels: Vec<usize> = train_nodes.iter().map(|&i| ds.labels()[i]).collect();
    let weights = class_weights(&labels, c)?;
    let xs = ds.select_rows(train_nodes);
    let val_labels: Vec<usize> = graphs.val.nodes[graphs.val.n_train..]
        .iter()
        .map(|&i| ds.labels()[i])
        .collect();

    let (frozen, mut live) = match confidence {
        Confidence::Frozen(r) => (Some(r), None),
        Confidence::Joint(m) => (None, Some(m)),
    };
    let y1 = one_hot(&labels, c);
    let mut opt = Adam::new(&model.params, model.config.lr);
    let mut opt1 = live.as_ref().map(|m| Adam::new(&m.params, m.config.lr));

    let mut best: Option<(f64, usize, ParamSet, Option<ParamSet>)> = None;
    let mut val_hist = Vec::new();
    let mut loss_hist = Vec::new();
    let mut epochs_run = 0;
    for epoch in 0..opts.epochs {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, true);
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let (r, s1) = match (&live, frozen) {
            (Some(m1), _) => {
                let b1 = m1.params.bind(&mut tape, true);
                let fwd1 = m1.forward(&mut tape, &b1, &vars, Some(drop_rng));
                let l1 = m1.loss(&mut tape, &fwd1, &y1, epoch);
                (fwd1.r, Some((b1, l1.total)))
            }
            (None, Some(r_all)) => (tape.constant(r_all.select(ndarray::Axis(0), train_nodes)), None),
            (None, None) => unreachable!(),
        };
        let fwd = model.forward(&mut tape, &bound, &vars, r, &graphs.train.adjacency, opts.skip_attention, Some(drop_rng))?;
        let l2 = model.loss(&mut tape, &fwd, &labels, &weights);
        let total = match &s1 {
            Some((_, l1)) => tape.add(*l1, l2.total),
            None => l2.total,
        };
        let value = tape.scalar(total);
        if !value.is_finite() {
            return Err(diverged(epoch, value));
        }
        loss_hist.push(value);
        let grads = tape.backward(total);
        let g = bound.grads(&tape, &grads);
        opt.step(&mut model.params, &g);
        if let (Some((b1, _)), Some(m1), Some(o1)) = (&s1, live.as_mut(), opt1.as_mut()) {
            let g1 = b1.grads(&tape, &grads);
            o1.step(&mut m1.params, &g1);
        }
        drop(tape);
        epochs_run = epoch + 1;

        let r_all = match (&live, frozen) {
            (Some(m1), _) => m1.infer_confidence(ds.matrices()),
            (None, Some(r_all)) => r_all.clone(),
            (None, None) => unreachable!(),
        };
        let inf = model.infer_graph(ds, &r_all, &graphs.val, opts.skip_attention)?;
        let val_logits = inf.logits.slice(ndarray::s![graphs.val.n_train.., ..]).to_owned();
        let f1 = macro_f1(&argmax_rows(&val_logits), &val_labels, c);
        val_hist.push(f1);
        if best.as_ref().is_none_or(|b| f1 > b.0) {
            best = Some((f1, epoch, model.params.clone(), live.as_ref().map(|m| m.params.clone())));
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.1);
        if let Some(p) = opts.patience {
            if epoch - best_epoch >= p {
                debug!("stage2 early stop at epoch {epoch}, best {best_epoch}");
                break;
            }
        }
    }
    let (best_val_f1, best_epoch, params, params1) =
        best.ok_or_else(|| CmglError::Config("stage 2 needs at least one epoch".into()))?;
    model.params = params;
    if let (Some(m1), Some(p1)) = (live.as_mut(), params1) {
        m1.params = p1;
    }
    Ok(Stage2Outcome {
        model,
        stage1: live,
        best_val_f1,
        best_epoch,
        epochs_run,
        val_f1_history: val_hist,
        loss_history: loss_hist,
    })
}

/// Validation Macro-F1 of one neighbour-count candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KScore {
    pub k: usize,
    /// `None` when the candidate was skipped.
    pub val_macro_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub k: usize,
    pub scores: Vec<KScore>,
}

/// Shared settings for building and training a Stage-2 model.
#[derive(Debug, Clone)]
pub struct Stage2Setup<'a> {
    pub fusion: &'a FusionConfig,
    pub stage2: &'a Stage2Config,
    pub skip_attention: bool,
}

/// Short warm-up training per candidate `k`; the best validation Macro-F1
/// wins, ties going to the smaller `k`.
pub fn select_k(
    ds: &OmicsDataset,
    split: &FoldSplit,
    confidences: &Mat,
    candidates: &[usize],
    warmup_epochs: usize,
    setup: &Stage2Setup<'_>,
    seed: u64,
) -> Result<KSelection> {
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.is_empty() {
        return Err(CmglError::Config("empty k candidate set".into()));
    }
    let usable: Vec<usize> = sorted.iter().copied().filter(|&k| k >= 1 && k < split.train_idx.len()).collect();
    for &k in sorted.iter().filter(|k| !usable.contains(k)) {
        warn!("k = {k} skipped: fold has {} training nodes", split.train_idx.len());
    }
    let Some(&max_k) = usable.last() else {
        return Err(CmglError::Config("every k candidate exceeds the training set".into()));
    };
    if usable.len() == 1 && sorted.len() == 1 {
        return Ok(KSelection {
            k: max_k,
            scores: vec![KScore { k: max_k, val_macro_f1: None }],
        });
    }
    let index = FoldIndex::build(ds, split, max_k)?;
    let fold = split.fold_index as u64;
    let mut scores = Vec::with_capacity(sorted.len());
    let mut best: Option<(f64, usize)> = None;
    for &k in &sorted {
        if !usable.contains(&k) {
            scores.push(KScore { k, val_macro_f1: None });
            continue;
        }
        let stream = fold * 1024 + k as u64;
        let mut init = rng::stream(seed, "kselect.init", stream);
        let mut drop_rng = rng::stream(seed, "kselect.dropout", stream);
        let model = Stage2Model::new(
            setup.fusion.clone(),
            setup.stage2.clone(),
            &ds.modality_dims(),
            ds.num_classes(),
            &mut init,
        )?;
        let opts = TrainOptions {
            epochs: warmup_epochs,
            patience: None,
            skip_attention: setup.skip_attention,
        };
        let out = train_stage2(ds, &index.graphs(k)?, Confidence::Frozen(confidences), model, &opts, &mut drop_rng)?;
        debug!("fold {fold}: k = {k} warm-up Macro-F1 {:.4}", out.best_val_f1);
        if best.is_none_or(|b| out.best_val_f1 > b.0) {
            best = Some((out.best_val_f1, k));
        }
        scores.push(KScore {
            k,
            val_macro_f1: Some(out.best_val_f1),
        });
    }
    Ok(KSelection {
        k: best.map(|b| b.1).expect("at least one usable candidate"),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn weights_examples() {
        assert_eq!(class_weights(&[0, 1, 0, 1], 2).unwrap(), vec![1.0, 1.0]);
        let w = class_weights(&[0, 1, 1, 1, 1], 2).unwrap();
        assert!((w[0] - 4.0 / 3.0).abs() < 1e-12 && (w[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!(class_weights(&[0, 0], 2).is_err());
    }

    #[test]
    fn ce_examples() {
        let perfect = array![[30.0, 0.0, 0.0]];
        assert!(ce_loss(&perfect, &[0], &[1.0; 3], 0.0) < 1e-9);
        let target = [0.9f64, 0.05, 0.05];
        let logits = array![[target[0].ln(), target[1].ln(), target[2].ln()]];
        let entropy: f64 = -target.iter().map(|p| p * p.ln()).sum::<f64>();
        assert!((ce_loss(&logits, &[0], &[1.0; 3], 0.1) - entropy).abs() < 1e-12);
        let scaled = ce_loss(&logits, &[0], &[2.5; 3], 0.1);
        assert!((scaled - 2.5 * entropy).abs() < 1e-12);
    }

    #[test]
    fn supcon_examples() {
        let two = array![[1.0, 0.3], [0.2, 1.0]];
        assert!(supcon_loss(&two, &[1, 1], 0.1).loss.abs() < 1e-12);
        let three = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let s = supcon_loss(&three, &[0, 0, 1], 0.1);
        assert_eq!(s.valid_anchors, 2);
        let li = (1.0 + (-10.0f64).exp()).ln();
        assert!((s.loss - li).abs() < 1e-15);
        assert!((li - 4.54e-5).abs() < 1e-7);
        let none = supcon_loss(&three, &[0, 1, 2], 0.1);
        assert_eq!(none, SupCon { loss: 0.0, valid_anchors: 0 });
    }

    #[test]
    fn tape_losses_match_scalar_route() {
        let mut rng = crate::rng::stream(9, "gnn", 0);
        let logits = crate::nn::normal(&mut rng, 6, 3, 1.0);
        let e = crate::nn::normal(&mut rng, 6, 4, 1.0);
        let labels = [0, 1, 2, 0, 1, 1];
        let w = class_weights(&labels, 3).unwrap();
        let mut tape = Tape::new();
        let lv = tape.constant(logits.clone());
        let ev = tape.constant(e.clone());
        let ce = tape_ce(&mut tape, lv, &smoothed_targets(&labels, &w, 3, 0.1));
        let (sc, valid) = tape_supcon(&mut tape, ev, &labels, 0.1).unwrap();
        assert!((tape.scalar(ce) - ce_loss(&logits, &labels, &w, 0.1)).abs() < 1e-12);
        let oracle = supcon_loss(&e, &labels, 0.1);
        assert_eq!(valid, oracle.valid_anchors);
        assert!((tape.scalar(sc) - oracle.loss).abs() < 1e-12);
    }
}
