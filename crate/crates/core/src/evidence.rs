//! Stage 1: evidential Dirichlet heads per modality, the quality estimator
//! that turns their outputs into per-sample modality confidences, and the
//! training loop that produces the frozen confidence table.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{FoldSplit, OmicsDataset};
use crate::error::{CmglError, Result};
use crate::nn::{dropout, Adam, Bound, Linear, ParamSet};
use crate::rng::{self, Rng};
use crate::special::{digamma, ln_gamma};
use crate::tape::{silu, Mat, Tape, Var};

/// Dirichlet statistics derived from one evidence vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceOutput {
    pub evidence: Vec<f64>,
    pub alpha: Vec<f64>,
    pub strength: f64,
    pub mean: Vec<f64>,
    pub uncertainty: f64,
}

pub fn dirichlet_stats(evidence: &[f64]) -> Result<EvidenceOutput> {
    if evidence.is_empty() {
        return Err(CmglError::Domain("empty evidence vector".into()));
    }
    if let Some(bad) = evidence.iter().find(|e| !e.is_finite() || **e < 0.0) {
        return Err(CmglError::Domain(format!("evidence entry {bad} is not a finite non-negative number")));
    }
    let alpha: Vec<f64> = evidence.iter().map(|e| e + 1.0).collect();
    let strength: f64 = alpha.iter().sum();
    let mean = alpha.iter().map(|a| a / strength).collect();
    Ok(EvidenceOutput {
        evidence: evidence.to_vec(),
        uncertainty: evidence.len() as f64 / strength,
        alpha,
        strength,
        mean,
    })
}

/// Inputs to the per-modality quality scorer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualitySignals {
    /// `ln(1 + Σ e)`
    pub log_strength: f64,
    /// Entropy of the Dirichlet mean divided by `ln C`.
    pub norm_entropy: f64,
    pub max_prob: f64,
}

impl QualitySignals {
    pub fn as_array(&self) -> [f64; 3] {
        [self.log_strength, self.norm_entropy, self.max_prob]
    }
}

pub fn quality_signals(out: &EvidenceOutput) -> Result<QualitySignals> {
    let c = out.mean.len();
    if c < 2 {
        return Err(CmglError::Domain(
            "entropy normalisation needs at least two classes".into(),
        ));
    }
    let entropy: f64 = -out.mean.iter().map(|p| p * p.ln()).sum::<f64>();
    Ok(QualitySignals {
        log_strength: (1.0 + out.evidence.iter().sum::<f64>()).ln(),
        norm_entropy: entropy / (c as f64).ln(),
        max_prob: out.mean.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// A sample's softmax-normalised trust over modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceVector {
    pub r: Vec<f64>,
    pub temperature: f64,
}

/// Two-layer scorer `Q_m` on the quality triple, evaluated outside a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Scorer {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

impl Scorer {
    pub fn score(&self, s: &QualitySignals) -> f64 {
        let x = s.as_array();
        let mut out = self.b2[[0, 0]];
        for j in 0..self.w1.ncols() {
            let pre: f64 = self.b1[[0, j]] + (0..3).map(|i| x[i] * self.w1[[i, j]]).sum::<f64>();
            out += silu(pre) * self.w2[[j, 0]];
        }
        out
    }
}

pub fn confidence_from_scores(scores: &[f64], temperature: f64) -> Result<ConfidenceVector> {
    if !(temperature > 0.0) {
        return Err(CmglError::Domain(format!("temperature must be positive, got {temperature}")));
    }
    if scores.is_empty() {
        return Err(CmglError::Domain("no modality scores".into()));
    }
    let scaled: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    let mx = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - mx).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ConfidenceVector {
        r: exps.iter().map(|e| e / total).collect(),
        temperature,
    })
}

/// `r_m = softmax_m(Q_m(signals_m) / T)`.
pub fn confidence(signals: &[QualitySignals], scorers: &[&Scorer], temperature: f64) -> Result<ConfidenceVector> {
    if signals.len() != scorers.len() {
        return Err(CmglError::Shape(format!(
            "{} signal triples for {} scorers",
            signals.len(),
            scorers.len()
        )));
    }
    if signals.len() < 2 {
        return Err(CmglError::Domain("confidence needs at least two modalities".into()));
    }
    let scores: Vec<f64> = signals.iter().zip(scorers).map(|(s, q)| q.score(s)).collect();
    confidence_from_scores(&scores, temperature)
}

/// KL annealing weight `min(1, epoch / anneal_step)`.
pub fn anneal_weight(epoch: usize, anneal_step: usize) -> f64 {
    (epoch as f64 / anneal_step.max(1) as f64).min(1.0)
}

/// `KL(Dir(α) ‖ Dir(1))`.
pub fn kl_to_uniform_dirichlet(alpha: &[f64]) -> f64 {
    let c = alpha.len() as f64;
    let s: f64 = alpha.iter().sum();
    let ds = digamma(s);
    ln_gamma(s) - ln_gamma(c) - alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>()
        + alpha.iter().map(|&a| (a - 1.0) * (digamma(a) - ds)).sum::<f64>()
}

/// Sum-of-squares Bayes risk of the Dirichlet against a one-hot target.
pub fn bayes_risk(out: &EvidenceOutput, label: usize) -> f64 {
    out.mean
        .iter()
        .enumerate()
        .map(|(c, &p)| {
            let y = if c == label { 1.0 } else { 0.0 };
            (y - p).powi(2) + p * (1.0 - p) / (out.strength + 1.0)
        })
        .sum()
}

/// Evidential loss: Bayes risk plus the annealed KL term on the
/// misleading (non-target) evidence.
pub fn edl_loss(out: &EvidenceOutput, label: usize, epoch: usize, anneal_step: usize) -> Result<f64> {
    if label >= out.alpha.len() {
        return Err(CmglError::Domain(format!(
            "label {label} out of range for {} classes",
            out.alpha.len()
        )));
    }
    if anneal_step == 0 {
        return Err(CmglError::Domain("anneal_step must be >= 1".into()));
    }
    let lambda = anneal_weight(epoch, anneal_step);
    let mut loss = bayes_risk(out, label);
    if lambda > 0.0 {
        let tilde: Vec<f64> = out
            .alpha
            .iter()
            .enumerate()
            .map(|(c, &a)| if c == label { 1.0 } else { a })
            .collect();
        loss += lambda * kl_to_uniform_dirichlet(&tilde);
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    pub lr: f64,
    pub hidden: usize,
    pub scorer_hidden: usize,
    pub dropout: f64,
    pub lambda_edl: f64,
    pub anneal_step: usize,
    pub lambda_cls: f64,
    pub lambda_div: f64,
    pub temperature: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            hidden: 128,
            scorer_hidden: 16,
            dropout: 0.1,
            lambda_edl: 1.5,
            anneal_step: 50,
            lambda_cls: 1.5,
            lambda_div: 1.0,
            temperature: 1.0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CmglError::Config(format!("stage1.{m}")));
        if self.lambda_edl < 0.0 || self.lambda_cls < 0.0 || self.lambda_div < 0.0 {
            return bad("loss weights must be >= 0");
        }
        if self.anneal_step == 0 {
            return bad("anneal_step must be >= 1");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.hidden == 0 || self.scorer_hidden == 0 || !(self.lr > 0.0) {
            return bad("hidden sizes and lr must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ModalityHead {
    encoder: Linear,
    evidence: Linear,
    scorer_in: Linear,
    scorer_out: Linear,
}

/// Stage-1 network: encoder, evidence head and quality scorer per modality.
#[derive(Debug, Clone)]
pub struct Stage1Model {
    pub config: Stage1Config,
    pub num_classes: usize,
    pub params: ParamSet,
    heads: Vec<ModalityHead>,
}

/// Tape handles produced by [`Stage1Model::forward`].
pub struct Stage1Forward {
    /// Per modality, `B x C`.
    pub evidence: Vec<Var>,
    pub alpha: Vec<Var>,
    /// Per modality, `B x 1`.
    pub strength: Vec<Var>,
    pub mean: Vec<Var>,
    /// `B x M` scorer outputs before the temperature softmax.
    pub scores: Var,
    /// `B x M` confidences.
    pub r: Var,
}

/// Loss terms, each already a `1 x 1` tape value.
pub struct Stage1Loss {
    pub total: Var,
    pub edl: Var,
    pub cls: Var,
    pub div: Var,
}

pub fn one_hot(labels: &[usize], c: usize) -> Mat {
    let mut y = Array2::zeros((labels.len(), c));
    for (i, &l) in labels.iter().enumerate() {
        y[[i, l]] = 1.0;
    }
    y
}

impl Stage1Model {
    pub fn new(config: Stage1Config, dims: &[usize], num_classes: usize, rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        let heads = dims
            .iter()
            .enumerate()
            .map(|(m, &d)| ModalityHead {
                encoder: Linear::new(&mut params, rng, &format!("s1.m{m}.enc"), d, config.hidden, true),
                evidence: Linear::new(&mut params, rng, &format!("s1.m{m}.evid"), config.hidden, num_classes, true),
                scorer_in: Linear::new(&mut params, rng, &format!("s1.m{m}.q1"), 3, config.scorer_hidden, true),
                scorer_out: Linear::new(&mut params, rng, &format!("s1.m{m}.q2"), config.scorer_hidden, 1, true),
            })
            .collect::<Vec<ModalityHead>>();
        // zero scorer outputs start r exactly uniform
        for h in &heads {
            params.get_mut(h.scorer_out.weight).fill(0.0);
        }
        Self {
            config,
            num_classes,
            params,
            heads,
        }
    }

    pub fn n_modalities(&self) -> usize {
        self.heads.len()
    }

    pub fn input_dims(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.encoder.fan_in).collect()
    }

    pub fn scorer(&self, m: usize) -> Scorer {
        let h = &self.heads[m];
        let p = &self.params;
        Scorer {
            w1: p.get(h.scorer_in.weight).clone(),
            b1: p.get(h.scorer_in.bias.expect("bias")).clone(),
            w2: p.get(h.scorer_out.weight).clone(),
            b2: p.get(h.scorer_out.bias.expect("bias")).clone(),
        }
    }

    /// Forward pass over a batch; `rng` enables dropout.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, inputs: &[Var], mut rng: Option<&mut Rng>) -> Stage1Forward {
        assert_eq!(inputs.len(), self.heads.len());
        let c = self.num_classes as f64;
        let mut out = Stage1Forward {
            evidence: Vec::new(),
            alpha: Vec::new(),
            strength: Vec::new(),
            mean: Vec::new(),
            scores: inputs[0],
            r: inputs[0],
        };
        let mut scores = Vec::new();
        for (head, &x) in self.heads.iter().zip(inputs) {
            let h = head.encoder.forward(tape, bound, x);
            let h = tape.silu(h);
            let h = dropout(tape, h, self.config.dropout, rng.as_deref_mut());
            let logits = head.evidence.forward(tape, bound, h);
            let ev = tape.softplus(logits);
            let alpha = tape.add_scalar(ev, 1.0);
            let strength = tape.sum_rows(alpha);
            let mean = tape.div(alpha, strength);

            let total_ev = tape.sum_rows(ev);
            let total_ev = tape.add_scalar(total_ev, 1.0);
            let log_strength = tape.ln(total_ev);
            let ln_mean = tape.ln(mean);
            let plogp = tape.mul(mean, ln_mean);
            let ent = tape.sum_rows(plogp);
            let norm_ent = tape.scale(ent, -1.0 / c.ln());
            let max_prob = tape.max_rows(mean);
            let signals = tape.concat_cols(&[log_strength, norm_ent, max_prob]);
            let q = head.scorer_in.forward(tape, bound, signals);
            let q = tape.silu(q);
            let q = head.scorer_out.forward(tape, bound, q);

            scores.push(q);
            out.evidence.push(ev);
            out.alpha.push(alpha);
            out.strength.push(strength);
            out.mean.push(mean);
        }
        let scores = tape.concat_cols(&scores);
        let scaled = tape.scale(scores, 1.0 / self.config.temperature);
        out.scores = scores;
        out.r = tape.softmax_rows(scaled);
        out
    }

    /// Composite objective on a forward pass with one-hot targets `y`.
    pub fn loss(&self, tape: &mut Tape, fwd: &Stage1Forward, y: &Mat, epoch: usize) -> Stage1Loss {
        let cfg = &self.config;
        let c = self.num_classes;
        let m_count = fwd.mean.len();
        let y_var = tape.constant(y.clone());
        let not_y = tape.constant(y.mapv(|v| 1.0 - v));
        let lambda_t = anneal_weight(epoch, cfg.anneal_step);
        let ln_gamma_c = ln_gamma(c as f64);

        let mut edl_terms = Vec::new();
        let mut ce_cols = Vec::new();
        for m in 0..m_count {
            let (alpha, mean, strength) = (fwd.alpha[m], fwd.mean[m], fwd.strength[m]);
            let diff = tape.sub(y_var, mean);
            let sq = tape.mul(diff, diff);
            let err = tape.sum_rows(sq);
            let one_minus = tape.scale(mean, -1.0);
            let one_minus = tape.add_scalar(one_minus, 1.0);
            let var_num = tape.mul(mean, one_minus);
            let var_num = tape.sum_rows(var_num);
            let s1 = tape.add_scalar(strength, 1.0);
            let var = tape.div(var_num, s1);
            let mut per_sample = tape.add(err, var);
            if lambda_t > 0.0 {
                let masked = tape.mul(alpha, not_y);
                let tilde = tape.add(masked, y_var);
                let s_tilde = tape.sum_rows(tilde);
                let lg_s = tape.ln_gamma(s_tilde);
                let lg_a = tape.ln_gamma(tilde);
                let lg_a = tape.sum_rows(lg_a);
                let dg_a = tape.digamma(tilde);
                let dg_s = tape.digamma(s_tilde);
                let dg = tape.sub(dg_a, dg_s);
                let am1 = tape.add_scalar(tilde, -1.0);
                let cross = tape.mul(am1, dg);
                let cross = tape.sum_rows(cross);
                let kl = tape.sub(lg_s, lg_a);
                let kl = tape.add(kl, cross);
                let kl = tape.add_scalar(kl, -ln_gamma_c);
                let kl = tape.scale(kl, lambda_t);
                per_sample = tape.add(per_sample, kl);
            }
            edl_terms.push(tape.mean(per_sample));

            let ln_mean = tape.ln(mean);
            let picked = tape.mul(ln_mean, y_var);
            let nll = tape.sum_rows(picked);
            ce_cols.push(tape.scale(nll, -1.0));
        }
        let edl_sum = edl_terms[1..]
            .iter()
            .fold(edl_terms[0], |acc, &t| tape.add(acc, t));
        let edl = tape.scale(edl_sum, 1.0 / m_count as f64);

        let ce = tape.concat_cols(&ce_cols);
        let weighted = tape.mul(fwd.r, ce);
        let weighted = tape.sum_rows(weighted);
        let cls = tape.mean(weighted);

        let ln_r = tape.ln(fwd.r);
        let rlr = tape.mul(fwd.r, ln_r);
        let ent = tape.sum_rows(rlr);
        let ent = tape.mean(ent);
        let div = tape.scale(ent, -1.0 / (m_count as f64).ln());

        let a = tape.scale(edl, cfg.lambda_edl);
        let b = tape.scale(cls, cfg.lambda_cls);
        let d = tape.scale(div, cfg.lambda_div);
        let ab = tape.add(a, b);
        let total = tape.add(ab, d);
        Stage1Loss { total, edl, cls, div }
    }

    /// Evaluation-mode confidences, `rows x M`.
    pub fn infer_confidence(&self, inputs: &[Mat]) -> Mat {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xs: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let fwd = self.forward(&mut tape, &bound, &xs, None);
        tape.value(fwd.r).clone()
    }

    /// Evaluation-mode evidence per modality, each `rows x C`.
    pub fn infer_evidence(&self, inputs: &[Mat]) -> Vec<Mat> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xs: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let fwd = self.forward(&mut tape, &bound, &xs, None);
        fwd.evidence.iter().map(|&e| tape.value(e).clone()).collect()
    }
}

/// Frozen per-sample modality confidences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceTable {
    pub modality_names: Vec<String>,
    pub sample_ids: Vec<String>,
    /// Row-major `N x M`.
    pub values: Vec<f64>,
}

impl ConfidenceTable {
    pub fn new(modality_names: Vec<String>, sample_ids: Vec<String>, values: &Mat) -> Self {
        assert_eq!(values.dim(), (sample_ids.len(), modality_names.len()));
        Self {
            modality_names,
            sample_ids,
            values: values.iter().copied().collect(),
        }
    }

    /// Every sample gets `1 / M` for every modality.
    pub fn uniform(modality_names: Vec<String>, sample_ids: Vec<String>) -> Self {
        let m = modality_names.len();
        let values = vec![1.0 / m as f64; m * sample_ids.len()];
        Self {
            modality_names,
            sample_ids,
            values,
        }
    }

    pub fn matrix(&self) -> Mat {
        Array2::from_shape_vec((self.sample_ids.len(), self.modality_names.len()), self.values.clone())
            .expect("table shape")
    }

    pub fn rows(&self, idx: &[usize]) -> Mat {
        self.matrix().select(ndarray::Axis(0), idx)
    }

    pub fn modality_means(&self) -> Vec<f64> {
        let m = self.matrix();
        m.mean_axis(ndarray::Axis(0)).expect("non-empty").to_vec()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("sample_id");
        for name in &self.modality_names {
            s.push('\t');
            s.push_str(name);
        }
        s.push('\n');
        let m = self.modality_names.len();
        for (i, id) in self.sample_ids.iter().enumerate() {
            s.push_str(id);
            for v in &self.values[i * m..(i + 1) * m] {
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

pub struct Stage1Outcome {
    pub model: Stage1Model,
    pub confidences: ConfidenceTable,
    /// Training loss per epoch (with dropout active).
    pub loss_history: Vec<f64>,
    /// Evaluation-mode training loss before the first update.
    pub initial_loss: f64,
    /// Evaluation-mode training loss after the last update, at epoch `E1`.
    pub final_loss: f64,
}

fn eval_loss(model: &Stage1Model, xs: &[Mat], y: &Mat, epoch: usize) -> f64 {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let fwd = model.forward(&mut tape, &bound, &vars, None);
    let loss = model.loss(&mut tape, &fwd, y, epoch);
    tape.scalar(loss.total)
}

/// Full-batch Adam training on the fold's training rows, then confidence
/// inference for every sample in the dataset.
pub fn train_stage1(ds: &OmicsDataset, split: &FoldSplit, config: &Stage1Config, seed: u64) -> Result<Stage1Outcome> {
    config.validate()?;
    if ds.n_modalities() < 2 {
        return Err(CmglError::Config("stage 1 needs at least two modalities".into()));
    }
    let fold = split.fold_index as u64;
    let mut init_rng = rng::stream(seed, "stage1.init", fold);
    let mut drop_rng = rng::stream(seed, "stage1.dropout", fold);
    let mut model = Stage1Model::new(config.clone(), &ds.modality_dims(), ds.num_classes(), &mut init_rng);

    let xs = ds.select_rows(&split.train_idx);
    let labels: Vec<usize> = split.train_idx.iter().map(|&i| ds.labels()[i]).collect();
    let y = one_hot(&labels, ds.num_classes());
    let initial_loss = eval_loss(&model, &xs, &y, 0);

    let mut opt = Adam::new(&model.params, config.lr);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, true);
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let fwd = model.forward(&mut tape, &bound, &vars, Some(&mut drop_rng));
        let loss = model.loss(&mut tape, &fwd, &y, epoch);
        let value = tape.scalar(loss.total);
        if !value.is_finite() {
            return Err(CmglError::Training {
                stage: "stage1",
                epoch,
                msg: format!("loss is {value}"),
            });
        }
        history.push(value);
        let grads = tape.backward(loss.total);
        let g = bound.grads(&tape, &grads);
        opt.step(&mut model.params, &g);
    }
    let final_loss = eval_loss(&model, &xs, &y, config.epochs);
    if !final_loss.is_finite() {
        return Err(CmglError::Training {
            stage: "stage1",
            epoch: config.epochs,
            msg: format!("loss is {final_loss}"),
        });
    }

    let r = model.infer_confidence(ds.matrices());
    let confidences = ConfidenceTable::new(ds.modality_names().to_vec(), ds.sample_ids().to_vec(), &r);
    Ok(Stage1Outcome {
        model,
        confidences,
        loss_history: history,
        initial_loss,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn dirichlet_zero_evidence() {
        let o = dirichlet_stats(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(o.alpha, vec![1.0; 3]);
        assert_eq!(o.strength, 3.0);
        assert!(o.mean.iter().all(|&p| close(p, 1.0 / 3.0, 1e-15)));
        assert_eq!(o.uncertainty, 1.0);
    }

    #[test]
    fn dirichlet_worked_examples() {
        let o = dirichlet_stats(&[4.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(o.alpha, vec![5.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(o.strength, 9.0);
        assert!(close(o.mean[0], 5.0 / 9.0, 1e-15) && close(o.mean[3], 1.0 / 9.0, 1e-15));
        assert!(close(o.uncertainty, 5.0 / 9.0, 1e-15));

        let o = dirichlet_stats(&[1.0, 3.0]).unwrap();
        assert_eq!(o.alpha, vec![2.0, 4.0]);
        assert_eq!(o.strength, 6.0);
        assert!(close(o.mean[0], 1.0 / 3.0, 1e-15) && close(o.mean[1], 2.0 / 3.0, 1e-15));
        assert!(close(o.uncertainty, 1.0 / 3.0, 1e-15));
    }

    #[test]
    fn dirichlet_rejects_bad_evidence() {
        assert!(dirichlet_stats(&[1.0, -0.1]).is_err());
        assert!(dirichlet_stats(&[f64::NAN, 1.0]).is_err());
        assert!(dirichlet_stats(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn quality_signal_cases() {
        let q = quality_signals(&dirichlet_stats(&[0.0; 4]).unwrap()).unwrap();
        assert_eq!(q.log_strength, 0.0);
        assert!(close(q.norm_entropy, 1.0, 1e-12));
        assert!(close(q.max_prob, 0.25, 1e-15));

        let q = quality_signals(&dirichlet_stats(&[1e6, 0.0, 0.0, 0.0]).unwrap()).unwrap();
        assert!(q.norm_entropy < 1e-3);
        assert!(close(q.max_prob, 1.0, 1e-3));

        let q = quality_signals(&dirichlet_stats(&[1.0, 1.0]).unwrap()).unwrap();
        assert!(close(q.log_strength, 3f64.ln(), 1e-15));
        assert!(close(q.norm_entropy, 1.0, 1e-12));
        assert!(close(q.max_prob, 0.5, 1e-15));

        assert!(quality_signals(&dirichlet_stats(&[2.0]).unwrap()).is_err());
    }

    fn random_scorer(rng: &mut Rng) -> Scorer {
        Scorer {
            w1: crate::nn::normal(rng, 3, 16, 0.5),
            b1: crate::nn::normal(rng, 1, 16, 0.5),
            w2: crate::nn::normal(rng, 16, 1, 0.5),
            b2: crate::nn::normal(rng, 1, 1, 0.5),
        }
    }

    #[test]
    fn confidence_symmetry_and_arithmetic() {
        let mut rng = Rng::seed_from_u64(3);
        let q = random_scorer(&mut rng);
        let s = quality_signals(&dirichlet_stats(&[2.0, 0.5, 0.1]).unwrap()).unwrap();
        let r = confidence(&[s; 4], &[&q; 4], 1.0).unwrap();
        assert!(r.r.iter().all(|&v| close(v, 0.25, 1e-15)));

        let t = 0.7;
        let r = confidence_from_scores(&[1.3, 1.3 + t * 3f64.ln()], t).unwrap();
        assert!(close(r.r[0], 0.25, 1e-12) && close(r.r[1], 0.75, 1e-12));

        assert!(confidence_from_scores(&[1.0, 2.0], 0.0).is_err());
        assert!(confidence(&[s; 2], &[&q; 2], -1.0).is_err());
    }

    #[test]
    fn confidence_is_monotone_in_own_score() {
        let mut rng = Rng::seed_from_u64(4);
        for _ in 0..50 {
            let scores: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let base = confidence_from_scores(&scores, 1.0).unwrap();
            let k = rng.random_range(0..4);
            let mut bumped = scores.clone();
            bumped[k] += 0.5;
            let up = confidence_from_scores(&bumped, 1.0).unwrap();
            for m in 0..4 {
                if m == k {
                    assert!(up.r[m] > base.r[m]);
                } else {
                    assert!(up.r[m] < base.r[m]);
                }
            }
        }
    }

    #[test]
    fn edl_loss_cases() {
        // α = [2, 1]: π = [2/3, 1/3], S = 3
        let o = dirichlet_stats(&[1.0, 0.0]).unwrap();
        let risk = edl_loss(&o, 0, 0, 50).unwrap();
        assert!(close(risk, 1.0 / 3.0, 1e-15), "{risk}");
        // only the target has evidence, so α̃ = 1 and the KL term vanishes
        let full = edl_loss(&o, 0, 500, 50).unwrap();
        assert!(close(full, risk, 1e-14));
        // wrong-class evidence is penalised once annealing starts
        let wrong = edl_loss(&o, 1, 25, 50).unwrap();
        assert!(wrong > edl_loss(&o, 1, 0, 50).unwrap());
        assert!(edl_loss(&o, 2, 0, 50).is_err());
        assert!(edl_loss(&o, 0, 0, 0).is_err());
    }

    #[test]
    fn kl_between_identical_is_zero() {
        assert!(kl_to_uniform_dirichlet(&[1.0; 5]).abs() < 1e-13);
        assert!(kl_to_uniform_dirichlet(&[3.0, 1.0, 1.5]) > 0.0);
    }

    #[test]
    fn edl_loss_decreases_with_target_evidence() {
        let mut rng = Rng::seed_from_u64(5);
        for _ in 0..200 {
            let c = rng.random_range(2..6);
            let ev: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..5.0)).collect();
            let y = rng.random_range(0..c);
            let epoch = rng.random_range(0..100);
            let base = edl_loss(&dirichlet_stats(&ev).unwrap(), y, epoch, 50).unwrap();
            let mut more = ev.clone();
            more[y] += rng.random_range(0.01..3.0);
            let after = edl_loss(&dirichlet_stats(&more).unwrap(), y, epoch, 50).unwrap();
            assert!(after <= base + 1e-12, "{after} > {base}");
        }
    }

    #[test]
    fn tape_forward_matches_scalar_routes() {
        let mut rng = Rng::seed_from_u64(6);
        let cfg = Stage1Config {
            hidden: 8,
            ..Default::default()
        };
        let model = Stage1Model::new(cfg, &[5, 3], 3, &mut rng);
        let xs = vec![crate::nn::normal(&mut rng, 4, 5, 1.0), crate::nn::normal(&mut rng, 4, 3, 1.0)];
        let labels = [0usize, 2, 1, 1];
        let y = one_hot(&labels, 3);

        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, false);
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let fwd = model.forward(&mut tape, &bound, &vars, None);
        let loss = model.loss(&mut tape, &fwd, &y, 20);
        let r = tape.value(fwd.r).clone();

        let scorers: Vec<Scorer> = (0..2).map(|m| model.scorer(m)).collect();
        let mut edl_sum = 0.0;
        for i in 0..4 {
            let outs: Vec<EvidenceOutput> = (0..2)
                .map(|m| dirichlet_stats(&tape.value(fwd.evidence[m]).row(i).to_vec()).unwrap())
                .collect();
            let sig: Vec<QualitySignals> = outs.iter().map(|o| quality_signals(o).unwrap()).collect();
            let conf = confidence(&sig, &[&scorers[0], &scorers[1]], 1.0).unwrap();
            for m in 0..2 {
                assert!(close(conf.r[m], r[[i, m]], 1e-12));
                edl_sum += edl_loss(&outs[m], labels[i], 20, 50).unwrap();
            }
        }
        assert!(close(tape.scalar(loss.edl), edl_sum / 8.0, 1e-12));
    }

    #[test]
    fn loss_term_isolation_and_uniform_diversity() {
        let mut rng = Rng::seed_from_u64(7);
        let cfg = Stage1Config {
            hidden: 6,
            lambda_cls: 0.0,
            lambda_div: 0.0,
            ..Default::default()
        };
        let mut model = Stage1Model::new(cfg, &[4, 4], 3, &mut rng);
        let xs = vec![crate::nn::normal(&mut rng, 5, 4, 1.0); 2];
        let y = one_hot(&[0, 1, 2, 0, 1], 3);
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, false);
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let fwd = model.forward(&mut tape, &bound, &vars, None);
        let loss = model.loss(&mut tape, &fwd, &y, 10);
        assert!(close(tape.scalar(loss.total), 1.5 * tape.scalar(loss.edl), 1e-14));

        // make the two modalities identical so r is exactly uniform
        let snapshot = model.params.clone();
        let names = snapshot.names().to_vec();
        for (k, name) in names.iter().enumerate() {
            if let Some(rest) = name.strip_prefix("s1.m1.") {
                let src = names.iter().position(|n| n == &format!("s1.m0.{rest}")).unwrap();
                model.params.values_mut()[k] = snapshot.values()[src].clone();
            }
        }
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, false);
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let fwd = model.forward(&mut tape, &bound, &vars, None);
        let loss = model.loss(&mut tape, &fwd, &y, 10);
        assert!(close(tape.scalar(loss.div), 1.0, 1e-12));
    }
}
