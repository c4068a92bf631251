//! Stage-2 front end: modality tokens, cross-omics attention and
//! confidence gating.

use serde::{Deserialize, Serialize};

use crate::error::{CmglError, Result};
use crate::nn::{dropout, normal, Bound, Linear, ParamId, ParamSet};
use crate::rng::Rng;
use crate::tape::{Mat, Tape, Var};

pub const SIMPLEX_TOL: f64 = 1e-9;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub width: usize,
    pub heads: usize,
    pub layer_norm: bool,
    pub dropout: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            width: 128,
            heads: 4,
            layer_norm: true,
            dropout: 0.1,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 {
            return Err(CmglError::Config("fusion.width and fusion.heads must be >= 1".into()));
        }
        if self.width % self.heads != 0 {
            return Err(CmglError::Config(format!(
                "fusion.width {} is not divisible by fusion.heads {}",
                self.width, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CmglError::Config("fusion.dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Tape handles of one fusion pass over a batch of `B` samples.
///
/// Token-level matrices are `(B·M) x D` with row `i·M + m` holding
/// modality `m` of sample `i`.
pub struct FusionForward {
    pub tokens: Var,
    pub attended: Var,
    pub gates: Var,
    /// `B x D`.
    pub z: Var,
}

#[derive(Debug, Clone)]
pub struct FusionModel {
    pub config: FusionConfig,
    encoders: Vec<Linear>,
    /// `M x D` identity embeddings.
    pub identity: ParamId,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln_gain: ParamId,
    ln_bias: ParamId,
    gate: Linear,
}

/// Checks every row of `r` lies on the probability simplex.
pub fn check_simplex(r: &Mat) -> Result<()> {
    for (i, row) in r.rows().into_iter().enumerate() {
        let sum: f64 = row.sum();
        if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(CmglError::Domain(format!("confidence row {i} is not on the simplex (sum {sum})")));
        }
    }
    Ok(())
}

impl FusionModel {
    pub fn new(config: FusionConfig, dims: &[usize], params: &mut ParamSet, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let encoders = dims
            .iter()
            .enumerate()
            .map(|(m, &dm)| Linear::new(params, rng, &format!("s2.fusion.enc{m}"), dm, d, true))
            .collect();
        let identity = params.push("s2.fusion.identity", normal(rng, dims.len(), d, 0.02));
        let wq = Linear::new(params, rng, "s2.fusion.wq", d, d, false);
        let wk = Linear::new(params, rng, "s2.fusion.wk", d, d, false);
        let wv = Linear::new(params, rng, "s2.fusion.wv", d, d, false);
        let wo = Linear::new(params, rng, "s2.fusion.wo", d, d, true);
        let ln_gain = params.push("s2.fusion.ln.gain", Mat::ones((1, d)));
        let ln_bias = params.push("s2.fusion.ln.bias", Mat::zeros((1, d)));
        let gate = Linear::new(params, rng, "s2.fusion.gate", d + 1, d, true);
        Ok(Self {
            config,
            encoders,
            identity,
            wq,
            wk,
            wv,
            wo,
            ln_gain,
            ln_bias,
            gate,
        })
    }

    pub fn n_modalities(&self) -> usize {
        self.encoders.len()
    }

    pub fn input_dims(&self) -> Vec<usize> {
        self.encoders.iter().map(|e| e.fan_in).collect()
    }

    /// Token `m` is `encoder_m(x_m) + p_m`, interleaved into `(B·M) x D`.
    pub fn encode_tokens(&self, tape: &mut Tape, bound: &Bound, inputs: &[Var], mut rng: Option<&mut Rng>) -> Result<Var> {
        if inputs.len() != self.encoders.len() {
            return Err(CmglError::Shape(format!(
                "{} modality inputs for {} encoders",
                inputs.len(),
                self.encoders.len()
            )));
        }
        let rows = tape.shape(inputs[0]).0;
        let mut tokens = Vec::with_capacity(inputs.len());
        for (m, (enc, &x)) in self.encoders.iter().zip(inputs).enumerate() {
            let (r, c) = tape.shape(x);
            if c != enc.fan_in || r != rows {
                return Err(CmglError::Shape(format!(
                    "modality {m}: input is {r}x{c}, expected {rows}x{}",
                    enc.fan_in
                )));
            }
            let h = enc.forward(tape, bound, x);
            let h = tape.silu(h);
            let h = dropout(tape, h, self.config.dropout, rng.as_deref_mut());
            let p = tape.gather_rows(bound[self.identity], &[m]);
            tokens.push(tape.add(h, p));
        }
        Ok(tape.interleave_rows(&tokens))
    }

    /// Multi-head self-attention across each sample's `M` tokens, then
    /// residual addition and (optionally) layer normalisation.
    pub fn cross_attention(&self, tape: &mut Tape, bound: &Bound, tokens: Var) -> Var {
        let m = self.n_modalities();
        let q = self.wq.forward(tape, bound, tokens);
        let k = self.wk.forward(tape, bound, tokens);
        let v = self.wv.forward(tape, bound, tokens);
        let att = tape.attention(q, k, v, m, self.config.heads);
        let out = self.wo.forward(tape, bound, att);
        let res = tape.add(tokens, out);
        if !self.config.layer_norm {
            return res;
        }
        let normed = tape.layer_norm(res, LN_EPS);
        let scaled = tape.mul(normed, bound[self.ln_gain]);
        tape.add(scaled, bound[self.ln_bias])
    }

    /// `g = sigmoid(W_g [ṽ ‖ r])`, `z = Σ_m r_m (g ⊙ ṽ)`.
    ///
    /// `r` is `B x M`; its values are checked against the simplex.
    pub fn gate_and_fuse(&self, tape: &mut Tape, bound: &Bound, attended: Var, r: Var) -> Result<(Var, Var)> {
        let m = self.n_modalities();
        let (b, cols) = tape.shape(r);
        if cols != m || tape.shape(attended).0 != b * m {
            return Err(CmglError::Shape(format!(
                "confidence is {b}x{cols}, tokens are {}x{}",
                tape.shape(attended).0,
                tape.shape(attended).1
            )));
        }
        check_simplex(tape.value(r))?;
        let r_col = tape.reshape(r, b * m, 1);
        let gate_in = tape.concat_cols(&[attended, r_col]);
        let pre = self.gate.forward(tape, bound, gate_in);
        let g = tape.sigmoid(pre);
        let gv = tape.mul(g, attended);
        let weighted = tape.mul(gv, r_col);
        Ok((g, tape.group_sum_rows(weighted, m)))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        inputs: &[Var],
        r: Var,
        skip_attention: bool,
        rng: Option<&mut Rng>,
    ) -> Result<FusionForward> {
        let tokens = self.encode_tokens(tape, bound, inputs, rng)?;
        let attended = if skip_attention {
            tokens
        } else {
            self.cross_attention(tape, bound, tokens)
        };
        let (gates, z) = self.gate_and_fuse(tape, bound, attended, r)?;
        Ok(FusionForward {
            tokens,
            attended,
            gates,
            z,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, s, Array2};

    fn model(dims: &[usize], cfg: FusionConfig) -> (FusionModel, ParamSet) {
        let mut params = ParamSet::new();
        let mut rng = crate::rng::stream(3, "fusion", 0);
        let m = FusionModel::new(cfg, dims, &mut params, &mut rng).unwrap();
        (m, params)
    }

    fn small() -> FusionConfig {
        FusionConfig {
            width: 8,
            heads: 2,
            layer_norm: true,
            dropout: 0.0,
        }
    }

    #[test]
    fn width_must_divide_heads() {
        let cfg = FusionConfig {
            width: 10,
            heads: 4,
            ..small()
        };
        let mut params = ParamSet::new();
        let mut rng = crate::rng::stream(0, "f", 0);
        assert!(matches!(
            FusionModel::new(cfg, &[3], &mut params, &mut rng),
            Err(CmglError::Config(_))
        ));
    }

    #[test]
    fn zero_input_gives_identity_token() {
        let (m, params) = model(&[3, 5], small());
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let xs = [tape.constant(Mat::zeros((2, 3))), tape.constant(Mat::zeros((2, 5)))];
        let t = m.encode_tokens(&mut tape, &bound, &xs, None).unwrap();
        let tv = tape.value(t);
        let p = params.get(m.identity);
        assert_eq!(tv.dim(), (4, 8));
        for i in 0..2 {
            for k in 0..2 {
                assert_eq!(tv.row(i * 2 + k), p.row(k));
            }
        }
    }

    #[test]
    fn default_token_shape() {
        let (m, params) = model(&[6, 6, 6, 6], FusionConfig::default());
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let xs: Vec<Var> = (0..4).map(|_| tape.constant(Mat::ones((1, 6)))).collect();
        let t = m.encode_tokens(&mut tape, &bound, &xs, None).unwrap();
        assert_eq!(tape.shape(t), (4, 128));
        let bad = tape.constant(Mat::ones((1, 7)));
        assert!(matches!(
            m.encode_tokens(&mut tape, &bound, &[xs[0], xs[1], xs[2], bad], None),
            Err(CmglError::Shape(_))
        ));
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let cfg = FusionConfig {
            layer_norm: false,
            ..small()
        };
        let (m, params) = model(&[4], cfg);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let x = tape.constant(array![[0.3, -1.0, 2.0, 0.5]]);
        let t = m.encode_tokens(&mut tape, &bound, &[x], None).unwrap();
        let out = m.cross_attention(&mut tape, &bound, t);
        let tv = tape.value(t).clone();
        let v = tv.dot(params.get(m.wv.weight));
        let expect = &tv + &(v.dot(params.get(m.wo.weight)) + params.get(m.wo.bias.unwrap()));
        let got = tape.value(out);
        assert!(got.iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn identical_tokens_identical_outputs() {
        let (m, params) = model(&[2, 2, 2], small());
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let tokens = tape.constant(Array2::from_shape_fn((3, 8), |(_, j)| j as f64 * 0.1 - 0.3));
        let out = m.cross_attention(&mut tape, &bound, tokens);
        let o = tape.value(out);
        for r in 1..3 {
            assert!(o.row(r).iter().zip(o.row(0).iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn fusion_degenerate_cases() {
        let (m, mut params) = model(&[2, 2], small());
        // saturate the gate to one
        let gb = m.gate.bias.unwrap();
        params.get_mut(m.gate.weight).fill(0.0);
        params.get_mut(gb).fill(50.0);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let att = Array2::from_shape_fn((2, 8), |(i, j)| (i * 8 + j) as f64 * 0.1);
        let a = tape.constant(att.clone());
        let one_hot = tape.constant(array![[0.0, 1.0]]);
        let (_, z) = m.gate_and_fuse(&mut tape, &bound, a, one_hot).unwrap();
        let zv = tape.value(z);
        assert!(zv.row(0).iter().zip(att.row(1).iter()).all(|(a, b)| (a - b).abs() < 1e-12));

        let uniform = tape.constant(array![[0.5, 0.5]]);
        let (_, z) = m.gate_and_fuse(&mut tape, &bound, a, uniform).unwrap();
        let mean = (&att.slice(s![0, ..]) + &att.slice(s![1, ..])) / 2.0;
        assert!(tape.value(z).row(0).iter().zip(mean.iter()).all(|(a, b)| (a - b).abs() < 1e-12));

        let zero = tape.constant(Mat::zeros((2, 8)));
        let (_, z) = m.gate_and_fuse(&mut tape, &bound, zero, uniform).unwrap();
        assert!(tape.value(z).iter().all(|&v| v == 0.0));

        let off = tape.constant(array![[0.6, 0.6]]);
        assert!(matches!(m.gate_and_fuse(&mut tape, &bound, a, off), Err(CmglError::Domain(_))));
    }
}
