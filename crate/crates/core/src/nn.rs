//! Parameter storage, dense layers, dropout and the Adam optimiser.

use std::ops::Index;

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tape::{Gradients, Mat, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered collection of named parameter matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
}

/// Serialised form of one parameter matrix.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Puts every parameter on the tape, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| NamedTensor {
                name: n.clone(),
                rows: v.nrows(),
                cols: v.ncols(),
                data: v.iter().copied().collect(),
            })
            .collect()
    }

    /// Overwrites values from `tensors`, matched by name. Returns the name
    /// of the first missing or mis-shaped parameter on failure.
    pub fn load_tensors(&mut self, tensors: &[NamedTensor]) -> Result<(), String> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let t = tensors
                .iter()
                .find(|t| &t.name == name)
                .ok_or_else(|| format!("{name}: missing"))?;
            if (t.rows, t.cols) != value.dim() || t.data.len() != t.rows * t.cols {
                return Err(format!(
                    "{name}: stored shape {}x{}, expected {}x{}",
                    t.rows,
                    t.cols,
                    value.nrows(),
                    value.ncols()
                ));
            }
            *value = Array2::from_shape_vec((t.rows, t.cols), t.data.clone())
                .map_err(|e| format!("{name}: {e}"))?;
        }
        Ok(())
    }
}

/// Tape variables for a bound [`ParamSet`], indexable by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients aligned with the parameter set, zero where absent.
    pub fn grads(&self, tape: &Tape, grads: &Gradients) -> Vec<Mat> {
        self.vars
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Mat::zeros(tape.shape(v)))
            })
            .collect()
    }
}

/// Glorot-uniform matrix.
pub fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Mat {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Mat::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit))
}

pub fn normal(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("positive std");
    Mat::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// `x · W + b` with `W: in x out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let weight = params.push(format!("{name}.weight"), glorot(rng, fan_in, fan_out));
        let bias = bias.then(|| params.push(format!("{name}.bias"), Mat::zeros((1, fan_out))));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, bound[self.weight]);
        match self.bias {
            Some(b) => tape.add(y, bound[b]),
            None => y,
        }
    }
}

/// Inverted dropout; identity when `rng` is `None` or `p == 0`.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, rng: Option<&mut Rng>) -> Var {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            let mask = Mat::from_shape_fn(tape.shape(x), |_| {
                if rng.random::<f64>() < p {
                    0.0
                } else {
                    keep
                }
            });
            let m = tape.constant(mask);
            tape.mul(x, m)
        }
        _ => x,
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Mat> = params.values().iter().map(|p| Mat::zeros(p.dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Mat]) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut params = ParamSet::new();
        let id = params.push("x", Mat::from_elem((1, 2), 3.0));
        let mut opt = Adam::new(&params, 0.05);
        for _ in 0..2000 {
            let mut t = Tape::new();
            let b = params.bind(&mut t, true);
            let sq = t.mul(b[id], b[id]);
            let loss = t.sum(sq);
            let g = t.backward(loss);
            let grads = b.grads(&t, &g);
            opt.step(&mut params, &grads);
        }
        assert!(params.get(id).iter().all(|x| x.abs() < 1e-3));
    }

    #[test]
    fn tensor_round_trip_and_shape_check() {
        let mut rng = Rng::seed_from_u64(0);
        let mut a = ParamSet::new();
        Linear::new(&mut a, &mut rng, "fc", 3, 2, true);
        let mut b = ParamSet::new();
        Linear::new(&mut b, &mut rng, "fc", 3, 2, true);
        assert_ne!(a, b);
        b.load_tensors(&a.to_tensors()).unwrap();
        assert_eq!(a, b);

        let mut c = ParamSet::new();
        Linear::new(&mut c, &mut rng, "fc", 4, 2, true);
        let err = c.load_tensors(&a.to_tensors()).unwrap_err();
        assert!(err.contains("fc.weight"));
    }

    #[test]
    fn dropout_is_identity_without_rng() {
        let mut t = Tape::new();
        let x = t.constant(Mat::ones((2, 3)));
        assert_eq!(dropout(&mut t, x, 0.5, None), x);
        let mut rng = Rng::seed_from_u64(1);
        let y = dropout(&mut t, x, 0.5, Some(&mut rng));
        assert!(t.value(y).iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
