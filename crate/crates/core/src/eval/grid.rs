//! Cartesian hyperparameter sweeps over dotted config keys.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::OmicsDataset;
use crate::error::{CmglError, Result};
use crate::eval::cv::{folds_for, run_splits, MeanStd, Variant};

/// Key → candidate values; cells enumerate keys in sorted order.
pub type GridSpec = BTreeMap<String, Vec<toml::Value>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub params: BTreeMap<String, toml::Value>,
    pub macro_f1: MeanStd,
    pub accuracy: MeanStd,
    pub k_selected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub seed: u64,
    pub keys: Vec<String>,
    pub rows: Vec<GridRow>,
    pub config: RunConfig,
}

impl GridReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("grid report serialises")
    }
}

/// Every cell as a list of `(key, value)`, last key varying fastest.
pub fn grid_cells(spec: &GridSpec) -> Vec<Vec<(String, toml::Value)>> {
    let mut cells = vec![Vec::new()];
    for (key, values) in spec {
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.push((key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    cells
}

/// Builds the config of every cell, failing on the first bad key.
pub fn grid_configs(base: &RunConfig, spec: &GridSpec) -> Result<Vec<(BTreeMap<String, toml::Value>, RunConfig)>> {
    if let Some((key, _)) = spec.iter().find(|(_, v)| v.is_empty()) {
        return Err(CmglError::Config(format!("grid key `{key}` has no values")));
    }
    if spec.contains_key("seed") || spec.contains_key("n_folds") {
        return Err(CmglError::Config("grid may not sweep `seed` or `n_folds`".into()));
    }
    grid_cells(spec)
        .into_iter()
        .map(|cell| {
            let mut cfg = base.clone();
            for (key, value) in &cell {
                cfg = cfg.with_value(key, value)?;
            }
            Ok((cell.into_iter().collect(), cfg))
        })
        .collect()
}

/// Cross-validates every cell on the same folds.
pub fn run_grid(ds: &OmicsDataset, base: &RunConfig, spec: &GridSpec) -> Result<GridReport> {
    base.validate()?;
    let cells = grid_configs(base, spec)?;
    let splits = folds_for(ds, base)?;
    let mut rows = Vec::with_capacity(cells.len());
    for (params, cfg) in cells {
        let run = run_splits(ds, &splits, &cfg, Variant::Full)?;
        rows.push(GridRow {
            params,
            macro_f1: run.report.summary.macro_f1,
            accuracy: run.report.summary.accuracy,
            k_selected: run.report.folds.iter().map(|f| f.k_selected).collect(),
        });
    }
    Ok(GridReport {
        seed: base.seed,
        keys: spec.keys().cloned().collect(),
        rows,
        config: base.clone(),
    })
}

/// The two 3x3 sweeps over Stage-1 and Stage-2 loss weights.
pub fn default_grids() -> [GridSpec; 2] {
    let f = |v: &[f64]| v.iter().map(|&x| toml::Value::Float(x)).collect::<Vec<_>>();
    let i = |v: &[i64]| v.iter().map(|&x| toml::Value::Integer(x)).collect::<Vec<_>>();
    [
        GridSpec::from([
            ("stage1.lambda_edl".to_string(), f(&[0.5, 1.5, 3.0])),
            ("stage1.anneal_step".to_string(), i(&[10, 50, 150])),
        ]),
        GridSpec::from([
            ("stage2.lambda_cls".to_string(), f(&[1.0, 3.0, 5.0])),
            ("stage2.lambda_con".to_string(), f(&[0.5, 1.0, 1.5])),
        ]),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_by_three_has_nine_cells() {
        for g in default_grids() {
            let cells = grid_configs(&RunConfig::default(), &g).unwrap();
            assert_eq!(cells.len(), 9);
        }
    }

    #[test]
    fn stage1_sweep_keeps_stage2_defaults() {
        let [g1, _] = default_grids();
        let base = RunConfig::default();
        for (_, cfg) in grid_configs(&base, &g1).unwrap() {
            assert_eq!(cfg.stage2, base.stage2);
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let spec = GridSpec::from([("stage2.nope".to_string(), vec![toml::Value::Float(1.0)])]);
        let err = grid_configs(&RunConfig::default(), &spec).unwrap_err();
        assert!(err.to_string().contains("stage2.nope"));
    }
}
