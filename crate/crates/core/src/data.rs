//! Multi-omics datasets: TSV I/O, synthetic cohorts, stratified folds and
//! training-set subsampling.
//!
//! Matrices are loaded as-is; no scaling or feature selection is applied on
//! ingest.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CmglError, Result};
use crate::rng::{self, Rng};
use crate::tape::Mat;

pub const LABELS_FILE: &str = "labels.tsv";

/// `N` patients observed under `M` modalities, with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct OmicsDataset {
    modality_names: Vec<String>,
    matrices: Vec<Mat>,
    labels: Vec<usize>,
    sample_ids: Vec<String>,
    num_classes: usize,
}

impl OmicsDataset {
    /// Validates and assembles a dataset. `num_classes` is `max(label) + 1`
    /// and every class in `0..num_classes` must occur.
    pub fn new(
        modality_names: Vec<String>,
        matrices: Vec<Mat>,
        labels: Vec<usize>,
        sample_ids: Vec<String>,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(CmglError::Dataset("no samples".into()));
        }
        if matrices.is_empty() || matrices.len() != modality_names.len() {
            return Err(CmglError::Dataset(format!(
                "{} modality names for {} matrices",
                modality_names.len(),
                matrices.len()
            )));
        }
        if sample_ids.len() != n {
            return Err(CmglError::Dataset(format!(
                "{} sample ids for {n} labels",
                sample_ids.len()
            )));
        }
        let mut seen = HashSet::new();
        for id in &sample_ids {
            if !seen.insert(id.as_str()) {
                return Err(CmglError::Dataset(format!("duplicate sample id {id}")));
            }
        }
        for (name, m) in modality_names.iter().zip(&matrices) {
            if m.nrows() != n {
                return Err(CmglError::Dataset(format!(
                    "modality {name} has {} rows, expected {n}",
                    m.nrows()
                )));
            }
            if m.ncols() == 0 {
                return Err(CmglError::Dataset(format!("modality {name} has no features")));
            }
            if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
                return Err(CmglError::Dataset(format!(
                    "modality {name}: non-finite value at sample {}",
                    sample_ids[pos / m.ncols()]
                )));
            }
        }
        let num_classes = labels.iter().max().copied().unwrap_or(0) + 1;
        let mut counts = vec![0usize; num_classes];
        for &y in &labels {
            counts[y] += 1;
        }
        if let Some(c) = counts.iter().position(|&k| k == 0) {
            return Err(CmglError::Dataset(format!("class {c} has no samples")));
        }
        Ok(Self {
            modality_names,
            matrices,
            labels,
            sample_ids,
            num_classes,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_modalities(&self) -> usize {
        self.matrices.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn modality_names(&self) -> &[String] {
        &self.modality_names
    }

    pub fn matrices(&self) -> &[Mat] {
        &self.matrices
    }

    pub fn matrix(&self, m: usize) -> &Mat {
        &self.matrices[m]
    }

    pub fn modality_dims(&self) -> Vec<usize> {
        self.matrices.iter().map(|m| m.ncols()).collect()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows `idx` of every modality, in that order.
    pub fn select_rows(&self, idx: &[usize]) -> Vec<Mat> {
        self.matrices
            .iter()
            .map(|m| m.select(Axis(0), idx))
            .collect()
    }

    /// Same data with labels at `idx` replaced by `f(old)`.
    pub fn with_labels_replaced(&self, idx: &[usize], f: impl Fn(usize) -> usize) -> Result<Self> {
        let mut labels = self.labels.clone();
        for &i in idx {
            labels[i] = f(labels[i]);
        }
        Self::new(
            self.modality_names.clone(),
            self.matrices.clone(),
            labels,
            self.sample_ids.clone(),
        )
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CmglError::io(path, e))
}

struct Table {
    ids: Vec<String>,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table> {
    let file = path.display().to_string();
    let text = read_text(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| CmglError::Parse {
            file: file.clone(),
            row: 0,
            col: 0,
            msg: "empty file".into(),
        })?
        .split('\t')
        .map(|s| s.trim().to_string())
        .collect();
    if header.first().map(String::as_str) != Some("sample_id") {
        return Err(CmglError::Parse {
            file,
            row: 1,
            col: 1,
            msg: "first header column must be sample_id".into(),
        });
    }
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (r, line) in lines.enumerate() {
        let mut cells = line.split('\t').map(|s| s.trim().to_string());
        let id = cells.next().unwrap_or_default();
        let rest: Vec<String> = cells.collect();
        if rest.len() + 1 != header.len() {
            return Err(CmglError::Parse {
                file,
                row: r + 2,
                col: rest.len() + 1,
                msg: format!("expected {} columns", header.len()),
            });
        }
        ids.push(id);
        rows.push(rest);
    }
    Ok(Table { ids, header, rows })
}

/// Loads `<modality>.tsv` files plus `labels.tsv` from `dir`.
///
/// Modalities are ordered by file name. Sample order follows the labels
/// file; modality rows are matched by `sample_id`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<OmicsDataset> {
    let dir = dir.as_ref();
    let labels_path = dir.join(LABELS_FILE);
    let labels_table = read_table(&labels_path)?;
    let lfile = labels_path.display().to_string();
    if labels_table.header.len() != 2 || labels_table.header[1] != "label" {
        return Err(CmglError::Parse {
            file: lfile,
            row: 1,
            col: 2,
            msg: "labels header must be: sample_id, label".into(),
        });
    }
    let mut labels = Vec::with_capacity(labels_table.ids.len());
    for (r, row) in labels_table.rows.iter().enumerate() {
        let y: usize = row[0].parse().map_err(|_| CmglError::Parse {
            file: lfile.clone(),
            row: r + 2,
            col: 2,
            msg: format!("label {:?} is not a non-negative integer", row[0]),
        })?;
        labels.push(y);
    }
    let sample_ids = labels_table.ids;
    let position: HashMap<&str, usize> = sample_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| CmglError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "tsv")
                && p.file_name().is_some_and(|n| n != LABELS_FILE)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CmglError::Dataset(format!(
            "{}: no modality files",
            dir.display()
        )));
    }

    let mut names = Vec::new();
    let mut matrices = Vec::new();
    for path in files {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let table = read_table(&path)?;
        let file = path.display().to_string();
        let ids: HashSet<&str> = table.ids.iter().map(String::as_str).collect();
        let missing_in_labels: Vec<String> = table
            .ids
            .iter()
            .filter(|id| !position.contains_key(id.as_str()))
            .cloned()
            .collect();
        let missing_in_modality: Vec<String> = sample_ids
            .iter()
            .filter(|id| !ids.contains(id.as_str()))
            .cloned()
            .collect();
        if !missing_in_labels.is_empty() || !missing_in_modality.is_empty() {
            return Err(CmglError::Alignment {
                modality: name,
                missing_in_labels,
                missing_in_modality,
            });
        }
        if table.ids.len() != sample_ids.len() {
            return Err(CmglError::Dataset(format!("{file}: duplicate sample ids")));
        }
        let d = table.header.len() - 1;
        let mut m = Array2::zeros((sample_ids.len(), d));
        for (r, (id, row)) in table.ids.iter().zip(&table.rows).enumerate() {
            let target = position[id.as_str()];
            for (c, cell) in row.iter().enumerate() {
                m[[target, c]] = cell.parse::<f64>().map_err(|_| CmglError::Parse {
                    file: file.clone(),
                    row: r + 2,
                    col: c + 2,
                    msg: format!("{cell:?} is not a number"),
                })?;
            }
        }
        names.push(name);
        matrices.push(m);
    }
    OmicsDataset::new(names, matrices, labels, sample_ids)
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| CmglError::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| CmglError::io(path, e))
}

/// Writes the directory layout read by [`load_dataset`].
pub fn write_dataset(ds: &OmicsDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| CmglError::io(dir, e))?;
    let mut labels = String::from("sample_id\tlabel\n");
    for (id, y) in ds.sample_ids.iter().zip(&ds.labels) {
        labels.push_str(&format!("{id}\t{y}\n"));
    }
    write_file(&dir.join(LABELS_FILE), &labels)?;
    for (name, m) in ds.modality_names.iter().zip(&ds.matrices) {
        let mut body = String::from("sample_id");
        for j in 0..m.ncols() {
            body.push_str(&format!("\tf{j}"));
        }
        body.push('\n');
        for (id, row) in ds.sample_ids.iter().zip(m.rows()) {
            body.push_str(id);
            for v in row {
                body.push('\t');
                body.push_str(&v.to_string());
            }
            body.push('\n');
        }
        write_file(&dir.join(format!("{name}.tsv")), &body)?;
    }
    Ok(())
}

/// Parameters of a Gaussian multi-omics fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub num_classes: usize,
    pub modality_dims: Vec<usize>,
    pub informative_mask: Vec<bool>,
    pub class_separation: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 400,
            num_classes: 4,
            modality_dims: vec![32, 32, 32, 32],
            informative_mask: vec![true, true, true, false],
            class_separation: 6.0,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(CmglError::Config("synthetic: num_classes must be >= 2".into()));
        }
        if self.n_samples < self.num_classes {
            return Err(CmglError::Config("synthetic: n_samples < num_classes".into()));
        }
        if self.modality_dims.is_empty() || self.modality_dims.contains(&0) {
            return Err(CmglError::Config("synthetic: every modality needs dim >= 1".into()));
        }
        if self.informative_mask.len() != self.modality_dims.len() {
            return Err(CmglError::Config(
                "synthetic: informative_mask length differs from modality_dims".into(),
            ));
        }
        if !(self.class_separation > 0.0) || !(self.noise_scale > 0.0) {
            return Err(CmglError::Config(
                "synthetic: class_separation and noise_scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Draws a fixture. Informative modalities centre class `c` at
/// `(sep / √2) · e_{c mod d}`, so distinct class means (for `d ≥ C`) lie
/// exactly `sep` apart; other modalities are centred at the origin.
/// Both use isotropic noise with standard deviation `noise_scale`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<OmicsDataset> {
    spec.validate()?;
    let mut rng: Rng = rng::stream(spec.seed, "synthetic", 0);
    let n = spec.n_samples;
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, spec.noise_scale).expect("validated noise scale");
    let offset = spec.class_separation / std::f64::consts::SQRT_2;
    let mut matrices = Vec::new();
    for (&d, &informative) in spec.modality_dims.iter().zip(&spec.informative_mask) {
        let mut m = Array2::from_shape_fn((n, d), |_| noise.sample(&mut rng));
        if informative {
            for (i, &y) in labels.iter().enumerate() {
                m[[i, y % d]] += offset;
            }
        }
        matrices.push(m);
    }
    let names = (0..spec.modality_dims.len())
        .map(|m| format!("omics{m}"))
        .collect();
    let ids = (0..n).map(|i| format!("S{i:04}")).collect();
    OmicsDataset::new(names, matrices, labels, ids)
}

/// One outer fold: disjoint train / validation / test index sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

fn by_class(idx: impl IntoIterator<Item = usize>, labels: &[usize], c: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); c];
    for i in idx {
        out[labels[i]].push(i);
    }
    out
}

/// Stratified `n_folds`-way split with a 7:1 train/validation split of each
/// non-test remainder.
///
/// Each class is shuffled, then dealt round-robin into folds; the dealing
/// position carries over between classes so fold sizes stay balanced.
pub fn stratified_kfold(ds: &OmicsDataset, n_folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if n_folds < 2 {
        return Err(CmglError::Config(format!("n_folds must be >= 2, got {n_folds}")));
    }
    let labels = ds.labels();
    let mut classes = by_class(0..ds.n_samples(), labels, ds.num_classes());
    for (c, members) in classes.iter().enumerate() {
        if members.len() < n_folds {
            return Err(CmglError::Stratification {
                class: c,
                count: members.len(),
                needed: n_folds,
            });
        }
    }
    let mut rng = rng::stream(seed, "folds", 0);
    let mut fold_of = vec![0usize; ds.n_samples()];
    let mut cursor = 0;
    for members in classes.iter_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            fold_of[i] = cursor % n_folds;
            cursor += 1;
        }
    }
    let mut splits = Vec::with_capacity(n_folds);
    for f in 0..n_folds {
        let mut test = Vec::new();
        let mut train = Vec::new();
        let mut val = Vec::new();
        for members in &classes {
            let rest: Vec<usize> = members.iter().copied().filter(|&i| fold_of[i] != f).collect();
            test.extend(members.iter().copied().filter(|&i| fold_of[i] == f));
            let n_val = rest.len().div_ceil(8);
            val.extend_from_slice(&rest[..n_val]);
            train.extend_from_slice(&rest[n_val..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        splits.push(FoldSplit {
            fold_index: f,
            train_idx: train,
            val_idx: val,
            test_idx: test,
        });
    }
    Ok(splits)
}

/// Result of [`subsample_train`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subsample {
    pub split: FoldSplit,
    /// Classes whose proportional share rounded to zero and were kept at one
    /// sample.
    pub raised_classes: Vec<usize>,
}

/// Stratified subset of the training indices of size
/// `round(fraction · |train|)`, at least one per class present.
pub fn subsample_train(
    split: &FoldSplit,
    labels: &[usize],
    fraction: f64,
    seed: u64,
) -> Result<Subsample> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CmglError::Config(format!(
            "subsample fraction must be in (0, 1], got {fraction}"
        )));
    }
    let c = split.train_idx.iter().map(|&i| labels[i]).max().map_or(0, |m| m + 1);
    let mut classes = by_class(split.train_idx.iter().copied(), labels, c);
    if fraction == 1.0 {
        return Ok(Subsample {
            split: split.clone(),
            raised_classes: Vec::new(),
        });
    }
    let total = split.train_idx.len();
    let target = (fraction * total as f64).round() as usize;
    // largest-remainder allocation
    let quotas: Vec<f64> = classes.iter().map(|m| fraction * m.len() as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(target.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    let mut raised = Vec::new();
    for (k, members) in classes.iter().enumerate() {
        if counts[k] == 0 && !members.is_empty() {
            counts[k] = 1;
            raised.push(k);
        }
    }
    let mut rng = rng::stream(seed, "subsample", split.fold_index as u64);
    let mut train = Vec::with_capacity(target);
    for (k, members) in classes.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..counts[k].min(members.len())]);
    }
    train.sort_unstable();
    Ok(Subsample {
        split: FoldSplit {
            train_idx: train,
            ..split.clone()
        },
        raised_classes: raised,
    })
}
