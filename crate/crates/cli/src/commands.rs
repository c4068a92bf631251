use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::Serialize;

use cmgl::checkpoint::Checkpoint;
use cmgl::data::write_dataset;
use cmgl::eval::cluster::{cluster_sweep, silhouette};
use cmgl::eval::cv::{folds_for, run_ablation, run_subsample, CvRun};
use cmgl::eval::export::export_embeddings;
use cmgl::eval::grid::{default_grids, run_grid, GridReport, GridSpec};
use cmgl::evidence::train_stage1;
use cmgl::gnn::{select_k, KSelection, Stage2Setup};
use cmgl::graph::ModalityIndex;
use cmgl::{CmglError, Mat, Result, RunConfig, Variant};

use crate::{Command, Common};

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CmglError::io(path, e))
}

fn to_toml<T: Serialize>(v: &T) -> String {
    toml::to_string(v).expect("report serialises")
}

/// Loads the config (minus any `[grid]` table) and applies flag overrides.
fn load_config(common: &Common) -> Result<(RunConfig, Option<toml::Table>)> {
    let mut table = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CmglError::io(path, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| CmglError::Config(format!("{}: {}", path.display(), e.message())))?
        }
        None => toml::Table::new(),
    };
    let grid = match table.remove("grid") {
        Some(toml::Value::Table(t)) => Some(t),
        Some(_) => return Err(CmglError::Config("`grid` must be a table".into())),
        None => None,
    };
    let mut cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CmglError::Config(e.message().to_string()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = common.jobs {
        cfg.jobs = jobs;
    }
    if let Some(dir) = &common.dataset_dir {
        cfg.dataset_dir = Some(dir.clone());
    }
    if let Some(ks) = &common.k_candidates {
        cfg.graph.k_candidates = ks.clone();
    }
    cfg.validate()?;
    Ok((cfg, grid))
}

fn prepare_out(out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(|e| CmglError::io(out, e))?;
    Ok(out.to_path_buf())
}

fn snapshot(out: &Path, cfg: &RunConfig, grid: Option<&toml::Table>) -> Result<()> {
    let mut text = cfg.to_toml();
    if let Some(g) = grid {
        let mut wrapper = toml::Table::new();
        wrapper.insert("grid".into(), toml::Value::Table(g.clone()));
        text.push('\n');
        text.push_str(&toml::to_string(&wrapper).expect("grid serialises"));
    }
    write(&out.join("config.toml"), &text)
}

#[derive(Serialize)]
struct Timings {
    total_seconds: f64,
    fold_seconds: Vec<f64>,
}

fn write_timings(out: &Path, name: &str, start: Instant, fold_seconds: Vec<f64>) -> Result<()> {
    let t = Timings {
        total_seconds: start.elapsed().as_secs_f64(),
        fold_seconds,
    };
    write(&out.join(name), &to_toml(&t))
}

fn write_fold_artifacts(out: &Path, ds: &cmgl::OmicsDataset, run: &CvRun, variant: Variant) -> Result<()> {
    for art in &run.artifacts {
        let dir = out.join(format!("fold{}", art.split.fold_index));
        fs::create_dir_all(&dir).map_err(|e| CmglError::io(&dir, e))?;
        Checkpoint::from_fold(art, variant, ds.modality_names()).save(dir.join("checkpoint.cmgl"))?;
        art.confidences.write_tsv(dir.join("confidences.tsv"))?;
        let g = ModalityIndex::build(ds.matrices(), &art.split.train_idx, &art.split.test_idx, art.k)?.graph(art.k)?;
        // local node ids mapped back to dataset rows
        let edges = g.edges.edges.iter().map(|&(a, b)| (g.nodes[a], g.nodes[b]));
        cmgl::EdgeSet::new(ds.n_samples(), art.k, "intersection", edges).write_tsv(dir.join("test_graph_edges.tsv"))?;
    }
    Ok(())
}

fn cmd_cv(common: &Common, variants: &[Variant], single: bool) -> Result<()> {
    let (cfg, _) = load_config(common)?;
    let out = prepare_out(&common.out)?;
    snapshot(&out, &cfg, None)?;
    let ds = cfg.dataset()?;
    for &variant in variants {
        let start = Instant::now();
        let run = run_ablation(&ds, variant, &cfg)?;
        let s = &run.report.summary;
        println!(
            "{variant}: accuracy {:.4} ± {:.4}, macro-F1 {:.4} ± {:.4}",
            s.accuracy.mean, s.accuracy.std, s.macro_f1.mean, s.macro_f1.std
        );
        let (report, timings, sub) = if single {
            ("report.toml".to_string(), "timings.toml".to_string(), out.clone())
        } else {
            (format!("report_{variant}.toml"), format!("timings_{variant}.toml"), out.join(variant.as_str()))
        };
        write(&out.join(report), &run.report.to_toml())?;
        write_fold_artifacts(&sub, &ds, &run, variant)?;
        write_timings(&out, &timings, start, run.fold_seconds.clone())?;
    }
    Ok(())
}

fn grid_specs(grid: Option<&toml::Table>) -> Result<Vec<GridSpec>> {
    let Some(t) = grid else {
        return Ok(default_grids().into());
    };
    let mut spec = GridSpec::new();
    for (key, value) in t {
        match value {
            toml::Value::Array(vs) => {
                spec.insert(key.clone(), vs.clone());
            }
            _ => return Err(CmglError::Config(format!("grid key `{key}` must map to an array of values"))),
        }
    }
    Ok(vec![spec])
}

#[derive(Serialize)]
struct GridFile {
    grids: Vec<GridReport>,
}

fn cmd_grid(common: &Common) -> Result<()> {
    let (cfg, grid) = load_config(common)?;
    let specs = grid_specs(grid.as_ref())?;
    // reject bad keys before any training
    for s in &specs {
        cmgl::eval::grid::grid_configs(&cfg, s)?;
    }
    let out = prepare_out(&common.out)?;
    snapshot(&out, &cfg, grid.as_ref())?;
    let ds = cfg.dataset()?;
    let start = Instant::now();
    let mut grids = Vec::new();
    for spec in &specs {
        let report = run_grid(&ds, &cfg, spec)?;
        for row in &report.rows {
            let params: Vec<String> = row.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
            println!(
                "{}: macro-F1 {:.4} ± {:.4}, accuracy {:.4} ± {:.4}",
                params.join(" "),
                row.macro_f1.mean,
                row.macro_f1.std,
                row.accuracy.mean,
                row.accuracy.std
            );
        }
        grids.push(report);
    }
    write(&out.join("report.toml"), &to_toml(&GridFile { grids }))?;
    write_timings(&out, "timings.toml", start, Vec::new())
}

#[derive(Serialize)]
struct KselectFold {
    fold: usize,
    selection: KSelection,
}

#[derive(Serialize)]
struct KselectReport {
    seed: u64,
    folds: Vec<KselectFold>,
    config: RunConfig,
}

fn cmd_kselect(common: &Common) -> Result<()> {
    let (cfg, _) = load_config(common)?;
    let out = prepare_out(&common.out)?;
    snapshot(&out, &cfg, None)?;
    let ds = cfg.dataset()?;
    let start = Instant::now();
    let setup = Stage2Setup {
        fusion: &cfg.fusion,
        stage2: &cfg.stage2,
        skip_attention: false,
    };
    let mut folds = Vec::new();
    for split in folds_for(&ds, &cfg)? {
        let fold = split.fold_index;
        let s1 = train_stage1(&ds, &split, &cfg.stage1, cfg.seed).map_err(|e| e.in_fold(fold, "stage1"))?;
        let sel = select_k(
            &ds,
            &split,
            &s1.confidences.matrix(),
            &cfg.graph.k_candidates,
            cfg.graph.warmup_epochs,
            &setup,
            cfg.seed,
        )
        .map_err(|e| e.in_fold(fold, "select_k"))?;
        for s in &sel.scores {
            match s.val_macro_f1 {
                Some(f) => println!("fold {fold}: k = {} validation macro-F1 {f:.4}", s.k),
                None => println!("fold {fold}: k = {} skipped", s.k),
            }
        }
        folds.push(KselectFold { fold, selection: sel });
    }
    let report = KselectReport {
        seed: cfg.seed,
        folds,
        config: cfg,
    };
    write(&out.join("report.toml"), &to_toml(&report))?;
    write_timings(&out, "timings.toml", start, Vec::new())
}

fn cmd_export(common: &Common, checkpoint: &Path) -> Result<()> {
    let (cfg, _) = load_config(common)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let out = prepare_out(&common.out)?;
    snapshot(&out, &cfg, None)?;
    let ds = cfg.dataset()?;
    let table = export_embeddings(&ckpt, &ds)?;
    table.write_tsv(out.join("embeddings.tsv"))?;
    table.modality_confidence.write_tsv(out.join("confidences.tsv"))?;
    println!("exported {} samples x {} dims", table.sample_ids.len(), table.embeddings.ncols());
    Ok(())
}

/// Reads an embedding TSV: ids, predicted classes and `e_*` columns.
fn read_embeddings(path: &Path) -> Result<(Vec<String>, Vec<usize>, Mat)> {
    let text = fs::read_to_string(path).map_err(|e| CmglError::io(path, e))?;
    let file = path.display().to_string();
    let parse_err = |row: usize, col: usize, msg: String| CmglError::Parse {
        file: file.clone(),
        row,
        col,
        msg,
    };
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split('\t').collect();
    let cols: Vec<usize> = (0..header.len()).filter(|&j| header[j].starts_with("e_")).collect();
    let pred_col = header.iter().position(|&h| h == "pred");
    if cols.is_empty() || header[0] != "sample_id" {
        return Err(parse_err(1, 1, "expected `sample_id` and `e_*` columns".into()));
    }
    let mut ids = Vec::new();
    let mut preds = Vec::new();
    let mut data = Vec::new();
    for (r, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != header.len() {
            return Err(parse_err(r + 2, cells.len() + 1, format!("expected {} cells", header.len())));
        }
        ids.push(cells[0].to_string());
        if let Some(p) = pred_col {
            preds.push(cells[p].parse().map_err(|_| parse_err(r + 2, p + 1, format!("bad class `{}`", cells[p])))?);
        }
        for &j in &cols {
            data.push(cells[j].parse::<f64>().map_err(|_| parse_err(r + 2, j + 1, format!("bad number `{}`", cells[j])))?);
        }
    }
    let x = Mat::from_shape_vec((ids.len(), cols.len()), data).expect("rectangular");
    Ok((ids, preds, x))
}

#[derive(Serialize)]
struct ClusterReport {
    seed: u64,
    /// Silhouette of the predicted classes, when at least two occur.
    #[serde(skip_serializing_if = "Option::is_none")]
    predicted_class_silhouette: Option<f64>,
    candidates: Vec<cmgl::eval::cluster::ClusterScore>,
}

fn cmd_cluster(common: &Common, embeddings: &Path, clusters: &[usize]) -> Result<()> {
    let (cfg, _) = load_config(common)?;
    let (ids, preds, x) = read_embeddings(embeddings)?;
    let out = prepare_out(&common.out)?;
    snapshot(&out, &cfg, None)?;
    let seed = cmgl::rng::stream_seed(cfg.seed, "cluster", 0);
    let sweep = cluster_sweep(&x, clusters, seed)?;
    let mut tsv = String::from("sample_id");
    for (s, _) in &sweep {
        tsv.push_str(&format!("\tk{}", s.k));
    }
    tsv.push('\n');
    for (i, id) in ids.iter().enumerate() {
        tsv.push_str(id);
        for (_, km) in &sweep {
            tsv.push_str(&format!("\t{}", km.assignments[i]));
        }
        tsv.push('\n');
    }
    write(&out.join("assignments.tsv"), &tsv)?;
    let pred_sil = if preds.len() == ids.len() { silhouette(&x, &preds).ok() } else { None };
    for (s, _) in &sweep {
        println!("k = {}: silhouette {:.4}, inertia {:.4}", s.k, s.silhouette, s.inertia);
    }
    if let Some(s) = pred_sil {
        println!("predicted classes: silhouette {s:.4}");
    }
    let report = ClusterReport {
        seed: cfg.seed,
        predicted_class_silhouette: pred_sil,
        candidates: sweep.into_iter().map(|(s, _)| s).collect(),
    };
    write(&out.join("report.toml"), &to_toml(&report))
}

fn cmd_subsample(common: &Common, fractions: &[f64]) -> Result<()> {
    let (cfg, _) = load_config(common)?;
    let out = prepare_out(&common.out)?;
    snapshot(&out, &cfg, None)?;
    let ds = cfg.dataset()?;
    let start = Instant::now();
    let report = run_subsample(&ds, fractions, &cfg)?;
    for row in &report.rows {
        println!(
            "fraction {}: accuracy {:.4} ± {:.4}, macro-F1 {:.4} ± {:.4}",
            row.fraction, row.summary.accuracy.mean, row.summary.accuracy.std, row.summary.macro_f1.mean, row.summary.macro_f1.std
        );
    }
    write(&out.join("report.toml"), &to_toml(&report))?;
    write_timings(&out, "timings.toml", start, Vec::new())
}

fn cmd_synth(common: &Common) -> Result<()> {
    let (cfg, _) = load_config(common)?;
    let out = prepare_out(&common.out)?;
    snapshot(&out, &cfg, None)?;
    let ds = cmgl::data::generate_synthetic(&cfg.synthetic)?;
    let dir = out.join("data");
    write_dataset(&ds, &dir)?;
    info!("wrote {} samples to {}", ds.n_samples(), dir.display());
    println!("wrote {} samples x {} modalities to {}", ds.n_samples(), ds.n_modalities(), dir.display());
    Ok(())
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(c) => cmd_synth(&c),
        Command::Train(c) => cmd_cv(&c, &[Variant::Full], true),
        Command::Ablate { common, variant } => match variant {
            Some(v) => cmd_cv(&common, &[v.parse()?], true),
            None => cmd_cv(&common, &Variant::ALL, false),
        },
        Command::Grid(c) => cmd_grid(&c),
        Command::Kselect(c) => cmd_kselect(&c),
        Command::Export { common, checkpoint } => cmd_export(&common, &checkpoint),
        Command::Cluster {
            common,
            embeddings,
            clusters,
        } => cmd_cluster(&common, &embeddings, &clusters),
        Command::Subsample { common, fractions } => cmd_subsample(&common, &fractions),
    }
}
