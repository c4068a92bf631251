use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 1
n_folds = 2

[synthetic]
n_samples = 40
num_classes = 2
modality_dims = [5, 5]
informative_mask = [true, false]

[stage1]
epochs = 10
hidden = 8

[fusion]
width = 8
heads = 2

[graph]
k_candidates = [3]

[stage2]
epochs = 10
patience = 5
hidden = 8
embed = 4
"#;

fn cmgl(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmgl"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    dir
}

fn listing(dir: &Path) -> Vec<String> {
    let mut out: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    out.sort();
    out
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = setup();
    fs::write(dir.path().join("bad.toml"), "[stage2]\nlearning_rate = 0.1\n").unwrap();
    let out = cmgl(dir.path(), &["train", "--config", "bad.toml", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn bad_arguments_exit_one_and_help_exits_zero() {
    let dir = setup();
    assert_eq!(cmgl(dir.path(), &["train"]).status.code(), Some(1));
    assert_eq!(cmgl(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(cmgl(dir.path(), &["--help"]).status.code(), Some(0));
    let out = cmgl(dir.path(), &["ablate", "--config", "run.toml", "--out", "o", "--variant", "nope"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = setup();
    let out = cmgl(dir.path(), &["train", "--config", "run.toml", "--out", "o", "--dataset-dir", "absent"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_export_cluster_round_trip_stays_inside_out() {
    let dir = setup();
    let p = dir.path();
    let out = cmgl(p, &["train", "--config", "run.toml", "--out", "run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(listing(p), vec!["run", "run.toml"]);
    for f in ["report.toml", "config.toml", "timings.toml", "fold0/checkpoint.cmgl", "fold1/confidences.tsv", "fold1/test_graph_edges.tsv"] {
        assert!(p.join("run").join(f).is_file(), "missing {f}");
    }

    let out = cmgl(p, &["synth", "--config", "run.toml", "--out", "synth"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = cmgl(
        p,
        &["export", "--config", "run.toml", "--out", "emb", "--checkpoint", "run/fold0/checkpoint.cmgl", "--dataset-dir", "synth/data"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(p.join("emb/embeddings.tsv")).unwrap();
    let mut lines = table.lines();
    assert!(lines.next().unwrap().starts_with("sample_id\tpred\tconfidence\te_0"));
    assert_eq!(lines.count(), 40);

    let out = cmgl(p, &["cluster", "--out", "clu", "--embeddings", "emb/embeddings.tsv", "--clusters", "2,3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(p.join("clu/report.toml")).unwrap();
    assert!(report.contains("silhouette"));
    assert_eq!(fs::read_to_string(p.join("clu/assignments.tsv")).unwrap().lines().count(), 41);
    assert_eq!(listing(p), vec!["clu", "emb", "run", "run.toml", "synth"]);
}

#[test]
fn export_rejects_incompatible_dataset() {
    let dir = setup();
    let p = dir.path();
    assert!(cmgl(p, &["train", "--config", "run.toml", "--out", "run"]).status.success());
    fs::write(
        p.join("other.toml"),
        CONFIG.replace("modality_dims = [5, 5]", "modality_dims = [5, 7]"),
    )
    .unwrap();
    assert!(cmgl(p, &["synth", "--config", "other.toml", "--out", "other"]).status.success());
    let out = cmgl(
        p,
        &["export", "--config", "run.toml", "--out", "emb", "--checkpoint", "run/fold0/checkpoint.cmgl", "--dataset-dir", "other/data"],
    );
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("omics1"));
}
