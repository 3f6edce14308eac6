use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use acdnet_core::quant::{load_model, parse_test_vectors, ContainerMode};
use forge::config::PipelineConfig;

const TINY: &str = r#"
seed = 5

[data]
source = "synthetic"
n_cls = 3
clips_per_class = 10
sr = 2000
len = 2400
dataset_seed = 2

[model]
i_len = 2000
x = 1

[train]
epochs = 2
lr0 = 0.05
schedule = [1]
warmup_epochs = 0
batch_size = 8
examples_per_epoch = 16
"#;

fn forge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forge")).args(args).output().unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn setup(dir: &Path) -> (PathBuf, String) {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    (cfg.clone(), dir.join("out").display().to_string())
}

#[test]
fn stages_chain_through_containers() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path());
    let cfg = cfg.to_str().unwrap();
    let base = ["--config", cfg, "--out", &out];
    let stage = |s: &str| json(&forge(&[&[s][..], &base[..]].concat()));

    assert_eq!(stage("build")["n_cls"], 3);
    assert!(stage("train")["test"]["accuracy"].as_f64().unwrap() >= 0.0);
    assert_eq!(stage("quantize")["source"], "base.acdf");
    let export = stage("export");
    assert_eq!(export["test_vector_classes"].as_array().unwrap().len(), 10);

    let o = Path::new(&out);
    assert_eq!(load_model(&o.join("int8.acdf")).unwrap().mode, ContainerMode::Int8);
    let vectors = parse_test_vectors(&std::fs::read_to_string(o.join("c/test_vectors.txt")).unwrap()).unwrap();
    assert_eq!(vectors.len(), 10);
    for f in ["acdnet_model.h", "acdnet_model.c", "acdnet_runtime.c"] {
        assert!(o.join("c").join(f).is_file(), "{f}");
    }

    let eval = stage("eval");
    assert_eq!(eval["clips"], 6);
    let base_model = o.join("base.acdf").display().to_string();
    let float_eval = json(&forge(&[&["eval", "--model", &base_model][..], &base[..]].concat()));
    assert_eq!(float_eval["clips"], 6);
    let ci = stage("ci");
    assert_eq!(ci["trials"], 1000);
    assert!(ci["ci_low"].as_f64().unwrap() <= ci["ci_high"].as_f64().unwrap());

    let log = std::fs::read_to_string(o.join("forge.log")).unwrap();
    assert!(log.contains("# stage: build") && log.contains("dataset_seed = 2"));
}

#[test]
fn ci_over_constant_accuracies_has_zero_width() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("accs.txt");
    std::fs::write(&path, "# trials\n0.75\n0.75\n\n0.75\n").unwrap();
    let ci = json(&forge(&["ci", "--accuracies", path.to_str().unwrap()]));
    assert_eq!(ci["trials"], 3);
    assert_eq!(ci["half_width"].as_f64().unwrap(), 0.0);
    assert_eq!(ci["mean"].as_f64().unwrap(), 0.75);
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path());
    let cfg = cfg.to_str().unwrap();
    let code = |args: &[&str]| forge(args).status.code().unwrap();

    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["build"]), 2);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "bogus = 1\n").unwrap();
    assert_eq!(code(&["build", "--config", bad.to_str().unwrap()]), 3);
    assert_eq!(code(&["build", "--config", "/nonexistent.toml"]), 3);
    let junk = dir.path().join("junk.acdf");
    std::fs::write(&junk, b"not a container").unwrap();
    assert_eq!(code(&["eval", "--config", cfg, "--out", &out, "--model", junk.to_str().unwrap()]), 6);
    assert_eq!(code(&["train", "--config", cfg, "--out", &out]), 4);
    let accs = dir.path().join("accs.txt");
    std::fs::write(&accs, "0.5\nabc\n").unwrap();
    assert_eq!(code(&["ci", "--accuracies", accs.to_str().unwrap()]), 2);
    let meta = dir.path().join("meta.toml");
    std::fs::write(&meta, "[data]\nsource = \"metadata\"\ncsv = \"missing.csv\"\nsr = 2000\n").unwrap();
    assert_eq!(code(&["build", "--config", meta.to_str().unwrap(), "--out", &out]), 5);
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        PipelineConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 2);
}
