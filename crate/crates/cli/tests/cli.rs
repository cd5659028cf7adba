//! End-to-end tests of the `bif` binary: exit codes, error wording, and the
//! artifact round trip, each on a configuration small enough to run in
//! milliseconds.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bif_core::artifact::{read_influence_matrix, Manifest};
use bif_core::estimators::MatrixKind;

/// Minimal complete configuration; `extra` appends or overrides sections.
fn base_config(run_id: &str, extra: &str) -> String {
    format!(
        r#"
run_id = "{run_id}"

[model]
kind = "linear-regression"
input_dim = 2
bias = false

[data]
source = "linear-teacher"
n_train = 10
n_query = 3
input_dim = 2
noise = 0.2
seed = 4

[sgld]
epsilon = 1e-4
n_beta = 10.0
gamma = 20.0
batch_size = 10
chains = 1
draws_per_chain = 100
burn_in = 10
seed = 3
{extra}
"#
    )
}

struct Cli {
    tmp: tempfile::TempDir,
}

impl Cli {
    fn new() -> Self {
        Cli { tmp: tempfile::tempdir().unwrap() }
    }

    fn path(&self) -> &Path {
        self.tmp.path()
    }

    fn write_config(&self, name: &str, text: &str) -> PathBuf {
        let path = self.tmp.path().join(name);
        std::fs::write(&path, text).unwrap();
        path
    }

    fn out(&self, name: &str) -> PathBuf {
        self.tmp.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_bif"))
            .args(args)
            .env_remove("BIF_OUT")
            .output()
            .expect("spawn bif")
    }
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_exit(out: &Output, code: i32, context: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{context}: expected exit {code}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        stderr_of(out)
    );
}

#[test]
fn estimate_writes_readable_artifacts_and_a_verifiable_manifest() {
    let cli = Cli::new();
    let cfg = cli.write_config("run.toml", &base_config("smoke", ""));
    let out = cli.run(&[
        "estimate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        cli.out("root").to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "estimate");

    let run_dir = cli.out("root").join("smoke");
    let bif = read_influence_matrix(&run_dir.join("bif.mat")).unwrap();
    assert_eq!(bif.kind, MatrixKind::Bif);
    assert_eq!((bif.n_rows(), bif.n_cols()), (10, 3));
    assert_eq!(bif.row_labels[0].to_string(), "train:0");
    assert_eq!(bif.col_labels[2].to_string(), "query:2");

    let manifest = Manifest::load(&run_dir).unwrap();
    manifest.verify(&run_dir).unwrap();
    for name in ["config.toml", "trace.bin", "bif.mat", "bif.csv", "normalized-bif.mat"] {
        assert!(manifest.artifacts.contains_key(name), "missing {name}");
    }
}

#[test]
fn unknown_config_keys_are_rejected_with_their_line() {
    let cli = Cli::new();
    let cfg = cli.write_config("run.toml", &base_config("bad", "\n[sgld.typo]\nx = 1\n"));
    let out = cli.run(&["estimate", "--config", cfg.to_str().unwrap()]);
    assert_exit(&out, 2, "unknown key");
    let err = stderr_of(&out);
    assert!(err.contains("typo"), "stderr should name the key: {err}");
}

#[test]
fn missing_batch_size_on_a_small_train_set_names_the_default_collision() {
    let cli = Cli::new();
    let text = base_config("collide", "").replace("batch_size = 10\n", "");
    let cfg = cli.write_config("run.toml", &text);
    let out = cli.run(&["estimate", "--config", cfg.to_str().unwrap()]);
    assert_exit(&out, 2, "default collision");
    let err = stderr_of(&out);
    assert!(
        err.contains("set batch_size explicitly"),
        "stderr should point at the default: {err}"
    );
}

#[test]
fn reusing_a_run_id_under_one_root_is_refused() {
    let cli = Cli::new();
    let cfg = cli.write_config("run.toml", &base_config("dup", ""));
    let root = cli.out("root");
    let args = ["estimate", "--config", cfg.to_str().unwrap(), "--out", root.to_str().unwrap()];
    assert_exit(&cli.run(&args), 0, "first run");
    let second = cli.run(&args);
    assert_exit(&second, 2, "second run");
    assert!(stderr_of(&second).contains("already exists"));
}

#[test]
fn divergence_exits_3_and_persists_the_report() {
    let cli = Cli::new();
    let text = base_config("blowup", "").replace("epsilon = 1e-4", "epsilon = 1e6");
    let cfg = cli.write_config("run.toml", &text);
    let out = cli.run(&[
        "estimate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        cli.out("root").to_str().unwrap(),
    ]);
    assert_exit(&out, 3, "divergent estimate");

    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(cli.out("root").join("blowup").join("divergence.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["chain"], 0);
    assert!(report["max_abs"].as_f64().unwrap() > 1e12);
}

#[test]
fn per_component_estimation_needs_declared_components() {
    let cli = Cli::new();
    let cfg = cli.write_config("run.toml", &base_config("comp", ""));
    let out = cli.run(&[
        "estimate",
        "--config",
        cfg.to_str().unwrap(),
        "--per-component",
        "--out",
        cli.out("root").to_str().unwrap(),
    ]);
    assert_exit(&out, 4, "per-component without components");
    assert!(stderr_of(&out).contains("component"));
}

#[test]
fn zero_noise_is_refused_without_the_test_mode_flag() {
    let cli = Cli::new();
    let cfg = cli.write_config("run.toml", &base_config("frozen", ""));
    let refused = cli.run(&["estimate", "--config", cfg.to_str().unwrap(), "--zero-noise"]);
    assert_exit(&refused, 2, "zero-noise refused");
    assert!(stderr_of(&refused).contains("allow-test-modes"));

    let allowed = cli.run(&[
        "--allow-test-modes",
        "estimate",
        "--config",
        cfg.to_str().unwrap(),
        "--zero-noise",
        "--out",
        cli.out("root").to_str().unwrap(),
    ]);
    assert_exit(&allowed, 0, "zero-noise allowed");
}

#[test]
fn comparing_an_artifact_with_itself_reports_perfect_agreement() {
    let cli = Cli::new();
    let cfg = cli.write_config("run.toml", &base_config("self", ""));
    let root = cli.out("root");
    assert_exit(
        &cli.run(&["estimate", "--config", cfg.to_str().unwrap(), "--out", root.to_str().unwrap()]),
        0,
        "estimate",
    );
    let mat = root.join("self").join("bif.mat");
    let out = cli.run(&["compare", mat.to_str().unwrap(), mat.to_str().unwrap()]);
    assert_exit(&out, 0, "compare");
    let report: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert_eq!(report["pearson"], 1.0);
    assert_eq!(report["max_abs_diff"], 0.0);
    assert_eq!(report["top_k_overlap"], 1.0);
}

#[test]
fn comparing_artifacts_with_different_labels_is_refused() {
    let cli = Cli::new();
    let cfg_a = cli.write_config("a.toml", &base_config("a", ""));
    let text_b = base_config("b", "")
        .replace("n_train = 10", "n_train = 8")
        .replace("batch_size = 10", "batch_size = 8");
    let cfg_b = cli.write_config("b.toml", &text_b);
    let root = cli.out("root");
    for cfg in [&cfg_a, &cfg_b] {
        assert_exit(
            &cli.run(&[
                "estimate",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                root.to_str().unwrap(),
            ]),
            0,
            "estimate",
        );
    }
    let out = cli.run(&[
        "compare",
        root.join("a").join("bif.mat").to_str().unwrap(),
        root.join("b").join("bif.mat").to_str().unwrap(),
    ]);
    assert_exit(&out, 4, "label mismatch");
    assert!(stderr_of(&out).contains("train:8"), "stderr: {}", stderr_of(&out));
}

#[test]
fn lds_scores_the_same_artifact_identically_under_deduplicated_names() {
    let cli = Cli::new();
    let cfg = cli.write_config(
        "run.toml",
        &base_config("lds", "\n[lds]\nalpha_retrain = 0.5\nnum_subsets = 4\nseed = 2\n"),
    );
    let root = cli.out("root");
    assert_exit(
        &cli.run(&["estimate", "--config", cfg.to_str().unwrap(), "--out", root.to_str().unwrap()]),
        0,
        "estimate",
    );
    let mat = root.join("lds").join("bif.mat");
    let out = cli.run(&[
        "lds",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        cli.out("scores").to_str().unwrap(),
        mat.to_str().unwrap(),
        mat.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "lds");

    let dir = cli.out("scores").join("lds");
    let first: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("lds-bif.json")).unwrap()).unwrap();
    let second: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("lds-bif-2.json")).unwrap())
            .unwrap();
    assert_eq!(first, second, "same artifact must score identically");
    assert_eq!(first["report"]["per_subset"].as_array().unwrap().len(), 4);
}

#[test]
fn report_refuses_a_corrupted_artifact() {
    let cli = Cli::new();
    let cfg = cli.write_config("run.toml", &base_config("tamper", ""));
    let root = cli.out("root");
    assert_exit(
        &cli.run(&["estimate", "--config", cfg.to_str().unwrap(), "--out", root.to_str().unwrap()]),
        0,
        "estimate",
    );
    let run_dir = root.join("tamper");
    let clean = cli.run(&["report", run_dir.to_str().unwrap()]);
    assert_exit(&clean, 0, "report on intact run");

    // Flip the last data byte of the matrix; the manifest hash must catch it.
    let mat = run_dir.join("bif.mat");
    let mut bytes = std::fs::read(&mat).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&mat, bytes).unwrap();
    let tampered = cli.run(&["report", run_dir.to_str().unwrap()]);
    assert_exit(&tampered, 4, "report on tampered run");
    assert!(stderr_of(&tampered).contains("bif.mat"));
}

#[test]
fn the_output_root_env_var_is_honored_when_no_flag_is_given() {
    let cli = Cli::new();
    let cfg = cli.write_config("run.toml", &base_config("env", ""));
    let root = cli.out("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_bif"))
        .args(["estimate", "--config", cfg.to_str().unwrap()])
        .env("BIF_OUT", &root)
        .output()
        .expect("spawn bif");
    assert_exit(&out, 0, "estimate with BIF_OUT");
    assert!(root.join("env").join("bif.mat").is_file());
}

#[test]
fn file_backed_data_and_checkpoint_round_trip() {
    use bif_core::model::{DatasetSplit, Example};

    let cli = Cli::new();
    let data = DatasetSplit::new(
        (0..6)
            .map(|i| Example::regression(vec![i as f64 / 3.0, 1.0 - i as f64 / 5.0], vec![0.5]))
            .collect(),
        vec![Example::regression(vec![0.2, 0.4], vec![0.1])],
    )
    .unwrap();
    std::fs::write(cli.path().join("data.json"), serde_json::to_string(&data).unwrap()).unwrap();
    std::fs::write(cli.path().join("w.json"), "[0.25, -0.5]").unwrap();

    // Paths in the config resolve relative to the config file itself.
    let text = r#"
run_id = "files"

[model]
kind = "linear-regression"
input_dim = 2
bias = false

[data]
source = "file"
path = "data.json"

[checkpoint]
source = "file"
path = "w.json"

[sgld]
epsilon = 1e-4
n_beta = 6.0
gamma = 20.0
batch_size = 6
chains = 1
draws_per_chain = 50
seed = 1
"#;
    let cfg = cli.write_config("run.toml", text);
    let out = cli.run(&[
        "estimate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        cli.out("root").to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "file-backed estimate");
    let bif = read_influence_matrix(&cli.out("root").join("files").join("bif.mat")).unwrap();
    assert_eq!((bif.n_rows(), bif.n_cols()), (6, 1));
}
