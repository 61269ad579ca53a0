//! Command-line contract tests: exit codes, deterministic outputs, config
//! echo round-trips, grid parsing. Heavyweight numerical behavior lives in
//! the acceptance suite.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tacinfer"))
}

const TINY_CONFIG: &str = r#"
seed = 42

[grid]
step_s = 1.0

[mcmc]
n_iterations = 400
burn_in = 100

[train]
epochs = 2
batch_size = 10

[train.architecture]
latent_dim = 2
encoder_hidden = [8, 6]
decoder_hidden = [8, 6]
decoder_prime_hidden = [4, 4]

[eval]
n_tests = 2
alpha = 0.26
n_posterior_samples = 200

[sweep]
repeats = 1
dvr_shift_measurements = 1
"#;

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, TINY_CONFIG).unwrap();
    path
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output().unwrap().status.code().unwrap_or(-1)
}

/// Byte map of every file in a directory tree, keyed by relative path.
fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

#[test]
fn usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path());

    // clap-level: unknown subcommand / missing required flag
    assert_eq!(exit_code(bin().arg("frobnicate")), 2);
    assert_eq!(exit_code(bin().args(["simulate", "--out"])), 2);

    // validation-level: zero size
    assert_eq!(
        exit_code(bin().args([
            "--config",
            config.to_str().unwrap(),
            "simulate",
            "--size",
            "0",
            "--out",
            tmp.path().join("x").to_str().unwrap(),
        ])),
        2
    );

    // missing measurements file
    assert_eq!(
        exit_code(bin().args([
            "--config",
            config.to_str().unwrap(),
            "mcmc",
            "--measurements",
            tmp.path().join("absent.csv").to_str().unwrap(),
            "--out",
            tmp.path().join("y").to_str().unwrap(),
        ])),
        2
    );

    // bad grid spec
    assert_eq!(
        exit_code(bin().args([
            "--config",
            config.to_str().unwrap(),
            "sweep",
            "--kind",
            "beta",
            "--grid",
            "nonsense",
            "--out",
            tmp.path().join("z").to_str().unwrap(),
        ])),
        2
    );
}

#[test]
fn simulate_is_idempotent_and_seed_sensitive() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path());
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    let out_c = tmp.path().join("c");

    for out in [&out_a, &out_b] {
        run_ok(bin().args([
            "--config",
            config.to_str().unwrap(),
            "simulate",
            "--size",
            "12",
            "--out",
            out.to_str().unwrap(),
        ]));
    }
    assert_eq!(dir_bytes(&out_a), dir_bytes(&out_b), "same config+seed must be byte-identical");

    run_ok(bin().args([
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "43",
        "simulate",
        "--size",
        "12",
        "--out",
        out_c.to_str().unwrap(),
    ]));
    let a = fs::read(out_a.join("dataset.csv")).unwrap();
    let c = fs::read(out_c.join("dataset.csv")).unwrap();
    assert_ne!(a, c, "different seed must change the data");
}

#[test]
fn config_echo_reloads_identically() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path());
    let out = tmp.path().join("run");
    run_ok(bin().args([
        "--config",
        config.to_str().unwrap(),
        "simulate",
        "--size",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]));

    // the echoed config must reload to the same resolved document
    let echoed = fs::read_to_string(out.join("config.toml")).unwrap();
    let reechoed = {
        let out2 = tmp.path().join("run2");
        run_ok(bin().args([
            "--config",
            out.join("config.toml").to_str().unwrap(),
            "simulate",
            "--size",
            "3",
            "--out",
            out2.to_str().unwrap(),
        ]));
        fs::read_to_string(out2.join("config.toml")).unwrap()
    };
    assert_eq!(echoed, reechoed);
}

#[test]
fn manifest_covers_all_outputs() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path());
    let out = tmp.path().join("run");
    run_ok(bin().args([
        "--config",
        config.to_str().unwrap(),
        "simulate",
        "--size",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let listed: Vec<String> = manifest["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["path"].as_str().unwrap().to_string())
        .collect();
    for name in ["config.toml", "dataset.csv", "dataset.json", "log.txt"] {
        assert!(listed.contains(&name.to_string()), "{name} missing from manifest: {listed:?}");
    }
}

#[test]
fn sweep_grid_spec_generates_expected_points() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path());

    // build the inputs the beta sweep needs at the tiniest possible scale
    let data = tmp.path().join("data");
    let test = tmp.path().join("test");
    let chains = tmp.path().join("chains");
    let cfg = config.to_str().unwrap();
    run_ok(bin().args(["--config", cfg, "simulate", "--size", "10", "--out", data.to_str().unwrap()]));
    run_ok(bin().args([
        "--config", cfg, "simulate", "--kind", "test", "--size", "2", "--out", test.to_str().unwrap(),
    ]));
    run_ok(bin().args([
        "--config", cfg, "mcmc",
        "--measurements", test.join("dataset.csv").to_str().unwrap(),
        "--out", chains.to_str().unwrap(),
    ]));

    let out = tmp.path().join("sweep");
    run_ok(bin().args([
        "--config", cfg, "sweep", "--kind", "beta",
        "--grid", "0.6:1.8:0.3",
        "--data", data.join("dataset.csv").to_str().unwrap(),
        "--measurements", test.join("dataset.csv").to_str().unwrap(),
        "--mcmc-dir", chains.to_str().unwrap(),
        "--repeats", "1",
        "--out", out.to_str().unwrap(),
    ]));
    let csv = fs::read_to_string(out.join("sweep_hyper.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len() - 1, 5, "0.6:1.8:0.3 must produce 5 grid points:\n{csv}");
    let first: f64 = rows[1].split(',').next().unwrap().parse().unwrap();
    let last: f64 = rows[5].split(',').next().unwrap().parse().unwrap();
    assert!((first - 0.6).abs() < 1e-12);
    assert!((last - 1.8).abs() < 1e-12);
}

#[test]
fn infer_rejects_model_measurement_mismatch() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path());
    let cfg = config.to_str().unwrap();
    let data = tmp.path().join("data");
    let model_dir = tmp.path().join("model");
    run_ok(bin().args(["--config", cfg, "simulate", "--size", "10", "--out", data.to_str().unwrap()]));
    run_ok(bin().args([
        "--config", cfg, "train", "--variant", "vanilla",
        "--data", data.join("dataset.csv").to_str().unwrap(),
        "--out", model_dir.to_str().unwrap(),
    ]));

    // a measurements file with the wrong frame count
    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "dvr,k2_per_min,r1,noise_sigma,y_1,y_2\n1.0,0.0006,0.74,1e-4,0.1,0.2\n").unwrap();
    let code = exit_code(bin().args([
        "--config", cfg, "infer",
        "--model", model_dir.join("model.json").to_str().unwrap(),
        "--measurements", bad.to_str().unwrap(),
        "--samples", "10",
        "--out", tmp.path().join("inf").to_str().unwrap(),
    ]));
    assert_eq!(code, 2);
}
