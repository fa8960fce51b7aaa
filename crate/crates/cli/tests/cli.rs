use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_holdout");

fn holdout(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_BACKTRACE", "0")
        .env_remove("HOLDOUT_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn sample_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn write_config(dir: &TempDir, name: &str, text: &str) -> String {
    let path = dir.path().join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path.as_ref())
        .unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&read(dir.join("summary.json"))).unwrap()
}

const MIXTURE: &str = r#"
variant = "central_sgd"
seed = 4
repetitions = 3

[dataset]
kind = "gaussian_mixture"
m = 3000
d = 20
num_classes = 5
eval = 1000
separation = 0.5
noise = 1.0

[model]
kind = "softmax_regression"

[protocol]
T = 60
n = 30
N_p = 12
f = 0.3
actual_f = 0.3
B = 10
eta = { constant = 0.5 }
"#;

const QUADRATIC: &str = r#"
variant = "holdout"
seed = 6
repetitions = 3

[dataset]
kind = "quadratic_noise"
m = 10000
d = 10
noise = 3.0

[model]
kind = "quadratic"
alpha = 1.0
beta = 4.0
rotation_seed = 6

[protocol]
T = 300
n = 10
N_p = 6
N_c = 6
f = 0.3
B = 1
m_c = 100
eta = { inverse = 1.0 }
"#;

#[test]
fn run_writes_one_row_per_epoch() {
    let out = TempDir::new().unwrap();
    let config = sample_config("mnist-shape.toml");
    let o = holdout(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out-dir",
        out.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let mut reader = csv::Reader::from_path(out.path().join("rep-0.csv")).unwrap();
    let header: Vec<String> = reader
        .headers()
        .unwrap()
        .iter()
        .map(str::to_owned)
        .collect();
    assert_eq!(
        header,
        [
            "t",
            "train_loss",
            "test_loss",
            "test_acc",
            "uc_size",
            "byz_in_uc",
            "gamma_used",
            "messages_sent"
        ]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 100);
    for (t, row) in rows.iter().enumerate() {
        assert_eq!(row[0].parse::<usize>().unwrap(), t + 1);
        let acc: f64 = row[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        let uc: usize = row[4].parse().unwrap();
        assert!((1..=30).contains(&uc));
        // N_p + 2 N_c
        assert_eq!(&row[7], "90");
    }

    let s = summary(out.path());
    assert_eq!(s["variant"], "holdout");
    assert_eq!(s["config"]["protocol"]["N_p"], 30);
    assert_eq!(s["repetitions"].as_array().unwrap().len(), 1);
}

#[test]
fn missing_field_is_named() {
    let dir = TempDir::new().unwrap();
    let text = read(sample_config("mnist-shape.toml")).replace("N_p = 30\n", "");
    let config = write_config(&dir, "bad.toml", &text);
    let o = holdout(&[
        "run",
        "--config",
        &config,
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("N_p"), "{}", stderr(&o));
}

#[test]
fn unknown_field_is_rejected() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        &dir,
        "bad.toml",
        &MIXTURE.replace("B = 10", "B = 10\nbatch = 3"),
    );
    let o = holdout(&[
        "run",
        "--config",
        &config,
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("batch"), "{}", stderr(&o));
}

#[test]
fn decentralized_rejects_f_of_one_third() {
    let dir = TempDir::new().unwrap();
    let text = read(sample_config("decentralized.toml"));
    let text = text
        .lines()
        .map(|l| if l.starts_with("f = ") { "f = 0.34" } else { l })
        .collect::<Vec<_>>()
        .join("\n");
    let config = write_config(&dir, "bad.toml", &text);
    let o = holdout(&[
        "run",
        "--config",
        &config,
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(
        stderr(&o).contains("f: must lie in [0, 1/3)"),
        "{}",
        stderr(&o)
    );
    assert!(!dir.path().join("rep-0.csv").exists());
}

#[test]
fn same_seed_same_bytes() {
    let dir = TempDir::new().unwrap();
    let config = write_config(&dir, "mix.toml", MIXTURE);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = holdout(&[
            "run",
            "--config",
            &config,
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for r in 0..3 {
        let file = format!("rep-{r}.csv");
        assert_eq!(read(a.join(&file)), read(b.join(&file)));
    }

    let c = dir.path().join("c");
    let o = holdout(&[
        "run",
        "--config",
        &config,
        "--seed",
        "99",
        "--out-dir",
        c.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_ne!(read(a.join("rep-0.csv")), read(c.join("rep-0.csv")));
}

#[test]
fn out_dir_from_environment() {
    let dir = TempDir::new().unwrap();
    let config = write_config(&dir, "mix.toml", MIXTURE);
    let out = dir.path().join("from-env");
    let o = Command::new(BIN)
        .args(["run", "--config", &config])
        .env("HOLDOUT_OUT_DIR", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("summary.json").exists());
}

#[test]
fn bound_prints_committee_size() {
    let o = holdout(&[
        "bound",
        "-T",
        "100",
        "--delta",
        "0.01",
        "--f",
        "0.3333333333333333",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("= 277 "), "{}", stdout(&o));

    let o = holdout(&["bound", "-T", "1", "--delta", "0.5", "--f", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("= 2 "), "{}", stdout(&o));

    let o = holdout(&["bound", "-T", "1", "--delta", "0.5", "--f", "0.5"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("diverges"), "{}", stderr(&o));
}

#[test]
fn sweep_point_matches_plain_run() {
    let dir = TempDir::new().unwrap();
    let config = write_config(&dir, "mix.toml", MIXTURE);
    let sweep = dir.path().join("sweep");
    let o = holdout(&[
        "sweep",
        "--config",
        &config,
        "--axis",
        "f",
        "--values",
        "0",
        "--out-dir",
        sweep.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let plain = write_config(
        &dir,
        "f0.toml",
        &MIXTURE.replace("\nf = 0.3\n", "\nf = 0.0\n"),
    );
    let run = dir.path().join("run");
    let o = holdout(&[
        "run",
        "--config",
        &plain,
        "--out-dir",
        run.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    for r in 0..3 {
        let file = format!("rep-{r}.csv");
        assert_eq!(read(sweep.join("f=0").join(&file)), read(run.join(&file)));
    }
    assert!(sweep.join("sweep.csv").exists());
}

#[test]
fn gamma_zero_tracks_the_unattacked_run() {
    let dir = TempDir::new().unwrap();
    let config = write_config(&dir, "mix.toml", MIXTURE);
    let sweep = dir.path().join("sweep");
    let o = holdout(&[
        "sweep",
        "--config",
        &config,
        "--axis",
        "gamma",
        "--values",
        "0,1.75",
        "--out-dir",
        sweep.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    let o = holdout(&[
        "run",
        "--config",
        &config,
        "--out-dir",
        run.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let loss = |dir: &Path| summary(dir)["mean"]["final_test_loss"].as_f64().unwrap();
    let none = loss(&run);
    let zero = loss(&sweep.join("gamma=0"));
    let attacked = loss(&sweep.join("gamma=1.75"));
    // μ + 0·σ moves the average only by sampling noise.
    assert!((zero - none).abs() / none < 0.05, "{zero} vs {none}");
    assert!(attacked > zero, "{attacked} vs {zero}");

    let table = read(sweep.join("sweep.csv"));
    let mut lines = table.lines();
    assert!(lines.next().unwrap().starts_with("gamma,"));
    assert!(lines.next().unwrap().starts_with("0,"));
    assert!(lines.next().unwrap().starts_with("1.75,"));
}

#[test]
fn larger_holdout_batches_lower_the_plateau() {
    let dir = TempDir::new().unwrap();
    let config = write_config(&dir, "q.toml", QUADRATIC);
    let sweep = dir.path().join("sweep");
    let o = holdout(&[
        "sweep",
        "--config",
        &config,
        "--axis",
        "m_c",
        "--values",
        "10,100,1000",
        "--out-dir",
        sweep.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_str(&read(sweep.join("sweep.json"))).unwrap();
    let plateaus: Vec<f64> = json["points"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["mean"]["plateau_excess_loss"].as_f64().unwrap())
        .collect();
    assert_eq!(plateaus.len(), 3);
    assert!(plateaus.windows(2).all(|w| w[1] < w[0]), "{plateaus:?}");
}

#[test]
fn sweep_rejects_bad_points_before_running() {
    let dir = TempDir::new().unwrap();
    let config = write_config(&dir, "q.toml", QUADRATIC);
    let sweep = dir.path().join("sweep");
    let o = holdout(&[
        "sweep",
        "--config",
        &config,
        "--axis",
        "N_p",
        "--values",
        "4,2.5",
        "--out-dir",
        sweep.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("N_p"), "{}", stderr(&o));
    assert!(!sweep.join("N_p=4").exists());
}

#[test]
fn verify_reports_failures_through_exit_code() {
    let o = holdout(&["verify", "--suite", "fast", "--only", "1,4"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert_eq!(stdout(&o).matches("PASS").count(), 2, "{}", stdout(&o));

    let o = holdout(&[
        "verify",
        "--suite",
        "fast",
        "--only",
        "1",
        "--inject-threshold-fault",
    ]);
    assert!(!o.status.success());
    assert!(stdout(&o).contains("FAIL"), "{}", stdout(&o));
}
