use std::path::Path;
use std::process::{Command, Output};

fn hlasdi(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hlasdi"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
data_dir = "data"
run_dir = "run"

[problem]
kind = "burgers1d"

[training]
architecture = "1001-8-3"
loss_weights = [1.0, 1.0, 0.0, 0.2, 1.0, 1.0, 1e-4]
iterations = 6
sampling_frequency = 2
grid = [3, 2]
seed = 3
frame_stride = 50
n_samples = 4
"#;

#[test]
fn stencil_first_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let o = hlasdi(&["stencil", "first", "--a", "1", "--b", "1"], dir.path());
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().next().unwrap(), "(-1.5, 2, -0.5)");
}

#[test]
fn stencil_second_central_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let o = hlasdi(&["stencil", "second", "--a", "1", "--b", "1", "--c", "1", "--mode", "mixed"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with('('));
}

#[test]
fn bad_spacing_reports_category() {
    let dir = tempfile::tempdir().unwrap();
    let o = hlasdi(&["stencil", "first", "--a", "-1", "--b", "1"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("[stencil]"));
}

#[test]
fn malformed_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "data_dir = 3\n").unwrap();
    let o = hlasdi(&["train", "--config", "c.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("[config]"), "{}", stderr(&o));

    std::fs::write(dir.path().join("d.toml"), TINY.replace("sampling_frequency = 2", "sampling_frequency = 4")).unwrap();
    let o = hlasdi(&["train", "--config", "d.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sampling frequency"));
}

#[test]
fn train_without_dataset_fails() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), TINY).unwrap();
    let o = hlasdi(&["train", "--config", "c.toml"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("[dataset]"));
}

#[test]
fn fom_train_eval_infer_round() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("c.toml"), TINY).unwrap();

    let o = hlasdi(&["fom", "--config", "c.toml"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(p.join("data/index.json").exists());

    let o = hlasdi(&["train", "--config", "c.toml"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = std::fs::read(p.join("run/checkpoint.bin")).unwrap();
    let o = hlasdi(&["train", "--config", "c.toml"], p);
    assert!(o.status.success());
    assert_eq!(first, std::fs::read(p.join("run/checkpoint.bin")).unwrap());

    let loss = std::fs::read_to_string(p.join("run/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 6);
    assert!(loss.starts_with("epoch,recon,"));
    // Three episodes, two of which add a parameter.
    let episodes = std::fs::read_to_string(p.join("run/episodes.csv")).unwrap();
    assert_eq!(episodes.lines().count(), 1 + 3);

    let o = hlasdi(&["eval", "--config", "c.toml"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(p.join("run/heatmap.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "theta1,theta2,eps_u,eps_v,is_training");
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 6);
    // Four corners plus two greedy picks cover the whole 3x2 grid.
    assert!(rows.iter().all(|r| r[4] == "1"));
    assert!(rows.iter().all(|r| r[2].parse::<f64>().unwrap() >= 0.0));

    let o = hlasdi(&["infer", "--config", "c.toml", "--theta", "0.5,0.22"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(p.join("run/prediction.bin").exists());
    assert!(stdout(&o).contains("channel 1: relative error"));

    let o = hlasdi(&["infer", "--config", "c.toml", "--theta", "0.47,0.19", "--out", "x.bin"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("no reference trajectory"));
}

#[test]
fn seed_override_changes_weights() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("c.toml"), TINY.replace("iterations = 6", "iterations = 2")).unwrap();
    assert!(hlasdi(&["fom", "--config", "c.toml"], p).status.success());
    assert!(hlasdi(&["train", "--config", "c.toml"], p).status.success());
    let a = std::fs::read(p.join("run/checkpoint.bin")).unwrap();
    assert!(hlasdi(&["train", "--config", "c.toml", "--seed", "4"], p).status.success());
    let b = std::fs::read(p.join("run/checkpoint.bin")).unwrap();
    assert_ne!(a, b);
}
