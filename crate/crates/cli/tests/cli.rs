use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn art(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_art"))
        .args(args)
        .output()
        .expect("run art")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("exp.cfg");
    fs::write(&path, body).unwrap();
    path.display().to_string()
}

const SMALL: &str =
    "# small rare-event sweep\nbeta_infinity = 2\nn = 60\nk = 40\nj0 = 2\nm = 5\nr = 2\nseed = 3\n";

#[test]
fn oracle_prints_name_tab_value_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "level = 90\nbeta_infinity = 50\n");
    let out = art(&["oracle", "--config", &cfg]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let p: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("p_star_quad\t"))
        .unwrap()
        .parse()
        .unwrap();
    assert!((p / 3.361784703781468e-5 - 1.0).abs() < 1e-8);
    assert!(text.lines().all(|l| l.split('\t').count() == 2));
}

#[test]
fn rerun_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let out = art(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        outputs.push(
            [
                "metrics.csv",
                "replicates.csv",
                "trace_r0.tsv",
                "trace_r1.tsv",
            ]
            .map(|f| fs::read(out_dir.join(f)).unwrap()),
        );
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("base");
    let out = art(&[
        "run",
        "--config",
        &cfg,
        "--mode",
        "baseline",
        "--seed",
        "11",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(metrics.lines().skip(1).all(|l| l.starts_with("baseline,")));
    let info = fs::read_to_string(out_dir.join("run_info.txt")).unwrap();
    assert!(info.contains("seed\t11\n") && info.contains("mode\tbaseline\n"));
    assert!(!out_dir.join("trace_r0.tsv").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for body in ["colour = blue\n", "r = 0\n", "gain = -1\n"] {
        let cfg = write_config(dir.path(), body);
        let out = art(&["run", "--config", &cfg]);
        assert_eq!(out.status.code(), Some(2), "{body}");
    }
    let missing = dir.path().join("nope.cfg");
    let out = art(&["oracle", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn all_replicates_failing_exits_with_three() {
    // the target temperature is never reached in two iterations, so no
    // replicate accumulates estimator terms
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "n = 30\nk = 2\nj0 = 1\nm = 2\nr = 2\n");
    let out_dir = dir.path().join("o");
    let out = art(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let rows = fs::read_to_string(out_dir.join("replicates.csv")).unwrap();
    assert_eq!(rows.lines().filter(|l| l.contains("failed")).count(), 4);
}
