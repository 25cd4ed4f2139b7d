use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vio_core::simulator::SimConfig;

fn vio(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vio"))
        .args(args)
        .env_remove("VIO_OUT")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn short_config(dir: &Path, noise_free: bool) -> String {
    let mut cfg = SimConfig::default();
    cfg.trajectory.duration = 8.0;
    cfg.trajectory.path_length = 16.0;
    cfg.noise_free = noise_free;
    let path = dir.join(if noise_free { "clean.toml" } else { "noisy.toml" });
    fs::write(&path, cfg.to_toml_string()).unwrap();
    path.to_str().unwrap().to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simulate_writes_layout_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_config(tmp.path(), false);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = vio(&["simulate", "--config", &cfg, "--out", p(dir)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["config.toml", "imu.csv", "keyframes.csv", "prior.csv", "tracks.csv", "landmarks.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    // The configuration file is echoed verbatim.
    assert_eq!(fs::read_to_string(a.join("config.toml")).unwrap(), fs::read_to_string(&cfg).unwrap());
    // 8 s at 2.5 Hz: 20 keyframes plus the header row.
    assert_eq!(fs::read_to_string(a.join("keyframes.csv")).unwrap().lines().count(), 21);
    assert!(fs::read_to_string(a.join("manifest.toml")).unwrap().contains("seeds = [1]"));
}

#[test]
fn default_config_gives_150_keyframes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ds");
    let o = vio(&["simulate", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("keyframes.csv")).unwrap().lines().count(), 151);
}

#[test]
fn missing_noise_field_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let text: String = SimConfig::default()
        .to_toml_string()
        .lines()
        .filter(|l| !l.starts_with("gyro_bias_density"))
        .map(|l| format!("{l}\n"))
        .collect();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, text).unwrap();
    let o = vio(&["simulate", "--config", p(&cfg), "--out", p(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("gyro_bias_density"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(vio(&["simulate"]).status.code(), Some(1));
    assert_eq!(vio(&["no-such-command"]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let o = vio(&["montecarlo", "--runs", "0", "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(vio(&["--help"]).status.success());
}

#[test]
fn output_dir_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_config(tmp.path(), false);
    let out = tmp.path().join("env_out");
    let o = Command::new(env!("CARGO_BIN_EXE_vio"))
        .args(["simulate", "--config", &cfg])
        .env("VIO_OUT", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("imu.csv").exists());
}

#[test]
fn estimate_noise_free_dataset_reaches_zero_cost() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_config(tmp.path(), true);
    let ds = tmp.path().join("ds");
    let out = tmp.path().join("est");
    assert!(vio(&["simulate", "--config", &cfg, "--out", p(&ds)]).status.success());
    let o = vio(&["estimate", p(&ds), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let final_cost: f64 = summary
        .lines()
        .find_map(|l| l.strip_prefix("final_cost,"))
        .unwrap()
        .parse()
        .unwrap();
    assert!(final_cost < 1e-9, "{final_cost}");
    assert_eq!(fs::read_to_string(out.join("estimate.csv")).unwrap().lines().count(), 21);
    assert_eq!(fs::read_to_string(out.join("marginals.csv")).unwrap().lines().count(), 1 + 20 * 15);
    assert!(fs::read_to_string(out.join("report.csv")).unwrap().starts_with("iteration,cost\n"));
}

#[test]
fn estimate_default_noise_converges() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_config(tmp.path(), false);
    let ds = tmp.path().join("ds");
    let out = tmp.path().join("est");
    assert!(vio(&["simulate", "--config", &cfg, "--out", p(&ds)]).status.success());
    let o = vio(&["estimate", p(&ds), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.contains("converged,true"));
    let iterations = fs::read_to_string(out.join("report.csv")).unwrap().lines().count() - 2;
    assert!(iterations <= 50);
}

#[test]
fn corrupted_csv_reports_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_config(tmp.path(), false);
    let ds = tmp.path().join("ds");
    assert!(vio(&["simulate", "--config", &cfg, "--out", p(&ds)]).status.success());
    let imu = fs::read_to_string(ds.join("imu.csv")).unwrap();
    let mut lines: Vec<String> = imu.lines().map(String::from).collect();
    lines[9] = lines[9].replacen(',', ",oops", 1);
    fs::write(ds.join("imu.csv"), lines.join("\n") + "\n").unwrap();
    let o = vio(&["estimate", p(&ds), "--out", p(&tmp.path().join("est"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("imu.csv:10"), "{}", stderr(&o));
}

#[test]
fn montecarlo_writes_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_config(tmp.path(), false);
    let out = tmp.path().join("mc");
    let o = vio(&["montecarlo", "--config", &cfg, "--runs", "2", "--jobs", "1", "--out", p(&out)]);
    assert!(matches!(o.status.code(), Some(0) | Some(4)), "{}", stderr(&o));
    for f in ["nees.csv", "rmse.csv", "bias_tracking.csv", "summary.csv", "failures.csv", "manifest.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(out.join("nees.csv")).unwrap().lines().count(), 21);
    assert_eq!(fs::read_to_string(out.join("bias_tracking.csv")).unwrap().lines().count(), 3);
    assert!(fs::read_to_string(out.join("manifest.toml")).unwrap().contains("seeds = [1, 2]"));
}

#[test]
fn jacobian_check_passes_and_is_deterministic() {
    let a = vio(&["jacobian-check", "--seed", "3", "--configurations", "20"]);
    let b = vio(&["jacobian-check", "--seed", "3", "--configurations", "20"]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let strict = vio(&["jacobian-check", "--tol", "1e-14", "--configurations", "2"]);
    assert_eq!(strict.status.code(), Some(4));
    assert!(stderr(&strict).contains("r_dR/dphi_i"));
}

#[test]
fn euler_study_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vio(&["euler-study", "--out", p(tmp.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(tmp.path().join("integration_error.csv")).unwrap();
    for line in text.lines().skip(1) {
        let so3: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(so3 < 1e-9);
    }
    let kl = fs::read_to_string(tmp.path().join("kl.csv")).unwrap();
    let last: Vec<f64> = kl.lines().last().unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(last[0], 89.0);
    assert!(last[1] > 10.0 * last[2]);
}
