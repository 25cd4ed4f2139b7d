use std::fs;
use std::path::Path;

use vio_core::estimator::{estimate as run_estimator, EstimatorOptions};
use vio_core::montecarlo::run_campaign;
use vio_core::simulator::{
    fmt_f64, read_dataset, simulate as run_simulator, write_csv, write_dataset, DatasetError, SimConfig,
};
use vio_core::state::NavState;
use vio_core::studies::{
    integration_error_sweep, jacobian_suite, kl_pitch_sweep, strictly_increasing, JacobianReport, JacobianSource,
    KlStudyConfig,
};

use crate::manifest::RunManifest;
use crate::CliError;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| {
        CliError::Data(DatasetError::Io {
            path: dir.to_path_buf(),
            source,
        })
    })
}

/// Loads the configuration, returning its verbatim text when read from a file.
fn load_config(path: Option<&Path>) -> Result<(SimConfig, Option<String>), CliError> {
    match path {
        None => Ok((SimConfig::default(), None)),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            Ok((SimConfig::from_toml_str(&text)?, Some(text)))
        }
    }
}

pub fn simulate(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let (mut cfg, mut text) = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
        // The file no longer describes the run; echo the resolved config instead.
        text = None;
    }
    let ds = run_simulator(&cfg)?;
    create_dir(out)?;
    write_dataset(out, &ds, text.as_deref())?;
    let mut m = RunManifest::new("simulate", out);
    m.config_path = config.map(|p| p.display().to_string());
    m.seeds = vec![cfg.seed];
    m.config = Some(cfg);
    m.finish(out, "ok")?;
    println!(
        "wrote {} keyframes, {} IMU samples, {} tracks to {}",
        ds.num_keyframes(),
        ds.imu.len(),
        ds.tracks.len(),
        out.display()
    );
    Ok(())
}

const STATE_COLUMNS: [&str; 23] = [
    "keyframe", "t", "r00", "r01", "r02", "r10", "r11", "r12", "r20", "r21", "r22", "px", "py", "pz", "vx", "vy",
    "vz", "bgx", "bgy", "bgz", "bax", "bay", "baz",
];

fn state_row(k: usize, t: f64, x: &NavState) -> Vec<String> {
    let mut row = vec![k.to_string(), fmt_f64(t)];
    let r = x.rotation.matrix();
    for i in 0..3 {
        for j in 0..3 {
            row.push(fmt_f64(r[(i, j)]));
        }
    }
    for v in [x.position, x.velocity, x.bias.gyro, x.bias.accel] {
        row.extend(v.iter().map(|c| fmt_f64(*c)));
    }
    row
}

pub fn estimate(dataset: &Path, out: &Path) -> Result<(), CliError> {
    let ds = read_dataset(dataset)?;
    create_dir(out)?;
    let mut m = RunManifest::new("estimate", out);
    m.config_path = Some(dataset.join("config.toml").display().to_string());
    m.seeds = vec![ds.config.seed];
    m.param("dataset", dataset.display());
    m.config = Some(ds.config.clone());

    let est = match run_estimator(&ds, &EstimatorOptions::default()) {
        Ok(e) => e,
        Err(e) => {
            m.finish(out, &format!("failed: {e}"))?;
            return Err(CliError::Solver(e.to_string()));
        }
    };
    write_csv(
        &out.join("estimate.csv"),
        &STATE_COLUMNS,
        est.states
            .iter()
            .enumerate()
            .map(|(k, x)| state_row(k, ds.keyframe_times[k], x)),
    )?;
    write_csv(
        &out.join("report.csv"),
        &["iteration", "cost"],
        est.report
            .cost_history
            .iter()
            .enumerate()
            .map(|(i, c)| vec![i.to_string(), fmt_f64(*c)]),
    )?;
    let mut header = vec!["keyframe".to_string(), "row".to_string()];
    header.extend((0..15).map(|c| format!("c{c}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(
        &out.join("marginals.csv"),
        &header,
        est.marginals.iter().enumerate().flat_map(|(k, cov)| {
            (0..15).map(move |r| {
                let mut row = vec![k.to_string(), r.to_string()];
                row.extend((0..15).map(|c| fmt_f64(cov[(r, c)])));
                row
            })
        }),
    )?;
    let n = ds.num_keyframes() as f64;
    let pos_rmse = (est
        .states
        .iter()
        .zip(&ds.ground_truth)
        .map(|(x, gt)| (x.position - gt.position).norm_squared())
        .sum::<f64>()
        / n)
        .sqrt();
    let rows = [
        ("iterations", est.report.iterations.to_string()),
        ("converged", est.report.converged.to_string()),
        ("initial_cost", fmt_f64(est.report.initial_cost)),
        ("final_cost", fmt_f64(est.report.final_cost)),
        ("skipped_vision_factors", est.report.skipped_vision.to_string()),
        ("position_rmse_m", fmt_f64(pos_rmse)),
    ];
    write_csv(
        &out.join("summary.csv"),
        &["metric", "value"],
        rows.iter().map(|(k, v)| vec![k.to_string(), v.clone()]),
    )?;
    let status = if est.report.converged { "ok" } else { "ok (not converged)" };
    m.finish(out, status)?;
    println!(
        "{} iterations, final cost {:.6e}, converged {}, position RMSE {:.4} m",
        est.report.iterations, est.report.final_cost, est.report.converged, pos_rmse
    );
    Ok(())
}

pub fn montecarlo(
    config: Option<&Path>,
    seed: Option<u64>,
    runs: usize,
    jobs: Option<usize>,
    out: &Path,
) -> Result<(), CliError> {
    if runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    if jobs == Some(0) {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let (mut cfg, _) = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    create_dir(out)?;
    let mut m = RunManifest::new("montecarlo", out);
    m.config_path = config.map(|p| p.display().to_string());
    m.seeds = (0..runs as u64).map(|k| cfg.seed.wrapping_add(k)).collect();
    m.param("runs", runs);
    m.param("jobs", jobs);
    m.config = Some(cfg.clone());

    let campaign = run_campaign(&cfg, runs, jobs, &EstimatorOptions::default())
        .map_err(|e| CliError::Solver(e.to_string()))?;
    let summary = match campaign.write_csvs(out) {
        Ok(s) => s,
        Err(e) => {
            m.finish(out, &format!("failed: {e}"))?;
            return Err(CliError::Solver(e.to_string()));
        }
    };
    println!(
        "{} runs, {} failed; NEES bounds [{:.3}, {:.3}], {:.1}% of keyframes above, {:.1}% below; bias within 3 sigma in {:.0}% of runs",
        summary.requested,
        summary.failed,
        summary.nees.lower,
        summary.nees.upper,
        100.0 * summary.nees.fraction_above,
        100.0 * summary.nees.fraction_below,
        100.0 * summary.bias_within_3sigma
    );
    if summary.failure_fraction() > 0.1 {
        m.finish(out, "failed: more than 10% of runs failed")?;
        return Err(CliError::Solver(format!("{} of {} runs failed", summary.failed, summary.requested)));
    }
    if !summary.nees.accepted {
        m.finish(out, "failed: NEES above the upper bound on more than 5% of keyframes")?;
        return Err(CliError::Acceptance("NEES consistency test rejected".into()));
    }
    println!("NEES verdict: accepted");
    m.finish(out, "ok")?;
    Ok(())
}

/// Renders the per-block table; the flag is true when every block passes.
pub fn render_jacobian_table(report: &JacobianReport, tol: f64) -> (String, bool) {
    let width = report.blocks.iter().map(|b| b.name.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{:<width$}  {:>12}  result\n", "block", "max rel err");
    for b in &report.blocks {
        let ok = b.max_rel_error <= tol;
        s.push_str(&format!(
            "{:<width$}  {:>12.3e}  {}\n",
            b.name,
            b.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        ));
    }
    (s, report.failures(tol).is_empty())
}

pub fn jacobian_check(seed: u64, tol: f64, configurations: usize, out: Option<&Path>) -> Result<(), CliError> {
    if configurations == 0 {
        return Err(CliError::Usage("--configurations must be at least 1".into()));
    }
    let report = jacobian_suite(seed, configurations, &JacobianSource::default());
    let (table, ok) = render_jacobian_table(&report, tol);
    print!("{table}");
    println!("{} configurations, tolerance {tol:e}", report.configurations);
    if let Some(dir) = out {
        create_dir(dir)?;
        write_csv(
            &dir.join("jacobians.csv"),
            &["block", "max_rel_error", "pass"],
            report
                .blocks
                .iter()
                .map(|b| vec![b.name.clone(), fmt_f64(b.max_rel_error), (b.max_rel_error <= tol).to_string()]),
        )?;
        let mut m = RunManifest::new("jacobian-check", dir);
        m.seeds = vec![seed];
        m.param("tol", tol);
        m.param("configurations", configurations);
        m.finish(dir, if ok { "ok" } else { "failed: tolerance exceeded" })?;
    }
    if ok {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures(tol).iter().map(|b| b.name.as_str()).collect();
        Err(CliError::Acceptance(format!("Jacobian blocks above tolerance: {}", names.join(", "))))
    }
}

pub const EULER_RATES: [f64; 5] = [1.0, 1.5, 2.0, 2.5, 3.0];
pub const EULER_DTS: [f64; 7] = [0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1];
pub const EULER_PITCHES: [f64; 9] = [0.0, 30.0, 60.0, 75.0, 80.0, 85.0, 87.0, 88.0, 89.0];

pub fn euler_study(seed: u64, out: &Path) -> Result<(), CliError> {
    create_dir(out)?;
    let total_time = 0.4;
    let axes = 20;
    let rows = integration_error_sweep(seed, &EULER_RATES, &EULER_DTS, total_time, axes)
        .map_err(|e| CliError::Solver(e.to_string()))?;
    write_csv(
        &out.join("integration_error.csv"),
        &["rate", "dt", "so3_error_rad", "euler_error_rad"],
        rows.iter()
            .map(|r| vec![fmt_f64(r.rate), fmt_f64(r.dt), fmt_f64(r.so3_error), fmt_f64(r.euler_error)]),
    )?;
    let kl_cfg = KlStudyConfig {
        seed,
        ..KlStudyConfig::default()
    };
    let kl = kl_pitch_sweep(&kl_cfg, &EULER_PITCHES).map_err(|e| CliError::Solver(e.to_string()))?;
    write_csv(
        &out.join("kl.csv"),
        &["max_pitch_deg", "kl_euler", "kl_so3"],
        kl.iter()
            .map(|r| vec![fmt_f64(r.max_pitch_deg), fmt_f64(r.kl_euler), fmt_f64(r.kl_so3)]),
    )?;

    let so3_max = rows.iter().map(|r| r.so3_error).fold(0.0, f64::max);
    let monotone = EULER_RATES.iter().all(|&w| {
        let e: Vec<f64> = rows.iter().filter(|r| r.rate == w).map(|r| r.euler_error).collect();
        strictly_increasing(&e)
    });
    let last = kl.last().expect("non-empty pitch sweep");
    let ratio = last.kl_euler / last.kl_so3;
    println!("SO(3) integration error max {so3_max:.2e} rad; Euler error increasing in dt: {monotone}");
    println!(
        "KL at {} deg: Euler {:.3e}, SO(3) {:.3e} (ratio {ratio:.1})",
        last.max_pitch_deg, last.kl_euler, last.kl_so3
    );

    let mut m = RunManifest::new("euler-study", out);
    m.seeds = vec![seed];
    m.param("total_time", total_time);
    m.param("axes_per_rate", axes);
    m.param("kl_duration", kl_cfg.duration);
    m.param("kl_rate", kl_cfg.rate);
    m.param("kl_gyro_noise_density", kl_cfg.gyro_noise_density);
    m.param("kl_samples", kl_cfg.samples);
    let ok = so3_max < 1e-9 && monotone && ratio >= 10.0;
    m.finish(out, if ok { "ok" } else { "failed: study expectations not met" })?;
    if ok {
        Ok(())
    } else {
        Err(CliError::Acceptance("Euler study expectations not met".into()))
    }
}
