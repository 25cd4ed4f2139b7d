//! Numerical studies backing the library's claims: finite-difference checks of
//! the analytic Jacobians, sampled checks of the preintegration covariance and of
//! first-order bias correction, and the Euler-angle versus SO(3) comparison.

use nalgebra::{DMatrix, SMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::evaluation::{
    euler_covariance_step, euler_integrate, euler_rate_matrix, euler_to_rotation, symmetric_kl, kl_gaussian, EvalError,
};
use crate::factors::{imu_residual, imu_residual_jacobians, FactorError, ImuJacobians, Vector9};
use crate::liealg::{exp_so3, log_so3, Mat3, Rotation, Vec3};
use crate::preintegration::{
    covariance_batch_oracle, default_gravity, ImuBias, ImuNoiseModel, ImuSample, Mat9, PreintegratedImu,
    PreintegrationError,
};
use crate::state::{NavState, StateTangent};

fn uniform3(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
    Vec3::from_fn(|_, _| rng.random_range(-s..s))
}

fn normal3(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::from_fn(|_, _| StandardNormal.sample(rng))
}

/// A random but smooth stream: a constant rate and specific force plus a small
/// per-sample wobble.
fn random_stream(rng: &mut ChaCha8Rng, n: usize, dt: f64) -> Vec<(ImuSample, f64)> {
    let w0 = uniform3(rng, 1.0);
    let a0 = uniform3(rng, 2.0) - default_gravity();
    (0..n)
        .map(|k| {
            let s = ImuSample::new(k as f64 * dt, w0 + uniform3(rng, 0.2), a0 + uniform3(rng, 0.5));
            (s, dt)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Jacobian suite

/// Bias-correction Jacobians `[∂ΔR/∂bg, ∂Δv/∂bg, ∂Δv/∂ba, ∂Δp/∂bg, ∂Δp/∂ba]`.
pub type BiasJacobians = [Mat3; 5];

/// The analytic Jacobians under test.
#[derive(Clone, Copy)]
pub struct JacobianSource {
    pub residual: fn(&NavState, &NavState, &PreintegratedImu, &Vec3) -> Result<ImuJacobians, FactorError>,
    pub bias: fn(&PreintegratedImu) -> BiasJacobians,
}

fn library_bias_jacobians(pre: &PreintegratedImu) -> BiasJacobians {
    [pre.j_dr_dbg, pre.j_dv_dbg, pre.j_dv_dba, pre.j_dp_dbg, pre.j_dp_dba]
}

impl Default for JacobianSource {
    fn default() -> Self {
        JacobianSource {
            residual: imu_residual_jacobians,
            bias: library_bias_jacobians,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianBlock {
    pub name: String,
    /// Largest `‖J − J_fd‖_F / max(‖J_fd‖_F, 1)` over all configurations.
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianReport {
    pub configurations: usize,
    pub blocks: Vec<JacobianBlock>,
}

impl JacobianReport {
    pub fn failures(&self, tol: f64) -> Vec<&JacobianBlock> {
        self.blocks.iter().filter(|b| !(b.max_rel_error <= tol)).collect()
    }

    pub fn max_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }
}

const RESIDUAL_ROWS: [&str; 3] = ["r_dR", "r_dv", "r_dp"];
const STATE_SEGMENTS: [&str; 5] = ["phi", "p", "v", "bg", "ba"];
const BIAS_BLOCKS: [&str; 5] = ["dR/dbg", "dv/dbg", "dv/dba", "dp/dbg", "dp/dba"];

fn rel_error(analytic: &DMatrix<f64>, fd: &DMatrix<f64>) -> f64 {
    let e = (analytic - fd).norm() / fd.norm().max(1.0);
    if e.is_finite() {
        e
    } else {
        f64::INFINITY
    }
}

/// Compares the analytic IMU-residual Jacobians (both states, all five tangent
/// segments) and the five bias-correction Jacobians with central finite
/// differences at `configurations` random points.
pub fn jacobian_suite(seed: u64, configurations: usize, source: &JacobianSource) -> JacobianReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = ImuNoiseModel::default();
    let g = default_gravity();
    let mut names = Vec::new();
    for state in ["i", "j"] {
        for row in RESIDUAL_ROWS {
            for seg in STATE_SEGMENTS {
                names.push(format!("{row}/d{seg}_{state}"));
            }
        }
    }
    names.extend(BIAS_BLOCKS.iter().map(|s| s.to_string()));
    let mut worst = vec![0.0f64; names.len()];

    for _ in 0..configurations {
        let stream = random_stream(&mut rng, 50, 0.005);
        let bias_lin = ImuBias::new(uniform3(&mut rng, 0.05), uniform3(&mut rng, 0.2));
        let pre = PreintegratedImu::from_samples(&stream, bias_lin, &noise).expect("valid stream");
        let xi = NavState::new(
            exp_so3(&uniform3(&mut rng, 2.0)),
            uniform3(&mut rng, 5.0),
            uniform3(&mut rng, 2.0),
            bias_lin + ImuBias::new(uniform3(&mut rng, 0.05), uniform3(&mut rng, 0.1)),
        );
        let xj = pre
            .predict(&xi, &g)
            .retract(&StateTangent::from_fn(|_, _| rng.random_range(-0.2..0.2)));

        let mut slot = 0;
        match (source.residual)(&xi, &xj, &pre, &g) {
            Ok(jac) => {
                let h = 1e-6;
                for (which, analytic) in [(0, jac.wrt_i), (1, jac.wrt_j)] {
                    let mut fd = SMatrix::<f64, 9, 15>::zeros();
                    for c in 0..15 {
                        let mut d = StateTangent::zeros();
                        d[c] = h;
                        let eval = |d: &StateTangent| -> Vector9 {
                            if which == 0 {
                                imu_residual(&xi.retract(d), &xj, &pre, &g)
                            } else {
                                imu_residual(&xi, &xj.retract(d), &pre, &g)
                            }
                        };
                        fd.set_column(c, &((eval(&d) - eval(&-d)) / (2.0 * h)));
                    }
                    for r in 0..3 {
                        for s in 0..5 {
                            let a = DMatrix::from_iterator(3, 3, analytic.fixed_view::<3, 3>(3 * r, 3 * s).iter().copied());
                            let f = DMatrix::from_iterator(3, 3, fd.fixed_view::<3, 3>(3 * r, 3 * s).iter().copied());
                            worst[slot] = worst[slot].max(rel_error(&a, &f));
                            slot += 1;
                        }
                    }
                }
            }
            Err(_) => {
                for w in worst.iter_mut().take(30) {
                    *w = f64::INFINITY;
                }
                slot = 30;
            }
        }

        // Bias Jacobians against re-integration at a shifted linearization point.
        let analytic = (source.bias)(&pre);
        let reint = |db: &ImuBias| {
            PreintegratedImu::from_samples(&stream, bias_lin + *db, &noise).expect("valid stream")
        };
        let h = 1e-6;
        let mut fd = [Mat3::zeros(); 5];
        for c in 0..6 {
            let mut dv = nalgebra::Vector6::zeros();
            dv[c] = h;
            let db = ImuBias::new(dv.fixed_rows::<3>(0).into(), dv.fixed_rows::<3>(3).into());
            let plus = reint(&db);
            let minus = reint(&(ImuBias::zero() - db));
            let d_rot = (log_so3(&(pre.delta_r.transpose() * plus.delta_r))
                - log_so3(&(pre.delta_r.transpose() * minus.delta_r)))
                / (2.0 * h);
            let d_v = (plus.delta_v - minus.delta_v) / (2.0 * h);
            let d_p = (plus.delta_p - minus.delta_p) / (2.0 * h);
            if c < 3 {
                fd[0].set_column(c, &d_rot);
                fd[1].set_column(c, &d_v);
                fd[3].set_column(c, &d_p);
            } else {
                fd[2].set_column(c - 3, &d_v);
                fd[4].set_column(c - 3, &d_p);
            }
        }
        for k in 0..5 {
            let a = DMatrix::from_iterator(3, 3, analytic[k].iter().copied());
            let f = DMatrix::from_iterator(3, 3, fd[k].iter().copied());
            worst[slot + k] = worst[slot + k].max(rel_error(&a, &f));
        }
    }

    JacobianReport {
        configurations,
        blocks: names
            .into_iter()
            .zip(worst)
            .map(|(name, max_rel_error)| JacobianBlock { name, max_rel_error })
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Covariance fidelity

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceFidelity {
    /// `‖Σ_iter − Σ_batch‖_F / ‖Σ_batch‖_F`.
    pub batch_rel_error: f64,
    /// Symmetric KL between the propagated and the sampled covariance.
    pub symmetric_kl: f64,
    pub samples: usize,
    pub propagated: Mat9,
    pub sampled: Mat9,
}

/// Propagates the covariance of a `duration`-second stream at `rate` Hz and
/// compares it against the batch oracle and against the sample covariance of
/// `samples` noisy re-integrations.
pub fn covariance_fidelity(
    seed: u64,
    duration: f64,
    rate: f64,
    samples: usize,
    noise: &ImuNoiseModel,
) -> Result<CovarianceFidelity, PreintegrationError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 1.0 / rate;
    let n = (duration * rate).round() as usize;
    let stream = random_stream(&mut rng, n, dt);
    let bias = ImuBias::zero();
    let pre = PreintegratedImu::from_samples(&stream, bias, noise)?;
    let batch = covariance_batch_oracle(&stream, &bias, noise)?;
    let batch_rel_error = (pre.cov - batch).norm() / batch.norm();

    let sg = noise.gyro_noise_density / dt.sqrt();
    let sa = noise.accel_noise_density / dt.sqrt();
    let errors: Vec<Vector9> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1 + s as u64));
            let (mut r, mut v, mut p) = (Rotation::identity(), Vec3::zeros(), Vec3::zeros());
            for (sample, dt) in &stream {
                let w = sample.gyro + normal3(&mut rng) * sg;
                let a = sample.accel + normal3(&mut rng) * sa;
                p += v * *dt + r.rotate(&a) * (0.5 * dt * dt);
                v += r.rotate(&a) * *dt;
                r = r * exp_so3(&(w * *dt));
            }
            let mut e = Vector9::zeros();
            e.fixed_rows_mut::<3>(0).copy_from(&log_so3(&(pre.delta_r.transpose() * r)));
            e.fixed_rows_mut::<3>(3).copy_from(&(v - pre.delta_v));
            e.fixed_rows_mut::<3>(6).copy_from(&(p - pre.delta_p));
            e
        })
        .collect();
    let sampled = sample_covariance(&errors);
    let to_dyn = |m: &Mat9| DMatrix::from_column_slice(9, 9, m.as_slice());
    let symmetric_kl = symmetric_kl(&to_dyn(&pre.cov), &to_dyn(&sampled)).unwrap_or(f64::INFINITY);
    Ok(CovarianceFidelity {
        batch_rel_error,
        symmetric_kl,
        samples,
        propagated: pre.cov,
        sampled,
    })
}

fn sample_covariance<const N: usize>(xs: &[SMatrix<f64, N, 1>]) -> SMatrix<f64, N, N> {
    let n = xs.len() as f64;
    let mean = xs.iter().fold(SMatrix::<f64, N, 1>::zeros(), |a, x| a + x) / n;
    let mut c = SMatrix::<f64, N, N>::zeros();
    for x in xs {
        let d = x - mean;
        c += d * d.transpose();
    }
    c / (n - 1.0)
}

// ---------------------------------------------------------------------------
// First-order bias correction

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasCorrectionRow {
    /// Norm of the 6-vector bias perturbation.
    pub magnitude: f64,
    pub mean_rotation_error: f64,
    pub max_rotation_error: f64,
    pub mean_velocity_error: f64,
    pub mean_position_error: f64,
}

/// Errors of the first-order corrected deltas against re-integration with the
/// perturbed bias, over `streams` random streams of `len` samples. Every stream
/// uses one random perturbation direction scaled to each of `magnitudes`.
pub fn bias_correction_study(
    seed: u64,
    streams: usize,
    len: usize,
    dt: f64,
    magnitudes: &[f64],
) -> Vec<BiasCorrectionRow> {
    let noise = ImuNoiseModel::default();
    // errors[stream][magnitude] = (rot, vel, pos)
    let errors: Vec<Vec<(f64, f64, f64)>> = (0..streams)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s as u64));
            let stream = random_stream(&mut rng, len, dt);
            let bias_lin = ImuBias::new(uniform3(&mut rng, 0.05), uniform3(&mut rng, 0.2));
            let pre = PreintegratedImu::from_samples(&stream, bias_lin, &noise).expect("valid stream");
            let dir = nalgebra::Vector6::from_fn(|_, _| StandardNormal.sample(&mut rng)).normalize();
            magnitudes
                .iter()
                .map(|&m| {
                    let d = dir * m;
                    let db = ImuBias::new(d.fixed_rows::<3>(0).into(), d.fixed_rows::<3>(3).into());
                    let (r, v, p) = pre.bias_corrected_delta(&(bias_lin + db));
                    let exact = PreintegratedImu::from_samples(&stream, bias_lin + db, &noise).expect("valid stream");
                    (
                        log_so3(&(r.transpose() * exact.delta_r)).norm(),
                        (v - exact.delta_v).norm(),
                        (p - exact.delta_p).norm(),
                    )
                })
                .collect()
        })
        .collect();
    let n = streams as f64;
    magnitudes
        .iter()
        .enumerate()
        .map(|(k, &magnitude)| BiasCorrectionRow {
            magnitude,
            mean_rotation_error: errors.iter().map(|e| e[k].0).sum::<f64>() / n,
            max_rotation_error: errors.iter().map(|e| e[k].0).fold(0.0, f64::max),
            mean_velocity_error: errors.iter().map(|e| e[k].1).sum::<f64>() / n,
            mean_position_error: errors.iter().map(|e| e[k].2).sum::<f64>() / n,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Euler angles versus SO(3)

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationErrorRow {
    pub rate: f64,
    pub dt: f64,
    /// Largest rotation error of the SO(3) integration over all axes.
    pub so3_error: f64,
    /// Mean rotation error of the Euler-angle integration over all axes.
    pub euler_error: f64,
}

/// Integrates a constant body rate for `total_time` seconds with step `dt`, both
/// by composing exponentials and by forward-Euler on zyx Euler angles, and
/// reports the rotation error against `Exp(ω·total_time)`. Each rate uses
/// `axes` random rotation axes drawn from `seed`.
pub fn integration_error_sweep(
    seed: u64,
    rates: &[f64],
    dts: &[f64],
    total_time: f64,
    axes: usize,
) -> Result<Vec<IntegrationErrorRow>, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &rate in rates {
        let dirs: Vec<Vec3> = (0..axes).map(|_| normal3(&mut rng).normalize()).collect();
        for &dt in dts {
            let steps = (total_time / dt).round() as usize;
            let mut so3_error = 0.0f64;
            let mut euler_sum = 0.0;
            for dir in &dirs {
                let omega = dir * rate;
                let exact = exp_so3(&(omega * (steps as f64 * dt)));
                let step = exp_so3(&(omega * dt));
                let mut r = Rotation::identity();
                let mut theta = Vec3::zeros();
                for _ in 0..steps {
                    r = r * step;
                    theta = euler_integrate(&theta, &omega, dt)?;
                }
                so3_error = so3_error.max(log_so3(&(exact.transpose() * r)).norm());
                euler_sum += log_so3(&(exact.transpose() * euler_to_rotation(&theta))).norm();
            }
            rows.push(IntegrationErrorRow {
                rate,
                dt,
                so3_error,
                euler_error: euler_sum / axes as f64,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlStudyConfig {
    pub duration: f64,
    pub rate: f64,
    pub gyro_noise_density: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for KlStudyConfig {
    fn default() -> Self {
        KlStudyConfig {
            duration: 1.0,
            rate: 100.0,
            gyro_noise_density: 0.01,
            samples: 10_000,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlRow {
    pub max_pitch_deg: f64,
    pub kl_euler: f64,
    pub kl_so3: f64,
}

/// Covariance fidelity of Euler-angle versus SO(3) propagation for a pure pitch
/// rotation from level to `max_pitch_deg`. The reference is the covariance of
/// `Log(R̄ᵀR)` over sampled noisy gyro streams integrated exactly on SO(3).
pub fn kl_pitch_sweep(cfg: &KlStudyConfig, max_pitch_deg: &[f64]) -> Result<Vec<KlRow>, EvalError> {
    let dt = 1.0 / cfg.rate;
    let n = (cfg.duration * cfg.rate).round() as usize;
    let noise = ImuNoiseModel {
        gyro_noise_density: cfg.gyro_noise_density,
        ..ImuNoiseModel::default()
    };
    let sigma = cfg.gyro_noise_density / dt.sqrt();
    let to_dyn = |m: &Mat3| DMatrix::from_column_slice(3, 3, m.as_slice());

    max_pitch_deg
        .iter()
        .map(|&deg| {
            let omega = Vec3::new(0.0, deg.to_radians() / (n as f64 * dt), 0.0);

            // SO(3): rotation block of the preintegration covariance.
            let mut pre = PreintegratedImu::new(ImuBias::zero());
            let sample = ImuSample::new(0.0, omega, -default_gravity());
            for _ in 0..n {
                pre.integrate(&sample, dt, &noise).expect("valid sample");
            }
            let cov_so3: Mat3 = pre.cov.fixed_view::<3, 3>(0, 0).into_owned();

            // Euler angles, mapped to the body tangent space at the final attitude.
            let mut theta = Vec3::zeros();
            let mut cov = Mat3::zeros();
            for _ in 0..n {
                (theta, cov) = euler_covariance_step(&theta, &cov, &omega, dt, cfg.gyro_noise_density)?;
            }
            let e = euler_rate_matrix(&theta);
            let cov_euler = e * cov * e.transpose();

            // Sampled reference.
            let mean = pre.delta_r;
            let errors: Vec<Vec3> = (0..cfg.samples)
                .into_par_iter()
                .map(|s| {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(s as u64));
                    let mut r = Rotation::identity();
                    for _ in 0..n {
                        r = r * exp_so3(&((omega + normal3(&mut rng) * sigma) * dt));
                    }
                    log_so3(&(mean.transpose() * r))
                })
                .collect();
            let reference = to_dyn(&sample_covariance(&errors));
            Ok(KlRow {
                max_pitch_deg: deg,
                kl_euler: kl_gaussian(&to_dyn(&cov_euler), &reference)?,
                kl_so3: kl_gaussian(&to_dyn(&cov_so3), &reference)?,
            })
        })
        .collect()
}

/// Whether `xs` is strictly increasing.
pub fn strictly_increasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] > w[0])
}
