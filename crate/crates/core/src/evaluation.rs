//! Estimation metrics: pose errors, NEES with a χ² acceptance region, RMSE,
//! segment drift, Euler-angle integration and Gaussian KL divergence.

use nalgebra::{DMatrix, Matrix6, Vector6};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::factors::Mat15;
use crate::liealg::{exp_so3, log_so3, Mat3, Pose, Rotation, Vec3};
use crate::state::{offset, NavState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("covariance is singular")]
    SingularCovariance,
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no runs supplied")]
    Empty,
    #[error("gimbal lock at pitch {0} rad")]
    GimbalLock(f64),
}

/// Body-frame pose error `[Log(R̂ᵀR); R̂ᵀ(p̂ − p)]` at one keyframe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSample {
    pub time: f64,
    pub error: Vector6<f64>,
}

impl ErrorSample {
    pub fn new(time: f64, estimate: &NavState, truth: &NavState) -> Self {
        let rot = log_so3(&(estimate.rotation.transpose() * truth.rotation));
        let pos = estimate.rotation.inverse_rotate(&(estimate.position - truth.position));
        ErrorSample {
            time,
            error: Vector6::new(rot.x, rot.y, rot.z, pos.x, pos.y, pos.z),
        }
    }

    pub fn rotation_norm(&self) -> f64 {
        self.error.fixed_rows::<3>(0).norm()
    }

    pub fn position_norm(&self) -> f64 {
        self.error.fixed_rows::<3>(3).norm()
    }
}

/// 6×6 covariance of [`ErrorSample::error`] from a 15×15 state marginal.
///
/// The truth is `x̂ ⊕ δ`, so the rotation error equals `δφ` while the position
/// error equals `−δp`; the cross blocks change sign.
pub fn pose_error_covariance(marginal: &Mat15) -> Matrix6<f64> {
    let mut c = Matrix6::zeros();
    c.copy_from(&marginal.fixed_view::<6, 6>(offset::ROT, offset::ROT));
    let cross = c.fixed_view::<3, 3>(0, 3).into_owned();
    c.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-cross));
    c.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-cross.transpose()));
    c
}

/// `εᵀ Σ⁻¹ ε`.
pub fn nees(error: &Vector6<f64>, cov6: &Matrix6<f64>) -> Result<f64, EvalError> {
    let chol = cov6.cholesky().ok_or(EvalError::SingularCovariance)?;
    Ok(error.dot(&chol.solve(error)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeesSeries {
    pub run_id: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeesSummary {
    pub mean: Vec<f64>,
    pub runs: usize,
    pub lower: f64,
    pub upper: f64,
    pub fraction_above: f64,
    pub fraction_below: f64,
    /// At most 5% of the time steps lie above the upper bound.
    pub accepted: bool,
}

/// Two-sided χ² acceptance region of the average NEES over `runs` runs of a
/// `dim`-dimensional error, at significance `alpha` per tail.
pub fn nees_bounds(runs: usize, dim: usize, alpha: f64) -> (f64, f64) {
    let dof = (runs * dim) as f64;
    let chi = ChiSquared::new(dof).expect("positive dof");
    (
        chi.inverse_cdf(alpha) / runs as f64,
        chi.inverse_cdf(1.0 - alpha) / runs as f64,
    )
}

/// Averages NEES over runs, ordered by run id.
pub fn average_nees(runs: &[NeesSeries]) -> Result<NeesSummary, EvalError> {
    let mut sorted: Vec<&NeesSeries> = runs.iter().collect();
    sorted.sort_by_key(|r| r.run_id);
    let first = sorted.first().ok_or(EvalError::Empty)?;
    let len = first.values.len();
    for r in &sorted {
        if r.values.len() != len {
            return Err(EvalError::LengthMismatch(len, r.values.len()));
        }
    }
    let n = sorted.len();
    let mean: Vec<f64> = (0..len)
        .map(|k| sorted.iter().map(|r| r.values[k]).sum::<f64>() / n as f64)
        .collect();
    let (lower, upper) = nees_bounds(n, 6, 0.025);
    let frac = |pred: &dyn Fn(f64) -> bool| {
        mean.iter().filter(|m| pred(**m)).count() as f64 / len.max(1) as f64
    };
    let fraction_above = frac(&|m| m > upper);
    let fraction_below = frac(&|m| m < lower);
    Ok(NeesSummary {
        mean,
        runs: n,
        lower,
        upper,
        fraction_above,
        fraction_below,
        accepted: fraction_above <= 0.05,
    })
}

/// Per-time RMSE of rotation (degrees) and position (metres) across runs.
pub fn rmse(runs: &[Vec<ErrorSample>]) -> Result<Vec<(f64, f64, f64)>, EvalError> {
    let first = runs.first().ok_or(EvalError::Empty)?;
    let len = first.len();
    for r in runs {
        if r.len() != len {
            return Err(EvalError::LengthMismatch(len, r.len()));
        }
    }
    let n = runs.len() as f64;
    Ok((0..len)
        .map(|k| {
            let rot = runs.iter().map(|r| r[k].rotation_norm().powi(2)).sum::<f64>() / n;
            let pos = runs.iter().map(|r| r[k].position_norm().powi(2)).sum::<f64>() / n;
            (first[k].time, rot.sqrt().to_degrees(), pos.sqrt())
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftStats {
    pub segment_length: f64,
    /// `None` when the trajectory is shorter than the segment.
    pub samples: Option<usize>,
    pub mean_translation: f64,
    pub max_translation: f64,
    pub mean_rotation_deg: f64,
}

/// Drift over trajectory segments: for every start keyframe, the relative motion
/// to the first keyframe at least `length` metres further along the true path is
/// compared between estimate and truth.
pub fn relative_drift(estimate: &[Pose], truth: &[Pose], segment_lengths: &[f64]) -> Result<Vec<DriftStats>, EvalError> {
    if estimate.len() != truth.len() {
        return Err(EvalError::LengthMismatch(estimate.len(), truth.len()));
    }
    let mut dist = vec![0.0];
    for w in truth.windows(2) {
        let d = dist.last().copied().unwrap_or(0.0) + (w[1].translation - w[0].translation).norm();
        dist.push(d);
    }
    Ok(segment_lengths
        .iter()
        .map(|&len| {
            let mut trans = Vec::new();
            let mut rots = Vec::new();
            for i in 0..truth.len() {
                let Some(j) = (i..truth.len()).find(|&j| dist[j] - dist[i] >= len) else {
                    break;
                };
                let rel_t = truth[i].inverse().compose(&truth[j]);
                let rel_e = estimate[i].inverse().compose(&estimate[j]);
                let (dphi, dp) = rel_t.local(&rel_e);
                trans.push(dp.norm());
                rots.push(dphi.norm().to_degrees());
            }
            if trans.is_empty() {
                DriftStats {
                    segment_length: len,
                    samples: None,
                    mean_translation: 0.0,
                    max_translation: 0.0,
                    mean_rotation_deg: 0.0,
                }
            } else {
                let n = trans.len() as f64;
                DriftStats {
                    segment_length: len,
                    samples: Some(trans.len()),
                    mean_translation: trans.iter().sum::<f64>() / n,
                    max_translation: trans.iter().copied().fold(0.0, f64::max),
                    mean_rotation_deg: rots.iter().sum::<f64>() / n,
                }
            }
        })
        .collect())
}

/// Whether every bias component of `estimate` lies within `k` marginal standard
/// deviations of `truth`.
pub fn bias_within_sigma(estimate: &NavState, truth: &NavState, marginal: &Mat15, k: f64) -> bool {
    let d = (estimate.bias - truth.bias).to_vector();
    (0..6).all(|c| {
        let var = marginal[(offset::BG + c, offset::BG + c)];
        var > 0.0 && d[c].abs() <= k * var.sqrt()
    })
}

// ---------------------------------------------------------------------------
// Euler angles, zyx convention: θ = [roll, pitch, yaw], R = Rz(yaw)·Ry(pitch)·Rx(roll).

pub const GIMBAL_TOL: f64 = 1e-6;

pub fn euler_to_rotation(theta: &Vec3) -> Rotation {
    exp_so3(&Vec3::new(0.0, 0.0, theta.z))
        * exp_so3(&Vec3::new(0.0, theta.y, 0.0))
        * exp_so3(&Vec3::new(theta.x, 0.0, 0.0))
}

fn check_gimbal(theta: &Vec3) -> Result<(), EvalError> {
    if theta.y.cos().abs() < GIMBAL_TOL {
        Err(EvalError::GimbalLock(theta.y))
    } else {
        Ok(())
    }
}

/// Maps Euler-angle rates to body angular velocity.
pub fn euler_rate_matrix(theta: &Vec3) -> Mat3 {
    let (sr, cr) = theta.x.sin_cos();
    let (sp, cp) = theta.y.sin_cos();
    Mat3::new(
        1.0, 0.0, -sp,
        0.0, cr, sr * cp,
        0.0, -sr, cr * cp,
    )
}

/// Inverse of [`euler_rate_matrix`]: body angular velocity to Euler-angle rates.
pub fn euler_rate_matrix_inv(theta: &Vec3) -> Result<Mat3, EvalError> {
    check_gimbal(theta)?;
    let (sr, cr) = theta.x.sin_cos();
    let (sp, cp) = theta.y.sin_cos();
    let tp = sp / cp;
    Ok(Mat3::new(
        1.0, sr * tp, cr * tp,
        0.0, cr, -sr,
        0.0, sr / cp, cr / cp,
    ))
}

/// One forward-Euler step of the Euler-angle kinematics.
pub fn euler_integrate(theta: &Vec3, omega: &Vec3, dt: f64) -> Result<Vec3, EvalError> {
    Ok(theta + euler_rate_matrix_inv(theta)? * omega * dt)
}

/// One step of mean and first-order covariance propagation in Euler angles for a
/// gyro with white-noise density `gyro_noise_density`.
pub fn euler_covariance_step(
    theta: &Vec3,
    cov: &Mat3,
    omega: &Vec3,
    dt: f64,
    gyro_noise_density: f64,
) -> Result<(Vec3, Mat3), EvalError> {
    let e_inv = euler_rate_matrix_inv(theta)?;
    let h = 1e-6;
    let mut a = Mat3::identity();
    for c in 0..3 {
        let mut d = Vec3::zeros();
        d[c] = h;
        let col = (euler_rate_matrix_inv(&(theta + d))? * omega
            - euler_rate_matrix_inv(&(theta - d))? * omega)
            / (2.0 * h);
        a.set_column(c, &(a.column(c) + col * dt));
    }
    let b = -e_inv * dt;
    let q = gyro_noise_density.powi(2) / dt;
    let next = a * cov * a.transpose() + b * b.transpose() * q;
    Ok((theta + e_inv * omega * dt, (next + next.transpose()) * 0.5))
}

/// KL divergence of N(0, `est`) from N(0, `reference`).
pub fn kl_gaussian(est: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<f64, EvalError> {
    if est.shape() != reference.shape() {
        return Err(EvalError::LengthMismatch(est.nrows(), reference.nrows()));
    }
    let n = est.nrows() as f64;
    let chol_ref = reference.clone().cholesky().ok_or(EvalError::SingularCovariance)?;
    let chol_est = est.clone().cholesky().ok_or(EvalError::SingularCovariance)?;
    let trace = chol_ref.solve(est).trace();
    let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let ld_ref = logdet(&chol_ref.l());
    let ld_est = logdet(&chol_est.l());
    Ok(0.5 * (trace - n + ld_ref - ld_est))
}

pub fn symmetric_kl(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64, EvalError> {
    Ok(kl_gaussian(a, b)? + kl_gaussian(b, a)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preintegration::ImuBias;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn nees_examples() {
        let i = Matrix6::identity();
        assert_eq!(nees(&Vector6::zeros(), &i).unwrap(), 0.0);
        assert_eq!(nees(&Vector6::x(), &i).unwrap(), 1.0);
        assert!(nees(&Vector6::x(), &Matrix6::zeros()).is_err());
    }

    #[test]
    fn nees_of_consistent_samples_averages_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let cov = a * a.transpose() + Matrix6::identity() * 0.1;
        let l = cov.cholesky().unwrap().l();
        let n = 10_000;
        let mean = (0..n)
            .map(|_| {
                let z = Vector6::from_fn(|_, _| StandardNormal.sample(&mut rng));
                nees(&(l * z), &cov).unwrap()
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean - 6.0).abs() < 0.2, "{mean}");
    }

    #[test]
    fn bounds_reproduce_reference_region() {
        let (lo, hi) = nees_bounds(50, 6, 0.025);
        assert!((lo - 5.0).abs() < 0.1, "{lo}");
        assert!((hi - 7.0).abs() < 0.05, "{hi}");
    }

    #[test]
    fn average_nees_verdicts() {
        let runs = |v: f64| -> Vec<NeesSeries> {
            (0..50).map(|r| NeesSeries { run_id: r, values: vec![v; 20] }).collect()
        };
        let s = average_nees(&runs(6.0)).unwrap();
        assert!(s.accepted);
        assert!(s.mean.iter().all(|m| *m == 6.0));
        let s = average_nees(&runs(12.0)).unwrap();
        assert!(!s.accepted);
        assert_eq!(s.fraction_above, 1.0);
        let mut bad = runs(6.0);
        bad[3].values.pop();
        assert!(matches!(average_nees(&bad), Err(EvalError::LengthMismatch(..))));
        assert!(matches!(average_nees(&[]), Err(EvalError::Empty)));
    }

    #[test]
    fn pose_error_covariance_matches_sampling() {
        // Perturb an estimate by δ ~ N(0, Σ) through the retraction and check the
        // pose error against the sign-adjusted covariance.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Mat15::from_fn(|_, _| rng.random_range(-0.01..0.01));
        let marginal = a * a.transpose() + Mat15::identity() * 1e-6;
        let cov6 = pose_error_covariance(&marginal);
        let l = marginal.cholesky().unwrap().l();
        let est = NavState::new(exp_so3(&Vec3::new(0.3, 0.1, -0.5)), Vec3::new(1.0, 2.0, 0.0), Vec3::zeros(), ImuBias::zero());
        let n = 20_000;
        let mut acc = Matrix6::zeros();
        for _ in 0..n {
            let z = crate::state::StateTangent::from_fn(|_, _| StandardNormal.sample(&mut rng));
            let truth = est.retract(&(l * z));
            let e = ErrorSample::new(0.0, &est, &truth).error;
            acc += e * e.transpose();
        }
        let emp = acc / n as f64;
        let rel = (emp - cov6).norm() / cov6.norm();
        assert!(rel < 0.05, "{rel}");
    }

    #[test]
    fn rmse_examples() {
        let zero = vec![vec![ErrorSample { time: 0.0, error: Vector6::zeros() }; 3]; 2];
        assert!(rmse(&zero).unwrap().iter().all(|(_, r, p)| *r == 0.0 && *p == 0.0));
        let one = vec![vec![ErrorSample { time: 1.0, error: Vector6::new(0.0, 0.0, 0.01, 3.0, 4.0, 0.0) }]];
        let r = rmse(&one).unwrap();
        assert_relative_eq!(r[0].1, 0.01f64.to_degrees(), epsilon = 1e-12);
        assert_relative_eq!(r[0].2, 5.0, epsilon = 1e-12);
    }

    fn straight_line(n: usize, drift: f64) -> Vec<Pose> {
        (0..n)
            .map(|k| Pose::new(Rotation::identity(), Vec3::new(k as f64 * (1.0 + drift), 0.0, 0.0)))
            .collect()
    }

    #[test]
    fn drift_examples() {
        let gt = straight_line(121, 0.0);
        let stats = relative_drift(&gt, &gt, &[10.0, 40.0, 90.0, 160.0]).unwrap();
        for s in &stats[..3] {
            assert_eq!(s.mean_translation, 0.0);
            assert!(s.samples.is_some());
        }
        assert_eq!(stats[3].samples, None);
        let est = straight_line(121, 0.01);
        let stats = relative_drift(&est, &gt, &[10.0, 40.0, 90.0]).unwrap();
        for s in &stats {
            assert_relative_eq!(s.mean_translation, 0.01 * s.segment_length, epsilon = 1e-9);
        }
    }

    #[test]
    fn euler_basic_steps() {
        let theta = euler_integrate(&Vec3::zeros(), &Vec3::new(0.0, 0.0, 2.0), 0.01).unwrap();
        assert_relative_eq!(theta, Vec3::new(0.0, 0.0, 0.02), epsilon = 1e-15);
        assert!(matches!(
            euler_integrate(&Vec3::new(0.0, std::f64::consts::FRAC_PI_2, 0.0), &Vec3::x(), 0.01),
            Err(EvalError::GimbalLock(_))
        ));
    }

    #[test]
    fn euler_rate_matrix_maps_angle_rates_to_body_rates() {
        // R(θ + θ̇ h) ≈ R(θ) Exp(E′ θ̇ h).
        let theta = Vec3::new(0.3, -0.7, 1.2);
        let rate = Vec3::new(0.5, -0.2, 0.9);
        let h = 1e-6;
        let r0 = euler_to_rotation(&(theta - rate * h));
        let r1 = euler_to_rotation(&(theta + rate * h));
        let fd = log_so3(&(r0.transpose() * r1)) / (2.0 * h);
        assert!((fd - euler_rate_matrix(&theta) * rate).norm() < 1e-8);
        let inv = euler_rate_matrix_inv(&theta).unwrap();
        assert!((inv * euler_rate_matrix(&theta) - Mat3::identity()).norm() < 1e-12);
    }

    #[test]
    fn euler_covariance_step_examples() {
        let omega = Vec3::new(0.1, 0.2, 0.3);
        let cov = Mat3::identity() * 1e-4;
        // Without noise only the A-part acts.
        let (_, c0) = euler_covariance_step(&Vec3::new(0.1, 0.2, 0.3), &cov, &omega, 0.01, 0.0).unwrap();
        assert!((c0 - cov).norm() < 1e-5 && c0 != cov);
        // At θ = 0 with zero prior covariance: Σ′ = σ²/dt · dt² · I.
        let (_, c1) = euler_covariance_step(&Vec3::zeros(), &Mat3::zeros(), &omega, 0.01, 0.1).unwrap();
        assert_relative_eq!(c1, Mat3::identity() * (0.01 * 0.01), epsilon = 1e-15);
    }

    #[test]
    fn kl_examples() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert_eq!(kl_gaussian(&i, &i).unwrap(), 0.0);
        let two = &i * 2.0;
        assert_relative_eq!(kl_gaussian(&two, &i).unwrap(), 0.5 * (6.0 - 3.0 - 3.0 * 2f64.ln()), epsilon = 1e-12);
        assert_relative_eq!(kl_gaussian(&two, &i).unwrap(), 0.4603, epsilon = 1e-4);
        assert!(kl_gaussian(&two, &i).unwrap() != kl_gaussian(&i, &two).unwrap());
        assert!(kl_gaussian(&i, &DMatrix::zeros(3, 3)).is_err());
    }

    fn spd6() -> impl Strategy<Value = Matrix6<f64>> {
        proptest::collection::vec(-1.0..1.0f64, 36)
            .prop_map(|v| {
                let a = Matrix6::from_column_slice(&v);
                a * a.transpose() + Matrix6::identity() * 0.05
            })
    }

    proptest! {
        #[test]
        fn nees_invariant_under_linear_transform(cov in spd6(), t in spd6(), e in proptest::collection::vec(-1.0..1.0f64, 6)) {
            let e = Vector6::from_column_slice(&e);
            let a = nees(&e, &cov).unwrap();
            let b = nees(&(t * e), &(t * cov * t.transpose())).unwrap();
            prop_assert!((a - b).abs() < 1e-10 * (1.0 + a), "{} {}", a, b);
        }

        #[test]
        fn kl_nonnegative(a in spd6(), b in spd6()) {
            let a = DMatrix::from_column_slice(6, 6, a.as_slice());
            let b = DMatrix::from_column_slice(6, 6, b.as_slice());
            prop_assert!(kl_gaussian(&a, &b).unwrap() >= -1e-12);
            prop_assert!(kl_gaussian(&a, &a).unwrap().abs() < 1e-12);
        }
    }
}
