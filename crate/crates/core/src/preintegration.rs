//! Preintegrated IMU measurements between two keyframes.
//!
//! Samples are integrated at a fixed bias linearization point `b̄_i`. Along with
//! the deltas `(ΔR̃, Δṽ, Δp̃)` we propagate the 9×9 covariance of the
//! preintegration noise `[δφ, δv, δp]` and the five Jacobians used for
//! first-order bias correction.

use std::ops::{Add, Sub};

use nalgebra::{SMatrix, Vector6};
use thiserror::Error;

use crate::liealg::{exp_so3, hat, right_jacobian, Mat3, Rotation, Vec3};
use crate::state::NavState;

pub type Mat9 = SMatrix<f64, 9, 9>;
pub type Mat9x6 = SMatrix<f64, 9, 6>;
pub type Mat6 = SMatrix<f64, 6, 6>;

/// Default world gravity, m/s².
pub const GRAVITY: [f64; 3] = [0.0, 0.0, -9.81];

pub fn default_gravity() -> Vec3 {
    Vec3::from(GRAVITY)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreintegrationError {
    #[error("sample interval must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("sample at t={0} has non-finite components")]
    NonFiniteSample(f64),
    #[error("noise densities must be strictly positive")]
    InvalidNoise,
}

/// Raw IMU reading: measured angular rate (rad/s) and specific force (m/s²).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    pub gyro: Vec3,
    pub accel: Vec3,
}

impl ImuSample {
    pub fn new(timestamp: f64, gyro: Vec3, accel: Vec3) -> Self {
        ImuSample {
            timestamp,
            gyro,
            accel,
        }
    }

    fn is_finite(&self) -> bool {
        self.timestamp.is_finite()
            && self.gyro.iter().all(|x| x.is_finite())
            && self.accel.iter().all(|x| x.is_finite())
    }
}

/// Continuous-time noise densities of the IMU.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ImuNoiseModel {
    /// rad/(s·√Hz)
    pub gyro_noise_density: f64,
    /// m/(s²·√Hz)
    pub accel_noise_density: f64,
    /// rad/(s²·√Hz)
    pub gyro_bias_density: f64,
    /// m/(s³·√Hz)
    pub accel_bias_density: f64,
}

impl Default for ImuNoiseModel {
    fn default() -> Self {
        ImuNoiseModel {
            gyro_noise_density: 0.0007,
            accel_noise_density: 0.019,
            gyro_bias_density: 0.0004,
            accel_bias_density: 0.012,
        }
    }
}

impl ImuNoiseModel {
    pub fn validate(&self) -> Result<(), PreintegrationError> {
        let all = [
            self.gyro_noise_density,
            self.accel_noise_density,
            self.gyro_bias_density,
            self.accel_bias_density,
        ];
        if all.iter().all(|d| d.is_finite() && *d > 0.0) {
            Ok(())
        } else {
            Err(PreintegrationError::InvalidNoise)
        }
    }

    /// Covariance of the discrete measurement noise `[η^gd, η^ad]` for interval `dt`.
    pub fn discrete_measurement_cov(&self, dt: f64) -> Mat6 {
        let g = self.gyro_noise_density.powi(2) / dt;
        let a = self.accel_noise_density.powi(2) / dt;
        Mat6::from_diagonal(&Vector6::new(g, g, g, a, a, a))
    }

    /// Covariance of the discrete bias random walk over a keyframe interval `dt_ij`.
    pub fn bias_walk_cov(&self, dt_ij: f64) -> Mat6 {
        let g = self.gyro_bias_density.powi(2) * dt_ij;
        let a = self.accel_bias_density.powi(2) * dt_ij;
        Mat6::from_diagonal(&Vector6::new(g, g, g, a, a, a))
    }
}

/// Gyroscope and accelerometer biases.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImuBias {
    pub gyro: Vec3,
    pub accel: Vec3,
}

impl ImuBias {
    pub fn new(gyro: Vec3, accel: Vec3) -> Self {
        ImuBias { gyro, accel }
    }

    pub fn zero() -> Self {
        ImuBias::default()
    }

    pub fn is_finite(&self) -> bool {
        self.gyro.iter().chain(self.accel.iter()).all(|x| x.is_finite())
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.gyro.x,
            self.gyro.y,
            self.gyro.z,
            self.accel.x,
            self.accel.y,
            self.accel.z,
        )
    }
}

impl Add for ImuBias {
    type Output = ImuBias;

    fn add(self, rhs: ImuBias) -> ImuBias {
        ImuBias::new(self.gyro + rhs.gyro, self.accel + rhs.accel)
    }
}

impl Sub for ImuBias {
    type Output = ImuBias;

    fn sub(self, rhs: ImuBias) -> ImuBias {
        ImuBias::new(self.gyro - rhs.gyro, self.accel - rhs.accel)
    }
}

/// Accumulated IMU increments between keyframes `i` and `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreintegratedImu {
    pub delta_r: Rotation,
    pub delta_v: Vec3,
    pub delta_p: Vec3,
    pub dt_total: f64,
    /// Σ_ij, block order `[δφ, δv, δp]`.
    pub cov: Mat9,
    pub bias_lin: ImuBias,
    pub j_dr_dbg: Mat3,
    pub j_dv_dbg: Mat3,
    pub j_dv_dba: Mat3,
    pub j_dp_dbg: Mat3,
    pub j_dp_dba: Mat3,
}

impl PreintegratedImu {
    pub fn new(bias_lin: ImuBias) -> Self {
        PreintegratedImu {
            delta_r: Rotation::identity(),
            delta_v: Vec3::zeros(),
            delta_p: Vec3::zeros(),
            dt_total: 0.0,
            cov: Mat9::zeros(),
            bias_lin,
            j_dr_dbg: Mat3::zeros(),
            j_dv_dbg: Mat3::zeros(),
            j_dv_dba: Mat3::zeros(),
            j_dp_dbg: Mat3::zeros(),
            j_dp_dba: Mat3::zeros(),
        }
    }

    /// Integrates one sample held constant over `dt` seconds.
    pub fn integrate(
        &mut self,
        sample: &ImuSample,
        dt: f64,
        noise: &ImuNoiseModel,
    ) -> Result<(), PreintegrationError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(PreintegrationError::NonPositiveDt(dt));
        }
        if !sample.is_finite() {
            return Err(PreintegrationError::NonFiniteSample(sample.timestamp));
        }

        let omega = sample.gyro - self.bias_lin.gyro;
        let acc = sample.accel - self.bias_lin.accel;
        let dt2 = dt * dt;

        let step = exp_so3(&(omega * dt));
        let jr = right_jacobian(&(omega * dt));
        let dr = *self.delta_r.matrix();
        let dr_acc_hat = dr * hat(&acc);

        // Noise propagation: η_ij = A·η_i(j-1) + B·η_d.
        let mut a = Mat9::identity();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&step.matrix().transpose());
        a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-dr_acc_hat * dt));
        a.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-dr_acc_hat * (0.5 * dt2)));
        a.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Mat3::identity() * dt));
        let mut b = Mat9x6::zeros();
        b.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jr * dt));
        b.fixed_view_mut::<3, 3>(3, 3).copy_from(&(dr * dt));
        b.fixed_view_mut::<3, 3>(6, 3).copy_from(&(dr * (0.5 * dt2)));
        let cov = a * self.cov * a.transpose() + b * noise.discrete_measurement_cov(dt) * b.transpose();
        self.cov = (cov + cov.transpose()) * 0.5;

        // Bias Jacobians; every right-hand side reads the values at step k.
        self.j_dp_dba += self.j_dv_dba * dt - dr * (0.5 * dt2);
        self.j_dp_dbg += self.j_dv_dbg * dt - dr_acc_hat * self.j_dr_dbg * (0.5 * dt2);
        self.j_dv_dba -= dr * dt;
        self.j_dv_dbg -= dr_acc_hat * self.j_dr_dbg * dt;
        self.j_dr_dbg = step.matrix().transpose() * self.j_dr_dbg - jr * dt;

        // Deltas: position, then velocity, then rotation.
        self.delta_p += self.delta_v * dt + dr * acc * (0.5 * dt2);
        self.delta_v += dr * acc * dt;
        self.delta_r = self.delta_r * step;
        self.dt_total += dt;
        Ok(())
    }

    /// Integrates a whole stream of `(sample, dt)` pairs starting from `bias_lin`.
    pub fn from_samples<'a, I>(
        samples: I,
        bias_lin: ImuBias,
        noise: &ImuNoiseModel,
    ) -> Result<Self, PreintegrationError>
    where
        I: IntoIterator<Item = &'a (ImuSample, f64)>,
    {
        let mut pre = PreintegratedImu::new(bias_lin);
        for (sample, dt) in samples {
            pre.integrate(sample, *dt, noise)?;
        }
        Ok(pre)
    }

    /// First-order correction of the deltas to a new bias estimate.
    pub fn bias_corrected_delta(&self, new_bias: &ImuBias) -> (Rotation, Vec3, Vec3) {
        let db = *new_bias - self.bias_lin;
        let r = self.delta_r * exp_so3(&(self.j_dr_dbg * db.gyro));
        let v = self.delta_v + self.j_dv_dbg * db.gyro + self.j_dv_dba * db.accel;
        let p = self.delta_p + self.j_dp_dbg * db.gyro + self.j_dp_dba * db.accel;
        (r, v, p)
    }

    /// Predicts the state at `j` from the state at `i` (noise-free model), using the
    /// bias-corrected deltas at the bias of `state_i`.
    pub fn predict(&self, state_i: &NavState, gravity: &Vec3) -> NavState {
        let dt = self.dt_total;
        let (dr, dv, dp) = self.bias_corrected_delta(&state_i.bias);
        let r_i = state_i.rotation;
        NavState {
            rotation: r_i * dr,
            velocity: state_i.velocity + gravity * dt + r_i * dv,
            position: state_i.position
                + state_i.velocity * dt
                + gravity * (0.5 * dt * dt)
                + r_i * dp,
            bias: state_i.bias,
        }
    }
}

/// Σ_ij evaluated non-iteratively: for every raw noise sample `η^d_m` the linear map
/// into `[δφ_ij, δv_ij, δp_ij]` is built from the explicit sums, and the outer
/// products are accumulated. Quadratic in the stream length; for testing.
pub fn covariance_batch_oracle(
    samples: &[(ImuSample, f64)],
    bias: &ImuBias,
    noise: &ImuNoiseModel,
) -> Result<Mat9, PreintegrationError> {
    let n = samples.len();
    let mut omegas = Vec::with_capacity(n);
    let mut accs = Vec::with_capacity(n);
    let mut dts = Vec::with_capacity(n);
    for (s, dt) in samples {
        if !(*dt > 0.0 && dt.is_finite()) {
            return Err(PreintegrationError::NonPositiveDt(*dt));
        }
        if !s.is_finite() {
            return Err(PreintegrationError::NonFiniteSample(s.timestamp));
        }
        omegas.push(s.gyro - bias.gyro);
        accs.push(s.accel - bias.accel);
        dts.push(*dt);
    }

    // rot[k] = ΔR̃_ik for k = 0..=n.
    let mut rot = Vec::with_capacity(n + 1);
    rot.push(Mat3::identity());
    for k in 0..n {
        let next = rot[k] * exp_so3(&(omegas[k] * dts[k])).matrix();
        rot.push(next);
    }

    let mut sigma = Mat9::zeros();
    for m in 0..n {
        let dt_m = dts[m];
        let jr = right_jacobian(&(omegas[m] * dt_m));
        // Coefficients of η^gd_m and η^ad_m in δφ_ik, δv_ik, δp_ik as k runs past m.
        // δφ_ik = Σ_{l<k} ΔR̃_{l+1,k}ᵀ J_r^l η^gd_l dt_l.
        let phi_coef = |k: usize| -> Mat3 {
            if k <= m {
                Mat3::zeros()
            } else {
                (rot[m + 1].transpose() * rot[k]).transpose() * jr * dt_m
            }
        };
        let mut v_g = Mat3::zeros();
        let mut v_a = Mat3::zeros();
        let mut p_g = Mat3::zeros();
        let mut p_a = Mat3::zeros();
        for k in m..n {
            let dt = dts[k];
            let ra = rot[k] * hat(&accs[k]);
            let phi_k = phi_coef(k);
            // δp_i(k+1) = δp_ik + δv_ik dt − ½ ΔR̃_ik a^ δφ_ik dt² + ½ ΔR̃_ik η^ad_k dt²
            p_g += v_g * dt - ra * phi_k * (0.5 * dt * dt);
            p_a += v_a * dt;
            if k == m {
                p_a += rot[k] * (0.5 * dt * dt);
            }
            // δv_i(k+1) = δv_ik − ΔR̃_ik a^ δφ_ik dt + ΔR̃_ik η^ad_k dt
            v_g -= ra * phi_k * dt;
            if k == m {
                v_a += rot[k] * dt;
            }
        }
        let mut g = Mat9x6::zeros();
        g.fixed_view_mut::<3, 3>(0, 0).copy_from(&phi_coef(n));
        g.fixed_view_mut::<3, 3>(3, 0).copy_from(&v_g);
        g.fixed_view_mut::<3, 3>(3, 3).copy_from(&v_a);
        g.fixed_view_mut::<3, 3>(6, 0).copy_from(&p_g);
        g.fixed_view_mut::<3, 3>(6, 3).copy_from(&p_a);
        sigma += g * noise.discrete_measurement_cov(dt_m) * g.transpose();
    }
    Ok(sigma)
}
