//! Synthetic visual-inertial world: a circular trajectory with a vertical sinusoid,
//! IMU synthesis with white noise and random-walk biases, wall landmarks and
//! pixel observations.

mod config;
mod io;

pub use config::{
    CameraConfig, ConfigError, ImuConfig, LandmarkConfig, PriorConfig, SimConfig, TrajectoryConfig,
};
pub use io::{fmt_f64, read_dataset, write_csv, write_dataset, DatasetError};

use std::f64::consts::{PI, TAU};

use nalgebra::Vector2;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::factors::{project, CameraModel, LandmarkTrack, Mat15, Observation, PriorFactor};
use crate::liealg::{exp_so3, Rotation, Vec3};
use crate::optimizer::{FactorGraph, ImuEdge};
use crate::preintegration::{
    default_gravity, ImuBias, ImuNoiseModel, ImuSample, PreintegratedImu, PreintegrationError,
};
use crate::state::{offset, NavState, StateTangent};

/// Parametric path `p(t) = [r cos ωt, r sin ωt, A(1 − cos 2πft)]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrajectoryParams {
    pub radius: f64,
    pub angular_rate: f64,
    pub vertical_amplitude: f64,
    pub vertical_frequency: f64,
    pub duration: f64,
}

/// Sample of the analytic trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicSample {
    pub rotation: Rotation,
    pub position: Vec3,
    pub velocity: Vec3,
    pub body_omega: Vec3,
    pub world_accel: Vec3,
}

impl TrajectoryParams {
    /// Solves for the angular rate that yields `length` metres of 3D path.
    pub fn with_path_length(
        radius: f64,
        length: f64,
        duration: f64,
        vertical_amplitude: f64,
        vertical_frequency: f64,
    ) -> TrajectoryParams {
        let mut p = TrajectoryParams {
            radius,
            angular_rate: 0.0,
            vertical_amplitude,
            vertical_frequency,
            duration,
        };
        let (mut lo, mut hi) = (0.0, length / (radius * duration));
        // Vertical motion only adds length, so `hi` is an upper bound.
        for _ in 0..100 {
            p.angular_rate = 0.5 * (lo + hi);
            if p.path_length() < length {
                lo = p.angular_rate;
            } else {
                hi = p.angular_rate;
            }
        }
        p.angular_rate = 0.5 * (lo + hi);
        p
    }

    /// Arc length over `[0, duration]` by composite Simpson integration.
    pub fn path_length(&self) -> f64 {
        let n = 20_000;
        let h = self.duration / n as f64;
        let speed = |t: f64| self.state(t).velocity.norm();
        let mut sum = speed(0.0) + speed(self.duration);
        for k in 1..n {
            sum += speed(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        sum * h / 3.0
    }

    /// Closed-form kinematics. The body x axis follows the velocity direction and
    /// the body has no roll.
    pub fn state(&self, t: f64) -> KinematicSample {
        let (r, w) = (self.radius, self.angular_rate);
        let wz = TAU * self.vertical_frequency;
        let a = self.vertical_amplitude;
        let (s, c) = (w * t).sin_cos();
        let (sz, cz) = (wz * t).sin_cos();
        let position = Vec3::new(r * c, r * s, a * (1.0 - cz));
        let velocity = Vec3::new(-r * w * s, r * w * c, a * wz * sz);
        let world_accel = Vec3::new(-r * w * w * c, -r * w * w * s, a * wz * wz * cz);

        let vh = r * w;
        let (vz, az) = (velocity.z, world_accel.z);
        let yaw = w * t + PI / 2.0;
        let climb = vz.atan2(vh);
        let speed2 = vh * vh + vz * vz;
        let climb_rate = if speed2 > 0.0 { vh * az / speed2 } else { 0.0 };
        let ry = exp_so3(&Vec3::new(0.0, -climb, 0.0));
        let rotation = Rotation::from_yaw(yaw) * ry;
        let body_omega = ry.inverse_rotate(&Vec3::new(0.0, 0.0, w)) - Vec3::new(0.0, climb_rate, 0.0);
        KinematicSample {
            rotation,
            position,
            velocity,
            body_omega,
            world_accel,
        }
    }
}

/// A generated dataset together with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    pub config: SimConfig,
    pub keyframe_times: Vec<f64>,
    pub ground_truth: Vec<NavState>,
    /// IMU samples; sample `k` is held over `[t_k, t_{k+1})`.
    pub imu: Vec<ImuSample>,
    pub imu_dt: Vec<f64>,
    pub tracks: Vec<LandmarkTrack>,
    pub landmarks: Vec<Vec3>,
    pub prior_mean: NavState,
}

impl SimDataset {
    pub fn num_keyframes(&self) -> usize {
        self.keyframe_times.len()
    }

    pub fn camera(&self) -> CameraModel {
        self.config.camera_model()
    }

    pub fn noise(&self) -> ImuNoiseModel {
        self.config.imu.noise
    }

    /// IMU samples and intervals between keyframes `i` and `i + 1`.
    pub fn interval(&self, i: usize) -> impl Iterator<Item = (ImuSample, f64)> + '_ {
        let n = self.config.samples_per_keyframe();
        (i * n..(i + 1) * n).map(move |k| (self.imu[k], self.imu_dt[k]))
    }

    pub fn preintegrate(&self, i: usize, bias_lin: ImuBias) -> Result<PreintegratedImu, PreintegrationError> {
        let noise = self.noise();
        let mut pre = PreintegratedImu::new(bias_lin);
        for (s, dt) in self.interval(i) {
            pre.integrate(&s, dt, &noise)?;
        }
        Ok(pre)
    }

    pub fn prior(&self) -> PriorFactor {
        PriorFactor {
            key: 0,
            mean: self.prior_mean,
            cov: self.config.prior.covariance(&self.config.imu),
        }
    }

    /// Tracks with fewer than two observations cannot constrain the poses.
    pub fn short_tracks(&self) -> usize {
        self.tracks.iter().filter(|t| t.observations.len() < 2).count()
    }

    /// Full-batch graph with all IMU intervals preintegrated at `bias_lin[i]`.
    pub fn build_graph(&self, bias_lin: &[ImuBias]) -> Result<FactorGraph, PreintegrationError> {
        let n = self.num_keyframes();
        let mut g = FactorGraph::new(n, self.camera(), default_gravity(), self.noise());
        g.prior = Some(self.prior());
        for i in 0..n - 1 {
            g.imu.push(ImuEdge {
                i,
                j: i + 1,
                pre: self.preintegrate(i, bias_lin[i])?,
            });
        }
        g.tracks = self
            .tracks
            .iter()
            .filter(|t| t.observations.len() >= 2)
            .cloned()
            .collect();
        Ok(g)
    }
}

/// Noise-free IMU samples at timestamps `times`, each held until the next entry of
/// `times` (the last until `end`). Gyro rates are taken at the interval midpoint
/// and the specific force is the midpoint acceleration expressed in the body frame
/// at the interval start, which keeps the discrete model second-order accurate.
pub fn clean_imu(params: &TrajectoryParams, times: &[f64], end: f64) -> Vec<(ImuSample, f64)> {
    let g = default_gravity();
    times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let next = times.get(k + 1).copied().unwrap_or(end);
            let dt = next - t;
            let start = params.state(t);
            let mid = params.state(t + 0.5 * dt);
            let accel = start.rotation.inverse_rotate(&(mid.world_accel - g));
            (ImuSample::new(t, mid.body_omega, accel), dt)
        })
        .collect()
}

/// Integrates samples with the discrete IMU model from `x0`, returning the state at
/// the start of every sample plus the final state.
pub fn integrate_discrete(x0: &NavState, samples: &[(ImuSample, f64)], gravity: &Vec3) -> Vec<NavState> {
    let mut out = Vec::with_capacity(samples.len() + 1);
    let mut x = *x0;
    out.push(x);
    for (s, dt) in samples {
        let a = x.rotation * (s.accel - x.bias.accel);
        x.position += x.velocity * *dt + (gravity + a) * (0.5 * dt * dt);
        x.velocity += (gravity + a) * *dt;
        x.rotation = x.rotation * exp_so3(&((s.gyro - x.bias.gyro) * *dt));
        out.push(x);
    }
    out
}

fn normal3(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    )
}

/// Generates the full dataset for `config`; deterministic in `config.seed`.
pub fn simulate(config: &SimConfig) -> Result<SimDataset, ConfigError> {
    config.validate()?;
    let params = config.trajectory_params();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let gravity = default_gravity();
    let per_kf = config.samples_per_keyframe();
    let num_kf = config.num_keyframes();
    let num_samples = (num_kf - 1) * per_kf;
    let imu_rate = config.imu.rate;

    let times: Vec<f64> = (0..num_samples).map(|k| k as f64 / imu_rate).collect();
    let keyframe_times: Vec<f64> = (0..num_kf).map(|i| (i * per_kf) as f64 / imu_rate).collect();
    let end = *keyframe_times.last().expect("at least two keyframes");

    let landmarks = place_landmarks(&config.landmarks, &mut rng);

    // Motion is the discrete integration of the clean stream from the analytic start.
    let clean = clean_imu(&params, &times, end);
    let k0 = params.state(0.0);
    let x0 = NavState::new(k0.rotation, k0.position, k0.velocity, ImuBias::zero());
    let motion = integrate_discrete(&x0, &clean, &gravity);

    let (imu, biases) = synthesize_imu(&clean, config, &mut rng);
    let imu_dt: Vec<f64> = clean.iter().map(|(_, dt)| *dt).collect();

    let ground_truth: Vec<NavState> = (0..num_kf)
        .map(|i| {
            let mut x = motion[i * per_kf];
            x.bias = biases[i * per_kf];
            x
        })
        .collect();

    let camera = config.camera_model();
    let tracks = synthesize_tracks(&ground_truth, &landmarks, &camera, config, &mut rng);

    let prior_cov = config.prior.covariance(&config.imu);
    let prior_mean = if config.noise_free {
        ground_truth[0]
    } else {
        sample_prior(&ground_truth[0], &prior_cov, &mut rng)
    };

    Ok(SimDataset {
        config: config.clone(),
        keyframe_times,
        ground_truth,
        imu,
        imu_dt,
        tracks,
        landmarks,
        prior_mean,
    })
}

/// Corrupts clean samples with white noise and a per-sample bias random walk.
/// Returns the measured samples and the bias in effect at the start of each
/// sample, plus the bias after the last one.
pub fn synthesize_imu(
    clean: &[(ImuSample, f64)],
    config: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<ImuSample>, Vec<ImuBias>) {
    let (n, s0) = if config.noise_free {
        let zero = ImuNoiseModel {
            gyro_noise_density: 0.0,
            accel_noise_density: 0.0,
            gyro_bias_density: 0.0,
            accel_bias_density: 0.0,
        };
        (zero, 0.0)
    } else {
        (config.imu.noise, config.imu.initial_bias_sigma)
    };
    let mut bias = ImuBias::new(normal3(rng) * s0, normal3(rng) * s0);
    let mut samples = Vec::with_capacity(clean.len());
    let mut biases = Vec::with_capacity(clean.len() + 1);
    for (s, dt) in clean {
        biases.push(bias);
        let eg = normal3(rng) * (n.gyro_noise_density / dt.sqrt());
        let ea = normal3(rng) * (n.accel_noise_density / dt.sqrt());
        samples.push(ImuSample::new(s.timestamp, s.gyro + bias.gyro + eg, s.accel + bias.accel + ea));
        let wg = normal3(rng) * (n.gyro_bias_density * dt.sqrt());
        let wa = normal3(rng) * (n.accel_bias_density * dt.sqrt());
        bias = bias + ImuBias::new(wg, wa);
    }
    biases.push(bias);
    (samples, biases)
}

/// Landmarks spread uniformly over the four walls of a square room centred on the
/// origin.
pub fn place_landmarks(cfg: &LandmarkConfig, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let h = 0.5 * cfg.room_size;
    (0..cfg.count)
        .map(|_| {
            let s = rng.random_range(-h..h);
            let z = rng.random_range(cfg.min_height..cfg.max_height);
            match rng.random_range(0..4) {
                0 => Vec3::new(h, s, z),
                1 => Vec3::new(-h, s, z),
                2 => Vec3::new(s, h, z),
                _ => Vec3::new(s, -h, z),
            }
        })
        .collect()
}

/// Projects every landmark into every keyframe, keeps visible ones, subsamples to
/// the per-frame limit and adds pixel noise.
pub fn synthesize_tracks(
    states: &[NavState],
    landmarks: &[Vec3],
    camera: &CameraModel,
    config: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<LandmarkTrack> {
    let sigma = config.camera.pixel_sigma;
    let noise_sigma = if config.noise_free { 0.0 } else { sigma };
    let mut obs: Vec<Vec<Observation>> = vec![Vec::new(); landmarks.len()];
    for (k, state) in states.iter().enumerate() {
        let visible: Vec<(usize, Vector2<f64>)> = landmarks
            .iter()
            .enumerate()
            .filter_map(|(l, p)| {
                project(state, camera, p)
                    .ok()
                    .filter(|px| camera.in_image(px))
                    .map(|px| (l, px))
            })
            .collect();
        let keep = config.camera.max_obs_per_frame.min(visible.len());
        let mut chosen = sample_indices(rng, visible.len(), keep).into_vec();
        chosen.sort_unstable();
        for idx in chosen {
            let (l, px) = visible[idx];
            let noise = Vector2::new(StandardNormal.sample(rng), StandardNormal.sample(rng)) * noise_sigma;
            obs[l].push(Observation {
                keyframe: k,
                pixel: px + noise,
                sigma,
            });
        }
    }
    obs.into_iter()
        .enumerate()
        .filter(|(_, o)| !o.is_empty())
        .map(|(landmark_id, observations)| LandmarkTrack {
            landmark_id,
            observations,
        })
        .collect()
}

/// Draws a prior mean such that `mean.local(truth)` is distributed as N(0, Σ₀).
pub fn sample_prior(truth: &NavState, cov: &Mat15, rng: &mut ChaCha8Rng) -> NavState {
    let l = cov.cholesky().map(|c| c.l()).unwrap_or_else(Mat15::zeros);
    let z = StateTangent::from_fn(|_, _| StandardNormal.sample(rng));
    let d: StateTangent = l * z;
    let seg = |o: usize| Vec3::new(d[o], d[o + 1], d[o + 2]);
    let rotation = truth.rotation * exp_so3(&-seg(offset::ROT));
    NavState {
        rotation,
        position: truth.position - rotation * seg(offset::POS),
        velocity: truth.velocity - seg(offset::VEL),
        bias: ImuBias::new(
            truth.bias.gyro - seg(offset::BG),
            truth.bias.accel - seg(offset::BA),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params() -> TrajectoryParams {
        SimConfig::default().trajectory_params()
    }

    #[test]
    fn trajectory_hits_requested_length() {
        let p = params();
        assert_relative_eq!(p.path_length(), 120.0, epsilon = 1e-6);
        assert!(p.angular_rate > 0.0);
    }

    #[test]
    fn start_and_circle_invariants() {
        let p = params();
        let s = p.state(0.0);
        assert_relative_eq!(s.position, Vec3::new(p.radius, 0.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(s.velocity.norm(), p.radius * p.angular_rate, epsilon = 1e-12);
        for k in 0..100 {
            let x = p.state(k as f64 * 0.6).position;
            assert_relative_eq!(x.xy().norm(), p.radius, epsilon = 1e-12);
        }
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let p = params();
        let h = 1e-5;
        for k in 0..50 {
            let t = 0.1 + k as f64 * 1.1;
            let s = p.state(t);
            let fd_v = (p.state(t + h).position - p.state(t - h).position) / (2.0 * h);
            let fd_a = (p.state(t + h).velocity - p.state(t - h).velocity) / (2.0 * h);
            assert!((fd_v - s.velocity).norm() < 1e-8);
            assert!((fd_a - s.world_accel).norm() < 1e-8);
            let dr = (p.state(t + h).rotation.matrix() - p.state(t - h).rotation.matrix()) / (2.0 * h);
            let omega_hat = s.rotation.matrix().transpose() * dr;
            let fd_w = crate::liealg::vee(&((omega_hat - omega_hat.transpose()) * 0.5)).unwrap();
            assert!((fd_w - s.body_omega).norm() < 1e-8);
            // Body x axis points along the velocity.
            let fwd = s.rotation * Vec3::x();
            assert!((fwd - s.velocity.normalize()).norm() < 1e-12);
        }
    }

    #[test]
    fn clean_imu_of_stationary_body_is_gravity() {
        let p = TrajectoryParams {
            radius: 1.0,
            angular_rate: 0.0,
            vertical_amplitude: 0.0,
            vertical_frequency: 0.0,
            duration: 1.0,
        };
        let times: Vec<f64> = (0..10).map(|k| k as f64 * 0.01).collect();
        for (s, _) in clean_imu(&p, &times, 0.1) {
            let r = p.state(0.0).rotation;
            assert_relative_eq!(s.accel, r.inverse_rotate(&-default_gravity()), epsilon = 1e-12);
            assert_eq!(s.gyro, Vec3::zeros());
        }
    }

    #[test]
    fn kinematic_consistency_at_800hz() {
        let mut cfg = SimConfig::default();
        cfg.imu.rate = 800.0;
        let p = cfg.trajectory_params();
        let n = (p.duration * 800.0) as usize;
        let times: Vec<f64> = (0..n).map(|k| k as f64 / 800.0).collect();
        let clean = clean_imu(&p, &times, p.duration);
        let k0 = p.state(0.0);
        let x0 = NavState::new(k0.rotation, k0.position, k0.velocity, ImuBias::zero());
        let states = integrate_discrete(&x0, &clean, &default_gravity());
        let mut worst = 0.0f64;
        for k in (0..=n).step_by(320) {
            let t = k as f64 / 800.0;
            worst = worst.max((states[k].position - p.state(t).position).norm());
        }
        assert!(worst < 1e-3, "position error {worst}");
    }

    #[test]
    fn zero_noise_measurements_are_clean() {
        let mut cfg = SimConfig::default();
        cfg.noise_free = true;
        let p = cfg.trajectory_params();
        let times: Vec<f64> = (0..100).map(|k| k as f64 * 0.005).collect();
        let clean = clean_imu(&p, &times, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (meas, _) = synthesize_imu(&clean, &cfg, &mut rng);
        for (m, (c, _)) in meas.iter().zip(&clean) {
            assert_eq!(m, c);
        }
    }

    #[test]
    fn gyro_noise_variance_matches_discretization() {
        let cfg = SimConfig::default();
        let dt = 0.005;
        let clean: Vec<(ImuSample, f64)> = (0..100_000)
            .map(|k| (ImuSample::new(k as f64 * dt, Vec3::zeros(), Vec3::zeros()), dt))
            .collect();
        let mut cfg0 = cfg.clone();
        cfg0.imu.noise.gyro_bias_density = 1e-300;
        cfg0.imu.initial_bias_sigma = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (meas, _) = synthesize_imu(&clean, &cfg0, &mut rng);
        let var = meas.iter().map(|m| m.gyro.x * m.gyro.x).sum::<f64>() / meas.len() as f64;
        let expected = cfg.imu.noise.gyro_noise_density.powi(2) / dt;
        assert!((var / expected - 1.0).abs() < 0.05, "ratio {}", var / expected);
    }

    #[test]
    fn dataset_defaults_and_determinism() {
        let mut cfg = SimConfig::default();
        cfg.trajectory.duration = 8.0;
        cfg.trajectory.path_length = 16.0;
        let a = simulate(&cfg).unwrap();
        let b = simulate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_keyframes(), 20);
        assert_eq!(a.imu.len(), 19 * 80);
        let mut per_frame = vec![0usize; a.num_keyframes()];
        for t in &a.tracks {
            assert!(!t.observations.is_empty());
            for o in &t.observations {
                per_frame[o.keyframe] += 1;
            }
        }
        assert!(per_frame.iter().all(|&c| c <= 50 && c > 10), "{per_frame:?}");
    }

    #[test]
    fn noise_free_observations_reproject_exactly() {
        let mut cfg = SimConfig::default();
        cfg.trajectory.duration = 4.0;
        cfg.trajectory.path_length = 8.0;
        cfg.noise_free = true;
        let ds = simulate(&cfg).unwrap();
        let cam = ds.camera();
        for t in &ds.tracks {
            for o in &t.observations {
                let px = project(&ds.ground_truth[o.keyframe], &cam, &ds.landmarks[t.landmark_id]).unwrap();
                assert_eq!(px, o.pixel);
            }
        }
    }

    #[test]
    fn ground_truth_is_consistent_with_preintegration() {
        let mut cfg = SimConfig::default();
        cfg.trajectory.duration = 4.0;
        cfg.trajectory.path_length = 8.0;
        cfg.imu.noise = ImuNoiseModel {
            gyro_noise_density: 1e-12,
            accel_noise_density: 1e-12,
            gyro_bias_density: 1e-12,
            accel_bias_density: 1e-12,
        };
        let ds = simulate(&cfg).unwrap();
        let g = default_gravity();
        for i in 0..ds.num_keyframes() - 1 {
            let pre = ds.preintegrate(i, ds.ground_truth[i].bias).unwrap();
            let pred = pre.predict(&ds.ground_truth[i], &g);
            let d = ds.ground_truth[i + 1].local(&pred);
            assert!(d.fixed_rows::<9>(0).norm() < 1e-9, "interval {i}: {d}");
        }
    }
}
