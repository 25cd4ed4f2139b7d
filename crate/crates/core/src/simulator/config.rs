use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factors::{CameraModel, Mat15};
use crate::preintegration::ImuNoiseModel;
use crate::state::{offset, StateTangent};

use super::TrajectoryParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub radius: f64,
    /// Total 3D path length; the angular rate is solved from it.
    pub path_length: f64,
    pub duration: f64,
    pub vertical_amplitude: f64,
    pub vertical_frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImuConfig {
    pub rate: f64,
    pub keyframe_rate: f64,
    pub initial_bias_sigma: f64,
    pub noise: ImuNoiseModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub focal: f64,
    pub width: f64,
    pub height: f64,
    pub pixel_sigma: f64,
    pub max_obs_per_frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkConfig {
    pub count: usize,
    /// Side length of the square room, centred on the origin.
    pub room_size: f64,
    pub min_height: f64,
    pub max_height: f64,
}

/// Prior on the first keyframe. Bias variances are `initial_bias_sigma²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub rotation_var: f64,
    pub position_var: f64,
    pub velocity_var: f64,
}

impl PriorConfig {
    pub fn covariance(&self, imu: &ImuConfig) -> Mat15 {
        let b = imu.initial_bias_sigma.powi(2).max(1e-12);
        Mat15::from_diagonal(&StateTangent::from_fn(|i, _| match i {
            i if i < offset::POS => self.rotation_var,
            i if i < offset::VEL => self.position_var,
            i if i < offset::BG => self.velocity_var,
            _ => b,
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    /// Generate exact measurements (no IMU noise, no bias drift, zero initial bias,
    /// no pixel noise, prior mean at the truth). The noise model still sets the
    /// estimator's covariances.
    #[serde(default)]
    pub noise_free: bool,
    pub trajectory: TrajectoryConfig,
    pub imu: ImuConfig,
    pub camera: CameraConfig,
    pub landmarks: LandmarkConfig,
    pub prior: PriorConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 1,
            noise_free: false,
            trajectory: TrajectoryConfig {
                radius: 3.0,
                path_length: 120.0,
                duration: 60.0,
                vertical_amplitude: 0.5,
                vertical_frequency: 0.1,
            },
            imu: ImuConfig {
                rate: 200.0,
                keyframe_rate: 2.5,
                initial_bias_sigma: 0.02,
                noise: ImuNoiseModel::default(),
            },
            camera: CameraConfig {
                focal: 315.0,
                width: 640.0,
                height: 480.0,
                pixel_sigma: 1.0,
                max_obs_per_frame: 50,
            },
            landmarks: LandmarkConfig {
                count: 800,
                room_size: 10.0,
                min_height: 0.0,
                max_height: 4.0,
            },
            prior: PriorConfig {
                rotation_var: 1e-4,
                position_var: 1e-6,
                velocity_var: 1e-4,
            },
        }
    }
}

fn positive(field: &'static str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::Invalid {
            field,
            reason: format!("must be positive and finite, got {v}"),
        })
    }
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<SimConfig, ConfigError> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.trajectory;
        positive("trajectory.radius", t.radius)?;
        positive("trajectory.path_length", t.path_length)?;
        positive("trajectory.duration", t.duration)?;
        if !(t.vertical_amplitude.is_finite() && t.vertical_amplitude >= 0.0) {
            return Err(ConfigError::Invalid {
                field: "trajectory.vertical_amplitude",
                reason: "must be non-negative".into(),
            });
        }
        if !(t.vertical_frequency.is_finite() && t.vertical_frequency >= 0.0) {
            return Err(ConfigError::Invalid {
                field: "trajectory.vertical_frequency",
                reason: "must be non-negative".into(),
            });
        }
        let i = &self.imu;
        positive("imu.rate", i.rate)?;
        positive("imu.keyframe_rate", i.keyframe_rate)?;
        positive("imu.noise.gyro_noise_density", i.noise.gyro_noise_density)?;
        positive("imu.noise.accel_noise_density", i.noise.accel_noise_density)?;
        positive("imu.noise.gyro_bias_density", i.noise.gyro_bias_density)?;
        positive("imu.noise.accel_bias_density", i.noise.accel_bias_density)?;
        if !(i.initial_bias_sigma.is_finite() && i.initial_bias_sigma >= 0.0) {
            return Err(ConfigError::Invalid {
                field: "imu.initial_bias_sigma",
                reason: "must be non-negative".into(),
            });
        }
        let ratio = i.rate / i.keyframe_rate;
        if ratio < 1.0 || (ratio - ratio.round()).abs() > 1e-9 {
            return Err(ConfigError::Invalid {
                field: "imu.keyframe_rate",
                reason: format!("imu.rate / keyframe_rate must be a positive integer, got {ratio}"),
            });
        }
        if self.num_keyframes() < 2 {
            return Err(ConfigError::Invalid {
                field: "trajectory.duration",
                reason: "fewer than two keyframes".into(),
            });
        }
        let c = &self.camera;
        positive("camera.focal", c.focal)?;
        positive("camera.width", c.width)?;
        positive("camera.height", c.height)?;
        positive("camera.pixel_sigma", c.pixel_sigma)?;
        let l = &self.landmarks;
        positive("landmarks.room_size", l.room_size)?;
        if !(l.max_height > l.min_height) {
            return Err(ConfigError::Invalid {
                field: "landmarks.max_height",
                reason: "must exceed min_height".into(),
            });
        }
        if 2.0 * t.radius >= l.room_size {
            return Err(ConfigError::Invalid {
                field: "landmarks.room_size",
                reason: "room must enclose the trajectory".into(),
            });
        }
        let p = &self.prior;
        positive("prior.rotation_var", p.rotation_var)?;
        positive("prior.position_var", p.position_var)?;
        positive("prior.velocity_var", p.velocity_var)?;
        Ok(())
    }

    pub fn trajectory_params(&self) -> TrajectoryParams {
        let t = &self.trajectory;
        TrajectoryParams::with_path_length(
            t.radius,
            t.path_length,
            t.duration,
            t.vertical_amplitude,
            t.vertical_frequency,
        )
    }

    pub fn samples_per_keyframe(&self) -> usize {
        (self.imu.rate / self.imu.keyframe_rate).round() as usize
    }

    pub fn num_keyframes(&self) -> usize {
        (self.trajectory.duration * self.imu.keyframe_rate + 1e-9).floor() as usize
    }

    pub fn camera_model(&self) -> CameraModel {
        CameraModel::forward_looking(self.camera.focal, self.camera.width, self.camera.height)
    }
}
