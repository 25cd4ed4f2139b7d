use nalgebra::SVector;

use crate::liealg::{Rotation, Vec3};
use crate::preintegration::ImuBias;

/// Dimension of a keyframe state's tangent space.
pub const STATE_DIM: usize = 15;

pub type StateTangent = SVector<f64, STATE_DIM>;

/// Tangent layout offsets: `[δφ, δp, δv, δb^g, δb^a]`.
pub mod offset {
    pub const ROT: usize = 0;
    pub const POS: usize = 3;
    pub const VEL: usize = 6;
    pub const BG: usize = 9;
    pub const BA: usize = 12;
}

/// Keyframe state `x_i = [R_i, p_i, v_i, b_i]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NavState {
    pub rotation: Rotation,
    pub position: Vec3,
    pub velocity: Vec3,
    pub bias: ImuBias,
}

impl NavState {
    pub fn new(rotation: Rotation, position: Vec3, velocity: Vec3, bias: ImuBias) -> Self {
        NavState {
            rotation,
            position,
            velocity,
            bias,
        }
    }

    /// Lifting retraction: `R·Exp(δφ)`, `p + R·δp`, `v + δv`, `b + δb`.
    pub fn retract(&self, delta: &StateTangent) -> NavState {
        let seg = |o: usize| Vec3::new(delta[o], delta[o + 1], delta[o + 2]);
        NavState {
            rotation: self.rotation.retract(&seg(offset::ROT)),
            position: self.position + self.rotation * seg(offset::POS),
            velocity: self.velocity + seg(offset::VEL),
            bias: ImuBias {
                gyro: self.bias.gyro + seg(offset::BG),
                accel: self.bias.accel + seg(offset::BA),
            },
        }
    }

    /// Inverse of [`NavState::retract`].
    pub fn local(&self, other: &NavState) -> StateTangent {
        let mut d = StateTangent::zeros();
        d.fixed_rows_mut::<3>(offset::ROT)
            .copy_from(&self.rotation.local(&other.rotation));
        d.fixed_rows_mut::<3>(offset::POS)
            .copy_from(&self.rotation.inverse_rotate(&(other.position - self.position)));
        d.fixed_rows_mut::<3>(offset::VEL)
            .copy_from(&(other.velocity - self.velocity));
        d.fixed_rows_mut::<3>(offset::BG)
            .copy_from(&(other.bias.gyro - self.bias.gyro));
        d.fixed_rows_mut::<3>(offset::BA)
            .copy_from(&(other.bias.accel - self.bias.accel));
        d
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.matrix().iter().all(|x| x.is_finite())
            && self.position.iter().all(|x| x.is_finite())
            && self.velocity.iter().all(|x| x.is_finite())
            && self.bias.is_finite()
    }
}
