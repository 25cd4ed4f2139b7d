//! SO(3) and SE(3) primitives.
//!
//! Rotations are stored as 3×3 matrices. All tangent perturbations are applied
//! on the right (body frame): `R ⊕ δφ = R·Exp(δφ)` and
//! `(R, p) ⊕ (δφ, δp) = (R·Exp(δφ), p + R·δp)`.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this angle the closed forms switch to their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-5;

/// Orthogonality residual tolerated before a rotation is re-projected onto SO(3).
pub const ORTHO_TOL: f64 = 1e-9;

/// Angles closer than this to π use the symmetric-part axis extraction in `log_so3`.
const NEAR_PI: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LieError {
    #[error("matrix is not antisymmetric (residual {0:.3e})")]
    NotAntisymmetric(f64),
    #[error("matrix is not a rotation (orthogonality residual {ortho:.3e}, det {det})")]
    NotRotation { ortho: f64, det: f64 },
    #[error("inverse right Jacobian undefined at angle {0} (must be < π)")]
    JacobianSingular(f64),
}

/// Skew-symmetric matrix `v^∧` such that `v^∧·w = v × w`.
pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`]. Rejects matrices whose symmetric part exceeds 1e-9.
pub fn vee(s: &Mat3) -> Result<Vec3, LieError> {
    let residual = (s + s.transpose()).norm();
    if residual > 1e-9 {
        return Err(LieError::NotAntisymmetric(residual));
    }
    Ok(vee_unchecked(s))
}

fn vee_unchecked(s: &Mat3) -> Vec3 {
    Vec3::new(
        0.5 * (s[(2, 1)] - s[(1, 2)]),
        0.5 * (s[(0, 2)] - s[(2, 0)]),
        0.5 * (s[(1, 0)] - s[(0, 1)]),
    )
}

/// A 3D rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Mat3);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    /// Validates `m` against the SO(3) invariants (within 1e-9).
    pub fn from_matrix(m: Mat3) -> Result<Self, LieError> {
        let ortho = orthogonality_residual(&m);
        let det = m.determinant();
        if !m.iter().all(|x| x.is_finite()) || ortho > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
            return Err(LieError::NotRotation { ortho, det });
        }
        Ok(Rotation(m))
    }

    /// Projects an approximately orthonormal matrix onto SO(3) (polar decomposition).
    pub fn from_matrix_projected(m: Mat3) -> Result<Self, LieError> {
        let svd = m.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        Rotation::from_matrix(r)
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn inverse(&self) -> Rotation {
        self.transpose()
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn inverse_rotate(&self, v: &Vec3) -> Vec3 {
        self.0.tr_mul(v)
    }

    /// `self · Exp(dphi)`.
    pub fn retract(&self, dphi: &Vec3) -> Rotation {
        *self * exp_so3(dphi)
    }

    /// `Log(selfᵀ · other)`: the right-perturbation taking `self` to `other`.
    pub fn local(&self, other: &Rotation) -> Vec3 {
        log_so3(&(self.transpose() * *other))
    }

    pub fn orthogonality_residual(&self) -> f64 {
        orthogonality_residual(&self.0)
    }

    /// Rotation about the z axis by `angle` radians.
    pub fn from_yaw(angle: f64) -> Rotation {
        exp_so3(&Vec3::new(0.0, 0.0, angle))
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Rotation::identity()
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        let m = self.0 * rhs.0;
        if orthogonality_residual(&m) > ORTHO_TOL {
            // Long products drift; snap back onto the manifold.
            Rotation::from_matrix_projected(m).unwrap_or(Rotation(m))
        } else {
            Rotation(m)
        }
    }
}

impl Mul<Vec3> for Rotation {
    type Output = Vec3;

    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

fn orthogonality_residual(m: &Mat3) -> f64 {
    (m.tr_mul(m) - Mat3::identity()).norm()
}

/// Exponential map (Rodrigues' formula).
pub fn exp_so3(phi: &Vec3) -> Rotation {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let w = hat(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation(Mat3::identity() + w * a + w * w * b)
}

/// Logarithm map; returns the rotation vector with norm in [0, π].
pub fn log_so3(r: &Rotation) -> Vec3 {
    let m = r.matrix();
    // s = sin(θ)·axis, c = cos(θ)
    let s = vee_unchecked(m);
    let c = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin_theta = s.norm();
    let theta = sin_theta.atan2(c);

    if theta < SMALL_ANGLE {
        // θ / sin θ ≈ 1 + θ²/6
        return s * (1.0 + theta * theta / 6.0);
    }
    if PI - theta > NEAR_PI {
        return s * (theta / sin_theta);
    }

    // Near π the antisymmetric part vanishes; read the axis from the symmetric part,
    // (R + Rᵀ)/2 − cos θ·I = (1 − cos θ)·n·nᵀ.
    let sym = (m + m.transpose()) * 0.5 - Mat3::identity() * c;
    let k = (0..3)
        .max_by(|&a, &b| sym[(a, a)].total_cmp(&sym[(b, b)]))
        .unwrap_or(0);
    let mut axis: Vec3 = sym.column(k).into_owned();
    axis /= axis.norm();
    if axis.dot(&s) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Right Jacobian of SO(3): `Exp(φ + δ) ≈ Exp(φ)·Exp(J_r(φ)·δ)`.
pub fn right_jacobian(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let w = hat(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Mat3::identity() - w * a + w * w * b
}

/// Inverse right Jacobian: `Log(Exp(φ)·Exp(δ)) ≈ φ + J_r⁻¹(φ)·δ`.
pub fn right_jacobian_inv(phi: &Vec3) -> Result<Mat3, LieError> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    if !(theta < PI - 1e-9) {
        return Err(LieError::JacobianSingular(theta));
    }
    let w = hat(phi);
    let b = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Ok(Mat3::identity() + w * 0.5 + w * w * b)
}

/// Rigid transform `(R, p)` mapping body coordinates to world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Pose { rotation, translation }
    }

    pub fn identity() -> Self {
        Pose::default()
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.translation + self.rotation * other.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, x: &Vec3) -> Vec3 {
        self.rotation * *x + self.translation
    }

    /// Inverse of [`retract_pose`]: the `(δφ, δp)` with `retract_pose(self, δφ, δp) == other`.
    pub fn local(&self, other: &Pose) -> (Vec3, Vec3) {
        (
            self.rotation.local(&other.rotation),
            self.rotation.inverse_rotate(&(other.translation - self.translation)),
        )
    }
}

/// SE(3) retraction `(R·Exp(δφ), p + R·δp)`.
pub fn retract_pose(pose: &Pose, dphi: &Vec3, dp: &Vec3) -> Pose {
    Pose {
        rotation: pose.rotation.retract(dphi),
        translation: pose.translation + pose.rotation * *dp,
    }
}
