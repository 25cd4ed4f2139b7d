//! Residuals and Jacobians of the factor families: preintegrated IMU, bias random
//! walk, state prior and structureless vision.
//!
//! Every linearized factor stores a whitened residual `r` and Jacobian `J` such that
//! the cost near the linearization point is `‖r + J δ‖²` for a right-perturbation
//! `δ` of the involved states.

use nalgebra::{
    Cholesky, DMatrix, DVector, Matrix2x3, SMatrix, SVector, Vector2, Vector6, QR, SVD,
};
use thiserror::Error;

use crate::liealg::{
    exp_so3, hat, log_so3, right_jacobian, right_jacobian_inv, LieError, Mat3, Pose, Vec3,
};
use crate::preintegration::{ImuNoiseModel, PreintegratedImu};
use crate::state::{offset, NavState, STATE_DIM};

pub type Vector9 = SVector<f64, 9>;
pub type Mat9x15 = SMatrix<f64, 9, 15>;
pub type Mat15 = SMatrix<f64, 15, 15>;

/// Depth below which a point is treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;
/// Largest accepted condition number of the triangulation design matrix.
pub const MAX_TRIANGULATION_COND: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FactorError {
    #[error("point has depth {0} m in the camera frame")]
    Cheirality(f64),
    #[error("degenerate landmark: {0}")]
    Degenerate(&'static str),
    #[error("covariance is not positive definite")]
    SingularCovariance,
    #[error(transparent)]
    Lie(#[from] LieError),
}

/// Pinhole camera rigidly attached to the body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub focal: f64,
    pub principal_point: Vector2<f64>,
    pub width: f64,
    pub height: f64,
    pub body_from_camera: Pose,
}

impl CameraModel {
    /// Forward-looking camera: optical axis along body x, image x along body −y.
    pub fn forward_looking(focal: f64, width: f64, height: f64) -> Self {
        let r_bc = Mat3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
        CameraModel {
            focal,
            principal_point: Vector2::new(width / 2.0, height / 2.0),
            width,
            height,
            body_from_camera: Pose::new(
                crate::liealg::Rotation::from_matrix(r_bc).expect("valid rotation"),
                Vec3::zeros(),
            ),
        }
    }

    pub fn in_image(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.x < self.width && px.y >= 0.0 && px.y < self.height
    }

    /// World pose of the camera for a body state.
    pub fn world_from_camera(&self, state: &NavState) -> Pose {
        Pose::new(state.rotation, state.position).compose(&self.body_from_camera)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub keyframe: usize,
    pub pixel: Vector2<f64>,
    pub sigma: f64,
}

/// All observations of one landmark; keyframe ids are distinct.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkTrack {
    pub landmark_id: usize,
    pub observations: Vec<Observation>,
}

/// Whitened linearization of one factor.
///
/// Column block `k` of `jacobian` has width `block_width` and maps to the first
/// `block_width` tangent coordinates of state `keys[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedFactor {
    pub keys: Vec<usize>,
    pub block_width: usize,
    pub jacobian: DMatrix<f64>,
    pub residual: DVector<f64>,
}

impl LinearizedFactor {
    pub fn cost(&self) -> f64 {
        self.residual.norm_squared()
    }

    pub fn dim(&self) -> usize {
        self.residual.len()
    }

    /// Jacobian padded to full 15-column blocks per involved state.
    pub fn full_jacobian(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), STATE_DIM * self.keys.len());
        for k in 0..self.keys.len() {
            out.view_mut((0, k * STATE_DIM), (self.dim(), self.block_width))
                .copy_from(&self.jacobian.columns(k * self.block_width, self.block_width));
        }
        out
    }
}

/// Upper-triangular `W` with `WᵀW = Σ⁻¹`.
pub fn whitener<const N: usize>(
    cov: &SMatrix<f64, N, N>,
) -> Result<SMatrix<f64, N, N>, FactorError> {
    let info = Cholesky::new(*cov)
        .ok_or(FactorError::SingularCovariance)?
        .inverse();
    let info = (info + info.transpose()) * 0.5;
    let chol = Cholesky::new(info).ok_or(FactorError::SingularCovariance)?;
    Ok(chol.l().transpose())
}

// ---------------------------------------------------------------------------
// Preintegrated IMU factor

/// `[r_ΔR; r_Δv; r_Δp]` with deltas corrected to the bias of `state_i`.
pub fn imu_residual(
    state_i: &NavState,
    state_j: &NavState,
    pre: &PreintegratedImu,
    gravity: &Vec3,
) -> Vector9 {
    let dt = pre.dt_total;
    let (dr, dv, dp) = pre.bias_corrected_delta(&state_i.bias);
    let ri = &state_i.rotation;
    let r_rot = log_so3(&(dr.transpose() * ri.transpose() * state_j.rotation));
    let r_vel = ri.inverse_rotate(&(state_j.velocity - state_i.velocity - gravity * dt)) - dv;
    let r_pos = ri.inverse_rotate(
        &(state_j.position - state_i.position - state_i.velocity * dt - gravity * (0.5 * dt * dt)),
    ) - dp;
    let mut r = Vector9::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&r_rot);
    r.fixed_rows_mut::<3>(3).copy_from(&r_vel);
    r.fixed_rows_mut::<3>(6).copy_from(&r_pos);
    r
}

/// Jacobians of [`imu_residual`] with respect to the tangent of state `i` and `j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuJacobians {
    pub wrt_i: Mat9x15,
    pub wrt_j: Mat9x15,
}

pub fn imu_residual_jacobians(
    state_i: &NavState,
    state_j: &NavState,
    pre: &PreintegratedImu,
    gravity: &Vec3,
) -> Result<ImuJacobians, FactorError> {
    let dt = pre.dt_total;
    let r = imu_residual(state_i, state_j, pre, gravity);
    let r_rot = Vec3::new(r[0], r[1], r[2]);
    let ri = state_i.rotation.matrix();
    let rj = state_j.rotation.matrix();
    let ri_t = ri.transpose();
    let jr_inv = right_jacobian_inv(&r_rot)?;
    let dbg = state_i.bias.gyro - pre.bias_lin.gyro;

    let mut di = Mat9x15::zeros();
    let mut dj = Mat9x15::zeros();
    let set = |m: &mut Mat9x15, row: usize, col: usize, b: Mat3| {
        m.fixed_view_mut::<3, 3>(row, col).copy_from(&b);
    };

    // Rotation residual.
    set(&mut di, 0, offset::ROT, -jr_inv * rj.transpose() * ri);
    set(&mut dj, 0, offset::ROT, jr_inv);
    let alpha = -jr_inv
        * exp_so3(&r_rot).matrix().transpose()
        * right_jacobian(&(pre.j_dr_dbg * dbg))
        * pre.j_dr_dbg;
    set(&mut di, 0, offset::BG, alpha);

    // Velocity residual.
    let dv_world = state_j.velocity - state_i.velocity - gravity * dt;
    set(&mut di, 3, offset::ROT, hat(&(ri_t * dv_world)));
    set(&mut di, 3, offset::VEL, -ri_t);
    set(&mut dj, 3, offset::VEL, ri_t);
    set(&mut di, 3, offset::BG, -pre.j_dv_dbg);
    set(&mut di, 3, offset::BA, -pre.j_dv_dba);

    // Position residual.
    let dp_world = state_j.position
        - state_i.position
        - state_i.velocity * dt
        - gravity * (0.5 * dt * dt);
    set(&mut di, 6, offset::ROT, hat(&(ri_t * dp_world)));
    set(&mut di, 6, offset::POS, -Mat3::identity());
    set(&mut dj, 6, offset::POS, ri_t * rj);
    set(&mut di, 6, offset::VEL, -ri_t * dt);
    set(&mut di, 6, offset::BG, -pre.j_dp_dbg);
    set(&mut di, 6, offset::BA, -pre.j_dp_dba);

    Ok(ImuJacobians { wrt_i: di, wrt_j: dj })
}

pub fn linearize_imu(
    keys: (usize, usize),
    state_i: &NavState,
    state_j: &NavState,
    pre: &PreintegratedImu,
    gravity: &Vec3,
) -> Result<LinearizedFactor, FactorError> {
    let w = whitener(&pre.cov)?;
    let r = w * imu_residual(state_i, state_j, pre, gravity);
    let jac = imu_residual_jacobians(state_i, state_j, pre, gravity)?;
    let mut j = DMatrix::zeros(9, 2 * STATE_DIM);
    j.view_mut((0, 0), (9, STATE_DIM)).copy_from(&(w * jac.wrt_i));
    j.view_mut((0, STATE_DIM), (9, STATE_DIM)).copy_from(&(w * jac.wrt_j));
    Ok(LinearizedFactor {
        keys: vec![keys.0, keys.1],
        block_width: STATE_DIM,
        jacobian: j,
        residual: DVector::from_column_slice(r.as_slice()),
    })
}

// ---------------------------------------------------------------------------
// Bias random walk

/// `[b^g_j − b^g_i; b^a_j − b^a_i]`.
pub fn bias_residual(state_i: &NavState, state_j: &NavState) -> Vector6<f64> {
    (state_j.bias - state_i.bias).to_vector()
}

pub fn linearize_bias(
    keys: (usize, usize),
    state_i: &NavState,
    state_j: &NavState,
    noise: &ImuNoiseModel,
    dt_ij: f64,
) -> Result<LinearizedFactor, FactorError> {
    let w = whitener(&noise.bias_walk_cov(dt_ij))?;
    let r = w * bias_residual(state_i, state_j);
    let mut j = DMatrix::zeros(6, 2 * STATE_DIM);
    j.view_mut((0, offset::BG), (6, 6)).copy_from(&(-w));
    j.view_mut((0, STATE_DIM + offset::BG), (6, 6)).copy_from(&w);
    Ok(LinearizedFactor {
        keys: vec![keys.0, keys.1],
        block_width: STATE_DIM,
        jacobian: j,
        residual: DVector::from_column_slice(r.as_slice()),
    })
}

// ---------------------------------------------------------------------------
// Prior

/// Gaussian prior on one state, expressed in the tangent space of `mean`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorFactor {
    pub key: usize,
    pub mean: NavState,
    pub cov: Mat15,
}

impl PriorFactor {
    pub fn residual(&self, state: &NavState) -> SVector<f64, 15> {
        self.mean.local(state)
    }

    pub fn jacobian(&self, state: &NavState) -> Result<Mat15, FactorError> {
        let r = self.residual(state);
        let mut j = Mat15::identity();
        let r_rot = Vec3::new(r[0], r[1], r[2]);
        j.fixed_view_mut::<3, 3>(offset::ROT, offset::ROT)
            .copy_from(&right_jacobian_inv(&r_rot)?);
        j.fixed_view_mut::<3, 3>(offset::POS, offset::POS).copy_from(
            &(self.mean.rotation.matrix().transpose() * state.rotation.matrix()),
        );
        Ok(j)
    }

    pub fn linearize(&self, state: &NavState) -> Result<LinearizedFactor, FactorError> {
        let w = whitener(&self.cov)?;
        let r = w * self.residual(state);
        let j = w * self.jacobian(state)?;
        Ok(LinearizedFactor {
            keys: vec![self.key],
            block_width: STATE_DIM,
            jacobian: DMatrix::from_column_slice(15, 15, j.as_slice()),
            residual: DVector::from_column_slice(r.as_slice()),
        })
    }
}

// ---------------------------------------------------------------------------
// Vision

/// Pixel projection of a world point.
pub fn project(state: &NavState, cam: &CameraModel, landmark: &Vec3) -> Result<Vector2<f64>, FactorError> {
    let pc = cam.world_from_camera(state).inverse().transform_point(landmark);
    if pc.z <= MIN_DEPTH {
        return Err(FactorError::Cheirality(pc.z));
    }
    Ok(cam.principal_point + Vector2::new(pc.x / pc.z, pc.y / pc.z) * cam.focal)
}

/// Projection with Jacobians with respect to `[δφ, δp]` of the state and the landmark.
pub fn project_with_jacobians(
    state: &NavState,
    cam: &CameraModel,
    landmark: &Vec3,
) -> Result<(Vector2<f64>, SMatrix<f64, 2, 6>, Matrix2x3<f64>), FactorError> {
    let r_bc_t = cam.body_from_camera.rotation.matrix().transpose();
    let pb = state.rotation.inverse_rotate(&(landmark - state.position));
    let pc = r_bc_t * (pb - cam.body_from_camera.translation);
    if pc.z <= MIN_DEPTH {
        return Err(FactorError::Cheirality(pc.z));
    }
    let iz = 1.0 / pc.z;
    let px = cam.principal_point + Vector2::new(pc.x * iz, pc.y * iz) * cam.focal;
    let d_pix_d_pc = Matrix2x3::new(
        iz, 0.0, -pc.x * iz * iz,
        0.0, iz, -pc.y * iz * iz,
    ) * cam.focal;
    let d_pc_d_pb = d_pix_d_pc * r_bc_t;
    let mut d_pose = SMatrix::<f64, 2, 6>::zeros();
    d_pose.fixed_view_mut::<2, 3>(0, 0).copy_from(&(d_pc_d_pb * hat(&pb)));
    d_pose.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-d_pc_d_pb));
    let d_l = d_pc_d_pb * state.rotation.matrix().transpose();
    Ok((px, d_pose, d_l))
}

/// Linear triangulation from normalized image coordinates.
pub fn triangulate(
    track: &LandmarkTrack,
    states: &[NavState],
    cam: &CameraModel,
) -> Result<Vec3, FactorError> {
    let n = track.observations.len();
    if n < 2 {
        return Err(FactorError::Degenerate("fewer than two observations"));
    }
    let mut a = DMatrix::<f64>::zeros(2 * n, 3);
    let mut b = DVector::<f64>::zeros(2 * n);
    let mut poses = Vec::with_capacity(n);
    for (k, obs) in track.observations.iter().enumerate() {
        let state = states
            .get(obs.keyframe)
            .ok_or(FactorError::Degenerate("observation references a missing keyframe"))?;
        let t_cw = cam.world_from_camera(state).inverse();
        let rot = *t_cw.rotation.matrix();
        let t = t_cw.translation;
        let xn = (obs.pixel - cam.principal_point) / cam.focal;
        for (row, coord) in [(0usize, xn.x), (1usize, xn.y)] {
            let coef = rot.row(2) * coord - rot.row(row);
            a.row_mut(2 * k + row).copy_from(&coef);
            b[2 * k + row] = t[row] - coord * t[2];
        }
        poses.push(t_cw);
    }
    let svd = SVD::new(a, true, true);
    let sv = &svd.singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 0.0) || smax / smin > MAX_TRIANGULATION_COND {
        return Err(FactorError::Degenerate("ill-conditioned triangulation"));
    }
    let x = svd
        .solve(&b, 0.0)
        .map_err(|_| FactorError::Degenerate("triangulation solve failed"))?;
    let point = Vec3::new(x[0], x[1], x[2]);
    if poses.iter().all(|p| p.transform_point(&point).z <= MIN_DEPTH) {
        return Err(FactorError::Degenerate("point behind every camera"));
    }
    Ok(point)
}

/// Orthonormal basis of the left null space of a full-column-rank `E` (2n × 3),
/// returned as a 2n × (2n − 3) matrix.
pub fn null_space_basis(e: &DMatrix<f64>) -> Result<DMatrix<f64>, FactorError> {
    check_rank(e)?;
    let m = e.nrows();
    let qr = QR::new(e.clone());
    let mut qt = DMatrix::<f64>::identity(m, m);
    qr.q_tr_mul(&mut qt);
    Ok(qt.rows(3, m - 3).transpose())
}

fn check_rank(e: &DMatrix<f64>) -> Result<(), FactorError> {
    if e.nrows() < 4 || e.ncols() != 3 {
        return Err(FactorError::Degenerate("landmark Jacobian has rank below 3"));
    }
    let sv = e.singular_values();
    if !(sv.min() > 1e-10 * sv.max()) {
        return Err(FactorError::Degenerate("landmark Jacobian has rank below 3"));
    }
    Ok(())
}

/// Whitened stacked linearization of a track around a landmark estimate:
/// `F` (2n × 6n, block-diagonal in pose columns), `E` (2n × 3) and `b = z − π(x)`.
pub struct TrackLinearization {
    pub keys: Vec<usize>,
    pub f: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub b: DVector<f64>,
}

pub fn linearize_track(
    track: &LandmarkTrack,
    states: &[NavState],
    cam: &CameraModel,
    landmark: &Vec3,
) -> Result<TrackLinearization, FactorError> {
    let n = track.observations.len();
    let mut f = DMatrix::zeros(2 * n, 6 * n);
    let mut e = DMatrix::zeros(2 * n, 3);
    let mut b = DVector::zeros(2 * n);
    let mut keys = Vec::with_capacity(n);
    for (k, obs) in track.observations.iter().enumerate() {
        let state = states
            .get(obs.keyframe)
            .ok_or(FactorError::Degenerate("observation references a missing keyframe"))?;
        let (px, d_pose, d_l) = project_with_jacobians(state, cam, landmark)?;
        let w = 1.0 / obs.sigma;
        f.view_mut((2 * k, 6 * k), (2, 6)).copy_from(&(d_pose * w));
        e.view_mut((2 * k, 0), (2, 3)).copy_from(&(d_l * w));
        b.rows_mut(2 * k, 2).copy_from(&((obs.pixel - px) * w));
        keys.push(obs.keyframe);
    }
    Ok(TrackLinearization { keys, f, e, b })
}

/// Landmark-only Gauss-Newton refinement of the reprojection error, starting from
/// the linear triangulation.
pub fn refine_landmark(
    track: &LandmarkTrack,
    states: &[NavState],
    cam: &CameraModel,
    init: Vec3,
    iterations: usize,
) -> Result<Vec3, FactorError> {
    let mut l = init;
    for _ in 0..iterations {
        let lin = linearize_track(track, states, cam, &l)?;
        let h = lin.e.transpose() * &lin.e;
        let g = lin.e.transpose() * &lin.b;
        let Some(chol) = Cholesky::new(h) else {
            return Err(FactorError::Degenerate("landmark Jacobian has rank below 3"));
        };
        let step = chol.solve(&g);
        let cand = l + Vec3::new(step[0], step[1], step[2]);
        let cost = lin.b.norm_squared();
        match linearize_track(track, states, cam, &cand) {
            Ok(next) if next.b.norm_squared() <= cost => l = cand,
            _ => break,
        }
        if step.norm() < 1e-12 * (1.0 + l.norm()) {
            break;
        }
    }
    Ok(l)
}

/// Landmark-free vision factor: `(E⊥)ᵀF` and residual `−(E⊥)ᵀb`, so that the cost
/// is `‖(E⊥)ᵀ(Fδ − b)‖²`.
pub fn structureless_factor(
    track: &LandmarkTrack,
    states: &[NavState],
    cam: &CameraModel,
) -> Result<LinearizedFactor, FactorError> {
    let l0 = triangulate(track, states, cam)?;
    let l = refine_landmark(track, states, cam, l0, 5)?;
    let lin = linearize_track(track, states, cam, &l)?;
    check_rank(&lin.e)?;
    let m = lin.e.nrows();
    let qr = QR::new(lin.e);
    let mut f = lin.f;
    let mut b = lin.b;
    qr.q_tr_mul(&mut f);
    qr.q_tr_mul(&mut b);
    Ok(LinearizedFactor {
        keys: lin.keys,
        block_width: 6,
        jacobian: f.rows(3, m - 3).into_owned(),
        residual: -b.rows(3, m - 3).into_owned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liealg::Rotation;
    use crate::preintegration::{ImuBias, ImuSample};
    use crate::state::StateTangent;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rand_vec(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
        Vec3::from_fn(|_, _| rng.random_range(-s..s))
    }

    fn setup(rng: &mut ChaCha8Rng) -> (NavState, NavState, PreintegratedImu, Vec3) {
        let noise = ImuNoiseModel::default();
        let g = crate::preintegration::default_gravity();
        let bias_lin = ImuBias::new(rand_vec(rng, 0.05), rand_vec(rng, 0.2));
        let mut pre = PreintegratedImu::new(bias_lin);
        for k in 0..50 {
            let s = ImuSample::new(
                k as f64 * 0.005,
                rand_vec(rng, 1.0),
                rand_vec(rng, 2.0) - g,
            );
            pre.integrate(&s, 0.005, &noise).unwrap();
        }
        let xi = NavState::new(
            exp_so3(&rand_vec(rng, 2.0)),
            rand_vec(rng, 5.0),
            rand_vec(rng, 2.0),
            bias_lin + ImuBias::new(rand_vec(rng, 0.05), rand_vec(rng, 0.1)),
        );
        let mut xj = pre.predict(&xi, &g);
        let d = StateTangent::from_fn(|_, _| rng.random_range(-0.2..0.2));
        xj = xj.retract(&d);
        (xi, xj, pre, g)
    }

    #[test]
    fn imu_residual_zero_at_model_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut xi, _, pre, g) = setup(&mut rng);
        xi.bias = pre.bias_lin;
        let xj = pre.predict(&xi, &g);
        assert!(imu_residual(&xi, &xj, &pre, &g).norm() < 1e-9);
        let jac = imu_residual_jacobians(&xi, &xj, &pre, &g).unwrap();
        let block = jac.wrt_j.fixed_view::<3, 3>(0, 0).into_owned();
        assert_relative_eq!(block, Mat3::identity(), epsilon = 1e-9);

        let empty = PreintegratedImu::new(ImuBias::zero());
        let x = NavState::new(exp_so3(&Vec3::new(0.1, 0.2, 0.3)), Vec3::new(1.0, 0.0, 0.0), Vec3::zeros(), ImuBias::zero());
        assert_eq!(imu_residual(&x, &x, &empty, &g), Vector9::zeros());
    }

    #[test]
    fn imu_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (xi, xj, pre, g) = setup(&mut rng);
            let jac = imu_residual_jacobians(&xi, &xj, &pre, &g).unwrap();
            let h = 1e-6;
            for c in 0..15 {
                let mut d = StateTangent::zeros();
                d[c] = h;
                let fi = (imu_residual(&xi.retract(&d), &xj, &pre, &g)
                    - imu_residual(&xi.retract(&-d), &xj, &pre, &g))
                    / (2.0 * h);
                let fj = (imu_residual(&xi, &xj.retract(&d), &pre, &g)
                    - imu_residual(&xi, &xj.retract(&-d), &pre, &g))
                    / (2.0 * h);
                assert!((fi - jac.wrt_i.column(c)).norm() < 1e-6, "i col {c}");
                assert!((fj - jac.wrt_j.column(c)).norm() < 1e-6, "j col {c}");
            }
            // Documented closed-form blocks.
            let block = jac.wrt_j.fixed_view::<3, 3>(6, offset::POS).into_owned();
            assert_eq!(block, xi.rotation.matrix().transpose() * xj.rotation.matrix());
            assert_eq!(jac.wrt_j.fixed_view::<9, 6>(0, offset::BG).into_owned(), SMatrix::<f64, 9, 6>::zeros());
        }
    }

    #[test]
    fn bias_factor_is_linear() {
        let xi = NavState::default();
        let mut xj = NavState::default();
        assert_eq!(bias_residual(&xi, &xj), Vector6::zeros());
        xj.bias.gyro = Vec3::new(1e-3, 0.0, 0.0);
        assert_eq!(bias_residual(&xi, &xj), Vector6::new(1e-3, 0.0, 0.0, 0.0, 0.0, 0.0));
        let noise = ImuNoiseModel::default();
        let lin = linearize_bias((0, 1), &xi, &xj, &noise, 0.4).unwrap();
        let w = 1.0 / (noise.gyro_bias_density * 0.4f64.sqrt());
        assert_relative_eq!(lin.residual[0], 1e-3 * w, epsilon = 1e-9);
        assert_relative_eq!(lin.jacobian[(0, offset::BG)], -w, epsilon = 1e-9);
        assert_relative_eq!(lin.jacobian[(0, STATE_DIM + offset::BG)], w, epsilon = 1e-9);
        assert_eq!(lin.jacobian.columns(0, offset::BG).norm(), 0.0);
    }

    #[test]
    fn whitener_squares_to_information() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = SMatrix::<f64, 6, 6>::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let cov = a * a.transpose() + SMatrix::<f64, 6, 6>::identity() * 0.1;
        let w = whitener(&cov).unwrap();
        assert_relative_eq!(w.transpose() * w * cov, SMatrix::<f64, 6, 6>::identity(), epsilon = 1e-9);
        assert_eq!(w.lower_triangle() - SMatrix::<f64, 6, 6>::from_diagonal(&w.diagonal()), SMatrix::<f64, 6, 6>::zeros());
        assert!(whitener(&SMatrix::<f64, 3, 3>::zeros()).is_err());
    }

    #[test]
    fn prior_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (xi, xj, _, _) = setup(&mut rng);
        let prior = PriorFactor { key: 0, mean: xi, cov: Mat15::identity() };
        let j = prior.jacobian(&xj).unwrap();
        let h = 1e-6;
        for c in 0..15 {
            let mut d = StateTangent::zeros();
            d[c] = h;
            let fd = (prior.residual(&xj.retract(&d)) - prior.residual(&xj.retract(&-d))) / (2.0 * h);
            assert!((fd - j.column(c)).norm() < 1e-6);
        }
    }

    fn camera() -> CameraModel {
        CameraModel::forward_looking(315.0, 640.0, 480.0)
    }

    #[test]
    fn projection_examples() {
        let mut cam = camera();
        let x = NavState::default();
        // Optical axis is body x.
        let px = project(&x, &cam, &Vec3::new(4.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(px, cam.principal_point, epsilon = 1e-12);
        cam.principal_point = Vector2::zeros();
        // Camera-frame point [0.1, 0, 1] is body [1, -0.1, 0].
        let px = project(&x, &cam, &Vec3::new(1.0, -0.1, 0.0)).unwrap();
        assert_relative_eq!(px, Vector2::new(31.5, 0.0), epsilon = 1e-12);
        assert!(matches!(project(&x, &cam, &Vec3::new(-1.0, 0.0, 0.0)), Err(FactorError::Cheirality(_))));
    }

    #[test]
    fn projection_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cam = camera();
        let x = NavState::new(exp_so3(&rand_vec(&mut rng, 0.3)), rand_vec(&mut rng, 1.0), Vec3::zeros(), ImuBias::zero());
        let l = x.position + x.rotation * Vec3::new(5.0, 0.5, -0.3);
        let (_, dp, dl) = project_with_jacobians(&x, &cam, &l).unwrap();
        let h = 1e-6;
        for c in 0..6 {
            let mut d = StateTangent::zeros();
            d[c] = h;
            let fd = (project(&x.retract(&d), &cam, &l).unwrap() - project(&x.retract(&-d), &cam, &l).unwrap()) / (2.0 * h);
            assert!((fd - dp.column(c)).norm() < 1e-5);
        }
        for c in 0..3 {
            let mut d = Vec3::zeros();
            d[c] = h;
            let fd = (project(&x, &cam, &(l + d)).unwrap() - project(&x, &cam, &(l - d)).unwrap()) / (2.0 * h);
            assert!((fd - dl.column(c)).norm() < 1e-5);
        }
    }

    fn views(rng: &mut ChaCha8Rng, n: usize) -> Vec<NavState> {
        (0..n)
            .map(|k| {
                NavState::new(
                    Rotation::from_yaw(0.05 * k as f64) * exp_so3(&rand_vec(rng, 0.05)),
                    Vec3::new(0.0, 0.3 * k as f64, 0.1 * k as f64) + rand_vec(rng, 0.05),
                    Vec3::zeros(),
                    ImuBias::zero(),
                )
            })
            .collect()
    }

    fn observe(states: &[NavState], cam: &CameraModel, l: &Vec3, sigma: f64, rng: &mut ChaCha8Rng) -> LandmarkTrack {
        LandmarkTrack {
            landmark_id: 0,
            observations: states
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    let noise = Vector2::new(
                        StandardNormal.sample(rng),
                        StandardNormal.sample(rng),
                    ) * sigma;
                    Observation { keyframe: k, pixel: project(s, cam, l).unwrap() + noise, sigma: sigma.max(1.0) }
                })
                .collect(),
        }
    }

    #[test]
    fn triangulation_recovers_point_and_flags_degeneracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cam = camera();
        let states = views(&mut rng, 2);
        let l = Vec3::new(5.0, 1.0, 0.5);
        let track = observe(&states, &cam, &l, 0.0, &mut rng);
        assert!((triangulate(&track, &states, &cam).unwrap() - l).norm() < 1e-6);

        let single = LandmarkTrack { landmark_id: 0, observations: track.observations[..1].to_vec() };
        assert!(matches!(triangulate(&single, &states, &cam), Err(FactorError::Degenerate(_))));

        let same = vec![states[0]; 3];
        let track = observe(&same, &cam, &l, 0.0, &mut rng);
        assert!(matches!(triangulate(&track, &same, &cam), Err(FactorError::Degenerate(_))));
    }

    #[test]
    fn structureless_factor_zero_at_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cam = camera();
        let states = views(&mut rng, 6);
        let track = observe(&states, &cam, &Vec3::new(6.0, 1.0, 0.2), 0.0, &mut rng);
        let f = structureless_factor(&track, &states, &cam).unwrap();
        assert_eq!(f.dim(), 2 * 6 - 3);
        assert_eq!(f.jacobian.ncols(), 6 * 6);
        assert_eq!(f.full_jacobian().ncols(), 15 * 6);
        assert!(f.residual.norm() < 1e-9);
    }

    #[test]
    fn projector_identities_and_basis_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cam = camera();
        let states = views(&mut rng, 5);
        let l_true = Vec3::new(6.0, 1.0, 0.2);
        let track = observe(&states, &cam, &l_true, 1.0, &mut rng);
        let l = triangulate(&track, &states, &cam).unwrap();
        let lin = linearize_track(&track, &states, &cam, &l).unwrap();
        let (e, f, b) = (&lin.e, &lin.f, &lin.b);
        let m = e.nrows();
        let ete = (e.transpose() * e).try_inverse().unwrap();
        let q = DMatrix::identity(m, m) - e * ete * e.transpose();
        assert!((&q * &q - &q).norm() < 1e-10);
        assert!((&q - q.transpose()).norm() < 1e-10);
        assert!((&q * e).norm() < 1e-10);

        let basis = null_space_basis(e).unwrap();
        assert_eq!(basis.ncols(), m - 3);
        assert!((basis.transpose() * &basis - DMatrix::identity(m - 3, m - 3)).norm() < 1e-10);
        for _ in 0..5 {
            let d = DVector::from_fn(f.ncols(), |_, _| rng.random_range(-0.1..0.1));
            let v = f * d - b;
            let lhs = (&q * &v).norm_squared();
            let rhs = (basis.transpose() * &v).norm_squared();
            assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs), "{lhs} {rhs}");
        }

        // A rotated basis gives the same quadratic form.
        let k = m - 3;
        let rand = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
        let omega = QR::new(rand).q();
        let other = &basis * omega;
        let (j1, r1) = (basis.transpose() * f, basis.transpose() * b);
        let (j2, r2) = (other.transpose() * f, other.transpose() * b);
        assert!((j1.transpose() * &j1 - j2.transpose() * &j2).norm() < 1e-9);
        assert!((j1.transpose() * &r1 - j2.transpose() * &r2).norm() < 1e-9);
    }

    #[test]
    fn structureless_factor_rejects_rank_deficiency() {
        let mut e = DMatrix::<f64>::zeros(6, 3);
        e[(0, 0)] = 1.0;
        e[(1, 1)] = 1.0;
        assert!(matches!(null_space_basis(&e), Err(FactorError::Degenerate(_))));
    }
}
