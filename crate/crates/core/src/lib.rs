//! Visual-inertial odometry building blocks: SO(3) calculus, IMU preintegration,
//! factor linearization, a batch Gauss-Newton smoother, a synthetic simulator and
//! evaluation metrics.

pub mod estimator;
pub mod evaluation;
pub mod factors;
pub mod liealg;
pub mod montecarlo;
pub mod optimizer;
pub mod preintegration;
pub mod simulator;
pub mod solver;
pub mod state;
pub mod studies;
