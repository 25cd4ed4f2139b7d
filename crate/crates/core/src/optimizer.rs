//! Batch Gauss-Newton smoothing over keyframe states.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::factors::{
    linearize_bias, linearize_imu, structureless_factor, CameraModel, FactorError, LandmarkTrack,
    LinearizedFactor, Mat15, PriorFactor,
};
use crate::liealg::Vec3;
use crate::preintegration::{ImuNoiseModel, PreintegratedImu};
use crate::solver::{factor_spd, SolverError, SpdFactor};
use crate::state::{NavState, StateTangent, STATE_DIM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error(transparent)]
    Linear(#[from] SolverError),
    #[error("factor between keyframes {keys:?} failed: {source}")]
    Factor {
        keys: Vec<usize>,
        source: FactorError,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImuEdge {
    pub i: usize,
    pub j: usize,
    pub pre: PreintegratedImu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorGraph {
    pub num_states: usize,
    pub prior: Option<PriorFactor>,
    pub imu: Vec<ImuEdge>,
    pub tracks: Vec<LandmarkTrack>,
    pub camera: CameraModel,
    pub gravity: Vec3,
    pub noise: ImuNoiseModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostBreakdown {
    pub prior: f64,
    pub imu: f64,
    pub bias: f64,
    pub vision: f64,
    pub skipped_vision: usize,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.prior + self.imu + self.bias + self.vision
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnOptions {
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Costs below this are treated as converged.
    pub abs_tol: f64,
    pub lambda_init: f64,
    pub lambda_max: f64,
}

impl Default for GnOptions {
    fn default() -> Self {
        GnOptions {
            max_iters: 50,
            rel_tol: 1e-8,
            abs_tol: 1e-20,
            lambda_init: 1e-4,
            lambda_max: 1e4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after every accepted iteration, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub converged: bool,
    pub damped_steps: usize,
    pub skipped_vision: usize,
    pub last_marginal: Option<Mat15>,
}

/// Normal equations `H δ = −g` of the linearized cost.
pub struct NormalEquations {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub cost: f64,
    pub skipped_vision: usize,
}

impl FactorGraph {
    pub fn new(num_states: usize, camera: CameraModel, gravity: Vec3, noise: ImuNoiseModel) -> Self {
        FactorGraph {
            num_states,
            prior: None,
            imu: Vec::new(),
            tracks: Vec::new(),
            camera,
            gravity,
            noise,
        }
    }

    pub fn dim(&self) -> usize {
        STATE_DIM * self.num_states
    }

    pub fn validate(&self, states: &[NavState]) -> Result<(), SolveError> {
        if states.len() != self.num_states {
            return Err(SolveError::InvalidGraph(format!(
                "{} states supplied for a graph over {}",
                states.len(),
                self.num_states
            )));
        }
        if let Some(p) = &self.prior {
            if p.key >= self.num_states {
                return Err(SolveError::InvalidGraph("prior references a missing state".into()));
            }
        }
        for e in &self.imu {
            if e.j != e.i + 1 || e.j >= self.num_states {
                return Err(SolveError::InvalidGraph(format!(
                    "IMU factor ({}, {}) does not chain consecutive keyframes",
                    e.i, e.j
                )));
            }
        }
        for t in &self.tracks {
            if t.observations.iter().any(|o| o.keyframe >= self.num_states) {
                return Err(SolveError::InvalidGraph(format!(
                    "track {} references a missing keyframe",
                    t.landmark_id
                )));
            }
        }
        if states.iter().any(|s| !s.is_finite()) {
            return Err(SolveError::InvalidGraph("non-finite state".into()));
        }
        Ok(())
    }

    /// Linearizes every factor; degenerate vision factors are skipped and counted.
    pub fn linearize(&self, states: &[NavState]) -> Result<(Vec<LinearizedFactor>, usize), SolveError> {
        let mut out = Vec::with_capacity(1 + 2 * self.imu.len() + self.tracks.len());
        if let Some(p) = &self.prior {
            out.push(p.linearize(&states[p.key]).map_err(|source| SolveError::Factor {
                keys: vec![p.key],
                source,
            })?);
        }
        for e in &self.imu {
            let (si, sj) = (&states[e.i], &states[e.j]);
            let wrap = |source| SolveError::Factor {
                keys: vec![e.i, e.j],
                source,
            };
            out.push(linearize_imu((e.i, e.j), si, sj, &e.pre, &self.gravity).map_err(wrap)?);
            out.push(linearize_bias((e.i, e.j), si, sj, &self.noise, e.pre.dt_total).map_err(wrap)?);
        }
        let vision: Vec<Option<LinearizedFactor>> = self
            .tracks
            .par_iter()
            .map(|t| structureless_factor(t, states, &self.camera).ok())
            .collect();
        let skipped = vision.iter().filter(|v| v.is_none()).count();
        out.extend(vision.into_iter().flatten());
        Ok((out, skipped))
    }

    pub fn cost_breakdown(&self, states: &[NavState]) -> Result<CostBreakdown, SolveError> {
        let mut c = CostBreakdown::default();
        if let Some(p) = &self.prior {
            let w = crate::factors::whitener(&p.cov).map_err(|source| SolveError::Factor {
                keys: vec![p.key],
                source,
            })?;
            c.prior = (w * p.residual(&states[p.key])).norm_squared();
        }
        for e in &self.imu {
            let (si, sj) = (&states[e.i], &states[e.j]);
            let wrap = |source| SolveError::Factor {
                keys: vec![e.i, e.j],
                source,
            };
            let w = crate::factors::whitener(&e.pre.cov).map_err(wrap)?;
            c.imu += (w * crate::factors::imu_residual(si, sj, &e.pre, &self.gravity)).norm_squared();
            let wb = crate::factors::whitener(&self.noise.bias_walk_cov(e.pre.dt_total)).map_err(wrap)?;
            c.bias += (wb * crate::factors::bias_residual(si, sj)).norm_squared();
        }
        let vision: Vec<Option<f64>> = self
            .tracks
            .par_iter()
            .map(|t| structureless_factor(t, states, &self.camera).ok().map(|f| f.cost()))
            .collect();
        c.skipped_vision = vision.iter().filter(|v| v.is_none()).count();
        c.vision = vision.into_iter().flatten().sum();
        Ok(c)
    }

    pub fn normal_equations(&self, states: &[NavState]) -> Result<NormalEquations, SolveError> {
        let (factors, skipped) = self.linearize(states)?;
        let n = self.dim();
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        let mut cost = 0.0;
        for f in &factors {
            accumulate(&mut h, &mut g, f);
            cost += f.cost();
        }
        Ok(NormalEquations {
            h,
            g,
            cost,
            skipped_vision: skipped,
        })
    }
}

fn accumulate(h: &mut DMatrix<f64>, g: &mut DVector<f64>, f: &LinearizedFactor) {
    let w = f.block_width;
    let jtj = f.jacobian.tr_mul(&f.jacobian);
    let jtr = f.jacobian.tr_mul(&f.residual);
    for (a, &ka) in f.keys.iter().enumerate() {
        let ra = ka * STATE_DIM;
        let mut gv = g.rows_mut(ra, w);
        gv += jtr.rows(a * w, w);
        for (b, &kb) in f.keys.iter().enumerate() {
            let cb = kb * STATE_DIM;
            let mut hv = h.view_mut((ra, cb), (w, w));
            hv += jtj.view((a * w, b * w), (w, w));
        }
    }
}

/// Total cost of the graph at `states`.
pub fn total_cost(graph: &FactorGraph, states: &[NavState]) -> Result<f64, SolveError> {
    graph.validate(states)?;
    Ok(graph.cost_breakdown(states)?.total())
}

pub fn retract_all(states: &[NavState], delta: &DVector<f64>) -> Vec<NavState> {
    states
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let d = StateTangent::from_iterator(delta.rows(k * STATE_DIM, STATE_DIM).iter().copied());
            s.retract(&d)
        })
        .collect()
}

fn damped(h: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let mut out = h.clone();
    for i in 0..h.nrows() {
        out[(i, i)] += lambda * h[(i, i)].max(1e-12);
    }
    out
}

/// Lift-solve-retract Gauss-Newton with a diagonal damping fallback.
pub fn gauss_newton(
    graph: &FactorGraph,
    init: &[NavState],
    opts: &GnOptions,
) -> Result<(Vec<NavState>, SolveReport), SolveError> {
    graph.validate(init)?;
    let mut states = init.to_vec();
    let mut ne = graph.normal_equations(&states)?;
    let initial_cost = ne.cost;
    let mut report = SolveReport {
        iterations: 0,
        initial_cost,
        final_cost: initial_cost,
        cost_history: vec![initial_cost],
        converged: initial_cost < opts.abs_tol,
        damped_steps: 0,
        skipped_vision: ne.skipped_vision,
        last_marginal: None,
    };
    let mut last_factor: Option<SpdFactor> = None;

    while !report.converged && report.iterations < opts.max_iters {
        let cost = ne.cost;
        let neg_g = -&ne.g;
        let factor = factor_spd(&ne.h)?;
        let mut accepted = None;
        let delta = factor.solve(&neg_g);
        let cand = retract_all(&states, &delta);
        // Linearizing at the candidate yields its cost and, if accepted, the next
        // normal equations.
        let cand_ne = graph.normal_equations(&cand)?;
        if cand_ne.cost <= cost {
            accepted = Some((cand, cand_ne, delta));
        } else {
            let mut lambda = opts.lambda_init;
            while lambda <= opts.lambda_max {
                let f = factor_spd(&damped(&ne.h, lambda))?;
                let delta = f.solve(&neg_g);
                let cand = retract_all(&states, &delta);
                let cand_cost = graph.cost_breakdown(&cand)?.total();
                report.damped_steps += 1;
                if cand_cost <= cost {
                    let cand_ne = graph.normal_equations(&cand)?;
                    accepted = Some((cand, cand_ne, delta));
                    break;
                }
                lambda *= 10.0;
            }
        }

        let Some((cand, cand_ne, delta)) = accepted else {
            // No step decreases the cost. This is a minimum to numerical precision
            // only if the gradient is negligible as well.
            report.converged = ne.g.amax() <= 1e-6 * cost.max(1.0);
            last_factor = Some(factor);
            break;
        };
        let new_cost = cand_ne.cost;
        states = cand;
        ne = cand_ne;
        report.iterations += 1;
        report.cost_history.push(new_cost);
        report.final_cost = new_cost;
        report.skipped_vision = ne.skipped_vision;
        let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
        if rel < opts.rel_tol || new_cost < opts.abs_tol || delta.amax() < 1e-12 {
            report.converged = true;
        }
    }

    let factor = match last_factor {
        Some(f) => f,
        None => factor_spd(&ne.h)?,
    };
    report.last_marginal = Some(marginal_block(&factor, graph.num_states - 1));
    Ok((states, report))
}

fn marginal_block(factor: &SpdFactor, keyframe: usize) -> Mat15 {
    let n = factor.dim();
    let mut e = DMatrix::zeros(n, STATE_DIM);
    for c in 0..STATE_DIM {
        e[(keyframe * STATE_DIM + c, c)] = 1.0;
    }
    let x = factor.solve_matrix(&e);
    let block = x.rows(keyframe * STATE_DIM, STATE_DIM);
    let m = Mat15::from_fn(|i, j| block[(i, j)]);
    (m + m.transpose()) * 0.5
}

/// Marginal covariance of one keyframe from the inverse of the normal matrix.
pub fn marginal_covariance(
    graph: &FactorGraph,
    states: &[NavState],
    keyframe: usize,
) -> Result<Mat15, SolveError> {
    graph.validate(states)?;
    if keyframe >= graph.num_states {
        return Err(SolveError::InvalidGraph(format!("keyframe {keyframe} out of range")));
    }
    let ne = graph.normal_equations(states)?;
    Ok(marginal_block(&factor_spd(&ne.h)?, keyframe))
}

/// Marginal covariances of every keyframe from a single factorization.
pub fn all_marginal_covariances(
    graph: &FactorGraph,
    states: &[NavState],
) -> Result<Vec<Mat15>, SolveError> {
    graph.validate(states)?;
    let ne = graph.normal_equations(states)?;
    let inv = factor_spd(&ne.h)?.inverse();
    Ok((0..graph.num_states)
        .map(|k| {
            let o = k * STATE_DIM;
            let m = Mat15::from_fn(|i, j| inv[(o + i, o + j)]);
            (m + m.transpose()) * 0.5
        })
        .collect())
}
