//! Full-batch estimation of a simulated dataset.
//!
//! Keyframes are added in chunks: new states are predicted from the latest estimate
//! with the preintegrated IMU, the growing graph is relaxed with a few Gauss-Newton
//! iterations, and a final solve runs over the whole history.

use thiserror::Error;

use crate::factors::{LandmarkTrack, Mat15};
use crate::optimizer::{
    all_marginal_covariances, gauss_newton, FactorGraph, GnOptions, ImuEdge, SolveError, SolveReport,
};
use crate::preintegration::{default_gravity, PreintegrationError};
use crate::simulator::SimDataset;
use crate::state::NavState;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error(transparent)]
    Imu(#[from] PreintegrationError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorOptions {
    /// Keyframes added per incremental step.
    pub chunk: usize,
    /// Gauss-Newton iteration cap per incremental step.
    pub chunk_iters: usize,
    /// Relative cost-decrease tolerance of the incremental steps.
    pub chunk_rel_tol: f64,
    pub gn: GnOptions,
    /// Compute the marginal covariance of every keyframe.
    pub marginals: bool,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions {
            chunk: 5,
            chunk_iters: 8,
            chunk_rel_tol: 1e-4,
            gn: GnOptions::default(),
            marginals: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub states: Vec<NavState>,
    pub report: SolveReport,
    /// Per-keyframe 15×15 marginals, empty unless requested.
    pub marginals: Vec<Mat15>,
    pub graph: FactorGraph,
}

fn restrict_tracks(tracks: &[LandmarkTrack], end: usize) -> Vec<LandmarkTrack> {
    tracks
        .iter()
        .filter_map(|t| {
            let obs: Vec<_> = t.observations.iter().filter(|o| o.keyframe < end).copied().collect();
            (obs.len() >= 2).then(|| LandmarkTrack {
                landmark_id: t.landmark_id,
                observations: obs,
            })
        })
        .collect()
}

/// Runs the chunked initialization followed by a full-batch solve.
pub fn estimate(ds: &SimDataset, opts: &EstimatorOptions) -> Result<Estimate, EstimateError> {
    let n = ds.num_keyframes();
    let gravity = default_gravity();
    let mut graph = FactorGraph::new(1, ds.camera(), gravity, ds.noise());
    graph.prior = Some(ds.prior());
    let mut states = vec![ds.prior_mean];
    let chunk_opts = GnOptions {
        max_iters: opts.chunk_iters,
        rel_tol: opts.chunk_rel_tol,
        ..opts.gn
    };
    let chunk = opts.chunk.max(1);

    while states.len() < n {
        let end = (states.len() + chunk).min(n);
        for i in states.len() - 1..end - 1 {
            let pre = ds.preintegrate(i, states[i].bias)?;
            states.push(pre.predict(&states[i], &gravity));
            graph.imu.push(ImuEdge { i, j: i + 1, pre });
        }
        graph.num_states = end;
        graph.tracks = restrict_tracks(&ds.tracks, end);
        if end < n {
            states = gauss_newton(&graph, &states, &chunk_opts)?.0;
        }
    }

    let (states, report) = gauss_newton(&graph, &states, &opts.gn)?;
    let marginals = if opts.marginals {
        all_marginal_covariances(&graph, &states)?
    } else {
        Vec::new()
    };
    Ok(Estimate {
        states,
        report,
        marginals,
        graph,
    })
}
