//! Growing engine: the open-gate convergence trigger, the Gaussian weight
//! initializer, and the SVD-based orthogonal initializer for new neurons.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use thiserror::Error;

use crate::net::{NetError, Network};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GrowError {
    #[error("gaussian init needs at least one input, got 0")]
    ZeroFanIn,
}

/// Relative singular-value cutoff for the orthogonal basis.
pub const DEFAULT_RANK_EPS: f64 = 1e-6;

/// Watches the deterministic open-gate count and decides when a growing
/// phase should fire: the relative change of the count against its running
/// mean over the last `window` epochs fell below `theta`, growth is still
/// allowed (`epoch < grow_cutoff`), and the phase budget is not exhausted.
#[derive(Debug, Clone)]
pub struct GrowthMonitor {
    history: VecDeque<usize>,
    window: usize,
    theta: f64,
    phases_done: usize,
    max_phases: usize,
    grow_cutoff: usize,
}

impl GrowthMonitor {
    pub fn new(window: usize, theta: f64, max_phases: usize, grow_cutoff: usize) -> Self {
        assert!(window >= 1, "window must be at least 1");
        GrowthMonitor {
            history: VecDeque::with_capacity(window),
            window,
            theta,
            phases_done: 0,
            max_phases,
            grow_cutoff,
        }
    }

    /// Decision against the current window, which never includes this
    /// epoch's own observation. Warm-up (empty window) never grows; a
    /// fully pruned network (zero mean) never grows.
    pub fn should_grow(&self, n_gates: usize, epoch: usize) -> bool {
        if self.history.is_empty() {
            return false;
        }
        let n_mean = self.history.iter().sum::<usize>() as f64 / self.history.len() as f64;
        if n_mean <= 0.0 {
            return false;
        }
        let ratio = (n_mean - n_gates as f64) / n_mean;
        ratio < self.theta && epoch < self.grow_cutoff && self.phases_done < self.max_phases
    }

    /// Evaluate the trigger, then record the observation.
    pub fn observe(&mut self, n_gates: usize, epoch: usize) -> bool {
        let fire = self.should_grow(n_gates, epoch);
        if self.history.len() == self.window {
            self.history.pop_front();
        }
        self.history.push_back(n_gates);
        fire
    }

    /// Reset the window after a growing phase so the post-growth jump in
    /// gate count cannot re-trigger against a stale mean.
    pub fn note_growth(&mut self) {
        self.phases_done += 1;
        self.history.clear();
    }

    pub fn phases_done(&self) -> usize {
        self.phases_done
    }
}

/// Independent draws from N(0, sigma) with sigma = 1/n_inputs read as the
/// standard deviation.
pub fn gaussian_values<S: Scalar>(
    n_inputs: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<S>, GrowError> {
    if n_inputs == 0 {
        return Err(GrowError::ZeroFanIn);
    }
    let normal = Normal::new(0.0, 1.0 / n_inputs as f64).expect("positive sigma");
    Ok((0..count).map(|_| S::from_f64(rng.sample(normal))).collect())
}

/// Existing incoming weights of one layer as columns: column `j` is the
/// vectorized weight set of neuron `j`, length `rows`.
#[derive(Debug, Clone)]
pub struct ColumnMatrix {
    pub rows: usize,
    pub columns: Vec<Vec<f64>>,
}

impl ColumnMatrix {
    pub fn cols(&self) -> usize {
        self.columns.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Orthogonal,
    GaussianFallback,
}

/// Pre-sign least-squares step: given the centered weight matrix and the
/// random vector, return the vector orthogonal to the epsilon-truncated
/// singular basis of the column space with unit projection on the random
/// vector (minimum-norm least-squares solution).
pub fn orthogonal_solve(
    centered: &ColumnMatrix,
    random_vector: &[f64],
    rank_eps: f64,
) -> Vec<f64> {
    let m = centered.rows;
    let n = centered.cols();
    assert_eq!(random_vector.len(), m);

    let mat = DMatrix::from_fn(m, n, |i, j| centered.columns[j][i]);
    let svd = mat.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let s_max = svd
        .singular_values
        .iter()
        .fold(0.0f64, |acc, &s| acc.max(s));

    let kept: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| s_max > 0.0 && svd.singular_values[i] > rank_eps * s_max)
        .collect();
    let r = kept.len();

    // system: basis^T w = 0, rv^T w = 1, solved in least squares
    let mut a = DMatrix::zeros(m, r + 1);
    for (col, &i) in kept.iter().enumerate() {
        a.set_column(col, &u.column(i));
    }
    for i in 0..m {
        a[(i, r)] = random_vector[i];
    }
    let at = a.transpose();
    let mut c = DMatrix::zeros(r + 1, 1);
    c[(r, 0)] = 1.0;

    let svd_at = at.svd(true, true);
    let at_smax = svd_at
        .singular_values
        .iter()
        .fold(0.0f64, |acc, &s| acc.max(s));
    let solve_eps = if at_smax > 0.0 { 1e-12 * at_smax } else { 1e-12 };
    let w = svd_at.solve(&c, solve_eps).expect("svd solve");
    w.column(0).iter().copied().collect()
}

/// Weight vector for one new neuron alongside `existing` neurons.
///
/// With fewer existing columns than the vector dimension, falls back to
/// Gaussian draws (n_inputs = vector length). Otherwise: center the
/// columns, orthogonalize against the truncated singular basis with a
/// fresh N(0,1) vector, randomize the signs of the solution's magnitudes,
/// and uncenter.
pub fn orthogonal_new_weight<S: Scalar>(
    existing: &ColumnMatrix,
    rng: &mut ChaCha8Rng,
    rank_eps: f64,
) -> (Vec<S>, InitKind) {
    let m = existing.rows;
    let n = existing.cols();
    if n < m {
        let values = gaussian_values(m, m, rng).expect("m >= 1");
        return (values, InitKind::GaussianFallback);
    }

    let mut mu = vec![0.0f64; m];
    for col in &existing.columns {
        for (s, &v) in mu.iter_mut().zip(col.iter()) {
            *s += v;
        }
    }
    for s in mu.iter_mut() {
        *s /= n as f64;
    }
    let centered = ColumnMatrix {
        rows: m,
        columns: existing
            .columns
            .iter()
            .map(|col| col.iter().zip(mu.iter()).map(|(&v, &u)| v - u).collect())
            .collect(),
    };

    let normal = Normal::new(0.0, 1.0).expect("unit sigma");
    let rv: Vec<f64> = (0..m).map(|_| rng.sample(normal)).collect();
    let w = orthogonal_solve(&centered, &rv, rank_eps);

    let signed: Vec<S> = w
        .iter()
        .zip(mu.iter())
        .map(|(&wi, &mi)| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            S::from_f64(sign * wi.abs() + mi)
        })
        .collect();
    (signed, InitKind::Orthogonal)
}

/// Initializer used while mutating the network during a growing phase.
pub trait GrowthInit<S: Scalar> {
    /// Incoming weight vector for one new neuron (old sources -> new unit).
    fn incoming_column(&mut self, existing: &ColumnMatrix) -> Vec<S>;
    /// Gaussian draws for everything else (new -> old, new layers).
    fn gaussian(&mut self, n_inputs: usize, count: usize) -> Vec<S>;
}

/// Orthogonal incoming initialization (with its Gaussian fallback).
pub struct OrthogonalGrowth<'r> {
    pub rng: &'r mut ChaCha8Rng,
    pub rank_eps: f64,
}

impl<S: Scalar> GrowthInit<S> for OrthogonalGrowth<'_> {
    fn incoming_column(&mut self, existing: &ColumnMatrix) -> Vec<S> {
        orthogonal_new_weight(existing, self.rng, self.rank_eps).0
    }
    fn gaussian(&mut self, n_inputs: usize, count: usize) -> Vec<S> {
        gaussian_values(n_inputs, count, self.rng).expect("positive fan-in")
    }
}

/// Plain Gaussian initialization for every new weight.
pub struct GaussianGrowth<'r> {
    pub rng: &'r mut ChaCha8Rng,
}

impl<S: Scalar> GrowthInit<S> for GaussianGrowth<'_> {
    fn incoming_column(&mut self, existing: &ColumnMatrix) -> Vec<S> {
        gaussian_values(existing.rows, existing.rows, self.rng).expect("positive fan-in")
    }
    fn gaussian(&mut self, n_inputs: usize, count: usize) -> Vec<S> {
        gaussian_values(n_inputs, count, self.rng).expect("positive fan-in")
    }
}

/// One architecture mutation of a growing phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    GrowChannels {
        block: usize,
        layer: usize,
        count: usize,
    },
    AddLayer {
        block: usize,
        width: usize,
    },
}

/// The full growing phase: `count` new channels for every existing layer in
/// topology order, then one new `count`-wide layer at the end of every
/// block.
pub fn plan_growth<S: Scalar>(net: &Network<S>, count: usize) -> Vec<Mutation> {
    assert!(count >= 1);
    let widths = net.block_widths();
    let mut plan = Vec::new();
    for (block, layers) in widths.iter().enumerate() {
        for layer in 0..layers.len() {
            plan.push(Mutation::GrowChannels {
                block,
                layer,
                count,
            });
        }
    }
    for block in 0..widths.len() {
        plan.push(Mutation::AddLayer {
            block,
            width: count,
        });
    }
    plan
}

/// Apply a growth plan in order.
pub fn execute_plan<S: Scalar>(
    net: &mut Network<S>,
    plan: &[Mutation],
    init: &mut dyn GrowthInit<S>,
) -> Result<(), NetError> {
    for mutation in plan {
        match *mutation {
            Mutation::GrowChannels {
                block,
                layer,
                count,
            } => net.grow_channels(block, layer, count, init)?,
            Mutation::AddLayer { block, width } => {
                net.add_layer(block, width, init)?;
            }
        }
    }
    Ok(())
}
