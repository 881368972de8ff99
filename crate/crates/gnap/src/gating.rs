//! Stochastic binary gates over weights or whole convolution kernels.
//!
//! Every gate owns a trainable logit pair `(a_open, a_closed)`. During
//! training a hard {0,1} sample is drawn per forward pass through a
//! Gumbel-Softmax: the relaxed value `y = sigmoid((a_open + g_o - a_closed
//! - g_c) / tau)` is thresholded at 0.5, and the backward pass routes the
//! relaxed gradient through the hard sample (straight-through). By the
//! Gumbel-max property the hard sample opens with probability
//! `softmax(a_open, a_closed)` exactly, independent of the temperature.
//! At inference gates open deterministically when that probability exceeds
//! the threshold gamma (strictly).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Gumbel;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::{gate_sample, Tensor, TensorError};

/// Pruning granularity of a network: one gate per weight, or one gate per
/// k x k convolution kernel (fully connected bundles stay per-weight).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    PerWeight,
    PerKernel,
}

/// Gate logit giving an initial open probability of 0.9.
pub fn initial_open_logit() -> f64 {
    3f64.ln()
}

/// The gates of one connection bundle.
pub struct GateSet<S: Scalar> {
    logits: Tensor<S>,
    kernel_area: usize,
    tau: S,
    last_sample: Option<Tensor<S>>,
    last_relaxed: Vec<S>,
}

impl<S: Scalar> GateSet<S> {
    /// Fresh gates, all at open probability 0.9.
    pub fn new(gates: usize, kernel_area: usize, tau: S) -> Self {
        let a = S::from_f64(initial_open_logit());
        let mut values = Vec::with_capacity(gates * 2);
        for _ in 0..gates {
            values.push(a);
            values.push(-a);
        }
        GateSet {
            logits: Tensor::param(vec![gates, 2], values).expect("consistent length"),
            kernel_area,
            tau,
            last_sample: None,
            last_relaxed: Vec::new(),
        }
    }

    pub fn from_logit_pairs(pairs: &[(S, S)], kernel_area: usize, tau: S) -> Self {
        let mut values = Vec::with_capacity(pairs.len() * 2);
        for &(open, closed) in pairs {
            values.push(open);
            values.push(closed);
        }
        GateSet {
            logits: Tensor::param(vec![pairs.len(), 2], values).expect("consistent length"),
            kernel_area,
            tau,
            last_sample: None,
            last_relaxed: Vec::new(),
        }
    }

    pub fn gate_count(&self) -> usize {
        self.logits.len() / 2
    }

    pub fn kernel_area(&self) -> usize {
        self.kernel_area
    }

    pub fn tau(&self) -> S {
        self.tau
    }

    /// Trainable logit tensor, shape `[G,2]`.
    pub fn logits(&self) -> &Tensor<S> {
        &self.logits
    }

    pub fn set_logit_pair(&mut self, gate: usize, open: S, closed: S) {
        let mut values = self.logits.to_vec();
        values[2 * gate] = open;
        values[2 * gate + 1] = closed;
        self.logits.set_values(&values).expect("same length");
    }

    /// Hard Gumbel-Softmax sample; the returned mask participates in the
    /// differentiation graph with a straight-through backward.
    pub fn sample(&mut self, rng: &mut ChaCha8Rng) -> Result<Tensor<S>, TensorError> {
        let gumbel = Gumbel::new(0.0f64, 1.0).expect("standard gumbel");
        let noise: Vec<f64> = (0..self.gate_count() * 2)
            .map(|_| rng.sample(gumbel))
            .collect();
        let mask = gate_sample(&self.logits, &noise, self.tau)?;
        self.last_relaxed = relaxed_of(&mask);
        self.last_sample = Some(mask.clone());
        Ok(mask)
    }

    /// Mask from the most recent [`GateSet::sample`], if any.
    pub fn last_sample(&self) -> Option<&Tensor<S>> {
        self.last_sample.as_ref()
    }

    /// Relaxed sigmoid values saved by the most recent sample.
    pub fn last_relaxed(&self) -> &[S] {
        &self.last_relaxed
    }

    /// Softmax open probability per gate.
    pub fn open_probabilities(&self) -> Vec<f64> {
        let v = self.logits.to_vec();
        (0..self.gate_count())
            .map(|g| open_probability(v[2 * g].to_f64(), v[2 * g + 1].to_f64()))
            .collect()
    }

    /// Constant {0,1} mask: open iff the open probability strictly exceeds
    /// `gamma`.
    pub fn deterministic_mask(&self, gamma: f64) -> Tensor<S> {
        let values = self
            .open_probabilities()
            .iter()
            .map(|&p| if p > gamma { S::one() } else { S::zero() })
            .collect();
        Tensor::from_vec(vec![self.gate_count()], values).expect("consistent length")
    }

    /// Number of deterministically open gates at threshold `gamma`.
    pub fn open_count(&self, gamma: f64) -> usize {
        self.open_probabilities()
            .iter()
            .filter(|&&p| p > gamma)
            .count()
    }

    /// Append `extra` fresh gates at open probability 0.9.
    pub fn extend(&mut self, extra: usize) {
        let a = S::from_f64(initial_open_logit());
        let mut values = self.logits.to_vec();
        for _ in 0..extra {
            values.push(a);
            values.push(-a);
        }
        let gates = self.gate_count() + extra;
        self.logits = Tensor::param(vec![gates, 2], values).expect("consistent length");
        self.last_sample = None;
        self.last_relaxed.clear();
    }

    /// Keep only the gates whose flag is set; ordering is preserved.
    pub fn retain(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.gate_count());
        let old = self.logits.to_vec();
        let mut values = Vec::new();
        for (g, &flag) in keep.iter().enumerate() {
            if flag {
                values.push(old[2 * g]);
                values.push(old[2 * g + 1]);
            }
        }
        let gates = values.len() / 2;
        self.logits = Tensor::param(vec![gates, 2], values).expect("consistent length");
        self.last_sample = None;
        self.last_relaxed.clear();
    }

    /// Rebuild with explicit raw logit values (checkpoint restore).
    pub fn restore_logits(&mut self, raw: Vec<S>) -> Result<(), TensorError> {
        if raw.len() != self.gate_count() * 2 {
            return Err(TensorError::BadLength {
                got: raw.len(),
                want: self.gate_count() * 2,
            });
        }
        self.logits.set_values(&raw)
    }

    pub fn deep_clone(&self) -> GateSet<S> {
        GateSet {
            logits: self.logits.deep_clone(),
            kernel_area: self.kernel_area,
            tau: self.tau,
            last_sample: None,
            last_relaxed: Vec::new(),
        }
    }
}

pub fn open_probability(a_open: f64, a_closed: f64) -> f64 {
    let d = a_open - a_closed;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

fn relaxed_of<S: Scalar>(mask: &Tensor<S>) -> Vec<S> {
    mask.relaxed_values().unwrap_or_default()
}

/// Multiply weights by a sampled or deterministic mask. `mask` holds one
/// entry per gate; each entry scales `kernel_area` consecutive weights
/// (1 for per-weight gating).
pub fn apply_gates<S: Scalar>(
    weights: &Tensor<S>,
    mask: &Tensor<S>,
    kernel_area: usize,
) -> Result<Tensor<S>, TensorError> {
    Tensor::mul_kernel_broadcast(weights, mask, kernel_area)
}

/// `alpha` times the number of sampled-open gates, differentiable through
/// the straight-through relaxation. Empty mask list gives a constant zero.
pub fn sparsity_loss<S: Scalar>(
    masks: &[Tensor<S>],
    alpha: S,
) -> Result<Tensor<S>, TensorError> {
    if masks.is_empty() {
        return Ok(Tensor::scalar(S::zero()));
    }
    let sums: Vec<Tensor<S>> = masks.iter().map(|m| m.sum_all()).collect();
    Ok(Tensor::add_many(&sums)?.scale(alpha))
}

/// Deterministic link/weight totals over a set of gates at threshold
/// `gamma`: links counts open gates, weights counts kernel-area scalars
/// kept by them.
pub fn count_links_and_weights<'a, S: Scalar + 'a>(
    gates: impl IntoIterator<Item = &'a GateSet<S>>,
    gamma: f64,
) -> (usize, usize) {
    let mut links = 0;
    let mut weights = 0;
    for set in gates {
        let open = set.open_count(gamma);
        links += open;
        weights += open * set.kernel_area();
    }
    (links, weights)
}
