//! Adam with per-network state, the learning-rate schedule, and L2
//! regularization of the view-dependent layers.

use crate::grid::NetworkGrid;
use crate::mlp::MlpParams;
use crate::real::Real;

/// Per-network gradients; `None` for networks that received no samples.
pub type SparseGrads<T> = Vec<Option<Vec<T>>>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments are allocated lazily and every network keeps its own step
/// count: a network untouched in a step is left exactly as it was,
/// moments included.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub adam: Adam,
    pub m: Vec<Option<Vec<T>>>,
    pub v: Vec<Option<Vec<T>>>,
    pub steps: Vec<u64>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(networks: usize) -> Self {
        Self {
            adam: Adam::default(),
            m: vec![None; networks],
            v: vec![None; networks],
            steps: vec![0; networks],
        }
    }

    pub fn for_grid(grid: &NetworkGrid<T>) -> Self {
        Self::new(grid.network_count())
    }

    /// One update of every network that has a gradient.
    pub fn apply(&mut self, grid: &mut NetworkGrid<T>, grads: &SparseGrads<T>, lr: f64) {
        let Adam { beta1, beta2, eps } = self.adam;
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        for (n, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let params = &mut grid.params[n].data;
            let m = self.m[n].get_or_insert_with(|| vec![T::zero(); params.len()]);
            let v = self.v[n].get_or_insert_with(|| vec![T::zero(); params.len()]);
            self.steps[n] += 1;
            let t = self.steps[n] as i32;
            let step = T::lit(lr * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t)));
            let eps = T::lit(eps * (1.0 - beta2.powi(t)).sqrt());
            for i in 0..params.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                params[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

/// Decays `base` by a factor of ten over `horizon` steps, exponentially.
pub fn lr_schedule(step: usize, base: f64, horizon: usize) -> f64 {
    if horizon == 0 {
        return base;
    }
    base * 0.1f64.powf(step as f64 / horizon as f64)
}

/// `weight * sum(w^2 + b^2)` over the direction layer and color head;
/// adds its gradient into `grads`.
pub fn add_regularization<T: Real>(params: &MlpParams<T>, weight: T, grads: &mut [T]) -> T {
    let mut term = T::zero();
    for l in params.layout.view_dependent_layers() {
        for i in l.range() {
            let p = params.data[i];
            term += p * p;
            grads[i] += T::lit(2.0) * weight * p;
        }
    }
    weight * term
}

/// The regularization value and its full gradient.
pub fn regularization_term<T: Real>(params: &MlpParams<T>, weight: T) -> (T, Vec<T>) {
    let mut grads = vec![T::zero(); params.data.len()];
    let term = add_regularization(params, weight, &mut grads);
    (term, grads)
}
