//! Seeded synthetic problem generators.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::{ClientObjective, FederatedProblem, LeastSquaresObjective, LogisticObjective, QuadraticObjective};
use crate::error::{FedError, Result};
use crate::linalg::ParamVector;
use crate::rng;

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn check_sizes(dim: usize, clients: usize, samples: usize) -> Result<()> {
    if dim == 0 || clients == 0 || samples == 0 {
        return Err(FedError::usage("dim, clients and samples must all be positive"));
    }
    Ok(())
}

fn generator_stream(seed: u64, tag: u64) -> ChaCha8Rng {
    rng::stream(seed, rng::SERVER, rng::INIT_ROUND, tag)
}

/// Diagonal quadratics whose minimizers differ by Gaussian offsets of scale
/// `heterogeneity`. Each client has `samples` Gaussian linear shifts of scale
/// `noise`; with `heterogeneity = 0` and shared curvature all clients are
/// identical, noise included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticSpec {
    pub dim: usize,
    #[serde(default = "default_curvature")]
    pub curvature: [f64; 2],
    #[serde(default = "default_true")]
    pub shared_curvature: bool,
    #[serde(default)]
    pub heterogeneity: f64,
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_curvature() -> [f64; 2] {
    [1.0, 1.0]
}

fn default_true() -> bool {
    true
}

fn default_samples() -> usize {
    100
}

impl QuadraticSpec {
    pub fn generate(&self, clients: usize, seed: u64) -> Result<FederatedProblem> {
        check_sizes(self.dim, clients, self.samples)?;
        let [lo, hi] = self.curvature;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(FedError::usage(format!("curvature range must satisfy 0 < lo <= hi, got [{lo}, {hi}]")));
        }
        if !(self.heterogeneity >= 0.0 && self.noise >= 0.0) {
            return Err(FedError::usage("heterogeneity and noise must be nonnegative"));
        }
        let d = self.dim;
        let mut rng = generator_stream(seed, 0);
        let draw_a = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            if lo == hi {
                vec![lo; d]
            } else {
                let u = Uniform::new_inclusive(lo, hi).expect("valid range");
                (0..d).map(|_| u.sample(rng)).collect()
            }
        };
        let shared_a = draw_a(&mut rng);
        let center = gaussian(&mut rng, d, 1.0);
        let identical = self.heterogeneity == 0.0 && self.shared_curvature;

        let mut out: Vec<ClientObjective> = Vec::with_capacity(clients);
        for k in 0..clients {
            if identical && k > 0 {
                let first = out[0].clone();
                out.push(first);
                continue;
            }
            let mut rng = generator_stream(seed, 1 + k as u64);
            let a = if self.shared_curvature { shared_a.clone() } else { draw_a(&mut rng) };
            let offset = gaussian(&mut rng, d, self.heterogeneity);
            let b: Vec<f64> = (0..d).map(|i| a[i] * (center[i] + offset[i])).collect();
            let shifts = if self.noise > 0.0 {
                (0..self.samples)
                    .map(|_| ParamVector::new(gaussian(&mut rng, d, self.noise)))
                    .collect::<Result<Vec<_>>>()?
            } else {
                vec![ParamVector::zeros(d); self.samples]
            };
            out.push(ClientObjective::Quadratic(QuadraticObjective::new(a, ParamVector::new(b)?, shifts)?));
        }
        FederatedProblem::new(out)
    }
}

/// Linear regression with a sparse ground truth. Clients see Gaussian
/// features whose mean is shifted per client by `heterogeneity`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseRegressionSpec {
    pub dim: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_support")]
    pub support_fraction: f64,
    #[serde(default = "default_signal")]
    pub signal: f64,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub heterogeneity: f64,
}

fn default_support() -> f64 {
    0.1
}

fn default_signal() -> f64 {
    1.0
}

impl SparseRegressionSpec {
    /// Returns the problem together with the planted coefficient vector.
    pub fn generate(&self, clients: usize, seed: u64) -> Result<(FederatedProblem, ParamVector)> {
        check_sizes(self.dim, clients, self.samples)?;
        if !(self.support_fraction > 0.0 && self.support_fraction <= 1.0) {
            return Err(FedError::usage("support_fraction must lie in (0, 1]"));
        }
        let d = self.dim;
        let mut rng = generator_stream(seed, 0);
        let support = ((self.support_fraction * d as f64).round() as usize).clamp(1, d);
        let chosen = rand::seq::index::sample(&mut rng, d, support);
        let mut truth = vec![0.0; d];
        for i in chosen.iter() {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            truth[i] = sign * self.signal * (1.0 + rng.random::<f64>());
        }
        let mut out = Vec::with_capacity(clients);
        for k in 0..clients {
            let mut rng = generator_stream(seed, 1 + k as u64);
            let mean = gaussian(&mut rng, d, self.heterogeneity);
            let mut rows = Vec::with_capacity(self.samples);
            let mut targets = Vec::with_capacity(self.samples);
            for _ in 0..self.samples {
                let row: Vec<f64> = gaussian(&mut rng, d, 1.0).iter().zip(&mean).map(|(z, m)| z + m).collect();
                let y = row.iter().zip(&truth).map(|(a, w)| a * w).sum::<f64>()
                    + self.noise * rng.sample::<f64, _>(StandardNormal);
                rows.push(row);
                targets.push(y);
            }
            out.push(ClientObjective::LeastSquares(LeastSquaresObjective::new(rows, targets)?));
        }
        Ok((FederatedProblem::new(out)?, ParamVector::new(truth)?))
    }
}

/// Binary logistic regression on Gaussian features with planted weights.
/// A positive `penalty` selects the nonconvex regularized variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticSpec {
    pub dim: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub l2: f64,
    #[serde(default)]
    pub penalty: f64,
    #[serde(default)]
    pub heterogeneity: f64,
}

impl LogisticSpec {
    pub fn generate(&self, clients: usize, seed: u64) -> Result<FederatedProblem> {
        check_sizes(self.dim, clients, self.samples)?;
        let d = self.dim;
        let mut rng = generator_stream(seed, 0);
        let truth = gaussian(&mut rng, d, 1.0);
        let mut out = Vec::with_capacity(clients);
        for k in 0..clients {
            let mut rng = generator_stream(seed, 1 + k as u64);
            let mean = gaussian(&mut rng, d, self.heterogeneity);
            let mut rows = Vec::with_capacity(self.samples);
            let mut labels = Vec::with_capacity(self.samples);
            for _ in 0..self.samples {
                let row: Vec<f64> = gaussian(&mut rng, d, 1.0).iter().zip(&mean).map(|(z, m)| z + m).collect();
                let m: f64 = row.iter().zip(&truth).map(|(a, w)| a * w).sum();
                let p = super::sigmoid(m);
                let y = Bernoulli::new(p).expect("probability in [0, 1]").sample(&mut rng);
                rows.push(row);
                labels.push(if y { 1.0 } else { 0.0 });
            }
            out.push(logistic_client(rows, labels, self.l2, self.penalty)?);
        }
        FederatedProblem::new(out)
    }
}

pub(crate) fn logistic_client(rows: Vec<Vec<f64>>, labels: Vec<f64>, l2: f64, penalty: f64) -> Result<ClientObjective> {
    let obj = LogisticObjective::with_penalty(rows, labels, l2, penalty)?;
    Ok(if penalty > 0.0 {
        ClientObjective::NonconvexLogistic(obj)
    } else {
        ClientObjective::Logistic(obj)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn homogeneous_quadratics_are_identical() {
        let spec = QuadraticSpec {
            dim: 4,
            curvature: [0.5, 2.0],
            shared_curvature: true,
            heterogeneity: 0.0,
            noise: 0.3,
            samples: 10,
        };
        let p = spec.generate(3, 9).unwrap();
        assert_eq!(p.client(0), p.client(2));
        assert_eq!(spec.generate(3, 9).unwrap(), p);
    }

    #[test]
    fn sparse_truth_has_requested_support() {
        let spec = SparseRegressionSpec {
            dim: 50,
            samples: 20,
            support_fraction: 0.1,
            signal: 1.0,
            noise: 0.0,
            heterogeneity: 0.5,
        };
        let (p, truth) = spec.generate(2, 4).unwrap();
        assert_eq!(truth.iter().filter(|v| **v != 0.0).count(), 5);
        assert!(p.client(0).loss(&truth).unwrap() < 1e-20);
    }
}
