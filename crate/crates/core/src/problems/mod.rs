//! Client objectives with exact and minibatch gradient oracles.

mod partition;
mod synthetic;

pub use partition::{partition_dataset, LabeledDataset, LabeledRow, PartitionSpec};
pub use synthetic::{LogisticSpec, QuadraticSpec, SparseRegressionSpec};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::estimators::StochasticGradientPair;
use crate::linalg::ParamVector;
use crate::rng;

/// Minibatch size: a number of samples drawn with replacement, or the whole
/// client dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchSize {
    Full(FullBatch),
    Samples(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FullBatch {
    Full,
}

impl BatchSize {
    pub const FULL: BatchSize = BatchSize::Full(FullBatch::Full);

    pub fn validate(&self) -> Result<()> {
        if *self == BatchSize::Samples(0) {
            return Err(FedError::usage("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Sample indices of one minibatch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Batch {
    Full,
    Indices(Vec<usize>),
}

/// `½xᵀAx − bᵀx` with diagonal `A ⪰ 0`; sample `j` adds the linear term
/// `s_jᵀx`, with the shifts centered so the average objective is unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    a: Vec<f64>,
    b: ParamVector,
    shifts: Vec<ParamVector>,
    mean_shift: ParamVector,
}

impl QuadraticObjective {
    pub fn new(a: Vec<f64>, b: ParamVector, shifts: Vec<ParamVector>) -> Result<Self> {
        if a.len() != b.dim() {
            return Err(FedError::DimensionMismatch { expected: a.len(), found: b.dim() });
        }
        if a.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(FedError::usage("quadratic curvature must be finite and nonnegative"));
        }
        let d = a.len();
        let shifts = if shifts.is_empty() {
            vec![ParamVector::zeros(d)]
        } else {
            let center = ParamVector::mean(&shifts)?;
            shifts.iter().map(|s| s.sub(&center)).collect::<Result<Vec<_>>>()?
        };
        let mean_shift = sum_rows(d, shifts.iter().map(|s| s.as_slice()), shifts.len());
        Ok(QuadraticObjective { a, b, shifts, mean_shift })
    }

    /// Noise-free quadratic.
    pub fn deterministic(a: Vec<f64>, b: ParamVector) -> Result<Self> {
        Self::new(a, b, Vec::new())
    }

    pub fn curvature(&self) -> &[f64] {
        &self.a
    }

    pub fn linear(&self) -> &ParamVector {
        &self.b
    }

    /// `A⁻¹b` when `A ≻ 0`.
    pub fn minimizer(&self) -> Option<ParamVector> {
        if self.a.iter().any(|&v| v <= 0.0) {
            return None;
        }
        Some(ParamVector::from_raw(
            self.b.iter().zip(&self.a).zip(self.mean_shift.iter()).map(|((b, a), s)| (b - s) / a).collect(),
        ))
    }

    fn gradient_with_shift(&self, x: &ParamVector, shift: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.a)
            .zip(self.b.iter().zip(shift))
            .map(|((x, a), (b, s))| a * x - b + s)
            .collect()
    }
}

/// `(1/2n) Σ (a_jᵀx − y_j)²`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresObjective {
    rows: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

impl LeastSquaresObjective {
    pub fn new(rows: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        check_rows(&rows, targets.len())?;
        Ok(LeastSquaresObjective { rows, targets })
    }
}

/// Binary logistic loss on `{0, 1}` labels, with optional `½ l2 ‖x‖²` and the
/// nonconvex penalty `γ Σ x_i²/(1 + x_i²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticObjective {
    rows: Vec<Vec<f64>>,
    labels: Vec<f64>,
    l2: f64,
    penalty: f64,
}

impl LogisticObjective {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<f64>, l2: f64) -> Result<Self> {
        Self::with_penalty(rows, labels, l2, 0.0)
    }

    pub fn with_penalty(rows: Vec<Vec<f64>>, labels: Vec<f64>, l2: f64, penalty: f64) -> Result<Self> {
        check_rows(&rows, labels.len())?;
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(FedError::usage("logistic labels must be 0 or 1"));
        }
        if !(l2 >= 0.0 && penalty >= 0.0) {
            return Err(FedError::usage("regularization weights must be nonnegative"));
        }
        Ok(LogisticObjective { rows, labels, l2, penalty })
    }

    fn regularizer_gradient(&self, x: &[f64], out: &mut [f64]) {
        for (o, &v) in out.iter_mut().zip(x) {
            let q = 1.0 + v * v;
            *o += self.l2 * v + self.penalty * 2.0 * v / (q * q);
        }
    }

    fn regularizer(&self, x: &[f64]) -> f64 {
        x.iter()
            .map(|&v| 0.5 * self.l2 * v * v + self.penalty * v * v / (1.0 + v * v))
            .sum()
    }
}

fn check_rows(rows: &[Vec<f64>], labels: usize) -> Result<()> {
    if rows.is_empty() {
        return Err(FedError::usage("objective needs at least one sample"));
    }
    if rows.len() != labels {
        return Err(FedError::DimensionMismatch { expected: rows.len(), found: labels });
    }
    let d = rows[0].len();
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(FedError::DimensionMismatch { expected: d, found: r.len() });
    }
    Ok(())
}

fn sum_rows<'a>(dim: usize, rows: impl Iterator<Item = &'a [f64]>, count: usize) -> ParamVector {
    let mut acc = vec![0.0; dim];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    let n = count as f64;
    ParamVector::from_raw(acc.into_iter().map(|a| a / n).collect())
}

fn sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        1.0 / (1.0 + (-m).exp())
    } else {
        let e = m.exp();
        e / (1.0 + e)
    }
}

fn softplus(m: f64) -> f64 {
    m.max(0.0) + (-m.abs()).exp().ln_1p()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One client's local loss `f^{(k)}`.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientObjective {
    Quadratic(QuadraticObjective),
    LeastSquares(LeastSquaresObjective),
    Logistic(LogisticObjective),
    NonconvexLogistic(LogisticObjective),
}

impl ClientObjective {
    pub fn dim(&self) -> usize {
        match self {
            ClientObjective::Quadratic(q) => q.a.len(),
            ClientObjective::LeastSquares(l) => l.rows[0].len(),
            ClientObjective::Logistic(l) | ClientObjective::NonconvexLogistic(l) => l.rows[0].len(),
        }
    }

    pub fn sample_count(&self) -> usize {
        match self {
            ClientObjective::Quadratic(q) => q.shifts.len(),
            ClientObjective::LeastSquares(l) => l.rows.len(),
            ClientObjective::Logistic(l) | ClientObjective::NonconvexLogistic(l) => l.rows.len(),
        }
    }

    /// Smoothness constant `L` of every per-sample gradient.
    pub fn lipschitz(&self) -> f64 {
        let max_row_sq = |rows: &[Vec<f64>]| rows.iter().map(|r| dot(r, r)).fold(0.0, f64::max);
        match self {
            ClientObjective::Quadratic(q) => q.a.iter().copied().fold(0.0, f64::max),
            ClientObjective::LeastSquares(l) => max_row_sq(&l.rows),
            ClientObjective::Logistic(l) | ClientObjective::NonconvexLogistic(l) => {
                0.25 * max_row_sq(&l.rows) + l.l2 + 2.0 * l.penalty
            }
        }
    }

    fn check_point(&self, x: &ParamVector) -> Result<()> {
        if x.dim() != self.dim() {
            return Err(FedError::DimensionMismatch { expected: self.dim(), found: x.dim() });
        }
        Ok(())
    }

    pub fn loss(&self, x: &ParamVector) -> Result<f64> {
        self.check_point(x)?;
        let xs = x.as_slice();
        Ok(match self {
            ClientObjective::Quadratic(q) => {
                xs.iter()
                    .zip(&q.a)
                    .zip(q.b.iter().zip(q.mean_shift.iter()))
                    .map(|((x, a), (b, s))| 0.5 * a * x * x - b * x + s * x)
                    .sum()
            }
            ClientObjective::LeastSquares(l) => {
                let n = l.rows.len() as f64;
                l.rows
                    .iter()
                    .zip(&l.targets)
                    .map(|(r, y)| {
                        let e = dot(r, xs) - y;
                        0.5 * e * e
                    })
                    .sum::<f64>()
                    / n
            }
            ClientObjective::Logistic(l) | ClientObjective::NonconvexLogistic(l) => {
                let n = l.rows.len() as f64;
                let data: f64 = l
                    .rows
                    .iter()
                    .zip(&l.labels)
                    .map(|(r, y)| {
                        let m = dot(r, xs);
                        softplus(m) - y * m
                    })
                    .sum::<f64>()
                    / n;
                data + l.regularizer(xs)
            }
        })
    }

    /// Mean of per-sample gradients over `indices` (repeats allowed).
    fn batch_gradient(&self, x: &ParamVector, indices: &[usize]) -> Vec<f64> {
        let d = self.dim();
        let xs = x.as_slice();
        let n = indices.len() as f64;
        match self {
            ClientObjective::Quadratic(q) => {
                let shift = if indices.len() == q.shifts.len() && indices.iter().enumerate().all(|(i, &j)| i == j) {
                    q.mean_shift.clone()
                } else {
                    sum_rows(d, indices.iter().map(|&j| q.shifts[j].as_slice()), indices.len())
                };
                q.gradient_with_shift(x, shift.as_slice())
            }
            ClientObjective::LeastSquares(l) => {
                let mut g = vec![0.0; d];
                for &j in indices {
                    let r = &l.rows[j];
                    let e = dot(r, xs) - l.targets[j];
                    for (gi, ri) in g.iter_mut().zip(r) {
                        *gi += e * ri;
                    }
                }
                g.iter_mut().for_each(|v| *v /= n);
                g
            }
            ClientObjective::Logistic(l) | ClientObjective::NonconvexLogistic(l) => {
                let mut g = vec![0.0; d];
                for &j in indices {
                    let r = &l.rows[j];
                    let w = sigmoid(dot(r, xs)) - l.labels[j];
                    for (gi, ri) in g.iter_mut().zip(r) {
                        *gi += w * ri;
                    }
                }
                g.iter_mut().for_each(|v| *v /= n);
                l.regularizer_gradient(xs, &mut g);
                g
            }
        }
    }

    /// Exact `∇f^{(k)}(x)`; the mean of all per-sample gradients.
    pub fn full_gradient(&self, x: &ParamVector) -> Result<ParamVector> {
        self.check_point(x)?;
        let all: Vec<usize> = (0..self.sample_count()).collect();
        ParamVector::new(self.batch_gradient(x, &all))
    }

    /// Mean per-sample gradient over an explicit batch.
    pub fn stochastic_gradient(&self, x: &ParamVector, batch: &[usize]) -> Result<ParamVector> {
        self.check_point(x)?;
        if batch.is_empty() {
            return Err(FedError::usage("stochastic gradient over an empty batch"));
        }
        let n = self.sample_count();
        if let Some(&j) = batch.iter().find(|&&j| j >= n) {
            return Err(FedError::usage(format!("sample index {j} out of range (n = {n})")));
        }
        ParamVector::new(self.batch_gradient(x, batch))
    }

    pub fn gradient_on(&self, x: &ParamVector, batch: &Batch) -> Result<ParamVector> {
        match batch {
            Batch::Full => self.full_gradient(x),
            Batch::Indices(idx) => self.stochastic_gradient(x, idx),
        }
    }

    /// Gradients at `x_new` and `x_old` on one shared batch.
    pub fn gradient_pair(&self, x_new: &ParamVector, x_old: &ParamVector, batch: &Batch) -> Result<StochasticGradientPair> {
        Ok(StochasticGradientPair {
            g_new: self.gradient_on(x_new, batch)?,
            g_old: self.gradient_on(x_old, batch)?,
        })
    }

    /// Draws `size` indices uniformly with replacement.
    pub fn draw_batch<R: Rng + ?Sized>(&self, rng: &mut R, size: BatchSize) -> Batch {
        match size {
            BatchSize::Full(_) => Batch::Full,
            BatchSize::Samples(b) => {
                let n = self.sample_count();
                Batch::Indices((0..b).map(|_| rng.random_range(0..n)).collect())
            }
        }
    }

    /// `(1/n) Σ_j ‖∇f_j(x) − ∇f(x)‖²`, the variance of a single-sample gradient.
    pub fn per_sample_variance(&self, x: &ParamVector) -> Result<f64> {
        let full = self.full_gradient(x)?;
        let n = self.sample_count();
        let mut total = 0.0;
        for j in 0..n {
            let g = self.batch_gradient(x, &[j]);
            total += g.iter().zip(full.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(total / n as f64)
    }
}

/// Estimated problem constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemConstants {
    pub lipschitz: f64,
    pub sigma: f64,
    pub zeta: f64,
}

/// `f(x) = (1/K) Σ f^{(k)}(x)` over `K` clients.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedProblem {
    clients: Vec<ClientObjective>,
}

impl FederatedProblem {
    pub fn new(clients: Vec<ClientObjective>) -> Result<Self> {
        let first = clients
            .first()
            .ok_or_else(|| FedError::usage("a federated problem needs at least one client"))?;
        let d = first.dim();
        if let Some(c) = clients.iter().find(|c| c.dim() != d) {
            return Err(FedError::DimensionMismatch { expected: d, found: c.dim() });
        }
        Ok(FederatedProblem { clients })
    }

    pub fn clients(&self) -> &[ClientObjective] {
        &self.clients
    }

    pub fn client(&self, k: usize) -> &ClientObjective {
        &self.clients[k]
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn dim(&self) -> usize {
        self.clients[0].dim()
    }

    pub fn loss(&self, x: &ParamVector) -> Result<f64> {
        let mut total = 0.0;
        for c in &self.clients {
            total += c.loss(x)?;
        }
        Ok(total / self.clients.len() as f64)
    }

    pub fn gradient(&self, x: &ParamVector) -> Result<ParamVector> {
        let grads = self
            .clients
            .iter()
            .map(|c| c.full_gradient(x))
            .collect::<Result<Vec<_>>>()?;
        ParamVector::mean(&grads)
    }

    /// `L = max_k L_k`.
    pub fn lipschitz(&self) -> f64 {
        self.clients.iter().map(|c| c.lipschitz()).fold(0.0, f64::max)
    }

    /// Minimizer and optimal value when every client is a strongly convex
    /// quadratic (the average is then `½xᵀĀx − b̄ᵀx`).
    pub fn quadratic_optimum(&self) -> Option<(ParamVector, f64)> {
        let d = self.dim();
        let k = self.clients.len() as f64;
        let mut a = vec![0.0; d];
        let mut b = vec![0.0; d];
        for c in &self.clients {
            let ClientObjective::Quadratic(q) = c else { return None };
            for i in 0..d {
                a[i] += q.a[i] / k;
                b[i] += (q.b[i] - q.mean_shift[i]) / k;
            }
        }
        if a.iter().any(|&v| v <= 0.0) {
            return None;
        }
        let x = ParamVector::from_raw(b.iter().zip(&a).map(|(b, a)| b / a).collect());
        let f = self.loss(&x).ok()?;
        Some((x, f))
    }

    /// `L` from the analytic bound; `σ` and `ζ` as maxima over seeded
    /// Gaussian probe points (plus the origin).
    pub fn estimate_constants(&self, probe_points: usize, seed: u64) -> Result<ProblemConstants> {
        if probe_points == 0 {
            return Err(FedError::usage("need at least one probe point"));
        }
        let d = self.dim();
        let mut rng = rng::stream(seed, rng::SERVER, 0, 0);
        let mut probes = vec![ParamVector::zeros(d)];
        for _ in 1..probe_points {
            probes.push(ParamVector::from_raw((0..d).map(|_| rng.sample(StandardNormal)).collect()));
        }
        let mut sigma_sq: f64 = 0.0;
        let mut zeta: f64 = 0.0;
        for x in &probes {
            let grads = self
                .clients
                .iter()
                .map(|c| c.full_gradient(x))
                .collect::<Result<Vec<_>>>()?;
            for c in &self.clients {
                sigma_sq = sigma_sq.max(c.per_sample_variance(x)?);
            }
            for (k, gk) in grads.iter().enumerate() {
                for gl in &grads[k + 1..] {
                    zeta = zeta.max(gk.dist(gl)?);
                }
            }
        }
        Ok(ProblemConstants {
            lipschitz: self.lipschitz(),
            sigma: sigma_sq.sqrt(),
            zeta,
        })
    }
}
