//! Server-side adaptive metric updates and step-size schedules.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::linalg::{DiagonalMetric, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptiveKind {
    /// `μ ← β (z/η)² + (1 − β) μ`, `H = Diag(√μ + ε)`.
    Elementwise,
    /// `μ ← β ‖z‖/η + (1 − β) μ`, `H = (μ + ε) I`.
    Norm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveRule {
    pub kind: AdaptiveKind,
    pub beta: f64,
    pub epsilon: f64,
}

impl AdaptiveRule {
    pub fn new(kind: AdaptiveKind, beta: f64, epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(FedError::usage(format!("beta must lie in [0, 1], got {beta}")));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(FedError::usage(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(AdaptiveRule { kind, beta, epsilon })
    }

    /// `μ₀ = 0` for a model of dimension `dim`.
    pub fn initial_state(&self, dim: usize) -> AdaptiveState {
        match self.kind {
            AdaptiveKind::Elementwise => AdaptiveState::Elementwise(ParamVector::zeros(dim)),
            AdaptiveKind::Norm => AdaptiveState::Norm(0.0),
        }
    }

    /// The metric built from a state without updating it.
    pub fn metric(&self, state: &AdaptiveState) -> Result<DiagonalMetric> {
        match state {
            AdaptiveState::Elementwise(mu) => DiagonalMetric::diagonal(
                mu.iter().map(|m| m.sqrt() + self.epsilon).collect(),
                self.epsilon,
            ),
            AdaptiveState::Norm(mu) => DiagonalMetric::scalar(mu + self.epsilon, self.epsilon),
        }
    }
}

/// Exponential average `μ` behind the metric. Entries are never negative.
#[derive(Debug, Clone, PartialEq)]
pub enum AdaptiveState {
    Elementwise(ParamVector),
    Norm(f64),
}

/// Folds the averaged dual state of a round into `μ` and rebuilds `H`.
///
/// `eta_last` is the step size of the last local step, used to undo the step
/// scaling carried by `z`.
pub fn update_adaptive(
    rule: &AdaptiveRule,
    state: &AdaptiveState,
    z_avg: &ParamVector,
    eta_last: f64,
) -> Result<(AdaptiveState, DiagonalMetric)> {
    if !(eta_last > 0.0) {
        return Err(FedError::usage(format!("eta_last must be positive, got {eta_last}")));
    }
    let beta = rule.beta;
    let next = match (rule.kind, state) {
        (AdaptiveKind::Elementwise, AdaptiveState::Elementwise(mu)) => {
            if mu.dim() != z_avg.dim() {
                return Err(FedError::DimensionMismatch {
                    expected: mu.dim(),
                    found: z_avg.dim(),
                });
            }
            let out = mu
                .iter()
                .zip(z_avg.iter())
                .map(|(&m, &z)| {
                    let g = z / eta_last;
                    beta * g * g + (1.0 - beta) * m
                })
                .collect();
            AdaptiveState::Elementwise(ParamVector::new(out)?)
        }
        (AdaptiveKind::Norm, AdaptiveState::Norm(mu)) => {
            AdaptiveState::Norm(beta * z_avg.norm() / eta_last + (1.0 - beta) * mu)
        }
        _ => return Err(FedError::usage("adaptive state does not match the rule kind")),
    };
    let h = rule.metric(&next)?;
    Ok((next, h))
}

/// `κ = ρK^{2/3}/(λL)` and `c = 96λ²L²/(Kρ²) + ρ/(72κ³λLI²)`.
pub fn theorem_constants(rho: f64, lambda: f64, lipschitz: f64, clients: usize, local_steps: usize) -> (f64, f64) {
    let k = clients as f64;
    let i = local_steps as f64;
    let kappa = rho * k.powf(2.0 / 3.0) / (lambda * lipschitz);
    let c = 96.0 * lambda * lambda * lipschitz * lipschitz / (k * rho * rho)
        + rho / (72.0 * kappa.powi(3) * lambda * lipschitz * i * i);
    (kappa, c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ScheduleMode {
    /// `η_t = κ/(w_t + t + I)^{1/3}` with `w_t = max{48³I⁶K² − t − I, 14³√K}`.
    Theorem { kappa: f64, c: f64 },
    /// `η_t = η₀ (w/(w + t))^{1/3}`.
    Practical { eta0: f64, w: f64, c: f64 },
    Constant { eta: f64 },
}

/// Step sizes indexed by the global step `t = τI + i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub mode: ScheduleMode,
    pub local_steps: usize,
    pub clients: usize,
}

impl StepSchedule {
    pub fn new(mode: ScheduleMode, local_steps: usize, clients: usize) -> Result<Self> {
        if local_steps == 0 || clients == 0 {
            return Err(FedError::usage("schedule needs I >= 1 and K >= 1"));
        }
        let ok = match mode {
            ScheduleMode::Theorem { kappa, c } => kappa > 0.0 && c > 0.0,
            ScheduleMode::Practical { eta0, w, c } => eta0 > 0.0 && w > 0.0 && c > 0.0,
            ScheduleMode::Constant { eta } => eta > 0.0,
        };
        if !ok {
            return Err(FedError::usage(format!("schedule constants must be positive: {mode:?}")));
        }
        Ok(StepSchedule { mode, local_steps, clients })
    }

    /// Theorem-mode schedule with `κ, c` derived from the problem constants.
    pub fn theorem(rho: f64, lambda: f64, lipschitz: f64, local_steps: usize, clients: usize) -> Result<Self> {
        let (kappa, c) = theorem_constants(rho, lambda, lipschitz, clients, local_steps);
        Self::new(ScheduleMode::Theorem { kappa, c }, local_steps, clients)
    }

    /// Offset `w_t` of the theorem schedule.
    pub fn theorem_offset(&self, t: u64) -> f64 {
        let i = self.local_steps as f64;
        let k = self.clients as f64;
        let head = 48f64.powi(3) * i.powi(6) * k * k - t as f64 - i;
        head.max(14f64.powi(3) * k.sqrt())
    }

    pub fn eta_at(&self, t: u64) -> f64 {
        match self.mode {
            ScheduleMode::Theorem { kappa, .. } => {
                let denom = self.theorem_offset(t) + t as f64 + self.local_steps as f64;
                kappa / denom.cbrt()
            }
            ScheduleMode::Practical { eta0, w, .. } => eta0 * (w / (w + t as f64)).cbrt(),
            ScheduleMode::Constant { eta } => eta,
        }
    }

    /// The `c` of `α = c η²` carried by the schedule, if any.
    pub fn alpha_constant(&self) -> Option<f64> {
        match self.mode {
            ScheduleMode::Theorem { c, .. } | ScheduleMode::Practical { c, .. } => Some(c),
            ScheduleMode::Constant { .. } => None,
        }
    }
}

/// Whether `η₀ ≤ ρ/(48λLI²)`, the step regime the local-update analysis needs.
pub fn step_bound_check(sched: &StepSchedule, rho: f64, lambda: f64, lipschitz: f64) -> bool {
    let i = sched.local_steps as f64;
    let bound = rho / (48.0 * lambda * lipschitz * i * i);
    sched.eta_at(0) <= bound * (1.0 + 1e-12)
}
