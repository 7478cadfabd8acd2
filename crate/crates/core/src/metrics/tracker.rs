//! Virtual averaged sequence and the per-step rows built from client traces.

use super::{consensus_errors, density, gradient_mapping, measure_gt, LemmaStats, MetricsRow};
use crate::adaptivity::StepSchedule;
use crate::error::{FedError, Result};
use crate::estimators::EstimatorRule;
use crate::federation::{Broadcast, ClientRoundState};
use crate::linalg::{DiagonalMetric, ParamVector};
use crate::problems::FederatedProblem;
use crate::prox::{solve_prox, ConstraintSet, ProxProblem};

/// Averages over all `K` clients at one local step.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualTracker {
    pub z_bar: ParamVector,
    pub x_tilde: ParamVector,
    pub nu_bar: ParamVector,
}

impl VirtualTracker {
    /// `z̄`, `ν̄` over the given states and `x̃ = prox(z̄)` at the round anchor.
    pub fn at_step(
        states: &[&ClientRoundState],
        anchor: &ParamVector,
        h: &DiagonalMetric,
        lambda: f64,
        set: &ConstraintSet,
    ) -> Result<Self> {
        let z_bar = ParamVector::mean(states.iter().map(|s| &s.z))?;
        let nu_bar = ParamVector::mean(states.iter().map(|s| &s.nu_local))?;
        let x_tilde = solve_prox(&ProxProblem::new(&z_bar, anchor, h, lambda, set))?;
        Ok(VirtualTracker { z_bar, x_tilde, nu_bar })
    }
}

/// Everything a round's diagnostics need besides the traces.
pub struct RoundContext<'a> {
    pub problem: &'a FederatedProblem,
    pub broadcast: &'a Broadcast,
    pub h: &'a DiagonalMetric,
    pub lambda: f64,
    pub set: &'a ConstraintSet,
    /// Lower bound `ρ` with `H ⪰ ρI`, used by the measure and the lemma checks.
    pub rho: f64,
    pub schedule: &'a StepSchedule,
    pub estimator: Option<&'a EstimatorRule>,
    pub density_threshold: f64,
    /// Report consensus errors; they are left absent otherwise.
    pub consensus: bool,
}

fn step_states(traces: &[Vec<ClientRoundState>], i: usize) -> Result<Vec<&ClientRoundState>> {
    traces
        .iter()
        .map(|t| {
            t.get(i)
                .ok_or_else(|| FedError::Protocol(format!("client trace is missing step {i}")))
        })
        .collect()
}

/// Rows for the `I` steps of one dual-averaging round. `traces` holds the
/// states `0..=I` of every client.
pub fn fedda_round_rows(
    ctx: &RoundContext<'_>,
    traces: &[Vec<ClientRoundState>],
    lemma: &mut LemmaStats,
) -> Result<Vec<MetricsRow>> {
    let steps = ctx.schedule.local_steps;
    let anchor = &ctx.broadcast.x;
    let (lambda, rho) = (ctx.lambda, ctx.rho);
    let trackers = (0..=steps)
        .map(|i| VirtualTracker::at_step(&step_states(traces, i)?, anchor, ctx.h, lambda, ctx.set))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(steps);
    let mut z_star = ParamVector::zeros(anchor.dim());
    let mut nu_consensus_weighted = 0.0;
    for i in 0..steps {
        let t = ctx.broadcast.step + i as u64;
        let eta = ctx.schedule.eta_at(t);
        let cur = &trackers[i];
        let next = &trackers[i + 1];
        let grad = ctx.problem.gradient(&cur.x_tilde)?;
        let (g, drift, esterr) = measure_gt(&cur.x_tilde, &next.x_tilde, &cur.nu_bar, &grad, eta, rho, lambda)?;

        z_star = ParamVector::axpy(-eta, &grad, &z_star)?;
        let x_star = solve_prox(&ProxProblem::new(&z_star, anchor, ctx.h, lambda, ctx.set))?;
        let grad_map = gradient_mapping(anchor, &x_star, eta)?;

        let states = step_states(traces, i)?;
        let zs: Vec<&ParamVector> = states.iter().map(|s| &s.z).collect();
        let nus: Vec<&ParamVector> = states.iter().map(|s| &s.nu_local).collect();
        let (cz, cn) = consensus_errors(&zs, &nus, &cur.z_bar, &cur.nu_bar)?;

        let round = ctx.broadcast.round;
        let d_virtual = cur.x_tilde.sub(&next.x_tilde)?.scale(1.0 / eta);
        lemma.check(lambda * cur.nu_bar.dot(&d_virtual)?, rho * d_virtual.norm_sq(), || {
            format!("round {round} step {i}: virtual descent inequality")
        });
        lemma.check(lambda * cur.nu_bar.norm(), rho * d_virtual.norm(), || {
            format!("round {round} step {i}: virtual step-length inequality")
        });
        let next_states = step_states(traces, i + 1)?;
        for (k, (s, n)) in states.iter().zip(&next_states).enumerate() {
            let d = s.x_local.sub(&n.x_local)?.scale(1.0 / eta);
            lemma.check(lambda * s.nu_local.dot(&d)?, rho * d.norm_sq(), || {
                format!("round {round} step {i} client {k}: descent inequality")
            });
            lemma.check(lambda * s.nu_local.norm(), rho * d.norm(), || {
                format!("round {round} step {i} client {k}: step-length inequality")
            });
            lemma.check(lambda * s.z.dist(&cur.z_bar)?, rho * s.x_local.dist(&cur.x_tilde)?, || {
                format!("round {round} step {i} client {k}: dual-to-primal consensus inequality")
            });
        }
        // Σ_k‖z_k − z̄‖² ≤ (I − 1) Σ_{ℓ<i} η_ℓ² Σ_k‖ν_k,ℓ − ν̄_ℓ‖²
        lemma.check((steps as f64 - 1.0) * nu_consensus_weighted, cz, || {
            format!("round {round} step {i}: dual consensus bound")
        });
        nu_consensus_weighted += eta * eta * cn;

        let alpha = ctx.estimator.map_or(1.0, |e| e.alpha_for(eta));
        rows.push(MetricsRow {
            t,
            round,
            loss: ctx.problem.loss(&cur.x_tilde)?,
            measure_g: g,
            term_drift: drift,
            term_esterr: esterr,
            grad_map,
            consensus_z: ctx.consensus.then_some(cz),
            consensus_nu: ctx.consensus.then_some(cn),
            density: density(&cur.x_tilde, ctx.density_threshold),
            eta,
            alpha,
        });
    }
    Ok(rows)
}

/// Rows for a primal-averaging baseline round: the measure is replaced by
/// `‖∇f(x̄_t)‖²` at the average of the local models.
pub fn baseline_round_rows(
    ctx: &RoundContext<'_>,
    traces: &[Vec<ClientRoundState>],
    lr: f64,
    gradient_weight: f64,
) -> Result<Vec<MetricsRow>> {
    let steps = ctx.schedule.local_steps;
    let mut rows = Vec::with_capacity(steps);
    for i in 0..steps {
        let states = step_states(traces, i)?;
        let x_bar = ParamVector::mean(states.iter().map(|s| &s.x_local))?;
        let z_bar = ParamVector::mean(states.iter().map(|s| &s.z))?;
        let nu_bar = ParamVector::mean(states.iter().map(|s| &s.nu_local))?;
        let grad = ctx.problem.gradient(&x_bar)?;
        let zs: Vec<&ParamVector> = states.iter().map(|s| &s.z).collect();
        let nus: Vec<&ParamVector> = states.iter().map(|s| &s.nu_local).collect();
        let (cz, cn) = consensus_errors(&zs, &nus, &z_bar, &nu_bar)?;
        let g2 = grad.norm_sq();
        rows.push(MetricsRow {
            t: ctx.broadcast.step + i as u64,
            round: ctx.broadcast.round,
            loss: ctx.problem.loss(&x_bar)?,
            measure_g: g2,
            term_drift: g2,
            term_esterr: 0.0,
            grad_map: g2.sqrt(),
            consensus_z: ctx.consensus.then_some(cz),
            consensus_nu: ctx.consensus.then_some(cn),
            density: density(&x_bar, ctx.density_threshold),
            eta: lr,
            alpha: gradient_weight,
        });
    }
    Ok(rows)
}
