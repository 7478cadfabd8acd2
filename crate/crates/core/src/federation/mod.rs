//! Round protocol: server aggregation, client local loops, client sampling.

mod baselines;
mod runner;
pub mod transport;

pub use baselines::{baseline_client_round, baseline_round, Baseline, BaselineState};
pub use runner::{run_on_problem, run_training, run_training_with, ClientProgram, ClientWorker};
pub use transport::{InMemoryTransport, SocketTransport, Transport};

use rand_chacha::ChaCha8Rng;

use crate::adaptivity::{update_adaptive, AdaptiveRule, AdaptiveState, StepSchedule};
use crate::error::{FedError, Result};
use crate::estimators::{init_estimate, update_estimate, EstimatorRule};
use crate::linalg::{DiagonalMetric, ParamVector};
use crate::problems::{BatchSize, ClientObjective, FederatedProblem};
use crate::prox::{solve_prox, ConstraintSet, ProxProblem};
use crate::rng;

/// Settings shared by the server and every client of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct FedDaParams {
    pub lambda: f64,
    pub set: ConstraintSet,
    pub estimator: EstimatorRule,
    pub adaptive: AdaptiveRule,
    pub schedule: StepSchedule,
    /// Minibatch for every local gradient pair.
    pub batch: BatchSize,
    pub seed: u64,
    /// All clients draw from the same stream instead of one per client id.
    pub shared_client_rng: bool,
}

impl FedDaParams {
    pub fn local_steps(&self) -> usize {
        self.schedule.local_steps
    }

    pub fn client_stream(&self, client: usize, round: u64, step: u64) -> ChaCha8Rng {
        let owner = if self.shared_client_rng { 0 } else { client as u64 };
        rng::stream(self.seed, owner, round, step)
    }

    /// Step size of the last local step of `round`, used to unscale `z̄`.
    pub fn eta_last(&self, round: u64) -> f64 {
        let i = self.local_steps() as u64;
        self.schedule.eta_at(round * i + i - 1)
    }
}

/// Global model state held by the server between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub x: ParamVector,
    pub nu: ParamVector,
    pub h: DiagonalMetric,
    pub adaptive: AdaptiveState,
    pub round: u64,
}

/// Initial minibatch of client `k`, drawn with the initialization stream.
pub fn init_gradient(
    obj: &ClientObjective,
    x0: &ParamVector,
    batch: BatchSize,
    seed: u64,
    owner: u64,
) -> Result<ParamVector> {
    let mut rng = rng::stream(seed, owner, rng::INIT_ROUND, 0);
    let b = obj.draw_batch(&mut rng, batch);
    obj.gradient_on(x0, &b)
}

impl ServerState {
    /// `x₀` (projected onto the set if needed), `ν₀` from one minibatch per
    /// client, `μ₀ = 0`.
    pub fn initialize(problem: &FederatedProblem, params: &FedDaParams, x0: &ParamVector, init_batch: BatchSize) -> Result<Self> {
        if x0.dim() != problem.dim() {
            return Err(FedError::DimensionMismatch { expected: problem.dim(), found: x0.dim() });
        }
        let x = if params.set.contains(x0, 0.0) { x0.clone() } else { params.set.project(x0)? };
        let grads = problem
            .clients()
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let owner = if params.shared_client_rng { 0 } else { k as u64 };
                init_gradient(c, &x, init_batch, params.seed, owner)
            })
            .collect::<Result<Vec<_>>>()?;
        let nu = init_estimate(&grads)?;
        let adaptive = params.adaptive.initial_state(problem.dim());
        let h = params.adaptive.metric(&adaptive)?;
        Ok(ServerState { x, nu, h, adaptive, round: 0 })
    }

    pub fn broadcast(&self, local_steps: usize) -> Broadcast {
        Broadcast {
            x: self.x.clone(),
            nu: self.nu.clone(),
            h_diag: self.h.to_diag_vec(self.x.dim()),
            round: self.round,
            step: self.round * local_steps as u64,
        }
    }
}

/// Server-to-client message opening a round.
#[derive(Debug, Clone, PartialEq)]
pub struct Broadcast {
    pub x: ParamVector,
    pub nu: ParamVector,
    /// Effective diagonal of `H_τ`; empty for algorithms without a metric.
    pub h_diag: Vec<f64>,
    pub round: u64,
    /// Global step index `t = τI` of the first local step.
    pub step: u64,
}

impl Broadcast {
    pub fn metric(&self, floor: f64) -> Result<DiagonalMetric> {
        if self.h_diag.len() != self.x.dim() {
            return Err(FedError::Protocol(format!(
                "broadcast metric has {} entries for a model of dimension {}",
                self.h_diag.len(),
                self.x.dim()
            )));
        }
        DiagonalMetric::diagonal(self.h_diag.clone(), floor)
    }
}

/// Client-to-server message closing a round.
#[derive(Debug, Clone, PartialEq)]
pub struct Upload {
    pub client: usize,
    pub z: ParamVector,
    pub nu: ParamVector,
}

/// Either direction of the round protocol.
#[derive(Debug, Clone, PartialEq)]
pub enum RoundMessage {
    Broadcast(Broadcast),
    Upload(Upload),
    Shutdown,
}

/// One client's variables after local step `step_in_round`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRoundState {
    pub x_local: ParamVector,
    pub z: ParamVector,
    pub nu_local: ParamVector,
    pub step_in_round: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientRoundOutput {
    pub z: ParamVector,
    pub nu: ParamVector,
    /// States for steps `0..=I` when requested.
    pub trace: Option<Vec<ClientRoundState>>,
}

/// Local loop of one client: `I` dual-averaging steps anchored at the
/// broadcast `(x_τ, H_τ)`.
pub fn client_round(
    b: &Broadcast,
    params: &FedDaParams,
    obj: &ClientObjective,
    client: usize,
    trace: bool,
) -> Result<ClientRoundOutput> {
    let h = b.metric(params.adaptive.epsilon)?;
    let steps = params.local_steps();
    let mut z = ParamVector::zeros(b.x.dim());
    let mut nu = b.nu.clone();
    let mut x_prev = b.x.clone();
    let mut states = trace.then(|| {
        vec![ClientRoundState {
            x_local: b.x.clone(),
            z: z.clone(),
            nu_local: nu.clone(),
            step_in_round: 0,
        }]
    });
    for i in 0..steps {
        let ctx = |e: FedError| e.at_step(b.round, i);
        let eta = params.schedule.eta_at(b.step + i as u64);
        z = ParamVector::axpy(-eta, &nu, &z).map_err(ctx)?;
        let x_new = solve_prox(&ProxProblem::new(&z, &b.x, &h, params.lambda, &params.set)).map_err(ctx)?;
        let mut rng = params.client_stream(client, b.round, i as u64 + 1);
        let batch = obj.draw_batch(&mut rng, params.batch);
        let pair = obj.gradient_pair(&x_new, &x_prev, &batch).map_err(ctx)?;
        nu = update_estimate(params.estimator.kind, &nu, &pair, params.estimator.alpha_for(eta)).map_err(ctx)?;
        x_prev = x_new;
        if let Some(s) = states.as_mut() {
            s.push(ClientRoundState {
                x_local: x_prev.clone(),
                z: z.clone(),
                nu_local: nu.clone(),
                step_in_round: i + 1,
            });
        }
    }
    Ok(ClientRoundOutput { z, nu, trace: states })
}

fn check_uploads(uploads: &[Upload], dim: usize) -> Result<Vec<&Upload>> {
    if uploads.is_empty() {
        return Err(FedError::Protocol("round closed without uploads".into()));
    }
    let mut sorted: Vec<&Upload> = uploads.iter().collect();
    sorted.sort_by_key(|u| u.client);
    if sorted.windows(2).any(|w| w[0].client == w[1].client) {
        return Err(FedError::Protocol("duplicate upload from one client".into()));
    }
    for u in &sorted {
        if u.z.dim() != dim || u.nu.dim() != dim {
            return Err(FedError::Protocol(format!(
                "client {} uploaded dimensions ({}, {}), expected {dim}",
                u.client,
                u.z.dim(),
                u.nu.dim()
            )));
        }
    }
    Ok(sorted)
}

/// Averages uploaded dual states and estimates in ascending client order,
/// takes the prox step from `x_τ` and refreshes `H`.
pub fn server_round(
    state: &ServerState,
    uploads: &[Upload],
    rule: &AdaptiveRule,
    lambda: f64,
    set: &ConstraintSet,
    eta_last: f64,
) -> Result<ServerState> {
    let sorted = check_uploads(uploads, state.x.dim())?;
    let z_bar = ParamVector::mean(sorted.iter().map(|u| &u.z))?;
    let nu = ParamVector::mean(sorted.iter().map(|u| &u.nu))?;
    let x = solve_prox(&ProxProblem::new(&z_bar, &state.x, &state.h, lambda, set))?;
    let (adaptive, h) = update_adaptive(rule, &state.adaptive, &z_bar, eta_last)?;
    Ok(ServerState { x, nu, h, adaptive, round: state.round + 1 })
}

/// Single-local-step variant with the prox taken first on the server, then
/// one estimator update per client at the new point.
pub fn fedda_i1_round(state: &ServerState, params: &FedDaParams, problem: &FederatedProblem) -> Result<ServerState> {
    if params.local_steps() != 1 {
        return Err(FedError::usage("the fused round requires one local step"));
    }
    let round = state.round;
    let eta = params.schedule.eta_at(round);
    let z = ParamVector::axpy(-eta, &state.nu, &ParamVector::zeros(state.x.dim()))?;
    let x = solve_prox(&ProxProblem::new(&z, &state.x, &state.h, params.lambda, &params.set))
        .map_err(|e| e.at_step(round, 0))?;
    let alpha = params.estimator.alpha_for(eta);
    let nus = problem
        .clients()
        .iter()
        .enumerate()
        .map(|(k, obj)| {
            let mut rng = params.client_stream(k, round, 1);
            let batch = obj.draw_batch(&mut rng, params.batch);
            let pair = obj.gradient_pair(&x, &state.x, &batch)?;
            update_estimate(params.estimator.kind, &state.nu, &pair, alpha)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at_step(round, 0))?;
    let nu = ParamVector::mean(&nus)?;
    let (adaptive, h) = update_adaptive(&params.adaptive, &state.adaptive, &z, eta)?;
    Ok(ServerState { x, nu, h, adaptive, round: round + 1 })
}

/// `r` distinct client ids in ascending order, uniform over `r`-subsets and
/// fixed by `(seed, round)`.
pub fn sample_clients(k: usize, r: usize, seed: u64, round: u64) -> Result<Vec<usize>> {
    if r == 0 || r > k {
        return Err(FedError::usage(format!("cannot sample {r} of {k} clients")));
    }
    if r == k {
        return Ok((0..k).collect());
    }
    let mut rng = rng::stream(seed, rng::SERVER, round, 0);
    let mut ids = rand::seq::index::sample(&mut rng, k, r).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptivity::{AdaptiveKind, ScheduleMode};
    use crate::estimators::{AlphaSource, EstimatorKind};
    use crate::problems::QuadraticObjective;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn quad(a: &[f64], b: &[f64]) -> ClientObjective {
        ClientObjective::Quadratic(QuadraticObjective::deterministic(a.to_vec(), pv(b)).unwrap())
    }

    fn params(eta: f64, steps: usize, clients: usize) -> FedDaParams {
        FedDaParams {
            lambda: 1.0,
            set: ConstraintSet::Unconstrained,
            estimator: EstimatorRule::new(EstimatorKind::Mvr, AlphaSource::Constant(0.5)).unwrap(),
            adaptive: AdaptiveRule::new(AdaptiveKind::Elementwise, 0.5, 1.0).unwrap(),
            schedule: StepSchedule::new(ScheduleMode::Constant { eta }, steps, clients).unwrap(),
            batch: BatchSize::FULL,
            seed: 11,
            shared_client_rng: false,
        }
    }

    fn broadcast(x: &[f64], nu: &[f64], h: &[f64]) -> Broadcast {
        Broadcast { x: pv(x), nu: pv(nu), h_diag: h.to_vec(), round: 0, step: 0 }
    }

    #[test]
    fn one_step_closed_form() {
        let p = params(0.2, 1, 1);
        let b = broadcast(&[1.0, -1.0], &[0.5, 2.0], &[2.0, 4.0]);
        let obj = quad(&[1.0, 1.0], &[0.0, 0.0]);
        let out = client_round(&b, &p, &obj, 0, true).unwrap();
        assert_eq!(out.z, pv(&[-0.1, -0.4]));
        let x1 = &out.trace.unwrap()[1].x_local;
        assert!(x1.dist(&pv(&[1.0 - 0.2 * 0.5 / 2.0, -1.0 - 0.2 * 2.0 / 4.0])).unwrap() < 1e-15);
    }

    #[test]
    fn stationary_client_stays_put() {
        let p = params(0.3, 4, 1);
        let x = [0.5, -2.0];
        let obj = quad(&[2.0, 3.0], &[1.0, -6.0]);
        let b = broadcast(&x, &[0.0, 0.0], &[1.0, 1.0]);
        let out = client_round(&b, &p, &obj, 0, true).unwrap();
        assert_eq!(out.z, pv(&[0.0, 0.0]));
        assert_eq!(out.nu, pv(&[0.0, 0.0]));
        for s in out.trace.unwrap() {
            assert_eq!(s.x_local, pv(&x));
        }
    }

    #[test]
    fn three_steps_match_straight_line_reference() {
        let p = params(0.1, 3, 1);
        let obj = quad(&[1.0], &[0.0]);
        let b = broadcast(&[1.0], &[1.0], &[1.0]);
        let out = client_round(&b, &p, &obj, 0, true).unwrap();
        let trace = out.trace.unwrap();
        // f = x²/2, exact gradients, H = I, λ = 1, α = 0.5
        let (x0, eta, alpha) = (1.0f64, 0.1, 0.5);
        let (mut z, mut nu, mut x_prev) = (0.0f64, 1.0f64, x0);
        for (i, state) in trace.iter().enumerate().skip(1) {
            z -= eta * nu;
            let x = x0 + z;
            nu = x + (1.0 - alpha) * (nu - x_prev);
            x_prev = x;
            assert!((state.z[0] - z).abs() < 1e-14, "step {i}");
            assert!((state.x_local[0] - x).abs() < 1e-14, "step {i}");
            assert!((state.nu_local[0] - nu).abs() < 1e-14, "step {i}");
        }
    }

    fn server_state(x: &[f64], nu: &[f64], rule: &AdaptiveRule) -> ServerState {
        let adaptive = rule.initial_state(x.len());
        let h = rule.metric(&adaptive).unwrap();
        ServerState { x: pv(x), nu: pv(nu), h, adaptive, round: 0 }
    }

    #[test]
    fn single_upload_is_mirrored() {
        let rule = AdaptiveRule::new(AdaptiveKind::Elementwise, 0.5, 1.0).unwrap();
        let s = server_state(&[1.0, 1.0], &[0.0, 0.0], &rule);
        let up = Upload { client: 3, z: pv(&[-0.5, 0.25]), nu: pv(&[2.0, 1.0]) };
        let next = server_round(&s, std::slice::from_ref(&up), &rule, 1.0, &ConstraintSet::Unconstrained, 0.5).unwrap();
        assert_eq!(next.x, pv(&[0.5, 1.25]));
        assert_eq!(next.nu, up.nu);
        assert_eq!(next.round, 1);
    }

    #[test]
    fn zero_uploads_only_decay_mu() {
        let rule = AdaptiveRule::new(AdaptiveKind::Elementwise, 0.25, 0.1).unwrap();
        let mut s = server_state(&[1.0, 2.0], &[0.0, 0.0], &rule);
        s.adaptive = AdaptiveState::Elementwise(pv(&[4.0, 16.0]));
        let ups: Vec<Upload> = (0..2).map(|k| Upload { client: k, z: pv(&[0.0, 0.0]), nu: pv(&[0.0, 0.0]) }).collect();
        let next = server_round(&s, &ups, &rule, 1.0, &ConstraintSet::Unconstrained, 0.1).unwrap();
        assert_eq!(next.x, s.x);
        assert_eq!(next.adaptive, AdaptiveState::Elementwise(pv(&[3.0, 12.0])));
    }

    #[test]
    fn mismatched_uploads_are_protocol_errors() {
        let rule = AdaptiveRule::new(AdaptiveKind::Norm, 0.5, 1.0).unwrap();
        let s = server_state(&[1.0, 2.0], &[0.0, 0.0], &rule);
        let ups = vec![Upload { client: 0, z: pv(&[0.0]), nu: pv(&[0.0, 0.0]) }];
        let err = server_round(&s, &ups, &rule, 1.0, &ConstraintSet::Unconstrained, 0.1).unwrap_err();
        assert!(matches!(err, FedError::Protocol(_)));
        assert!(matches!(server_round(&s, &[], &rule, 1.0, &ConstraintSet::Unconstrained, 0.1), Err(FedError::Protocol(_))));
    }

    #[test]
    fn fused_round_with_zero_estimate_keeps_x() {
        let p = params(0.1, 1, 2);
        let problem = FederatedProblem::new(vec![quad(&[1.0], &[0.0]), quad(&[2.0], &[1.0])]).unwrap();
        let s = server_state(&[0.7], &[0.0], &p.adaptive);
        assert_eq!(fedda_i1_round(&s, &p, &problem).unwrap().x, s.x);
    }

    #[test]
    fn fused_round_is_a_scaled_gradient_step() {
        let p = params(0.1, 1, 1);
        let obj = quad(&[3.0], &[1.0]);
        let problem = FederatedProblem::new(vec![obj.clone()]).unwrap();
        let x = pv(&[2.0]);
        let mut s = server_state(&[2.0], &[0.0], &p.adaptive);
        s.nu = obj.full_gradient(&x).unwrap();
        s.h = DiagonalMetric::diagonal(vec![2.5], 1.0).unwrap();
        let next = fedda_i1_round(&s, &p, &problem).unwrap();
        let expected = 2.0 - 1.0 * 0.1 * (3.0 * 2.0 - 1.0) / 2.5;
        assert!((next.x[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn sampling_contract() {
        assert_eq!(sample_clients(5, 5, 1, 7).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(sample_clients(3, 4, 1, 0).is_err());
        let a = sample_clients(20, 6, 9, 3).unwrap();
        assert_eq!(a, sample_clients(20, 6, 9, 3).unwrap());
        assert_eq!(a.len(), 6);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn single_draw_is_fair() {
        let rounds = 10_000;
        let zeros = (0..rounds).filter(|&t| sample_clients(2, 1, 5, t).unwrap() == vec![0]).count();
        let freq = zeros as f64 / rounds as f64;
        assert!((freq - 0.5).abs() <= 0.02, "{freq}");
    }
}
