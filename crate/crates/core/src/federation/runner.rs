//! Experiment loop: rounds over a transport plus per-step diagnostics.

use std::sync::Arc;
use std::thread;

use log::{info, warn};

use super::{
    baseline_client_round, baseline_round, client_round, fedda_i1_round, init_gradient, sample_clients, server_round,
    Baseline, BaselineState, Broadcast, ClientRoundOutput, ClientRoundState, FedDaParams, InMemoryTransport,
    ServerState, SocketTransport, Transport, Upload,
};
use crate::error::{FedError, Result};
use crate::estimators::init_estimate;
use crate::linalg::{DiagonalMetric, ParamVector};
use crate::metrics::config::{Algorithm, TransportKind};
use crate::metrics::{baseline_round_rows, fedda_round_rows, ExperimentConfig, LemmaStats, MetricsRow, MetricsTable, RoundContext};
use crate::problems::{BatchSize, ClientObjective, FederatedProblem};
use crate::prox::ConstraintSet;

/// What a client does with a broadcast.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientProgram {
    FedDa(FedDaParams),
    Baseline {
        variant: Baseline,
        local_steps: usize,
        batch: BatchSize,
        seed: u64,
        shared_client_rng: bool,
        set: ConstraintSet,
    },
}

/// A client: its data and the program it runs each round.
#[derive(Debug)]
pub struct ClientWorker {
    pub id: usize,
    pub objective: ClientObjective,
    pub program: Arc<ClientProgram>,
}

impl ClientWorker {
    pub fn run(&self, b: &Broadcast, trace: bool) -> Result<ClientRoundOutput> {
        match self.program.as_ref() {
            ClientProgram::FedDa(p) => client_round(b, p, &self.objective, self.id, trace),
            ClientProgram::Baseline { variant, local_steps, batch, seed, shared_client_rng, set } => {
                let owner = if *shared_client_rng { 0 } else { self.id as u64 };
                baseline_client_round(b, variant, *local_steps, *batch, *seed, owner, &self.objective, set, trace)
            }
        }
    }

    pub fn handle(&self, b: &Broadcast) -> Result<Upload> {
        let out = self.run(b, false)?;
        Ok(Upload { client: self.id, z: out.z, nu: out.nu })
    }
}

/// Runs every client on the broadcast with traces, spread over threads.
fn replay(workers: &[Arc<ClientWorker>], b: &Broadcast) -> Result<Vec<ClientRoundOutput>> {
    let threads = thread::available_parallelism().map_or(1, |n| n.get());
    let chunk = workers.len().div_ceil(threads).max(1);
    thread::scope(|s| {
        let handles: Vec<_> = workers
            .chunks(chunk)
            .map(|ws| s.spawn(move || ws.iter().map(|w| w.run(b, true)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(workers.len());
        for h in handles {
            out.extend(h.join().map_err(|_| FedError::Protocol("diagnostic replay panicked".into()))??);
        }
        Ok(out)
    })
}

/// Uploads must equal what the diagnostics replay computed from the same
/// broadcast; anything else means a client saw a different anchor.
fn check_replay(uploads: &[Upload], replayed: &[ClientRoundOutput]) -> Result<()> {
    for u in uploads {
        let r = &replayed[u.client];
        let same = |a: &ParamVector, b: &ParamVector| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same(&u.z, &r.z) || !same(&u.nu, &r.nu) {
            return Err(FedError::Protocol(format!("client {} upload differs from its broadcast replay", u.client)));
        }
    }
    Ok(())
}

fn traces(outputs: Vec<ClientRoundOutput>) -> Vec<Vec<ClientRoundState>> {
    outputs.into_iter().map(|o| o.trace.unwrap_or_default()).collect()
}

fn open_transport(kind: TransportKind, workers: &[Arc<ClientWorker>]) -> Result<Box<dyn Transport>> {
    Ok(match kind {
        TransportKind::InMemory => Box::new(InMemoryTransport::new(workers.to_vec())),
        TransportKind::Socket => Box::new(SocketTransport::spawn(workers.to_vec())?),
    })
}

/// Runs an experiment, keeping every row in memory.
pub fn run_training(config: &ExperimentConfig) -> Result<MetricsTable> {
    run_training_with(config, &mut |_| Ok(()))
}

/// Runs an experiment and hands each row to `sink` as soon as it exists.
pub fn run_training_with(
    config: &ExperimentConfig,
    sink: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<MetricsTable> {
    config.validate()?;
    let problem = config.build_problem()?;
    run_on_problem(config, &problem, sink)
}

/// Same as [`run_training_with`] on an explicitly given problem.
pub fn run_on_problem(
    config: &ExperimentConfig,
    problem: &FederatedProblem,
    sink: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<MetricsTable> {
    config.validate()?;
    if problem.num_clients() != config.clients {
        return Err(FedError::Config(format!(
            "problem has {} clients, config says {}",
            problem.num_clients(),
            config.clients
        )));
    }
    let k = config.clients;
    let r = config.participating();
    if r < k {
        warn!("partial participation ({r} of {k}): the virtual sequence averages all clients and is diagnostic only");
    }
    let x0 = config.initial_point(problem.dim())?;
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut emit = |batch: Vec<MetricsRow>, rows: &mut Vec<MetricsRow>| -> Result<()> {
        for row in batch {
            sink(&row)?;
            rows.push(row);
        }
        Ok(())
    };
    let mut lemma = LemmaStats::default();

    let final_x = if config.algorithm.is_baseline() {
        let variant = config.baseline.ok_or_else(|| FedError::Config("missing [baseline] section".into()))?;
        let set = config.constraint.build(problem.dim())?;
        let program = Arc::new(ClientProgram::Baseline {
            variant,
            local_steps: config.local_steps,
            batch: config.batch.local,
            seed: config.seed,
            shared_client_rng: config.shared_client_rng,
            set: set.clone(),
        });
        let workers = make_workers(problem, &program);
        let x = if set.contains(&x0, 0.0) { x0 } else { set.project(&x0)? };
        let momentum = match variant {
            Baseline::FedCm { .. } => init_momentum(problem, &x, config)?,
            _ => ParamVector::zeros(problem.dim()),
        };
        let mut state = BaselineState::new(x, momentum);
        info!("initial state: loss {:e}", problem.loss(&state.x)?);
        let schedule = crate::adaptivity::StepSchedule::new(
            crate::adaptivity::ScheduleMode::Constant { eta: variant.lr() },
            config.local_steps,
            k,
        )?;
        let unit = DiagonalMetric::identity();
        let mut transport = open_transport(config.transport, &workers)?;
        let result = (|| -> Result<()> {
            for round in 0..config.rounds as u64 {
                let sampled = sample_clients(k, r, config.seed, round)?;
                let b = state.broadcast(config.local_steps);
                let uploads = transport.exchange(&sampled, &b)?;
                let replayed = replay(&workers, &b)?;
                check_replay(&uploads, &replayed)?;
                let ctx = RoundContext {
                    problem,
                    broadcast: &b,
                    h: &unit,
                    lambda: 1.0,
                    set: &set,
                    rho: 1.0,
                    schedule: &schedule,
                    estimator: None,
                    density_threshold: config.density_threshold,
                    consensus: config.trace_clients,
                };
                let batch = baseline_round_rows(&ctx, &traces(replayed), variant.lr(), variant.gradient_weight())?;
                emit(batch, &mut rows)?;
                state = baseline_round(&state, &uploads, &variant, config.local_steps, &set)?;
            }
            Ok(())
        })();
        finish(transport, result)?;
        state.x
    } else {
        let params = config.fedda_params(problem)?;
        let program = Arc::new(ClientProgram::FedDa(params.clone()));
        let workers = make_workers(problem, &program);
        let mut state = ServerState::initialize(problem, &params, &x0, config.batch.init)?;
        info!(
            "initial state: loss {:e}, |nu| {:e}, eta0 {:e}",
            problem.loss(&state.x)?,
            state.nu.norm(),
            params.schedule.eta_at(0)
        );
        let fused = config.algorithm == Algorithm::FeddaI1;
        let mut transport = if fused { None } else { Some(open_transport(config.transport, &workers)?) };
        let result = (|| -> Result<()> {
            for round in 0..config.rounds as u64 {
                let b = state.broadcast(params.local_steps());
                let replayed = replay(&workers, &b)?;
                let uploads = match transport.as_mut() {
                    Some(t) => {
                        let sampled = sample_clients(k, r, config.seed, round)?;
                        let ups = t.exchange(&sampled, &b)?;
                        check_replay(&ups, &replayed)?;
                        Some(ups)
                    }
                    None => None,
                };
                let ctx = RoundContext {
                    problem,
                    broadcast: &b,
                    h: &state.h,
                    lambda: params.lambda,
                    set: &params.set,
                    rho: params.adaptive.epsilon,
                    schedule: &params.schedule,
                    estimator: Some(&params.estimator),
                    density_threshold: config.density_threshold,
                    consensus: config.trace_clients,
                };
                let batch = fedda_round_rows(&ctx, &traces(replayed), &mut lemma)?;
                emit(batch, &mut rows)?;
                state = match &uploads {
                    Some(ups) => server_round(&state, ups, &params.adaptive, params.lambda, &params.set, params.eta_last(round))?,
                    None => fedda_i1_round(&state, &params, problem)?,
                };
            }
            Ok(())
        })();
        match transport {
            Some(t) => finish(t, result)?,
            None => result?,
        }
        state.x
    };

    let final_loss = problem.loss(&final_x)?;
    Ok(MetricsTable { rows, final_x, final_loss, lemma, diagnostic_only: r < k })
}

fn make_workers(problem: &FederatedProblem, program: &Arc<ClientProgram>) -> Vec<Arc<ClientWorker>> {
    problem
        .clients()
        .iter()
        .enumerate()
        .map(|(id, obj)| Arc::new(ClientWorker { id, objective: obj.clone(), program: Arc::clone(program) }))
        .collect()
}

fn init_momentum(problem: &FederatedProblem, x: &ParamVector, config: &ExperimentConfig) -> Result<ParamVector> {
    let grads = problem
        .clients()
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let owner = if config.shared_client_rng { 0 } else { k as u64 };
            init_gradient(c, x, config.batch.init, config.seed, owner)
        })
        .collect::<Result<Vec<_>>>()?;
    init_estimate(&grads)
}

/// Shuts the transport down; the run's own error wins over a shutdown error.
fn finish(mut transport: Box<dyn Transport>, result: Result<()>) -> Result<()> {
    let closed = transport.shutdown();
    result?;
    closed
}
