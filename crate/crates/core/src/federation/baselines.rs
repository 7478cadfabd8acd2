//! Primal-averaging baselines: FedAvg, FedAdam and FedCM.

use serde::{Deserialize, Serialize};

use super::{Broadcast, ClientRoundOutput, ClientRoundState, Upload};
use crate::error::{FedError, Result};
use crate::linalg::ParamVector;
use crate::problems::{BatchSize, ClientObjective};
use crate::prox::ConstraintSet;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Baseline {
    /// Local SGD, server applies `server_lr` times the mean model delta.
    FedAvg {
        lr: f64,
        #[serde(default = "one")]
        server_lr: f64,
    },
    /// Local SGD, server runs Adam on the mean model delta.
    FedAdam {
        lr: f64,
        server_lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        epsilon: f64,
    },
    /// Local steps along `α g + (1 − α) ν`, with `ν` the server momentum.
    FedCm { lr: f64, alpha: f64 },
}

fn one() -> f64 {
    1.0
}

fn beta1() -> f64 {
    0.9
}

fn beta2() -> f64 {
    0.999
}

fn adam_eps() -> f64 {
    1e-8
}

impl Baseline {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Baseline::FedAvg { lr, server_lr } => lr > 0.0 && server_lr > 0.0,
            Baseline::FedAdam { lr, server_lr, beta1, beta2, epsilon } => {
                lr > 0.0
                    && server_lr > 0.0
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && epsilon > 0.0
            }
            Baseline::FedCm { lr, alpha } => lr > 0.0 && alpha > 0.0 && alpha <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(FedError::usage(format!("invalid baseline hyperparameters: {self:?}")))
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Baseline::FedAvg { lr, .. } | Baseline::FedAdam { lr, .. } | Baseline::FedCm { lr, .. } => lr,
        }
    }

    /// Weight on the fresh gradient in the local direction.
    pub fn gradient_weight(&self) -> f64 {
        match *self {
            Baseline::FedCm { alpha, .. } => alpha,
            _ => 1.0,
        }
    }
}

/// Server state of a baseline run. `momentum` is the FedCM direction or the
/// Adam first moment; `second` is the Adam second moment.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineState {
    pub x: ParamVector,
    pub momentum: ParamVector,
    pub second: ParamVector,
    pub round: u64,
}

impl BaselineState {
    pub fn new(x: ParamVector, momentum: ParamVector) -> Self {
        let second = ParamVector::zeros(x.dim());
        BaselineState { x, momentum, second, round: 0 }
    }

    pub fn broadcast(&self, local_steps: usize) -> Broadcast {
        Broadcast {
            x: self.x.clone(),
            nu: self.momentum.clone(),
            h_diag: Vec::new(),
            round: self.round,
            step: self.round * local_steps as u64,
        }
    }
}

fn project(set: &ConstraintSet, x: ParamVector) -> Result<ParamVector> {
    match set {
        ConstraintSet::Unconstrained => Ok(x),
        s => s.project(&x),
    }
}

/// `I` local steps of (projected) SGD. The upload carries the model delta
/// in the `z` slot and the last local direction in the `ν` slot.
#[allow(clippy::too_many_arguments)]
pub fn baseline_client_round(
    b: &Broadcast,
    variant: &Baseline,
    local_steps: usize,
    batch: BatchSize,
    seed: u64,
    owner: u64,
    obj: &ClientObjective,
    set: &ConstraintSet,
    trace: bool,
) -> Result<ClientRoundOutput> {
    let lr = variant.lr();
    let a = variant.gradient_weight();
    let mut x = b.x.clone();
    let mut dir = b.nu.clone();
    let mut states = trace.then(|| {
        vec![ClientRoundState {
            x_local: x.clone(),
            z: ParamVector::zeros(x.dim()),
            nu_local: dir.clone(),
            step_in_round: 0,
        }]
    });
    for i in 0..local_steps {
        let ctx = |e: FedError| e.at_step(b.round, i);
        let mut rng = rng::stream(seed, owner, b.round, i as u64 + 1);
        let idx = obj.draw_batch(&mut rng, batch);
        let g = obj.gradient_on(&x, &idx).map_err(ctx)?;
        dir = if a == 1.0 { g } else { ParamVector::axpy(a, &g, &b.nu.scale(1.0 - a)).map_err(ctx)? };
        x = project(set, ParamVector::axpy(-lr, &dir, &x).map_err(ctx)?).map_err(ctx)?;
        if let Some(s) = states.as_mut() {
            s.push(ClientRoundState {
                x_local: x.clone(),
                z: x.sub(&b.x).map_err(ctx)?,
                nu_local: dir.clone(),
                step_in_round: i + 1,
            });
        }
    }
    Ok(ClientRoundOutput { z: x.sub(&b.x)?, nu: dir, trace: states })
}

/// Server update from the mean model delta.
pub fn baseline_round(
    state: &BaselineState,
    uploads: &[Upload],
    variant: &Baseline,
    local_steps: usize,
    set: &ConstraintSet,
) -> Result<BaselineState> {
    let sorted = super::check_uploads(uploads, state.x.dim())?;
    let delta = ParamVector::mean(sorted.iter().map(|u| &u.z))?;
    let round = state.round + 1;
    let mut next = state.clone();
    next.round = round;
    match *variant {
        Baseline::FedAvg { server_lr, .. } => {
            next.x = project(set, ParamVector::axpy(server_lr, &delta, &state.x)?)?;
        }
        Baseline::FedAdam { server_lr, beta1, beta2, epsilon, .. } => {
            let m = ParamVector::axpy(1.0 - beta1, &delta, &state.momentum.scale(beta1))?;
            let v = ParamVector::axpy(1.0 - beta2, &delta.map(|d| d * d), &state.second.scale(beta2))?;
            let c1 = 1.0 - beta1.powf(round as f64);
            let c2 = 1.0 - beta2.powf(round as f64);
            let step: Vec<f64> = m
                .iter()
                .zip(v.iter())
                .map(|(m, v)| server_lr * (m / c1) / ((v / c2).sqrt() + epsilon))
                .collect();
            next.x = project(set, state.x.add(&ParamVector::new(step)?)?)?;
            next.momentum = m;
            next.second = v;
        }
        Baseline::FedCm { lr, .. } => {
            next.momentum = delta.scale(-1.0 / (lr * local_steps as f64));
            next.x = project(set, state.x.add(&delta)?)?;
        }
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::QuadraticObjective;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn quad(a: &[f64], b: &[f64]) -> ClientObjective {
        ClientObjective::Quadratic(QuadraticObjective::deterministic(a.to_vec(), pv(b)).unwrap())
    }

    fn run(variant: Baseline, clients: &[ClientObjective], state: &BaselineState, steps: usize) -> BaselineState {
        let b = state.broadcast(steps);
        let ups: Vec<Upload> = clients
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let out = baseline_client_round(&b, &variant, steps, BatchSize::FULL, 0, k as u64, c, &ConstraintSet::Unconstrained, false).unwrap();
                Upload { client: k, z: out.z, nu: out.nu }
            })
            .collect();
        baseline_round(state, &ups, &variant, steps, &ConstraintSet::Unconstrained).unwrap()
    }

    #[test]
    fn fedavg_one_step_is_distributed_gradient_descent() {
        let clients = [quad(&[1.0, 2.0], &[0.5, 0.0]), quad(&[3.0, 1.0], &[0.0, 1.0])];
        let x = pv(&[1.0, -1.0]);
        let s = BaselineState::new(x.clone(), ParamVector::zeros(2));
        let next = run(Baseline::FedAvg { lr: 0.1, server_lr: 1.0 }, &clients, &s, 1);
        let g = ParamVector::mean(&[clients[0].full_gradient(&x).unwrap(), clients[1].full_gradient(&x).unwrap()]).unwrap();
        assert!(next.x.dist(&ParamVector::axpy(-0.1, &g, &x).unwrap()).unwrap() < 1e-15);
    }

    #[test]
    fn fedavg_identical_clients_match_centralized_sgd() {
        let c = quad(&[2.0], &[1.0]);
        let mut s = BaselineState::new(pv(&[3.0]), ParamVector::zeros(1));
        let mut x = 3.0f64;
        for _ in 0..5 {
            s = run(Baseline::FedAvg { lr: 0.1, server_lr: 1.0 }, &[c.clone(), c.clone(), c.clone()], &s, 4);
            for _ in 0..4 {
                x -= 0.1 * (2.0 * x - 1.0);
            }
            assert!((s.x[0] - x).abs() < 1e-14);
        }
    }

    #[test]
    fn fedadam_large_epsilon_is_scaled_fedavg() {
        let clients = [quad(&[1.0, 2.0], &[0.5, 0.0]), quad(&[3.0, 1.0], &[0.0, 1.0])];
        let s = BaselineState::new(pv(&[1.0, -1.0]), ParamVector::zeros(2));
        let eps = 1e6;
        let adam = run(
            Baseline::FedAdam { lr: 0.1, server_lr: eps, beta1: 0.0, beta2: 0.0, epsilon: eps },
            &clients,
            &s,
            3,
        );
        let avg = run(Baseline::FedAvg { lr: 0.1, server_lr: 1.0 }, &clients, &s, 3);
        let rel = adam.x.dist(&avg.x).unwrap() / avg.x.sub(&s.x).unwrap().norm();
        assert!(rel < 1e-5, "{rel}");
    }
}
