//! Gradient-estimate update rules run by each client after every local step.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::linalg::ParamVector;

/// Which recursion produces the next estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// Momentum-based variance reduction: `g_new + (1 − α)(ν − g_old)`.
    Mvr,
    /// Exponential moving average: `α g_new + (1 − α) ν`.
    Momentum,
}

/// Where the per-step mixing weight `α` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaSource {
    /// `α = min(1, c·η²)` with `η` the step size of the step just taken.
    Schedule { c: f64 },
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorRule {
    pub kind: EstimatorKind,
    pub alpha: AlphaSource,
}

impl EstimatorRule {
    pub fn new(kind: EstimatorKind, alpha: AlphaSource) -> Result<Self> {
        match alpha {
            AlphaSource::Constant(a) if !(a > 0.0 && a <= 1.0) => {
                return Err(FedError::usage(format!("constant alpha must lie in (0, 1], got {a}")))
            }
            AlphaSource::Schedule { c } if !(c > 0.0 && c.is_finite()) => {
                return Err(FedError::usage(format!("alpha schedule constant must be positive, got {c}")))
            }
            _ => {}
        }
        Ok(EstimatorRule { kind, alpha })
    }

    /// Mixing weight for the estimate produced right after a step of size `eta`.
    pub fn alpha_for(&self, eta: f64) -> f64 {
        match self.alpha {
            AlphaSource::Schedule { c } => alpha_schedule(c, eta),
            AlphaSource::Constant(a) => a,
        }
    }
}

/// Two stochastic gradients evaluated on one shared minibatch: at the new
/// point and at the previous point.
///
/// The only constructor is [`crate::problems::ClientObjective::gradient_pair`],
/// which draws the batch once and evaluates both points on it.
#[derive(Debug, Clone)]
pub struct StochasticGradientPair {
    pub(crate) g_new: ParamVector,
    pub(crate) g_old: ParamVector,
}

impl StochasticGradientPair {
    pub fn g_new(&self) -> &ParamVector {
        &self.g_new
    }

    pub fn g_old(&self) -> &ParamVector {
        &self.g_old
    }

    /// Assembles a pair from gradients the caller evaluated on a single batch.
    /// Test and verification code only; the training loop goes through the
    /// objective.
    #[doc(hidden)]
    pub fn from_same_batch(g_new: ParamVector, g_old: ParamVector) -> Result<Self> {
        if g_new.dim() != g_old.dim() {
            return Err(FedError::DimensionMismatch {
                expected: g_new.dim(),
                found: g_old.dim(),
            });
        }
        Ok(StochasticGradientPair { g_new, g_old })
    }
}

/// One application of the estimator recursion.
pub fn update_estimate(
    kind: EstimatorKind,
    nu_prev: &ParamVector,
    grads: &StochasticGradientPair,
    alpha: f64,
) -> Result<ParamVector> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(FedError::usage(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if nu_prev.dim() != grads.g_new.dim() {
        return Err(FedError::DimensionMismatch {
            expected: nu_prev.dim(),
            found: grads.g_new.dim(),
        });
    }
    let keep = 1.0 - alpha;
    let out: Vec<f64> = match kind {
        EstimatorKind::Mvr => grads
            .g_new
            .iter()
            .zip(grads.g_old.iter())
            .zip(nu_prev.iter())
            .map(|((&gn, &go), &nu)| gn + keep * (nu - go))
            .collect(),
        EstimatorKind::Momentum => grads
            .g_new
            .iter()
            .zip(nu_prev.iter())
            .map(|(&gn, &nu)| alpha * gn + keep * nu)
            .collect(),
    };
    ParamVector::new(out)
}

/// Initial estimate: mean of the per-client minibatch gradients at `x₀`.
pub fn init_estimate(per_client_grads: &[ParamVector]) -> Result<ParamVector> {
    if per_client_grads.is_empty() {
        return Err(FedError::usage("initial estimate needs at least one client gradient"));
    }
    ParamVector::mean(per_client_grads)
}

/// `min(1, c·η²)`.
pub fn alpha_schedule(c: f64, eta_prev: f64) -> f64 {
    (c * eta_prev * eta_prev).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn pair(g_new: &[f64], g_old: &[f64]) -> StochasticGradientPair {
        StochasticGradientPair::from_same_batch(pv(g_new), pv(g_old)).unwrap()
    }

    #[test]
    fn full_alpha_collapses_to_fresh_gradient() {
        let grads = pair(&[2.0, -1.0], &[7.0, 7.0]);
        let nu = pv(&[100.0, -3.0]);
        assert_eq!(update_estimate(EstimatorKind::Mvr, &nu, &grads, 1.0).unwrap(), pv(&[2.0, -1.0]));
        assert_eq!(update_estimate(EstimatorKind::Momentum, &nu, &grads, 1.0).unwrap(), pv(&[2.0, -1.0]));
    }

    #[test]
    fn mvr_hand_evaluation() {
        let out = update_estimate(EstimatorKind::Mvr, &pv(&[1.0, 0.0]), &pair(&[2.0, 2.0], &[1.0, 1.0]), 0.5).unwrap();
        assert_eq!(out, pv(&[2.0, 1.5]));
    }

    #[test]
    fn alpha_out_of_range_is_rejected() {
        let grads = pair(&[1.0], &[1.0]);
        let nu = pv(&[0.0]);
        assert!(update_estimate(EstimatorKind::Mvr, &nu, &grads, 0.0).is_err());
        assert!(update_estimate(EstimatorKind::Momentum, &nu, &grads, 1.5).is_err());
        assert!(EstimatorRule::new(EstimatorKind::Momentum, AlphaSource::Constant(0.0)).is_err());
    }

    #[test]
    fn init_estimate_is_the_mean() {
        let g = pv(&[0.1, 0.7]);
        assert_eq!(init_estimate(std::slice::from_ref(&g)).unwrap(), g);
        assert_eq!(init_estimate(&[pv(&[1., 1.]), pv(&[3., 3.])]).unwrap(), pv(&[2., 2.]));
        assert_eq!(init_estimate(&vec![g.clone(); 10]).unwrap(), g);
        assert!(init_estimate(&[]).is_err());
    }

    #[test]
    fn alpha_schedule_examples() {
        assert_eq!(alpha_schedule(4.0, 0.5), 1.0);
        assert!((alpha_schedule(1.0, 0.1) - 0.01).abs() < 1e-17);
        assert_eq!(alpha_schedule(5e6, 0.01), 1.0);
    }

    proptest! {
        #[test]
        fn momentum_stays_between_its_inputs(
            vals in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..16),
            alpha in 1e-6f64..=1.0,
        ) {
            let g: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let nu: Vec<f64> = vals.iter().map(|v| v.1).collect();
            let out = update_estimate(EstimatorKind::Momentum, &pv(&nu), &pair(&g, &g), alpha).unwrap();
            for ((o, a), b) in out.iter().zip(&g).zip(&nu) {
                let (lo, hi) = (a.min(*b), a.max(*b));
                prop_assert!(*o >= lo - 1e-12 && *o <= hi + 1e-12);
            }
        }
    }
}
