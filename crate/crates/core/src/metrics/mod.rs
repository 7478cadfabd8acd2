//! Stationarity diagnostics, experiment configs and result files.

pub mod config;
mod output;
mod tracker;
pub mod verify;

pub use config::ExperimentConfig;
pub use output::{emit_csv, emit_svg, read_csv, CsvSink, COLUMNS};
pub use tracker::{baseline_round_rows, fedda_round_rows, RoundContext, VirtualTracker};

use crate::error::Result;
use crate::linalg::ParamVector;

/// One logged global step `t = τI + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub t: u64,
    pub round: u64,
    pub loss: f64,
    pub measure_g: f64,
    pub term_drift: f64,
    pub term_esterr: f64,
    pub grad_map: f64,
    pub consensus_z: Option<f64>,
    pub consensus_nu: Option<f64>,
    pub density: f64,
    pub eta: f64,
    pub alpha: f64,
}

impl MetricsRow {
    /// Value of a numeric column by name; absent values are `None`.
    pub fn field(&self, name: &str) -> Option<f64> {
        match name {
            "t" => Some(self.t as f64),
            "round" => Some(self.round as f64),
            "loss" => Some(self.loss),
            "measure_g" => Some(self.measure_g),
            "term_drift" => Some(self.term_drift),
            "term_esterr" => Some(self.term_esterr),
            "grad_map" => Some(self.grad_map),
            "consensus_z" => self.consensus_z,
            "consensus_nu" => self.consensus_nu,
            "density" => Some(self.density),
            "eta" => Some(self.eta),
            "alpha" => Some(self.alpha),
            _ => None,
        }
    }
}

/// Counts of the per-step local-update inequalities checked during a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LemmaStats {
    pub checks: u64,
    pub violations: u64,
    /// Smallest observed margin `lhs − rhs + slack`.
    pub worst_margin: f64,
    pub first_violation: Option<String>,
}

impl LemmaStats {
    pub const SLACK: f64 = 1e-9;

    /// Records `lhs ≥ rhs − SLACK`.
    pub fn check(&mut self, lhs: f64, rhs: f64, what: impl FnOnce() -> String) {
        let margin = lhs - rhs + Self::SLACK;
        if self.checks == 0 || margin < self.worst_margin {
            self.worst_margin = margin;
        }
        self.checks += 1;
        if margin.is_nan() || margin < 0.0 {
            self.violations += 1;
            if self.first_violation.is_none() {
                self.first_violation = Some(format!("{} (lhs {lhs:e}, rhs {rhs:e})", what()));
            }
        }
    }

    pub fn merge(&mut self, other: &LemmaStats) {
        if other.checks == 0 {
            return;
        }
        if self.checks == 0 || other.worst_margin < self.worst_margin {
            self.worst_margin = other.worst_margin;
        }
        self.checks += other.checks;
        self.violations += other.violations;
        if self.first_violation.is_none() {
            self.first_violation.clone_from(&other.first_violation);
        }
    }
}

/// Rows of a run plus the end state.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    pub final_x: ParamVector,
    pub final_loss: f64,
    pub lemma: LemmaStats,
    /// Set when the virtual sequence averages clients that did not participate.
    pub diagnostic_only: bool,
}

/// `G = (ρ²/(λ²η²))‖x̃_t − x̃_{t+1}‖² + ‖ν̄_t − ∇f(x̃_t)‖²`, returned as
/// `(measure, drift term, estimation-error term)`.
pub fn measure_gt(
    x_tilde: &ParamVector,
    x_tilde_next: &ParamVector,
    nu_bar: &ParamVector,
    grad_at_x_tilde: &ParamVector,
    eta: f64,
    rho: f64,
    lambda: f64,
) -> Result<(f64, f64, f64)> {
    let drift = (rho * rho) / (lambda * lambda * eta * eta) * x_tilde.dist_sq(x_tilde_next)?;
    let esterr = nu_bar.dist_sq(grad_at_x_tilde)?;
    Ok((drift + esterr, drift, esterr))
}

/// `‖x_anchor − x*‖/η`.
pub fn gradient_mapping(x_anchor: &ParamVector, x_star: &ParamVector, eta: f64) -> Result<f64> {
    Ok(x_anchor.dist(x_star)? / eta)
}

/// `(Σ_k ‖z_k − z̄‖², Σ_k ‖ν_k − ν̄‖²)`.
pub fn consensus_errors(
    zs: &[&ParamVector],
    nus: &[&ParamVector],
    z_bar: &ParamVector,
    nu_bar: &ParamVector,
) -> Result<(f64, f64)> {
    let mut cz = 0.0;
    for z in zs {
        cz += z.dist_sq(z_bar)?;
    }
    let mut cn = 0.0;
    for n in nus {
        cn += n.dist_sq(nu_bar)?;
    }
    Ok((cz, cn))
}

/// Fraction of entries with `|x_i| > threshold`.
pub fn density(x: &ParamVector, threshold: f64) -> f64 {
    if x.dim() == 0 {
        return 0.0;
    }
    x.iter().filter(|v| v.abs() > threshold).count() as f64 / x.dim() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn density_examples() {
        assert_eq!(density(&ParamVector::zeros(5), 0.01), 0.0);
        assert_eq!(density(&pv(&[1.0, 1.0, 1.0, 0.0]), 0.01), 0.75);
        assert_eq!(density(&pv(&[0.3, -1.2, 1e-8, 2.0]), 0.0), 1.0);
    }

    #[test]
    fn measure_vanishes_at_exact_fixed_point() {
        let x = pv(&[0.5, -0.5]);
        let g = pv(&[0.0, 0.0]);
        assert_eq!(measure_gt(&x, &x, &g, &g, 0.1, 0.01, 1.0).unwrap(), (0.0, 0.0, 0.0));
        let nu = pv(&[1.0, 2.0]);
        assert_eq!(measure_gt(&x, &x, &nu, &nu, 0.1, 0.01, 1.0).unwrap().0, 0.0);
    }

    #[test]
    fn measure_is_sum_of_terms() {
        let (g, a, b) = measure_gt(&pv(&[1.0]), &pv(&[0.5]), &pv(&[2.0]), &pv(&[1.0]), 0.5, 2.0, 1.0).unwrap();
        assert_eq!(a, 4.0);
        assert_eq!(b, 1.0);
        assert_eq!(g, a + b);
    }

    #[test]
    fn gradient_mapping_at_anchor_is_zero() {
        let x = pv(&[0.1, 0.2]);
        assert_eq!(gradient_mapping(&x, &x, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn lemma_stats_track_violations() {
        let mut s = LemmaStats::default();
        s.check(1.0, 1.0, || "equal".into());
        s.check(1.0, 1.0 + 1e-10, || "within slack".into());
        assert_eq!(s.violations, 0);
        s.check(0.0, 1.0, || "broken".into());
        assert_eq!(s.violations, 1);
        assert!(s.first_violation.unwrap().starts_with("broken"));
    }
}
