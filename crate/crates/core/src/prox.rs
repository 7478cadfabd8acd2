//! Bregman proximal step under a diagonal metric.
//!
//! Solves `argmin_{x ∈ X} −⟨x, z⟩ + (1/2λ)(x − x₀)ᵀH(x − x₀)`. Completing the
//! square turns this into the `H`-weighted projection of the unconstrained
//! point `y = x₀ + λH⁻¹z` onto `X`, which is what each solver below computes.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::linalg::{DiagonalMetric, ParamVector};

/// Default stopping tolerance of the scalar root finders.
pub const DEFAULT_TOL: f64 = 1e-12;
/// Root-finder tolerance used for the L1 ball.
pub const L1_TOL: f64 = 1e-10;
const MAX_ITERATIONS: usize = 200;

/// Feasible set `X`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ConstraintSet {
    Unconstrained,
    Box { lo: Vec<f64>, hi: Vec<f64> },
    L2Ball { center: ParamVector, radius: f64 },
    L1Ball { center: ParamVector, radius: f64 },
}

impl ConstraintSet {
    pub fn boxed(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(FedError::DimensionMismatch {
                expected: lo.len(),
                found: hi.len(),
            });
        }
        if let Some(i) = (0..lo.len()).find(|&i| !(lo[i] <= hi[i]) || !lo[i].is_finite() || !hi[i].is_finite()) {
            return Err(FedError::usage(format!(
                "box bounds must be finite with lo <= hi (index {i}: [{}, {}])",
                lo[i], hi[i]
            )));
        }
        Ok(ConstraintSet::Box { lo, hi })
    }

    pub fn l2_ball(center: ParamVector, radius: f64) -> Result<Self> {
        Self::check_radius(radius)?;
        Ok(ConstraintSet::L2Ball { center, radius })
    }

    pub fn l1_ball(center: ParamVector, radius: f64) -> Result<Self> {
        Self::check_radius(radius)?;
        Ok(ConstraintSet::L1Ball { center, radius })
    }

    fn check_radius(radius: f64) -> Result<()> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(FedError::usage(format!("ball radius must be positive, got {radius}")));
        }
        Ok(())
    }

    /// Re-checks the invariants, for sets that came through deserialization.
    pub fn validate(&self) -> Result<()> {
        match self {
            ConstraintSet::Unconstrained => Ok(()),
            ConstraintSet::Box { lo, hi } => Self::boxed(lo.clone(), hi.clone()).map(|_| ()),
            ConstraintSet::L2Ball { radius, .. } | ConstraintSet::L1Ball { radius, .. } => {
                Self::check_radius(*radius)
            }
        }
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            ConstraintSet::Unconstrained => None,
            ConstraintSet::Box { lo, .. } => Some(lo.len()),
            ConstraintSet::L2Ball { center, .. } | ConstraintSet::L1Ball { center, .. } => {
                Some(center.dim())
            }
        }
    }

    /// How far `x` lies outside the set (0 when inside).
    pub fn violation(&self, x: &ParamVector) -> Result<f64> {
        if let Some(d) = self.dim() {
            if d != x.dim() {
                return Err(FedError::DimensionMismatch { expected: d, found: x.dim() });
            }
        }
        Ok(match self {
            ConstraintSet::Unconstrained => 0.0,
            ConstraintSet::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(&v, (&l, &h))| (l - v).max(v - h).max(0.0))
                .fold(0.0, f64::max),
            ConstraintSet::L2Ball { center, radius } => (x.dist(center)? - radius).max(0.0),
            ConstraintSet::L1Ball { center, radius } => (x.sub(center)?.norm_l1() - radius).max(0.0),
        })
    }

    pub fn contains(&self, x: &ParamVector, slack: f64) -> bool {
        self.violation(x).map(|v| v <= slack).unwrap_or(false)
    }

    /// Euclidean projection of `y` onto the set.
    pub fn project(&self, y: &ParamVector) -> Result<ParamVector> {
        let z = ParamVector::zeros(y.dim());
        let h = DiagonalMetric::identity();
        solve_prox(&ProxProblem::new(&z, y, &h, 1.0, self))
    }
}

/// One instance of the proximal step.
#[derive(Debug, Clone, Copy)]
pub struct ProxProblem<'a> {
    pub z: &'a ParamVector,
    pub x0: &'a ParamVector,
    pub h: &'a DiagonalMetric,
    pub lambda: f64,
    pub set: &'a ConstraintSet,
    pub tol: f64,
}

impl<'a> ProxProblem<'a> {
    pub fn new(
        z: &'a ParamVector,
        x0: &'a ParamVector,
        h: &'a DiagonalMetric,
        lambda: f64,
        set: &'a ConstraintSet,
    ) -> Self {
        ProxProblem {
            z,
            x0,
            h,
            lambda,
            set,
            tol: DEFAULT_TOL,
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    fn validate(&self) -> Result<usize> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(FedError::usage(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.tol > 0.0) {
            return Err(FedError::usage(format!("tolerance must be positive, got {}", self.tol)));
        }
        let d = self.x0.dim();
        if self.z.dim() != d {
            return Err(FedError::DimensionMismatch { expected: d, found: self.z.dim() });
        }
        self.h.check_dim(d)?;
        if let Some(sd) = self.set.dim() {
            if sd != d {
                return Err(FedError::DimensionMismatch { expected: d, found: sd });
            }
        }
        Ok(d)
    }

    /// `x₀ + λH⁻¹z`, the minimizer without constraints.
    fn unconstrained_point(&self) -> Vec<f64> {
        self.x0
            .iter()
            .zip(self.z.iter())
            .enumerate()
            .map(|(i, (&x0, &z))| x0 + self.lambda * z / self.h.entry(i))
            .collect()
    }

    /// Gradient of the objective, `−z + (1/λ)H(x − x₀)`.
    fn gradient(&self, x: &ParamVector) -> Vec<f64> {
        x.iter()
            .zip(self.x0.iter())
            .zip(self.z.iter())
            .enumerate()
            .map(|(i, ((&x, &x0), &z))| -z + self.h.entry(i) * (x - x0) / self.lambda)
            .collect()
    }
}

/// `−⟨x, z⟩ + (1/2λ)(x − x₀)ᵀH(x − x₀)`.
pub fn prox_objective(p: &ProxProblem<'_>, x: &ParamVector) -> Result<f64> {
    let diff = x.sub(p.x0)?;
    Ok(-x.dot(p.z)? + p.h.quadratic(&diff)? / (2.0 * p.lambda))
}

/// Solves the proximal step for every supported constraint set.
pub fn solve_prox(p: &ProxProblem<'_>) -> Result<ParamVector> {
    p.validate()?;
    let y = p.unconstrained_point();
    let x = match p.set {
        ConstraintSet::Unconstrained => y,
        ConstraintSet::Box { lo, hi } => y
            .iter()
            .zip(lo.iter().zip(hi))
            .map(|(&v, (&l, &h))| v.clamp(l, h))
            .collect(),
        ConstraintSet::L2Ball { center, radius } => {
            let u: Vec<f64> = y.iter().zip(center.iter()).map(|(a, c)| a - c).collect();
            let w = weighted_l2_ball(&u, p.h, *radius, p.tol)?;
            w.iter().zip(center.iter()).map(|(w, c)| w + c).collect()
        }
        ConstraintSet::L1Ball { center, radius } => {
            let u: Vec<f64> = y.iter().zip(center.iter()).map(|(a, c)| a - c).collect();
            let w = weighted_l1_ball(&u, p.h, *radius, p.tol.max(L1_TOL))?;
            w.iter().zip(center.iter()).map(|(w, c)| w + c).collect()
        }
    };
    ParamVector::new(x)
}

/// `argmin_{‖w‖ ≤ r} (w − u)ᵀH(w − u)`.
///
/// Outside the ball the solution is `w_i = h_i u_i / (h_i + t)` with the
/// multiplier `t > 0` fixed by `‖w(t)‖ = r`. The secular function
/// `1/‖w(t)‖ − 1/r` is increasing and close to linear, so Newton converges
/// fast; bisection on the bracket keeps it safe.
fn weighted_l2_ball(u: &[f64], h: &DiagonalMetric, radius: f64, tol: f64) -> Result<Vec<f64>> {
    let norm_u = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm_u <= radius {
        return Ok(u.to_vec());
    }
    let w_at = |t: f64| -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(i, &ui)| {
                let hi = h.entry(i);
                hi * ui / (hi + t)
            })
            .collect()
    };
    let secular = |t: f64| -> (f64, f64) {
        let mut n2 = 0.0;
        let mut dn = 0.0;
        for (i, &ui) in u.iter().enumerate() {
            let hi = h.entry(i);
            let q = hi * ui / (hi + t);
            n2 += q * q;
            dn += q * q / (hi + t);
        }
        let n = n2.sqrt();
        (1.0 / n - 1.0 / radius, dn / (n2 * n))
    };

    let (mut lo, mut hi) = (0.0, h.max_eigenvalue() * norm_u / radius);
    let mut t = 0.0;
    let mut residual = f64::INFINITY;
    let mut converged = false;
    for _ in 0..MAX_ITERATIONS {
        let (psi, dpsi) = secular(t);
        residual = (radius * psi).abs();
        // A collapsed bracket means t is pinned to machine precision.
        if residual <= tol || hi - lo <= 4.0 * f64::EPSILON * hi {
            converged = true;
            break;
        }
        if psi < 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        let newton = t - psi / dpsi;
        t = if newton > lo && newton < hi && dpsi > 0.0 {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    if !converged {
        return Err(FedError::Solver {
            iterations: MAX_ITERATIONS,
            residual,
        });
    }
    let mut w = w_at(t);
    let n = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > radius {
        let s = radius / n;
        w.iter_mut().for_each(|v| *v *= s);
    }
    Ok(w)
}

/// `argmin_{‖w‖₁ ≤ r} (w − u)ᵀH(w − u)`.
///
/// The solution is a weighted soft threshold
/// `w_i = sign(u_i)·max(|u_i| − θ/h_i, 0)` with `θ ≥ 0` found by bisection on
/// `Σ max(|u_i| − θ/h_i, 0) = r`. Once the bracket has isolated the active
/// set, `θ` is recomputed from the piecewise-linear equation directly.
fn weighted_l1_ball(u: &[f64], h: &DiagonalMetric, radius: f64, tol: f64) -> Result<Vec<f64>> {
    let l1 = u.iter().map(|v| v.abs()).sum::<f64>();
    if l1 <= radius {
        return Ok(u.to_vec());
    }
    let excess = |theta: f64| -> f64 {
        u.iter()
            .enumerate()
            .map(|(i, &ui)| (ui.abs() - theta / h.entry(i)).max(0.0))
            .sum::<f64>()
            - radius
    };
    let mut lo = 0.0;
    let mut hi = u
        .iter()
        .enumerate()
        .map(|(i, &ui)| ui.abs() * h.entry(i))
        .fold(0.0, f64::max);
    let scale = hi;
    let mut converged = false;
    for _ in 0..MAX_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        let g = excess(mid);
        if g > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= tol * scale || g.abs() <= tol * radius {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(FedError::Solver {
            iterations: MAX_ITERATIONS,
            residual: excess(0.5 * (lo + hi)).abs(),
        });
    }

    // Active set at the bracket midpoint; inclusive at kinks.
    let mid = 0.5 * (lo + hi);
    let (mut sum_abs, mut sum_inv) = (0.0, 0.0);
    for (i, &ui) in u.iter().enumerate() {
        let hi_ = h.entry(i);
        if ui.abs() * hi_ >= mid {
            sum_abs += ui.abs();
            sum_inv += 1.0 / hi_;
        }
    }
    let exact = (sum_abs - radius) / sum_inv;
    let theta = if sum_inv > 0.0 && exact >= lo && exact <= hi {
        exact
    } else {
        mid
    };
    let mut w: Vec<f64> = u
        .iter()
        .enumerate()
        .map(|(i, &ui)| ui.signum() * (ui.abs() - theta / h.entry(i)).max(0.0))
        .collect();
    let n1 = w.iter().map(|v| v.abs()).sum::<f64>();
    if n1 > radius {
        let s = radius / n1;
        w.iter_mut().for_each(|v| *v *= s);
    }
    Ok(w)
}

/// First-order optimality residual of a candidate `x`.
///
/// Returns the gap `max_{u ∈ X} ⟨g, x − u⟩` with `g` the objective gradient at
/// `x`, which is zero exactly when the variational inequality holds. For the
/// unconstrained set the gap is unbounded unless `g = 0`, so `‖g‖` is used.
pub fn kkt_residual(p: &ProxProblem<'_>, x: &ParamVector) -> Result<f64> {
    p.validate()?;
    if x.dim() != p.x0.dim() {
        return Err(FedError::DimensionMismatch { expected: p.x0.dim(), found: x.dim() });
    }
    let slack = p.tol.max(1e-9)
        * match p.set {
            ConstraintSet::L1Ball { radius, .. } | ConstraintSet::L2Ball { radius, .. } => radius.max(1.0),
            _ => 1.0,
        };
    let violation = p.set.violation(x)?;
    if violation > slack {
        return Err(FedError::usage(format!(
            "candidate lies outside the feasible set by {violation:e}"
        )));
    }
    let g = p.gradient(x);
    let gap = match p.set {
        ConstraintSet::Unconstrained => return Ok(g.iter().map(|v| v * v).sum::<f64>().sqrt()),
        ConstraintSet::Box { lo, hi } => g
            .iter()
            .zip(x.iter())
            .zip(lo.iter().zip(hi))
            .map(|((&gi, &xi), (&l, &h))| gi * (xi - if gi > 0.0 { l } else { h }))
            .sum::<f64>(),
        ConstraintSet::L2Ball { center, radius } => {
            let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            g.iter().zip(x.iter().zip(center.iter())).map(|(gi, (xi, ci))| gi * (xi - ci)).sum::<f64>()
                + radius * gn
        }
        ConstraintSet::L1Ball { center, radius } => {
            let ginf = g.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
            g.iter().zip(x.iter().zip(center.iter())).map(|(gi, (xi, ci))| gi * (xi - ci)).sum::<f64>()
                + radius * ginf
        }
    };
    Ok(gap.max(0.0))
}
